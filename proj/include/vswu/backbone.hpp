#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "vswu/ops.hpp"
#include "vswu/params.hpp"

namespace vswu {

struct BackboneConfig {
  std::array<std::size_t, 4> stage_channels{16, 32, 64, 128};
  std::size_t blocks_per_stage = 2;

  void validate() const {
    for (std::size_t i = 0; i < 4; ++i) {
      if (stage_channels[i] < 1) throw std::invalid_argument("backbone: channel counts must be >= 1");
      if (i > 0 && stage_channels[i] <= stage_channels[i - 1]) {
        throw std::invalid_argument("backbone: stage channels must be strictly increasing");
      }
    }
    if (blocks_per_stage < 1) throw std::invalid_argument("backbone: blocks_per_stage must be >= 1");
  }
};

/// Skip taps at 1/2, 1/4, 1/8 and the deep feature at 1/16. Tensors are
/// [C,h,w] for a single frame and [t,C,h,w] for a batch of frames.
template <class T>
struct BackboneOutput {
  Tensor<T> s1, s2, s3, deep;

  BackboneOutput frame(std::size_t i) const { return {slice0(s1, i), slice0(s2, i), slice0(s3, i), slice0(deep, i)}; }
};

template <class T>
struct ConvLayer {
  Tensor<T> w, b;
  std::size_t stride = 1, pad = 0;

  static ConvLayer make(ParameterStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
                        std::size_t ksize, std::size_t stride, Rng& rng, bool with_bias = true) {
    ConvLayer c;
    c.w = store.add(name + ".w", {cout, cin, ksize, ksize}, Init::he(cin * ksize * ksize), rng);
    if (with_bias) c.b = store.add(name + ".b", {cout}, Init::zeros(), rng);
    c.stride = stride;
    c.pad = ksize / 2;
    return c;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, w, stride, pad, b); }
};

/// Residual CNN feature extractor: stride-2 stem, then three residual
/// stages each opened by a stride-2 projection block.
template <class T>
class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, ParameterStore<T>& store, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const auto& ch = cfg_.stage_channels;
    stem_ = ConvLayer<T>::make(store, "a.stem", 1, ch[0], 3, 2, rng);
    for (std::size_t s = 0; s < 3; ++s) {
      std::vector<Block> blocks;
      for (std::size_t b = 0; b < cfg_.blocks_per_stage; ++b) {
        const std::string name = "a.stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
        Block blk;
        const std::size_t cin = b == 0 ? ch[s] : ch[s + 1];
        const std::size_t stride = b == 0 ? 2 : 1;
        blk.conv1 = ConvLayer<T>::make(store, name + ".conv1", cin, ch[s + 1], 3, stride, rng);
        blk.conv2 = ConvLayer<T>::make(store, name + ".conv2", ch[s + 1], ch[s + 1], 3, 1, rng);
        if (b == 0) blk.proj = ConvLayer<T>::make(store, name + ".proj", cin, ch[s + 1], 1, 2, rng);
        blocks.push_back(std::move(blk));
      }
      stages_.push_back(std::move(blocks));
    }
  }

  const BackboneConfig& config() const { return cfg_; }

  /// frames: [1,H,W] (single frame) or [t,1,H,W].
  BackboneOutput<T> forward(const Tensor<T>& frames) const {
    const std::size_t r = frames.rank();
    if (r != 3 && r != 4) throw DimensionError("backbone: expected [1,H,W] or [t,1,H,W], got " + shape_str(frames.shape()));
    const std::size_t h = frames.dim(r - 2), w = frames.dim(r - 1);
    if (h % 16 != 0 || w % 16 != 0) {
      throw DimensionError("backbone: H and W must be divisible by 16, got " + shape_str(frames.shape()));
    }
    BackboneOutput<T> out;
    out.s1 = relu(stem_(frames));
    auto x = out.s1;
    for (std::size_t s = 0; s < 3; ++s) {
      x = run_stage(s, x);
      (s == 0 ? out.s2 : s == 1 ? out.s3 : out.deep) = x;
    }
    return out;
  }

  /// Residual stage s (0-based), exposed for the residual-identity test.
  Tensor<T> run_stage(std::size_t s, const Tensor<T>& x) const {
    auto y = x;
    for (const auto& blk : stages_[s]) {
      auto inner = blk.conv2(relu(blk.conv1(y)));
      auto skip = blk.proj ? (*blk.proj)(y) : y;
      y = relu(add(inner, skip));
    }
    return y;
  }

  struct Block {
    ConvLayer<T> conv1, conv2;
    std::optional<ConvLayer<T>> proj;
  };
  const ConvLayer<T>& stem() const { return stem_; }
  const std::vector<std::vector<Block>>& stages() const { return stages_; }

 private:
  BackboneConfig cfg_;
  ConvLayer<T> stem_;
  std::vector<std::vector<Block>> stages_;
};

template <class T>
BackboneOutput<T> backbone_forward(const Backbone<T>& net, const Tensor<T>& frame) {
  if (frame.rank() != 3 || frame.dim(0) != 1) {
    throw DimensionError("backbone_forward: expected a [1,H,W] frame, got " + shape_str(frame.shape()));
  }
  return net.forward(frame);
}

/// Applies the shared backbone to t frames; outputs are in input order.
template <class T>
std::vector<BackboneOutput<T>> backbone_batch(const Backbone<T>& net, const std::vector<Tensor<T>>& frames) {
  if (frames.empty()) throw DimensionError("backbone_batch: no frames");
  auto stacked = stack0(frames);
  auto out = net.forward(stacked);
  std::vector<BackboneOutput<T>> result;
  result.reserve(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) result.push_back(out.frame(i));
  return result;
}

}  // namespace vswu
