#pragma once

#include <array>
#include <string>

#include "vswu/backbone.hpp"
#include "vswu/swin.hpp"

namespace vswu {

struct DecoderConfig {
  std::array<std::size_t, 4> channels{128, 64, 32, 16};
  bool tsc_enabled = true;
  bool skips_enabled = true;
};

template <class T>
struct SegmentationOutput {
  Tensor<T> logits;  // [2,H,W], pre-sigmoid
  Tensor<T> probs;   // [2,H,W]; channel 0 bolus, channel 1 pharynx
};

/// Tokens [N,D] on a gh x gw grid -> [D,gh,gw].
template <class T>
Tensor<T> tokens_to_map(const TokenGrid<T>& g) {
  return reshape(transpose2d(g.tokens), {g.dim(), g.gh, g.gw});
}

/// Cascaded up-sampler: four (nearest x2 -> concat skip -> conv3x3 -> ReLU)
/// stages from 1/16 to full resolution. The temporal skip joins at 1/16;
/// its weights form a separate block of the first conv so the
/// configuration without it shares every other parameter by name.
template <class T>
class Decoder {
 public:
  Decoder(const DecoderConfig& cfg, std::size_t token_dim, std::size_t tsc_channels,
          const std::array<std::size_t, 3>& skip_channels, ParameterStore<T>& store, Rng& rng)
      : cfg_(cfg) {
    const auto& ch = cfg_.channels;
    std::array<std::size_t, 4> cin{token_dim, ch[0], ch[1], ch[2]};
    std::array<std::size_t, 4> skip{skip_channels[0], skip_channels[1], skip_channels[2], 0};
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t in = cin[s] + (cfg_.skips_enabled ? skip[s] : 0);
      stages_[s] = ConvLayer<T>::make(store, "d.up" + std::to_string(s + 1), in, ch[s], 3, 1, rng);
    }
    if (cfg_.tsc_enabled) {
      tsc_w_ = store.add("d.up1.tsc.w", {ch[0], tsc_channels, 3, 3}, Init::he(tsc_channels * 9), rng);
    }
  }

  const DecoderConfig& config() const { return cfg_; }
  const ConvLayer<T>& stage(std::size_t s) const { return stages_.at(s); }
  const Tensor<T>& tsc_weight() const { return tsc_w_; }

  /// skips = (s3, s2, s1) for the center frame. `stage_outputs`, when
  /// given, receives the four intermediate maps.
  Tensor<T> forward(const TokenGrid<T>& tokens, const Tensor<T>& tsc, const std::array<Tensor<T>, 3>& skips,
                    std::vector<Tensor<T>>* stage_outputs = nullptr) const {
    auto x = tokens_to_map(tokens);
    const std::size_t target_h = skips[0].dim(1) / 2, target_w = skips[0].dim(2) / 2;
    if (x.dim(1) != target_h || x.dim(2) != target_w) {
      if (target_h % x.dim(1) != 0 || target_h / x.dim(1) != target_w / x.dim(2)) {
        throw DimensionError("decoder: token grid " + shape_str(x.shape()) + " cannot be brought to 1/16 resolution " +
                             std::to_string(target_h) + "x" + std::to_string(target_w));
      }
      x = upsample_nearest(x, target_h / x.dim(1));
    }
    for (std::size_t s = 0; s < 4; ++s) {
      auto up = upsample_nearest(x, 2);
      if (cfg_.skips_enabled && s < 3) {
        if (skips[s].dim(1) != up.dim(1) || skips[s].dim(2) != up.dim(2)) {
          throw DimensionError("decoder: skip " + shape_str(skips[s].shape()) + " does not match stage resolution " +
                               shape_str(up.shape()));
        }
        up = concat(std::vector<Tensor<T>>{up, skips[s]}, 0);
      }
      auto y = stages_[s](up);
      if (s == 0 && cfg_.tsc_enabled) {
        if (tsc.dim(1) != target_h || tsc.dim(2) != target_w) {
          throw DimensionError("decoder: temporal skip " + shape_str(tsc.shape()) + " is not at 1/16 resolution");
        }
        y = add(y, conv2d(upsample_nearest(tsc, 2), tsc_w_, 1, 1));
      }
      x = relu(y);
      if (stage_outputs) stage_outputs->push_back(x);
    }
    return x;
  }

 private:
  DecoderConfig cfg_;
  std::array<ConvLayer<T>, 4> stages_;
  Tensor<T> tsc_w_;
};

/// Two-layer segmentation head: conv3x3 + ReLU, conv1x1 to 2 channels, sigmoid.
template <class T>
class SegHead {
 public:
  SegHead(std::size_t in_channels, ParameterStore<T>& store, Rng& rng) {
    conv1_ = ConvLayer<T>::make(store, "e.conv1", in_channels, in_channels, 3, 1, rng);
    conv2_ = ConvLayer<T>::make(store, "e.conv2", in_channels, 2, 1, 1, rng);
  }

  SegmentationOutput<T> forward(const Tensor<T>& x) const {
    auto logits = conv2_(relu(conv1_(x)));
    return {logits, sigmoid(logits)};
  }

  const ConvLayer<T>& conv1() const { return conv1_; }
  const ConvLayer<T>& conv2() const { return conv2_; }

 private:
  ConvLayer<T> conv1_, conv2_;
};

}  // namespace vswu
