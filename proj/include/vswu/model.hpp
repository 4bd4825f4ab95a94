#pragma once

#include <memory>
#include <optional>
#include <string>

#include "vswu/backbone.hpp"
#include "vswu/decoder.hpp"
#include "vswu/swin.hpp"
#include "vswu/tcm.hpp"

namespace vswu {

struct ModelConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t snippet_t = 5;
  BackboneConfig backbone;
  TcmConfig tcm;
  SwinConfig swin;
  DecoderConfig decoder;

  std::size_t token_grid_h() const { return height / 16 / swin.patch_size; }
  std::size_t token_grid_w() const { return width / 16 / swin.patch_size; }

  void validate() const {
    if (height % 16 != 0 || width % 16 != 0 || height == 0 || width == 0) {
      throw std::invalid_argument("model: height and width must be positive multiples of 16");
    }
    if (snippet_t % 2 == 0) throw std::invalid_argument("model: snippet_t must be odd");
    backbone.validate();
    swin.validate();
    if ((height / 16) % swin.patch_size != 0 || (width / 16) % swin.patch_size != 0) {
      throw std::invalid_argument("model: 1/16 feature map not divisible by the patch size");
    }
  }
};

/// Intermediate values of one forward pass, for explainability and tests.
template <class T>
struct ForwardTrace {
  BackboneOutput<T> backbone;       // batched over frames
  std::vector<Tensor<T>> deep;      // per-frame deep features
  TcmOutput<T> tcm;
  TokenGrid<T> tokens;
  std::vector<Tensor<T>> decoder_stages;
  Tensor<T> decoded;
};

/// Backbone (a) -> temporal context (b) -> Swin encoder (c) -> cascaded
/// decoder (d) -> segmentation head (e). Input: [t,1,H,W] snippet frames;
/// output: two probability maps for the center frame.
template <class T>
class VideoSwinUNet {
 public:
  explicit VideoSwinUNet(const ModelConfig& cfg, std::uint64_t seed = 42) : cfg_(cfg) {
    cfg_.validate();
    // One derived stream per component so toggling one component does not
    // perturb the initialization of the others.
    Rng rng_a(derive_seed(seed, {0})), rng_b(derive_seed(seed, {1})), rng_c(derive_seed(seed, {2})),
        rng_d(derive_seed(seed, {3})), rng_e(derive_seed(seed, {4}));
    const auto& ch = cfg_.backbone.stage_channels;
    backbone_ = std::make_unique<Backbone<T>>(cfg_.backbone, store_, rng_a);
    if (cfg_.tcm.enabled) tcm_ = std::make_unique<TemporalContext<T>>(ch[3], cfg_.snippet_t, cfg_.tcm, store_, rng_b);
    const std::size_t grid = std::min(cfg_.token_grid_h(), cfg_.token_grid_w());
    encoder_ = std::make_unique<SwinEncoder<T>>(cfg_.swin, ch[3], grid, store_, rng_c);
    decoder_ = std::make_unique<Decoder<T>>(cfg_.decoder, encoder_->out_dim(), ch[3],
                                            std::array<std::size_t, 3>{ch[2], ch[1], ch[0]}, store_, rng_d);
    head_ = std::make_unique<SegHead<T>>(cfg_.decoder.channels[3], store_, rng_e);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }

  const Backbone<T>& backbone() const { return *backbone_; }
  const TemporalContext<T>* tcm() const { return tcm_.get(); }
  const SwinEncoder<T>& encoder() const { return *encoder_; }
  const Decoder<T>& decoder() const { return *decoder_; }
  const SegHead<T>& head() const { return *head_; }

  SegmentationOutput<T> forward(const Tensor<T>& frames, ForwardTrace<T>* trace = nullptr) const {
    if (frames.rank() != 4 || frames.dim(1) != 1) {
      throw DimensionError("model: expected snippet frames [t,1,H,W], got " + shape_str(frames.shape()));
    }
    if (frames.dim(0) != cfg_.snippet_t) {
      throw DimensionError("model: configured for t=" + std::to_string(cfg_.snippet_t) + ", got " +
                           std::to_string(frames.dim(0)) + " frames");
    }
    const std::size_t t = frames.dim(0), center = (t - 1) / 2;
    auto bb = backbone_->forward(frames);
    std::vector<Tensor<T>> deep;
    deep.reserve(t);
    for (std::size_t i = 0; i < t; ++i) deep.push_back(slice0(bb.deep, i));
    if (trace) trace->deep = deep;
    auto blended = tcm_ ? tcm_->blend(deep) : tcm_bypass(deep);
    auto tokens = encoder_->forward(blended.blended);
    std::array<Tensor<T>, 3> skips{slice0(bb.s3, center), slice0(bb.s2, center), slice0(bb.s1, center)};
    std::vector<Tensor<T>> stages;
    auto decoded = decoder_->forward(tokens, blended.tsc, skips, trace ? &stages : nullptr);
    auto out = head_->forward(decoded);
    if (trace) {
      trace->backbone = bb;
      trace->tcm = blended;
      trace->tokens = tokens;
      trace->decoder_stages = std::move(stages);
      trace->decoded = decoded;
    }
    return out;
  }

  /// Copies every parameter whose name exists in `other` with equal shape.
  /// Returns the number of tensors copied.
  template <class U>
  std::size_t copy_parameters_from(const VideoSwinUNet<U>& other) {
    std::size_t copied = 0;
    for (auto& [name, p] : store_.entries()) {
      if (!other.params().contains(name)) continue;
      auto src = other.params().get(name);
      if (src.shape() != p.shape()) continue;
      auto dst = Tensor<T>(p).mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
      ++copied;
    }
    return copied;
  }

 private:
  ModelConfig cfg_;
  ParameterStore<T> store_;
  std::unique_ptr<Backbone<T>> backbone_;
  std::unique_ptr<TemporalContext<T>> tcm_;
  std::unique_ptr<SwinEncoder<T>> encoder_;
  std::unique_ptr<Decoder<T>> decoder_;
  std::unique_ptr<SegHead<T>> head_;
};

}  // namespace vswu
