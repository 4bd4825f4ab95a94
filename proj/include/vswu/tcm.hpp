#pragma once

#include <string>
#include <vector>

#include "vswu/ops.hpp"
#include "vswu/params.hpp"

namespace vswu {

struct TcmConfig {
  bool enabled = true;
  bool include_center = true;  // center slot contributes its own context term
  bool tied_neighbors = false; // all non-center slots share one weight set
  std::size_t reduction = 4;   // bottleneck ratio of the transform stack
};

template <class T>
struct TcmOutput {
  Tensor<T> blended;  // [C,h,w]
  Tensor<T> tsc;      // routed to the decoder
};

template <class T>
struct ContextResult {
  Tensor<T> context;    // [C]
  Tensor<T> attention;  // [h*w], sums to 1
  Tensor<T> embedded;   // [C,h,w]
};

/// Temporal context blending: each frame slot pools its feature map into a
/// global context vector with softmax attention, transforms it through a
/// bottleneck stack, adds it to the slot's embedded map and contributes the
/// result to the center feature through a learned scalar gate.
template <class T>
class TemporalContext {
 public:
  struct SlotWeights {
    Tensor<T> key_w;         // 1x1 conv C -> 1, no bias (it would cancel in the softmax)
    Tensor<T> t1_w, t1_b;    // C -> C/r
    Tensor<T> ln_g, ln_b;    // over C/r
    Tensor<T> t2_w, t2_b;    // C/r -> C
    Tensor<T> gate;          // [1], initialized to 0
  };

  TemporalContext(std::size_t channels, std::size_t slots, const TcmConfig& cfg, ParameterStore<T>& store, Rng& rng)
      : cfg_(cfg), channels_(channels), slots_(slots) {
    if (slots % 2 == 0) throw std::invalid_argument("tcm: slot count must be odd");
    const std::size_t c = channels;
    const std::size_t hid = std::max<std::size_t>(1, c / std::max<std::size_t>(1, cfg.reduction));
    emb_w_ = store.add("b.emb.w", {c, c, 1, 1}, Init::he(c), rng);
    emb_b_ = store.add("b.emb.b", {c}, Init::zeros(), rng);

    const std::size_t center = (slots - 1) / 2;
    slot_set_.assign(slots, 0);
    std::vector<std::string> set_names;
    if (cfg.tied_neighbors) {
      set_names = {"center", "neighbors"};
      for (std::size_t n = 0; n < slots; ++n) slot_set_[n] = n == center ? 0 : 1;
    } else {
      for (std::size_t n = 0; n < slots; ++n) {
        slot_set_[n] = n;
        set_names.push_back("slot" + std::to_string(n));
      }
    }
    for (std::size_t s = 0; s < set_names.size(); ++s) {
      const bool center_set = cfg.tied_neighbors ? s == 0 : s == center;
      const bool neighbor_set_unused = cfg.tied_neighbors && s == 1 && slots == 1;
      if ((center_set && !cfg.include_center) || neighbor_set_unused) {
        sets_.emplace_back();
        continue;
      }
      const std::string p = "b." + set_names[s];
      SlotWeights sw;
      sw.key_w = store.add(p + ".key.w", {1, c, 1, 1}, Init::he(c), rng);
      sw.t1_w = store.add(p + ".t1.w", {c, hid}, Init::he(c), rng);
      sw.t1_b = store.add(p + ".t1.b", {hid}, Init::zeros(), rng);
      sw.ln_g = store.add(p + ".ln.g", {hid}, Init::ones(), rng);
      sw.ln_b = store.add(p + ".ln.b", {hid}, Init::zeros(), rng);
      sw.t2_w = store.add(p + ".t2.w", {hid, c}, Init::he(hid), rng);
      sw.t2_b = store.add(p + ".t2.b", {c}, Init::zeros(), rng);
      sw.gate = store.add(p + ".gate", {1}, Init::zeros(), rng);
      sets_.push_back(std::move(sw));
    }
  }

  std::size_t slots() const { return slots_; }
  std::size_t center() const { return (slots_ - 1) / 2; }
  bool slot_active(std::size_t n) const { return cfg_.include_center || n != center(); }
  const SlotWeights& weights(std::size_t slot) const { return sets_.at(slot_set_.at(slot)); }
  const Tensor<T>& emb_w() const { return emb_w_; }
  const Tensor<T>& emb_b() const { return emb_b_; }

  /// Attention-pooled context of one slot's feature map.
  ContextResult<T> global_context(const Tensor<T>& x, std::size_t slot) const {
    if (slot >= slots_) throw std::out_of_range("tcm: slot index out of range");
    if (!slot_active(slot)) throw std::logic_error("tcm: slot has no weights (center excluded)");
    if (x.rank() != 3 || x.dim(0) != channels_) {
      throw DimensionError("tcm: expected [" + std::to_string(channels_) + ",h,w] feature, got " + shape_str(x.shape()));
    }
    const auto& sw = weights(slot);
    const std::size_t hw = x.dim(1) * x.dim(2);
    ContextResult<T> r;
    auto logits = reshape(conv2d(x, sw.key_w, 1, 0), {1, hw});
    r.attention = reshape(softmax(logits, -1), {hw});
    r.embedded = conv2d(x, emb_w_, 1, 0, emb_b_);
    auto pooled = matmul(reshape(r.embedded, {channels_, hw}), reshape(r.attention, {hw, 1}));
    r.context = reshape(pooled, {channels_});
    return r;
  }

  /// Bottleneck transform of a context vector: linear, layer norm, ReLU, linear.
  Tensor<T> transform(const Tensor<T>& context, std::size_t slot) const {
    const auto& sw = weights(slot);
    auto h = linear(reshape(context, {1, channels_}), sw.t1_w, sw.t1_b);
    h = relu(layer_norm(h, sw.ln_g, sw.ln_b));
    return reshape(linear(h, sw.t2_w, sw.t2_b), {channels_});
  }

  TcmOutput<T> blend(const std::vector<Tensor<T>>& features) const {
    if (features.size() != slots_) {
      throw DimensionError("tcm: expected " + std::to_string(slots_) + " frame features, got " +
                           std::to_string(features.size()));
    }
    for (const auto& f : features) {
      if (f.shape() != features[0].shape()) {
        throw DimensionError("tcm: shape mismatch across frames " + shape_str(features[0].shape()) + " vs " +
                             shape_str(f.shape()));
      }
    }
    auto blended = features[center()];
    for (std::size_t n = 0; n < slots_; ++n) {
      if (!slot_active(n)) continue;
      auto ctx = global_context(features[n], n);
      auto g = add_channel(ctx.embedded, transform(ctx.context, n));
      blended = add(blended, scale_by(g, weights(n).gate));
    }
    return {blended, blended};
  }

 private:
  TcmConfig cfg_;
  std::size_t channels_, slots_;
  Tensor<T> emb_w_, emb_b_;
  std::vector<std::size_t> slot_set_;
  std::vector<SlotWeights> sets_;
};

template <class T>
TcmOutput<T> tcm_blend(const std::vector<Tensor<T>>& features, const TemporalContext<T>& tcm) {
  return tcm.blend(features);
}

/// Ablation path: the center feature passes through untouched.
template <class T>
TcmOutput<T> tcm_bypass(const std::vector<Tensor<T>>& features) {
  if (features.size() % 2 == 0) throw DimensionError("tcm_bypass: frame count must be odd");
  const auto& c = features[(features.size() - 1) / 2];
  return {c, c};
}

}  // namespace vswu
