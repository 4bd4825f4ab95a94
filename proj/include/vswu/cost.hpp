#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vswu/model.hpp"

namespace vswu {

// Closed-form parameter and FLOP counts. FLOPs follow the runtime counter:
// two per multiply-accumulate in convolutions and (batched) matrix
// products; element-wise ops, norms and softmax are not counted.

inline std::uint64_t conv_params(std::size_t cin, std::size_t cout, std::size_t k, bool bias = true) {
  return static_cast<std::uint64_t>(cout) * cin * k * k + (bias ? cout : 0);
}

inline std::uint64_t linear_params(std::size_t in, std::size_t out, bool bias = true) {
  return static_cast<std::uint64_t>(in) * out + (bias ? out : 0);
}

/// Output extent of a convolution along one axis.
inline std::size_t conv_out(std::size_t n, std::size_t k, std::size_t stride, std::size_t pad) {
  return (n + 2 * pad - k) / stride + 1;
}

inline std::uint64_t conv_flops(std::size_t cin, std::size_t cout, std::size_t k, std::size_t ho, std::size_t wo) {
  return 2ULL * k * k * cin * cout * ho * wo;
}

inline std::uint64_t linear_flops(std::size_t rows, std::size_t in, std::size_t out) { return 2ULL * rows * in * out; }

/// Multi-head self-attention over `windows` groups of `len` tokens of width
/// `dim`: q/k/v/o projections plus QK^T and AV.
inline std::uint64_t attention_flops(std::size_t windows, std::size_t len, std::size_t dim, std::size_t heads) {
  const std::uint64_t tokens = static_cast<std::uint64_t>(windows) * len;
  const std::uint64_t proj = 4 * linear_flops(tokens, dim, dim);
  const std::uint64_t d = dim / heads;
  const std::uint64_t core = 2 * (2ULL * windows * heads * len * len * d);
  return proj + core;
}

/// Windowed attention on a gh x gw grid with M x M windows: linear in tokens.
inline std::uint64_t windowed_attention_flops(std::size_t gh, std::size_t gw, std::size_t m, std::size_t dim,
                                              std::size_t heads) {
  return attention_flops((gh / m) * (gw / m), m * m, dim, heads);
}

/// Global attention over all gh*gw tokens: quadratic in tokens.
inline std::uint64_t dense_attention_flops(std::size_t gh, std::size_t gw, std::size_t dim, std::size_t heads) {
  return attention_flops(1, gh * gw, dim, heads);
}

struct ComponentCost {
  std::string component;  // "a".."e"
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct ModelCost {
  std::vector<ComponentCost> components;

  std::uint64_t params() const {
    std::uint64_t n = 0;
    for (const auto& c : components) n += c.params;
    return n;
  }
  std::uint64_t flops() const {
    std::uint64_t n = 0;
    for (const auto& c : components) n += c.flops;
    return n;
  }
};

/// Per-component parameters and forward FLOPs of one snippet.
inline ModelCost model_cost(const ModelConfig& cfg) {
  cfg.validate();
  const auto& ch = cfg.backbone.stage_channels;
  const std::size_t t = cfg.snippet_t;
  ModelCost out;

  // a: backbone, applied to every frame
  {
    ComponentCost a{"a"};
    std::size_t h = conv_out(cfg.height, 3, 2, 1), w = conv_out(cfg.width, 3, 2, 1);
    a.params += conv_params(1, ch[0], 3);
    a.flops += conv_flops(1, ch[0], 3, h, w);
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t b = 0; b < cfg.backbone.blocks_per_stage; ++b) {
        const std::size_t cin = b == 0 ? ch[s] : ch[s + 1], cout = ch[s + 1];
        if (b == 0) {
          const std::size_t oh = conv_out(h, 1, 2, 0), ow = conv_out(w, 1, 2, 0);
          a.params += conv_params(cin, cout, 1);
          a.flops += conv_flops(cin, cout, 1, oh, ow);
          h = conv_out(h, 3, 2, 1);
          w = conv_out(w, 3, 2, 1);
        }
        a.params += conv_params(cin, cout, 3) + conv_params(cout, cout, 3);
        a.flops += conv_flops(cin, cout, 3, h, w) + conv_flops(cout, cout, 3, h, w);
      }
    }
    a.flops *= t;
    out.components.push_back(a);
  }

  const std::size_t c = ch[3], fh = cfg.height / 16, fw = cfg.width / 16, hw = fh * fw;

  // b: temporal context
  {
    ComponentCost b{"b"};
    if (cfg.tcm.enabled) {
      const std::size_t hid = std::max<std::size_t>(1, c / std::max<std::size_t>(1, cfg.tcm.reduction));
      const std::uint64_t slot_params = conv_params(c, 1, 1, false) + linear_params(c, hid) + 2 * hid +
                                        linear_params(hid, c) + 1;
      const std::size_t active = cfg.tcm.include_center ? t : t - 1;
      std::size_t sets = active;
      if (cfg.tcm.tied_neighbors) sets = (cfg.tcm.include_center ? 1 : 0) + (t > 1 ? 1 : 0);
      b.params = conv_params(c, c, 1) + sets * slot_params;
      const std::uint64_t slot_flops = conv_flops(c, 1, 1, fh, fw) + conv_flops(c, c, 1, fh, fw) +
                                       linear_flops(c, hw, 1) + linear_flops(1, c, hid) + linear_flops(1, hid, c);
      b.flops = active * slot_flops;
    }
    out.components.push_back(b);
  }

  // c: Swin encoder
  std::size_t token_dim = cfg.swin.embed_dim;
  {
    ComponentCost e{"c"};
    const auto& sc = cfg.swin;
    const std::size_t p = sc.patch_size;
    std::size_t gh = fh / p, gw = fw / p, dim = sc.embed_dim;
    const bool merge = sc.merge.value_or(std::min(gh, gw) >= 8);
    e.params += linear_params(c * p * p, dim);
    e.flops += linear_flops(gh * gw, c * p * p, dim);
    for (std::size_t s = 0; s < sc.depths.size(); ++s) {
      const std::size_t m = sc.window_sizes[s], hidden = dim * sc.mlp_ratio, n = gh * gw;
      const std::uint64_t block_params = 4 * dim + 3 * linear_params(dim, dim) + linear_params(dim, dim, false) +
                                         static_cast<std::uint64_t>(2 * m - 1) * (2 * m - 1) * sc.heads[s] +
                                         linear_params(dim, hidden) + linear_params(hidden, dim);
      const std::uint64_t block_flops =
          windowed_attention_flops(gh, gw, m, dim, sc.heads[s]) + linear_flops(n, dim, hidden) + linear_flops(n, hidden, dim);
      e.params += sc.depths[s] * block_params;
      e.flops += sc.depths[s] * block_flops;
      if (merge && s + 1 < sc.depths.size()) {
        gh /= 2;
        gw /= 2;
        e.params += 8 * dim + linear_params(4 * dim, 2 * dim, false);
        e.flops += linear_flops(gh * gw, 4 * dim, 2 * dim);
        dim *= 2;
      }
    }
    e.params += 2 * dim;
    token_dim = dim;
    out.components.push_back(e);
  }

  // d: decoder
  const auto& dc = cfg.decoder.channels;
  {
    ComponentCost d{"d"};
    const std::array<std::size_t, 4> cin{token_dim, dc[0], dc[1], dc[2]};
    const std::array<std::size_t, 4> skip{ch[2], ch[1], ch[0], 0};
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t in = cin[s] + (cfg.decoder.skips_enabled ? skip[s] : 0);
      const std::size_t scale = std::size_t{1} << (3 - s);
      const std::size_t oh = cfg.height / scale, ow = cfg.width / scale;
      d.params += conv_params(in, dc[s], 3);
      d.flops += conv_flops(in, dc[s], 3, oh, ow);
      if (s == 0 && cfg.decoder.tsc_enabled) {
        d.params += conv_params(c, dc[0], 3, false);
        d.flops += conv_flops(c, dc[0], 3, oh, ow);
      }
    }
    out.components.push_back(d);
  }

  // e: head
  {
    ComponentCost e{"e"};
    e.params = conv_params(dc[3], dc[3], 3) + conv_params(dc[3], 2, 1);
    e.flops = conv_flops(dc[3], dc[3], 3, cfg.height, cfg.width) + conv_flops(dc[3], 2, 1, cfg.height, cfg.width);
    out.components.push_back(e);
  }
  return out;
}

/// Measured counterpart: FLOPs recorded by one forward pass.
template <class T>
std::uint64_t measured_forward_flops(const VideoSwinUNet<T>& model) {
  const auto& cfg = model.config();
  NoGradGuard guard;
  Tensor<T> frames = Tensor<T>::zeros({cfg.snippet_t, 1, cfg.height, cfg.width});
  reset_flops();
  model.forward(frames);
  return flop_count();
}

}  // namespace vswu
