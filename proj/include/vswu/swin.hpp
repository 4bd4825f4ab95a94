#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "vswu/ops.hpp"
#include "vswu/params.hpp"

namespace vswu {

inline constexpr double kMaskedLogit = -1e9;

struct SwinConfig {
  std::size_t embed_dim = 64;
  std::vector<std::size_t> depths{2, 2};
  std::vector<std::size_t> heads{4, 4};
  std::vector<std::size_t> window_sizes{4, 4};
  std::size_t mlp_ratio = 4;
  std::size_t patch_size = 1;
  std::optional<bool> merge;  // unset: merge when the token grid is >= 8

  void validate() const {
    if (depths.empty() || depths.size() != heads.size() || depths.size() != window_sizes.size()) {
      throw std::invalid_argument("swin: depths, heads and window_sizes must have equal nonzero length");
    }
    for (auto d : depths) {
      if (d == 0 || d % 2 != 0) throw std::invalid_argument("swin: every stage depth must be even and positive");
    }
    for (auto m : window_sizes) {
      if (m == 0) throw std::invalid_argument("swin: window sizes must be positive");
    }
    if (embed_dim == 0 || patch_size == 0 || mlp_ratio == 0) throw std::invalid_argument("swin: zero-sized setting");
  }
};

template <class T>
struct TokenGrid {
  Tensor<T> tokens;  // [N, D], row-major over the grid
  std::size_t gh = 0, gw = 0;

  std::size_t dim() const { return tokens.dim(1); }
};

// ---------------------------------------------------------------------------
// Index maps

namespace detail {

inline IndexMap make_index(std::vector<std::size_t> v) {
  return std::make_shared<const std::vector<std::size_t>>(std::move(v));
}

/// Windowed token order: out[(w*M*M + i)*D + e] = in[token(w, i)*D + e].
inline std::vector<std::size_t> window_token_order(std::size_t gh, std::size_t gw, std::size_t m) {
  std::vector<std::size_t> order;
  order.reserve(gh * gw);
  for (std::size_t wy = 0; wy < gh / m; ++wy) {
    for (std::size_t wx = 0; wx < gw / m; ++wx) {
      for (std::size_t y = 0; y < m; ++y) {
        for (std::size_t x = 0; x < m; ++x) order.push_back((wy * m + y) * gw + wx * m + x);
      }
    }
  }
  return order;
}

inline IndexMap expand_rows(const std::vector<std::size_t>& rows, std::size_t d) {
  std::vector<std::size_t> idx(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t e = 0; e < d; ++e) idx[i * d + e] = rows[i] * d + e;
  }
  return make_index(std::move(idx));
}

inline std::vector<std::size_t> invert(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

}  // namespace detail

inline void require_window_divisible(std::size_t gh, std::size_t gw, std::size_t m) {
  if (m == 0 || gh % m != 0 || gw % m != 0) {
    throw DimensionError("token grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                         " is not divisible by window size " + std::to_string(m));
  }
}

/// [N,D] grid tokens -> [numWin, M*M, D].
template <class T>
Tensor<T> window_partition(const TokenGrid<T>& g, std::size_t m) {
  require_window_divisible(g.gh, g.gw, m);
  const std::size_t d = g.dim();
  auto idx = detail::expand_rows(detail::window_token_order(g.gh, g.gw, m), d);
  return gather(g.tokens, idx, Shape{(g.gh / m) * (g.gw / m), m * m, d});
}

/// Inverse of window_partition.
template <class T>
TokenGrid<T> window_reverse(const Tensor<T>& windows, std::size_t gh, std::size_t gw) {
  if (windows.rank() != 3) throw DimensionError("window_reverse: expected [numWin, M*M, D], got " + shape_str(windows.shape()));
  const auto m = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(windows.dim(1)))));
  require_window_divisible(gh, gw, m);
  if (m * m != windows.dim(1) || windows.dim(0) != (gh / m) * (gw / m)) {
    throw DimensionError("window_reverse: windows " + shape_str(windows.shape()) + " do not tile a " +
                         std::to_string(gh) + "x" + std::to_string(gw) + " grid");
  }
  const std::size_t d = windows.dim(2);
  auto idx = detail::expand_rows(detail::invert(detail::window_token_order(gh, gw, m)), d);
  return {gather(windows, idx, Shape{gh * gw, d}), gh, gw};
}

/// Cyclic shift by (-shift, -shift): out[y][x] = in[(y+shift)%gh][(x+shift)%gw].
/// A negative `shift` undoes it.
template <class T>
TokenGrid<T> cyclic_shift(const TokenGrid<T>& g, std::ptrdiff_t shift) {
  const auto gh = static_cast<std::ptrdiff_t>(g.gh), gw = static_cast<std::ptrdiff_t>(g.gw);
  std::vector<std::size_t> rows(g.gh * g.gw);
  for (std::ptrdiff_t y = 0; y < gh; ++y) {
    for (std::ptrdiff_t x = 0; x < gw; ++x) {
      const auto sy = ((y + shift) % gh + gh) % gh;
      const auto sx = ((x + shift) % gw + gw) % gw;
      rows[static_cast<std::size_t>(y * gw + x)] = static_cast<std::size_t>(sy * gw + sx);
    }
  }
  return {gather(g.tokens, detail::expand_rows(rows, g.dim()), g.tokens.shape()), g.gh, g.gw};
}

/// Row of the (2M-1)^2 bias table for every ordered token pair (i, j) of an
/// M x M window, flattened as i * M*M + j.
inline std::vector<std::size_t> build_relative_index(std::size_t m) {
  if (m == 0) throw std::invalid_argument("build_relative_index: M must be >= 1");
  const std::size_t l = m * m;
  std::vector<std::size_t> idx(l * l);
  for (std::size_t i = 0; i < l; ++i) {
    for (std::size_t j = 0; j < l; ++j) {
      const auto dy = static_cast<std::ptrdiff_t>(i / m) - static_cast<std::ptrdiff_t>(j / m);
      const auto dx = static_cast<std::ptrdiff_t>(i % m) - static_cast<std::ptrdiff_t>(j % m);
      const auto off = static_cast<std::ptrdiff_t>(m) - 1;
      idx[i * l + j] = static_cast<std::size_t>((dy + off) * (2 * static_cast<std::ptrdiff_t>(m) - 1) + (dx + off));
    }
  }
  return idx;
}

/// Additive attention mask for shifted windows, [numWin, M*M, M*M] with
/// entries 0 (same pre-shift region) or kMaskedLogit.
template <class T>
Tensor<T> build_shift_mask(std::size_t gh, std::size_t gw, std::size_t m, std::size_t shift) {
  require_window_divisible(gh, gw, m);
  if (shift == 0 || shift >= m) {
    throw std::invalid_argument("build_shift_mask: shift must satisfy 0 < shift < M, got " + std::to_string(shift));
  }
  // Region labels from the 3x3 band construction on the shifted grid.
  auto band = [m, shift](std::size_t p, std::size_t extent) -> std::size_t {
    if (p < extent - m) return 0;
    if (p < extent - shift) return 1;
    return 2;
  };
  std::vector<std::size_t> label(gh * gw);
  for (std::size_t y = 0; y < gh; ++y) {
    for (std::size_t x = 0; x < gw; ++x) label[y * gw + x] = band(y, gh) * 3 + band(x, gw);
  }
  const auto order = detail::window_token_order(gh, gw, m);
  const std::size_t l = m * m, nw = (gh / m) * (gw / m);
  std::vector<T> mask(nw * l * l, T(0));
  for (std::size_t w = 0; w < nw; ++w) {
    for (std::size_t i = 0; i < l; ++i) {
      for (std::size_t j = 0; j < l; ++j) {
        if (label[order[w * l + i]] != label[order[w * l + j]]) mask[(w * l + i) * l + j] = T(kMaskedLogit);
      }
    }
  }
  return Tensor<T>(Shape{nw, l, l}, std::move(mask));
}

template <class T>
struct AttentionParams {
  // [D,D] / [D]. A key bias shifts every logit of a query row equally and
  // cancels in the softmax, so bk is normally left undefined.
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> bias_table;                       // [(2M-1)^2, heads]; undefined means no bias
};

/// Multi-head self-attention inside each window:
/// softmax(Q K^T / sqrt(d) + B + mask) V, followed by the output projection.
/// windows: [numWin, L, D]; mask: optional [numWin, L, L].
template <class T>
Tensor<T> window_attention(const Tensor<T>& windows, const AttentionParams<T>& p, std::size_t heads,
                           const Tensor<T>& mask = Tensor<T>()) {
  if (windows.rank() != 3) throw DimensionError("window_attention: expected [numWin, L, D], got " + shape_str(windows.shape()));
  const std::size_t nw = windows.dim(0), l = windows.dim(1), d_model = windows.dim(2);
  if (heads == 0 || d_model % heads != 0) {
    throw std::invalid_argument("window_attention: model dim " + std::to_string(d_model) +
                                " not divisible by heads " + std::to_string(heads));
  }
  const std::size_t d = d_model / heads;
  auto flat = reshape(windows, {nw * l, d_model});
  auto q = linear(flat, p.wq, p.bq);
  auto k = linear(flat, p.wk, p.bk);
  auto v = linear(flat, p.wv, p.bv);

  // [nw*l, D] -> [nw*heads, l, d]
  std::vector<std::size_t> split(nw * l * d_model);
  for (std::size_t w = 0; w < nw; ++w) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < l; ++i) {
        for (std::size_t e = 0; e < d; ++e) split[((w * heads + h) * l + i) * d + e] = (w * l + i) * d_model + h * d + e;
      }
    }
  }
  auto split_idx = detail::make_index(split);
  const Shape head_shape{nw * heads, l, d};
  auto qh = gather(q, split_idx, head_shape);
  auto kh = gather(k, split_idx, head_shape);
  auto vh = gather(v, split_idx, head_shape);

  auto scores = scale(bmm(qh, kh, true), T(1) / std::sqrt(static_cast<T>(d)));
  const Shape score_shape{nw * heads, l, l};
  if (p.bias_table.defined()) {
    const auto m = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(l))));
    if (m * m != l || p.bias_table.dim(0) != (2 * m - 1) * (2 * m - 1) || p.bias_table.dim(1) != heads) {
      throw DimensionError("window_attention: bias table " + shape_str(p.bias_table.shape()) +
                           " does not match window length " + std::to_string(l));
    }
    const auto rel = build_relative_index(m);
    std::vector<std::size_t> bidx(nw * heads * l * l);
    for (std::size_t w = 0; w < nw; ++w) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t ij = 0; ij < l * l; ++ij) bidx[(w * heads + h) * l * l + ij] = rel[ij] * heads + h;
      }
    }
    scores = add(scores, gather(p.bias_table, detail::make_index(std::move(bidx)), score_shape));
  }
  if (mask.defined()) {
    if (mask.shape() != Shape{nw, l, l}) {
      throw DimensionError("window_attention: mask " + shape_str(mask.shape()) + " does not match " +
                           shape_str(Shape{nw, l, l}));
    }
    std::vector<T> expanded(nw * heads * l * l);
    for (std::size_t w = 0; w < nw; ++w) {
      for (std::size_t h = 0; h < heads; ++h) {
        std::copy_n(mask.data().data() + w * l * l, l * l, expanded.data() + (w * heads + h) * l * l);
      }
    }
    scores = add(scores, Tensor<T>(score_shape, std::move(expanded)));
  }
  auto attn = softmax(scores, -1);
  auto ctx = bmm(attn, vh);
  auto merged = gather(ctx, detail::make_index(detail::invert(split)), Shape{nw * l, d_model});
  return reshape(linear(merged, p.wo, p.bo), {nw, l, d_model});
}

template <class T>
struct SwinBlockParams {
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  AttentionParams<T> attn;
  Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;

  static SwinBlockParams make(ParameterStore<T>& store, const std::string& name, std::size_t dim, std::size_t heads,
                              std::size_t window, std::size_t mlp_ratio, Rng& rng) {
    SwinBlockParams p;
    const std::size_t hidden = dim * mlp_ratio;
    p.ln1_g = store.add(name + ".ln1.g", {dim}, Init::ones(), rng);
    p.ln1_b = store.add(name + ".ln1.b", {dim}, Init::zeros(), rng);
    p.attn.wq = store.add(name + ".attn.q.w", {dim, dim}, Init::trunc_normal(), rng);
    p.attn.bq = store.add(name + ".attn.q.b", {dim}, Init::zeros(), rng);
    p.attn.wk = store.add(name + ".attn.k.w", {dim, dim}, Init::trunc_normal(), rng);
    p.attn.wv = store.add(name + ".attn.v.w", {dim, dim}, Init::trunc_normal(), rng);
    p.attn.bv = store.add(name + ".attn.v.b", {dim}, Init::zeros(), rng);
    p.attn.wo = store.add(name + ".attn.o.w", {dim, dim}, Init::trunc_normal(), rng);
    p.attn.bo = store.add(name + ".attn.o.b", {dim}, Init::zeros(), rng);
    p.attn.bias_table = store.add(name + ".attn.rel_bias", {(2 * window - 1) * (2 * window - 1), heads}, Init::zeros(), rng);
    p.ln2_g = store.add(name + ".ln2.g", {dim}, Init::ones(), rng);
    p.ln2_b = store.add(name + ".ln2.b", {dim}, Init::zeros(), rng);
    p.fc1_w = store.add(name + ".mlp.fc1.w", {dim, hidden}, Init::trunc_normal(), rng);
    p.fc1_b = store.add(name + ".mlp.fc1.b", {hidden}, Init::zeros(), rng);
    p.fc2_w = store.add(name + ".mlp.fc2.w", {hidden, dim}, Init::trunc_normal(), rng);
    p.fc2_b = store.add(name + ".mlp.fc2.b", {dim}, Init::zeros(), rng);
    return p;
  }
};

/// One pre-norm Swin block. shift == 0 gives W-MSA, shift > 0 SW-MSA.
template <class T>
TokenGrid<T> swin_block(const TokenGrid<T>& g, const SwinBlockParams<T>& p, std::size_t m, std::size_t heads,
                        std::size_t shift) {
  require_window_divisible(g.gh, g.gw, m);
  TokenGrid<T> h{layer_norm(g.tokens, p.ln1_g, p.ln1_b), g.gh, g.gw};
  Tensor<T> mask;
  if (shift > 0) {
    h = cyclic_shift(h, static_cast<std::ptrdiff_t>(shift));
    mask = build_shift_mask<T>(g.gh, g.gw, m, shift);
  }
  auto attn = window_reverse(window_attention(window_partition(h, m), p.attn, heads, mask), g.gh, g.gw);
  if (shift > 0) attn = cyclic_shift(attn, -static_cast<std::ptrdiff_t>(shift));
  auto x = add(g.tokens, attn.tokens);
  auto mlp = linear(gelu(linear(layer_norm(x, p.ln2_g, p.ln2_b), p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b);
  return {add(x, mlp), g.gh, g.gw};
}

/// W-MSA block followed by an SW-MSA block with shift floor(M/2).
template <class T>
TokenGrid<T> swin_block_pair(const TokenGrid<T>& g, const SwinBlockParams<T>& first, const SwinBlockParams<T>& second,
                             std::size_t m, std::size_t heads) {
  return swin_block(swin_block(g, first, m, heads, 0), second, m, heads, m / 2);
}

/// Non-overlapping P x P patches of a [C,H,W] map projected to D. No
/// positional embedding is added.
template <class T>
TokenGrid<T> patch_embed(const Tensor<T>& feature, std::size_t patch, const Tensor<T>& w, const Tensor<T>& b = Tensor<T>()) {
  if (feature.rank() != 3) throw DimensionError("patch_embed: expected [C,H,W], got " + shape_str(feature.shape()));
  const std::size_t c = feature.dim(0), h = feature.dim(1), wd = feature.dim(2);
  if (patch == 0 || h % patch != 0 || wd % patch != 0) {
    throw DimensionError("patch_embed: extents " + shape_str(feature.shape()) + " not divisible by patch size " +
                         std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = wd / patch, plen = c * patch * patch;
  std::vector<std::size_t> idx(gh * gw * plen);
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < patch; ++y) {
          for (std::size_t x = 0; x < patch; ++x) {
            idx[(py * gw + px) * plen + (ch * patch + y) * patch + x] = (ch * h + py * patch + y) * wd + px * patch + x;
          }
        }
      }
    }
  }
  auto patches = gather(feature, detail::make_index(std::move(idx)), Shape{gh * gw, plen});
  return {linear(patches, w, b), gh, gw};
}

/// 2x2 neighborhoods concatenated (order (0,0),(0,1),(1,0),(1,1)), layer
/// normalized over 4D and projected to 2D.
template <class T>
TokenGrid<T> patch_merging(const TokenGrid<T>& g, const Tensor<T>& ln_g, const Tensor<T>& ln_b, const Tensor<T>& w) {
  if (g.gh % 2 != 0 || g.gw % 2 != 0) {
    throw DimensionError("patch_merging: grid " + std::to_string(g.gh) + "x" + std::to_string(g.gw) + " is not even");
  }
  const std::size_t d = g.dim(), oh = g.gh / 2, ow = g.gw / 2;
  std::vector<std::size_t> idx(oh * ow * 4 * d);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      for (std::size_t q = 0; q < 4; ++q) {
        const std::size_t src = (2 * y + q / 2) * g.gw + 2 * x + q % 2;
        for (std::size_t e = 0; e < d; ++e) idx[((y * ow + x) * 4 + q) * d + e] = src * d + e;
      }
    }
  }
  auto cat = gather(g.tokens, detail::make_index(std::move(idx)), Shape{oh * ow, 4 * d});
  return {linear(layer_norm(cat, ln_g, ln_b), w), oh, ow};
}

/// Token encoder: patch embedding, then per stage depth/2 W-MSA/SW-MSA
/// pairs with optional patch merging between stages, then a final norm.
template <class T>
class SwinEncoder {
 public:
  SwinEncoder(const SwinConfig& cfg, std::size_t in_channels, std::size_t grid, ParameterStore<T>& store, Rng& rng)
      : cfg_(cfg) {
    cfg_.validate();
    merge_ = cfg_.merge.value_or(grid >= 8);
    std::size_t dim = cfg_.embed_dim;
    embed_w_ = store.add("c.patch_embed.w", {in_channels * cfg_.patch_size * cfg_.patch_size, dim},
                         Init::trunc_normal(), rng);
    embed_b_ = store.add("c.patch_embed.b", {dim}, Init::zeros(), rng);
    for (std::size_t s = 0; s < cfg_.depths.size(); ++s) {
      if (dim % cfg_.heads[s] != 0) {
        throw std::invalid_argument("swin: dim " + std::to_string(dim) + " not divisible by heads " +
                                    std::to_string(cfg_.heads[s]));
      }
      Stage st;
      for (std::size_t b = 0; b < cfg_.depths[s]; ++b) {
        st.blocks.push_back(SwinBlockParams<T>::make(store, "c.stage" + std::to_string(s) + ".block" + std::to_string(b),
                                                     dim, cfg_.heads[s], cfg_.window_sizes[s], cfg_.mlp_ratio, rng));
      }
      if (merge_ && s + 1 < cfg_.depths.size()) {
        const std::string mn = "c.merge" + std::to_string(s);
        st.merge_ln_g = store.add(mn + ".ln.g", {4 * dim}, Init::ones(), rng);
        st.merge_ln_b = store.add(mn + ".ln.b", {4 * dim}, Init::zeros(), rng);
        st.merge_w = store.add(mn + ".reduction.w", {4 * dim, 2 * dim}, Init::trunc_normal(), rng);
        dim *= 2;
      }
      stages_.push_back(std::move(st));
    }
    out_dim_ = dim;
    norm_g_ = store.add("c.norm.g", {dim}, Init::ones(), rng);
    norm_b_ = store.add("c.norm.b", {dim}, Init::zeros(), rng);
  }

  const SwinConfig& config() const { return cfg_; }
  bool merges() const { return merge_; }
  std::size_t out_dim() const { return out_dim_; }

  TokenGrid<T> forward(const Tensor<T>& feature) const {
    auto g = patch_embed(feature, cfg_.patch_size, embed_w_, embed_b_);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::size_t m = cfg_.window_sizes[s];
      const auto& blocks = stages_[s].blocks;
      for (std::size_t b = 0; b + 1 < blocks.size(); b += 2) g = swin_block_pair(g, blocks[b], blocks[b + 1], m, cfg_.heads[s]);
      if (stages_[s].merge_w.defined()) g = patch_merging(g, stages_[s].merge_ln_g, stages_[s].merge_ln_b, stages_[s].merge_w);
    }
    return {layer_norm(g.tokens, norm_g_, norm_b_), g.gh, g.gw};
  }

  struct Stage {
    std::vector<SwinBlockParams<T>> blocks;
    Tensor<T> merge_ln_g, merge_ln_b, merge_w;
  };
  const std::vector<Stage>& stages() const { return stages_; }

 private:
  SwinConfig cfg_;
  bool merge_ = false;
  std::size_t out_dim_ = 0;
  Tensor<T> embed_w_, embed_b_, norm_g_, norm_b_;
  std::vector<Stage> stages_;
};

}  // namespace vswu
