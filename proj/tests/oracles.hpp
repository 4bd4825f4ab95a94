#pragma once

// Reference implementations shared by the unit tests and the acceptance
// binary, written with plain loops.

#include <cmath>
#include <limits>
#include <vector>

#include "test_util.hpp"
#include "vswu/metrics.hpp"
#include "vswu/swin.hpp"

namespace vswu::oracle {

using testing::random_tensor;
using testing::randomize_all;
using TD = Tensor<double>;

inline TokenGrid<double> random_grid(std::size_t gh, std::size_t gw, std::size_t d, Rng& rng) {
  return {random_tensor({gh * gw, d}, rng), gh, gw};
}

inline SwinBlockParams<double> random_block(std::size_t d, std::size_t m, std::size_t heads, Rng& rng) {
  ParameterStore<double> store;
  auto p = SwinBlockParams<double>::make(store, "blk", d, heads, m, 4, rng);
  randomize_all(store, rng, 0.3);
  return p;
}

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const TD& t, std::size_t rows, std::size_t cols) {
  Mat m(rows, std::vector<double>(cols));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m[i][j] = t[i * cols + j];
  return m;
}

inline Mat affine(const Mat& x, const TD& w, const TD& b) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  Mat y(x.size(), std::vector<double>(out));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = b.defined() ? b[o] : 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += x[r][i] * w[i * out + o];
      y[r][o] = acc;
    }
  return y;
}

inline Mat norm_rows(const Mat& x, const TD& g, const TD& b) {
  Mat y = x;
  for (auto& row : y) {
    double mu = 0, var = 0;
    for (double v : row) mu += v / row.size();
    for (double v : row) var += (v - mu) * (v - mu) / row.size();
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return y;
}

// Dense N x N reference for one shifted-window block: attention over the
// whole shifted grid with every pair masked unless both tokens share a
// window and the same wrap-around status along each axis.
inline Mat dense_shifted_block(const TokenGrid<double>& g, const SwinBlockParams<double>& p, std::size_t m, std::size_t heads,
                        std::size_t s) {
  const std::size_t gh = g.gh, gw = g.gw, n = gh * gw, d = g.dim(), hd = d / heads;
  const Mat x = to_mat(g.tokens, n, d);
  const Mat ln = norm_rows(x, p.ln1_g, p.ln1_b);
  Mat shifted(n);
  for (std::size_t y = 0; y < gh; ++y)
    for (std::size_t c = 0; c < gw; ++c) shifted[y * gw + c] = ln[((y + s) % gh) * gw + (c + s) % gw];
  const Mat q = affine(shifted, p.attn.wq, p.attn.bq), k = affine(shifted, p.attn.wk, p.attn.bk),
            v = affine(shifted, p.attn.wv, p.attn.bv);
  Mat ctx(n, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t yi = i / gw, xi = i % gw;
      std::vector<double> logit(n, -INFINITY);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t yj = j / gw, xj = j % gw;
        const bool same_window = yi / m == yj / m && xi / m == xj / m;
        const bool same_wrap = (yi + s >= gh) == (yj + s >= gh) && (xi + s >= gw) == (xj + s >= gw);
        if (!same_window || !same_wrap) continue;
        double dot = 0;
        for (std::size_t e = 0; e < hd; ++e) dot += q[i][h * hd + e] * k[j][h * hd + e];
        const long dy = static_cast<long>(yi % m) - static_cast<long>(yj % m);
        const long dx = static_cast<long>(xi % m) - static_cast<long>(xj % m);
        const long row = (dy + static_cast<long>(m) - 1) * (2 * static_cast<long>(m) - 1) + dx + static_cast<long>(m) - 1;
        logit[j] = dot / std::sqrt(static_cast<double>(hd)) + p.attn.bias_table[row * heads + h];
        mx = std::max(mx, logit[j]);
      }
      double z = 0;
      for (double l : logit) z += std::isinf(l) ? 0.0 : std::exp(l - mx);
      for (std::size_t j = 0; j < n; ++j) {
        if (std::isinf(logit[j])) continue;
        const double a = std::exp(logit[j] - mx) / z;
        for (std::size_t e = 0; e < hd; ++e) ctx[i][h * hd + e] += a * v[j][h * hd + e];
      }
    }
  }
  const Mat attn_shifted = affine(ctx, p.attn.wo, p.attn.bo);
  Mat out(n);
  for (std::size_t y = 0; y < gh; ++y)
    for (std::size_t c = 0; c < gw; ++c) {
      const std::size_t src = ((y + gh - s) % gh) * gw + (c + gw - s) % gw;
      out[y * gw + c] = attn_shifted[src];
      for (std::size_t e = 0; e < d; ++e) out[y * gw + c][e] += x[y * gw + c][e];
    }
  Mat hidden = affine(norm_rows(out, p.ln2_g, p.ln2_b), p.fc1_w, p.fc1_b);
  for (auto& row : hidden)
    for (auto& val : row) val = 0.5 * val * (1.0 + std::erf(val / std::sqrt(2.0)));
  const Mat mlp = affine(hidden, p.fc2_w, p.fc2_b);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = 0; e < d; ++e) out[i][e] += mlp[i][e];
  return out;
}

inline Mask random_blobs(std::size_t h, std::size_t w, Rng& rng) {
  Mask m(h, w);
  const int blobs = 1 + static_cast<int>(rng.uniform() * 3);
  for (int k = 0; k < blobs; ++k) {
    const double cx = rng.uniform(0, static_cast<double>(w)), cy = rng.uniform(0, static_cast<double>(h));
    const double a = rng.uniform(1.5, 8), b = rng.uniform(1.5, 8);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = (static_cast<double>(x) - cx) / a, dy = (static_cast<double>(y) - cy) / b;
        if (dx * dx + dy * dy <= 1) m(y, x) = 1;
      }
    }
  }
  // speckle so that masks are not always convex
  for (auto& v : m.bits) {
    if (rng.bernoulli(0.01)) v = 1 - v;
  }
  return m;
}

// Direct O(n^2) nearest-boundary search.
inline std::vector<double> brute_surface(const Mask& a, const Mask& b) {
  std::vector<double> out;
  if (a.empty() || b.empty()) return out;
  const Mask ba = boundary(a), bb = boundary(b);
  auto directed = [&](const Mask& from, const Mask& to) {
    for (std::size_t y = 0; y < from.height; ++y) {
      for (std::size_t x = 0; x < from.width; ++x) {
        if (!from(y, x)) continue;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < to.height; ++v) {
          for (std::size_t u = 0; u < to.width; ++u) {
            if (!to(v, u)) continue;
            const double dx = static_cast<double>(x) - static_cast<double>(u);
            const double dy = static_cast<double>(y) - static_cast<double>(v);
            best = std::min(best, std::sqrt(dx * dx + dy * dy));
          }
        }
        out.push_back(best);
      }
    }
  };
  directed(ba, bb);
  directed(bb, ba);
  return out;
}

inline double brute_dsc(const Mask& p, const Mask& g) {
  double inter = 0, sp = 0, sg = 0;
  for (std::size_t y = 0; y < p.height; ++y) {
    for (std::size_t x = 0; x < p.width; ++x) {
      inter += p(y, x) && g(y, x);
      sp += p(y, x);
      sg += g(y, x);
    }
  }
  return sp + sg == 0 ? 1.0 : 2 * inter / (sp + sg);
}

inline Mask simulate_rater(const Mask& truth, double p, double q, Rng& rng) {
  Mask m = truth;
  for (auto& v : m.bits) v = v ? (rng.bernoulli(p) ? 1 : 0) : (rng.bernoulli(q) ? 0 : 1);
  return m;
}

/// 64x64 truth ellipse and three raters with flip rates drawn from
/// [0.05, 0.2]; `truth_pq` receives each rater's (sensitivity, specificity).
inline std::vector<Mask> staple_recovery_stack(std::uint64_t seed, Mask& truth,
                                               std::vector<std::pair<double, double>>& truth_pq) {
  Rng rng(derive_seed(100, {seed}));
  truth = Mask(64, 64);
  const double cx = rng.uniform(19, 45), cy = rng.uniform(19, 45), a = rng.uniform(14, 26), b = rng.uniform(14, 26);
  for (std::size_t y = 0; y < 64; ++y) {
    for (std::size_t x = 0; x < 64; ++x) {
      const double dx = (static_cast<double>(x) - cx) / a, dy = (static_cast<double>(y) - cy) / b;
      truth(y, x) = dx * dx + dy * dy <= 1;
    }
  }
  truth_pq.clear();
  for (int k = 0; k < 3; ++k) truth_pq.emplace_back(1 - rng.uniform(0.05, 0.2), 1 - rng.uniform(0.05, 0.2));
  std::vector<Mask> raters;
  for (auto [p, q] : truth_pq) raters.push_back(simulate_rater(truth, p, q, rng));
  return raters;
}

}  // namespace vswu::oracle
