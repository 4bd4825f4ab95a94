#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vswu/gradcheck.hpp"
#include "vswu/loss.hpp"
#include "vswu/model.hpp"

namespace vswu {

struct GradCheckCase {
  std::string name;
  double max_relative_error = 0;
  std::size_t entries = 0;
  std::size_t skipped_at_kinks = 0;
  bool passed = false;
};

struct GradCheckSuiteResult {
  std::vector<GradCheckCase> cases;
  double tolerance = 1e-4;
  double seconds = 0;

  bool all_passed() const {
    for (const auto& c : cases) {
      if (!c.passed) return false;
    }
    return !cases.empty();
  }
  double worst() const {
    double w = 0;
    for (const auto& c : cases) w = std::max(w, c.max_relative_error);
    return w;
  }
  nlohmann::json to_json() const {
    nlohmann::json j{{"tolerance", tolerance}, {"all_passed", all_passed()}, {"worst_relative_error", worst()}};
    for (const auto& c : cases) {
      j["cases"].push_back({{"name", c.name}, {"max_relative_error", c.max_relative_error}, {"entries", c.entries},
                            {"skipped_at_kinks", c.skipped_at_kinks},                             {"passed", c.passed}});
    }
    return j;
  }
};

namespace detail {

inline Tensor<double> uniform_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

// Fixed random weighting so that every output entry reaches the scalar.
inline Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, uniform_tensor(y.shape(), rng)));
}

}  // namespace detail

/// Central-difference checks (64-bit) of every differentiable kernel and of
/// the full model through the combined loss at hw x hw, t frames.
inline GradCheckSuiteResult run_gradcheck_suite(double tol = 1e-4, std::size_t hw = 16, std::size_t t = 3,
                                                std::uint64_t seed = 42) {
  using TD = Tensor<double>;
  using detail::uniform_tensor;
  using detail::weighted_sum;
  GradCheckSuiteResult out;
  out.tolerance = tol;
  const auto start = std::chrono::steady_clock::now();
  Rng rng(seed);
  auto run = [&](const std::string& name, std::vector<TD> leaves, const std::function<TD()>& f, double h = 1e-5,
                 std::size_t max_entries = 0, bool kink_guard = false) {
    const auto r = finite_diff_check(f, leaves, h, max_entries, derive_seed(seed, {out.cases.size()}), kink_guard);
    // a case where most probes straddle a kink verifies nothing
    const bool enough = r.entries_checked > 0 && r.skipped_at_kinks * 4 <= r.entries_checked + r.skipped_at_kinks;
    out.cases.push_back({name, r.max_relative_error, r.entries_checked, r.skipped_at_kinks,
                         enough && r.max_relative_error <= tol});
  };
  // Inputs kept away from the kinks of relu.
  auto away_from_zero = [&](Shape s) {
    auto x = uniform_tensor(std::move(s), rng, 0.2, 1.0);
    for (auto& v : x.mutable_data()) {
      if (rng.bernoulli(0.5)) v = -v;
    }
    return x;
  };

  {
    auto a = uniform_tensor({3, 4}, rng), b = uniform_tensor({3, 4}, rng);
    run("add", {a, b}, [&] { return weighted_sum(add(a, b), 1); });
    run("sub", {a, b}, [&] { return weighted_sum(sub(a, b), 2); });
    run("mul", {a, b}, [&] { return weighted_sum(mul(a, b), 3); });
    run("scale", {a}, [&] { return weighted_sum(scale(a, 1.7), 4); });
  }
  {
    auto x = away_from_zero({2, 3, 4});
    run("relu", {x}, [&] { return weighted_sum(relu(x), 5); });
    run("sigmoid", {x}, [&] { return weighted_sum(sigmoid(x), 6); });
    run("gelu", {x}, [&] { return weighted_sum(gelu(x), 7); });
    run("softmax", {x}, [&] { return weighted_sum(softmax(x, -1), 8); });
    run("sum_mean", {x}, [&] { return add(scale(sum(x), 0.3), mean(mul(x, x))); });
    run("reshape_transpose", {x}, [&] { return weighted_sum(transpose2d(reshape(x, {6, 4})), 9); });
    run("slice_stack", {x}, [&] { return weighted_sum(stack0(std::vector<TD>{slice0(x, 1), slice0(x, 0)}), 10); });
    run("upsample_nearest", {x}, [&] { return weighted_sum(upsample_nearest(x, 2), 11); });
  }
  {
    auto x = uniform_tensor({5, 6}, rng), g = uniform_tensor({6}, rng, 0.5, 1.5), b = uniform_tensor({6}, rng);
    run("layer_norm", {x, g, b}, [&] { return weighted_sum(layer_norm(x, g, b), 12); });
    run("add_bias", {x, b}, [&] { return weighted_sum(add_bias(x, b), 13); });
  }
  {
    auto a = uniform_tensor({3, 5}, rng), b = uniform_tensor({5, 4}, rng);
    run("matmul", {a, b}, [&] { return weighted_sum(matmul(a, b), 14); });
    auto p = uniform_tensor({2, 3, 4}, rng), q = uniform_tensor({2, 4, 5}, rng), r = uniform_tensor({2, 5, 4}, rng);
    run("bmm", {p, q}, [&] { return weighted_sum(bmm(p, q), 15); });
    run("bmm_transposed", {p, r}, [&] { return weighted_sum(bmm(p, r, true), 16); });
  }
  {
    auto x = uniform_tensor({2, 6, 6}, rng), k = uniform_tensor({3, 2, 3, 3}, rng), b = uniform_tensor({3}, rng);
    run("conv2d_3x3_pad1", {x, k, b}, [&] { return weighted_sum(conv2d(x, k, 1, 1, b), 17); });
    run("conv2d_3x3_stride2", {x, k}, [&] { return weighted_sum(conv2d(x, k, 2, 1), 18); });
    auto k1 = uniform_tensor({4, 2, 1, 1}, rng);
    run("conv2d_1x1", {x, k1}, [&] { return weighted_sum(conv2d(x, k1, 1, 0), 19); });
    auto v = uniform_tensor({2}, rng), s = uniform_tensor({1}, rng);
    run("add_channel_scale_by", {x, v, s}, [&] { return weighted_sum(scale_by(add_channel(x, v), s), 20); });
    auto y = uniform_tensor({3, 6, 6}, rng);
    run("concat", {x, y}, [&] { return weighted_sum(concat(std::vector<TD>{x, y}, 0), 21); });
  }
  {
    // windowed attention with relative bias and the shift mask on an 8x8 grid
    const std::size_t d = 8, m = 4, heads = 2;
    auto tok = uniform_tensor({64, d}, rng);
    AttentionParams<double> ap;
    ap.wq = uniform_tensor({d, d}, rng, -0.5, 0.5);
    ap.bq = uniform_tensor({d}, rng, -0.1, 0.1);
    ap.wk = uniform_tensor({d, d}, rng, -0.5, 0.5);
    ap.wv = uniform_tensor({d, d}, rng, -0.5, 0.5);
    ap.bv = uniform_tensor({d}, rng, -0.1, 0.1);
    ap.wo = uniform_tensor({d, d}, rng, -0.5, 0.5);
    ap.bo = uniform_tensor({d}, rng, -0.1, 0.1);
    ap.bias_table = uniform_tensor({(2 * m - 1) * (2 * m - 1), heads}, rng, -0.2, 0.2);
    const auto mask = build_shift_mask<double>(8, 8, m, m / 2);
    run("shifted_window_attention", {tok, ap.wq, ap.bq, ap.wk, ap.wv, ap.bv, ap.wo, ap.bo, ap.bias_table}, [&] {
      auto g = cyclic_shift(TokenGrid<double>{tok, 8, 8}, 2);
      return weighted_sum(window_attention(window_partition(g, m), ap, heads, mask), 22);
    });
    auto lg = uniform_tensor({4 * d}, rng, 0.5, 1.5), lb = uniform_tensor({4 * d}, rng), w = uniform_tensor({4 * d, 2 * d}, rng);
    run("patch_merging", {tok, lg, lb, w}, [&] { return weighted_sum(patch_merging(TokenGrid<double>{tok, 8, 8}, lg, lb, w).tokens, 23); });
  }
  {
    auto probs = uniform_tensor({2, 4, 4}, rng, 0.05, 0.95);
    std::vector<double> lab(32);
    for (auto& v : lab) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
    TD label({2, 4, 4}, std::move(lab));
    run("combined_loss", {probs}, [&] { return combined_loss(probs, label); });
  }
  {
    // full path: backbone -> TCM -> Swin -> decoder -> head -> combined loss
    ModelConfig cfg;
    cfg.height = cfg.width = hw;
    cfg.snippet_t = t;
    cfg.backbone.stage_channels = {3, 4, 5, 6};
    cfg.backbone.blocks_per_stage = 1;
    cfg.swin.embed_dim = 4;
    cfg.swin.depths = {2};
    cfg.swin.heads = {2};
    cfg.swin.window_sizes = {hw / 16};
    cfg.decoder.channels = {4, 4, 3, 3};
    VideoSwinUNet<double> model(cfg, seed);
    Rng prng(derive_seed(seed, {0x9c}));
    for (const auto& [name, p] : model.params().entries()) {
      for (auto& v : TD(p).mutable_data()) v = prng.uniform(-0.6, 0.6);  // gates open, biases nonzero
    }
    auto frames = uniform_tensor({t, 1, hw, hw}, rng, 0.0, 1.0);
    std::vector<double> lab(2 * hw * hw);
    for (auto& v : lab) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
    TD label({2, hw, hw}, std::move(lab));
    std::vector<TD> leaves{frames};
    for (const auto& [name, p] : model.params().entries()) leaves.push_back(p);
    run("composite_model_loss", leaves, [&] { return combined_loss(model.forward(frames).probs, label); }, kCompositeStep, 24,
        true);
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace vswu
