#include <gtest/gtest.h>

#include <cmath>

#include "vswu/rng.hpp"
#include "vswu/staple.hpp"
#include "oracles.hpp"

using namespace vswu;
using namespace vswu::oracle;

namespace {

// Textbook EM with direct products, same initialization and stopping rule.
struct Reference {
  std::vector<double> w, p, q;
  std::size_t iterations = 0;
};

Reference reference_staple(const std::vector<Mask>& d, std::size_t max_iter = 100, double tol = 1e-6) {
  const std::size_t r = d.size(), n = d[0].bits.size();
  Reference ref;
  ref.p.assign(r, 0.99);
  ref.q.assign(r, 0.99);
  std::vector<double> prior(n), prev;
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0;
    for (const auto& m : d) v += m.bits[i];
    prior[i] = std::min(0.99, std::max(0.01, v / static_cast<double>(r)));
  }
  ref.w.assign(n, 0);
  for (std::size_t it = 1; it <= max_iter; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double a = prior[i], b = 1 - prior[i];
      for (std::size_t k = 0; k < r; ++k) {
        const int x = d[k].bits[i];
        a *= x ? ref.p[k] : 1 - ref.p[k];
        b *= x ? 1 - ref.q[k] : ref.q[k];
      }
      ref.w[i] = a / (a + b);
    }
    ref.iterations = it;
    if (!prev.empty()) {
      double delta = 0;
      for (std::size_t i = 0; i < n; ++i) delta = std::max(delta, std::abs(ref.w[i] - prev[i]));
      if (delta < tol) break;
    }
    if (it == max_iter) break;
    for (std::size_t k = 0; k < r; ++k) {
      double tp = 0, sw = 0, tn = 0, sv = 0;
      for (std::size_t i = 0; i < n; ++i) {
        sw += ref.w[i];
        sv += 1 - ref.w[i];
        if (d[k].bits[i]) tp += ref.w[i]; else tn += 1 - ref.w[i];
      }
      ref.p[k] = std::min(1 - 1e-5, std::max(1e-5, tp / sw));
      ref.q[k] = std::min(1 - 1e-5, std::max(1e-5, tn / sv));
    }
    prev = ref.w;
  }
  return ref;
}

Mask random_truth(std::size_t h, std::size_t w, Rng& rng) {
  Mask m(h, w);
  const double cx = rng.uniform(4, static_cast<double>(w) - 4), cy = rng.uniform(4, static_cast<double>(h) - 4);
  const double a = rng.uniform(3, 7), b = rng.uniform(3, 7);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = (static_cast<double>(x) - cx) / a, dy = (static_cast<double>(y) - cy) / b;
      m(y, x) = dx * dx + dy * dy <= 1;
    }
  }
  return m;
}

}  // namespace

TEST(Staple, UnanimousIsFixedPoint) {
  Rng rng(1);
  const Mask m = random_truth(16, 16, rng);
  const auto res = staple_fuse({m, m, m});
  EXPECT_EQ(res.fused.bits, m.bits);
  EXPECT_TRUE(res.converged);
  EXPECT_EQ(res.iterations, 1u);
  for (std::size_t i = 0; i < m.bits.size(); ++i) EXPECT_EQ(res.weights[i] > 0.5, m.bits[i] == 1);
  const auto empty = staple_fuse({Mask(4, 4), Mask(4, 4)});
  EXPECT_TRUE(empty.fused.empty());
  EXPECT_TRUE(empty.converged);
}

TEST(Staple, MajorityOnFourPixels) {
  Mask a(2, 2), b(2, 2), c(2, 2);
  a(0, 0) = b(0, 0) = 1;
  const auto res = staple_fuse({a, b, c});
  EXPECT_EQ(res.fused.bits, (std::vector<std::uint8_t>{1, 0, 0, 0}));
  const auto ref = reference_staple({a, b, c});
  EXPECT_EQ(res.iterations, ref.iterations);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(res.weights[i], ref.w[i], 1e-12);
}

TEST(Staple, MatchesReferenceEm) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Mask t = random_truth(16, 16, rng);
    std::vector<Mask> raters{simulate_rater(t, 0.9, 0.95, rng), simulate_rater(t, 0.85, 0.9, rng),
                             simulate_rater(t, 0.95, 0.85, rng)};
    const auto res = staple_fuse(raters);
    const auto ref = reference_staple(raters);
    EXPECT_EQ(res.iterations, ref.iterations);
    for (std::size_t i = 0; i < ref.w.size(); ++i) ASSERT_NEAR(res.weights[i], ref.w[i], 1e-9);
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_NEAR(res.sensitivity[k], ref.p[k], 1e-9);
      EXPECT_NEAR(res.specificity[k], ref.q[k], 1e-9);
    }
  }
}

TEST(Staple, ComplementRaterDetected) {
  Rng rng(3);
  const Mask t = random_truth(16, 16, rng);
  Mask inv = t;
  for (auto& v : inv.bits) v = 1 - v;
  const auto res = staple_fuse({t, t, inv});
  EXPECT_LT(res.sensitivity[2], 0.5);
  EXPECT_EQ(res.fused.bits, t.bits);
}

TEST(Staple, RaterOrderInvariance) {
  Rng rng(4);
  const Mask t = random_truth(24, 24, rng);
  std::vector<Mask> raters{simulate_rater(t, 0.8, 0.9, rng), simulate_rater(t, 0.9, 0.8, rng),
                           simulate_rater(t, 0.85, 0.95, rng), simulate_rater(t, 0.95, 0.9, rng)};
  const auto base = staple_fuse(raters);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<Mask> shuffled;
  for (auto k : perm) shuffled.push_back(raters[k]);
  const auto res = staple_fuse(shuffled);
  EXPECT_EQ(res.weights, base.weights);
  for (std::size_t j = 0; j < perm.size(); ++j) {
    EXPECT_EQ(res.sensitivity[j], base.sensitivity[perm[j]]);
    EXPECT_EQ(res.specificity[j], base.specificity[perm[j]]);
  }
}

TEST(Staple, LikelihoodNonDecreasing) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Mask t = random_truth(20, 20, rng);
    std::vector<Mask> raters{simulate_rater(t, 0.8, 0.9, rng), simulate_rater(t, 0.9, 0.85, rng),
                             simulate_rater(t, 0.85, 0.8, rng)};
    const auto res = staple_fuse(raters);
    for (std::size_t i = 1; i < res.log_likelihood.size(); ++i) {
      EXPECT_GE(res.log_likelihood[i], res.log_likelihood[i - 1] - 1e-9 * std::abs(res.log_likelihood[i - 1]))
          << trial << " step " << i;
    }
  }
}

TEST(Staple, SyntheticRecovery) {
  int good = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Mask t;
    std::vector<std::pair<double, double>> truth;
    const auto raters = staple_recovery_stack(seed, t, truth);
    StapleOptions opt;
    opt.estimate_global_prior = true;
    const auto res = staple_fuse(raters, opt);
    bool ok = true;
    const double fused_dsc = dsc(res.fused, t);
    for (std::size_t k = 0; k < truth.size(); ++k) {
      ok = ok && std::abs(res.sensitivity[k] - truth[k].first) <= 0.05;
      ok = ok && std::abs(res.specificity[k] - truth[k].second) <= 0.05;
      ok = ok && fused_dsc >= dsc(raters[k], t);
    }
    for (std::size_t i = 1; i < res.log_likelihood.size(); ++i) EXPECT_GE(res.log_likelihood[i], res.log_likelihood[i - 1]);
    good += ok;
  }
  EXPECT_GE(good, 9);
}

TEST(Staple, Errors) {
  EXPECT_THROW(staple_fuse({Mask(2, 2)}), std::invalid_argument);
  EXPECT_THROW(staple_fuse({Mask(2, 2), Mask(2, 3)}), DimensionError);
  Mask bad(2, 2);
  bad.bits[0] = 3;
  EXPECT_THROW(staple_fuse({bad, Mask(2, 2)}), std::invalid_argument);
}

TEST(Staple, SidecarJson) {
  Mask a(2, 2), b(2, 2);
  a(0, 0) = 1;
  const auto j = staple_fuse({a, b, a}).to_json();
  EXPECT_EQ(j["raters"], 3);
  EXPECT_EQ(j["sensitivity"].size(), 3u);
  EXPECT_TRUE(j.contains("converged"));
  EXPECT_TRUE(j.contains("iterations"));
}
