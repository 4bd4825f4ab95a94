#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <unordered_map>

#include "vswu/gradcheck.hpp"
#include "vswu/gradcheck_suite.hpp"
#include "vswu/ops.hpp"
#include "vswu/rng.hpp"

using namespace vswu;
using TD = Tensor<double>;

namespace {

template <class T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(std::move(shape), std::move(v));
}

// Weighted sum with fixed random weights so every output element matters.
TD probe(const TD& y, std::uint64_t seed) {
  Rng rng(seed);
  auto w = random_tensor(y.shape(), rng);
  return sum(mul(y, w));
}

// Direct 6-loop cross-correlation.
std::vector<double> naive_conv(const TD& x, const TD& k, std::size_t stride, std::size_t pad, const TD* bias) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(co * ho * wo, 0.0);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = bias ? (*bias)[o] : 0.0;
        for (std::size_t i = 0; i < c; ++i)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              acc += x[(i * h + iy) * w + ix] * k[((o * c + i) * kh + ky) * kw + kx];
            }
        out[(o * ho + oy) * wo + ox] = acc;
      }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor invariants

TEST(Tensor, DataLengthMatchesShape) {
  EXPECT_THROW(TD({2, 3}, std::vector<double>(5)), DimensionError);
  EXPECT_THROW(TD(Shape{0, 3}), DimensionError);
  TD t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
}

TEST(Tensor, GradMatchesShapeAfterBackward) {
  TD x({3, 2}, 0.5);
  x.set_requires_grad(true);
  sum(mul(x, x)).backward();
  ASSERT_TRUE(x.has_grad());
  EXPECT_EQ(x.grad().size(), x.numel());
}

TEST(Graph, TopologicalOrderPlacesProducersFirst) {
  Rng rng(1);
  auto x = random_tensor({4}, rng);
  x.set_requires_grad(true);
  auto a = relu(x);
  auto b = mul(a, x);
  auto c = add(b, a);
  auto loss = sum(c);
  auto order = topological_order(loss);
  std::unordered_map<const void*, std::size_t> pos;
  for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;
  for (auto* n : order) {
    for (auto& in : n->inputs) {
      if (pos.count(in.get())) EXPECT_LT(pos[in.get()], pos[n]);
    }
  }
  EXPECT_EQ(order.back(), loss.node().get());
}

// ---------------------------------------------------------------------------
// matmul

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  TD eye({2, 2}, {1, 0, 0, 1});
  TD b({2, 3}, {1, 2, 3, 4, 5, 6});
  auto c = matmul(eye, b);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(c[i], b[i]);
}

TEST(Matmul, HandEvaluatedProduct) {
  TD a({2, 2}, {1, 2, 3, 4});
  TD b({2, 1}, {5, 6});
  auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(c[0], 17.0);
  EXPECT_DOUBLE_EQ(c[1], 39.0);
}

TEST(Matmul, ZeroAnnihilates) {
  Rng rng(3);
  auto c = matmul(TD::zeros({3, 4}), random_tensor({4, 2}, rng));
  EXPECT_EQ(c.shape(), (Shape{3, 2}));
  for (auto v : c.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(TD::zeros({2, 3}), TD::zeros({2, 3}));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// conv2d

TEST(Conv2d, CenterDeltaKernelIsIdentity) {
  Rng rng(5);
  auto x = random_tensor({1, 5, 6}, rng);
  TD k({1, 1, 3, 3}, {0, 0, 0, 0, 1, 0, 0, 0, 0});
  auto y = conv2d(x, k, 1, 1);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, OnesKernelOnOnesImage) {
  auto y = conv2d(TD::ones({1, 3, 3}), TD::ones({1, 1, 3, 3}), 1, 1);
  const std::vector<double> expected{4, 6, 4, 6, 9, 6, 4, 6, 4};
  for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ(y[i], expected[i]);
}

TEST(Conv2d, ZeroInputGivesZeroOutput) {
  Rng rng(6);
  auto y = conv2d(TD::zeros({2, 8, 8}), random_tensor({3, 2, 3, 3}, rng), 1, 1);
  for (auto v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, AgreesWithNaiveReference) {
  Rng rng(7);
  struct Case { std::size_t c, h, w, co, k, stride, pad; bool bias; };
  const std::vector<Case> cases{{1, 8, 8, 2, 3, 1, 1, true},  {4, 16, 16, 3, 3, 1, 1, false},
                                {4, 16, 16, 5, 3, 2, 1, true}, {3, 9, 7, 2, 1, 1, 0, true},
                                {2, 10, 10, 4, 1, 2, 0, false}, {4, 16, 16, 2, 5, 1, 2, true}};
  for (const auto& cs : cases) {
    auto x = random_tensor<float>({cs.c, cs.h, cs.w}, rng);
    auto k = random_tensor<float>({cs.co, cs.c, cs.k, cs.k}, rng);
    auto b = random_tensor<float>({cs.co}, rng);
    auto y = conv2d(x, k, cs.stride, cs.pad, cs.bias ? b : Tensor<float>());
    auto xd = x.cast<double>(), kd = k.cast<double>(), bd = b.cast<double>();
    auto ref = naive_conv(xd, kd, cs.stride, cs.pad, cs.bias ? &bd : nullptr);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-5);
  }
}

TEST(Conv2d, BatchedMatchesPerFrame) {
  Rng rng(8);
  auto x = random_tensor({3, 2, 8, 8}, rng);
  auto k = random_tensor({4, 2, 3, 3}, rng);
  auto y = conv2d(x, k, 2, 1);
  for (std::size_t n = 0; n < 3; ++n) {
    auto yn = conv2d(slice0(x, n), k, 2, 1);
    for (std::size_t i = 0; i < yn.numel(); ++i) EXPECT_EQ(y[n * yn.numel() + i], yn[i]);
  }
}

TEST(Conv2d, DimensionErrors) {
  EXPECT_THROW(conv2d(TD::zeros({1, 2, 2}), TD::zeros({1, 1, 5, 5})), DimensionError);
  EXPECT_THROW(conv2d(TD::zeros({1, 4, 4}), TD::zeros({1, 1, 2, 2})), DimensionError);
  EXPECT_THROW(conv2d(TD::zeros({2, 4, 4}), TD::zeros({1, 1, 3, 3})), DimensionError);
}

// ---------------------------------------------------------------------------
// softmax, layer_norm, gelu

TEST(Softmax, Examples) {
  auto a = softmax(TD({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(a[0], 0.5);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  auto b = softmax(TD({3}, {1, 2, 3}));
  EXPECT_NEAR(b[0], 0.09003, 1e-5);
  EXPECT_NEAR(b[1], 0.24473, 1e-5);
  EXPECT_NEAR(b[2], 0.66524, 1e-5);
}

TEST(Softmax, ShiftInvarianceAndNormalization) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({4, 7}, rng, -5, 5);
    const double c = rng.uniform(-30, 30);
    auto y = softmax(x);
    std::vector<double> shifted(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) shifted[i] = x[i] + c;
    auto ys = softmax(TD({4, 7}, shifted));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        const double v = y[r * 7 + j];
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
        EXPECT_NEAR(v, ys[r * 7 + j], 1e-12);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, NonTrailingAxis) {
  TD x({3, 2}, {1, 0, 2, 0, 3, 0});
  auto y = softmax(x, 0);
  EXPECT_NEAR(y[0], 0.09003, 1e-5);
  EXPECT_NEAR(y[4], 0.66524, 1e-5);
  EXPECT_NEAR(y[1], 1.0 / 3.0, 1e-12);
}

TEST(LayerNorm, Examples) {
  auto g = TD::ones({3}), b = TD::zeros({3});
  auto y = layer_norm(TD({3}, {5, 5, 5}), g, b);
  for (auto v : y.data()) EXPECT_EQ(v, 0.0);

  auto y2 = layer_norm(TD({2}, {1, 3}), TD::ones({2}), TD::zeros({2}));
  EXPECT_NEAR(y2[0], -1.0, 1e-2);
  EXPECT_NEAR(y2[1], 1.0, 1e-2);

  Rng rng(10);
  auto beta = random_tensor({4}, rng);
  auto y3 = layer_norm(random_tensor({3, 4}, rng), TD::zeros({4}), beta);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(y3[i], beta[i % 4]);
}

TEST(LayerNorm, SliceMeanIsZero) {
  Rng rng(11);
  auto y = layer_norm(random_tensor({6, 16}, rng, -3, 7), TD::ones({16}), TD::zeros({16}));
  for (std::size_t r = 0; r < 6; ++r) {
    double m = 0;
    for (std::size_t j = 0; j < 16; ++j) m += y[r * 16 + j];
    EXPECT_LE(std::abs(m / 16), 1e-6);
  }
}

TEST(Gelu, Examples) {
  auto y = gelu(TD({3}, {0.0, 1.0, -10.0}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 0.84134, 1e-5);
  EXPECT_LT(std::abs(y[2]), 1e-8);
}

TEST(Gelu, MonotoneAboveItsMinimum) {
  std::vector<double> grid;
  for (double v = -0.7; v <= 5.0; v += 0.01) grid.push_back(v);
  auto y = gelu(TD({grid.size()}, grid));
  for (std::size_t i = 1; i < grid.size(); ++i) EXPECT_GT(y[i], y[i - 1]);
}

// ---------------------------------------------------------------------------
// backward

TEST(Backward, SumGivesOnes) {
  TD x({2, 3}, 0.25);
  x.set_requires_grad(true);
  sum(x).backward();
  for (auto g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareSum) {
  TD x({2}, {1, 2});
  x.set_requires_grad(true);
  sum(mul(x, x)).backward();
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, NoGradForFrozenLeaf) {
  TD x({2}, {1, 2});
  TD y({2}, {3, 4});
  y.set_requires_grad(true);
  sum(mul(x, y)).backward();
  EXPECT_FALSE(x.has_grad());
  EXPECT_TRUE(y.has_grad());
}

TEST(Backward, Errors) {
  TD x({2}, {1, 2});
  x.set_requires_grad(true);
  auto y = mul(x, x);
  EXPECT_THROW(y.backward(), GraphError);  // non-scalar
  auto loss = sum(y);
  loss.backward();
  EXPECT_THROW(loss.backward(), GraphError);  // repeated
}

TEST(Backward, NoGradGuardRecordsNothing) {
  TD x({2}, {1, 2});
  x.set_requires_grad(true);
  NoGradGuard guard;
  auto loss = sum(mul(x, x));
  EXPECT_FALSE(loss.requires_grad());
  EXPECT_THROW(loss.backward(), GraphError);
}

// ---------------------------------------------------------------------------
// finite_diff_check

TEST(FiniteDiff, QuadraticAndLinear) {
  Rng rng(12);
  auto x = random_tensor({10}, rng);
  EXPECT_LE(finite_diff_check([](const TD& v) { return sum(mul(v, v)); }, x), 1e-6);
  EXPECT_LE(finite_diff_check([](const TD& v) { return sum(v); }, x), 1e-9);
}

struct KernelCase {
  const char* name;
  std::function<TD(Rng&)> make_input;
  std::function<TD(const TD&, Rng&)> apply;  // second arg: extra operands
};

class KernelGradients : public ::testing::TestWithParam<int> {};

TEST_P(KernelGradients, EveryKernelWithinTolerance) {
  const int which = GetParam();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed * 101 + static_cast<std::uint64_t>(which));
    std::vector<TD> leaves;
    std::function<TD()> f;
    switch (which) {
      case 0: {  // add / sub / mul / scale
        auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
        leaves = {a, b};
        f = [a, b] { return probe(scale(mul(sub(add(a, b), b), add(a, b)), 1.7), 1); };
        break;
      }
      case 1: {  // relu / sigmoid / gelu
        auto a = random_tensor({5, 3}, rng, -2, 2);
        leaves = {a};
        f = [a] { return probe(add(relu(a), add(sigmoid(a), gelu(a))), 2); };
        break;
      }
      case 2: {  // add_bias / add_channel / scale_by
        auto x = random_tensor({2, 3, 4, 4}, rng), v = random_tensor({3}, rng), b = random_tensor({4}, rng);
        auto s = random_tensor({1}, rng);
        leaves = {x, v, b, s};
        f = [x, v, b, s] { return probe(scale_by(add_bias(add_channel(x, v), b), s), 3); };
        break;
      }
      case 3: {  // sum / mean
        auto x = random_tensor({6}, rng);
        leaves = {x};
        f = [x] { return add(mul(sum(x), mean(mul(x, x))), sum(x)); };
        break;
      }
      case 4: {  // matmul / linear
        auto a = random_tensor({3, 5}, rng), w = random_tensor({5, 2}, rng), b = random_tensor({2}, rng);
        leaves = {a, w, b};
        f = [a, w, b] { return probe(linear(a, w, b), 4); };
        break;
      }
      case 5: {  // bmm, both forms
        auto a = random_tensor({2, 3, 4}, rng), b = random_tensor({2, 4, 5}, rng), c = random_tensor({2, 6, 4}, rng);
        leaves = {a, b, c};
        f = [a, b, c] { return add(probe(bmm(a, b), 5), probe(bmm(a, c, true), 6)); };
        break;
      }
      case 6: {  // conv2d with stride, pad, bias
        auto x = random_tensor({2, 2, 7, 6}, rng), k = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
        leaves = {x, k, b};
        f = [x, k, b] { return add(probe(conv2d(x, k, 2, 1, b), 7), probe(conv2d(slice0(x, 1), k, 1, 0), 8)); };
        break;
      }
      case 7: {  // pointwise conv
        auto x = random_tensor({3, 4, 5}, rng), k = random_tensor({2, 3, 1, 1}, rng), b = random_tensor({2}, rng);
        leaves = {x, k, b};
        f = [x, k, b] { return probe(conv2d(x, k, 1, 0, b), 9); };
        break;
      }
      case 8: {  // softmax along two axes
        auto x = random_tensor({3, 5}, rng, -3, 3);
        leaves = {x};
        f = [x] { return add(probe(softmax(x, -1), 10), probe(softmax(x, 0), 11)); };
        break;
      }
      case 9: {  // layer_norm
        auto x = random_tensor({4, 6}, rng, -2, 2), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
        leaves = {x, g, b};
        f = [x, g, b] { return probe(layer_norm(x, g, b), 12); };
        break;
      }
      case 10: {  // reshape / gather / transpose / concat / slice / stack
        auto x = random_tensor({2, 3, 2}, rng), y = random_tensor({2, 1, 2}, rng);
        leaves = {x, y};
        auto idx = std::make_shared<const std::vector<std::size_t>>(std::vector<std::size_t>{0, 5, 5, 11, 3});
        f = [x, y, idx] {
          auto c = concat(std::vector<TD>{x, y}, 1);
          auto g = gather(c, idx, Shape{5});
          auto t = transpose2d(reshape(c, {4, 4}));
          auto s = stack0(std::vector<TD>{slice0(x, 0), slice0(x, 1)});
          return add(add(probe(g, 13), probe(t, 14)), probe(s, 15));
        };
        break;
      }
      case 11: {  // upsample_nearest
        auto x = random_tensor({2, 3, 4}, rng);
        leaves = {x};
        f = [x] { return probe(upsample_nearest(x, 2), 16); };
        break;
      }
      default:
        FAIL();
    }
    auto report = finite_diff_check(f, leaves);
    EXPECT_LE(report.max_relative_error, 1e-4) << "kernel case " << which << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllKernels, KernelGradients, ::testing::Range(0, 12));

// ---------------------------------------------------------------------------

TEST(Determinism, SeededComputationIsBitIdentical) {
  auto run = [] {
    Rng rng(99);
    auto x = random_tensor<float>({2, 3, 16, 16}, rng);
    auto k = random_tensor<float>({4, 3, 3, 3}, rng);
    auto y = softmax(gelu(conv2d(x, k, 1, 1)), -1);
    return std::vector<float>(y.data().begin(), y.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Values, FiniteAfterForward) {
  Rng rng(13);
  auto x = random_tensor<float>({4, 8}, rng, -50, 50);
  auto y = sigmoid(softmax(layer_norm(x, Tensor<float>::ones({8}), Tensor<float>::zeros({8}))));
  for (auto v : y.data()) EXPECT_TRUE(std::isfinite(v));
  auto z = sigmoid(x);
  for (auto v : z.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(GradCheck, KinkGuardSkipsStraddlingProbes) {
  Tensor<double> x({3}, std::vector<double>{0.5, 2e-6, -0.7});
  auto f = [&] { return sum(relu(x)); };
  auto plain = finite_diff_check(f, std::vector<TD>{x}, 1e-5);
  EXPECT_GT(plain.max_relative_error, 0.1);  // the probe at 2e-6 crosses zero
  auto guarded = finite_diff_check(f, std::vector<TD>{x}, 1e-5, 0, 7, true);
  EXPECT_EQ(guarded.skipped_at_kinks, 1u);
  EXPECT_EQ(guarded.entries_checked, 2u);
  EXPECT_LT(guarded.max_relative_error, 1e-8);
}

TEST(GradCheck, SuiteKernelsAndCompositePass) {
  const auto r = run_gradcheck_suite();
  for (const auto& c : r.cases) EXPECT_TRUE(c.passed) << c.name << " " << c.max_relative_error;
  EXPECT_TRUE(r.all_passed());
}
