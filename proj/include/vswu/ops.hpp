#pragma once

// Differentiable kernels. Every op computes its forward value eagerly and,
// when grad mode is on and an input requires a gradient, records a backward
// closure on the result node.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "vswu/tensor.hpp"

namespace vswu {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class T, class F, class D>
Tensor<T> unary_op(const Tensor<T>& x, F f, D dfdx) {
  Storage<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return make_result<T>(x.shape(), std::move(out), {x}, [dfdx](Node<T>& n) {
    T* gx = input_grad(n, 0);
    if (!gx) return;
    const auto& xs = input_data(n, 0);
    for (std::size_t i = 0; i < n.data.size(); ++i) gx[i] += n.grad[i] * dfdx(xs[i], n.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Storage<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (T* g = detail::input_grad(n, k)) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
      }
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Storage<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
    if (T* g = detail::input_grad(n, 1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Storage<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& n) {
    const auto& av = detail::input_data(n, 0);
    const auto& bv = detail::input_data(n, 1);
    if (T* g = detail::input_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (T* g = detail::input_grad(n, 1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary_op(x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  if (detail::branch_trace().enabled) {
    for (auto v : x.data()) detail::record_branch(v > T(0));
  }
  return detail::unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

/// Exact GELU, x * Phi(x).
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary_op(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      });
}

// ---------------------------------------------------------------------------
// Broadcasting

/// x[..., D] + b[D]
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  const std::size_t d = x.shape().back();
  if (b.numel() != d) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  }
  Storage<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b[i % d];
  return detail::make_result<T>(x.shape(), std::move(out), {x, b}, [d](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
    if (T* g = detail::input_grad(n, 1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % d] += n.grad[i];
    }
  });
}

/// x[..., C, H, W] + v[C] broadcast over the spatial extents.
template <class T>
Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.rank() < 3) throw DimensionError("add_channel: input must have rank >= 3, got " + shape_str(x.shape()));
  const std::size_t c = x.dim(x.rank() - 3);
  const std::size_t hw = x.dim(x.rank() - 2) * x.dim(x.rank() - 1);
  if (v.numel() != c) {
    throw DimensionError("add_channel: vector " + shape_str(v.shape()) + " vs input " + shape_str(x.shape()));
  }
  Storage<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + v[(i / hw) % c];
  return detail::make_result<T>(x.shape(), std::move(out), {x, v}, [c, hw](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
    if (T* g = detail::input_grad(n, 1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[(i / hw) % c] += n.grad[i];
    }
  });
}

/// x * s where s is a single-element tensor.
template <class T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw DimensionError("scale_by: scale must be a single element, got " + shape_str(s.shape()));
  const T k = s[0];
  Storage<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * k;
  return detail::make_result<T>(x.shape(), std::move(out), {x, s}, [](detail::Node<T>& n) {
    const auto& xv = detail::input_data(n, 0);
    const T k = detail::input_data(n, 1)[0];
    if (T* g = detail::input_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * k;
    }
    if (T* g = detail::input_grad(n, 1)) {
      T acc = 0;
      for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * xv[i];
      g[0] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (auto v : x.data()) acc += v;
  return detail::make_result<T>(Shape{1}, {acc}, {x}, [](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0)) {
      const std::size_t len = n.inputs[0]->data.size();
      for (std::size_t i = 0; i < len; ++i) g[i] += n.grad[0];
    }
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m,k] x b[k,n] -> [m,n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Storage<T> out(static_cast<std::size_t>(m * n));
  detail::MatMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatMap<T>(a.data().data(), m, k) * detail::ConstMatMap<T>(b.data().data(), k, n);
  add_flops(2ULL * m * k * n);
  return detail::make_result<T>({a.dim(0), b.dim(1)}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& nd) {
    detail::ConstMatMap<T> dc(nd.grad.data(), m, n);
    if (T* ga = detail::input_grad(nd, 0)) {
      detail::MatMap<T>(ga, m, k).noalias() += dc * detail::ConstMatMap<T>(nd.inputs[1]->data.data(), k, n).transpose();
    }
    if (T* gb = detail::input_grad(nd, 1)) {
      detail::MatMap<T>(gb, k, n).noalias() += detail::ConstMatMap<T>(nd.inputs[0]->data.data(), m, k).transpose() * dc;
    }
  });
}

/// Batched product. a[B,m,k] x b[B,k,n] -> [B,m,n]; with transpose_b,
/// b is [B,n,k] and the product uses its transpose.
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0);
  const auto m = static_cast<Eigen::Index>(a.dim(1));
  const auto k = static_cast<Eigen::Index>(a.dim(2));
  const auto n = static_cast<Eigen::Index>(transpose_b ? b.dim(1) : b.dim(2));
  Storage<T> out(batch * static_cast<std::size_t>(m * n));
  for (std::size_t i = 0; i < batch; ++i) {
    detail::ConstMatMap<T> am(a.data().data() + i * m * k, m, k);
    detail::MatMap<T> cm(out.data() + i * m * n, m, n);
    if (transpose_b) {
      cm.noalias() = am * detail::ConstMatMap<T>(b.data().data() + i * n * k, n, k).transpose();
    } else {
      cm.noalias() = am * detail::ConstMatMap<T>(b.data().data() + i * k * n, k, n);
    }
  }
  add_flops(2ULL * batch * m * k * n);
  return detail::make_result<T>(
      {batch, static_cast<std::size_t>(m), static_cast<std::size_t>(n)}, std::move(out), {a, b},
      [batch, m, k, n, transpose_b](detail::Node<T>& nd) {
        const T* av = nd.inputs[0]->data.data();
        const T* bv = nd.inputs[1]->data.data();
        T* ga = detail::input_grad(nd, 0);
        T* gb = detail::input_grad(nd, 1);
        for (std::size_t i = 0; i < batch; ++i) {
          detail::ConstMatMap<T> dc(nd.grad.data() + i * m * n, m, n);
          if (transpose_b) {
            // C = A B^T with B [n,k]
            if (ga) {
              detail::MatMap<T>(ga + i * m * k, m, k).noalias() += dc * detail::ConstMatMap<T>(bv + i * n * k, n, k);
            }
            if (gb) {
              detail::MatMap<T>(gb + i * n * k, n, k).noalias() +=
                  dc.transpose() * detail::ConstMatMap<T>(av + i * m * k, m, k);
            }
          } else {
            if (ga) {
              detail::MatMap<T>(ga + i * m * k, m, k).noalias() +=
                  dc * detail::ConstMatMap<T>(bv + i * k * n, k, n).transpose();
            }
            if (gb) {
              detail::MatMap<T>(gb + i * k * n, k, n).noalias() +=
                  detail::ConstMatMap<T>(av + i * m * k, m, k).transpose() * dc;
            }
          }
        }
      });
}

/// x[N,in] w[in,out] (+ b[out]).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = Tensor<T>()) {
  auto y = matmul(x, w);
  return b.defined() ? add_bias(y, b) : y;
}

namespace detail {

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t pixels() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t p = g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    const T* xc = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          T* out = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(out, out + g.wo, T(0));
            continue;
          }
          const T* xr = xc + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T(0) : xr[ix];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t p = g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c) {
    T* xc = dx + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* xr = xc + static_cast<std::size_t>(iy) * g.w;
          const T* in = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) xr[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. x is [C,H,W] or [N,C,H,W];
/// k is [Cout,Cin,kh,kw] with odd kh, kw; bias is optional [Cout].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride = 1, std::size_t pad = 0,
                 const Tensor<T>& bias = Tensor<T>()) {
  const bool batched = x.rank() == 4;
  if ((x.rank() != 3 && x.rank() != 4) || k.rank() != 4) {
    throw DimensionError("conv2d: expected x [C,H,W] or [N,C,H,W] and k [Cout,Cin,kh,kw], got " +
                         shape_str(x.shape()) + " and " + shape_str(k.shape()));
  }
  const std::size_t off = batched ? 1 : 0;
  detail::ConvGeometry g{};
  g.batch = batched ? x.dim(0) : 1;
  g.cin = x.dim(off);
  g.h = x.dim(off + 1);
  g.w = x.dim(off + 2);
  g.cout = k.dim(0);
  g.kh = k.dim(2);
  g.kw = k.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (k.dim(1) != g.cin) {
    throw DimensionError("conv2d: kernel " + shape_str(k.shape()) + " does not match input " + shape_str(x.shape()));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw DimensionError("conv2d: kernel extents must be odd, got " + shape_str(k.shape()));
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw) {
    throw DimensionError("conv2d: output extent < 1 for input " + shape_str(x.shape()) + " and kernel " +
                         shape_str(k.shape()));
  }
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  if (bias.defined() && bias.numel() != g.cout) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(g.cout) +
                         " output channels");
  }

  const auto K = static_cast<Eigen::Index>(g.k());
  const auto P = static_cast<Eigen::Index>(g.pixels());
  const auto Co = static_cast<Eigen::Index>(g.cout);
  Storage<T> out(g.batch * g.cout * g.pixels());
  Storage<T> col(g.pointwise() ? 0 : g.k() * g.pixels());
  detail::ConstMatMap<T> wm(k.data().data(), Co, K);
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* xn = x.data().data() + n * g.cin * g.h * g.w;
    const T* cp = xn;
    if (!g.pointwise()) {
      detail::im2col(xn, g, col.data());
      cp = col.data();
    }
    detail::MatMap<T> om(out.data() + n * g.cout * g.pixels(), Co, P);
    om.noalias() = wm * detail::ConstMatMap<T>(cp, K, P);
    if (bias.defined()) {
      for (Eigen::Index c = 0; c < Co; ++c) om.row(c).array() += bias[static_cast<std::size_t>(c)];
    }
  }
  add_flops(2ULL * g.batch * g.k() * g.cout * g.pixels());

  Shape oshape = batched ? Shape{g.batch, g.cout, g.ho, g.wo} : Shape{g.cout, g.ho, g.wo};
  std::vector<Tensor<T>> inputs{x, k};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result<T>(std::move(oshape), std::move(out), std::move(inputs), [g](detail::Node<T>& nd) {
    const auto K = static_cast<Eigen::Index>(g.k());
    const auto P = static_cast<Eigen::Index>(g.pixels());
    const auto Co = static_cast<Eigen::Index>(g.cout);
    T* gx = detail::input_grad(nd, 0);
    T* gk = detail::input_grad(nd, 1);
    T* gb = nd.inputs.size() > 2 ? detail::input_grad(nd, 2) : nullptr;
    const T* xv = nd.inputs[0]->data.data();
    detail::ConstMatMap<T> wm(nd.inputs[1]->data.data(), Co, K);
    Storage<T> col(g.pointwise() ? 0 : g.k() * g.pixels());
    Storage<T> dcol(gx && !g.pointwise() ? g.k() * g.pixels() : 0);
    for (std::size_t n = 0; n < g.batch; ++n) {
      detail::ConstMatMap<T> dout(nd.grad.data() + n * g.cout * g.pixels(), Co, P);
      const T* xn = xv + n * g.cin * g.h * g.w;
      if (gk) {
        const T* cp = xn;
        if (!g.pointwise()) {
          detail::im2col(xn, g, col.data());
          cp = col.data();
        }
        detail::MatMap<T>(gk, Co, K).noalias() += dout * detail::ConstMatMap<T>(cp, K, P).transpose();
      }
      if (gb) {
        for (Eigen::Index c = 0; c < Co; ++c) gb[c] += dout.row(c).sum();
      }
      if (gx) {
        T* gxn = gx + n * g.cin * g.h * g.w;
        if (g.pointwise()) {
          detail::MatMap<T>(gxn, K, P).noalias() += wm.transpose() * dout;
        } else {
          detail::MatMap<T>(dcol.data(), K, P).noalias() = wm.transpose() * dout;
          detail::col2im_add(dcol.data(), g, gxn);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention primitives

/// Exp-normalize along `axis` (negative counts from the back).
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const int r = static_cast<int>(x.rank());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
  const std::size_t n = x.dim(static_cast<std::size_t>(ax));
  std::size_t inner = 1;
  for (int i = ax + 1; i < r; ++i) inner *= x.dim(static_cast<std::size_t>(i));
  const std::size_t outer = x.numel() / (n * inner);
  Storage<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= s;
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [n, inner, outer](detail::Node<T>& nd) {
    T* g = detail::input_grad(nd, 0);
    if (!g) return;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += nd.grad[base + j * inner] * nd.data[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += nd.data[idx] * (nd.grad[idx] - dot);
        }
      }
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each trailing slice of length D, then applies gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(kLayerNormEps)) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) + " do not match input " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  Storage<T> out(x.numel());
  auto xhat = std::make_shared<Storage<T>>(x.numel());
  auto inv_std = std::make_shared<Storage<T>>(rows);
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = gamma[j] * h + beta[j];
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                                [d, rows, xhat, inv_std](detail::Node<T>& nd) {
                                  T* gx = detail::input_grad(nd, 0);
                                  T* gg = detail::input_grad(nd, 1);
                                  T* gb = detail::input_grad(nd, 2);
                                  const auto& gam = nd.inputs[1]->data;
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* dy = nd.grad.data() + r * d;
                                    const T* h = xhat->data() + r * d;
                                    if (gg || gb) {
                                      for (std::size_t j = 0; j < d; ++j) {
                                        if (gg) gg[j] += dy[j] * h[j];
                                        if (gb) gb[j] += dy[j];
                                      }
                                    }
                                    if (gx) {
                                      T m1 = 0, m2 = 0;
                                      for (std::size_t j = 0; j < d; ++j) {
                                        const T dh = dy[j] * gam[j];
                                        m1 += dh;
                                        m2 += dh * h[j];
                                      }
                                      m1 /= static_cast<T>(d);
                                      m2 /= static_cast<T>(d);
                                      const T is = (*inv_std)[r];
                                      for (std::size_t j = 0; j < d; ++j) {
                                        gx[r * d + j] += is * (dy[j] * gam[j] - m1 - h[j] * m2);
                                      }
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Shape and indexing

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Storage<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {x}, [](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
  });
}

using IndexMap = std::shared_ptr<const std::vector<std::size_t>>;

/// out.flat[i] = x.flat[index[i]]. Backward scatter-adds, so repeated
/// indices accumulate.
template <class T>
Tensor<T> gather(const Tensor<T>& x, IndexMap index, Shape shape) {
  if (shape_numel(shape) != index->size()) {
    throw DimensionError("gather: index length " + std::to_string(index->size()) + " does not match shape " +
                         shape_str(shape));
  }
  Storage<T> out(index->size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t j = (*index)[i];
    if (j >= xv.size()) throw DimensionError("gather: index out of range");
    out[i] = xv[j];
  }
  return detail::make_result<T>(std::move(shape), std::move(out), {x}, [index](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[(*index)[i]] += n.grad[i];
    }
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_str(ref));
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.dim(i) != ref[i]) {
        throw DimensionError("concat: shape mismatch " + shape_str(ref) + " vs " + shape_str(p.shape()));
      }
    }
    sizes.push_back(p.dim(axis) * inner);
    total += p.dim(axis);
  }
  Shape oshape = ref;
  oshape[axis] = total;
  const std::size_t row = total * inner;
  Storage<T> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * sizes[k], sizes[k], out.data() + o * row + offset);
    }
    offset += sizes[k];
  }
  return detail::make_result<T>(std::move(oshape), std::move(out), parts, [sizes, outer, row](detail::Node<T>& n) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (T* g = detail::input_grad(n, k)) {
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = n.grad.data() + o * row + offset;
          T* dst = g + o * sizes[k];
          for (std::size_t i = 0; i < sizes[k]; ++i) dst[i] += src[i];
        }
      }
      offset += sizes[k];
    }
  });
}

/// x[i] along the leading axis.
template <class T>
Tensor<T> slice0(const Tensor<T>& x, std::size_t i) {
  if (x.rank() < 2 || i >= x.dim(0)) throw DimensionError("slice0: index out of range for " + shape_str(x.shape()));
  Shape oshape(x.shape().begin() + 1, x.shape().end());
  const std::size_t len = shape_numel(oshape);
  Storage<T> out(x.data().begin() + static_cast<std::ptrdiff_t>(i * len),
                     x.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * len));
  return detail::make_result<T>(std::move(oshape), std::move(out), {x}, [i, len](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0)) {
      for (std::size_t j = 0; j < len; ++j) g[i * len + j] += n.grad[j];
    }
  });
}

/// Stacks equally shaped tensors along a new leading axis.
template <class T>
Tensor<T> stack0(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("stack0: no inputs");
  std::vector<Tensor<T>> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.shape() != parts[0].shape()) {
      throw DimensionError("stack0: heterogeneous shapes " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    }
    Shape s{1};
    s.insert(s.end(), p.shape().begin(), p.shape().end());
    expanded.push_back(reshape(p, std::move(s)));
  }
  return concat(expanded, 0);
}

/// Nearest-neighbor upsampling of the two trailing axes by an integer factor.
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
  if (x.rank() < 2 || factor == 0) throw DimensionError("upsample_nearest: invalid input " + shape_str(x.shape()));
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t planes = x.numel() / (h * w);
  const std::size_t H = h * factor, W = w * factor;
  Shape oshape = x.shape();
  oshape[oshape.size() - 2] = H;
  oshape[oshape.size() - 1] = W;
  Storage<T> out(planes * H * W);
  const auto xv = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < H; ++y) {
      const T* src = xv.data() + p * h * w + (y / factor) * w;
      T* dst = out.data() + p * H * W + y * W;
      for (std::size_t xx = 0; xx < W; ++xx) dst[xx] = src[xx / factor];
    }
  }
  return detail::make_result<T>(std::move(oshape), std::move(out), {x}, [planes, h, w, factor](detail::Node<T>& n) {
    T* g = detail::input_grad(n, 0);
    if (!g) return;
    const std::size_t H = h * factor, W = w * factor;
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t y = 0; y < H; ++y) {
        const T* src = n.grad.data() + p * H * W + y * W;
        T* dst = g + p * h * w + (y / factor) * w;
        for (std::size_t xx = 0; xx < W; ++xx) dst[xx / factor] += src[xx];
      }
    }
  });
}

/// [R, C] -> [C, R]
template <class T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("transpose2d: expected rank 2, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  auto idx = std::make_shared<std::vector<std::size_t>>(r * c);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < r; ++j) (*idx)[i * r + j] = j * c + i;
  }
  return gather(x, idx, Shape{c, r});
}

}  // namespace vswu
