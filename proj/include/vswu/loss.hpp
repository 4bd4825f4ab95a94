#pragma once

#include <cmath>

#include "vswu/ops.hpp"

namespace vswu {

struct LossConfig {
  double bce_weight = 0.5;
  double dice_weight = 0.5;
  double dice_smooth = 1.0;
  double prob_clamp = 1e-7;
};

/// Per-channel terms as plain numbers, for logging.
struct LossTerms {
  std::vector<double> bce, dice;
  double total = 0;
};

namespace detail {

template <class T>
void check_loss_inputs(const Tensor<T>& probs, const Tensor<T>& label) {
  if (probs.rank() != 3 || probs.shape() != label.shape()) {
    throw DimensionError("combined_loss: expected matching [C,H,W] probs and label, got " + shape_str(probs.shape()) +
                         " and " + shape_str(label.shape()));
  }
  for (auto v : label.data()) {
    if (v != T(0) && v != T(1)) throw std::invalid_argument("combined_loss: label values must be 0 or 1");
  }
}

}  // namespace detail

/// Plain evaluation of the objective (no graph).
template <class T>
LossTerms loss_terms(const Tensor<T>& probs, const Tensor<T>& label, const LossConfig& cfg = {}) {
  detail::check_loss_inputs(probs, label);
  const std::size_t c = probs.dim(0), n = probs.dim(1) * probs.dim(2);
  LossTerms out;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double bce = 0, spy = 0, sp = 0, sy = 0;
    for (std::size_t i = ch * n; i < (ch + 1) * n; ++i) {
      const double p = static_cast<double>(probs[i]), y = static_cast<double>(label[i]);
      const double pc = std::clamp(p, cfg.prob_clamp, 1.0 - cfg.prob_clamp);
      bce -= y * std::log(pc) + (1 - y) * std::log(1 - pc);
      spy += p * y;
      sp += p;
      sy += y;
    }
    out.bce.push_back(bce / static_cast<double>(n));
    out.dice.push_back(1.0 - (2 * spy + cfg.dice_smooth) / (sp + sy + cfg.dice_smooth));
    out.total += cfg.bce_weight * out.bce.back() + cfg.dice_weight * out.dice.back();
  }
  out.total /= static_cast<double>(c);
  return out;
}

/// Mean over channels of weighted BCE + soft Dice loss, on probabilities.
/// Probabilities are clamped inside the log terms only; the clamp derivative
/// (zero outside the interval) is used on the way back.
template <class T>
Tensor<T> combined_loss(const Tensor<T>& probs, const Tensor<T>& label, const LossConfig& cfg = {}) {
  const auto terms = loss_terms(probs, label, cfg);
  const std::size_t c = probs.dim(0), n = probs.dim(1) * probs.dim(2);
  if (detail::branch_trace().enabled) {
    for (auto v : probs.data()) {
      const double pv = static_cast<double>(v);
      detail::record_branch(pv > cfg.prob_clamp && pv < 1.0 - cfg.prob_clamp);
    }
  }
  // Dice ratio pieces per channel, reused by the adjoint.
  std::vector<double> num(c), den(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double spy = 0, sp = 0, sy = 0;
    for (std::size_t i = ch * n; i < (ch + 1) * n; ++i) {
      spy += static_cast<double>(probs[i]) * static_cast<double>(label[i]);
      sp += static_cast<double>(probs[i]);
      sy += static_cast<double>(label[i]);
    }
    num[ch] = 2 * spy + cfg.dice_smooth;
    den[ch] = sp + sy + cfg.dice_smooth;
  }
  return detail::make_result<T>(
      Shape{1}, {static_cast<T>(terms.total)}, {probs, label}, [cfg, c, n, num, den](detail::Node<T>& node) {
        T* g = detail::input_grad(node, 0);
        if (!g) return;
        const auto& p = detail::input_data(node, 0);
        const auto& y = detail::input_data(node, 1);
        const double up = static_cast<double>(node.grad[0]) / static_cast<double>(c);
        const double lo = cfg.prob_clamp, hi = 1.0 - cfg.prob_clamp;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double d2 = den[ch] * den[ch];
          for (std::size_t i = ch * n; i < (ch + 1) * n; ++i) {
            const double pi = static_cast<double>(p[i]), yi = static_cast<double>(y[i]);
            double d = 0;
            if (pi > lo && pi < hi) d += cfg.bce_weight * (-yi / pi + (1 - yi) / (1 - pi)) / static_cast<double>(n);
            d -= cfg.dice_weight * (2 * yi * den[ch] - num[ch]) / d2;
            g[i] += static_cast<T>(up * d);
          }
        }
      });
}

}  // namespace vswu
