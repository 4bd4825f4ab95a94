#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vswu/metrics.hpp"

namespace vswu {

struct StapleOptions {
  std::size_t max_iter = 100;
  double tol = 1e-6;                   // on max |W change| between iterations
  std::optional<std::vector<double>> prior;  // per pixel; default: clamped mean vote
  bool estimate_global_prior = false;  // scalar prior re-estimated each M-step
  double prior_clamp = 0.01;
  double init = 0.99;                  // initial sensitivity and specificity
  double prob_clamp = 1e-5;
};

struct StapleResult {
  std::size_t height = 0, width = 0;
  std::vector<double> weights;  // consensus probability W per pixel
  Mask fused;                   // W >= 0.5
  std::vector<double> sensitivity, specificity;  // per rater
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<double> log_likelihood;  // one entry per E-step
  std::string prior_mode = "mean_vote";  // mean_vote | global_estimated | user

  nlohmann::json to_json() const {
    return {{"raters", sensitivity.size()},
            {"sensitivity", sensitivity},
            {"specificity", specificity},
            {"iterations", iterations},
            {"converged", converged},
            {"prior", prior_mode},
            {"log_likelihood", log_likelihood},
            {"fused_threshold", 0.5}};
  }
};

namespace detail {

inline double log_add(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

}  // namespace detail

/// Binary STAPLE: EM estimate of per-rater sensitivity p_r and specificity
/// q_r together with the posterior W of the true label per pixel. Per-pixel
/// products run in log space over rater terms sorted by value, so the
/// result does not depend on rater order.
inline StapleResult staple_fuse(const std::vector<Mask>& raters, const StapleOptions& opt = {}) {
  if (raters.size() < 2) throw std::invalid_argument("staple: need at least 2 raters, got " + std::to_string(raters.size()));
  for (const auto& m : raters) {
    detail::require_same(raters[0], m, "staple");
    for (auto b : m.bits) {
      if (b > 1) throw std::invalid_argument("staple: rater masks must be binary");
    }
  }
  if (opt.max_iter == 0) throw std::invalid_argument("staple: max_iter must be >= 1");
  const std::size_t r = raters.size(), n = raters[0].bits.size();
  StapleResult res;
  res.height = raters[0].height;
  res.width = raters[0].width;
  res.sensitivity.assign(r, opt.init);
  res.specificity.assign(r, opt.init);

  std::vector<double> prior(n);
  if (opt.prior) {
    if (opt.prior->size() != n) throw DimensionError("staple: prior size does not match the masks");
    prior = *opt.prior;
    res.prior_mode = "user";
  } else if (opt.estimate_global_prior) {
    double votes = 0;
    for (const auto& m : raters) votes += static_cast<double>(m.count());
    prior.assign(n, std::clamp(votes / static_cast<double>(r * n), opt.prior_clamp, 1 - opt.prior_clamp));
    res.prior_mode = "global_estimated";
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t votes = 0;
      for (const auto& m : raters) votes += m.bits[i];
      prior[i] = std::clamp(static_cast<double>(votes) / static_cast<double>(r), opt.prior_clamp, 1 - opt.prior_clamp);
    }
  }

  bool unanimous = true;
  for (std::size_t i = 0; i < n && unanimous; ++i) {
    for (const auto& m : raters) unanimous = unanimous && m.bits[i] == raters[0].bits[i];
  }
  res.fused = Mask(res.height, res.width);
  if (unanimous) {
    // every rater agrees everywhere: the fixed point is the shared mask
    res.weights.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      res.weights[i] = raters[0].bits[i];
      res.fused.bits[i] = raters[0].bits[i];
    }
    res.sensitivity.assign(r, 1 - opt.prob_clamp);
    res.specificity.assign(r, 1 - opt.prob_clamp);
    res.iterations = 1;
    res.converged = true;
    return res;
  }

  auto clampp = [&](double v) { return std::clamp(v, opt.prob_clamp, 1 - opt.prob_clamp); };
  std::vector<double> w(n, 0.0), prev;
  std::vector<std::array<double, 2>> terms(r);
  for (std::size_t it = 1; it <= opt.max_iter; ++it) {
    // E-step
    double ll = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < r; ++k) {
        const bool d = raters[k].bits[i];
        const double p = res.sensitivity[k], q = res.specificity[k];
        terms[k] = {d ? std::log(p) : std::log1p(-p), d ? std::log1p(-q) : std::log(q)};
      }
      std::sort(terms.begin(), terms.end());
      double la = std::log(prior[i]), lb = std::log1p(-prior[i]);
      for (const auto& t : terms) {
        la += t[0];
        lb += t[1];
      }
      w[i] = 1.0 / (1.0 + std::exp(lb - la));
      ll += detail::log_add(la, lb);
    }
    res.log_likelihood.push_back(ll);
    res.iterations = it;
    if (!prev.empty()) {
      double delta = 0;
      for (std::size_t i = 0; i < n; ++i) delta = std::max(delta, std::abs(w[i] - prev[i]));
      if (delta < opt.tol) {
        res.converged = true;
        break;
      }
    }
    if (it == opt.max_iter) break;
    // M-step
    double sw = 0, sv = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sw += w[i];
      sv += 1 - w[i];
    }
    for (std::size_t k = 0; k < r; ++k) {
      double tp = 0, tn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (raters[k].bits[i]) {
          tp += w[i];
        } else {
          tn += 1 - w[i];
        }
      }
      res.sensitivity[k] = clampp(sw > 0 ? tp / sw : opt.init);
      res.specificity[k] = clampp(sv > 0 ? tn / sv : opt.init);
    }
    if (opt.estimate_global_prior) prior.assign(n, std::clamp(sw / static_cast<double>(n), opt.prior_clamp, 1 - opt.prior_clamp));
    prev = w;
  }
  res.weights = w;
  for (std::size_t i = 0; i < n; ++i) res.fused.bits[i] = w[i] >= 0.5 ? 1 : 0;
  return res;
}

}  // namespace vswu
