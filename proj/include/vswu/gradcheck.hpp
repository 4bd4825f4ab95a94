#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "vswu/rng.hpp"
#include "vswu/tensor.hpp"

namespace vswu {

/// Step for checks through many stacked layers: at 1e-5 the roundoff of
/// the loss (~1e-16 relative) already reaches the 1e-8 error floor once
/// true gradients drop to ~1e-7.
inline constexpr double kCompositeStep = 1e-4;

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t skipped_at_kinks = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `loss` is re-evaluated for every perturbation and must read
/// the current values of `leaves`. When `max_entries_per_leaf` is nonzero
/// only a seeded random subset of each leaf is probed. With `kink_guard`,
/// entries whose +-h evaluations take a different relu/clamp branch than
/// the unperturbed pass are skipped and counted instead of compared.
template <class F>
GradCheckReport finite_diff_check(F&& loss, std::vector<Tensor<double>> leaves, double h = 1e-5,
                                  std::size_t max_entries_per_leaf = 0, std::uint64_t seed = 7, bool kink_guard = false) {
  auto& trace = detail::branch_trace();
  auto traced = [&](std::uint64_t* hash) {
    trace.enabled = kink_guard;
    trace.hash = detail::BranchTrace{}.hash;
    auto v = loss();
    trace.enabled = false;
    if (hash) *hash = trace.hash;
    return v;
  };
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.clear_grad();
  }
  std::uint64_t base_hash = 0;
  {
    auto out = traced(&base_hash);
    out.backward();
  }
  std::vector<std::vector<double>> analytic;
  for (auto& leaf : leaves) {
    if (leaf.has_grad()) {
      analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
    } else {
      analytic.emplace_back(leaf.numel(), 0.0);
    }
  }

  GradCheckReport report;
  Rng rng(seed);
  NoGradGuard no_grad;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto values = leaves[l].mutable_data();
    std::vector<std::size_t> probe(values.size());
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = i;
    if (max_entries_per_leaf != 0 && probe.size() > max_entries_per_leaf) {
      rng.shuffle(probe.begin(), probe.end());
      probe.resize(max_entries_per_leaf);
      std::sort(probe.begin(), probe.end());
    }
    for (auto i : probe) {
      const double saved = values[i];
      std::uint64_t hp = 0, hm = 0;
      values[i] = saved + h;
      const double fp = traced(&hp).item();
      values[i] = saved - h;
      const double fm = traced(&hm).item();
      values[i] = saved;
      if (kink_guard && (hp != base_hash || hm != base_hash)) {
        ++report.skipped_at_kinks;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[l][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++report.entries_checked;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_leaf = l;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

/// Single-input form: `f` maps x to a scalar tensor.
template <class F>
double finite_diff_check(F&& f, Tensor<double>& x, double h = 1e-5) {
  auto report = finite_diff_check([&] { return f(x); }, std::vector<Tensor<double>>{x}, h);
  return report.max_relative_error;
}

}  // namespace vswu
