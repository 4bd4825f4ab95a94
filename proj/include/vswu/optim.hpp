#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "vswu/params.hpp"

namespace vswu {

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  std::vector<double> m, v;
};

/// One bias-corrected Adam update of a single tensor; `step` is the
/// 1-based update count.
template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, AdamMoments& mom, std::uint64_t step, double lr,
                 const AdamConfig& cfg = {}) {
  if (param.size() != grad.size()) {
    throw DimensionError("adam_step: parameter has " + std::to_string(param.size()) + " entries, gradient has " +
                         std::to_string(grad.size()));
  }
  if (step == 0) throw std::invalid_argument("adam_step: step count is 1-based");
  if (mom.m.empty()) {
    mom.m.assign(param.size(), 0.0);
    mom.v.assign(param.size(), 0.0);
  }
  if (mom.m.size() != param.size() || mom.v.size() != param.size()) {
    throw DimensionError("adam_step: optimizer state size does not match the parameter");
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    mom.m[i] = cfg.beta1 * mom.m[i] + (1 - cfg.beta1) * g;
    mom.v[i] = cfg.beta2 * mom.v[i] + (1 - cfg.beta2) * g * g;
    const double mhat = mom.m[i] / c1, vhat = mom.v[i] / c2;
    param[i] = static_cast<T>(static_cast<double>(param[i]) - lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

/// Adam over the trainable entries of a parameter store. Frozen tensors
/// (requires_grad off) get no state and are never touched.
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// Applies one update to every trainable tensor. A trainable tensor that
  /// received no gradient this step is treated as having a zero gradient.
  void step(ParameterStore<T>& store, double lr) {
    ++steps_;
    std::vector<T> zeros;
    for (const auto& [name, p] : store.entries()) {
      if (!p.requires_grad()) {
        state_.erase(name);
        continue;
      }
      Tensor<T> handle = p;
      std::span<const T> g = p.grad();
      if (!p.has_grad()) {
        zeros.assign(p.numel(), T(0));
        g = zeros;
      }
      adam_update(handle.mutable_data(), g, state_[name], steps_, lr, cfg_);
    }
  }

  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t s) { steps_ = s; }
  const AdamConfig& config() const { return cfg_; }
  std::map<std::string, AdamMoments>& state() { return state_; }
  const std::map<std::string, AdamMoments>& state() const { return state_; }

 private:
  AdamConfig cfg_;
  std::uint64_t steps_ = 0;
  std::map<std::string, AdamMoments> state_;
};

// ---------------------------------------------------------------------------
// Plateau schedule

struct PlateauConfig {
  std::size_t patience = 20;
  double decay = 0.8;
  double threshold = 1e-5;  // absolute improvement needed to reset patience
};

class PlateauScheduler {
 public:
  PlateauScheduler(double lr0, PlateauConfig cfg = {}) : cfg_(cfg), lr_(lr0) {
    if (!(lr0 > 0)) throw std::invalid_argument("scheduler: lr0 must be positive");
    if (!(cfg.decay > 0 && cfg.decay < 1)) throw std::invalid_argument("scheduler: decay must be in (0,1)");
    if (cfg.patience == 0) throw std::invalid_argument("scheduler: patience must be >= 1");
  }

  /// Records one epoch's validation loss and returns the learning rate for
  /// the next epoch.
  double step(double val_loss) {
    if (val_loss < best_ - cfg_.threshold) {
      best_ = val_loss;
      stagnant_ = 0;
    } else if (++stagnant_ >= cfg_.patience) {
      lr_ *= cfg_.decay;
      stagnant_ = 0;
    }
    return lr_;
  }

  double lr() const { return lr_; }
  double best() const { return best_; }
  std::size_t stagnant_epochs() const { return stagnant_; }
  const PlateauConfig& config() const { return cfg_; }

  void restore(double lr, double best, std::size_t stagnant) {
    lr_ = lr;
    best_ = best;
    stagnant_ = stagnant;
  }

 private:
  PlateauConfig cfg_;
  double lr_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t stagnant_ = 0;
};

// ---------------------------------------------------------------------------
// Freezing

inline bool is_component_letter(char c) { return c >= 'a' && c <= 'e'; }

/// Parses "a+b+c", "a,b", "abc" or "" / "none" into component letters.
inline std::set<char> parse_freeze_set(const std::string& text) {
  std::set<char> out;
  if (text == "none") return out;
  for (char c : text) {
    if (c == '+' || c == ',' || c == ' ') continue;
    if (!is_component_letter(c)) {
      throw std::invalid_argument(std::string("unknown component letter '") + c + "' (expected a-e)");
    }
    out.insert(c);
  }
  return out;
}

inline std::string freeze_set_str(const std::set<char>& s) {
  std::string out;
  for (char c : s) {
    if (!out.empty()) out += '+';
    out += c;
  }
  return out.empty() ? "none" : out;
}

/// Marks parameters of the listed components as frozen and all others as
/// trainable. Returns the number of frozen tensors.
template <class T>
std::size_t apply_freeze(ParameterStore<T>& store, const std::set<char>& letters) {
  for (char c : letters) {
    if (!is_component_letter(c)) throw std::invalid_argument(std::string("unknown component letter '") + c + "'");
  }
  std::size_t frozen = 0;
  for (const auto& [name, p] : store.entries()) {
    Tensor<T> handle = p;
    const bool freeze = name.size() > 1 && name[1] == '.' && letters.count(name[0]);
    handle.set_requires_grad(!freeze);
    frozen += freeze;
  }
  return frozen;
}

}  // namespace vswu
