#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vswu/rng.hpp"
#include "vswu/tensor.hpp"

namespace vswu {

enum class InitKind { Zeros, Ones, HeNormal, TruncNormal };

struct Init {
  InitKind kind = InitKind::Zeros;
  double scale = 0.0;  // fan-in for HeNormal, stddev for TruncNormal

  static Init zeros() { return {InitKind::Zeros, 0.0}; }
  static Init ones() { return {InitKind::Ones, 0.0}; }
  static Init he(std::size_t fan_in) { return {InitKind::HeNormal, static_cast<double>(fan_in)}; }
  static Init trunc_normal(double stddev = 0.02) { return {InitKind::TruncNormal, stddev}; }
};

/// Named, insertion-ordered parameter registry. Names carry the component
/// letter prefix (a. backbone, b. tcm, c. encoder, d. decoder, e. head).
template <class T>
class ParameterStore {
 public:
  Tensor<T> add(const std::string& name, Shape shape, Init init, Rng& rng) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
    std::vector<T> values(shape_numel(shape));
    switch (init.kind) {
      case InitKind::Zeros:
        break;
      case InitKind::Ones:
        std::fill(values.begin(), values.end(), T(1));
        break;
      case InitKind::HeNormal: {
        const double sd = std::sqrt(2.0 / init.scale);
        for (auto& v : values) v = static_cast<T>(rng.normal() * sd);
        break;
      }
      case InitKind::TruncNormal:
        for (auto& v : values) v = static_cast<T>(rng.truncated_normal(init.scale));
        break;
    }
    Tensor<T> p(std::move(shape), std::move(values));
    p.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, p);
    return p;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : entries_) t.clear_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace vswu
