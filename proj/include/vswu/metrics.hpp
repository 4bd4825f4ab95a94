#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vswu/tensor.hpp"

namespace vswu {

/// Binary mask, row-major, values 0/1.
struct Mask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

  std::uint8_t operator()(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
  std::uint8_t& operator()(std::size_t y, std::size_t x) { return bits[y * width + x]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  bool empty() const { return count() == 0; }
};

inline constexpr double kMaskThreshold = 0.5;

/// Channel `c` of a [C,H,W] map, thresholded (>= t) into a mask.
template <class T>
Mask threshold_channel(const Tensor<T>& map, std::size_t c, double t = kMaskThreshold) {
  if (map.rank() != 3 || c >= map.dim(0)) throw DimensionError("threshold_channel: bad channel or shape " + shape_str(map.shape()));
  Mask m(map.dim(1), map.dim(2));
  const std::size_t n = m.bits.size();
  for (std::size_t i = 0; i < n; ++i) m.bits[i] = static_cast<double>(map[c * n + i]) >= t ? 1 : 0;
  return m;
}

namespace detail {
inline void require_same(const Mask& a, const Mask& b, const char* op) {
  if (a.height != b.height || a.width != b.width) {
    throw DimensionError(std::string(op) + ": mask shapes differ (" + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
  }
}
}  // namespace detail

inline double dsc(const Mask& pred, const Mask& gt) {
  detail::require_same(pred, gt, "dsc");
  std::size_t inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    inter += pred.bits[i] & gt.bits[i];
    a += pred.bits[i];
    b += gt.bits[i];
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

struct SensSpec {
  double sensitivity = 1.0, specificity = 1.0;
  bool sensitivity_undefined = false;  // no positives in the ground truth
  bool specificity_undefined = false;  // no negatives in the ground truth
};

inline SensSpec sens_spec(const Mask& pred, const Mask& gt) {
  detail::require_same(pred, gt, "sens_spec");
  std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    const bool p = pred.bits[i], g = gt.bits[i];
    tp += p && g;
    fn += !p && g;
    tn += !p && !g;
    fp += p && !g;
  }
  SensSpec r;
  if (tp + fn == 0) {
    r.sensitivity_undefined = true;
  } else {
    r.sensitivity = static_cast<double>(tp) / static_cast<double>(tp + fn);
  }
  if (tn + fp == 0) {
    r.specificity_undefined = true;
  } else {
    r.specificity = static_cast<double>(tn) / static_cast<double>(tn + fp);
  }
  return r;
}

/// Mask pixels with a 4-neighbor outside the mask; the image border counts
/// as outside.
inline Mask boundary(const Mask& m) {
  Mask b(m.height, m.width);
  for (std::size_t y = 0; y < m.height; ++y) {
    for (std::size_t x = 0; x < m.width; ++x) {
      if (!m(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == m.height || x + 1 == m.width || !m(y - 1, x) || !m(y + 1, x) ||
                        !m(y, x - 1) || !m(y, x + 1);
      b(y, x) = edge;
    }
  }
  return b;
}

namespace detail {

// 1-D squared distance transform of a sampled function (lower envelope of
// parabolas). f uses +inf for "no feature".
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
  const std::size_t n = f.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] < inf) {
      first = q;
      break;
    }
  }
  if (first == n) {
    std::fill(d.begin(), d.end(), inf);
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] == inf) continue;
    const auto qd = static_cast<double>(q);
    double s;
    while (true) {
      const auto vk = static_cast<double>(v[k]);
      s = ((f[q] + qd * qd) - (f[v[k]] + vk * vk)) / (2 * qd - 2 * vk);
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    if (s <= z[k]) {
      // k == 0 and the new parabola dominates everywhere
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const auto qd = static_cast<double>(q);
    while (z[k + 1] < qd) ++k;
    const auto dv = qd - static_cast<double>(v[k]);
    d[q] = dv * dv + f[v[k]];
  }
}

}  // namespace detail

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel of `features` (+inf everywhere when it is empty).
inline std::vector<double> squared_distance_transform(const Mask& features) {
  const std::size_t h = features.height, w = features.width;
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(h * w);
  const std::size_t n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<std::size_t> v(n);
  // columns
  f.resize(h);
  d.resize(h);
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) f[y] = features(y, x) ? 0.0 : inf;
    detail::edt_1d(f, d, v, z);
    for (std::size_t y = 0; y < h; ++y) g[y * w + x] = d[y];
  }
  // rows
  f.resize(w);
  d.resize(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) f[x] = g[y * w + x];
    detail::edt_1d(f, d, v, z);
    for (std::size_t x = 0; x < w; ++x) g[y * w + x] = d[x];
  }
  return g;
}

/// Nearest-surface distances from every boundary pixel of `a` to the
/// boundary of `b` followed by those from `b` to `a`. Empty when either
/// mask is empty.
inline std::vector<double> pooled_surface_distances(const Mask& a, const Mask& b) {
  detail::require_same(a, b, "surface distance");
  if (a.empty() || b.empty()) return {};
  const Mask ba = boundary(a), bb = boundary(b);
  const auto da = squared_distance_transform(ba), db = squared_distance_transform(bb);
  std::vector<double> out;
  for (std::size_t i = 0; i < ba.bits.size(); ++i) {
    if (ba.bits[i]) out.push_back(std::sqrt(db[i]));
  }
  for (std::size_t i = 0; i < bb.bits.size(); ++i) {
    if (bb.bits[i]) out.push_back(std::sqrt(da[i]));
  }
  return out;
}

/// Linear-interpolation percentile (q in [0,100]) of unsorted values.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

/// 95th percentile of pooled surface distances; nullopt if a mask is empty.
inline std::optional<double> hd95(const Mask& pred, const Mask& gt) {
  const auto d = pooled_surface_distances(pred, gt);
  if (d.empty()) return std::nullopt;
  return percentile(d, 95.0);
}

/// Mean of pooled surface distances; nullopt if a mask is empty.
inline std::optional<double> asd(const Mask& pred, const Mask& gt) {
  const auto d = pooled_surface_distances(pred, gt);
  if (d.empty()) return std::nullopt;
  double s = 0;
  for (double v : d) s += v;
  return s / static_cast<double>(d.size());
}

// ---------------------------------------------------------------------------
// Aggregated report

struct ChannelMetrics {
  double dsc = 0, sensitivity = 0, specificity = 0;
  std::optional<double> hd95, asd;  // mean over cases where defined
  std::size_t cases = 0;
  std::size_t distance_undefined = 0;  // cases with an empty mask
  std::size_t sensitivity_undefined = 0, specificity_undefined = 0;
};

/// Running per-channel sums in a fixed accumulation order.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(std::size_t channels = 2) : sums_(channels) {}

  void add(std::size_t channel, const Mask& pred, const Mask& gt) {
    auto& s = sums_.at(channel);
    s.dsc += dsc(pred, gt);
    const auto ss = sens_spec(pred, gt);
    s.sens += ss.sensitivity;
    s.spec += ss.specificity;
    s.sens_undef += ss.sensitivity_undefined;
    s.spec_undef += ss.specificity_undefined;
    const auto d = pooled_surface_distances(pred, gt);
    if (d.empty()) {
      ++s.dist_undef;
    } else {
      s.hd95 += percentile(d, 95.0);
      double m = 0;
      for (double v : d) m += v;
      s.asd += m / static_cast<double>(d.size());
      ++s.dist_cases;
    }
    ++s.cases;
  }

  /// Thresholds a [C,H,W] probability map against a [C,H,W] binary label.
  template <class T>
  void add_prediction(const Tensor<T>& probs, const Tensor<T>& label) {
    for (std::size_t c = 0; c < sums_.size(); ++c) add(c, threshold_channel(probs, c), threshold_channel(label, c));
  }

  std::vector<ChannelMetrics> result() const {
    std::vector<ChannelMetrics> out;
    for (const auto& s : sums_) {
      ChannelMetrics m;
      m.cases = s.cases;
      const double n = s.cases ? static_cast<double>(s.cases) : 1.0;
      m.dsc = s.dsc / n;
      m.sensitivity = s.sens / n;
      m.specificity = s.spec / n;
      if (s.dist_cases) {
        m.hd95 = s.hd95 / static_cast<double>(s.dist_cases);
        m.asd = s.asd / static_cast<double>(s.dist_cases);
      }
      m.distance_undefined = s.dist_undef;
      m.sensitivity_undefined = s.sens_undef;
      m.specificity_undefined = s.spec_undef;
      out.push_back(m);
    }
    return out;
  }

  std::size_t channels() const { return sums_.size(); }

 private:
  struct Sums {
    double dsc = 0, sens = 0, spec = 0, hd95 = 0, asd = 0;
    std::size_t cases = 0, dist_cases = 0, dist_undef = 0, sens_undef = 0, spec_undef = 0;
  };
  std::vector<Sums> sums_;
};

inline const char* channel_name(std::size_t c) { return c == 0 ? "bolus" : c == 1 ? "pharynx" : "channel"; }

struct MetricsReport {
  std::vector<ChannelMetrics> channels;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;

  double mean_dsc() const {
    double s = 0;
    for (const auto& c : channels) s += c.dsc;
    return channels.empty() ? 0.0 : s / static_cast<double>(channels.size());
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["flop_convention"] = "one multiply-add counts as 2 FLOPs; one forward pass over one snippet";
    j["distance_units"] = "pixels at input resolution";
    j["flops"] = flops;
    j["params"] = params;
    j["mean_dsc"] = mean_dsc();
    auto& ch = j["channels"];
    for (std::size_t c = 0; c < channels.size(); ++c) {
      const auto& m = channels[c];
      nlohmann::json e{{"name", channel_name(c)},
                       {"dsc", m.dsc},
                       {"sensitivity", m.sensitivity},
                       {"specificity", m.specificity},
                       {"cases", m.cases},
                       {"flags",
                        {{"distance_undefined_cases", m.distance_undefined},
                         {"sensitivity_undefined_cases", m.sensitivity_undefined},
                         {"specificity_undefined_cases", m.specificity_undefined}}}};
      e["hd95"] = m.hd95 ? nlohmann::json(*m.hd95) : nlohmann::json(nullptr);
      e["asd"] = m.asd ? nlohmann::json(*m.asd) : nlohmann::json(nullptr);
      ch.push_back(e);
    }
    return j;
  }

  static std::string csv_header() {
    return "bolus_dsc,bolus_hd95,bolus_asd,bolus_sens,bolus_spec,pharynx_dsc,pharynx_hd95,pharynx_asd,pharynx_sens,"
           "pharynx_spec,flops,params";
  }

  /// Undefined distances are written as empty fields.
  std::string csv_row() const {
    auto num = [](double v) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.10g", v);
      return std::string(buf);
    };
    std::string row;
    for (const auto& m : channels) {
      row += num(m.dsc) + "," + (m.hd95 ? num(*m.hd95) : "") + "," + (m.asd ? num(*m.asd) : "") + "," +
             num(m.sensitivity) + "," + num(m.specificity) + ",";
    }
    return row + std::to_string(flops) + "," + std::to_string(params);
  }
};

}  // namespace vswu
