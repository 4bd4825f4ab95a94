#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vswu/parallel.hpp"
#include "vswu/pgm.hpp"
#include "vswu/rng.hpp"
#include "vswu/tensor.hpp"

namespace vswu {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Synthetic generator

struct SynthConfig {
  std::size_t num_sequences = 14;
  std::size_t frames_per_sequence = 20;
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 42;
  double noise_sigma = 0.05;
  double leading_absence = 0.2;  // fraction of leading frames without bolus
  double velocity = 2.0;         // bolus speed in pixels per frame at 64 px height
  double train_fraction = 0.70;
  double val_fraction = 0.15;

  void validate() const {
    if (height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0) {
      throw std::invalid_argument("synth: height and width must be positive multiples of 16");
    }
    if (frames_per_sequence < 13) throw std::invalid_argument("synth: frames_per_sequence must be >= 13");
    if (num_sequences == 0) throw std::invalid_argument("synth: num_sequences must be >= 1");
    if (noise_sigma < 0 || leading_absence < 0 || leading_absence >= 1) {
      throw std::invalid_argument("synth: noise_sigma >= 0 and 0 <= leading_absence < 1 required");
    }
    if (train_fraction < 0 || val_fraction < 0 || train_fraction + val_fraction > 1) {
      throw std::invalid_argument("synth: invalid split fractions");
    }
  }
};

inline void to_json(json& j, const SynthConfig& c) {
  j = json{{"num_sequences", c.num_sequences}, {"frames_per_sequence", c.frames_per_sequence},
           {"height", c.height},               {"width", c.width},
           {"seed", c.seed},                   {"noise_sigma", c.noise_sigma},
           {"leading_absence", c.leading_absence}, {"velocity", c.velocity},
           {"train_fraction", c.train_fraction}, {"val_fraction", c.val_fraction}};
}

/// Ellipse of one frame; `present` is false for leading no-bolus frames.
struct BolusState {
  bool present = false;
  double cx = 0, cy = 0, a = 0, b = 0, theta = 0;

  /// Membership of the pixel (x, y), tested at its center.
  bool contains(std::size_t x, std::size_t y) const {
    if (!present) return false;
    const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (c * dx + s * dy) / a, v = (-s * dx + c * dy) / b;
    return u * u + v * v <= 1.0;
  }
};

inline void to_json(json& j, const BolusState& s) {
  j = s.present ? json{{"present", true}, {"cx", s.cx}, {"cy", s.cy}, {"a", s.a}, {"b", s.b}, {"theta", s.theta}}
                : json{{"present", false}};
}

inline void from_json(const json& j, BolusState& s) {
  s.present = j.at("present").get<bool>();
  if (s.present) {
    s.cx = j.at("cx");
    s.cy = j.at("cy");
    s.a = j.at("a");
    s.b = j.at("b");
    s.theta = j.at("theta");
  }
}

/// Static pharynx corridor: |x - center(y)| <= half_width.
struct Corridor {
  double base = 0, amplitude = 0, frequency = 0, phase = 0, half_width = 0;

  double center(double y) const { return base + amplitude * std::sin(frequency * y + phase); }
  bool contains(std::size_t x, std::size_t y) const {
    return std::abs(static_cast<double>(x) + 0.5 - center(static_cast<double>(y) + 0.5)) <= half_width;
  }
};

struct SequenceInfo {
  std::string name;
  std::size_t frames = 0;
  std::string frame_pattern = "frame_%05d.pgm";
  std::string bolus_pattern = "bolus_%05d.pgm";
  std::string pharynx_pattern = "pharynx_%05d.pgm";
  std::string split = "train";
  std::vector<BolusState> bolus;  // per frame, as generated (empty for external data)
};

struct DatasetManifest {
  fs::path root;
  std::size_t height = 0, width = 0;
  std::vector<SequenceInfo> sequences;
  json generator;  // generator settings, when synthetic
};

/// Expands the single %05d placeholder of a file-name pattern.
inline std::string format_pattern(const std::string& pattern, std::size_t index) {
  const auto pos = pattern.find("%05d");
  if (pos == std::string::npos || pattern.find('%', pos + 1) != std::string::npos ||
      pattern.find('%') != pos) {
    throw std::invalid_argument("file pattern must contain exactly one %05d: " + pattern);
  }
  char num[32];
  std::snprintf(num, sizeof num, "%05zu", index);
  return pattern.substr(0, pos) + num + pattern.substr(pos + 4);
}

inline void write_manifest(const DatasetManifest& m) {
  json seqs = json::array();
  for (const auto& s : m.sequences) {
    seqs.push_back({{"name", s.name},
                    {"frames", s.frames},
                    {"frame_pattern", s.frame_pattern},
                    {"bolus_pattern", s.bolus_pattern},
                    {"pharynx_pattern", s.pharynx_pattern},
                    {"split", s.split},
                    {"bolus", s.bolus}});
  }
  json j{{"format", "vswu-dataset"}, {"version", 1}, {"root", "."}, {"height", m.height},
         {"width", m.width},         {"sequences", seqs}};
  if (!m.generator.is_null()) j["generator"] = m.generator;
  std::ofstream out(m.root / "manifest.json");
  if (!out) throw IoError("cannot write " + (m.root / "manifest.json").string());
  out << j.dump(2) << "\n";
}

/// Reads root/manifest.json and checks that every referenced file exists.
inline DatasetManifest load_manifest(const fs::path& root) {
  const auto path = root / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError("missing manifest: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.root = root;
  try {
    m.height = j.at("height");
    m.width = j.at("width");
    if (j.contains("generator")) m.generator = j["generator"];
    for (const auto& s : j.at("sequences")) {
      SequenceInfo info;
      info.name = s.at("name");
      info.frames = s.at("frames");
      info.frame_pattern = s.value("frame_pattern", info.frame_pattern);
      info.bolus_pattern = s.value("bolus_pattern", info.bolus_pattern);
      info.pharynx_pattern = s.value("pharynx_pattern", info.pharynx_pattern);
      info.split = s.value("split", std::string("train"));
      if (s.contains("bolus")) info.bolus = s["bolus"].get<std::vector<BolusState>>();
      m.sequences.push_back(std::move(info));
    }
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  for (const auto& s : m.sequences) {
    if (s.frames == 0) throw IoError("sequence " + s.name + " has no frames");
    if (!s.bolus.empty() && s.bolus.size() != s.frames) throw IoError("sequence " + s.name + ": bolus record count mismatch");
    for (std::size_t f = 0; f < s.frames; ++f) {
      for (const auto* pat : {&s.frame_pattern, &s.bolus_pattern, &s.pharynx_pattern}) {
        const auto p = root / s.name / format_pattern(*pat, f);
        if (!fs::exists(p)) throw IoError("missing file referenced by manifest: " + p.string());
      }
    }
  }
  return m;
}

/// Writes a synthetic dataset: a bright ellipse moves along a smooth path
/// through a static bright corridor, with absent-bolus leading frames and
/// additive Gaussian noise.
inline DatasetManifest synth_generate(const SynthConfig& cfg, const fs::path& root) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root)) throw IoError("cannot create dataset root " + root.string());
  const std::size_t h = cfg.height, w = cfg.width;
  const double hs = static_cast<double>(h) / 64.0, ws = static_cast<double>(w) / 64.0;
  const double hd = static_cast<double>(h), wd = static_cast<double>(w);

  DatasetManifest m;
  m.root = root;
  m.height = h;
  m.width = w;
  m.generator = cfg;

  // Split assignment on a seeded permutation of sequence ids.
  const std::size_t n = cfg.num_sequences;
  const auto n_train = static_cast<std::size_t>(std::lround(cfg.train_fraction * static_cast<double>(n)));
  const auto n_val = std::min(n - std::min(n, n_train),
                              static_cast<std::size_t>(std::lround(cfg.val_fraction * static_cast<double>(n))));
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng split_rng(derive_seed(cfg.seed, {0x5e11}));
  split_rng.shuffle(perm.begin(), perm.end());
  std::vector<std::string> split(n, "test");
  for (std::size_t i = 0; i < n; ++i) {
    split[perm[i]] = i < n_train ? "train" : i < n_train + n_val ? "val" : "test";
  }

  const auto absent = static_cast<std::size_t>(std::floor(cfg.leading_absence * static_cast<double>(cfg.frames_per_sequence) + 1e-9));
  for (std::size_t s = 0; s < n; ++s) {
    Rng rng(derive_seed(cfg.seed, {1, s}));
    Corridor cor;
    cor.base = wd * rng.uniform(0.42, 0.58);
    cor.amplitude = wd * rng.uniform(0.04, 0.10);
    cor.frequency = 2.0 * std::numbers::pi / hd * rng.uniform(0.5, 1.2);
    cor.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    cor.half_width = wd * rng.uniform(0.10, 0.15);
    const double bg_slope = rng.uniform(0.0, 0.10);

    const double y0 = hd * rng.uniform(0.05, 0.2);
    // capped so the bolus stays inside the image for the whole sequence
    const double travel = static_cast<double>(cfg.frames_per_sequence - absent);
    const double speed = std::min(cfg.velocity * hs * rng.uniform(0.8, 1.2), (0.85 * hd - y0) / travel);
    const double wobble_amp = ws * rng.uniform(0.5, 2.0), wobble_freq = rng.uniform(0.2, 0.5),
                 wobble_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double a0 = hs * rng.uniform(6.0, 9.0), b0 = ws * rng.uniform(4.0, 6.0);
    const double theta0 = rng.uniform(-0.3, 0.3), spin = rng.uniform(-0.03, 0.03);

    SequenceInfo info;
    char name[32];
    std::snprintf(name, sizeof name, "seq_%03zu", s);
    info.name = name;
    info.frames = cfg.frames_per_sequence;
    info.split = split[s];
    const auto dir = root / info.name;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string());

    Rng noise(derive_seed(cfg.seed, {2, s}));
    for (std::size_t f = 0; f < cfg.frames_per_sequence; ++f) {
      BolusState b;
      if (f >= absent) {
        const double k = static_cast<double>(f - absent);
        b.present = true;
        b.cy = y0 + speed * k;
        b.cx = cor.center(b.cy) + wobble_amp * std::sin(wobble_freq * k + wobble_phase);
        // the bolus elongates slightly while it travels
        b.a = a0 * (1.0 + 0.02 * k);
        b.b = b0;
        b.theta = theta0 + spin * k + std::numbers::pi / 2;
      }
      info.bolus.push_back(b);
      GrayImage img{h, w, std::vector<std::uint8_t>(h * w)}, bm{h, w, std::vector<std::uint8_t>(h * w)},
          pm{h, w, std::vector<std::uint8_t>(h * w)};
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const bool in_p = cor.contains(x, y), in_b = b.contains(x, y);
          double v = 0.15 + bg_slope * (static_cast<double>(y) + 0.5) / hd;
          if (in_p) v = 0.45;
          if (in_b) v = 0.85;
          if (cfg.noise_sigma > 0) v += noise.normal() * cfg.noise_sigma;
          img.pixels[y * w + x] = quantize_unit(v);
          bm.pixels[y * w + x] = in_b ? 255 : 0;
          pm.pixels[y * w + x] = in_p ? 255 : 0;
        }
      }
      write_pgm(dir / format_pattern(info.frame_pattern, f), img);
      write_pgm(dir / format_pattern(info.bolus_pattern, f), bm);
      write_pgm(dir / format_pattern(info.pharynx_pattern, f), pm);
    }
    m.sequences.push_back(std::move(info));
  }
  write_manifest(m);
  return m;
}

// ---------------------------------------------------------------------------
// Loading and windowing

/// Frames as [0,1] floats and masks as {0,1} floats, one vector per frame.
struct SequenceData {
  std::size_t height = 0, width = 0;
  std::vector<std::vector<float>> frames, bolus, pharynx;
  std::string split;
  std::size_t id = 0;
};

inline std::vector<float> image_to_unit(const GrayImage& img) {
  std::vector<float> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return v;
}

inline std::vector<float> mask_to_binary(const GrayImage& img, const std::string& what) {
  std::vector<float> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (img.pixels[i] != 0 && img.pixels[i] != 255) throw IoError(what + ": mask values must be 0 or 255");
    v[i] = img.pixels[i] ? 1.0f : 0.0f;
  }
  return v;
}

inline SequenceData load_sequence(const DatasetManifest& m, std::size_t index) {
  const auto& s = m.sequences.at(index);
  SequenceData d;
  d.height = m.height;
  d.width = m.width;
  d.split = s.split;
  d.id = index;
  const auto dir = m.root / s.name;
  for (std::size_t f = 0; f < s.frames; ++f) {
    auto img = read_pgm(dir / format_pattern(s.frame_pattern, f));
    auto bm = read_pgm(dir / format_pattern(s.bolus_pattern, f));
    auto pm = read_pgm(dir / format_pattern(s.pharynx_pattern, f));
    for (const auto* g : {&img, &bm, &pm}) {
      if (g->height != m.height || g->width != m.width) {
        throw IoError(s.name + ": image size differs from manifest " + std::to_string(m.height) + "x" +
                      std::to_string(m.width));
      }
    }
    d.frames.push_back(image_to_unit(img));
    d.bolus.push_back(mask_to_binary(bm, s.name));
    d.pharynx.push_back(mask_to_binary(pm, s.name));
  }
  return d;
}

struct Snippet {
  Tensor<float> frames;  // [t,1,H,W]
  Tensor<float> label;   // [2,H,W]: bolus, pharynx of the center frame
  std::size_t sequence = 0;
  std::size_t center_frame = 0;

  std::size_t t() const { return frames.dim(0); }
  std::size_t height() const { return frames.dim(2); }
  std::size_t width() const { return frames.dim(3); }
};

inline bool supported_snippet_length(std::size_t t) { return t >= 3 && t <= 13 && t % 2 == 1; }

inline void check_snippet_length(std::size_t t) {
  if (t == 0 || t % 2 == 0) throw std::invalid_argument("snippet length t must be odd, got " + std::to_string(t));
  if (!supported_snippet_length(t)) {
    std::cerr << "warning: snippet length t=" << t << " is outside the supported grid {3,5,...,13}\n";
  }
}

/// One center-aligned snippet per frame; frames beyond the sequence ends
/// replicate the first/last frame.
inline std::vector<Snippet> window_sequence(const SequenceData& seq, std::size_t t) {
  check_snippet_length(t);
  const std::size_t n = seq.frames.size();
  if (n == 0) throw std::invalid_argument("window_snippets: empty sequence");
  const std::size_t hw = seq.height * seq.width;
  const auto half = static_cast<std::ptrdiff_t>(t / 2);
  std::vector<Snippet> out;
  out.reserve(n);
  for (std::size_t c = 0; c < n; ++c) {
    std::vector<float> frames(t * hw), label(2 * hw);
    for (std::size_t k = 0; k < t; ++k) {
      auto src = static_cast<std::ptrdiff_t>(c) + static_cast<std::ptrdiff_t>(k) - half;
      src = std::clamp<std::ptrdiff_t>(src, 0, static_cast<std::ptrdiff_t>(n) - 1);
      std::copy(seq.frames[src].begin(), seq.frames[src].end(), frames.begin() + k * hw);
    }
    std::copy(seq.bolus[c].begin(), seq.bolus[c].end(), label.begin());
    std::copy(seq.pharynx[c].begin(), seq.pharynx[c].end(), label.begin() + hw);
    out.push_back({Tensor<float>({t, 1, seq.height, seq.width}, std::move(frames)),
                   Tensor<float>({2, seq.height, seq.width}, std::move(label)), seq.id, c});
  }
  return out;
}

/// Snippets of every sequence in manifest order (optionally one split only).
inline std::vector<Snippet> window_snippets(const DatasetManifest& m, std::size_t t,
                                            const std::optional<std::string>& split = std::nullopt) {
  check_snippet_length(t);
  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < m.sequences.size(); ++i) {
    if (!split || m.sequences[i].split == *split) chosen.push_back(i);
  }
  std::vector<std::vector<Snippet>> per_seq(chosen.size());
  parallel_for(chosen.size(), [&](std::size_t k) { per_seq[k] = window_sequence(load_sequence(m, chosen[k]), t); });
  std::vector<Snippet> out;
  for (auto& v : per_seq) {
    for (auto& s : v) out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentParams {
  bool flip = false;
  double angle_deg = 0.0;
};

inline constexpr double kMaxRotationDeg = 15.0;

inline AugmentParams draw_augment(Rng& rng) {
  AugmentParams p;
  p.flip = rng.bernoulli(0.5);
  p.angle_deg = rng.uniform(-kMaxRotationDeg, kMaxRotationDeg);
  return p;
}

namespace detail {

// Source coordinate of output pixel (x, y): inverse rotation about the
// image center, then the horizontal flip.
inline std::pair<double, double> augment_source(const AugmentParams& p, std::size_t x, std::size_t y, std::size_t h,
                                                std::size_t w) {
  const double cx = (static_cast<double>(w) - 1) / 2, cy = (static_cast<double>(h) - 1) / 2;
  double u = static_cast<double>(x), v = static_cast<double>(y);
  if (p.angle_deg != 0.0) {
    const double a = p.angle_deg * std::numbers::pi / 180.0, c = std::cos(a), s = std::sin(a);
    const double dx = u - cx, dy = v - cy;
    u = cx + c * dx + s * dy;
    v = cy - s * dx + c * dy;
  }
  if (p.flip) u = static_cast<double>(w) - 1 - u;
  return {u, v};
}

inline void warp_plane(const float* src, float* dst, std::size_t h, std::size_t w, const AugmentParams& p,
                       bool nearest) {
  auto at = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) {
    yy = std::clamp<std::ptrdiff_t>(yy, 0, static_cast<std::ptrdiff_t>(h) - 1);
    xx = std::clamp<std::ptrdiff_t>(xx, 0, static_cast<std::ptrdiff_t>(w) - 1);
    return src[yy * static_cast<std::ptrdiff_t>(w) + xx];
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto [u, v] = augment_source(p, x, y, h, w);
      float out;
      if (nearest) {
        out = at(static_cast<std::ptrdiff_t>(std::lround(v)), static_cast<std::ptrdiff_t>(std::lround(u)));
      } else {
        const double fu = std::floor(u), fv = std::floor(v);
        const double tu = u - fu, tv = v - fv;
        const auto iu = static_cast<std::ptrdiff_t>(fu), iv = static_cast<std::ptrdiff_t>(fv);
        if (tu == 0.0 && tv == 0.0) {
          out = at(iv, iu);
        } else {
          const double top = (1 - tu) * at(iv, iu) + tu * at(iv, iu + 1);
          const double bot = (1 - tu) * at(iv + 1, iu) + tu * at(iv + 1, iu + 1);
          out = static_cast<float>((1 - tv) * top + tv * bot);
        }
      }
      dst[y * w + x] = out;
    }
  }
}

}  // namespace detail

/// Applies one spatial transform to every frame (bilinear) and to both
/// label channels (nearest neighbor, so labels stay binary).
inline Snippet apply_augment(const Snippet& s, const AugmentParams& p) {
  const std::size_t t = s.t(), h = s.height(), w = s.width(), hw = h * w;
  std::vector<float> frames(t * hw), label(2 * hw);
  for (std::size_t k = 0; k < t; ++k) detail::warp_plane(s.frames.data().data() + k * hw, frames.data() + k * hw, h, w, p, false);
  for (std::size_t c = 0; c < 2; ++c) detail::warp_plane(s.label.data().data() + c * hw, label.data() + c * hw, h, w, p, true);
  return {Tensor<float>(s.frames.shape(), std::move(frames)), Tensor<float>(s.label.shape(), std::move(label)),
          s.sequence, s.center_frame};
}

inline Snippet augment(const Snippet& s, Rng& rng) { return apply_augment(s, draw_augment(rng)); }

/// Adds Gaussian noise to the center frame only (clamped to [0,1]).
inline Snippet corrupt_center(const Snippet& s, double sigma, Rng& rng) {
  const std::size_t hw = s.height() * s.width(), c = (s.t() - 1) / 2;
  auto frames = s.frames.values();
  for (std::size_t i = 0; i < hw; ++i) {
    auto& v = frames[c * hw + i];
    v = static_cast<float>(std::clamp(static_cast<double>(v) + rng.normal() * sigma, 0.0, 1.0));
  }
  return {Tensor<float>(s.frames.shape(), std::move(frames)), s.label, s.sequence, s.center_frame};
}

/// Seeded center-frame corruption of a whole snippet list; snippet i uses
/// the stream derive_seed(seed, {i}).
inline std::vector<Snippet> corrupt_centers(const std::vector<Snippet>& in, double sigma, std::uint64_t seed) {
  std::vector<Snippet> out;
  out.reserve(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    Rng rng(derive_seed(seed, {0xc0, i}));
    out.push_back(corrupt_center(in[i], sigma, rng));
  }
  return out;
}

}  // namespace vswu
