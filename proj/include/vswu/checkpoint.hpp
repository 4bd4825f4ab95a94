#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vswu/optim.hpp"
#include "vswu/params.hpp"
#include "vswu/pgm.hpp"

namespace vswu {

class FormatError : public IoError {
 public:
  using IoError::IoError;
};

inline constexpr char kCheckpointMagic[4] = {'V', 'S', 'W', 'U'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Blob {
  Shape shape;
  std::vector<float> data;
};

/// Training bookkeeping stored next to the parameters.
struct TrainState {
  std::uint64_t epoch = 0;       // completed epochs
  std::uint64_t adam_steps = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  double lr = 0;
  double sched_best = std::numeric_limits<double>::infinity();
  std::uint64_t sched_stagnant = 0;
  std::uint64_t rng_state = 0;
};

/// Ordered, uniquely named blobs. Names starting with "opt." or "rng." are
/// optimizer/RNG state; everything else is a model parameter.
struct Checkpoint {
  std::vector<std::pair<std::string, Blob>> blobs;

  const Blob* find(const std::string& name) const {
    for (const auto& [n, b] : blobs) {
      if (n == name) return &b;
    }
    return nullptr;
  }
  void put(const std::string& name, Blob b) {
    for (auto& [n, old] : blobs) {
      if (n == name) {
        old = std::move(b);
        return;
      }
    }
    blobs.emplace_back(name, std::move(b));
  }
  std::size_t parameter_blob_count() const {
    std::size_t n = 0;
    for (const auto& [name, b] : blobs) n += !is_state_name(name);
    return n;
  }
  static bool is_state_name(const std::string& name) { return name.rfind("opt.", 0) == 0 || name.rfind("rng.", 0) == 0; }
};

namespace detail {

// Scalars travel as raw bit patterns in the float32 payload: each 64-bit
// value becomes two 32-bit words (low, high), copied without conversion.
inline void push_bits64(std::vector<float>& out, std::uint64_t bits) {
  const std::uint32_t lo = static_cast<std::uint32_t>(bits), hi = static_cast<std::uint32_t>(bits >> 32);
  out.push_back(std::bit_cast<float>(lo));
  out.push_back(std::bit_cast<float>(hi));
}

inline std::uint64_t pop_bits64(const std::vector<float>& in, std::size_t i) {
  const auto lo = std::bit_cast<std::uint32_t>(in.at(2 * i));
  const auto hi = std::bit_cast<std::uint32_t>(in.at(2 * i + 1));
  return static_cast<std::uint64_t>(lo) | (static_cast<std::uint64_t>(hi) << 32);
}

template <class U>
void write_le(std::ostream& out, U v) {
  static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class U>
U read_le(std::istream& in, const std::string& what) {
  U v;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (in.gcount() != static_cast<std::streamsize>(sizeof v)) throw FormatError(what + ": truncated checkpoint");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, 4);
    detail::write_le<std::uint32_t>(out, kCheckpointVersion);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.blobs.size()));
    for (const auto& [name, b] : ck.blobs) {
      if (name.size() > 0xffff) throw std::invalid_argument("checkpoint blob name too long");
      if (shape_numel(b.shape) != b.data.size()) throw std::invalid_argument("checkpoint blob " + name + ": shape/data mismatch");
      detail::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(b.shape.size()));
      for (auto d : b.shape) detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
      out.write(reinterpret_cast<const char*>(b.data.data()), static_cast<std::streamsize>(b.data.size() * 4));
    }
    if (!out) throw IoError("write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  const std::string what = path.string();
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError(what + ": bad checkpoint magic");
  const auto version = detail::read_le<std::uint32_t>(in, what);
  if (version != kCheckpointVersion) {
    throw FormatError(what + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = detail::read_le<std::uint32_t>(in, what);
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::read_le<std::uint16_t>(in, what);
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (in.gcount() != len) throw FormatError(what + ": truncated checkpoint");
    const auto rank = detail::read_le<std::uint8_t>(in, what);
    Blob b;
    for (std::uint8_t r = 0; r < rank; ++r) b.shape.push_back(detail::read_le<std::uint32_t>(in, what));
    b.data.resize(shape_numel(b.shape));
    in.read(reinterpret_cast<char*>(b.data.data()), static_cast<std::streamsize>(b.data.size() * 4));
    if (in.gcount() != static_cast<std::streamsize>(b.data.size() * 4)) throw FormatError(what + ": truncated checkpoint");
    if (ck.find(name)) throw FormatError(what + ": duplicate blob " + name);
    ck.blobs.emplace_back(std::move(name), std::move(b));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(what + ": trailing bytes after last blob");
  return ck;
}

// ---------------------------------------------------------------------------
// Model and training-state capture

template <class T>
void capture_parameters(Checkpoint& ck, const ParameterStore<T>& store) {
  for (const auto& [name, p] : store.entries()) {
    Blob b{p.shape(), {}};
    b.data.reserve(p.numel());
    for (auto v : p.data()) b.data.push_back(static_cast<float>(v));
    ck.put(name, std::move(b));
  }
}

/// Adam moments are stored rounded to float32.
template <class T>
void capture_training(Checkpoint& ck, const Adam<T>& adam, const TrainState& st) {
  for (const auto& [name, mom] : adam.state()) {
    Blob m{{mom.m.size()}, {}}, v{{mom.v.size()}, {}};
    for (double x : mom.m) m.data.push_back(static_cast<float>(x));
    for (double x : mom.v) v.data.push_back(static_cast<float>(x));
    ck.put("opt.m." + name, std::move(m));
    ck.put("opt.v." + name, std::move(v));
  }
  Blob s{{12}, {}};
  detail::push_bits64(s.data, st.epoch);
  detail::push_bits64(s.data, st.adam_steps);
  detail::push_bits64(s.data, std::bit_cast<std::uint64_t>(st.best_val_loss));
  detail::push_bits64(s.data, std::bit_cast<std::uint64_t>(st.lr));
  detail::push_bits64(s.data, std::bit_cast<std::uint64_t>(st.sched_best));
  detail::push_bits64(s.data, st.sched_stagnant);
  ck.put("opt.state", std::move(s));
  Blob r{{2}, {}};
  detail::push_bits64(r.data, st.rng_state);
  ck.put("rng.state", std::move(r));
}

inline std::optional<TrainState> read_train_state(const Checkpoint& ck) {
  const Blob* s = ck.find("opt.state");
  const Blob* r = ck.find("rng.state");
  if (!s || !r) return std::nullopt;
  if (s->data.size() != 12 || r->data.size() != 2) throw FormatError("checkpoint: malformed training state blobs");
  TrainState st;
  st.epoch = detail::pop_bits64(s->data, 0);
  st.adam_steps = detail::pop_bits64(s->data, 1);
  st.best_val_loss = std::bit_cast<double>(detail::pop_bits64(s->data, 2));
  st.lr = std::bit_cast<double>(detail::pop_bits64(s->data, 3));
  st.sched_best = std::bit_cast<double>(detail::pop_bits64(s->data, 4));
  st.sched_stagnant = detail::pop_bits64(s->data, 5);
  st.rng_state = detail::pop_bits64(r->data, 0);
  return st;
}

template <class T>
void restore_optimizer(Adam<T>& adam, const Checkpoint& ck) {
  adam.state().clear();
  for (const auto& [name, b] : ck.blobs) {
    if (name.rfind("opt.m.", 0) != 0) continue;
    const auto pname = name.substr(6);
    const Blob* v = ck.find("opt.v." + pname);
    if (!v || v->data.size() != b.data.size()) throw FormatError("checkpoint: incomplete moments for " + pname);
    AdamMoments mom;
    mom.m.assign(b.data.begin(), b.data.end());
    mom.v.assign(v->data.begin(), v->data.end());
    adam.state()[pname] = std::move(mom);
  }
  if (auto st = read_train_state(ck)) adam.set_steps(st->adam_steps);
}

struct LoadOptions {
  /// Only parameters whose names start with one of these are loaded
  /// (empty: all).
  std::vector<std::string> prefixes;
  /// Each of these prefixes must match at least one blob in the file.
  std::vector<std::string> required_prefixes;
  /// Reject files that lack a blob for any selected model parameter.
  bool strict = false;
};

/// Copies matching parameter blobs into `store`. Returns the loaded names.
template <class T>
std::vector<std::string> load_parameters(ParameterStore<T>& store, const Checkpoint& ck, const LoadOptions& opt = {}) {
  auto selected = [&](const std::string& name) {
    if (opt.prefixes.empty()) return true;
    for (const auto& p : opt.prefixes) {
      if (name.rfind(p, 0) == 0) return true;
    }
    return false;
  };
  for (const auto& req : opt.required_prefixes) {
    bool found = false;
    for (const auto& [name, b] : ck.blobs) found = found || (!Checkpoint::is_state_name(name) && name.rfind(req, 0) == 0);
    if (!found) throw FormatError("checkpoint has no parameters for required component prefix '" + req + "'");
  }
  // Validate everything before touching the store.
  for (const auto& [name, p] : store.entries()) {
    if (!selected(name)) continue;
    const Blob* b = ck.find(name);
    if (!b) {
      if (opt.strict) throw FormatError("checkpoint is missing parameter " + name);
      continue;
    }
    if (b->shape != p.shape()) {
      throw FormatError("checkpoint shape conflict for " + name + ": file " + shape_str(b->shape) + ", model " +
                        shape_str(p.shape()));
    }
  }
  std::vector<std::string> loaded;
  for (const auto& [name, p] : store.entries()) {
    if (!selected(name)) continue;
    const Blob* b = ck.find(name);
    if (!b) continue;
    Tensor<T> handle = p;
    auto dst = handle.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(b->data[i]);
    loaded.push_back(name);
  }
  return loaded;
}

}  // namespace vswu
