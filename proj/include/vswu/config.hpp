#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vswu/dataset.hpp"
#include "vswu/model.hpp"
#include "vswu/trainer.hpp"

namespace vswu {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EvalOptions {
  std::string checkpoint;          // empty: runs/<name>/checkpoints/best.ckpt
  std::string split = "test";
  double center_noise_sigma = 0.0;
  bool write_masks = true;
};

struct TransferOptions {
  std::string checkpoint;  // source weights
  std::string freeze = "a";
  double lr0 = 1e-4;
  std::size_t epochs = 5;
};

struct SweepOptions {
  std::vector<std::size_t> t_values{3, 5, 7, 9, 11, 13};
};

struct FuseOptions {
  std::vector<std::string> inputs;  // rater mask PGMs
  std::string output;               // fused PGM; empty: runs/<name>/maps/fused.pgm
  std::string prior = "mean-vote";  // mean-vote | global
  std::size_t max_iter = 100;
  double tol = 1e-6;
};

struct GradcamOptions {
  std::string checkpoint;
  std::string split = "test";
  std::size_t channel = 0;
  std::size_t count = 4;  // number of snippets
};

/// Everything one CLI invocation needs. A single seed drives dataset
/// generation, weight initialization and training.
struct RunConfig {
  std::string name = "default";
  std::string runs_dir = "runs";
  std::string data_root = "data";
  std::uint64_t seed = 42;
  ModelConfig model;
  TrainConfig train;
  SynthConfig synth;
  EvalOptions eval;
  TransferOptions transfer;
  SweepOptions sweep;
  FuseOptions fuse;
  GradcamOptions gradcam;

  std::filesystem::path run_dir() const { return std::filesystem::path(runs_dir) / name; }

  /// Copies the shared seed and frame count into the sub-configs.
  void propagate() {
    train.seed = seed;
    synth.seed = seed;
  }
};

namespace detail {

/// One leaf of the configuration tree.
struct ConfigField {
  std::function<json()> get;
  std::function<void(const json&)> set;
  bool is_string = false;
};

template <class V>
ConfigField make_field(V& ref) {
  ConfigField f;
  f.get = [&ref] { return json(ref); };
  f.set = [&ref](const json& j) {
    if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
      if (!j.is_number_unsigned()) throw std::invalid_argument("expected a non-negative integer");
    }
    ref = j.get<V>();
  };
  f.is_string = std::is_same_v<V, std::string>;
  return f;
}

inline ConfigField merge_field(std::optional<bool>& ref) {
  ConfigField f;
  f.get = [&ref] { return ref ? json(*ref) : json("auto"); };
  f.set = [&ref](const json& j) {
    if (j.is_string() && j.get<std::string>() == "auto") {
      ref.reset();
    } else {
      ref = j.get<bool>();
    }
  };
  return f;
}

inline ConfigField freeze_field(std::set<char>& ref) {
  ConfigField f;
  f.get = [&ref] { return json(freeze_set_str(ref)); };
  f.set = [&ref](const json& j) { ref = parse_freeze_set(j.get<std::string>()); };
  f.is_string = true;
  return f;
}

/// Dotted path -> field accessor, in a stable order.
inline std::vector<std::pair<std::string, ConfigField>> config_fields(RunConfig& c) {
  std::vector<std::pair<std::string, ConfigField>> f;
  auto add = [&](const std::string& path, ConfigField field) { f.emplace_back(path, std::move(field)); };
  add("name", make_field(c.name));
  add("runs_dir", make_field(c.runs_dir));
  add("data_root", make_field(c.data_root));
  add("seed", make_field(c.seed));

  auto& m = c.model;
  add("model.height", make_field(m.height));
  add("model.width", make_field(m.width));
  add("model.snippet_t", make_field(m.snippet_t));
  add("model.backbone.stage_channels", make_field(m.backbone.stage_channels));
  add("model.backbone.blocks_per_stage", make_field(m.backbone.blocks_per_stage));
  add("model.tcm.enabled", make_field(m.tcm.enabled));
  add("model.tcm.include_center", make_field(m.tcm.include_center));
  add("model.tcm.tied_neighbors", make_field(m.tcm.tied_neighbors));
  add("model.tcm.reduction", make_field(m.tcm.reduction));
  add("model.swin.embed_dim", make_field(m.swin.embed_dim));
  add("model.swin.depths", make_field(m.swin.depths));
  add("model.swin.heads", make_field(m.swin.heads));
  add("model.swin.window_sizes", make_field(m.swin.window_sizes));
  add("model.swin.mlp_ratio", make_field(m.swin.mlp_ratio));
  add("model.swin.patch_size", make_field(m.swin.patch_size));
  add("model.swin.merge", merge_field(m.swin.merge));
  add("model.decoder.channels", make_field(m.decoder.channels));
  add("model.decoder.tsc_enabled", make_field(m.decoder.tsc_enabled));
  add("model.decoder.skips_enabled", make_field(m.decoder.skips_enabled));

  auto& t = c.train;
  add("train.batch_size", make_field(t.batch_size));
  add("train.lr0", make_field(t.lr0));
  add("train.plateau_epochs", make_field(t.plateau.patience));
  add("train.lr_decay", make_field(t.plateau.decay));
  add("train.plateau_threshold", make_field(t.plateau.threshold));
  add("train.max_epochs", make_field(t.max_epochs));
  add("train.freeze", freeze_field(t.freeze_set));
  add("train.augment", make_field(t.augment));
  add("train.center_noise_sigma", make_field(t.center_noise_sigma));
  add("train.loss.bce_weight", make_field(t.loss.bce_weight));
  add("train.loss.dice_weight", make_field(t.loss.dice_weight));
  add("train.loss.dice_smooth", make_field(t.loss.dice_smooth));
  add("train.loss.prob_clamp", make_field(t.loss.prob_clamp));
  add("train.adam.beta1", make_field(t.adam.beta1));
  add("train.adam.beta2", make_field(t.adam.beta2));
  add("train.adam.eps", make_field(t.adam.eps));

  auto& s = c.synth;
  add("synth.num_sequences", make_field(s.num_sequences));
  add("synth.frames_per_sequence", make_field(s.frames_per_sequence));
  add("synth.height", make_field(s.height));
  add("synth.width", make_field(s.width));
  add("synth.noise_sigma", make_field(s.noise_sigma));
  add("synth.leading_absence", make_field(s.leading_absence));
  add("synth.velocity", make_field(s.velocity));
  add("synth.train_fraction", make_field(s.train_fraction));
  add("synth.val_fraction", make_field(s.val_fraction));

  add("eval.checkpoint", make_field(c.eval.checkpoint));
  add("eval.split", make_field(c.eval.split));
  add("eval.center_noise_sigma", make_field(c.eval.center_noise_sigma));
  add("eval.write_masks", make_field(c.eval.write_masks));

  add("transfer.checkpoint", make_field(c.transfer.checkpoint));
  add("transfer.freeze", make_field(c.transfer.freeze));
  add("transfer.lr0", make_field(c.transfer.lr0));
  add("transfer.epochs", make_field(c.transfer.epochs));

  add("sweep.t_values", make_field(c.sweep.t_values));

  add("fuse.inputs", make_field(c.fuse.inputs));
  add("fuse.output", make_field(c.fuse.output));
  add("fuse.prior", make_field(c.fuse.prior));
  add("fuse.max_iter", make_field(c.fuse.max_iter));
  add("fuse.tol", make_field(c.fuse.tol));

  add("gradcam.checkpoint", make_field(c.gradcam.checkpoint));
  add("gradcam.split", make_field(c.gradcam.split));
  add("gradcam.channel", make_field(c.gradcam.channel));
  add("gradcam.count", make_field(c.gradcam.count));
  return f;
}

inline void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, json>>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
  } else {
    out.emplace_back(prefix, j);
  }
}

inline void set_field(ConfigField& f, const std::string& path, const json& value) {
  try {
    f.set(value);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: bad value for " + path + ": " + value.dump());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config: bad value for " + path + ": " + e.what());
  }
}

}  // namespace detail

/// Nested JSON of every setting.
inline json config_to_json(const RunConfig& c) {
  RunConfig copy = c;
  json j = json::object();
  for (auto& [path, f] : detail::config_fields(copy)) {
    json* node = &j;
    std::size_t start = 0;
    for (std::size_t dot; (dot = path.find('.', start)) != std::string::npos; start = dot + 1) {
      node = &(*node)[path.substr(start, dot - start)];
    }
    (*node)[path.substr(start)] = f.get();
  }
  return j;
}

/// Applies a (possibly partial) nested JSON object on top of `c`. Unknown
/// keys are rejected.
inline void apply_json(RunConfig& c, const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  auto fields = detail::config_fields(c);
  std::map<std::string, detail::ConfigField*> index;
  for (auto& [path, f] : fields) index[path] = &f;
  std::vector<std::pair<std::string, json>> leaves;
  detail::flatten(j, "", leaves);
  for (const auto& [path, value] : leaves) {
    if (path.empty()) continue;
    auto it = index.find(path);
    if (it == index.end()) throw ConfigError("config: unknown key " + path);
    detail::set_field(*it->second, path, value);
  }
}

/// `path=value` override. The value is read as JSON when it parses as such
/// and as a plain string otherwise.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("config: override must be key=value, got " + assignment);
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  auto fields = detail::config_fields(c);
  for (auto& [p, f] : fields) {
    if (p != path) continue;
    json value;
    if (f.is_string) {
      value = text;
    } else {
      value = json::parse(text, nullptr, false);
      if (value.is_discarded()) value = text;
    }
    detail::set_field(f, path, value);
    return;
  }
  throw ConfigError("config: unknown key " + path);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config: " + path.string() + " is not valid JSON");
  RunConfig c;
  apply_json(c, j);
  return c;
}

inline void write_resolved(const RunConfig& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << config_to_json(c).dump(2) << "\n";
}

}  // namespace vswu
