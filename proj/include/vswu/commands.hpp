#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "vswu/config.hpp"
#include "vswu/cost.hpp"
#include "vswu/gradcam.hpp"
#include "vswu/gradcheck_suite.hpp"
#include "vswu/staple.hpp"

namespace vswu {

/// Raised when a command ran to completion but its check did not hold.
class CheckFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Output helpers

/// Progress and summary lines on stdout; off for in-process callers that
/// only want the files.
inline bool& progress_output() {
  static bool on = true;
  return on;
}

template <class... A>
void say(const char* format, A... args) {
  if (!progress_output()) return;
  std::printf(format, args...);
  std::fflush(stdout);
}

/// FNV-1a 64 of a file's bytes, as 16 hex digits.
inline std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 14];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<std::uint8_t>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

inline void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

inline GrayImage mask_image(const Mask& m) {
  GrayImage img{m.height, m.width, std::vector<std::uint8_t>(m.bits.size())};
  for (std::size_t i = 0; i < m.bits.size(); ++i) img.pixels[i] = m.bits[i] ? 255 : 0;
  return img;
}

inline Mask read_mask_pgm(const fs::path& path) {
  const auto img = read_pgm(path);
  Mask m(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    if (img.pixels[i] != 0 && img.pixels[i] != 255) throw IoError(path.string() + ": mask values must be 0 or 255");
    m.bits[i] = img.pixels[i] ? 1 : 0;
  }
  return m;
}

/// Nearest-neighbor enlargement of a [h,w] map in [0,1] to an 8-bit image.
inline GrayImage heatmap_image(const Tensor<float>& map, std::size_t height, std::size_t width) {
  const std::size_t h = map.dim(0), w = map.dim(1);
  GrayImage img{height, width, std::vector<std::uint8_t>(height * width)};
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) img.pixels[y * width + x] = quantize_unit(map[(y * h / height) * w + x * w / width]);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Shared steps

/// Creates the run directory and records the resolved configuration.
inline void begin_run(RunConfig& c) {
  c.propagate();
  fs::create_directories(c.run_dir());
  write_resolved(c, c.run_dir() / "resolved.json");
}

/// Loads the dataset and adopts its frame size for the model.
inline DatasetManifest open_dataset(RunConfig& c) {
  auto m = load_manifest(c.data_root);
  c.model.height = m.height;
  c.model.width = m.width;
  return m;
}

inline std::uint64_t heldout_noise_seed(std::uint64_t seed, const std::string& split) {
  const std::uint64_t tag = split == "train" ? 0 : split == "val" ? 1 : split == "test" ? 2 : 3;
  return derive_seed(seed, {0xe0, tag});
}

/// Snippets of one split, with the held-out center-frame corruption of
/// eval.center_noise_sigma applied to val and test.
inline std::vector<Snippet> split_snippets(const RunConfig& c, const DatasetManifest& m, const std::string& split) {
  auto s = window_snippets(m, c.model.snippet_t, split);
  if (s.empty()) throw std::invalid_argument("dataset has no snippets in split '" + split + "'");
  if (split != "train" && c.eval.center_noise_sigma > 0) {
    s = corrupt_centers(s, c.eval.center_noise_sigma, heldout_noise_seed(c.seed, split));
  }
  return s;
}

struct TrainOutcome {
  FitResult fit;
  fs::path best_checkpoint;
  json report;
};

/// Trains a fresh (or preloaded) model and writes log.csv and checkpoints/
/// under `dir`.
inline TrainOutcome train_into(const RunConfig& c, const DatasetManifest& m, const fs::path& dir,
                               VideoSwinUNet<float>* preloaded = nullptr, const TrainConfig* train_override = nullptr) {
  const TrainConfig& tc = train_override ? *train_override : c.train;
  const auto train = split_snippets(c, m, "train");
  const auto val = split_snippets(c, m, "val");
  std::optional<VideoSwinUNet<float>> fresh;
  if (!preloaded) fresh.emplace(c.model, c.seed);
  VideoSwinUNet<float>& model = preloaded ? *preloaded : *fresh;
  FitHooks hooks;
  hooks.checkpoint_dir = dir / "checkpoints";
  fs::create_directories(*hooks.checkpoint_dir);
  hooks.on_epoch = [](const EpochRecord& r) {
    char train[32] = "-";
    if (r.epoch > 0) std::snprintf(train, sizeof train, "%.6f", r.train_loss);
    say("epoch %zu train_loss=%s val_loss=%.6f val_dsc=%.4f lr=%g\n", r.epoch, train, r.val_loss, r.val_dsc, r.lr);
  };
  TrainOutcome out;
  out.fit = fit(model, train, val, tc, hooks);
  write_training_log(dir / "log.csv", out.fit.log, tc);
  out.best_checkpoint = dir / "checkpoints" / "best.ckpt";
  const auto& best = out.fit.log.at(out.fit.best_epoch);
  out.report = {{"train_snippets", train.size()},
                {"val_snippets", val.size()},
                {"epochs", tc.max_epochs},
                {"best_epoch", out.fit.best_epoch},
                {"best_val_loss", best.val_loss},
                {"best_val_dsc", best.val_dsc},
                {"final_val_dsc", out.fit.log.back().val_dsc},
                {"params", model.params().total_count()},
                {"checkpoint_hash",
                 {{"best", file_hash(out.best_checkpoint)}, {"last", file_hash(dir / "checkpoints" / "last.ckpt")}}}};
  return out;
}

inline VideoSwinUNet<float> load_model(const RunConfig& c, const fs::path& checkpoint) {
  VideoSwinUNet<float> model(c.model, c.seed);
  LoadOptions opt;
  opt.strict = true;
  load_parameters(model.params(), load_checkpoint(checkpoint), opt);
  return model;
}

inline fs::path checkpoint_or_default(const RunConfig& c, const std::string& path) {
  return path.empty() ? c.run_dir() / "checkpoints" / "best.ckpt" : fs::path(path);
}

/// Metrics of `model` on one split; predicted masks go to `mask_dir` when
/// given.
inline MetricsReport evaluate_split(const RunConfig& c, const DatasetManifest& m, const VideoSwinUNet<float>& model,
                                    const std::string& split, const std::optional<fs::path>& mask_dir = std::nullopt) {
  const auto snippets = split_snippets(c, m, split);
  MetricsAccumulator acc(2);
  for (const auto& s : snippets) {
    const auto probs = predict_probs(model, s);
    acc.add_prediction(probs, s.label);
    if (mask_dir) {
      const auto& info = m.sequences.at(s.sequence);
      const auto dir = *mask_dir / info.name;
      fs::create_directories(dir);
      write_pgm(dir / format_pattern(info.bolus_pattern, s.center_frame), mask_image(threshold_channel(probs, 0)));
      write_pgm(dir / format_pattern(info.pharynx_pattern, s.center_frame), mask_image(threshold_channel(probs, 1)));
    }
  }
  MetricsReport r;
  r.channels = acc.result();
  r.params = model.params().total_count();
  r.flops = model_cost(model.config()).flops();
  return r;
}

// ---------------------------------------------------------------------------
// Commands. Each takes the merged configuration, writes resolved.json
// first and everything else under runs/<name>/.

inline void cmd_synth(RunConfig& c) {
  begin_run(c);
  c.synth.validate();
  if (fs::exists(fs::path(c.data_root) / "manifest.json")) {
    throw IoError("refusing to overwrite existing dataset at " + c.data_root);
  }
  const auto m = synth_generate(c.synth, c.data_root);
  json splits = json::object();
  for (const auto& s : m.sequences) splits[s.split] = splits.value(s.split, 0) + 1;
  write_json(c.run_dir() / "reports" / "synth.json",
             {{"data_root", c.data_root}, {"sequences", m.sequences.size()}, {"splits", splits}, {"generator", m.generator}});
  say("synth: %zu sequences x %zu frames (%zux%zu) written to %s\n", m.sequences.size(),
              c.synth.frames_per_sequence, m.height, m.width, c.data_root.c_str());
}

inline void cmd_train(RunConfig& c) {
  const auto m = open_dataset(c);
  begin_run(c);
  c.model.validate();
  const auto out = train_into(c, m, c.run_dir());
  write_json(c.run_dir() / "reports" / "train.json", out.report);
  say("train: best epoch %zu, val DSC %.4f, checkpoint %s\n", out.fit.best_epoch,
              out.report["best_val_dsc"].get<double>(), out.best_checkpoint.string().c_str());
}

inline void cmd_eval(RunConfig& c) {
  const auto m = open_dataset(c);
  begin_run(c);
  const auto ckpt = checkpoint_or_default(c, c.eval.checkpoint);
  const auto model = load_model(c, ckpt);
  const auto report = evaluate_split(c, m, model, c.eval.split,
                                     c.eval.write_masks ? std::optional(c.run_dir() / "maps" / c.eval.split) : std::nullopt);
  auto j = report.to_json();
  j["split"] = c.eval.split;
  j["checkpoint_hash"] = file_hash(ckpt);
  j["center_noise_sigma"] = c.eval.center_noise_sigma;
  write_json(c.run_dir() / "reports" / ("eval_" + c.eval.split + ".json"), j);
  write_text(c.run_dir() / "reports" / ("eval_" + c.eval.split + ".csv"),
             MetricsReport::csv_header() + "\n" + report.csv_row() + "\n");
  say("eval[%s]: bolus DSC %.4f, pharynx DSC %.4f, mean %.4f\n", c.eval.split.c_str(), report.channels[0].dsc,
              report.channels[1].dsc, report.mean_dsc());
}

inline void cmd_sweep_t(RunConfig& c) {
  const auto m = open_dataset(c);
  begin_run(c);
  if (c.sweep.t_values.empty()) throw ConfigError("config: sweep.t_values is empty");
  std::string csv = "t," + MetricsReport::csv_header() + "\n";
  json rows = json::array();
  for (std::size_t t : c.sweep.t_values) {
    RunConfig sub = c;
    sub.model.snippet_t = t;
    sub.model.validate();
    char tag[16];
    std::snprintf(tag, sizeof tag, "t%02zu", t);
    say("sweep-t: t=%zu\n", t);
    const auto out = train_into(sub, m, c.run_dir() / "sweep" / tag);
    const auto report = evaluate_split(sub, m, load_model(sub, out.best_checkpoint), "test");
    csv += std::to_string(t) + "," + report.csv_row() + "\n";
    auto j = report.to_json();
    j["t"] = t;
    j["best_epoch"] = out.fit.best_epoch;
    rows.push_back(j);
  }
  write_text(c.run_dir() / "reports" / "sweep_t.csv", csv);
  write_json(c.run_dir() / "reports" / "sweep_t.json", {{"split", "test"}, {"rows", rows}});
  say("%s", csv.c_str());
}

inline void cmd_ablate(RunConfig& c) {
  const auto m = open_dataset(c);
  begin_run(c);
  std::string csv = "tcm,tsc,skips," + MetricsReport::csv_header() + "\n";
  json rows = json::array();
  for (bool tcm : {true, false}) {
    for (bool tsc : {true, false}) {
      for (bool skips : {true, false}) {
        RunConfig sub = c;
        sub.model.tcm.enabled = tcm;
        sub.model.decoder.tsc_enabled = tsc;
        sub.model.decoder.skips_enabled = skips;
        sub.model.validate();
        const std::string tag = std::string("tcm") + (tcm ? "1" : "0") + "_tsc" + (tsc ? "1" : "0") + "_skips" + (skips ? "1" : "0");
        say("ablate: %s\n", tag.c_str());
        const auto out = train_into(sub, m, c.run_dir() / "ablate" / tag);
        const auto report = evaluate_split(sub, m, load_model(sub, out.best_checkpoint), "test");
        csv += std::string(tcm ? "1" : "0") + "," + (tsc ? "1" : "0") + "," + (skips ? "1" : "0") + "," + report.csv_row() + "\n";
        auto j = report.to_json();
        j["tcm"] = tcm;
        j["tsc"] = tsc;
        j["skips"] = skips;
        j["best_epoch"] = out.fit.best_epoch;
        rows.push_back(j);
      }
    }
  }
  write_text(c.run_dir() / "reports" / "ablate.csv", csv);
  write_json(c.run_dir() / "reports" / "ablate.json",
             {{"split", "test"}, {"center_noise_sigma", c.eval.center_noise_sigma}, {"rows", rows}});
  say("%s", csv.c_str());
}

/// Largest absolute change per component prefix between two snapshots.
inline json parameter_delta(const ParameterStore<float>& before, const ParameterStore<float>& after,
                            const std::set<char>& frozen) {
  json out = json::object();
  for (char letter : std::string("abcde")) {
    double max_delta = 0;
    std::size_t tensors = 0, changed = 0;
    for (const auto& [name, p] : after.entries()) {
      if (name[0] != letter) continue;
      const auto old = before.get(name);
      bool diff = false;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        diff = diff || std::bit_cast<std::uint32_t>(p[i]) != std::bit_cast<std::uint32_t>(old[i]);
        max_delta = std::max(max_delta, std::abs(static_cast<double>(p[i]) - static_cast<double>(old[i])));
      }
      ++tensors;
      changed += diff;
    }
    out[std::string(1, letter) + "."] = {
        {"frozen", frozen.count(letter) > 0}, {"tensors", tensors}, {"changed_tensors", changed}, {"max_abs_delta", max_delta}};
  }
  return out;
}

inline void cmd_transfer(RunConfig& c) {
  if (c.transfer.checkpoint.empty()) throw ConfigError("config: transfer.checkpoint (source weights) is required");
  const auto m = open_dataset(c);
  begin_run(c);
  c.model.validate();
  auto model = load_model(c, c.transfer.checkpoint);
  VideoSwinUNet<float> before(c.model, c.seed);
  before.copy_parameters_from(model);
  TrainConfig tc = c.train;
  tc.freeze_set = parse_freeze_set(c.transfer.freeze);
  tc.lr0 = c.transfer.lr0;
  tc.max_epochs = c.transfer.epochs;
  const auto out = train_into(c, m, c.run_dir(), &model, &tc);
  const auto delta = parameter_delta(before.params(), model.params(), tc.freeze_set);
  const double v0 = out.fit.log.front().val_loss, v1 = out.fit.log.back().val_loss;
  auto report = out.report;
  report["source_checkpoint_hash"] = file_hash(c.transfer.checkpoint);
  report["freeze"] = freeze_set_str(tc.freeze_set);
  report["lr0"] = tc.lr0;
  report["parameter_delta"] = delta;
  report["val_loss_epoch0"] = v0;
  report["val_loss_final"] = v1;
  report["val_loss_improved"] = v1 < v0;
  write_json(c.run_dir() / "reports" / "transfer.json", report);
  for (const auto& [prefix, d] : delta.items()) {
    say("transfer: prefix %s max_abs_delta=%.9g changed_tensors=%zu/%zu%s\n", prefix.c_str(),
                d["max_abs_delta"].get<double>(), d["changed_tensors"].get<std::size_t>(), d["tensors"].get<std::size_t>(),
                d["frozen"].get<bool>() ? " (frozen)" : "");
  }
  say("transfer: val loss %.6f -> %.6f\n", v0, v1);
}

inline void cmd_fuse(RunConfig& c) {
  begin_run(c);
  StapleOptions opt;
  if (c.fuse.prior == "global") {
    opt.estimate_global_prior = true;
  } else if (c.fuse.prior != "mean-vote") {
    throw ConfigError("config: fuse.prior must be mean-vote or global, got " + c.fuse.prior);
  }
  opt.max_iter = c.fuse.max_iter;
  opt.tol = c.fuse.tol;
  std::vector<Mask> raters;
  for (const auto& p : c.fuse.inputs) raters.push_back(read_mask_pgm(p));
  const auto res = staple_fuse(raters, opt);
  const fs::path output = c.fuse.output.empty() ? c.run_dir() / "maps" / "fused.pgm" : fs::path(c.fuse.output);
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  write_pgm(output, mask_image(res.fused));
  auto side = res.to_json();
  side["inputs"] = c.fuse.inputs;
  side["output"] = output.string();
  std::vector<double> dsc_each;
  for (const auto& r : raters) dsc_each.push_back(dsc(r, res.fused));
  side["rater_dsc_vs_fused"] = dsc_each;
  auto sidecar = output;
  sidecar.replace_extension(".json");
  write_json(sidecar, side);
  say("fuse: %zu raters, %zu iterations%s, fused mask %s\n", raters.size(), res.iterations,
              res.converged ? "" : " (not converged)", output.string().c_str());
}

inline void cmd_gradcam(RunConfig& c) {
  const auto m = open_dataset(c);
  begin_run(c);
  if (c.gradcam.count == 0) throw ConfigError("config: gradcam.count must be >= 1");
  const auto ckpt = checkpoint_or_default(c, c.gradcam.checkpoint);
  auto model = load_model(c, ckpt);
  const auto snippets = split_snippets(c, m, c.gradcam.split);
  const std::size_t n = std::min(c.gradcam.count, snippets.size());
  const auto dir = c.run_dir() / "maps" / "gradcam";
  fs::create_directories(dir);
  json items = json::array();
  for (std::size_t k = 0; k < n; ++k) {
    const auto& s = snippets[k * snippets.size() / n];
    const auto map = gradcam(model, s.frames, c.gradcam.channel);
    char stem[256];
    std::snprintf(stem, sizeof stem, "%s_f%05zu_c%zu", m.sequences.at(s.sequence).name.c_str(), s.center_frame,
                  c.gradcam.channel);
    write_pgm(dir / (std::string(stem) + ".pgm"), heatmap_image(map, map.dim(0), map.dim(1)));
    write_pgm(dir / (std::string(stem) + "_full.pgm"), heatmap_image(map, s.height(), s.width()));
    items.push_back({{"sequence", m.sequences.at(s.sequence).name}, {"frame", s.center_frame}, {"file", std::string(stem) + ".pgm"}});
  }
  write_json(c.run_dir() / "reports" / "gradcam.json",
             {{"channel", c.gradcam.channel}, {"layer", "center-frame backbone deep feature"}, {"maps", items}});
  say("gradcam: %zu heatmaps in %s\n", n, dir.string().c_str());
}

inline void cmd_gradcheck(RunConfig& c) {
  begin_run(c);
  const auto res = run_gradcheck_suite(1e-4, 16, 3, c.seed);
  auto j = res.to_json();
  j.erase("seconds");
  write_json(c.run_dir() / "reports" / "gradcheck.json", j);
  for (const auto& k : res.cases) {
    say("%-28s max_rel_err=%.3e entries=%zu skipped=%zu %s\n", k.name.c_str(), k.max_relative_error, k.entries,
                k.skipped_at_kinks, k.passed ? "ok" : "FAILED");
  }
  say("gradcheck: worst %.3e (tolerance %.0e) in %.1f s\n", res.worst(), res.tolerance, res.seconds);
  if (!res.all_passed()) throw CheckFailed("gradient check exceeded tolerance");
}

inline void cmd_cost(RunConfig& c) {
  begin_run(c);
  c.model.validate();
  const auto cost = model_cost(c.model);
  VideoSwinUNet<float> model(c.model, c.seed);
  json comps = json::array();
  for (const auto& k : cost.components) comps.push_back({{"component", k.component}, {"params", k.params}, {"flops", k.flops}});
  json scaling = json::array();
  const std::size_t dim = c.model.swin.embed_dim, heads = c.model.swin.heads.at(0), win = c.model.swin.window_sizes.at(0);
  for (std::size_t side : {8, 16, 32}) {
    scaling.push_back({{"tokens", side * side},
                       {"windowed", windowed_attention_flops(side, side, win, dim, heads)},
                       {"dense", dense_attention_flops(side, side, dim, heads)}});
  }
  const json j{{"flop_convention", "one multiply-add counts as 2 FLOPs; one forward pass over one snippet"},
               {"input", {{"t", c.model.snippet_t}, {"height", c.model.height}, {"width", c.model.width}}},
               {"params", cost.params()},
               {"params_enumerated", model.params().total_count()},
               {"flops", cost.flops()},
               {"flops_measured", measured_forward_flops(model)},
               {"components", comps},
               {"attention_scaling", {{"window", win}, {"dim", dim}, {"heads", heads}, {"rows", scaling}}}};
  write_json(c.run_dir() / "reports" / "cost.json", j);
  say("cost: %llu params, %llu FLOPs per snippet\n", static_cast<unsigned long long>(cost.params()),
              static_cast<unsigned long long>(cost.flops()));
}

inline const std::vector<std::pair<std::string, void (*)(RunConfig&)>>& command_table() {
  static const std::vector<std::pair<std::string, void (*)(RunConfig&)>> table{
      {"synth", cmd_synth},       {"train", cmd_train}, {"eval", cmd_eval},       {"sweep-t", cmd_sweep_t},
      {"ablate", cmd_ablate},     {"transfer", cmd_transfer}, {"fuse", cmd_fuse}, {"gradcam", cmd_gradcam},
      {"gradcheck", cmd_gradcheck}, {"cost", cmd_cost}};
  return table;
}

inline void run_command(const std::string& name, RunConfig& c) {
  for (const auto& [n, fn] : command_table()) {
    if (n == name) return fn(c);
  }
  throw ConfigError("unknown command " + name);
}

}  // namespace vswu
