// vswu: command-line front end. Settings merge in this order: defaults,
// --config file, --set / --a.b overrides, then the dedicated flags.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "vswu/commands.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::string> flag_overrides;  // filled by the dedicated flags, applied last
};

void emit_error(const std::string& category, const std::string& message) {
  std::string flat = message;
  for (auto& ch : flat) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  std::cerr << "vswu-error: category=" << category << " message=" << vswu::json(flat).dump() << "\n";
}

/// `--a.b value` and `--a.b=value` pairs left over by CLI11.
std::vector<std::string> dotted_overrides(const std::vector<std::string>& extra) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < extra.size(); ++i) {
    const auto& arg = extra[i];
    if (arg.rfind("--", 0) != 0 || arg.find('.') == std::string::npos) {
      throw vswu::ConfigError("unexpected argument " + arg);
    }
    const auto body = arg.substr(2);
    if (body.find('=') != std::string::npos) {
      out.push_back(body);
    } else if (i + 1 < extra.size()) {
      out.push_back(body + "=" + extra[++i]);
    } else {
      throw vswu::ConfigError("missing value for " + arg);
    }
  }
  return out;
}

/// Registers a flag that becomes the override `path=<value>`.
void mapped(CLI::App* sub, CommonFlags& f, const std::string& flag, const std::string& path, const std::string& help) {
  sub->add_option_function<std::string>(
      flag, [&f, path](const std::string& v) { f.flag_overrides.push_back(path + "=" + v); }, help);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video segmentation with temporal context and shifted-window attention"};
  app.require_subcommand(1, 1);
  app.footer("Any setting can be given as --<dotted.path> <value>, e.g. --train.lr0 0.0005.\n"
             "Errors print one line 'vswu-error: category=<c> message=\"...\"' to stderr.");

  static const std::vector<std::pair<std::string, std::string>> about{
      {"synth", "generate the synthetic video dataset into data_root"},
      {"train", "train a model; writes log.csv and checkpoints/"},
      {"eval", "metrics report and predicted masks for one split"},
      {"sweep-t", "train and evaluate for every snippet length in sweep.t_values"},
      {"ablate", "TCM x TSC x skip-connection toggle matrix"},
      {"transfer", "fine-tune from a checkpoint with frozen components"},
      {"fuse", "STAPLE fusion of rater masks"},
      {"gradcam", "Grad-CAM heatmaps of the center-frame deep feature"},
      {"gradcheck", "finite-difference gradient check suite"},
      {"cost", "parameter and FLOP accounting"}};

  CommonFlags flags;
  std::vector<std::string> fuse_inputs;
  for (const auto& [name, help] : about) {
    auto* sub = app.add_subcommand(name, help);
    sub->allow_extras();
    sub->add_option("--config", flags.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--set", flags.sets, "override, key=value with a dotted key")->take_all();
    mapped(sub, flags, "--seed", "seed", "seed of every random stream (default 42)");
    mapped(sub, flags, "--name", "name", "run name; outputs go to runs_dir/<name>");
    mapped(sub, flags, "--runs-dir", "runs_dir", "parent directory of run outputs");
    mapped(sub, flags, "--data", "data_root", "dataset directory");
    if (name == "eval" || name == "gradcam") {
      mapped(sub, flags, "--checkpoint", name + ".checkpoint", "weights (default: the run's best.ckpt)");
      mapped(sub, flags, "--split", name + ".split", "train, val or test");
    }
    if (name == "gradcam") {
      mapped(sub, flags, "--channel", "gradcam.channel", "0 bolus, 1 pharynx");
      mapped(sub, flags, "--count", "gradcam.count", "number of snippets");
    }
    if (name == "train" || name == "sweep-t" || name == "ablate") {
      mapped(sub, flags, "--epochs", "train.max_epochs", "epoch budget");
    }
    if (name == "transfer") {
      mapped(sub, flags, "--checkpoint", "transfer.checkpoint", "source weights");
      mapped(sub, flags, "--freeze", "transfer.freeze", "frozen component letters, e.g. a or a+b+c");
      mapped(sub, flags, "--lr", "transfer.lr0", "learning rate (default 1e-4)");
      mapped(sub, flags, "--epochs", "transfer.epochs", "epochs (default 5)");
    }
    if (name == "fuse") {
      sub->add_option("inputs", fuse_inputs, "rater mask PGMs ({0,255})");
      mapped(sub, flags, "--output,-o", "fuse.output", "fused mask PGM; a .json sidecar is written beside it");
      mapped(sub, flags, "--prior", "fuse.prior", "mean-vote (per-pixel) or global (re-estimated scalar)");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what());
    return 2;
  }

  auto* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  try {
    vswu::RunConfig cfg = flags.config.empty() ? vswu::RunConfig{} : vswu::load_run_config(flags.config);
    for (const auto& s : flags.sets) vswu::apply_override(cfg, s);
    for (const auto& s : dotted_overrides(sub->remaining())) vswu::apply_override(cfg, s);
    for (const auto& s : flags.flag_overrides) vswu::apply_override(cfg, s);
    if (!fuse_inputs.empty()) cfg.fuse.inputs = fuse_inputs;
    vswu::run_command(command, cfg);
    return 0;
  } catch (const vswu::ConfigError& e) {
    emit_error("config", e.what());
    return 2;
  } catch (const vswu::FormatError& e) {
    emit_error("format", e.what());
    return 3;
  } catch (const vswu::IoError& e) {
    emit_error("io", e.what());
    return 3;
  } catch (const vswu::CheckFailed& e) {
    emit_error("check", e.what());
    return 1;
  } catch (const vswu::TrainingError& e) {
    emit_error("training", e.what());
    return 4;
  } catch (const vswu::DimensionError& e) {
    emit_error("dimension", e.what());
    return 4;
  } catch (const std::invalid_argument& e) {
    emit_error("argument", e.what());
    return 2;
  } catch (const std::exception& e) {
    emit_error("internal", e.what());
    return 4;
  }
}
