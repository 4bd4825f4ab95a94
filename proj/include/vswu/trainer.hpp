#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "vswu/checkpoint.hpp"
#include "vswu/dataset.hpp"
#include "vswu/loss.hpp"
#include "vswu/metrics.hpp"
#include "vswu/model.hpp"
#include "vswu/optim.hpp"

namespace vswu {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t batch_size = 2;
  double lr0 = 1e-3;
  PlateauConfig plateau;
  std::size_t max_epochs = 150;
  std::uint64_t seed = 42;
  std::set<char> freeze_set;
  bool augment = true;
  double center_noise_sigma = 0.0;  // training-time center-frame corruption
  LossConfig loss;
  AdamConfig adam;

  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
    if (!(lr0 > 0)) throw std::invalid_argument("train: lr0 must be positive");
    if (!(plateau.decay > 0 && plateau.decay < 1)) throw std::invalid_argument("train: lr_decay must be in (0,1)");
    if (max_epochs == 0) throw std::invalid_argument("train: max_epochs must be >= 1");
    if (center_noise_sigma < 0) throw std::invalid_argument("train: center_noise_sigma must be >= 0");
    for (char c : freeze_set) {
      if (!is_component_letter(c)) throw std::invalid_argument(std::string("train: unknown freeze letter ") + c);
    }
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();  // NaN for the pre-training row
  double val_loss = 0;
  double lr = 0;
  double val_dsc = 0;
};

struct EvalSummary {
  double loss = 0;
  double dsc = 0;  // mean over snippets of the channel-mean DSC
};

/// Forward pass without graph recording.
template <class T>
Tensor<float> predict_probs(const VideoSwinUNet<T>& model, const Snippet& s) {
  NoGradGuard guard;
  if constexpr (std::is_same_v<T, float>) {
    return model.forward(s.frames).probs;
  } else {
    return model.forward(s.frames.template cast<T>()).probs.template cast<float>();
  }
}

/// Validation loss and DSC, accumulated in snippet order.
template <class T>
EvalSummary evaluate_loss_dsc(const VideoSwinUNet<T>& model, const std::vector<Snippet>& data,
                              const LossConfig& loss_cfg = {}) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty snippet list");
  EvalSummary out;
  for (const auto& s : data) {
    const auto probs = predict_probs(model, s);
    out.loss += loss_terms(probs, s.label, loss_cfg).total;
    double d = 0;
    for (std::size_t c = 0; c < probs.dim(0); ++c) d += dsc(threshold_channel(probs, c), threshold_channel(s.label, c));
    out.dsc += d / static_cast<double>(probs.dim(0));
  }
  out.loss /= static_cast<double>(data.size());
  out.dsc /= static_cast<double>(data.size());
  return out;
}

struct FitResult {
  std::vector<EpochRecord> log;  // row 0 is the untrained model
  Checkpoint best;               // parameters + state at the best validation loss
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  Checkpoint last;
};

struct FitHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  std::optional<std::filesystem::path> checkpoint_dir;  // best.ckpt / last.ckpt
};

/// Mini-batch training with Adam and the plateau schedule. The sample order
/// of epoch e comes from derive_seed(seed, {e}); augmentation and center
/// noise of sample i in epoch e from derive_seed(seed, {tag, e, i}).
template <class T>
FitResult fit(VideoSwinUNet<T>& model, const std::vector<Snippet>& train, const std::vector<Snippet>& val,
              const TrainConfig& cfg, const FitHooks& hooks = {}) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("fit: empty training set");
  if (val.empty()) throw std::invalid_argument("fit: empty validation set");
  auto& store = model.params();
  const std::size_t frozen = apply_freeze(store, cfg.freeze_set);
  if (frozen == store.entries().size()) throw std::invalid_argument("fit: every parameter is frozen");

  Adam<T> adam(cfg.adam);
  PlateauScheduler sched(cfg.lr0, cfg.plateau);
  FitResult res;
  TrainState st;
  st.rng_state = cfg.seed;

  auto snapshot = [&](std::size_t epoch) {
    Checkpoint ck;
    capture_parameters(ck, store);
    st.epoch = epoch;
    st.adam_steps = adam.steps();
    st.lr = sched.lr();
    st.sched_best = sched.best();
    st.sched_stagnant = sched.stagnant_epochs();
    capture_training(ck, adam, st);
    return ck;
  };
  auto emit = [&](const EpochRecord& r) {
    res.log.push_back(r);
    if (hooks.on_epoch) hooks.on_epoch(r);
  };

  {
    const auto e0 = evaluate_loss_dsc(model, val, cfg.loss);
    emit({0, std::numeric_limits<double>::quiet_NaN(), e0.loss, sched.lr(), e0.dsc});
  }

  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double lr = sched.lr();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(cfg.seed, {epoch}));
    shuffle_rng.shuffle(order.begin(), order.end());

    double epoch_loss = 0;
    std::size_t batch_id = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_id) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const T inv_b = T(1) / static_cast<T>(end - start);
      store.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        Snippet s = train[idx];
        if (cfg.augment) {
          Rng aug(derive_seed(cfg.seed, {0xa1, epoch, idx}));
          s = augment(s, aug);
        }
        if (cfg.center_noise_sigma > 0) {
          Rng noise(derive_seed(cfg.seed, {0xb1, epoch, idx}));
          s = corrupt_center(s, cfg.center_noise_sigma, noise);
        }
        Tensor<T> frames, label;
        if constexpr (std::is_same_v<T, float>) {
          frames = s.frames;
          label = s.label;
        } else {
          frames = s.frames.template cast<T>();
          label = s.label.template cast<T>();
        }
        auto out = model.forward(frames);
        auto loss = combined_loss(out.probs, label, cfg.loss);
        const double lv = static_cast<double>(loss.item());
        if (!std::isfinite(lv)) {
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_id) +
                              " (snippet " + std::to_string(idx) + ")");
        }
        epoch_loss += lv;
        scale(loss, inv_b).backward();
      }
      adam.step(store, lr);
    }
    // the logged rate is the one used during this epoch
    const auto ev = evaluate_loss_dsc(model, val, cfg.loss);
    sched.step(ev.loss);
    const EpochRecord rec{epoch, epoch_loss / static_cast<double>(train.size()), ev.loss, lr, ev.dsc};
    if (ev.loss < res.best_val_loss) {
      res.best_val_loss = ev.loss;
      res.best_epoch = epoch;
      st.best_val_loss = ev.loss;
      res.best = snapshot(epoch);
      if (hooks.checkpoint_dir) save_checkpoint(res.best, *hooks.checkpoint_dir / "best.ckpt");
    }
    emit(rec);
  }
  res.last = snapshot(cfg.max_epochs);
  if (hooks.checkpoint_dir) save_checkpoint(res.last, *hooks.checkpoint_dir / "last.ckpt");
  store.zero_grad();
  return res;
}

// ---------------------------------------------------------------------------
// Log file

inline std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// CSV with a commented settings header followed by one row per epoch.
inline void write_training_log(const std::filesystem::path& path, const std::vector<EpochRecord>& log,
                               const TrainConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# max_epochs=" << cfg.max_epochs << " batch_size=" << cfg.batch_size << " lr0=" << format_double(cfg.lr0)
      << " plateau_epochs=" << cfg.plateau.patience << " lr_decay=" << format_double(cfg.plateau.decay)
      << " plateau_threshold=" << format_double(cfg.plateau.threshold) << " seed=" << cfg.seed
      << " freeze=" << freeze_set_str(cfg.freeze_set) << " augment=" << (cfg.augment ? 1 : 0)
      << " center_noise_sigma=" << format_double(cfg.center_noise_sigma) << "\n";
  out << "epoch,train_loss,val_loss,lr,val_dsc\n";
  for (const auto& r : log) {
    out << r.epoch << "," << format_double(r.train_loss) << "," << format_double(r.val_loss) << ","
        << format_double(r.lr) << "," << format_double(r.val_dsc) << "\n";
  }
}

}  // namespace vswu
