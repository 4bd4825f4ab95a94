// Acceptance gate: one PASS/FAIL line per criterion. Criterion numbers may
// be passed as arguments to run a subset. Exit status is nonzero when any
// selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "vswu/commands.hpp"

using namespace vswu;
namespace fs = std::filesystem;

namespace {

// Best validation DSC of the one-time 30-epoch reference run (default
// dataset and training settings, seed 42).
constexpr double kSmokeReferenceDsc = 0.9958;
constexpr double kSmokeFloor = 0.85;
constexpr double kSmokeTolerance = 0.02;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path work_dir() { return fs::temp_directory_path() / "vswu_acceptance"; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin(), [](T x, T y) {
           return std::memcmp(&x, &y, sizeof(T)) == 0;
         });
}

/// The default synthetic set (seed 42): 200 train / 40 val snippets.
const DatasetManifest& default_dataset() {
  static const DatasetManifest m = [] {
    const auto root = work_dir() / "data_default";
    fs::remove_all(root);
    return synth_generate(SynthConfig{}, root);
  }();
  return m;
}

// ---------------------------------------------------------------------------

Verdict gradient_correctness() {
  const auto r = run_gradcheck_suite(1e-4, 16, 3, 42);
  std::string failed;
  for (const auto& c : r.cases) {
    if (!c.passed) failed += " " + c.name;
  }
  return {r.all_passed() && r.seconds <= 120,
          fmt("%zu cases, worst relative error %.2e (tolerance 1e-4), %.1f s%s", r.cases.size(), r.worst(), r.seconds,
              failed.empty() ? "" : (", failed:" + failed).c_str())};
}

Verdict shifted_window_oracle() {
  double worst = 0;
  bool round_trip = true;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(derive_seed(7, {seed}));
    const auto block = oracle::random_block(8, 4, 2, rng);
    const auto g = oracle::random_grid(8, 8, 8, rng);
    const auto out = swin_block(g, block, 4, 2, 2);
    const auto ref = oracle::dense_shifted_block(g, block, 4, 2, 2);
    for (std::size_t i = 0; i < 64; ++i) {
      for (std::size_t e = 0; e < 8; ++e) worst = std::max(worst, std::abs(out.tokens[i * 8 + e] - ref[i][e]));
    }
    const auto back = window_reverse(window_partition(g, 4), 8, 8);
    round_trip = round_trip && bit_equal(back.tokens, g.tokens);
    const auto shifted = cyclic_shift(cyclic_shift(g, 2), -2);
    round_trip = round_trip && bit_equal(shifted.tokens, g.tokens);
  }
  return {worst <= 1e-5 && round_trip,
          fmt("8x8 grid, M=4, shift 2, 2 heads, 5 seeds: max |SW-MSA - dense| = %.2e; partition/reverse round trip %s",
              worst, round_trip ? "bit-exact" : "NOT bit-exact")};
}

Verdict tcm_contracts() {
  std::string notes;
  bool ok = true;
  // closed gates: bit-identical to the bypass model
  {
    ModelConfig cfg, bypass_cfg;
    bypass_cfg.tcm.enabled = false;
    VideoSwinUNet<float> with_tcm(cfg, 21), bypass(bypass_cfg, 21);
    Rng rng(22);
    for (const auto& [name, p] : with_tcm.params().entries()) {
      if (name[0] != 'b') continue;
      const bool gate = name.size() > 5 && name.compare(name.size() - 5, 5, ".gate") == 0;
      for (auto& v : Tensor<float>(p).mutable_data()) v = gate ? 0.0f : static_cast<float>(rng.uniform(-0.5, 0.5));
    }
    auto frames = oracle::random_tensor<float>({5, 1, 64, 64}, rng, 0, 1);
    NoGradGuard ng;
    const bool same = bit_equal(with_tcm.forward(frames).probs, bypass.forward(frames).probs);
    ok = ok && same;
    notes += same ? "zero gates == bypass (bit-exact)" : "zero gates != bypass";
  }
  // bypass: neighbor-frame gradients exactly zero
  {
    auto cfg = testing::small_config(32, 5);
    cfg.tcm.enabled = false;
    VideoSwinUNet<double> bypass(cfg, 23);
    Rng rng(24);
    auto frames = oracle::random_tensor({5, 1, 32, 32}, rng, 0, 1);
    frames.set_requires_grad(true);
    testing::probe(bypass.forward(frames).logits, 25).backward();
    const std::size_t plane = 32 * 32;
    double neighbor = 0, center = 0;
    for (std::size_t f = 0; f < 5; ++f) {
      for (std::size_t i = 0; i < plane; ++i) (f == 2 ? center : neighbor) += std::abs(frames.grad()[f * plane + i]);
    }
    const bool zero = neighbor == 0.0 && center > 0.0;
    ok = ok && zero;
    notes += fmt("; bypass neighbor-gradient mass %.1f (center %.3g)", neighbor, center);
  }
  // tied neighbors: permuting neighbor frames leaves the output unchanged
  {
    auto cfg = testing::small_config(32, 5);
    cfg.tcm.tied_neighbors = true;
    VideoSwinUNet<double> model(cfg, 26);
    Rng rng(27);
    testing::randomize_all(model.params(), rng, 0.3);
    auto frames = oracle::random_tensor({5, 1, 32, 32}, rng, 0, 1);
    NoGradGuard ng;
    const auto base = model.forward(frames).logits;
    const std::size_t plane = 32 * 32;
    double worst = 0;
    for (const auto& perm : std::vector<std::array<std::size_t, 5>>{{1, 0, 2, 3, 4}, {4, 3, 2, 1, 0}, {3, 4, 2, 0, 1}}) {
      std::vector<double> v(5 * plane);
      for (std::size_t f = 0; f < 5; ++f) {
        std::copy_n(frames.values().begin() + perm[f] * plane, plane, v.begin() + f * plane);
      }
      const auto out = model.forward(Tensor<double>({5, 1, 32, 32}, std::move(v))).logits;
      for (std::size_t i = 0; i < out.numel(); ++i) worst = std::max(worst, std::abs(out[i] - base[i]));
    }
    ok = ok && worst <= 1e-12;
    notes += fmt("; tied-neighbor permutation max change %.1e", worst);
  }
  return {ok, notes};
}

Verdict metric_oracles() {
  Rng rng(2024);
  bool exact = true;
  double worst_dist = 0;
  std::size_t pairs = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Mask p = oracle::random_blobs(32, 32, rng), g = oracle::random_blobs(32, 32, rng);
    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < p.bits.size(); ++i) {
      tp += p.bits[i] && g.bits[i];
      tn += !p.bits[i] && !g.bits[i];
      fp += p.bits[i] && !g.bits[i];
      fn += !p.bits[i] && g.bits[i];
    }
    const auto ss = sens_spec(p, g);
    exact = exact && dsc(p, g) == oracle::brute_dsc(p, g);
    exact = exact && ss.sensitivity == (tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 1.0);
    exact = exact && ss.specificity == (tn + fp ? static_cast<double>(tn) / static_cast<double>(tn + fp) : 1.0);
    const auto slow = oracle::brute_surface(p, g);
    if (slow.empty()) continue;
    double mean = 0;
    for (double d : slow) mean += d;
    mean /= static_cast<double>(slow.size());
    worst_dist = std::max({worst_dist, std::abs(*hd95(p, g) - percentile(slow, 95)), std::abs(*asd(p, g) - mean)});
    ++pairs;
  }
  Mask a(8, 8), b(8, 8);
  a(0, 0) = 1;
  b(3, 4) = 1;
  const bool single = *hd95(a, b) == 5.0 && *asd(a, b) == 5.0;
  return {exact && worst_dist <= 1e-9 && single && pairs > 0,
          fmt("50 pairs 32x32: DSC/sens/spec %s; max HD95/ASD deviation %.1e over %zu defined pairs; (0,0)/(3,4) -> %g",
              exact ? "exact" : "MISMATCH", worst_dist, pairs, *hd95(a, b))};
}

Verdict staple_recovery() {
  int good = 0;
  bool monotone = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Mask truth;
    std::vector<std::pair<double, double>> pq;
    const auto raters = oracle::staple_recovery_stack(seed, truth, pq);
    StapleOptions opt;
    opt.estimate_global_prior = true;
    const auto res = staple_fuse(raters, opt);
    bool ok = true;
    const double fused = dsc(res.fused, truth);
    for (std::size_t k = 0; k < pq.size(); ++k) {
      ok = ok && std::abs(res.sensitivity[k] - pq[k].first) <= 0.05 && std::abs(res.specificity[k] - pq[k].second) <= 0.05;
      ok = ok && fused >= dsc(raters[k], truth);
    }
    for (std::size_t i = 1; i < res.log_likelihood.size(); ++i) monotone = monotone && res.log_likelihood[i] >= res.log_likelihood[i - 1];
    good += ok;
  }
  return {good >= 9 && monotone, fmt("%d/10 stacks recovered (p, q within 0.05, fused DSC >= every rater); EM objective %s",
                                     good, monotone ? "non-decreasing" : "DECREASED")};
}

std::optional<Checkpoint> g_smoke_best;

Verdict smoke_training() {
  const auto& m = default_dataset();
  const auto train = window_snippets(m, 5, "train"), val = window_snippets(m, 5, "val");
  VideoSwinUNet<float> model(ModelConfig{}, 42);
  TrainConfig tc;
  tc.max_epochs = 30;
  const auto start = std::chrono::steady_clock::now();
  const auto res = fit(model, train, val, tc);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60;
  g_smoke_best = res.best;
  double best = 0;
  std::size_t first = 0;
  const double threshold = std::max(kSmokeFloor, kSmokeReferenceDsc - kSmokeTolerance);
  for (const auto& r : res.log) {
    best = std::max(best, r.val_dsc);
    if (!first && r.val_dsc >= threshold) first = r.epoch;
  }
  return {train.size() == 200 && val.size() == 40 && best >= threshold && minutes <= 20,
          fmt("%zu train / %zu val snippets, best held-out DSC %.4f (threshold %.4f, first reached at epoch %zu), %.1f min",
              train.size(), val.size(), best, threshold, first, minutes)};
}

Verdict ablation_direction() {
  const auto& m = default_dataset();
  const double sigma = 0.3;
  const auto train = window_snippets(m, 5, "train");
  const auto val = corrupt_centers(window_snippets(m, 5, "val"), sigma, 7);
  const auto test = corrupt_centers(window_snippets(m, 5, "test"), sigma, 8);
  std::vector<double> gaps;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    double dsc_of[2] = {0, 0};
    for (int tcm = 1; tcm >= 0; --tcm) {
      ModelConfig cfg;
      cfg.tcm.enabled = tcm == 1;
      VideoSwinUNet<float> model(cfg, seed);
      TrainConfig tc;
      tc.max_epochs = 15;
      tc.seed = seed;
      tc.center_noise_sigma = sigma;
      const auto res = fit(model, train, val, tc);
      load_parameters(model.params(), res.best);
      dsc_of[tcm] = evaluate_loss_dsc(model, test).dsc;
    }
    gaps.push_back(dsc_of[1] - dsc_of[0]);
    detail += fmt("%sseed %llu: %.4f vs %.4f", detail.empty() ? "" : "; ", static_cast<unsigned long long>(seed), dsc_of[1],
                  dsc_of[0]);
  }
  std::sort(gaps.begin(), gaps.end());
  return {gaps[1] >= 0.02, fmt("median TCM - bypass test DSC gap %+.4f (needs >= 0.02); %s", gaps[1], detail.c_str())};
}

Verdict transfer_protocol() {
  if (!g_smoke_best) {
    // source weights when criterion 6 was not selected
    const auto& m = default_dataset();
    VideoSwinUNet<float> src(ModelConfig{}, 42);
    TrainConfig tc;
    tc.max_epochs = 3;
    g_smoke_best = fit(src, window_snippets(m, 5, "train"), window_snippets(m, 5, "val"), tc).best;
  }
  SynthConfig second;
  second.seed = 4242;
  second.noise_sigma = 0.12;
  second.velocity = 3.0;
  const auto root = work_dir() / "data_second";
  fs::remove_all(root);
  const auto m = synth_generate(second, root);
  VideoSwinUNet<float> model(ModelConfig{}, 42), before(ModelConfig{}, 42);
  LoadOptions strict;
  strict.strict = true;
  load_parameters(model.params(), *g_smoke_best, strict);
  load_parameters(before.params(), *g_smoke_best, strict);
  TrainConfig tc;
  tc.freeze_set = {'a'};
  tc.lr0 = 1e-4;
  tc.max_epochs = 5;
  const auto start = std::chrono::steady_clock::now();
  const auto res = fit(model, window_snippets(m, 5, "train"), window_snippets(m, 5, "val"), tc);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60;
  std::size_t frozen = 0, frozen_changed = 0, other_changed = 0;
  for (const auto& [name, p] : model.params().entries()) {
    const bool same = bit_equal(p, before.params().get(name));
    if (name.rfind("a.", 0) == 0) {
      ++frozen;
      frozen_changed += !same;
    } else {
      other_changed += !same;
    }
  }
  const double v0 = res.log.front().val_loss, v5 = res.log.back().val_loss;
  return {frozen > 0 && frozen_changed == 0 && other_changed > 0 && v5 < v0 && minutes <= 10,
          fmt("%zu/%zu a.* tensors changed, %zu b-e tensors changed; val loss %.5f -> %.5f over 5 epochs; %.1f min",
              frozen_changed, frozen, other_changed, v0, v5, minutes)};
}

Verdict cost_accounting() {
  bool params_ok = true;
  std::string counts;
  for (int variant = 0; variant < 3; ++variant) {
    ModelConfig cfg;
    if (variant == 1) cfg.tcm.enabled = false;
    if (variant == 2) cfg = testing::small_config(32, 3);
    VideoSwinUNet<float> model(cfg, 3);
    std::uint64_t enumerated = 0;
    for (const auto& [name, p] : model.params().entries()) enumerated += p.numel();
    params_ok = params_ok && model_cost(cfg).params() == enumerated;
    counts += fmt("%s%llu", counts.empty() ? "" : "/", static_cast<unsigned long long>(enumerated));
  }
  // measured on the op counter at fixed M=4, D=8, 2 heads
  Rng rng(31);
  const std::size_t d = 8, m = 4, heads = 2;
  AttentionParams<float> p;
  p.wq = oracle::random_tensor<float>({d, d}, rng);
  p.wk = oracle::random_tensor<float>({d, d}, rng);
  p.wv = oracle::random_tensor<float>({d, d}, rng);
  p.wo = oracle::random_tensor<float>({d, d}, rng);
  std::vector<double> win, dense_core;
  bool formula = true;
  for (std::size_t side : {8, 16, 32}) {
    TokenGrid<float> g{oracle::random_tensor<float>({side * side, d}, rng), side, side};
    NoGradGuard ng;
    reset_flops();
    window_attention(window_partition(g, m), p, heads);
    const auto w = flop_count();
    reset_flops();
    window_attention(window_partition(g, side), p, heads);
    const auto full = flop_count();
    formula = formula && w == windowed_attention_flops(side, side, m, d, heads) && full == dense_attention_flops(side, side, d, heads);
    win.push_back(static_cast<double>(w));
    // the four token projections are linear in N in both cases
    dense_core.push_back(static_cast<double>(full - 4 * linear_flops(side * side, d, d)));
  }
  const bool linear = win[1] / win[0] == 4.0 && win[2] / win[1] == 4.0;
  const bool quadratic = dense_core[1] / dense_core[0] == 16.0 && dense_core[2] / dense_core[1] == 16.0;
  return {params_ok && formula && linear && quadratic,
          fmt("analytic == enumerated params (%s) %s; N=64/256/1024 windowed ratios %.2f, %.2f; dense score/mix ratios %.2f, "
              "%.2f; counter %s formulas",
              counts.c_str(), params_ok ? "yes" : "NO", win[1] / win[0], win[2] / win[1], dense_core[1] / dense_core[0],
              dense_core[2] / dense_core[1], formula ? "matches" : "DIFFERS FROM")};
}

Verdict determinism() {
  const auto root = work_dir() / "determinism";
  fs::remove_all(root);
  auto run = [&](const std::string& name, const char* workers) {
    setenv("VSWU_NUM_WORKERS", workers, 1);
    RunConfig c;
    c.name = name;
    c.runs_dir = (root / "runs").string();
    c.data_root = (root / "data").string();
    c.synth.num_sequences = 7;
    c.train.max_epochs = 2;
    if (!fs::exists(root / "data" / "manifest.json")) cmd_synth(c);
    RunConfig t = c;
    cmd_train(t);
    RunConfig e = c;
    cmd_eval(e);
    unsetenv("VSWU_NUM_WORKERS");
  };
  run("first", "1");
  run("second", "3");
  std::size_t compared = 0, differ = 0;
  std::string which;
  for (const char* f : {"log.csv", "checkpoints/best.ckpt", "checkpoints/last.ckpt", "reports/train.json", "reports/eval_test.json",
                        "reports/eval_test.csv"}) {
    const auto a = slurp(root / "runs/first" / f), b = slurp(root / "runs/second" / f);
    ++compared;
    if (a.empty() || a != b) {
      ++differ;
      which += std::string(" ") + f;
    }
  }
  return {differ == 0,
          fmt("%zu artifacts (log, checkpoints, train/eval reports) compared across two runs with 1 vs 3 loader workers: %s%s",
              compared, differ ? "differ:" : "bit-identical", which.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient-correctness", gradient_correctness}, {"shifted-window-oracle", shifted_window_oracle},
      {"tcm-contracts", tcm_contracts},               {"metric-oracles", metric_oracles},
      {"staple-recovery", staple_recovery},           {"smoke-training", smoke_training},
      {"ablation-direction", ablation_direction},     {"transfer-protocol", transfer_protocol},
      {"cost-accounting", cost_accounting},           {"determinism", determinism}};
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::atoi(argv[i])));
  fs::create_directories(work_dir());
  progress_output() = false;
  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    if (!selected.empty() && !selected.count(k + 1)) continue;
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[k].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !v.pass;
    std::printf("%s %2zu %s: %s [%.1f s]\n", v.pass ? "PASS" : "FAIL", k + 1, criteria[k].first.c_str(), v.detail.c_str(), s);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
