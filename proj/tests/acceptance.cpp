// Desk-scale acceptance run. Prints one [PASS]/[FAIL] line per criterion.
//
//   acceptance           exit status = number of failed criteria
//   acceptance --report [FILE]
//                        always exit 0 once every criterion has run; the
//                        lines are also written to FILE if given
//
// The desk-scale scenario is the RunConfig default: 64x64 frames, a
// 50-pair synthetic background library with drifting fringes, 5000
// training shots, 30 epochs, 200 benchmark shots.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <unistd.h>

#include "absorb/evaluate.hpp"
#include "absorb/io.hpp"
#include "absorb/ls_fit.hpp"
#include "absorb/network.hpp"
#include "absorb/pipeline.hpp"
#include "absorb/regressor.hpp"
#include "absorb/simulator.hpp"

namespace {

using namespace absorb;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[1024];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int failures = 0;
std::FILE* mirror = nullptr;

void emit(const std::string& line) {
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  if (mirror) {
    std::fprintf(mirror, "%s\n", line.c_str());
    std::fflush(mirror);
  }
}

void report(const char* name, const Outcome& o) {
  emit(std::string(o.pass ? "[PASS] " : "[FAIL] ") + name + ": " + o.detail);
  if (!o.pass) ++failures;
}

void run(const char* name, const std::function<Outcome()>& fn) {
  try {
    report(name, fn());
  } catch (const std::exception& e) {
    report(name, {false, std::string("aborted: ") + e.what()});
  }
}

// Shared desk-scale state, built once.
struct Scenario {
  RunConfig cfg;
  BackgroundLibrary train_lib;
  BackgroundLibrary test_lib;
  Dataset train_ml1, train_ml3;
  Dataset heldout_ml1, heldout_ml3;
  Dataset bench_ml1;  // ML3 uses the same shots, the mode only selects channels
  std::optional<TrainingRun> ml1, ml3;
  double ml1_seconds = 0.0, ml3_seconds = 0.0;
  std::vector<ImageRecord> bench_records;
};

constexpr std::uint64_t kTrainLibrarySeed = 101;
constexpr std::uint64_t kTestLibrarySeed = 202;
constexpr std::uint64_t kTrainShotsSeed = 11;
constexpr std::uint64_t kHeldoutShotsSeed = 12;
constexpr std::uint64_t kBenchShotsSeed = 13;
constexpr std::size_t kHeldoutShots = 500;

Dataset with_mode(Dataset ds, InputMode m) {
  ds.mode = m;
  return ds;
}

Scenario make_scenario() {
  Scenario s;
  const RunConfig& c = s.cfg;
  s.train_lib = make_synthetic_library(c.library_size, c.width, c.height, c.background, c.phase_drift, kTrainLibrarySeed);
  s.test_lib = make_synthetic_library(c.library_size, c.width, c.height, c.background, c.phase_drift, kTestLibrarySeed);
  s.train_ml1 = build_dataset(s.train_lib, c.ranges, c.shots, InputMode::ml1, kTrainShotsSeed, c.pairing);
  s.train_ml3 = with_mode(s.train_ml1, InputMode::ml3);
  s.heldout_ml1 = build_dataset(s.test_lib, c.ranges, kHeldoutShots, InputMode::ml1, kHeldoutShotsSeed, c.pairing);
  s.heldout_ml3 = with_mode(s.heldout_ml1, InputMode::ml3);
  s.bench_ml1 = build_dataset(s.test_lib, c.ranges, c.bench_shots, InputMode::ml1, kBenchShotsSeed, c.pairing);
  return s;
}

NetworkSpec spec_for(const RunConfig& c, InputMode m) {
  NetworkSpec spec = c.network;
  spec.input_channels = channel_count(m);
  return spec;
}

// ---------------------------------------------------------------------------

Outcome round_trip_identifiability() {
  const auto t0 = Clock::now();
  // Fringed, noise-free backgrounds; atoms synthesized on the presented bg.
  BackgroundSpec bg{40000.0, 0.0, 100.0, 0.0, {600.0, 13.0, 0.7, 0.0}};
  const auto lib = make_synthetic_library(8, 64, 64, bg, 0.4, 31);
  const Dataset ds = build_dataset(lib, ParamRanges{}, 200, InputMode::ml1, 32, Pairing::same);
  int ok = 0;
  double worst = 0.0;
  for (const auto& shot : ds.shots) {
    const auto fit = fit_2d(od_from_triple(shot.triple));
    const auto a = fit.params.to_array();
    const auto t = canonicalize(shot.truth).to_array();
    double m = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) m = std::max(m, std::abs(a[j] - t[j]));
    if (m < 1e-3) ++ok;
    worst = std::max(worst, m);
  }
  const double secs = since(t0);
  return {ok >= 198 && secs < 60.0,
          fmt("%d/200 shots with all |delta| < 1e-3 (need >= 198), largest miss %.3g, %.1f s", ok, worst, secs)};
}

Outcome jacobian_correctness() {
  Rng rng(77);
  constexpr int w = 48, h = 40;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const GaussianParams p{rng.uniform(0.2 * w, 0.8 * w), rng.uniform(0.2 * h, 0.8 * h), rng.uniform(1.5, 10.0),
                           rng.uniform(1.5, 10.0),        rng.uniform(0.1, 3.0),        rng.uniform(-0.05, 0.05),
                           rng.uniform(-0.78, 0.78)};
    const auto jac = gaussian_od_jacobian(p, w, h);
    const auto base = p.to_array();
    for (std::size_t j = 0; j < base.size(); ++j) {
      const double step = 1e-5 * std::max(std::abs(base[j]), 1.0);
      auto up = base, down = base;
      up[j] += step;
      down[j] -= step;
      const auto pu = GaussianParams::from_array(up), pd = GaussianParams::from_array(down);
      double max_abs = 0.0, max_err = 0.0;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double fd = (gaussian_value(pu, x, y) - gaussian_value(pd, x, y)) / (2 * step);
          const double an = jac[j][static_cast<std::size_t>(y * w + x)];
          max_abs = std::max(max_abs, std::abs(an));
          max_err = std::max(max_err, std::abs(an - fd));
        }
      }
      worst = std::max(worst, max_err / max_abs);
    }
  }
  return {worst < 1e-5, fmt("largest relative error over 100 draws x 7 partials: %.3g (need < 1e-5)", worst)};
}

Outcome gradient_correctness() {
  double worst = 0.0;
  std::size_t checked = 0, nonzero = 0;
  for (int channels : {1, 3}) {
    NetworkSpec spec;
    spec.input_channels = channels;
    spec.input_width = 9;
    spec.input_height = 7;
    spec.conv_channels = {2, 2};
    spec.hidden = 4;
    const Network<double> net(spec);
    auto ws = net.make_workspace();
    Rng rng(40 + static_cast<std::uint64_t>(channels));
    TrainingSet data;
    data.input_size = net.input_size();
    for (std::size_t i = 0; i < 2 * data.input_size; ++i) data.inputs.push_back(static_cast<float>(rng.uniform(0.0, 1.5)));
    for (int i = 0; i < 2; ++i) {
      ParamVector z;
      for (double& v : z) v = rng.normal();
      data.targets.push_back(z);
    }
    const std::vector<std::size_t> batch{0, 1};
    AlignedVector<double> w = net.initial_weights(7);
    for (double& v : w) v += 0.05 * rng.normal();
    std::vector<double> grad(w.size()), scratch(w.size());
    loss_and_gradient<double>(net, w, data, batch, ws, grad);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double keep = w[i], hstep = 1e-6;
      w[i] = keep + hstep;
      const double up = loss_and_gradient<double>(net, w, data, batch, ws, scratch);
      w[i] = keep - hstep;
      const double down = loss_and_gradient<double>(net, w, data, batch, ws, scratch);
      w[i] = keep;
      const double fd = (up - down) / (2 * hstep);
      const double scale = std::max({std::abs(fd), std::abs(grad[i]), 1e-7});
      worst = std::max(worst, std::abs(fd - grad[i]) / scale);
      ++checked;
      if (grad[i] != 0.0) ++nonzero;
    }
  }
  return {worst < 1e-4 && nonzero * 2 > checked,
          fmt("%zu weights (conv, dense, head; 1 and 3 channels), largest relative error %.3g (need < 1e-4), %zu "
              "nonzero",
              checked, worst, nonzero)};
}

Outcome chi2_calibration() {
  Rng rng(2025);
  const GaussianParams truth{31.3, 29.8, 6.5, 4.0, 1.3, 0.01, 0.05};
  double sum = 0.0;
  long long dof = 0;
  for (int t = 0; t < 500; ++t) {
    ODMap od = gaussian_od(truth, 64, 64);
    for (double& v : od.values) v += rng.normal(0.0, 0.05);
    const auto rep = chi_square(od, truth);
    sum += rep.chi2 / static_cast<double>(rep.dof);
    dof = rep.dof;
  }
  const double mean = sum / 500.0;
  return {mean >= 0.95 && mean <= 1.05, fmt("mean chi2/DOF over 500 trials %.4f (DOF %lld, need [0.95, 1.05])", mean, dof)};
}

void train_models(Scenario& s) {
  auto t0 = Clock::now();
  s.ml1 = train(spec_for(s.cfg, InputMode::ml1), s.train_ml1, s.cfg.train, "acceptance-train");
  s.ml1_seconds = since(t0);
  t0 = Clock::now();
  s.ml3 = train(spec_for(s.cfg, InputMode::ml3), s.train_ml3, s.cfg.train, "acceptance-train");
  s.ml3_seconds = since(t0);
}

Outcome training_convergence(Scenario& s) {
  train_models(s);
  const double h1 = validation_loss(s.ml1->model, s.heldout_ml1);
  const double h3 = validation_loss(s.ml3->model, s.heldout_ml3);
  const bool pass = h1 < 0.05 && h3 < 0.05 && s.ml1_seconds + s.ml3_seconds < 1800.0;
  return {pass, fmt("held-out normalized MSE ML-1 %.4f, ML-3 %.4f (need < 0.05); validation %.4f / %.4f at epochs "
                    "%d / %d of %d; training %.0f s + %.0f s",
                    h1, h3, s.ml1->best_val_loss, s.ml3->best_val_loss, s.ml1->best_epoch, s.ml3->best_epoch,
                    s.cfg.train.epochs, s.ml1_seconds, s.ml3_seconds)};
}

void run_benchmark(Scenario& s) {
  MethodSetup setup;
  setup.fit = s.cfg.fit;
  setup.od = {s.cfg.t_floor, s.cfg.od_floor};
  setup.ml1 = &s.ml1->model;
  setup.ml3 = &s.ml3->model;
  const auto images = triples_of(s.bench_ml1);
  for (Method m : kAllMethods) {
    auto part = run_timed(m, images, setup);
    s.bench_records.insert(s.bench_records.end(), part.begin(), part.end());
  }
}

Outcome accuracy_ordering(Scenario& s) {
  run_benchmark(s);
  const BenchmarkReport rep = build_report(s.bench_records, "2dls", {}, {"2dls", "ml1", "ml3"});
  const double c3 = rep.method("3x1dls").median_chi2, c2 = rep.method("2dls").median_chi2;
  const double m1 = rep.method("ml1").median_chi2, m3 = rep.method("ml3").median_chi2;
  const bool ml_ok = c2 <= m1 && c2 <= m3 && m1 <= 1.05 * c2 && m3 <= 1.05 * c2;
  const bool worst = c3 > c2 && c3 > m1 && c3 > m3;
  return {ml_ok && worst, fmt("median chi2: 2D-LS %.1f, ML-1 %.1f (x%.3f), ML-3 %.1f (x%.3f), 3x1D-LS %.1f (x%.3f); "
                              "need ML within x1.05 of 2D-LS and 3x1D-LS worst",
                              c2, m1, m1 / c2, m3, m3 / c2, c3, c3 / c2)};
}

Outcome timing_ordering(const Scenario& s) {
  const BenchmarkReport rep = build_report(s.bench_records, "2dls");
  const double t3 = rep.method("3x1dls").timing.median, t2 = rep.method("2dls").timing.median;
  const double t1 = rep.method("ml1").timing.median, tm3 = rep.method("ml3").timing.median;
  const bool order = std::max(t1, tm3) < t3 && t3 < t2;
  const bool close = std::max(t1, tm3) <= 1.25 * std::min(t1, tm3);
  return {order && close, fmt("median ms: ML-1 %.3f, ML-3 %.3f, 3x1D-LS %.3f, 2D-LS %.3f (need ML < 3x1D < 2D, ML "
                              "pair within 25%%)",
                              1e3 * t1, 1e3 * tm3, 1e3 * t3, 1e3 * t2)};
}

Outcome fine_tune_recovery(const Scenario& s) {
  const RunConfig& c = s.cfg;
  const double baseline = validation_loss(s.ml1->model, s.heldout_ml1);
  // Drifted beam on the same apparatus: 10% dimmer, noisier, stronger fringes
  // at another period and angle, faster shot-to-shot drift.
  BackgroundSpec shifted = c.background;
  shifted.level *= 0.9;
  shifted.noise_sd *= 1.5;
  shifted.fringe = {2.0 * c.background.fringe.amplitude, 9.0, 1.2, 1.0};
  const auto lib = make_synthetic_library(c.library_size, c.width, c.height, shifted, 0.8, 303);
  const Dataset tune = build_dataset(lib, c.ranges, 1000, InputMode::ml1, 14, c.pairing);
  const auto test_lib = make_synthetic_library(c.library_size, c.width, c.height, shifted, 0.8, 304);
  const Dataset test = build_dataset(test_lib, c.ranges, kHeldoutShots, InputMode::ml1, 15, c.pairing);
  const double degraded = validation_loss(s.ml1->model, test);
  TrainConfig hp = c.train;
  hp.epochs = 5;
  const auto run = fine_tune(s.ml1->model, tune, hp, "acceptance-shifted");
  const double after = validation_loss(run.model, test);
  const bool pass = degraded >= 2.0 * baseline && after <= 1.5 * baseline;
  return {pass, fmt("baseline %.4f, after shift %.4f (x%.2f, need >= 2), after 5 fine-tune epochs %.4f (x%.2f, need "
                    "<= 1.5)",
                    baseline, degraded, degraded / baseline, after, after / baseline)};
}

Outcome error_envelope(const Scenario& s) {
  const RunConfig& c = s.cfg;
  // Run-to-run spread: one cloud, 50 shots over different beam frames.
  const GaussianParams fixed{0.48 * c.width, 0.53 * c.height, 0.12 * c.width, 0.08 * c.height, 1.5, 0.0, 0.05};
  std::vector<GaussianParams> repeats;
  for (std::size_t k = 0; k < 50; ++k) {
    const std::size_t src = k % s.test_lib.size(), syn = (src + 1) % s.test_lib.size();
    const FrameTriple t(synthesize_atoms(fixed, s.test_lib[syn].bg, s.test_lib[src].dark), s.test_lib[src].bg,
                        s.test_lib[src].dark);
    repeats.push_back(fit_2d(od_from_triple(t, c.t_floor, c.od_floor), c.fit).params);
  }
  const auto sigma = run_to_run_sigma(repeats);
  const BenchmarkReport rep = build_report(s.bench_records, "2dls");
  bool pass = true;
  std::string detail;
  for (const char* id : {"ml1", "ml3"}) {
    const auto& e = *rep.method(id).errors;
    detail += std::string(id) + " mean/sigma:";
    for (std::size_t p = 0; p < GaussianParams::kCount; ++p) {
      const double limit = p == 6 ? 3.0 : 1.0;
      const double ratio = std::abs(e.mean[p]) / sigma[p];
      if (!(ratio <= limit)) pass = false;
      detail += fmt(" %s %.2f", GaussianParams::kNames[p], ratio);
    }
    detail += "; ";
  }
  detail += "need <= 1 (theta <= 3); sigma:";
  for (std::size_t p = 0; p < GaussianParams::kCount; ++p) detail += fmt(" %.3g", sigma[p]);
  return {pass, detail};
}

Outcome determinism_and_formats(const Scenario& s) {
  const RunConfig& c = s.cfg;
  std::vector<std::string> bad;
  // Library and dataset generation.
  const auto lib2 = make_synthetic_library(c.library_size, c.width, c.height, c.background, c.phase_drift, kTestLibrarySeed);
  for (std::size_t i = 0; i < lib2.size(); ++i) {
    if (!(lib2[i].bg == s.test_lib[i].bg) || !(lib2[i].dark == s.test_lib[i].dark)) bad.push_back("library");
  }
  const Dataset bench2 = build_dataset(lib2, c.ranges, c.bench_shots, InputMode::ml1, kBenchShotsSeed, c.pairing);
  if (!(bench2.shots == s.bench_ml1.shots)) bad.push_back("dataset");
  // Training: a short run repeated.
  {
    NetworkSpec spec = spec_for(c, InputMode::ml3);
    spec.conv_channels = {8, 8, 8, 8};
    spec.hidden = 16;
    Dataset small = s.train_ml3;
    small.shots.resize(300);
    TrainConfig hp = c.train;
    hp.epochs = 2;
    const auto a = train(spec, small, hp), b = train(spec, small, hp);
    if (std::memcmp(a.model.weights.data(), b.model.weights.data(), 4 * a.model.weights.size()) != 0) {
      bad.push_back("training");
    }
  }
  // Fits and inference.
  MethodSetup setup;
  setup.fit = c.fit;
  setup.ml1 = &s.ml1->model;
  setup.ml3 = &s.ml3->model;
  std::vector<FrameTriple> some = triples_of(s.bench_ml1);
  some.resize(20);
  for (Method m : kAllMethods) {
    const auto a = run_parallel(m, some, setup, 1), b = run_parallel(m, some, setup, 1);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!(a[i].params == b[i].params) || a[i].chi2 != b[i].chi2) bad.push_back(std::string(to_id(m)));
    }
  }
  // Round trips through files.
  const fs::path dir = fs::temp_directory_path() / ("absorb_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  save_background_library(dir / "lib", s.test_lib);
  const auto loaded = load_background_library(dir / "lib");
  for (std::size_t i = 0; i < loaded.library.size(); ++i) {
    if (!(loaded.library[i].bg == s.test_lib[i].bg) || !(loaded.library[i].dark == s.test_lib[i].dark)) bad.push_back("frames");
  }
  const auto manifest = write_dataset(dir / "bench", s.bench_ml1, loaded, "../lib");
  const Dataset back = load_dataset(dir / "bench" / "manifest.json");
  if (!(back.shots == s.bench_ml1.shots)) bad.push_back("manifest");
  if (!(regenerate_dataset(read_manifest(dir / "bench" / "manifest.json"), loaded).shots == s.bench_ml1.shots)) {
    bad.push_back("regeneration");
  }
  save_model(dir / "ml3.json", s.ml3->model);
  const RegressorModel m3 = load_model(dir / "ml3.json");
  if (m3.weights.size() != s.ml3->model.weights.size() ||
      std::memcmp(m3.weights.data(), s.ml3->model.weights.data(), 4 * m3.weights.size()) != 0 ||
      !(m3.normalizer == s.ml3->model.normalizer) || !(m3.spec == s.ml3->model.spec)) {
    bad.push_back("model");
  }
  fs::remove_all(dir);
  std::sort(bad.begin(), bad.end());
  bad.erase(std::unique(bad.begin(), bad.end()), bad.end());
  std::string detail = "library, dataset, training, 4 fit methods, frame/manifest/model files";
  if (bad.empty()) return {true, detail + " all bit-identical"};
  detail += "; mismatches:";
  for (const auto& b : bad) detail += " " + b;
  return {false, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const bool report_only = argc > 1 && std::strcmp(argv[1], "--report") == 0;
  if (report_only && argc > 2) {
    mirror = std::fopen(argv[2], "w");
    if (!mirror) {
      std::fprintf(stderr, "cannot write %s\n", argv[2]);
      return 1;
    }
  }
  const auto t0 = Clock::now();
  run("round-trip identifiability", round_trip_identifiability);
  run("jacobian correctness", jacobian_correctness);
  run("gradient correctness", gradient_correctness);
  run("chi-square calibration", chi2_calibration);

  Scenario s = make_scenario();
  run("training convergence", [&] { return training_convergence(s); });
  const bool trained = s.ml1 && s.ml3;
  auto needs_models = [&](const char* name, const std::function<Outcome()>& fn) {
    if (!trained) {
      report(name, {false, "skipped: models not trained"});
      return;
    }
    run(name, fn);
  };
  needs_models("accuracy ordering", [&] { return accuracy_ordering(s); });
  const bool benched = !s.bench_records.empty();
  needs_models("timing ordering", [&] {
    return benched ? timing_ordering(s) : Outcome{false, "skipped: benchmark did not run"};
  });
  needs_models("fine-tune recovery", [&] { return fine_tune_recovery(s); });
  needs_models("parameter-error envelope", [&] {
    return benched ? error_envelope(s) : Outcome{false, "skipped: benchmark did not run"};
  });
  needs_models("determinism and formats", [&] { return determinism_and_formats(s); });
  emit(fmt("%d of 10 criteria failed (%.0f s)", failures, since(t0)));
  if (mirror) std::fclose(mirror);
  return report_only ? 0 : failures;
}
