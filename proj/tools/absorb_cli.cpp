// absorb: command-line front end.
//
//   absorb synth-bg  --out lib/
//   absorb simulate  --library lib/ --out train/ [--count N] [--mode ml1|ml3]
//   absorb train     --dataset train/manifest.json --out model/
//   absorb fit       --method 2dls --dataset test/manifest.json --out fits/
//   absorb evaluate  --dataset test/manifest.json --model-ml1 m1/model.json --out eval/
//   absorb bench     --dataset test/manifest.json --model-ml1 ... --model-ml3 ... --out bench/
//   absorb fine-tune --model model/model.json --dataset shifted/manifest.json --out tuned/
//
// Exit status: 0 on success, 2 on usage errors, 1 otherwise with a line
// "error: <code>: <message>" on stderr.

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "absorb/evaluate.hpp"
#include "absorb/io.hpp"
#include "absorb/pipeline.hpp"
#include "absorb/regressor.hpp"
#include "absorb/simulator.hpp"

namespace {

using namespace absorb;
namespace fs = std::filesystem;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out = ".";
  int threads = 0;  // 0: from config
};

RunConfig resolve_config(const Globals& g) {
  RunConfig c = g.config.empty() ? run_config_from_json(json::object()) : load_run_config(g.config);
  if (g.seed) {
    c.seed = *g.seed;
    c.train.seed = *g.seed;
  }
  if (g.threads > 0) c.threads = g.threads;
  c.validate();
  return c;
}

std::string provenance(const RunConfig& c) {
  return "absorb v" + std::to_string(kFormatVersion) + " config " + config_hash(to_json(c));
}

std::string host_name() {
  char buf[256] = {};
  if (gethostname(buf, sizeof buf - 1) != 0) return "unknown";
  return buf;
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

void print_params(const std::string& label, const GaussianParams& p) {
  std::printf("%s", label.c_str());
  for (double v : p.to_array()) std::printf(" %.17g", v);
  std::printf("\n");
}

// ---------------------------------------------------------------------------

int cmd_synth_bg(const Globals& g, std::size_t count) {
  RunConfig c = resolve_config(g);
  if (count > 0) c.library_size = count;
  const auto lib = make_synthetic_library(c.library_size, c.width, c.height, c.background, c.phase_drift, c.seed);
  save_background_library(g.out, lib, provenance(c));
  json j;
  j["format_version"] = kFormatVersion;
  j["kind"] = "background_library";
  j["config_hash"] = config_hash(to_json(c));
  j["config"] = to_json(c);
  write_json(fs::path(g.out) / "library.json", j);
  std::printf("wrote %zu background pairs to %s\n", lib.size(), g.out.c_str());
  return 0;
}

int cmd_simulate(const Globals& g, const std::string& library, std::size_t count, const std::string& mode,
                 const std::string& pairing) {
  RunConfig c = resolve_config(g);
  if (count > 0) c.shots = count;
  if (!mode.empty()) c.mode = input_mode_from(mode);
  if (!pairing.empty()) c.pairing = pairing_from(pairing);
  const auto lib = load_background_library(library);
  const Dataset ds = build_dataset(lib.library, c.ranges, c.shots, c.mode, c.seed, c.pairing);
  fs::create_directories(g.out);
  const std::string rel = fs::relative(fs::absolute(library), fs::absolute(g.out)).generic_string();
  const auto m = write_dataset(g.out, ds, lib, rel.empty() ? std::string(library) : rel);
  std::printf("wrote %zu shots to %s (dataset %s)\n", ds.shots.size(), g.out.c_str(), m.config_hash.c_str());
  return 0;
}

std::string curve_csv(const TrainingRun& run, const RunConfig& c) {
  std::string out = "# " + provenance(c) + "\nepoch,train_loss,val_loss,learning_rate\n";
  char buf[160];
  for (const auto& e : run.curve) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss, e.val_loss, e.learning_rate);
    out += buf;
  }
  return out;
}

int cmd_train(const Globals& g, const std::string& dataset, int epochs) {
  RunConfig c = resolve_config(g);
  if (epochs >= 0) c.train.epochs = epochs;
  const auto manifest = read_manifest(dataset);
  const Dataset ds = load_dataset(dataset);
  NetworkSpec spec = c.network;
  spec.input_channels = channel_count(ds.mode);
  const TrainingRun run = train(spec, ds, c.train, manifest.config_hash);
  save_model(fs::path(g.out) / "model.json", run.model);
  write_file(fs::path(g.out) / "curve.csv", curve_csv(run, c));
  std::printf("best epoch %d, validation loss %.6g\n", run.best_epoch, run.best_val_loss);
  return 0;
}

int cmd_fine_tune(const Globals& g, const std::string& model_path, const std::string& dataset, int epochs) {
  RunConfig c = resolve_config(g);
  c.train.epochs = epochs;
  const auto manifest = read_manifest(dataset);
  const Dataset ds = load_dataset(dataset);
  const RegressorModel model = load_model(model_path);
  const double before = validation_loss(model, ds);
  const TrainingRun run = fine_tune(model, ds, c.train, manifest.config_hash);
  save_model(fs::path(g.out) / "model.json", run.model);
  write_file(fs::path(g.out) / "curve.csv", curve_csv(run, c));
  std::printf("loss on new data before %.6g, best validation after %.6g (epoch %d)\n", before, run.best_val_loss,
              run.best_epoch);
  return 0;
}

struct Models {
  std::optional<RegressorModel> ml1, ml3;

  MethodSetup setup(const RunConfig& c) const {
    MethodSetup s;
    s.fit = c.fit;
    s.od = {c.t_floor, c.od_floor};
    s.ml1 = ml1 ? &*ml1 : nullptr;
    s.ml3 = ml3 ? &*ml3 : nullptr;
    return s;
  }
};

Models load_models(const std::string& ml1, const std::string& ml3) {
  Models m;
  if (!ml1.empty()) m.ml1 = load_model(ml1);
  if (!ml3.empty()) m.ml3 = load_model(ml3);
  return m;
}

std::vector<Method> methods_from(const std::vector<std::string>& ids, const Models& models) {
  std::vector<Method> out;
  if (ids.empty()) {
    out = {Method::ls3x1d, Method::ls2d};
    if (models.ml1) out.push_back(Method::ml1);
    if (models.ml3) out.push_back(Method::ml3);
    return out;
  }
  for (const auto& id : ids) out.push_back(method_from(id));
  return out;
}

int cmd_fit(const Globals& g, const std::string& method, const std::string& dataset, const std::string& atoms,
            const std::string& bg, const std::string& dark, const std::string& model_path) {
  const RunConfig c = resolve_config(g);
  const Method m = method_from(method);
  Models models;
  if (m == Method::ml1) models.ml1 = load_model(model_path);
  if (m == Method::ml3) models.ml3 = load_model(model_path);
  if (m != Method::ml1 && m != Method::ml3 && !model_path.empty()) {
    fail(Errc::config, "--model only applies to ml1 and ml3");
  }
  const MethodSetup setup = models.setup(c);
  if (!atoms.empty()) {
    if (bg.empty() || dark.empty()) fail(Errc::config, "--atoms needs --bg and --dark");
    const FrameTriple t(read_frame(atoms), read_frame(bg), read_frame(dark));
    Fitter fitter(m, setup.fit, setup.od, setup.model_for(m));
    const FitResult r = fitter(t);
    std::printf("# x0 y0 sigma_x sigma_y rho b theta\n");
    print_params(std::string(to_id(m)), r.params);
    return 0;
  }
  if (dataset.empty()) fail(Errc::config, "fit needs --dataset or --atoms/--bg/--dark");
  const Dataset ds = load_dataset(dataset);
  const auto images = triples_of(ds);
  const auto records = run_parallel(m, images, setup, c.threads);
  const fs::path out = fs::path(g.out) / ("fits_" + std::string(to_id(m)) + ".csv");
  write_file(out, records_to_csv(records, provenance(c)));
  std::printf("fitted %zu images with %s -> %s\n", records.size(), std::string(to_id(m)).c_str(),
              out.string().c_str());
  return 0;
}

std::map<std::string, std::string> metadata(const RunConfig& c, const std::string& dataset_hash) {
  return {{"host", host_name()},
          {"dataset_id", dataset_hash},
          {"seed", std::to_string(c.seed)},
          {"config_hash", config_hash(to_json(c))},
          {"format_version", std::to_string(kFormatVersion)},
          {"threads", std::to_string(c.threads)}};
}

void print_summary(const BenchmarkReport& rep) {
  std::printf("%-8s %8s %14s %14s\n", "method", "images", "median_chi2", "median_ms");
  for (const auto& m : rep.methods) {
    std::printf("%-8s %8zu %14.6g %14.4f\n", m.method.c_str(), m.images, m.median_chi2, 1e3 * m.timing.median);
  }
  std::printf("median chi2 spread (max/min): %.6f\n", rep.chi2_spread);
}

int cmd_report(const Globals& g, bool timed, const std::string& dataset, const std::vector<std::string>& ids,
               const std::string& ml1, const std::string& ml3, const std::string& reference) {
  RunConfig c = resolve_config(g);
  if (!reference.empty()) c.reference_method = reference;
  method_from(c.reference_method);
  const auto manifest = read_manifest(dataset);
  Dataset ds = load_dataset(dataset);
  if (timed && c.bench_shots > 0 && ds.shots.size() > c.bench_shots) ds.shots.resize(c.bench_shots);
  const Models models = load_models(ml1, ml3);
  const MethodSetup setup = models.setup(c);
  const auto images = triples_of(ds);
  std::vector<ImageRecord> records;
  for (Method m : methods_from(ids, models)) {
    // Timing runs stay on one thread so methods are compared without contention.
    for (int r = 0; r < std::max(timed ? c.bench_repeats : 1, 1); ++r) {
      auto part = timed ? run_timed(m, images, setup) : run_parallel(m, images, setup, c.threads);
      records.insert(records.end(), part.begin(), part.end());
    }
  }
  // Manifest truth, scored like a method.
  std::vector<ImageRecord> truth;
  for (std::size_t i = 0; i < ds.shots.size(); ++i) {
    FitResult f;
    f.params = canonicalize(ds.shots[i].truth);
    f.converged = true;
    ImageRecord r = make_record(Method::ls2d, i, images[i], f, 0.0, setup.od);
    r.method = "truth";
    truth.push_back(r);
  }
  std::vector<std::string> compared;
  for (const auto& r : records) {
    if (std::find(compared.begin(), compared.end(), r.method) == compared.end() && r.method != "3x1dls") {
      compared.push_back(r.method);
    }
  }
  std::vector<ImageRecord> all = records;
  all.insert(all.end(), truth.begin(), truth.end());
  const BenchmarkReport rep = build_report(all, c.reference_method, metadata(c, manifest.config_hash), compared);
  json j = to_json(rep);
  j["kind"] = timed ? "bench" : "evaluate";
  write_json(fs::path(g.out) / "report.json", j);
  write_file(fs::path(g.out) / "records.csv", records_to_csv(all, provenance(c)));
  print_summary(rep);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"absorb: simulate, fit and benchmark absorption images of Gaussian clouds"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "seed for every random stage (overrides the config)");
  app.add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  app.add_option("--threads", g.threads, "worker threads for untimed per-image work")->check(CLI::PositiveNumber);
  app.fallthrough();

  std::size_t count = 0;
  auto* synth = app.add_subcommand("synth-bg", "write a synthetic background library");
  synth->add_option("--count", count, "number of (bg, dark) pairs");

  std::string library, mode, pairing;
  auto* sim = app.add_subcommand("simulate", "simulate labelled shots over a background library");
  sim->add_option("--library", library, "background library directory")->required()->check(CLI::ExistingDirectory);
  sim->add_option("--count", count, "number of shots");
  sim->add_option("--mode", mode, "ml1 or ml3");
  sim->add_option("--pairing", pairing, "subsequent or same");

  std::string dataset, model, method, atoms, bg, dark, ml1, ml3, reference;
  int epochs = -1;
  std::vector<std::string> methods;
  auto* tr = app.add_subcommand("train", "train a regressor on a dataset");
  tr->add_option("--dataset", dataset, "dataset manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--epochs", epochs, "override the configured epoch count");

  auto* fit = app.add_subcommand("fit", "fit images with one method");
  fit->add_option("--method", method, "3x1dls, 2dls, ml1 or ml3")->required();
  fit->add_option("--dataset", dataset, "dataset manifest")->check(CLI::ExistingFile);
  fit->add_option("--atoms", atoms, "atoms frame")->check(CLI::ExistingFile);
  fit->add_option("--bg", bg, "background frame")->check(CLI::ExistingFile);
  fit->add_option("--dark", dark, "dark frame")->check(CLI::ExistingFile);
  fit->add_option("--model", model, "model file for ml1/ml3")->check(CLI::ExistingFile);

  auto add_report_options = [&](CLI::App* sub) {
    sub->add_option("--dataset", dataset, "dataset manifest")->required()->check(CLI::ExistingFile);
    sub->add_option("--methods", methods, "methods to run (default: all available)")->delimiter(',');
    sub->add_option("--model-ml1", ml1, "ML-1 model file")->check(CLI::ExistingFile);
    sub->add_option("--model-ml3", ml3, "ML-3 model file")->check(CLI::ExistingFile);
    sub->add_option("--reference", reference, "method treated as truth for parameter errors");
  };
  auto* ev = app.add_subcommand("evaluate", "chi2 and parameter-error statistics");
  add_report_options(ev);
  auto* bench = app.add_subcommand("bench", "timed four-method comparison");
  add_report_options(bench);

  auto* ft = app.add_subcommand("fine-tune", "continue training a model on new data");
  ft->add_option("--model", model, "model file")->required()->check(CLI::ExistingFile);
  ft->add_option("--dataset", dataset, "dataset manifest")->required()->check(CLI::ExistingFile);
  ft->add_option("--epochs", epochs, "fine-tune epochs")->default_val(5);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*synth) return cmd_synth_bg(g, count);
    if (*sim) return cmd_simulate(g, library, count, mode, pairing);
    if (*tr) return cmd_train(g, dataset, epochs);
    if (*fit) return cmd_fit(g, method, dataset, atoms, bg, dark, model);
    if (*ev) return cmd_report(g, false, dataset, methods, ml1, ml3, reference);
    if (*bench) return cmd_report(g, true, dataset, methods, ml1, ml3, reference);
    if (*ft) return cmd_fine_tune(g, model, dataset, epochs);
  } catch (const absorb::Error& e) {
    std::cerr << "error: " << absorb::to_string(e.code()) << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
