#pragma once

// Running fit methods over datasets: per-image records with chi2 and
// single-thread timings, plus a small parallel map for untimed work.

#include <atomic>
#include <chrono>
#include <exception>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "absorb/evaluate.hpp"
#include "absorb/imaging.hpp"
#include "absorb/ls_fit.hpp"
#include "absorb/regressor.hpp"
#include "absorb/simulator.hpp"

namespace absorb {

enum class Method { ls3x1d, ls2d, ml1, ml3 };

inline std::string_view to_id(Method m) {
  switch (m) {
    case Method::ls3x1d: return "3x1dls";
    case Method::ls2d: return "2dls";
    case Method::ml1: return "ml1";
    case Method::ml3: return "ml3";
  }
  return "?";
}

inline Method method_from(std::string_view s) {
  if (s == "3x1dls") return Method::ls3x1d;
  if (s == "2dls") return Method::ls2d;
  if (s == "ml1") return Method::ml1;
  if (s == "ml3") return Method::ml3;
  fail(Errc::config, "unknown method '" + std::string(s) + "' (expected 3x1dls, 2dls, ml1 or ml3)");
}

inline constexpr Method kAllMethods[] = {Method::ls3x1d, Method::ls2d, Method::ml1, Method::ml3};

struct OdConfig {
  double t_floor = kDefaultTFloor;
  double floor = kDefaultTransmissionFloor;
};

/// A fitter bound to its configuration: FrameTriple in, parameters out.
/// ML fitters own a Regressor and so are not shareable across threads.
class Fitter {
 public:
  Fitter(Method m, const FitConfig& fit, const OdConfig& od, const RegressorModel* model = nullptr)
      : method_(m), fit_(fit), od_(od) {
    if (m == Method::ml1 || m == Method::ml3) {
      if (!model) fail(Errc::config, std::string(to_id(m)) + " needs a trained model");
      const int want = m == Method::ml1 ? 1 : 3;
      if (model->spec.input_channels != want) {
        fail(Errc::shape, std::string(to_id(m)) + " needs a " + std::to_string(want) + "-channel model");
      }
      regressor_ = std::make_unique<Regressor>(*model);
    }
  }

  Method method() const noexcept { return method_; }

  FitResult operator()(const FrameTriple& t) {
    switch (method_) {
      case Method::ls3x1d: return fit_3x1d(od_from_triple(t, od_.t_floor, od_.floor), fit_);
      case Method::ls2d: return fit_2d(od_from_triple(t, od_.t_floor, od_.floor), fit_);
      case Method::ml1:
      case Method::ml3: break;
    }
    FitResult r;
    r.params = regressor_->predict(t);
    r.converged = true;
    return r;
  }

 private:
  Method method_;
  FitConfig fit_;
  OdConfig od_;
  std::unique_ptr<Regressor> regressor_;
};

/// Calls fn(i) for i in [0, n) on `threads` workers. The first exception is
/// rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  const int workers = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(threads), n));
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i, w);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// chi2 of `p` against the OD of `t`.
inline ChiSquareReport chi_square_of(const FrameTriple& t, const GaussianParams& p, const OdConfig& od,
                                     std::string method = {}) {
  return chi_square(od_from_triple(t, od.t_floor, od.floor), p, std::move(method));
}

inline ImageRecord make_record(Method m, std::size_t image, const FrameTriple& t, const FitResult& fit,
                               double seconds, const OdConfig& od) {
  ImageRecord r;
  r.method = std::string(to_id(m));
  r.image = image;
  r.params = fit.params;
  r.converged = fit.converged;
  r.seconds = seconds;
  const auto c = chi_square_of(t, fit.params, od);
  r.chi2 = c.chi2;
  r.dof = c.dof;
  r.noise_variance = c.noise_variance;
  r.degenerate = c.degenerate;
  return r;
}

struct MethodSetup {
  FitConfig fit;
  OdConfig od;
  const RegressorModel* ml1 = nullptr;
  const RegressorModel* ml3 = nullptr;

  const RegressorModel* model_for(Method m) const { return m == Method::ml1 ? ml1 : m == Method::ml3 ? ml3 : nullptr; }
};

/// Fits every image, timing each call on the calling thread after
/// kTimingWarmup untimed fits. Timings cover the whole FrameTriple -> params
/// path. chi2 is computed afterwards, outside the timed region.
inline std::vector<ImageRecord> run_timed(Method m, std::span<const FrameTriple> images, const MethodSetup& setup) {
  if (images.empty()) fail(Errc::degenerate_input, "no images to fit");
  Fitter fitter(m, setup.fit, setup.od, setup.model_for(m));
  for (int i = 0; i < kTimingWarmup; ++i) detail::keep_alive(fitter(images[static_cast<std::size_t>(i) % images.size()]));
  std::vector<FitResult> fits(images.size());
  std::vector<double> seconds(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    fits[i] = fitter(images[i]);
    const auto stop = std::chrono::steady_clock::now();
    seconds[i] = std::chrono::duration<double>(stop - start).count();
  }
  std::vector<ImageRecord> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) out.push_back(make_record(m, i, images[i], fits[i], seconds[i], setup.od));
  return out;
}

/// Fits every image on `threads` workers; record seconds are per-call wall
/// times and are only comparable across methods when threads == 1.
inline std::vector<ImageRecord> run_parallel(Method m, std::span<const FrameTriple> images, const MethodSetup& setup,
                                             int threads) {
  std::vector<std::unique_ptr<Fitter>> fitters;
  for (int w = 0; w < std::max(threads, 1); ++w) {
    fitters.push_back(std::make_unique<Fitter>(m, setup.fit, setup.od, setup.model_for(m)));
  }
  std::vector<ImageRecord> out(images.size());
  parallel_for(images.size(), threads, [&](std::size_t i, int w) {
    const auto start = std::chrono::steady_clock::now();
    const FitResult fit = (*fitters[static_cast<std::size_t>(w)])(images[i]);
    const auto stop = std::chrono::steady_clock::now();
    out[i] = make_record(m, i, images[i], fit, std::chrono::duration<double>(stop - start).count(), setup.od);
  });
  return out;
}

inline std::vector<FrameTriple> triples_of(const Dataset& ds) {
  std::vector<FrameTriple> out;
  out.reserve(ds.shots.size());
  for (const auto& s : ds.shots) out.push_back(s.triple);
  return out;
}

}  // namespace absorb
