#pragma once

// Figures of merit: chi-square with an estimated noise level, parameter
// error statistics against a reference method, fit timing, and the
// benchmark report.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "absorb/error.hpp"
#include "absorb/imaging.hpp"

namespace absorb {

// Median of a chi-square variable with one degree of freedom.
inline constexpr double kChi2MedianOneDof = 0.45493642311957283;
// d = r - (mean of 4 neighbours) has variance (1 + 4/16) sigma^2 for i.i.d. r.
inline constexpr double kNeighborDiffVariance = 1.25;
inline constexpr double kVarianceFloor = 1e-300;

namespace detail {

inline double median_in_place(std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

}  // namespace detail

/// Linear-interpolated quantile (q in [0, 1]) of an unsorted sample.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  if (i + 1 >= v.size()) return v.back();
  return v[i] + (pos - static_cast<double>(i)) * (v[i + 1] - v[i]);
}

inline double median(std::vector<double> v) { return detail::median_in_place(v); }

struct NoiseEstimate {
  double variance = 0.0;
  std::size_t samples = 0;
  bool degenerate = false;
};

/// Robust per-image noise variance of a residual map. Uses valid pixels whose
/// four neighbours are valid: sigma^2 = median(d^2) / (1.25 * 0.4549), with d
/// the pixel minus the mean of its neighbours. Smooth structure cancels in d.
inline NoiseEstimate estimate_noise_variance(const ValueMap& r) {
  std::vector<double> d2;
  d2.reserve(r.size());
  for (int y = 1; y + 1 < r.height; ++y) {
    for (int x = 1; x + 1 < r.width; ++x) {
      if (!r.valid(x, y) || !r.valid(x - 1, y) || !r.valid(x + 1, y) || !r.valid(x, y - 1) || !r.valid(x, y + 1)) {
        continue;
      }
      const double d = r(x, y) - 0.25 * (r(x - 1, y) + r(x + 1, y) + r(x, y - 1) + r(x, y + 1));
      d2.push_back(d * d);
    }
  }
  NoiseEstimate e;
  e.samples = d2.size();
  if (d2.empty()) {
    e.degenerate = true;
    e.variance = kVarianceFloor;
    return e;
  }
  e.variance = detail::median_in_place(d2) / (kNeighborDiffVariance * kChi2MedianOneDof);
  if (!(e.variance > kVarianceFloor) || !std::isfinite(e.variance)) {
    e.degenerate = true;
    e.variance = kVarianceFloor;
  }
  return e;
}

struct ChiSquareReport {
  double chi2 = 0.0;
  long long dof = 0;
  double noise_variance = 0.0;
  bool degenerate = false;  // noise estimate hit the floor
  std::string method;
};

inline ChiSquareReport chi_square(const ODMap& od, const GaussianParams& p, std::string method = {}) {
  ValueMap r(od.width, od.height, 0.0);
  r.state = od.state;
  const GaussianKernel k(p);
  double ss = 0.0;
  long long n = 0;
  for (int y = 0; y < od.height; ++y) {
    for (int x = 0; x < od.width; ++x) {
      const std::size_t i = od.index(x, y);
      if (!od.valid(i)) continue;
      r.values[i] = od.values[i] - k.value(x, y);
      ss += r.values[i] * r.values[i];
      ++n;
    }
  }
  if (n == 0) fail(Errc::degenerate_input, "OD map has no valid pixels");
  if (n <= static_cast<long long>(GaussianParams::kCount)) fail(Errc::degenerate_input, "fewer valid pixels than parameters");
  const NoiseEstimate ne = estimate_noise_variance(r);
  ChiSquareReport rep;
  rep.dof = n - static_cast<long long>(GaussianParams::kCount);
  rep.noise_variance = ne.variance;
  rep.degenerate = ne.degenerate;
  rep.chi2 = ss == 0.0 ? 0.0 : ss / ne.variance;
  rep.method = std::move(method);
  return rep;
}

// ---------------------------------------------------------------------------
// Parameter errors

struct Histogram {
  double lo = 0.0, hi = 0.0;
  std::vector<std::size_t> counts;

  double bin_width() const { return counts.empty() ? 0.0 : (hi - lo) / static_cast<double>(counts.size()); }
  std::size_t total() const {
    std::size_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
};

/// Equal-width histogram over [min, max] of the data. A constant sample gets
/// a unit-wide range centred on its value.
inline Histogram make_histogram(std::span<const double> v, std::size_t bins = 40) {
  Histogram h;
  if (bins == 0) fail(Errc::domain, "histogram needs at least one bin");
  h.counts.assign(bins, 0);
  if (v.empty()) return h;
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  h.lo = *mn;
  h.hi = *mx;
  if (!(h.hi > h.lo)) {
    h.lo -= 0.5;
    h.hi += 0.5;
  }
  const double w = h.bin_width();
  for (double x : v) {
    auto b = static_cast<std::size_t>((x - h.lo) / w);
    h.counts[std::min(b, bins - 1)] += 1;
  }
  return h;
}

/// Wraps an angle difference into (-pi/2, pi/2].
inline double wrap_half_turn(double d) {
  d = std::remainder(d, std::numbers::pi);  // [-pi/2, pi/2]
  if (d <= -std::numbers::pi / 2) d += std::numbers::pi;
  return d;
}

/// Signed error of `m` against `ref`, both canonicalized first. When the
/// angle difference exceeds pi/4 the other labelling of the axes of `m`
/// (theta + pi/2 with widths swapped) is closer and is used instead.
inline std::array<double, GaussianParams::kCount> param_error(const GaussianParams& m, const GaussianParams& ref) {
  GaussianParams a = canonicalize(m);
  const GaussianParams t = canonicalize(ref);
  double dtheta = wrap_half_turn(a.theta - t.theta);
  if (std::abs(dtheta) > std::numbers::pi / 4) {
    std::swap(a.sigma_x, a.sigma_y);
    dtheta = wrap_half_turn(a.theta + std::numbers::pi / 2 - t.theta);
  }
  return {a.x0 - t.x0, a.y0 - t.y0, a.sigma_x - t.sigma_x, a.sigma_y - t.sigma_y,
          a.rho - t.rho, a.b - t.b,   dtheta};
}

struct ParamErrorStats {
  std::array<std::vector<double>, GaussianParams::kCount> errors;
  std::array<double, GaussianParams::kCount> mean{};
  std::array<double, GaussianParams::kCount> stdev{};
  std::array<Histogram, GaussianParams::kCount> histograms;
};

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1); 0 for a single value.
inline double std_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline ParamErrorStats param_error_stats(std::span<const GaussianParams> results,
                                         std::span<const GaussianParams> truth, std::size_t bins = 40) {
  if (results.size() != truth.size()) fail(Errc::shape, "result and reference sets differ in size");
  ParamErrorStats s;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto e = param_error(results[i], truth[i]);
    for (std::size_t j = 0; j < e.size(); ++j) s.errors[j].push_back(e[j]);
  }
  for (std::size_t j = 0; j < s.errors.size(); ++j) {
    s.mean[j] = mean_of(s.errors[j]);
    s.stdev[j] = std_of(s.errors[j]);
    s.histograms[j] = make_histogram(s.errors[j], bins);
  }
  return s;
}

/// Standard deviation after dropping values outside [Q1 - k IQR, Q3 + k IQR].
inline double robust_std(std::span<const double> v, double k = 5.0) {
  if (v.size() < 2) return 0.0;
  const std::vector<double> all(v.begin(), v.end());
  const double q1 = quantile(all, 0.25), q3 = quantile(all, 0.75), iqr = q3 - q1;
  std::vector<double> kept;
  for (double x : v) {
    if (x >= q1 - k * iqr && x <= q3 + k * iqr) kept.push_back(x);
  }
  return std_of(kept);
}

/// Per-parameter run-to-run spread of repeated fits of one truth, outliers
/// beyond 5 IQR removed. Angles are taken relative to the first fit.
inline std::array<double, GaussianParams::kCount> run_to_run_sigma(std::span<const GaussianParams> fits) {
  std::array<double, GaussianParams::kCount> out{};
  if (fits.empty()) return out;
  std::array<std::vector<double>, GaussianParams::kCount> cols;
  for (const auto& f : fits) {
    const auto e = param_error(f, fits.front());
    for (std::size_t j = 0; j < e.size(); ++j) cols[j].push_back(e[j]);
  }
  for (std::size_t j = 0; j < cols.size(); ++j) out[j] = robust_std(cols[j]);
  return out;
}

// ---------------------------------------------------------------------------
// Timing

struct TimingStats {
  std::string method;
  std::vector<double> seconds;
  double median = 0.0, p10 = 0.0, p90 = 0.0, min = 0.0, max = 0.0;
  std::string error;  // set when nothing was timed

  void summarize() {
    if (seconds.empty()) {
      error = "no timed repetitions";
      return;
    }
    median = absorb::median(seconds);
    p10 = quantile(seconds, 0.1);
    p90 = quantile(seconds, 0.9);
    min = *std::min_element(seconds.begin(), seconds.end());
    max = *std::max_element(seconds.begin(), seconds.end());
  }
};

inline constexpr int kTimingWarmup = 3;

namespace detail {

template <class T>
inline void keep_alive(const T& v) {
#if defined(__GNUC__)
  asm volatile("" : : "r"(&v) : "memory");
#else
  static volatile const void* sink;
  sink = &v;
#endif
}

}  // namespace detail

/// Times `fn` on every item, `repeats` passes, on the calling thread, after
/// kTimingWarmup untimed calls. Returned results of `fn` are discarded.
template <class Item, class Fn>
TimingStats time_method(std::string method, std::span<const Item> items, Fn&& fn, int repeats) {
  if (items.empty()) fail(Errc::degenerate_input, "timing needs a nonempty dataset");
  TimingStats t;
  t.method = std::move(method);
  for (int i = 0; i < kTimingWarmup; ++i) detail::keep_alive(fn(items[static_cast<std::size_t>(i) % items.size()]));
  for (int r = 0; r < repeats; ++r) {
    for (const Item& item : items) {
      const auto start = std::chrono::steady_clock::now();
      const auto out = fn(item);
      const auto stop = std::chrono::steady_clock::now();
      detail::keep_alive(out);
      t.seconds.push_back(std::chrono::duration<double>(stop - start).count());
    }
  }
  t.summarize();
  return t;
}

// ---------------------------------------------------------------------------
// Report

/// One fit of one image by one method; the unit the report is built from.
struct ImageRecord {
  std::string method;
  std::size_t image = 0;
  GaussianParams params;
  double chi2 = 0.0;
  long long dof = 0;
  double noise_variance = 0.0;
  bool degenerate = false;
  double seconds = 0.0;
  bool converged = true;

  friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct MethodSummary {
  std::string method;
  std::size_t images = 0;
  double median_chi2 = 0.0;
  Histogram chi2_histogram;
  TimingStats timing;
  std::optional<ParamErrorStats> errors;  // against the reference method
};

struct BenchmarkReport {
  static constexpr int kVersion = 1;
  std::string reference_method;
  std::map<std::string, std::string> metadata;
  std::vector<MethodSummary> methods;
  double chi2_spread = 0.0;  // max/min of median chi2 over the compared methods

  const MethodSummary& method(const std::string& id) const {
    for (const auto& m : methods) {
      if (m.method == id) return m;
    }
    fail(Errc::not_found, "method " + id + " not in report");
  }
};

/// Aggregates per-image records. Errors are computed against
/// `reference_method` on matching image indices; `spread_methods` (default:
/// all) enter the chi2 max/min ratio.
inline BenchmarkReport build_report(std::span<const ImageRecord> records, const std::string& reference_method,
                                    std::map<std::string, std::string> metadata = {},
                                    std::vector<std::string> spread_methods = {}) {
  if (records.empty()) fail(Errc::degenerate_input, "report needs at least one record");
  std::vector<std::string> order;
  std::map<std::string, std::vector<const ImageRecord*>> by_method;
  for (const auto& r : records) {
    if (!by_method.count(r.method)) order.push_back(r.method);
    by_method[r.method].push_back(&r);
  }
  std::map<std::size_t, GaussianParams> ref;
  if (by_method.count(reference_method)) {
    for (const auto* r : by_method[reference_method]) ref[r->image] = r->params;
  }
  BenchmarkReport rep;
  rep.reference_method = reference_method;
  rep.metadata = std::move(metadata);
  for (const auto& id : order) {
    const auto& rs = by_method[id];
    MethodSummary m;
    m.method = id;
    m.images = rs.size();
    std::vector<double> chi2;
    m.timing.method = id;
    for (const auto* r : rs) {
      chi2.push_back(r->chi2);
      m.timing.seconds.push_back(r->seconds);
    }
    m.median_chi2 = median(chi2);
    m.chi2_histogram = make_histogram(chi2);
    m.timing.summarize();
    if (!ref.empty()) {
      std::vector<GaussianParams> got, want;
      for (const auto* r : rs) {
        const auto it = ref.find(r->image);
        if (it == ref.end()) continue;
        got.push_back(r->params);
        want.push_back(it->second);
      }
      if (!got.empty()) m.errors = param_error_stats(got, want);
    }
    rep.methods.push_back(std::move(m));
  }
  if (spread_methods.empty()) spread_methods = order;
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& id : spread_methods) {
    const double c = rep.method(id).median_chi2;
    lo = std::min(lo, c);
    hi = std::max(hi, c);
  }
  rep.chi2_spread = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  return rep;
}

inline nlohmann::ordered_json to_json(const Histogram& h) {
  return {{"lo", h.lo}, {"hi", h.hi}, {"counts", h.counts}};
}

inline nlohmann::ordered_json to_json(const BenchmarkReport& rep) {
  using nlohmann::ordered_json;
  ordered_json j;
  j["format_version"] = BenchmarkReport::kVersion;
  j["reference_method"] = rep.reference_method;
  j["metadata"] = ordered_json(rep.metadata);
  j["chi2_median_spread"] = rep.chi2_spread;
  ordered_json table = ordered_json::array();
  for (const auto& m : rep.methods) {
    ordered_json mj;
    mj["method"] = m.method;
    mj["images"] = m.images;
    mj["median_chi2"] = m.median_chi2;
    mj["chi2_histogram"] = to_json(m.chi2_histogram);
    mj["time_s"] = {{"median", m.timing.median}, {"p10", m.timing.p10}, {"p90", m.timing.p90},
                    {"min", m.timing.min},       {"max", m.timing.max}};
    if (m.errors) {
      ordered_json ej;
      for (std::size_t p = 0; p < GaussianParams::kCount; ++p) {
        ej[GaussianParams::kNames[p]] = {{"mean", m.errors->mean[p]},
                                         {"std", m.errors->stdev[p]},
                                         {"histogram", to_json(m.errors->histograms[p])}};
      }
      mj["errors_vs_reference"] = ej;
    }
    table.push_back(mj);
  }
  j["methods"] = table;
  return j;
}

inline constexpr const char* kRecordCsvHeader =
    "method,image,x0,y0,sigma_x,sigma_y,rho,b,theta,chi2,dof,noise_variance,degenerate,seconds,converged";

/// One row per image per method. Reals use 17 significant digits so a
/// reload reproduces every value exactly. A nonempty `comment` becomes a
/// leading '#' line.
inline std::string records_to_csv(std::span<const ImageRecord> records, std::string_view comment = {}) {
  std::string out;
  if (!comment.empty()) {
    if (comment.find('\n') != std::string_view::npos) fail(Errc::domain, "table comment must be one line");
    out += "# ";
    out += comment;
    out += '\n';
  }
  out += std::string(kRecordCsvHeader) + "\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out += buf;
    out += ',';
  };
  for (const auto& r : records) {
    if (r.method.find_first_of(",\n\"") != std::string::npos) fail(Errc::domain, "method id may not contain , or quotes");
    out += r.method + ',' + std::to_string(r.image) + ',';
    for (double v : r.params.to_array()) num(v);
    num(r.chi2);
    out += std::to_string(r.dof) + ',';
    num(r.noise_variance);
    out += r.degenerate ? "1," : "0,";
    num(r.seconds);
    out += r.converged ? "1\n" : "0\n";
  }
  return out;
}

inline std::vector<ImageRecord> records_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line) && !line.empty() && line[0] == '#') {
  }
  if (!in || line != kRecordCsvHeader) fail(Errc::malformed_header, "unexpected record table header");
  std::vector<ImageRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      const std::size_t c = line.find(',', pos);
      f.push_back(line.substr(pos, c - pos));
      if (c == std::string::npos) break;
      pos = c + 1;
    }
    if (f.size() != 15) fail(Errc::structural, "record line " + std::to_string(lineno) + " has wrong field count");
    try {
      ImageRecord r;
      r.method = f[0];
      r.image = std::stoull(f[1]);
      std::array<double, GaussianParams::kCount> a{};
      for (std::size_t j = 0; j < a.size(); ++j) a[j] = std::stod(f[2 + j]);
      r.params = GaussianParams::from_array(a);
      r.chi2 = std::stod(f[9]);
      r.dof = std::stoll(f[10]);
      r.noise_variance = std::stod(f[11]);
      r.degenerate = f[12] == "1";
      r.seconds = std::stod(f[13]);
      r.converged = f[14] == "1";
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      fail(Errc::structural, "record line " + std::to_string(lineno) + " has an unparsable field");
    }
  }
  return out;
}

}  // namespace absorb
