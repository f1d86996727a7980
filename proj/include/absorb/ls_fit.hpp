#pragma once

// Least-squares cloud fitters:
//  - fit_3x1d: alternating 1-D Gaussian fits on the row and column through
//    the current center estimate. Rotation is not modeled (theta = 0).
//  - fit_2d: full seven-parameter rotated Gaussian fit, initialized from
//    slice fits on unrotated and rotated axes plus image moments.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "absorb/error.hpp"
#include "absorb/imaging.hpp"
#include "absorb/lm.hpp"

namespace absorb {

struct FitResult {
  GaussianParams params;  // canonical
  bool converged = false;
  int iterations = 0;
  double residual_ss = 0.0;  // sum of squared OD residuals over valid pixels
  double elapsed = 0.0;      // seconds, monotonic clock
};

struct Gaussian1DFit {
  double center = 0.0;
  double sigma = 0.0;
  double amplitude = 0.0;
  double offset = 0.0;
  bool converged = false;
  bool degenerate = false;  // no peak above the median level
  int iterations = 0;
  double residual_ss = 0.0;
};

inline constexpr double kFwhmPerSigma = 2.3548200450309493;  // 2 sqrt(2 ln 2)
inline constexpr std::size_t kMinProfileSamples = 8;

namespace detail {

inline double median_of(std::vector<double> v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  }
  return m;
}

}  // namespace detail

/// f(t) = offset + amplitude exp(-(t - center)^2 / (2 sigma^2)) over sample
/// positions t = 0, 1, ..., n-1. `valid[i] == 0` excludes a sample.
/// Starts from the median level, the peak sample and the half-maximum width.
inline Gaussian1DFit fit_1d_gaussian(std::span<const double> samples, std::span<const std::uint8_t> valid,
                                     const FitConfig& cfg) {
  if (samples.size() != valid.size()) fail(Errc::structural, "profile and mask lengths differ");
  std::vector<double> t, y;
  t.reserve(samples.size());
  y.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (valid[i] && std::isfinite(samples[i])) {
      t.push_back(static_cast<double>(i));
      y.push_back(samples[i]);
    }
  }
  if (y.size() < kMinProfileSamples) {
    fail(Errc::degenerate_input, "1-D fit needs at least 8 valid samples, got " + std::to_string(y.size()));
  }

  Gaussian1DFit out;
  const double base = detail::median_of(y);
  const auto peak_it = std::max_element(y.begin(), y.end());
  const std::size_t peak = static_cast<std::size_t>(peak_it - y.begin());
  const double amp = *peak_it - base;
  out.offset = base;
  out.center = t[peak];
  out.amplitude = amp;
  out.sigma = 1.0;
  if (!(amp > 0.0)) {
    out.degenerate = true;
    out.amplitude = 0.0;
    for (double v : y) out.residual_ss += (v - base) * (v - base);
    return out;
  }

  // Width of the contiguous region above half maximum around the peak.
  const double half = base + 0.5 * amp;
  std::size_t lo = peak, hi = peak;
  while (lo > 0 && y[lo - 1] > half) --lo;
  while (hi + 1 < y.size() && y[hi + 1] > half) ++hi;
  const double fwhm = std::max(t[hi] - t[lo] + 1.0, 1.0);
  out.sigma = std::max(fwhm / kFwhmPerSigma, 0.5);

  const Eigen::Index n = static_cast<Eigen::Index>(y.size());
  auto model = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd* jac) {
    r.resize(n);
    if (jac) jac->resize(n, 4);
    const double c = p[0], s = p[1], a = p[2], o = p[3];
    const double inv_s2 = 1.0 / (s * s);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = t[static_cast<std::size_t>(i)] - c;
      const double e = std::exp(-0.5 * d * d * inv_s2);
      r[i] = o + a * e - y[static_cast<std::size_t>(i)];
      if (jac) {
        (*jac)(i, 0) = a * e * d * inv_s2;
        (*jac)(i, 1) = a * e * d * d * inv_s2 / s;
        (*jac)(i, 2) = e;
        (*jac)(i, 3) = 1.0;
      }
    }
  };

  Eigen::VectorXd p0(4);
  p0 << out.center, out.sigma, out.amplitude, out.offset;
  const LmResult lm = lm_minimize(model, p0, cfg);
  out.center = lm.x[0];
  out.sigma = std::abs(lm.x[1]);
  out.amplitude = lm.x[2];
  out.offset = lm.x[3];
  out.iterations = lm.iterations;
  out.residual_ss = lm.cost;
  out.converged = lm.converged && lm.x.allFinite();
  if (!(out.amplitude > 0.0) || !(out.sigma > 0.0)) {
    out.degenerate = true;
    out.converged = false;
  }
  return out;
}

/// Sum of squared residuals of `p` against the valid pixels of `od`.
inline double residual_sum_of_squares(const ODMap& od, const GaussianParams& p) {
  const GaussianKernel k(p);
  double ss = 0.0;
  for (int y = 0; y < od.height; ++y) {
    for (int x = 0; x < od.width; ++x) {
      const std::size_t i = od.index(x, y);
      if (!od.valid(i)) continue;
      const double r = od.values[i] - k.value(x, y);
      ss += r * r;
    }
  }
  return ss;
}

/// Mean over valid pixels in a (2 half + 1)^2 box; invalid where the box is empty.
inline ValueMap box_smooth(const ODMap& od, int half) {
  const int w = od.width, h = od.height;
  // Summed-area tables of values and valid counts.
  std::vector<double> sum(static_cast<std::size_t>(w + 1) * (h + 1), 0.0);
  std::vector<double> cnt(sum.size(), 0.0);
  auto at = [w](int x, int y) { return static_cast<std::size_t>(y) * (w + 1) + x; };
  for (int y = 0; y < h; ++y) {
    double row_sum = 0.0, row_cnt = 0.0;
    for (int x = 0; x < w; ++x) {
      const std::size_t i = od.index(x, y);
      if (od.valid(i)) {
        row_sum += od.values[i];
        row_cnt += 1.0;
      }
      sum[at(x + 1, y + 1)] = sum[at(x + 1, y)] + row_sum;
      cnt[at(x + 1, y + 1)] = cnt[at(x + 1, y)] + row_cnt;
    }
  }
  ValueMap out(w, h, 0.0, PixelState::invalid);
  for (int y = 0; y < h; ++y) {
    const int y0 = std::max(y - half, 0), y1 = std::min(y + half + 1, h);
    for (int x = 0; x < w; ++x) {
      const int x0 = std::max(x - half, 0), x1 = std::min(x + half + 1, w);
      const double c = cnt[at(x1, y1)] - cnt[at(x0, y1)] - cnt[at(x1, y0)] + cnt[at(x0, y0)];
      if (c <= 0.0) continue;
      const double s = sum[at(x1, y1)] - sum[at(x0, y1)] - sum[at(x1, y0)] + sum[at(x0, y0)];
      out(x, y) = s / c;
      out.state[out.index(x, y)] = PixelState::valid;
    }
  }
  return out;
}

namespace detail {

struct Peak {
  int x = 0;
  int y = 0;
};

inline Peak smoothed_peak(const ODMap& od) {
  const ValueMap smooth = box_smooth(od, 2);
  Peak best;
  double best_v = -std::numeric_limits<double>::infinity();
  for (int y = 0; y < od.height; ++y) {
    for (int x = 0; x < od.width; ++x) {
      const std::size_t i = smooth.index(x, y);
      if (smooth.valid(i) && smooth.values[i] > best_v) {
        best_v = smooth.values[i];
        best = {x, y};
      }
    }
  }
  if (!std::isfinite(best_v)) fail(Errc::degenerate_input, "OD map has no valid pixels");
  return best;
}

inline void row_profile(const ODMap& od, int row, std::vector<double>& v, std::vector<std::uint8_t>& m) {
  v.resize(static_cast<std::size_t>(od.width));
  m.resize(v.size());
  for (int x = 0; x < od.width; ++x) {
    const std::size_t i = od.index(x, row);
    v[static_cast<std::size_t>(x)] = od.values[i];
    m[static_cast<std::size_t>(x)] = od.valid(i) ? 1 : 0;
  }
}

inline void column_profile(const ODMap& od, int col, std::vector<double>& v, std::vector<std::uint8_t>& m) {
  v.resize(static_cast<std::size_t>(od.height));
  m.resize(v.size());
  for (int y = 0; y < od.height; ++y) {
    const std::size_t i = od.index(col, y);
    v[static_cast<std::size_t>(y)] = od.values[i];
    m[static_cast<std::size_t>(y)] = od.valid(i) ? 1 : 0;
  }
}

inline int clamp_index(double v, int n) {
  if (!std::isfinite(v)) return n / 2;
  return std::clamp(static_cast<int>(std::lround(v)), 0, n - 1);
}

inline double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Bilinear sample; false when any contributing pixel is invalid or outside.
inline bool bilinear(const ODMap& od, double x, double y, double& out) {
  const double fx = std::floor(x), fy = std::floor(y);
  const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
  if (ix < 0 || iy < 0 || ix + 1 >= od.width || iy + 1 >= od.height) return false;
  const double ax = x - fx, ay = y - fy;
  const std::size_t i00 = od.index(ix, iy), i10 = od.index(ix + 1, iy);
  const std::size_t i01 = od.index(ix, iy + 1), i11 = od.index(ix + 1, iy + 1);
  if (!od.valid(i00) || !od.valid(i10) || !od.valid(i01) || !od.valid(i11)) return false;
  out = (1 - ay) * ((1 - ax) * od.values[i00] + ax * od.values[i10]) +
        ay * ((1 - ax) * od.values[i01] + ax * od.values[i11]);
  return true;
}

// Profile along direction (dx, dy) through (cx, cy). Sample i sits at
// parameter t = i - origin.
inline int line_profile(const ODMap& od, double cx, double cy, double dx, double dy, std::vector<double>& v,
                        std::vector<std::uint8_t>& m) {
  const int reach = static_cast<int>(std::ceil(std::hypot(od.width, od.height)));
  v.assign(static_cast<std::size_t>(2 * reach + 1), 0.0);
  m.assign(v.size(), 0);
  for (int i = 0; i <= 2 * reach; ++i) {
    const double t = i - reach;
    double s;
    if (bilinear(od, cx + t * dx, cy + t * dy, s)) {
      v[static_cast<std::size_t>(i)] = s;
      m[static_cast<std::size_t>(i)] = 1;
    }
  }
  return reach;
}

}  // namespace detail

/// Alternating row/column slice fit. Each round fits the row through the
/// current y0 (updating x0, sigma_x) and then the column through the new x0
/// (updating y0, sigma_y). The slice amplitudes are corrected for the
/// slice's offset from the final center before rho is averaged over the last
/// pair; B is the mean of the last pair's offsets. theta is always 0.
inline FitResult fit_3x1d(const ODMap& od, const FitConfig& cfg = {}) {
  const auto start = std::chrono::steady_clock::now();
  cfg.validate();
  FitResult out;
  const detail::Peak peak = detail::smoothed_peak(od);
  double cx = peak.x, cy = peak.y;
  std::vector<double> prof;
  std::vector<std::uint8_t> mask;
  Gaussian1DFit row_fit, col_fit;
  int row = peak.y, col = peak.x;
  bool ok = true;
  for (int round = 0; round < cfg.slice_rounds && ok; ++round) {
    row = detail::clamp_index(cy, od.height);
    detail::row_profile(od, row, prof, mask);
    row_fit = fit_1d_gaussian(prof, mask, cfg);
    ok = !row_fit.degenerate;
    if (ok) cx = row_fit.center;
    col = detail::clamp_index(cx, od.width);
    detail::column_profile(od, col, prof, mask);
    col_fit = fit_1d_gaussian(prof, mask, cfg);
    ok = ok && !col_fit.degenerate;
    if (ok) cy = col_fit.center;
    out.iterations = std::max({out.iterations, row_fit.iterations, col_fit.iterations});
  }

  GaussianParams p;
  p.x0 = cx;
  p.y0 = cy;
  p.theta = 0.0;
  if (ok) {
    p.sigma_x = row_fit.sigma;
    p.sigma_y = col_fit.sigma;
    const double dy = row - cy, dx = col - cx;
    const double rho_row = row_fit.amplitude * std::exp(0.5 * dy * dy / (p.sigma_y * p.sigma_y));
    const double rho_col = col_fit.amplitude * std::exp(0.5 * dx * dx / (p.sigma_x * p.sigma_x));
    p.rho = 0.5 * (rho_row + rho_col);
    p.b = 0.5 * (row_fit.offset + col_fit.offset);
    out.converged = row_fit.converged && col_fit.converged && std::isfinite(p.rho);
  } else {
    // No cloud: report a flat map at the profile baseline.
    p.sigma_x = std::max(row_fit.sigma, 0.5);
    p.sigma_y = std::max(col_fit.sigma, 0.5);
    p.rho = 0.0;
    p.b = 0.5 * (row_fit.offset + col_fit.offset);
    out.converged = false;
  }
  out.params = canonicalize(p);
  out.residual_ss = residual_sum_of_squares(od, out.params);
  out.elapsed = detail::seconds_since(start);
  return out;
}

/// Slice fit along axes rotated by `angle`, sampled by bilinear
/// interpolation through the current center. Returns theta = angle.
inline FitResult fit_3x1d_rotated(const ODMap& od, double angle, const FitConfig& cfg = {}) {
  const auto start = std::chrono::steady_clock::now();
  cfg.validate();
  FitResult out;
  const detail::Peak peak = detail::smoothed_peak(od);
  double cx = peak.x, cy = peak.y;
  const double c = std::cos(angle), s = std::sin(angle);
  std::vector<double> prof;
  std::vector<std::uint8_t> mask;
  Gaussian1DFit u_fit, v_fit;
  bool ok = true;
  for (int round = 0; round < cfg.slice_rounds && ok; ++round) {
    int origin = detail::line_profile(od, cx, cy, c, s, prof, mask);
    u_fit = fit_1d_gaussian(prof, mask, cfg);
    ok = !u_fit.degenerate;
    if (ok) {
      const double t = u_fit.center - origin;
      cx += t * c;
      cy += t * s;
    }
    origin = detail::line_profile(od, cx, cy, -s, c, prof, mask);
    v_fit = fit_1d_gaussian(prof, mask, cfg);
    ok = ok && !v_fit.degenerate;
    if (ok) {
      const double t = v_fit.center - origin;
      cx -= t * s;
      cy += t * c;
    }
    out.iterations = std::max({out.iterations, u_fit.iterations, v_fit.iterations});
  }
  GaussianParams p;
  p.x0 = cx;
  p.y0 = cy;
  p.theta = angle;
  p.sigma_x = std::max(u_fit.sigma, 0.5);
  p.sigma_y = std::max(v_fit.sigma, 0.5);
  p.rho = ok ? 0.5 * (u_fit.amplitude + v_fit.amplitude) : 0.0;
  p.b = 0.5 * (u_fit.offset + v_fit.offset);
  out.converged = ok && u_fit.converged && v_fit.converged;
  out.params = canonicalize(p);
  out.residual_ss = residual_sum_of_squares(od, out.params);
  out.elapsed = detail::seconds_since(start);
  return out;
}

/// Orientation and principal widths from second moments of the OD above
/// B + rho/2 inside a 3-sigma box around the center of `guess`. Returns
/// nullopt when too few pixels pass the threshold.
inline std::optional<GaussianParams> moment_estimate(const ODMap& od, const GaussianParams& guess) {
  // For weights (OD - B) over the half-maximum ellipse of a Gaussian, the
  // second moment along a principal axis is this fraction of sigma^2.
  constexpr double kHalfMaxMomentFraction = 0.30685281944005469;  // 1 - ln 2
  if (!(guess.rho > 0.0)) return std::nullopt;
  const double thr = guess.b + 0.5 * guess.rho;
  const int x_lo = std::max(0, static_cast<int>(std::floor(guess.x0 - 3 * guess.sigma_x)));
  const int x_hi = std::min(od.width - 1, static_cast<int>(std::ceil(guess.x0 + 3 * guess.sigma_x)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(guess.y0 - 3 * guess.sigma_y)));
  const int y_hi = std::min(od.height - 1, static_cast<int>(std::ceil(guess.y0 + 3 * guess.sigma_y)));
  double sw = 0, sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  int n = 0;
  for (int y = y_lo; y <= y_hi; ++y) {
    for (int x = x_lo; x <= x_hi; ++x) {
      const std::size_t i = od.index(x, y);
      if (!od.valid(i) || od.values[i] <= thr) continue;
      const double w = od.values[i] - guess.b;
      sw += w;
      sx += w * x;
      sy += w * y;
      sxx += w * x * x;
      syy += w * y * y;
      sxy += w * x * y;
      ++n;
    }
  }
  if (n < 5 || !(sw > 0.0)) return std::nullopt;
  const double mx = sx / sw, my = sy / sw;
  const double cxx = sxx / sw - mx * mx, cyy = syy / sw - my * my, cxy = sxy / sw - mx * my;
  const double theta = 0.5 * std::atan2(2.0 * cxy, cxx - cyy);
  const double c = std::cos(theta), s = std::sin(theta);
  const double var_u = c * c * cxx + 2 * c * s * cxy + s * s * cyy;
  const double var_v = s * s * cxx - 2 * c * s * cxy + c * c * cyy;
  if (!(var_u > 0.0) || !(var_v > 0.0)) return std::nullopt;
  GaussianParams p = guess;
  p.theta = theta;
  p.sigma_x = std::max(std::sqrt(var_u / kHalfMaxMomentFraction), 0.5);
  p.sigma_y = std::max(std::sqrt(var_v / kHalfMaxMomentFraction), 0.5);
  return canonicalize(p);
}

/// Seven-parameter Levenberg-Marquardt fit over the valid pixels of `od`.
/// Without `init`, the start is the lowest-residual candidate among the
/// unrotated slice fit, the same fit with moment-based orientation and
/// widths, and a slice fit on axes rotated by pi/8.
inline FitResult fit_2d(const ODMap& od, const FitConfig& cfg = {},
                        const std::optional<GaussianParams>& init = std::nullopt) {
  const auto start = std::chrono::steady_clock::now();
  cfg.validate();

  GaussianParams p0;
  if (init) {
    p0 = *init;
  } else {
    const FitResult axis = fit_3x1d(od, cfg);
    p0 = axis.params;
    double best = axis.residual_ss;
    auto consider = [&](const GaussianParams& cand) {
      const double ss = residual_sum_of_squares(od, cand);
      if (std::isfinite(ss) && ss < best) {
        best = ss;
        p0 = cand;
      }
    };
    if (auto moments = moment_estimate(od, axis.params)) consider(*moments);
    consider(fit_3x1d_rotated(od, std::numbers::pi / 8.0, cfg).params);
  }
  detail::check_sigmas(p0);

  std::vector<double> xs, ys, vs;
  xs.reserve(od.size());
  ys.reserve(od.size());
  vs.reserve(od.size());
  for (int y = 0; y < od.height; ++y) {
    for (int x = 0; x < od.width; ++x) {
      const std::size_t i = od.index(x, y);
      if (!od.valid(i)) continue;
      xs.push_back(x);
      ys.push_back(y);
      vs.push_back(od.values[i]);
    }
  }
  if (xs.size() <= GaussianParams::kCount) fail(Errc::degenerate_input, "too few valid pixels for a 2-D fit");
  const Eigen::Index n = static_cast<Eigen::Index>(xs.size());

  auto model = [&](const Eigen::VectorXd& v, Eigen::VectorXd& r, Eigen::MatrixXd* jac) {
    std::array<double, 7> a{};
    for (std::size_t j = 0; j < 7; ++j) a[j] = v[static_cast<Eigen::Index>(j)];
    GaussianParams p = GaussianParams::from_array(a);
    const GaussianKernel k(p);
    r.resize(n);
    if (jac) jac->resize(n, 7);
    std::array<double, 7> g{};
    for (Eigen::Index i = 0; i < n; ++i) {
      const std::size_t u = static_cast<std::size_t>(i);
      if (jac) {
        r[i] = k.value_and_gradient(xs[u], ys[u], g) - vs[u];
        for (Eigen::Index j = 0; j < 7; ++j) (*jac)(i, j) = g[static_cast<std::size_t>(j)];
      } else {
        r[i] = k.value(xs[u], ys[u]) - vs[u];
      }
    }
  };

  const auto a0 = p0.to_array();
  Eigen::VectorXd x0(7);
  for (Eigen::Index j = 0; j < 7; ++j) x0[j] = a0[static_cast<std::size_t>(j)];
  const LmResult lm = lm_minimize(model, x0, cfg);

  std::array<double, 7> a{};
  for (std::size_t j = 0; j < 7; ++j) a[j] = lm.x[static_cast<Eigen::Index>(j)];
  FitResult out;
  out.params = canonicalize(GaussianParams::from_array(a));
  out.converged = lm.converged && lm.x.allFinite() && out.params.sigma_x > 0.0 && out.params.sigma_y > 0.0;
  out.iterations = lm.iterations;
  out.residual_ss = lm.cost;
  out.elapsed = detail::seconds_since(start);
  return out;
}

}  // namespace absorb
