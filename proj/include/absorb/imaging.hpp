#pragma once

// Absorption-imaging model: camera frames, transmission, optical density and
// the rotated two-dimensional Gaussian OD surface.
//
// Pixel convention: pixel (i, j) has its center at (x, y) = (i, j). x is the
// column index (horizontal), y is the row index (vertical), the origin is the
// center of the top-left pixel. All grids are stored row-major, top row first.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "absorb/error.hpp"

namespace absorb {

inline constexpr int kMinFrameSide = 8;
inline constexpr double kDefaultTransmissionFloor = 1e-6;
// e^-6, i.e. OD is capped at 6.
inline constexpr double kDefaultTFloor = 0.0024787521766663585;

/// A raw 16-bit camera image.
class Frame {
 public:
  Frame() = default;

  Frame(int width, int height, std::vector<std::uint16_t> counts)
      : width_(width), height_(height), counts_(std::move(counts)) {
    if (width < kMinFrameSide || height < kMinFrameSide) {
      fail(Errc::structural, "frame must be at least 8x8, got " + std::to_string(width) + "x" +
                                 std::to_string(height));
    }
    if (counts_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
      fail(Errc::structural, "frame payload does not match its dimensions");
    }
  }

  Frame(int width, int height, std::uint16_t fill)
      : Frame(width, height,
              std::vector<std::uint16_t>(
                  static_cast<std::size_t>(std::max(width, 0)) * static_cast<std::size_t>(std::max(height, 0)),
                  fill)) {}

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t size() const noexcept { return counts_.size(); }

  std::uint16_t operator()(int x, int y) const { return counts_[index(x, y)]; }
  std::uint16_t& operator()(int x, int y) { return counts_[index(x, y)]; }

  std::span<const std::uint16_t> counts() const noexcept { return counts_; }
  std::span<std::uint16_t> counts() noexcept { return counts_; }

  bool same_shape(const Frame& other) const noexcept {
    return width_ == other.width_ && height_ == other.height_;
  }

  friend bool operator==(const Frame&, const Frame&) = default;

 private:
  std::size_t index(int x, int y) const noexcept {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint16_t> counts_;
};

/// (I_atoms, I_bg, I_dark) for one shot.
struct FrameTriple {
  Frame atoms;
  Frame bg;
  Frame dark;

  FrameTriple() = default;
  FrameTriple(Frame atoms_, Frame bg_, Frame dark_)
      : atoms(std::move(atoms_)), bg(std::move(bg_)), dark(std::move(dark_)) {
    check();
  }

  void check() const {
    if (!atoms.same_shape(bg) || !atoms.same_shape(dark)) {
      fail(Errc::structural, "frame triple dimensions differ");
    }
  }

  int width() const noexcept { return atoms.width(); }
  int height() const noexcept { return atoms.height(); }

  friend bool operator==(const FrameTriple&, const FrameTriple&) = default;
};

enum class PixelState : std::uint8_t { invalid = 0, valid = 1, clamped = 2 };

/// Real-valued field with a per-pixel validity state. Used for both
/// transmission and optical-density maps.
struct ValueMap {
  int width = 0;
  int height = 0;
  std::vector<double> values;
  std::vector<PixelState> state;

  ValueMap() = default;
  ValueMap(int w, int h, double fill = 0.0, PixelState s = PixelState::valid)
      : width(w),
        height(h),
        values(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill),
        state(values.size(), s) {}

  std::size_t size() const noexcept { return values.size(); }
  std::size_t index(int x, int y) const noexcept {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x);
  }
  double operator()(int x, int y) const { return values[index(x, y)]; }
  double& operator()(int x, int y) { return values[index(x, y)]; }

  bool valid(std::size_t i) const noexcept { return state[i] != PixelState::invalid; }
  bool valid(int x, int y) const noexcept { return valid(index(x, y)); }
  bool clamped(std::size_t i) const noexcept { return state[i] == PixelState::clamped; }

  std::size_t valid_count() const noexcept {
    return static_cast<std::size_t>(
        std::count_if(state.begin(), state.end(), [](PixelState s) { return s != PixelState::invalid; }));
  }
};

using TransmissionMap = ValueMap;
using ODMap = ValueMap;

/// Gaussian cloud parameters <x0, y0, sigma_x, sigma_y, rho, B, theta>.
struct GaussianParams {
  double x0 = 0.0;
  double y0 = 0.0;
  double sigma_x = 1.0;
  double sigma_y = 1.0;
  double rho = 0.0;  // peak OD
  double b = 0.0;    // OD offset
  double theta = 0.0;

  static constexpr std::size_t kCount = 7;
  static constexpr std::array<const char*, kCount> kNames = {"x0", "y0", "sigma_x", "sigma_y",
                                                             "rho", "b", "theta"};

  std::array<double, kCount> to_array() const { return {x0, y0, sigma_x, sigma_y, rho, b, theta}; }

  static GaussianParams from_array(std::span<const double, kCount> a) {
    return {a[0], a[1], a[2], a[3], a[4], a[5], a[6]};
  }

  double operator[](std::size_t i) const { return to_array()[i]; }

  friend bool operator==(const GaussianParams&, const GaussianParams&) = default;
};

namespace detail {

inline void check_sigmas(const GaussianParams& p) {
  if (!(p.sigma_x > 0.0) || !(p.sigma_y > 0.0)) {
    fail(Errc::domain, "gaussian widths must be positive");
  }
}

}  // namespace detail

/// T = (atoms - dark) / (bg - dark). Pixels with bg - dark <= floor are invalid.
inline TransmissionMap transmission(const FrameTriple& triple, double floor = kDefaultTransmissionFloor) {
  triple.check();
  TransmissionMap t(triple.width(), triple.height(), 0.0, PixelState::invalid);
  const auto atoms = triple.atoms.counts();
  const auto bg = triple.bg.counts();
  const auto dark = triple.dark.counts();
  std::size_t valid = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double den = static_cast<double>(bg[i]) - static_cast<double>(dark[i]);
    if (den <= floor) continue;
    t.values[i] = (static_cast<double>(atoms[i]) - static_cast<double>(dark[i])) / den;
    t.state[i] = PixelState::valid;
    ++valid;
  }
  if (valid == 0) fail(Errc::degenerate_input, "no pixel has bg - dark above the floor");
  return t;
}

/// OD = -ln T. T <= t_floor (including negative T) is clamped to -ln(t_floor)
/// and flagged `clamped`; invalid transmission pixels stay invalid.
inline ODMap od_from_triple(const FrameTriple& triple, double t_floor = kDefaultTFloor,
                            double floor = kDefaultTransmissionFloor) {
  if (!(t_floor > 0.0)) fail(Errc::domain, "t_floor must be positive");
  ODMap od = transmission(triple, floor);
  const double cap = -std::log(t_floor);
  for (std::size_t i = 0; i < od.size(); ++i) {
    if (od.state[i] == PixelState::invalid) continue;
    const double t = od.values[i];
    if (t <= t_floor) {
      od.values[i] = cap;
      od.state[i] = PixelState::clamped;
    } else {
      od.values[i] = -std::log(t);
    }
  }
  return od;
}

/// Precomputed rotation/width terms shared by value and derivative evaluation.
struct GaussianKernel {
  GaussianParams p;
  double c, s, inv_sx2, inv_sy2;

  explicit GaussianKernel(const GaussianParams& params)
      : p(params),
        c(std::cos(params.theta)),
        s(std::sin(params.theta)),
        inv_sx2(1.0 / (params.sigma_x * params.sigma_x)),
        inv_sy2(1.0 / (params.sigma_y * params.sigma_y)) {}

  double envelope(double x, double y, double* u_out = nullptr, double* v_out = nullptr) const {
    const double dx = x - p.x0;
    const double dy = y - p.y0;
    const double u = dx * c + dy * s;
    const double v = -dx * s + dy * c;
    if (u_out) *u_out = u;
    if (v_out) *v_out = v;
    return std::exp(-0.5 * (u * u * inv_sx2 + v * v * inv_sy2));
  }

  double value(double x, double y) const { return p.b + p.rho * envelope(x, y); }

  // Value plus all seven partials, ordered as GaussianParams::to_array().
  double value_and_gradient(double x, double y, std::span<double, 7> grad) const {
    double u, v;
    const double e = envelope(x, y, &u, &v);
    const double re = p.rho * e;
    const double du = u * inv_sx2;
    const double dv = v * inv_sy2;
    grad[0] = re * (du * c - dv * s);
    grad[1] = re * (du * s + dv * c);
    grad[2] = re * u * u * inv_sx2 / p.sigma_x;
    grad[3] = re * v * v * inv_sy2 / p.sigma_y;
    grad[4] = e;
    grad[5] = 1.0;
    grad[6] = re * u * v * (inv_sy2 - inv_sx2);
    return p.b + re;
  }
};

/// OD(x, y) = B + rho * exp(-u^2/(2 sx^2) - v^2/(2 sy^2)) with
/// u = (x-x0)cos(theta) + (y-y0)sin(theta), v = -(x-x0)sin(theta) + (y-y0)cos(theta).
inline double gaussian_value(const GaussianParams& p, double x, double y) {
  return GaussianKernel(p).value(x, y);
}

inline ODMap gaussian_od(const GaussianParams& params, int width, int height) {
  detail::check_sigmas(params);
  const GaussianKernel k(params);
  ODMap od(width, height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) od(x, y) = k.value(x, y);
  }
  return od;
}

/// Seven per-pixel partial-derivative grids, in GaussianParams::to_array() order.
inline std::array<std::vector<double>, 7> gaussian_od_jacobian(const GaussianParams& params, int width,
                                                               int height) {
  detail::check_sigmas(params);
  const GaussianKernel k(params);
  const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  std::array<std::vector<double>, 7> out;
  for (auto& g : out) g.resize(n);
  std::array<double, 7> grad{};
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      k.value_and_gradient(x, y, grad);
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      for (std::size_t j = 0; j < 7; ++j) out[j][i] = grad[j];
    }
  }
  return out;
}

/// Equivalent parameterization with theta in [-pi/4, pi/4) and sigma_x on the
/// principal axis closest to horizontal. The OD surface is unchanged.
inline GaussianParams canonicalize(GaussianParams p) {
  constexpr double quarter = std::numbers::pi / 4.0;
  constexpr double half = std::numbers::pi / 2.0;
  p.sigma_x = std::abs(p.sigma_x);
  p.sigma_y = std::abs(p.sigma_y);
  if (!std::isfinite(p.theta)) return p;
  const double k = std::floor((p.theta + quarter) / half);
  p.theta -= k * half;
  bool swap = std::fmod(std::abs(k), 2.0) == 1.0;
  // Rounding in the reduction can land a hair outside the half-open interval.
  if (p.theta >= quarter) {
    p.theta -= half;
    swap = !swap;
  } else if (p.theta < -quarter) {
    p.theta += half;
    swap = !swap;
  }
  if (swap) std::swap(p.sigma_x, p.sigma_y);
  return p;
}

inline bool is_canonical(const GaussianParams& p) {
  constexpr double quarter = std::numbers::pi / 4.0;
  return p.theta >= -quarter && p.theta < quarter && p.sigma_x > 0.0 && p.sigma_y > 0.0;
}

}  // namespace absorb
