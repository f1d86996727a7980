#pragma once

// Simulated absorption shots: atoms frames are composited from sampled
// Gaussian ODs and (bg, dark) pairs via I_atoms = T (I_bg - I_dark) + I_dark.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "absorb/error.hpp"
#include "absorb/imaging.hpp"
#include "absorb/random.hpp"

namespace absorb {

enum class RangeScale { absolute, width, height };

/// Uniform sampling bounds; width/height-scaled bounds are fractions of W or H.
struct ParamRange {
  double min = 0.0;
  double max = 1.0;
  RangeScale scale = RangeScale::absolute;

  double factor(int width, int height) const {
    switch (scale) {
      case RangeScale::width: return width;
      case RangeScale::height: return height;
      case RangeScale::absolute: break;
    }
    return 1.0;
  }
  double lo(int w, int h) const { return min * factor(w, h); }
  double hi(int w, int h) const { return max * factor(w, h); }
};

struct ParamRanges {
  ParamRange x0{0.1, 0.9, RangeScale::width};
  // Height-scaled so non-square frames stay symmetric.
  ParamRange y0{0.1, 0.9, RangeScale::height};
  ParamRange sigma_x{0.0, 0.25, RangeScale::width};
  ParamRange sigma_y{0.0, 0.25, RangeScale::height};
  ParamRange rho{0.0, 3.0};
  ParamRange b{-0.05, 0.05};
  ParamRange theta{-0.1, 0.1};
  // Width draws below this many pixels are rejected and redrawn.
  double min_sigma_px = 0.5;

  std::array<const ParamRange*, 7> all() const { return {&x0, &y0, &sigma_x, &sigma_y, &rho, &b, &theta}; }
  std::array<ParamRange*, 7> all() { return {&x0, &y0, &sigma_x, &sigma_y, &rho, &b, &theta}; }

  void validate() const {
    std::size_t i = 0;
    for (const ParamRange* r : all()) {
      if (!(r->min < r->max)) {
        fail(Errc::domain, std::string("range for ") + GaussianParams::kNames[i] + " needs min < max");
      }
      ++i;
    }
    if (theta.min < -std::numbers::pi / 4 || theta.max > std::numbers::pi / 4) {
      fail(Errc::domain, "theta range must lie within [-pi/4, pi/4)");
    }
    if (theta.scale != RangeScale::absolute || rho.scale != RangeScale::absolute ||
        b.scale != RangeScale::absolute) {
      fail(Errc::domain, "rho, b and theta ranges are absolute");
    }
    if (!(min_sigma_px >= 0.0)) fail(Errc::domain, "min_sigma_px must be nonnegative");
  }
};

inline bool operator==(const ParamRange& a, const ParamRange& b) {
  return a.min == b.min && a.max == b.max && a.scale == b.scale;
}

inline bool operator==(const ParamRanges& a, const ParamRanges& b) {
  const auto ra = a.all();
  const auto rb = b.all();
  for (std::size_t i = 0; i < ra.size(); ++i) {
    if (!(*ra[i] == *rb[i])) return false;
  }
  return a.min_sigma_px == b.min_sigma_px;
}

inline GaussianParams sample_params(const ParamRanges& ranges, int width, int height, Rng& rng) {
  auto draw = [&](const ParamRange& r) { return rng.uniform(r.lo(width, height), r.hi(width, height)); };
  auto draw_sigma = [&](const ParamRange& r) {
    if (r.hi(width, height) < ranges.min_sigma_px) {
      fail(Errc::domain, "sigma range lies entirely below the minimum resolvable width");
    }
    double s;
    do {
      s = draw(r);
    } while (s < ranges.min_sigma_px || s <= 0.0);
    return s;
  };
  GaussianParams p;
  p.x0 = draw(ranges.x0);
  p.y0 = draw(ranges.y0);
  p.sigma_x = draw_sigma(ranges.sigma_x);
  p.sigma_y = draw_sigma(ranges.sigma_y);
  p.rho = draw(ranges.rho);
  p.b = draw(ranges.b);
  p.theta = draw(ranges.theta);
  return p;
}

inline GaussianParams sample_params(const ParamRanges& ranges, int width, int height, std::uint64_t seed) {
  ranges.validate();
  Rng rng(seed);
  return sample_params(ranges, width, height, rng);
}

inline std::uint16_t quantize_counts(double v) {
  const double r = std::nearbyint(v);
  if (!(r > 0.0)) return 0;  // also maps NaN to 0
  if (r >= 65535.0) return 65535;
  return static_cast<std::uint16_t>(r);
}

/// Atoms frame for `truth` over the given beam/dark frames. Only count
/// quantization is added; all other noise comes from the input frames.
inline Frame synthesize_atoms(const GaussianParams& truth, const Frame& bg, const Frame& dark) {
  if (!bg.same_shape(dark)) fail(Errc::structural, "bg and dark dimensions differ");
  detail::check_sigmas(truth);
  const GaussianKernel k(truth);
  Frame atoms(bg.width(), bg.height(), std::uint16_t{0});
  for (int y = 0; y < bg.height(); ++y) {
    for (int x = 0; x < bg.width(); ++x) {
      const double t = std::exp(-k.value(x, y));
      const double d = dark(x, y);
      atoms(x, y) = quantize_counts(t * (static_cast<double>(bg(x, y)) - d) + d);
    }
  }
  return atoms;
}

struct BackgroundEntry {
  Frame bg;
  Frame dark;
  int sequence = 0;   // acquisition order
  std::string name;   // identifier, e.g. the file stem on disk
};

/// Ordered (bg, dark) pairs. Order follows acquisition time.
class BackgroundLibrary {
 public:
  BackgroundLibrary() = default;
  explicit BackgroundLibrary(std::vector<BackgroundEntry> entries) : entries_(std::move(entries)) { validate(); }

  std::size_t size() const noexcept { return entries_.size(); }
  const BackgroundEntry& operator[](std::size_t i) const { return entries_[i]; }
  const std::vector<BackgroundEntry>& entries() const noexcept { return entries_; }
  int width() const { return entries_.front().bg.width(); }
  int height() const { return entries_.front().bg.height(); }

  void validate() const {
    if (entries_.size() < 2) fail(Errc::structural, "background library needs at least 2 entries");
    const Frame& ref = entries_.front().bg;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      if (!e.bg.same_shape(ref) || !e.dark.same_shape(ref)) {
        fail(Errc::structural, "background entry " + (e.name.empty() ? std::to_string(i) : e.name) +
                                   " has inconsistent dimensions");
      }
      if (i > 0 && e.sequence <= entries_[i - 1].sequence) {
        fail(Errc::structural, "background entries must be in increasing acquisition order");
      }
    }
  }

 private:
  std::vector<BackgroundEntry> entries_;
};

enum class InputMode { ml1, ml3 };

inline std::string_view to_string(InputMode m) { return m == InputMode::ml1 ? "ML1" : "ML3"; }
inline int channel_count(InputMode m) { return m == InputMode::ml1 ? 1 : 3; }

/// Which library entry's beam frame synthesizes the atoms image.
/// `subsequent` uses entry k+1 (wrapping) while presenting entry k, which
/// carries realistic beam drift into the shot. `same` is the noiseless case.
enum class Pairing { subsequent, same };

struct LabeledShot {
  FrameTriple triple;
  GaussianParams truth;
  int source_bg_index = 0;
  int synth_bg_index = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const LabeledShot&, const LabeledShot&) = default;
};

struct Dataset {
  InputMode mode = InputMode::ml1;
  Pairing pairing = Pairing::subsequent;
  std::uint64_t seed = 0;
  ParamRanges ranges;
  std::vector<LabeledShot> shots;
};

/// Builds a single shot from its derived seed. Shots are independent, so a
/// dataset can be generated in any order or in parallel.
inline LabeledShot build_shot(const BackgroundLibrary& library, const ParamRanges& ranges, Pairing pairing,
                              std::uint64_t shot_seed) {
  Rng rng(shot_seed);
  const std::size_t k = static_cast<std::size_t>(rng.below(library.size()));
  const std::size_t synth = pairing == Pairing::subsequent ? (k + 1) % library.size() : k;
  LabeledShot shot;
  shot.truth = sample_params(ranges, library.width(), library.height(), rng);
  shot.source_bg_index = static_cast<int>(k);
  shot.synth_bg_index = static_cast<int>(synth);
  shot.seed = shot_seed;
  Frame atoms = synthesize_atoms(shot.truth, library[synth].bg, library[k].dark);
  shot.triple = FrameTriple(std::move(atoms), library[k].bg, library[k].dark);
  return shot;
}

inline Dataset build_dataset(const BackgroundLibrary& library, const ParamRanges& ranges, std::size_t n,
                             InputMode mode, std::uint64_t seed, Pairing pairing = Pairing::subsequent) {
  library.validate();
  ranges.validate();
  Dataset ds;
  ds.mode = mode;
  ds.pairing = pairing;
  ds.seed = seed;
  ds.ranges = ranges;
  ds.shots.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ds.shots.push_back(build_shot(library, ranges, pairing, derive_seed(seed, i)));
  }
  return ds;
}

/// Sinusoidal interference fringes: amplitude * sin(2 pi (x cos a + y sin a) / period + phase).
struct FringeSpec {
  double amplitude = 0.0;  // counts
  double period = 16.0;    // pixels
  double angle = 0.0;      // radians, direction of the wavevector
  double phase = 0.0;
};

struct BackgroundSpec {
  double level = 2000.0;  // mean beam counts (before dark is added)
  double noise_sd = 0.0;  // beam count noise
  double dark_level = 100.0;
  double dark_noise_sd = 0.0;
  FringeSpec fringe;
};

struct BackgroundPair {
  Frame bg;
  Frame dark;
};

/// Stand-in (bg, dark) pair: bg = dark + level + fringes + noise.
inline BackgroundPair synth_background(int width, int height, const BackgroundSpec& spec, std::uint64_t seed) {
  if (spec.level < 0.0 || spec.noise_sd < 0.0 || spec.dark_level < 0.0 || spec.dark_noise_sd < 0.0 ||
      spec.fringe.amplitude < 0.0) {
    fail(Errc::domain, "background levels, amplitudes and noise must be nonnegative");
  }
  if (!(spec.fringe.period > 0.0)) fail(Errc::domain, "fringe period must be positive");
  if (spec.dark_level + spec.level + spec.fringe.amplitude + 5.0 * (spec.noise_sd + spec.dark_noise_sd) >=
      65535.0) {
    fail(Errc::domain, "background level plus 5 sd exceeds the 16-bit range");
  }
  Rng rng(seed);
  Frame bg(width, height, std::uint16_t{0});
  Frame dark(width, height, std::uint16_t{0});
  const double kx = 2.0 * std::numbers::pi * std::cos(spec.fringe.angle) / spec.fringe.period;
  const double ky = 2.0 * std::numbers::pi * std::sin(spec.fringe.angle) / spec.fringe.period;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double d = spec.dark_level + (spec.dark_noise_sd > 0.0 ? rng.normal(0.0, spec.dark_noise_sd) : 0.0);
      const double fringe = spec.fringe.amplitude * std::sin(kx * x + ky * y + spec.fringe.phase);
      const double beam = spec.level + fringe + (spec.noise_sd > 0.0 ? rng.normal(0.0, spec.noise_sd) : 0.0);
      dark(x, y) = quantize_counts(d);
      bg(x, y) = quantize_counts(spec.dark_level + beam);
    }
  }
  return {std::move(bg), std::move(dark)};
}

/// A library of `count` synthetic pairs whose fringe phase advances by
/// `phase_drift` radians per acquisition, mimicking slow beam drift.
inline BackgroundLibrary make_synthetic_library(std::size_t count, int width, int height,
                                                const BackgroundSpec& spec, double phase_drift,
                                                std::uint64_t seed) {
  std::vector<BackgroundEntry> entries;
  entries.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    BackgroundSpec s = spec;
    s.fringe.phase = spec.fringe.phase + phase_drift * static_cast<double>(k);
    auto pair = synth_background(width, height, s, derive_seed(seed, k));
    char name[32];
    std::snprintf(name, sizeof name, "%04zu", k);
    entries.push_back({std::move(pair.bg), std::move(pair.dark), static_cast<int>(k), name});
  }
  return BackgroundLibrary(std::move(entries));
}

}  // namespace absorb
