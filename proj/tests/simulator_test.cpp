#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "absorb/imaging.hpp"
#include "absorb/simulator.hpp"

namespace absorb {
namespace {

// Kolmogorov-Smirnov distance between a sample and U(lo, hi).
double ks_uniform(std::vector<double> v, double lo, double hi) {
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double d = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double f = std::clamp((v[i] - lo) / (hi - lo), 0.0, 1.0);
    d = std::max({d, (i + 1) / n - f, f - i / n});
  }
  return d;
}

BackgroundLibrary flat_library(std::size_t n, int w = 32, int h = 32) {
  BackgroundSpec spec;
  spec.level = 3000;
  return make_synthetic_library(n, w, h, spec, 0.0, 1);
}

TEST(SampleParams, CollapsedRangesReturnTheirValues) {
  ParamRanges r;
  const double eps = 1e-12;
  r.x0 = {10.0 - eps, 10.0};
  r.y0 = {12.0 - eps, 12.0};
  r.sigma_x = {3.0 - eps, 3.0};
  r.sigma_y = {4.0 - eps, 4.0};
  r.rho = {1.0 - eps, 1.0};
  r.b = {0.01 - eps, 0.01};
  r.theta = {0.05 - eps, 0.05};
  const auto p = sample_params(r, 32, 32, 5);
  const auto a = p.to_array();
  const double want[] = {10, 12, 3, 4, 1, 0.01, 0.05};
  for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(a[i], want[i], 1e-11);
}

TEST(SampleParams, UniformMoments) {
  ParamRanges r;
  Rng rng(99);
  std::vector<double> rho;
  for (int i = 0; i < 100000; ++i) rho.push_back(sample_params(r, 64, 64, rng).rho);
  const double mean = std::accumulate(rho.begin(), rho.end(), 0.0) / rho.size();
  double var = 0.0;
  for (double v : rho) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / (rho.size() - 1));
  EXPECT_NEAR(mean, 1.5, 0.02);
  EXPECT_NEAR(sd, 3.0 / std::sqrt(12.0), 0.02);
}

TEST(SampleParams, DeterministicAndWidthFloor) {
  ParamRanges r;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto a = sample_params(r, 64, 64, s);
    EXPECT_EQ(a, sample_params(r, 64, 64, s));
    EXPECT_GE(a.sigma_x, r.min_sigma_px);
    EXPECT_GE(a.sigma_y, r.min_sigma_px);
  }
}

TEST(SampleParams, RejectsInvalidRanges) {
  ParamRanges r;
  r.rho = {1.0, 1.0};
  EXPECT_THROW(sample_params(r, 64, 64, 1), Error);
  r = {};
  r.theta = {-1.0, 0.1};
  EXPECT_THROW(sample_params(r, 64, 64, 1), Error);
}

TEST(Synthesize, NoCloudReproducesBackground) {
  const auto lib = flat_library(2);
  GaussianParams p{16, 16, 3, 3, 0.0, 0.0, 0.0};
  EXPECT_EQ(synthesize_atoms(p, lib[0].bg, lib[0].dark), lib[0].bg);
}

TEST(Synthesize, CenterCounts) {
  Frame bg(16, 16, std::uint16_t{1100}), dark(16, 16, std::uint16_t{100});
  GaussianParams p{8, 8, 3, 3, std::log(2.0), 0.0, 0.0};
  EXPECT_EQ(synthesize_atoms(p, bg, dark)(8, 8), 600);
}

TEST(Synthesize, ClampsToSixteenBits) {
  Frame bg(8, 8, std::uint16_t{65535}), dark(8, 8, std::uint16_t{0});
  GaussianParams p{4, 4, 2, 2, 0.0, -0.2, 0.0};  // negative OD brightens
  const Frame a = synthesize_atoms(p, bg, dark);
  for (auto c : a.counts()) EXPECT_EQ(c, 65535);
}

TEST(Synthesize, OdRoundTripWithinQuantization) {
  BackgroundSpec spec;
  spec.level = 1500;
  spec.noise_sd = 40;
  spec.fringe = {100.0, 11.0, 0.4, 0.0};
  const auto pair = synth_background(48, 40, spec, 17);
  ParamRanges r;
  r.rho = {0.0, 0.6};
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto truth = sample_params(r, 48, 40, rng);
    const Frame atoms = synthesize_atoms(truth, pair.bg, pair.dark);
    const auto od = od_from_triple(FrameTriple(atoms, pair.bg, pair.dark));
    const auto model = gaussian_od(truth, 48, 40);
    for (std::size_t i = 0; i < od.size(); ++i) {
      const double span = static_cast<double>(pair.bg.counts()[i]) - pair.dark.counts()[i];
      ASSERT_TRUE(od.valid(i));
      ASSERT_LE(std::abs(od.values[i] - model.values[i]), -std::log(1.0 - 1.0 / span));
    }
  }
}

TEST(BuildDataset, PairingRuleWithWrap) {
  const auto lib = flat_library(2);
  const auto ds = build_dataset(lib, ParamRanges{}, 4, InputMode::ml3, 3);
  ASSERT_EQ(ds.shots.size(), 4u);
  for (const auto& s : ds.shots) {
    EXPECT_NE(s.synth_bg_index, s.source_bg_index);
    EXPECT_EQ(s.synth_bg_index, (s.source_bg_index + 1) % 2);
    EXPECT_EQ(s.triple.bg, lib[static_cast<std::size_t>(s.source_bg_index)].bg);
    EXPECT_EQ(s.triple.dark, lib[static_cast<std::size_t>(s.source_bg_index)].dark);
  }
}

TEST(BuildDataset, EmptyAndErrors) {
  const auto lib = flat_library(3);
  EXPECT_TRUE(build_dataset(lib, ParamRanges{}, 0, InputMode::ml1, 1).shots.empty());
  std::vector<BackgroundEntry> one{{lib[0].bg, lib[0].dark, 0, "0"}};
  EXPECT_THROW(BackgroundLibrary{one}, Error);
  EXPECT_THROW(BackgroundLibrary{}.validate(), Error);
}

TEST(BuildDataset, DeterministicUnderSeed) {
  BackgroundSpec spec;
  spec.noise_sd = 30;
  spec.fringe.amplitude = 50;
  const auto lib = make_synthetic_library(5, 24, 24, spec, 0.3, 8);
  const auto a = build_dataset(lib, ParamRanges{}, 25, InputMode::ml1, 77);
  const auto b = build_dataset(lib, ParamRanges{}, 25, InputMode::ml1, 77);
  EXPECT_EQ(a.shots, b.shots);
  const auto c = build_dataset(lib, ParamRanges{}, 25, InputMode::ml1, 78);
  EXPECT_NE(a.shots, c.shots);
}

TEST(BuildDataset, TruthDistributionsAreUniform) {
  const int w = 64, h = 64;
  const auto lib = flat_library(4, w, h);
  ParamRanges r;
  const auto ds = build_dataset(lib, r, 1000, InputMode::ml1, 2024);
  // Critical value of the one-sample KS statistic at alpha = 0.01.
  const double crit = 1.628 / std::sqrt(1000.0);
  for (std::size_t j = 0; j < 7; ++j) {
    std::vector<double> v;
    for (const auto& s : ds.shots) v.push_back(s.truth.to_array()[j]);
    double lo = r.all()[j]->lo(w, h), hi = r.all()[j]->hi(w, h);
    if (j == 2 || j == 3) lo = r.min_sigma_px;  // widths are redrawn below the floor
    EXPECT_LT(ks_uniform(v, lo, hi), crit) << GaussianParams::kNames[j];
  }
}

TEST(SynthBackground, ConstantWithoutNoiseOrFringes) {
  BackgroundSpec spec;
  spec.level = 2500;
  const auto p = synth_background(16, 16, spec, 1);
  for (auto c : p.bg.counts()) EXPECT_EQ(c, 2600);
  for (auto c : p.dark.counts()) EXPECT_EQ(c, 100);
}

TEST(SynthBackground, FringeRange) {
  BackgroundSpec spec;
  spec.level = 2000;
  spec.fringe = {150.0, 16.0, 0.0, 0.0};
  const auto p = synth_background(32, 16, spec, 1);
  const auto [mn, mx] = std::minmax_element(p.bg.counts().begin(), p.bg.counts().end());
  EXPECT_NEAR(static_cast<double>(*mx) - *mn, 300.0, 1.0);
}

TEST(SynthBackground, SeedDeterminism) {
  BackgroundSpec spec;
  spec.noise_sd = 20;
  spec.dark_noise_sd = 3;
  const auto a = synth_background(16, 16, spec, 1);
  const auto b = synth_background(16, 16, spec, 1);
  const auto c = synth_background(16, 16, spec, 2);
  EXPECT_EQ(a.bg, b.bg);
  EXPECT_EQ(a.dark, b.dark);
  EXPECT_NE(a.bg, c.bg);
}

TEST(SynthBackground, DomainErrors) {
  BackgroundSpec spec;
  spec.level = 65000;
  spec.noise_sd = 200;
  EXPECT_THROW(synth_background(16, 16, spec, 1), Error);
  spec = {};
  spec.fringe.period = 0;
  EXPECT_THROW(synth_background(16, 16, spec, 1), Error);
}

}  // namespace
}  // namespace absorb
