#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "absorb/imaging.hpp"
#include "absorb/random.hpp"
#include "absorb/simulator.hpp"

namespace absorb {
namespace {

Frame flat(std::uint16_t v, int w = 8, int h = 8) { return Frame(w, h, v); }

TEST(Frame, RejectsTinyFrames) {
  EXPECT_THROW(Frame(4, 8, std::uint16_t{0}), Error);
  EXPECT_THROW(Frame(8, 8, std::vector<std::uint16_t>(10)), Error);
}

TEST(Transmission, ExactArithmetic) {
  FrameTriple t(flat(600), flat(1100), flat(100));
  const auto tm = transmission(t);
  for (std::size_t i = 0; i < tm.size(); ++i) EXPECT_DOUBLE_EQ(tm.values[i], 0.5);
}

TEST(Transmission, IdentityWhenAtomsEqualBackground) {
  FrameTriple t(flat(1234), flat(1234), flat(0));
  const auto tm = transmission(t);
  for (double v : tm.values) EXPECT_EQ(v, 1.0);
}

TEST(Transmission, GuardedPixelIsInvalid) {
  Frame bg = flat(1000), dark = flat(100), atoms = flat(500);
  bg(3, 4) = 100;
  const auto tm = transmission(FrameTriple(atoms, bg, dark), 1e-6);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      EXPECT_EQ(tm.valid(x, y), !(x == 3 && y == 4));
      if (tm.valid(x, y)) {
        EXPECT_TRUE(std::isfinite(tm(x, y)));
      }
    }
  }
}

TEST(Transmission, Errors) {
  EXPECT_THROW(transmission(FrameTriple{flat(1), flat(1, 9), flat(1)}), Error);
  try {
    transmission(FrameTriple(flat(5), flat(100), flat(100)));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::degenerate_input);
  }
}

TEST(OpticalDensity, LogIdentities) {
  // T = 1 -> 0
  auto od = od_from_triple(FrameTriple(flat(900), flat(900), flat(0)));
  for (double v : od.values) EXPECT_EQ(v, 0.0);
  // T = 0 with t_floor = e^-6 -> 6, clamped
  od = od_from_triple(FrameTriple(flat(100), flat(1100), flat(100)), std::exp(-6.0));
  for (std::size_t i = 0; i < od.size(); ++i) {
    EXPECT_NEAR(od.values[i], 6.0, 1e-12);
    EXPECT_TRUE(od.clamped(i));
  }
  // Negative T (atoms below dark) is clamped too.
  od = od_from_triple(FrameTriple(flat(50), flat(1100), flat(100)));
  EXPECT_TRUE(od.clamped(0));
  EXPECT_NEAR(od.values[0], 6.0, 1e-12);
}

TEST(OpticalDensity, InverseE) {
  // ln(1/T) with T = e^-1 evaluated directly on the transmission values.
  Frame bg = flat(60000), dark = flat(0), atoms = flat(0);
  for (auto& c : atoms.counts()) c = 22073;  // round(60000/e)
  const auto od = od_from_triple(FrameTriple(atoms, bg, dark));
  EXPECT_NEAR(od.values[0], -std::log(22073.0 / 60000.0), 1e-15);
  EXPECT_NEAR(od.values[0], 1.0, 2e-5);
}

TEST(GaussianOd, Examples) {
  GaussianParams p{20.0, 15.0, 4.0, 2.5, 1.7, 0.03, 0.3};
  const auto od = gaussian_od(p, 40, 32);
  EXPECT_NEAR(od(20, 15), p.b + p.rho, 1e-15);
  p.theta = 0.0;
  const auto axis = gaussian_od(p, 40, 32);
  for (int x = 0; x < 40; ++x) {
    const double dx = x - p.x0;
    EXPECT_NEAR(axis(x, 15), p.b + p.rho * std::exp(-dx * dx / (2 * p.sigma_x * p.sigma_x)), 1e-15);
  }
  p.rho = 0.0;
  for (double v : gaussian_od(p, 40, 32).values) EXPECT_EQ(v, p.b);
  p.sigma_y = 0.0;
  EXPECT_THROW(gaussian_od(p, 40, 32), Error);
}

TEST(GaussianOd, JacobianClosedForms) {
  const GaussianParams p{11.0, 9.0, 3.0, 5.0, 0.8, -0.01, 0.05};
  const auto jac = gaussian_od_jacobian(p, 24, 20);
  for (double v : jac[5]) EXPECT_EQ(v, 1.0);
  EXPECT_NEAR(jac[4][9 * 24 + 11], 1.0, 1e-15);
}

// Central finite differences: the independent oracle for the analytic partials.
double fd_partial(const GaussianParams& p, std::size_t j, int x, int y, double h) {
  auto a = p.to_array();
  auto b = a;
  a[j] += h;
  b[j] -= h;
  return (gaussian_value(GaussianParams::from_array(a), x, y) - gaussian_value(GaussianParams::from_array(b), x, y)) /
         (2 * h);
}

GaussianParams random_params(Rng& rng, int w, int h) {
  return {rng.uniform(0.2 * w, 0.8 * w), rng.uniform(0.2 * h, 0.8 * h), rng.uniform(2.0, 8.0),
          rng.uniform(2.0, 8.0),         rng.uniform(0.3, 3.0),         rng.uniform(-0.05, 0.05),
          rng.uniform(-0.7, 0.7)};
}

TEST(GaussianOd, JacobianMatchesFiniteDifferences) {
  Rng rng(42);
  constexpr int w = 32, h = 28;
  for (int trial = 0; trial < 10; ++trial) {
    const GaussianParams p = random_params(rng, w, h);
    const auto jac = gaussian_od_jacobian(p, w, h);
    const auto a = p.to_array();
    for (std::size_t j = 0; j < 7; ++j) {
      const double step = 1e-5 * std::max(std::abs(a[j]), 1.0);
      double max_abs = 0.0, max_err = 0.0;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double an = jac[j][static_cast<std::size_t>(y * w + x)];
          max_abs = std::max(max_abs, std::abs(an));
          max_err = std::max(max_err, std::abs(an - fd_partial(p, j, x, y, step)));
        }
      }
      EXPECT_LT(max_err / max_abs, 1e-5) << GaussianParams::kNames[j];
    }
  }
}

TEST(Canonicalize, QuarterTurnSwapsAxes) {
  const auto c = canonicalize({10, 10, 3.0, 7.0, 1, 0, std::numbers::pi / 2});
  EXPECT_NEAR(c.theta, 0.0, 1e-15);
  EXPECT_EQ(c.sigma_x, 7.0);
  EXPECT_EQ(c.sigma_y, 3.0);
}

TEST(Canonicalize, UpperBoundaryMapsToLower) {
  const auto c = canonicalize({10, 10, 3.0, 7.0, 1, 0, std::numbers::pi / 4});
  EXPECT_NEAR(c.theta, -std::numbers::pi / 4, 1e-15);
  EXPECT_EQ(c.sigma_x, 7.0);
  EXPECT_TRUE(is_canonical(c));
}

TEST(Canonicalize, PreservesSurface) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    GaussianParams p = random_params(rng, 30, 30);
    p.theta = rng.uniform(-20.0, 20.0);
    const GaussianParams c = canonicalize(p);
    ASSERT_TRUE(is_canonical(c));
    const auto a = gaussian_od(p, 30, 30);
    const auto b = gaussian_od(c, 30, 30);
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a.values[i], b.values[i], 1e-12);
    // Idempotent
    EXPECT_EQ(canonicalize(c), c);
  }
}

TEST(Properties, SynthesisRoundTripWithinQuantization) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Frame bg(16, 16, std::uint16_t{0}), dark(16, 16, std::uint16_t{0});
    std::vector<double> t(bg.size());
    for (std::size_t i = 0; i < bg.size(); ++i) {
      dark.counts()[i] = static_cast<std::uint16_t>(rng.uniform(50, 200));
      bg.counts()[i] = static_cast<std::uint16_t>(dark.counts()[i] + rng.uniform(10, 20000));
      t[i] = rng.uniform(1e-3, 1.0);
    }
    Frame atoms = bg;
    for (std::size_t i = 0; i < bg.size(); ++i) {
      const double d = dark.counts()[i];
      atoms.counts()[i] = quantize_counts(t[i] * (bg.counts()[i] - d) + d);
    }
    const auto tm = transmission(FrameTriple(atoms, bg, dark));
    for (std::size_t i = 0; i < bg.size(); ++i) {
      const double span = static_cast<double>(bg.counts()[i]) - dark.counts()[i];
      ASSERT_LE(std::abs(tm.values[i] - t[i]), 0.5 / span + 1e-15);
    }
  }
}

TEST(Properties, OdOfUnattenuatedTripleIsZero) {
  Rng rng(11);
  Frame bg(12, 9, std::uint16_t{0}), dark(12, 9, std::uint16_t{0});
  for (std::size_t i = 0; i < bg.size(); ++i) {
    bg.counts()[i] = static_cast<std::uint16_t>(rng.uniform(0, 3000));
    dark.counts()[i] = static_cast<std::uint16_t>(rng.uniform(0, 300));
  }
  const auto od = od_from_triple(FrameTriple(bg, bg, dark));
  for (std::size_t i = 0; i < od.size(); ++i) {
    if (od.valid(i)) {
      EXPECT_EQ(od.values[i], 0.0);
    }
  }
}

}  // namespace
}  // namespace absorb
