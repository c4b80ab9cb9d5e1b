#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "qkd/channel.hpp"

using namespace qkd;

namespace {

StokesVector random_unit(std::mt19937_64& g) {
  std::normal_distribution<double> n;
  return StokesVector{n(g), n(g), n(g)}.normalized();
}

}  // namespace

TEST(Transmittance, Values) {
  EXPECT_DOUBLE_EQ(transmittance(0.0), 1.0);
  EXPECT_NEAR(transmittance(9.0), 0.125893, 1e-6);
  EXPECT_NEAR(transmittance(23.0), 0.0050119, 1e-7);
  EXPECT_THROW(transmittance(-0.1), std::invalid_argument);
}

TEST(Transmittance, MonotoneAndMultiplicative) {
  for (double a = 0; a < 40; a += 0.7) {
    EXPECT_GT(transmittance(a), transmittance(a + 0.1));
    for (double b = 0; b < 20; b += 3.1) EXPECT_NEAR(transmittance(a + b), transmittance(a) * transmittance(b), 1e-12);
  }
}

TEST(Rotation, IdentityAndFixedAxis) {
  ChannelModel ch;
  ch.rotation_axis = StokesVector{1, 2, 2}.normalized();
  const auto s = state_to_stokes(StateSymbol::L);
  ch.rotation_offset = 0.0;
  EXPECT_EQ(apply_rotation(s, 0.0, ch), s);
  for (double angle : {0.3, 1.0, 2.5, 6.0}) {
    ch.rotation_offset = angle;
    const auto r = apply_rotation(ch.rotation_axis, 0.0, ch);
    EXPECT_NEAR(r.s1, ch.rotation_axis.s1, 1e-12);
    EXPECT_NEAR(r.s2, ch.rotation_axis.s2, 1e-12);
    EXPECT_NEAR(r.s3, ch.rotation_axis.s3, 1e-12);
  }
  ch.rotation_offset = 2.0 * std::numbers::pi;
  const auto full = apply_rotation(s, 0.0, ch);
  EXPECT_NEAR(full.s1, s.s1, 1e-9);
  EXPECT_NEAR(full.s2, s.s2, 1e-9);
  EXPECT_NEAR(full.s3, s.s3, 1e-9);
}

TEST(Rotation, PreservesInnerProductsAndNorm) {
  std::mt19937_64 g(3);
  ChannelModel ch;
  ch.rotation_rate = 0.37;
  for (int i = 0; i < 1000; ++i) {
    ch.rotation_axis = random_unit(g);
    ch.rotation_offset = std::uniform_real_distribution<double>(-7, 7)(g);
    const auto a = random_unit(g), b = random_unit(g);
    const double t = std::uniform_real_distribution<double>(0, 3600)(g);
    const auto ra = apply_rotation(a, t, ch), rb = apply_rotation(b, t, ch);
    EXPECT_NEAR(ra.dot(rb), a.dot(b), 1e-9);
    EXPECT_TRUE(is_unit(ra));
  }
}

TEST(Rotation, TimeDependentAngle) {
  ChannelModel ch;
  ch.rotation_axis = {1, 0, 0};
  ch.rotation_rate = std::numbers::pi / 2;
  const auto r = apply_rotation(state_to_stokes(StateSymbol::D), 1.0, ch);
  EXPECT_NEAR(r.s3, 1.0, 1e-12);
}

TEST(Rotation, DefaultMisalignmentErrorShares) {
  // Optical error in basis with axis b: sin^2(theta/2) (1 - (n.b)^2).
  const auto ch = make_channel(validate_params(ProtocolParams{}));
  const double theta = ProtocolParams{}.misalignment_angle;
  const double s2 = std::pow(std::sin(theta / 2), 2);
  const auto wrong = [&](StateSymbol sent, StateSymbol orth) {
    return projection_probability(apply_rotation(state_to_stokes(sent), 0.0, ch), state_to_stokes(orth));
  };
  const double eK = wrong(StateSymbol::L, StateSymbol::R);
  const double eC = wrong(StateSymbol::D, StateSymbol::A);
  EXPECT_NEAR(eK, s2 * (1 - std::pow(ch.rotation_axis.s3, 2)), 1e-12);
  EXPECT_NEAR(eC, s2 * (1 - std::pow(ch.rotation_axis.s2, 2)), 1e-12);
  EXPECT_NEAR(eK, 0.0187, 2e-4);
  EXPECT_NEAR(eC, 0.0097, 2e-4);
  EXPECT_NEAR(wrong(StateSymbol::R, StateSymbol::L), eK, 1e-12);
}

TEST(Timing, AliceToBob) {
  ChannelModel ch;
  EXPECT_DOUBLE_EQ(alice_to_bob_time(0.123, ch), 0.123);
  ch.clock_drift = 1e-5;
  EXPECT_DOUBLE_EQ(alice_to_bob_time(1.0, ch), 1.00001);
  ch.propagation_delay = 1e-3;
  ch.clock_offset = 2e-3;
  double prev = -1;
  for (double t = 0; t < 10; t += 0.5) {
    const double b = alice_to_bob_time(t, ch);
    EXPECT_GT(b, prev);
    prev = b;
    EXPECT_NEAR(b, 1.00001 * t + 3e-3, 1e-15);
  }
}

TEST(Timing, FiberDelay) {
  EXPECT_NEAR(fiber_delay(3400, 1.468), 16.6e-6, 0.1e-6);
  EXPECT_NEAR(fiber_delay(3400, 1.468), ProtocolParams{}.propagation_delay, 5e-9);
}

TEST(Channel, FromParams) {
  ProtocolParams p;
  p.clock_drift_ppm = 10;
  p.rotation_axis_x = 3;
  p.rotation_axis_y = 0;
  p.rotation_axis_z = 4;
  const auto ch = make_channel(validate_params(p));
  EXPECT_DOUBLE_EQ(ch.clock_drift, 1e-5);
  EXPECT_NEAR(ch.rotation_axis.s1, 0.6, 1e-15);
  EXPECT_NEAR(ch.rotation_axis.s3, 0.8, 1e-15);
  EXPECT_DOUBLE_EQ(ch.loss_db, 9.0);
}
