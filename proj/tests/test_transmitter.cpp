#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "qkd/transmitter.hpp"

using namespace qkd;

namespace {

ValidatedParams params_with(double duration, double p_key = 0.9, double p_signal = 0.5,
                            std::uint64_t sync_len = 1000) {
  ProtocolParams p;
  p.duration = duration;
  p.p_key_alice = p_key;
  p.p_signal = p_signal;
  p.sync_string_length = sync_len;
  return validate_params(p);
}

}  // namespace

TEST(SyncString, DeterministicPerSeed) {
  const auto a = generate_sync_string(1'000'000, 42);
  const auto b = generate_sync_string(1'000'000, 42);
  const auto c = generate_sync_string(1'000'000, 43);
  EXPECT_EQ(a.pattern, b.pattern);
  EXPECT_NE(a.pattern, c.pattern);
  EXPECT_TRUE(SyncString::is_public());
}

TEST(SyncString, AlphabetAndLength) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = generate_sync_string(2, seed);
    ASSERT_EQ(s.size(), 2u);
    for (auto sym : s.pattern) EXPECT_TRUE(sym == StateSymbol::L || sym == StateSymbol::R);
  }
  EXPECT_THROW(generate_sync_string(0, 1), std::invalid_argument);
}

TEST(SyncString, BalancedComposition) {
  const std::size_t n = 1'000'000;
  const auto s = generate_sync_string(n, 7);
  std::size_t l = 0;
  for (auto sym : s.pattern) l += sym == StateSymbol::L;
  EXPECT_LT(std::abs(static_cast<double>(l) - n / 2.0), 5.0 * std::sqrt(n * 0.25));
}

TEST(SyncString, SmallAutocorrelation) {
  const std::size_t n = 1'000'000;
  const auto s = generate_sync_string(n, 11);
  for (std::size_t lag : {1, 2, 3, 7, 64, 1000, 4096}) {
    double acc = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i) acc += s.sign(i) * s.sign(i + lag);
    const double rho = acc / static_cast<double>(n - lag);
    EXPECT_LT(std::abs(rho), 5.0 / std::sqrt(static_cast<double>(n))) << "lag " << lag;
  }
}

TEST(PulseTrain, SyncPrefixIsSignalIntensityPattern) {
  const auto vp = params_with(0.001);
  const auto sync = generate_sync_string(vp->sync_string_length, 5);
  PulseTrain train(vp, sync, 99);
  for (std::uint64_t i = 0; i < sync.size(); ++i) {
    const auto r = train.at(i);
    EXPECT_EQ(r.state, sync.pattern[i]);
    EXPECT_EQ(r.intensity, IntensityClass::Signal);
  }
}

TEST(PulseTrain, NoCheckStatesWhenPKeyIsOne) {
  const auto vp = params_with(0.002, 1.0);
  PulseTrain train(vp, generate_sync_string(vp->sync_string_length, 1), 3);
  for (std::uint64_t i = vp->sync_string_length; i < train.size(); ++i) EXPECT_NE(train.at(i).state, StateSymbol::D);
}

TEST(PulseTrain, StateAndIntensityFrequencies) {
  const auto vp = params_with(0.02 + 1000 / 5e7);
  PulseTrain train(vp, generate_sync_string(vp->sync_string_length, 1), 17);
  const std::uint64_t n = train.size() - vp->sync_string_length;
  ASSERT_GE(n, 1'000'000u);
  std::uint64_t sig = 0, l = 0, r = 0, d = 0;
  for (std::uint64_t i = vp->sync_string_length; i < train.size(); ++i) {
    const auto rec = train.at(i);
    sig += rec.intensity == IntensityClass::Signal;
    l += rec.state == StateSymbol::L;
    r += rec.state == StateSymbol::R;
    d += rec.state == StateSymbol::D;
    ASSERT_TRUE(is_transmittable(rec.state));
  }
  const double N = static_cast<double>(n);
  // Signal fraction 0.5 +- 0.002, a 3 sigma binomial band at 1e6.
  EXPECT_NEAR(sig / N, 0.5, 0.002);
  const auto within5 = [N](double count, double p) {
    return std::abs(count - N * p) < 5.0 * std::sqrt(N * p * (1 - p));
  };
  EXPECT_TRUE(within5(l, 0.45));
  EXPECT_TRUE(within5(r, 0.45));
  EXPECT_TRUE(within5(d, 0.10));
}

TEST(PulseTrain, EmissionTimesAreExact) {
  const auto vp = params_with(0.0001);
  PulseTrain train(vp, generate_sync_string(10, 1), 1);
  EXPECT_DOUBLE_EQ(train.at(7).emission_time, 140e-9);
  for (std::uint64_t i = 1; i < 1000; ++i) EXPECT_GT(train.at(i).emission_time, train.at(i - 1).emission_time);
  EXPECT_EQ(train.at(123456).emission_time, 123456 / 5e7);
}

TEST(PulseTrain, PureFunctionOfSeedAndPullMatchesRandomAccess) {
  const auto vp = params_with(0.0002);
  const auto sync = generate_sync_string(vp->sync_string_length, 2);
  PulseTrain a(vp, sync, 5), b(vp, sync, 5), c(vp, sync, 6);
  PulseRecord rec;
  std::uint64_t i = 0, differ = 0;
  while (a.next(rec)) {
    const auto other = b.at(i);
    ASSERT_EQ(rec.state, other.state);
    ASSERT_EQ(rec.intensity, other.intensity);
    differ += c.at(i).state != rec.state;
    ++i;
  }
  EXPECT_EQ(i, a.size());
  EXPECT_GT(differ, 0u);
  a.rewind();
  ASSERT_TRUE(a.next(rec));
  EXPECT_EQ(rec.index, 0u);
}

TEST(PulseTrain, MeanPhotonNumbers) {
  ProtocolParams p;
  EXPECT_DOUBLE_EQ(mean_photon_number(IntensityClass::Signal, p), 0.487);
  EXPECT_DOUBLE_EQ(mean_photon_number(IntensityClass::Decoy, p), 0.109);
  EXPECT_NEAR(p.mu / p.nu, 4.468, 5e-4);
}

TEST(PulseTrain, DebugCsvDump) {
  const auto vp = params_with(0.0001);
  PulseTrain train(vp, generate_sync_string(2, 1), 1);
  std::ostringstream out;
  write_pulse_csv(out, train, 4);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "index,state,intensity");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 4);
}
