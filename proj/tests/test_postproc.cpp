#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <optional>
#include <vector>

#include "qkd/postproc.hpp"
#include "qkd/random.hpp"

using namespace qkd;

namespace {

constexpr double kPeriodPs = 20000.0;

SyncSolution identity_sync() {
  SyncSolution s;
  s.period_estimate = kPeriodPs * 1e-12;
  s.success = true;
  return s;
}

TimeTag at(std::uint64_t pulse, DetectorId d, std::uint64_t extra_ps = 0) {
  return {pulse * static_cast<std::uint64_t>(kPeriodPs) + extra_ps, d};
}

struct MapLookup {
  std::map<std::uint64_t, PulseRecord> records;
  std::optional<PulseRecord> operator()(std::uint64_t i) const {
    const auto it = records.find(i);
    if (it == records.end()) return std::nullopt;
    return it->second;
  }
  void put(std::uint64_t i, StateSymbol s, IntensityClass c = IntensityClass::Signal) {
    records[i] = PulseRecord{i, s, c, 0.0};
  }
};

std::uint64_t poisson_large(Rng& rng, double mean) {
  if (mean < 1e4) return rng.poisson(mean);
  return static_cast<std::uint64_t>(std::max(0.0, std::round(mean + std::sqrt(mean) * rng.normal())));
}

// Count-level Monte Carlo with photon-number ground truth: for each basis and
// intensity, detections from n-photon pulses are Poisson with mean
// N * P(n) * (1 - (1 - eta)^n (1 - y0)); vacuum and noise clicks err with 1/2,
// photon clicks err with the basis misalignment rate.
struct TaggedCounts {
  CountTable table;
  double vacuum_K = 0, single_K = 0, single_C = 0, single_C_errors = 0;
};

TaggedCounts tagged_counts(const ProtocolParams& p, double pulses, double eta, double y0, double e_K, double e_C,
                           std::uint64_t seed) {
  Rng rng(seed);
  TaggedCounts out;
  for (auto b : {BasisId::K, BasisId::C}) {
    const double p_b = b == BasisId::K ? p.p_key_alice : 1.0 - p.p_key_alice;
    // Passive 50:50 basis choice at Bob.
    const double p_bob = 0.5;
    const double e_d = b == BasisId::K ? e_K : e_C;
    for (auto c : {IntensityClass::Signal, IntensityClass::Decoy}) {
      const double k = c == IntensityClass::Signal ? p.mu : p.nu;
      const double p_k = c == IntensityClass::Signal ? p.p_signal : 1.0 - p.p_signal;
      const double sent = pulses * p_b * p_k;
      for (unsigned n = 0; n <= 12; ++n) {
        const double pn = std::exp(-k + n * std::log(k) - std::lgamma(n + 1.0));
        const double y_photon = 1.0 - std::pow(1.0 - eta, n);
        const double y = (y_photon + (1.0 - y_photon) * y0) * p_bob;
        const auto det = poisson_large(rng, sent * pn * y);
        const double err_rate = n == 0 ? 0.5 : (y_photon * e_d + (1.0 - y_photon) * y0 * 0.5) / (y_photon + (1.0 - y_photon) * y0);
        const auto err = std::min<std::uint64_t>(det, poisson_large(rng, static_cast<double>(det) * err_rate));
        out.table.detections(b, c) += det;
        out.table.errors(b, c) += err;
        if (b == BasisId::K && n == 0) out.vacuum_K += static_cast<double>(det);
        if (b == BasisId::K && n == 1) out.single_K += static_cast<double>(det);
        if (b == BasisId::C && n == 1) {
          out.single_C += static_cast<double>(det);
          out.single_C_errors += static_cast<double>(err);
        }
      }
    }
  }
  return out;
}

CountTable operating_table() {
  ProtocolParams p;
  return tagged_counts(p, 3e9, 0.15 * std::pow(10.0, -1.3), 1.2e-5, 0.0187, 0.0097, 1).table;
}

}  // namespace

TEST(BinaryEntropy, Values) {
  EXPECT_EQ(binary_entropy(0.0), 0.0);
  EXPECT_EQ(binary_entropy(1.0), 0.0);
  EXPECT_DOUBLE_EQ(binary_entropy(0.5), 1.0);
  EXPECT_NEAR(binary_entropy(0.02), 0.14144, 5e-6);
  EXPECT_THROW(binary_entropy(-0.01), std::domain_error);
  EXPECT_THROW(binary_entropy(1.01), std::domain_error);
}

TEST(TauN, DefaultIntensities) {
  ProtocolParams p;
  EXPECT_NEAR(tau_n(0, p), 0.75560, 5e-6);
  EXPECT_NEAR(tau_n(1, p), 0.19849, 5e-6);
  double sum = 0.0;
  for (unsigned n = 0; n <= 40; ++n) sum += tau_n(n, p);
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(FiniteSizeBounds, DeltaAndDegenerateEpsilon) {
  const double eps = 1e-10 / 19;
  EXPECT_NEAR(hoeffding_delta(2e6, eps), std::sqrt(1e6 * std::log(1.9e11)), 1e-6);
  EXPECT_NEAR(hoeffding_delta(2e6, eps), 5096.1, 0.1);
  const auto iv = finite_size_bounds(1e6, 2e6, eps, 0.487, 0.5);
  EXPECT_NEAR(iv.high - iv.low, 2 * 5096.105 * std::exp(0.487) / 0.5, 0.1);
  const auto flat = finite_size_bounds(1000, 5000, 1.0, 0.109, 0.25);
  EXPECT_DOUBLE_EQ(flat.low, flat.high);
  EXPECT_DOUBLE_EQ(flat.low, std::exp(0.109) / 0.25 * 1000);
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double total = std::floor(rng.uniform() * 1e7);
    const double count = std::floor(rng.uniform() * total);
    const auto b = finite_size_bounds(count, total, rng.uniform() * 0.5 + 1e-12, rng.uniform(), rng.uniform() + 0.01);
    ASSERT_LE(b.low, b.high);
  }
}

TEST(Leakage, Values) {
  EXPECT_EQ(ec_leakage(1e6, 0.0, 1.16), 0.0);
  EXPECT_NEAR(ec_leakage(1e6, 0.02, 1.16), 164071.03, 0.05);
  EXPECT_NEAR(ec_leakage(1e6, 0.02, 1.16), 164070, 2.0);
  EXPECT_EQ(confirmation_leakage(1e-15), 50.0);
  // Direct evaluation of 6 log2(19e10).
  EXPECT_NEAR(secrecy_penalty(1e-10), 6.0 * std::log2(19e10), 1e-9);
  EXPECT_NEAR(secrecy_penalty(1e-10), 224.80, 0.01);
}

TEST(PhaseError, GammaAndClamps) {
  const double a = 1e-10, b = 0.02, c = 1e6, d = 1e6;
  const double oracle = std::sqrt((c + d) * (1 - b) * b / (c * d * std::log(2.0)) *
                                  std::log2((c + d) / (c * d * (1 - b) * b) * std::pow(21.0 / a, 2)));
  EXPECT_DOUBLE_EQ(gamma_correction(a, b, c, d), oracle);
  EXPECT_NEAR(gamma_correction(a, b, c, d), 0.00187, 1e-5);
  EXPECT_LT(gamma_correction(a, b, c, d), 0.1 * b);
  EXPECT_NEAR(phase_error_upper(1e15, 0.0, 1e15, 1e-10), 0.0, 1e-5);
  EXPECT_EQ(phase_error_upper(1000, 600, 1000, 1e-10), 0.5);
  EXPECT_EQ(phase_error_upper(0.0, 0.0, 1e6, 1e-10), 0.5);
  EXPECT_EQ(phase_error_upper(1e6, 0.0, -1.0, 1e-10), 0.5);
  EXPECT_NEAR(phase_error_upper(1e6, 2e4, 1e6, 1e-10), 0.02 + oracle, 1e-12);
}

TEST(SecretKeyLength, WorstPhaseErrorDropsSinglePhotonTerm) {
  DecoyBounds b;
  b.K.s0_low = 1000;
  b.K.s1_low = 1e6;
  b.C.s1_low = 0.0;  // forces phi = 0.5
  ProtocolParams p;
  const auto a = secret_key_length(b, 1e6, 0.0, p, 10.0);
  EXPECT_EQ(a.phi_K_up, 0.5);
  EXPECT_EQ(a.secret_length, std::floor(1000 - 50 - secrecy_penalty(p.eps_sec)));
  EXPECT_DOUBLE_EQ(a.skr, a.secret_length / 10.0);
  const auto neg = secret_key_length(b, 1e6, 0.02, p, 10.0);
  EXPECT_EQ(neg.secret_length, 0.0);
  EXPECT_THROW(secret_key_length(b, 1e6, 0.0, p, 0.0), std::invalid_argument);
}

TEST(DecoyBounds, EqualIntensitiesRejected) {
  ProtocolParams p;
  p.nu = p.mu;
  EXPECT_THROW(decoy_bounds(CountTable{}, p), std::invalid_argument);
}

TEST(DecoyBounds, AllDecoyRunIsDegenerate) {
  ProtocolParams p;
  p.p_signal = 0.0;
  CountTable t;
  t.detections(BasisId::K, IntensityClass::Decoy) = 100000;
  t.errors(BasisId::K, IntensityClass::Decoy) = 2000;
  t.detections(BasisId::C, IntensityClass::Decoy) = 10000;
  t.errors(BasisId::C, IntensityClass::Decoy) = 100;
  const auto b = decoy_bounds(t, p);
  EXPECT_FALSE(b.warnings.empty());
  EXPECT_EQ(b.K.s0_low, 0.0);
  EXPECT_EQ(b.K.s1_low, 0.0);
  EXPECT_EQ(b.C.s1_low, 0.0);
  const auto k = analyze_counts(t, p, 60.0);
  EXPECT_EQ(k.accounting.phi_K_up, 0.5);
  EXPECT_EQ(k.accounting.secret_length, 0.0);
}

TEST(DecoyBounds, ClampedToObservedTotals) {
  ProtocolParams p;
  const auto t = operating_table();
  const auto b = decoy_bounds(t, p);
  for (const auto* bb : {&b.K, &b.C}) {
    const double tot = static_cast<double>(bb == &b.K ? t.n_total(BasisId::K) : t.n_total(BasisId::C));
    EXPECT_GE(bb->s0_low, 0.0);
    EXPECT_LE(bb->s0_up, tot);
    EXPECT_GE(bb->s1_low, 0.0);
    EXPECT_LE(bb->s1_low, tot);
  }
  EXPECT_GE(b.v_C1_up, 0.0);
  EXPECT_TRUE(b.warnings.empty());
  EXPECT_DOUBLE_EQ(b.eps_term, p.eps_sec / 19.0);
}

TEST(DecoyBounds, NoiselessExactYieldsGiveNoVacuumCredit) {
  ProtocolParams p;
  const double eta = 0.01, pulses = 1e10;
  CountTable t;
  for (auto b : {BasisId::K, BasisId::C}) {
    const double p_b = b == BasisId::K ? p.p_key_alice : 1.0 - p.p_key_alice;
    for (auto c : {IntensityClass::Signal, IntensityClass::Decoy}) {
      const double k = c == IntensityClass::Signal ? p.mu : p.nu;
      const double p_k = c == IntensityClass::Signal ? p.p_signal : 1.0 - p.p_signal;
      t.detections(b, c) = static_cast<std::uint64_t>(std::llround(pulses * p_b * p_k * -std::expm1(-k * eta)));
    }
  }
  const auto b = decoy_bounds(t, p);
  // No dark counts: the true vacuum contribution is zero.
  EXPECT_LE(b.K.s0_low, 0.0);
  EXPECT_LE(b.C.s0_low, 0.0);
}

TEST(DecoyBounds, BoundValidityAgainstPhotonNumberTruth) {
  ProtocolParams p;
  const double eta = 0.15 * std::pow(10.0, -1.3);
  int s0_ok = 0, s1_ok = 0, phi_ok = 0;
  const int runs = 100;
  for (int r = 0; r < runs; ++r) {
    const auto tc = tagged_counts(p, 3e9, eta, 1.2e-5, 0.0187, 0.0097, 1000 + r);
    const auto k = analyze_counts(tc.table, p, 60.0);
    s0_ok += k.bounds.K.s0_low <= tc.vacuum_K;
    s1_ok += k.bounds.K.s1_low <= tc.single_K;
    phi_ok += k.accounting.phi_K_up >= tc.single_C_errors / tc.single_C;
  }
  EXPECT_GE(s0_ok, 99);
  EXPECT_GE(s1_ok, 99);
  EXPECT_GE(phi_ok, 99);
}

TEST(SecretKeyLength, Monotonicity) {
  ProtocolParams p;
  const auto t = operating_table();
  const auto base = decoy_bounds(t, p);
  const double n_K = static_cast<double>(t.n_total(BasisId::K));
  double prev = INFINITY;
  for (double q = 0.0; q <= 0.2; q += 0.005) {
    const auto a = secret_key_length(base, n_K, q, p, 60.0);
    EXPECT_LE(a.secret_length, prev) << q;
    prev = a.secret_length;
  }
  prev = -1.0;
  for (double f : {0.5, 1.0, 2.0, 10.0, 60.0}) {
    const auto a = analyze_counts(scale_counts(t, f), p, 60.0 * f).accounting;
    EXPECT_GE(a.secret_length, prev) << f;
    prev = a.secret_length;
  }
  prev = -1.0;
  for (double eps : {1e-20, 1e-15, 1e-10, 1e-5, 1e-2}) {
    auto q = p;
    q.eps_sec = eps;
    const auto a = analyze_counts(t, q, 60.0).accounting;
    EXPECT_GE(a.secret_length, prev) << eps;
    prev = a.secret_length;
  }
}

TEST(SecretKeyLength, PureFunction) {
  ProtocolParams p;
  const auto t = operating_table();
  const auto a = analyze_counts(t, p, 60.0);
  const auto b = analyze_counts(t, p, 60.0);
  EXPECT_EQ(std::memcmp(&a.accounting, &b.accounting, sizeof(SecurityAccounting)), 0);
  EXPECT_GT(a.accounting.secret_length, 0.0);
  const double raw = a.accounting.s_K0_low + a.accounting.s_K1_low * (1 - binary_entropy(a.accounting.phi_K_up)) -
                     a.accounting.lambda_EC - a.accounting.lambda_conf - a.accounting.secrecy_penalty;
  EXPECT_EQ(a.accounting.secret_length, std::floor(raw));
}

TEST(Sift, SingleEventCases) {
  MapLookup alice;
  alice.put(10, StateSymbol::L);
  alice.put(11, StateSymbol::L);
  alice.put(12, StateSymbol::D, IntensityClass::Decoy);
  alice.put(13, StateSymbol::R);
  const std::vector<TimeTag> ev{at(10, DetectorId::L), at(11, DetectorId::D), at(12, DetectorId::A),
                                at(13, DetectorId::L)};
  const auto r = sift(alice, ev, identity_sync(), 0, 1);
  ASSERT_EQ(r.pairs.size(), 3u);
  EXPECT_EQ(r.pairs[0].pulse_index, 10u);
  EXPECT_FALSE(r.pairs[0].error());
  EXPECT_EQ(r.pairs[1].basis, BasisId::C);
  EXPECT_EQ(r.pairs[1].intensity, IntensityClass::Decoy);
  EXPECT_TRUE(r.pairs[1].error());
  EXPECT_TRUE(r.pairs[2].error());
  EXPECT_EQ(r.counters.basis_mismatch, 1u);
  EXPECT_EQ(r.table.detections(BasisId::K, IntensityClass::Signal), 2u);
  EXPECT_EQ(r.table.errors(BasisId::K, IntensityClass::Signal), 1u);
  EXPECT_EQ(r.table.errors(BasisId::C, IntensityClass::Decoy), 1u);
}

TEST(Sift, CheckBasisWithDetectorDIsCorrect) {
  MapLookup alice;
  alice.put(1, StateSymbol::D);
  const auto r = sift(alice, std::vector{at(1, DetectorId::D)}, identity_sync(), 0, 1);
  ASSERT_EQ(r.pairs.size(), 1u);
  EXPECT_FALSE(r.pairs[0].error());
  EXPECT_EQ(r.table.qber(BasisId::C), 0.0);
}

TEST(Sift, OutOfRangePrefixAndGrouping) {
  MapLookup alice;
  for (std::uint64_t i = 0; i < 20; ++i) alice.put(i, StateSymbol::L);
  auto sync = identity_sync();
  sync.offset_pulses = 2;  // pulse = slot - 2
  std::vector<TimeTag> ev{at(0, DetectorId::L),  // pulse -2
                          at(5, DetectorId::L),  // pulse 3, sync prefix
                          at(12, DetectorId::L), at(12, DetectorId::D, 100), at(12, DetectorId::R, 200),
                          at(40, DetectorId::L)};  // pulse 38, no record
  const auto r = sift(alice, ev, sync, 5, 7);
  EXPECT_EQ(r.counters.events, ev.size());
  EXPECT_EQ(r.counters.out_of_range, 2u);
  EXPECT_EQ(r.counters.sync_prefix, 1u);
  EXPECT_EQ(r.counters.double_clicks, 1u);
  EXPECT_EQ(r.counters.basis_mismatch, 1u);
  ASSERT_EQ(r.pairs.size(), 1u);
  EXPECT_EQ(r.pairs[0].pulse_index, 10u);
  EXPECT_EQ(r.pairs[0].bob_bit, (mix(7, Domain::Sifting, 10) >> 63) ? 0 : 1);
}

TEST(Sift, DoubleClickBitIsUniform) {
  MapLookup alice;
  std::vector<TimeTag> ev;
  const std::uint64_t n = 20000;
  for (std::uint64_t i = 0; i < n; ++i) {
    alice.put(i, StateSymbol::L);
    ev.push_back(at(i, DetectorId::L));
    ev.push_back(at(i, DetectorId::R, 50));
  }
  const auto r = sift(alice, ev, identity_sync(), 0, 3);
  EXPECT_EQ(r.counters.double_clicks, n);
  EXPECT_NEAR(r.table.qber(BasisId::K), 0.5, 4 * std::sqrt(0.25 / n));
}

TEST(Sift, TotalsMatchPairsAndBasesAgree) {
  MapLookup alice;
  Rng rng(4);
  std::vector<TimeTag> ev;
  const StateSymbol states[] = {StateSymbol::L, StateSymbol::R, StateSymbol::D};
  const DetectorId dets[] = {DetectorId::L, DetectorId::R, DetectorId::D, DetectorId::A};
  for (std::uint64_t i = 0; i < 50000; ++i) {
    if (!rng.bernoulli(0.3)) continue;
    alice.put(i, states[rng.bits() % 3], rng.bernoulli(0.5) ? IntensityClass::Signal : IntensityClass::Decoy);
    ev.push_back(at(i, dets[rng.bits() % 4]));
  }
  const auto r = sift(alice, ev, identity_sync(), 0, 5);
  EXPECT_LE(r.pairs.size(), ev.size());
  std::uint64_t nK = 0, nC = 0, mK = 0, mC = 0;
  for (const auto& pr : r.pairs) {
    const auto rec = *alice(pr.pulse_index);
    ASSERT_EQ(basis_of(rec.state), pr.basis);
    (pr.basis == BasisId::K ? nK : nC) += 1;
    (pr.basis == BasisId::K ? mK : mC) += pr.error();
  }
  EXPECT_EQ(r.table.n_total(BasisId::K), nK);
  EXPECT_EQ(r.table.n_total(BasisId::C), nC);
  EXPECT_EQ(r.table.m_total(BasisId::K), mK);
  EXPECT_EQ(r.table.m_total(BasisId::C), mC);
  EXPECT_EQ(r.counters.kept + r.counters.basis_mismatch, ev.size());
}

TEST(Sift, StreamingMatchesBatch) {
  MapLookup alice;
  std::vector<TimeTag> ev;
  // One detection per millisecond, spanning three seconds.
  for (std::uint64_t i = 0; i < 3000; ++i) {
    const std::uint64_t pulse = i * 50000;
    alice.put(pulse, i % 3 == 0 ? StateSymbol::D : StateSymbol::L);
    ev.push_back(at(pulse, i % 5 == 0 ? DetectorId::A : DetectorId::L));
  }
  const auto batch = sift(alice, ev, identity_sync(), 0, 1);
  Sifter s(alice, identity_sync(), 0, 1);
  std::size_t announced = 0;
  s.on_announce([&](const PulseRecord&) { ++announced; });
  for (std::size_t i = 0; i < ev.size(); i += 7)
    s.feed(std::span(ev).subspan(i, std::min<std::size_t>(7, ev.size() - i)));
  s.finish();
  EXPECT_EQ(s.table(), batch.table);
  EXPECT_EQ(announced, ev.size());
  EXPECT_EQ(batch.seconds.size(), 3u);
}

TEST(QberSeries, ZeroErrorsIsFlat) {
  std::vector<SecondCounts> sec;
  for (int s = 0; s < 100; ++s) sec.push_back({s, 1000, 0, 100, 0});
  const auto q = qber_series_from_counts(sec, 60);
  for (const auto& p : q.points) {
    EXPECT_EQ(*p.q_K, 0.0);
    EXPECT_EQ(p.mean_K, 0.0);
    EXPECT_EQ(p.sd_K, 0.0);
  }
  EXPECT_EQ(q.overall_K, 0.0);
}

TEST(QberSeries, AllFlippedAndAbsentSeconds) {
  std::vector<SecondCounts> sec{{0, 10, 10, 0, 0}, {1, 0, 0, 5, 1}, {2, 20, 20, 5, 2}};
  const auto q = qber_series_from_counts(sec, 60);
  EXPECT_EQ(q.overall_K, 1.0);
  EXPECT_FALSE(q.points[1].q_K.has_value());
  EXPECT_FALSE(q.points[0].q_C.has_value());
  EXPECT_EQ(q.points[1].mean_K, 1.0);
  EXPECT_DOUBLE_EQ(q.points[2].mean_C, 0.3);
  EXPECT_NEAR(q.points[2].sd_C, std::sqrt(0.02), 1e-12);
  EXPECT_THROW(qber_series_from_counts(sec, 0), std::invalid_argument);
}

TEST(QberSeries, RollingWindowAndOverallAverage) {
  Rng rng(8);
  std::vector<SecondCounts> sec;
  std::uint64_t nk = 0, mk = 0, nc = 0, mc = 0;
  for (int s = 0; s < 300; ++s) {
    SecondCounts c{s, 5000 + rng.bits() % 100, 0, 500 + rng.bits() % 10, 0};
    c.m_K = rng.bits() % 150;
    c.m_C = rng.bits() % 10;
    nk += c.n_K, mk += c.m_K, nc += c.n_C, mc += c.m_C;
    sec.push_back(c);
  }
  const auto q = qber_series_from_counts(sec, 60);
  EXPECT_EQ(q.overall_K, static_cast<double>(mk) / static_cast<double>(nk));
  EXPECT_EQ(q.overall_C, static_cast<double>(mc) / static_cast<double>(nc));
  // Direct oracle for the window ending at second 200.
  double sum = 0, sum2 = 0;
  for (int s = 141; s <= 200; ++s) {
    const double v = static_cast<double>(sec[s].m_K) / static_cast<double>(sec[s].n_K);
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / 60;
  EXPECT_NEAR(q.points[200].mean_K, mean, 1e-15);
  EXPECT_NEAR(q.points[200].sd_K, std::sqrt((sum2 - 60 * mean * mean) / 59), 1e-12);
}

TEST(QberSeries, PairsAgreeWithCounts) {
  std::vector<SiftedPair> pairs;
  for (std::uint64_t i = 0; i < 1000; ++i)
    pairs.push_back({i, i % 4 ? BasisId::K : BasisId::C, IntensityClass::Signal, 0,
                     static_cast<std::uint8_t>(i % 7 == 0), static_cast<std::int64_t>(9 - i / 100)});
  const auto q = qber_series(pairs, 5);
  ASSERT_EQ(q.points.size(), 10u);
  EXPECT_EQ(q.points.front().second, 0);
  std::uint64_t n = 0;
  for (const auto& p : q.points) n += p.counts.n_K + p.counts.n_C;
  EXPECT_EQ(n, 1000u);
}
