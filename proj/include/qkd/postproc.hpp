#pragma once

// Sifting, QBER time series and the one-decoy finite-key accounting.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "qkd/random.hpp"
#include "qkd/receiver.hpp"
#include "qkd/sync.hpp"
#include "qkd/transmitter.hpp"
#include "qkd/types.hpp"

namespace qkd {

struct SiftedPair {
  std::uint64_t pulse_index = 0;
  BasisId basis = BasisId::K;
  IntensityClass intensity = IntensityClass::Signal;
  std::uint8_t alice_bit = 0;
  std::uint8_t bob_bit = 0;
  std::int64_t second = 0;

  bool error() const noexcept { return alice_bit != bob_bit; }
};

/// Detection (n) and error (m) counts indexed by [basis][intensity].
template <class T>
struct BasicCountTable {
  std::array<std::array<T, 2>, 2> n{};
  std::array<std::array<T, 2>, 2> m{};

  static constexpr std::size_t idx(BasisId b) noexcept { return static_cast<std::size_t>(b); }
  static constexpr std::size_t idx(IntensityClass c) noexcept { return static_cast<std::size_t>(c); }

  T& detections(BasisId b, IntensityClass c) noexcept { return n[idx(b)][idx(c)]; }
  T& errors(BasisId b, IntensityClass c) noexcept { return m[idx(b)][idx(c)]; }
  T detections(BasisId b, IntensityClass c) const noexcept { return n[idx(b)][idx(c)]; }
  T errors(BasisId b, IntensityClass c) const noexcept { return m[idx(b)][idx(c)]; }
  T n_total(BasisId b) const noexcept { return n[idx(b)][0] + n[idx(b)][1]; }
  T m_total(BasisId b) const noexcept { return m[idx(b)][0] + m[idx(b)][1]; }

  void add(BasisId b, IntensityClass c, bool error) noexcept {
    n[idx(b)][idx(c)] += 1;
    if (error) m[idx(b)][idx(c)] += 1;
  }

  double qber(BasisId b) const noexcept {
    const auto total = n_total(b);
    return total > 0 ? static_cast<double>(m_total(b)) / static_cast<double>(total) : 0.0;
  }

  bool operator==(const BasicCountTable&) const = default;
};

using CountTable = BasicCountTable<std::uint64_t>;

/// Counts rescaled to a longer (or shorter) acquisition with the same rates.
template <class T>
BasicCountTable<double> scale_counts(const BasicCountTable<T>& t, double factor) {
  BasicCountTable<double> out;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 2; ++c) {
      out.n[b][c] = static_cast<double>(t.n[b][c]) * factor;
      out.m[b][c] = static_cast<double>(t.m[b][c]) * factor;
    }
  return out;
}

template <class F>
concept AliceLookup = std::invocable<const F&, std::uint64_t> &&
    std::convertible_to<std::invoke_result_t<const F&, std::uint64_t>, std::optional<PulseRecord>>;

/// Alice's records served straight from the generator.
inline auto train_lookup(const PulseTrain& train) {
  return [&train](std::uint64_t i) -> std::optional<PulseRecord> {
    if (i >= train.size()) return std::nullopt;
    return train.at(i);
  };
}

struct SiftCounters {
  std::uint64_t events = 0;
  std::uint64_t kept = 0;
  std::uint64_t basis_mismatch = 0;  // events discarded
  std::uint64_t out_of_range = 0;    // events mapped outside the pulse train
  std::uint64_t sync_prefix = 0;     // events on public sync pulses
  std::uint64_t double_clicks = 0;   // same-basis pairs resolved at random
};

struct SecondCounts {
  std::int64_t second = 0;
  std::uint64_t n_K = 0, m_K = 0, n_C = 0, m_C = 0;
};

constexpr std::uint8_t bit_of(StateSymbol s) noexcept {
  return (s == StateSymbol::R || s == StateSymbol::A) ? 1 : 0;
}

/// Streaming sifter. Feed temporally filtered, time-ordered events; events
/// that map to the same pulse are grouped before Alice's record is consulted.
template <AliceLookup Lookup>
class Sifter {
 public:
  Sifter(Lookup alice, const SyncSolution& sync, std::uint64_t sync_length, std::uint64_t seed,
         bool keep_pairs = true)
      : alice_(std::move(alice)), sync_(sync), sync_length_(sync_length), seed_(seed), keep_pairs_(keep_pairs) {}

  void feed(std::span<const TimeTag> events) {
    for (const auto& e : events) {
      ++counters_.events;
      const auto index = sync_.pulse_index(e.timestamp_ps);
      if (has_group_ && index != group_index_) flush();
      if (!has_group_) {
        has_group_ = true;
        group_index_ = index;
        group_second_ = static_cast<std::int64_t>(e.timestamp_ps / 1000000000000ULL);
        group_.clear();
      }
      group_.push_back(e.detector);
    }
  }

  void finish() {
    if (has_group_) flush();
  }

  const CountTable& table() const noexcept { return table_; }
  const SiftCounters& counters() const noexcept { return counters_; }
  const std::vector<SiftedPair>& pairs() const noexcept { return pairs_; }
  const std::vector<SecondCounts>& seconds() const noexcept { return seconds_; }
  std::vector<SiftedPair> take_pairs() { return std::move(pairs_); }

  /// Replaces the slot mapping for events fed from now on.
  void retime(const SyncSolution& sync) { sync_ = sync; }

  /// Called once per detected pulse whose record Alice reveals, in pulse order.
  void on_announce(std::function<void(const PulseRecord&)> f) { announce_hook_ = std::move(f); }
  /// Called once per kept pulse, in pulse order.
  void on_kept(std::function<void(const PulseRecord&, const SiftedPair&)> f) { kept_hook_ = std::move(f); }

 private:
  void flush() {
    has_group_ = false;
    const auto n_events = group_.size();
    if (group_index_ < 0) {
      counters_.out_of_range += n_events;
      return;
    }
    const auto index = static_cast<std::uint64_t>(group_index_);
    if (index < sync_length_) {
      counters_.sync_prefix += n_events;
      return;
    }
    const std::optional<PulseRecord> rec = alice_(index);
    if (!rec) {
      counters_.out_of_range += n_events;
      return;
    }
    if (announce_hook_) announce_hook_(*rec);
    const BasisId basis = basis_of(rec->state);
    std::array<bool, 4> fired{};
    std::size_t matching = 0;
    for (auto d : group_) {
      if (basis_of(d) == basis) {
        if (!fired[index_of(d)]) ++matching;
        fired[index_of(d)] = true;
      }
    }
    counters_.basis_mismatch += n_events - std::min(n_events, matching);
    if (matching == 0) return;

    StateSymbol outcome;
    const auto [first, second] = basis == BasisId::K ? std::pair{DetectorId::L, DetectorId::R}
                                                     : std::pair{DetectorId::D, DetectorId::A};
    if (fired[index_of(first)] && fired[index_of(second)]) {
      ++counters_.double_clicks;
      outcome = (mix(seed_, Domain::Sifting, index) >> 63) ? outcome_of(first) : outcome_of(second);
    } else {
      outcome = fired[index_of(first)] ? outcome_of(first) : outcome_of(second);
    }

    SiftedPair pair{index, basis, rec->intensity, bit_of(rec->state), bit_of(outcome), group_second_};
    const bool err = pair.error();
    table_.add(basis, rec->intensity, err);
    ++counters_.kept;
    if (seconds_.empty() || seconds_.back().second != group_second_)
      seconds_.push_back(SecondCounts{group_second_});
    auto& sc = seconds_.back();
    if (basis == BasisId::K) {
      ++sc.n_K;
      sc.m_K += err;
    } else {
      ++sc.n_C;
      sc.m_C += err;
    }
    if (keep_pairs_) pairs_.push_back(pair);
    if (kept_hook_) kept_hook_(*rec, pair);
  }

  Lookup alice_;
  SyncSolution sync_;
  std::uint64_t sync_length_;
  std::uint64_t seed_;
  bool keep_pairs_;
  bool has_group_ = false;
  std::int64_t group_index_ = 0;
  std::int64_t group_second_ = 0;
  std::vector<DetectorId> group_;
  CountTable table_;
  SiftCounters counters_;
  std::vector<SiftedPair> pairs_;
  std::vector<SecondCounts> seconds_;
  std::function<void(const PulseRecord&)> announce_hook_;
  std::function<void(const PulseRecord&, const SiftedPair&)> kept_hook_;
};

struct SiftResult {
  std::vector<SiftedPair> pairs;
  CountTable table;
  SiftCounters counters;
  std::vector<SecondCounts> seconds;
};

template <AliceLookup Lookup>
SiftResult sift(Lookup alice, std::span<const TimeTag> events, const SyncSolution& sync,
                std::uint64_t sync_length, std::uint64_t seed) {
  Sifter<Lookup> s(std::move(alice), sync, sync_length, seed, true);
  s.feed(events);
  s.finish();
  return SiftResult{s.take_pairs(), s.table(), s.counters(), s.seconds()};
}

// ---------------------------------------------------------------------------
// QBER time series

struct QberPoint {
  std::int64_t second = 0;
  SecondCounts counts;
  std::optional<double> q_K, q_C;  // absent when the basis has no detections
  double mean_K = 0.0, sd_K = 0.0, mean_C = 0.0, sd_C = 0.0;  // trailing window
};

struct QberSeries {
  std::vector<QberPoint> points;
  double overall_K = 0.0;
  double overall_C = 0.0;
};

namespace detail {

struct Rolling {
  std::deque<std::pair<std::int64_t, double>> values;
  void push(std::int64_t s, double v) { values.emplace_back(s, v); }
  void expire(std::int64_t oldest) {
    while (!values.empty() && values.front().first < oldest) values.pop_front();
  }
  std::pair<double, double> stats() const {
    if (values.empty()) return {0.0, 0.0};
    double sum = 0.0;
    for (const auto& [s, v] : values) sum += v;
    const double mean = sum / static_cast<double>(values.size());
    if (values.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (const auto& [s, v] : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
  }
};

}  // namespace detail

/// `seconds` must be sorted by second. The rolling window covers the
/// `window_s` seconds ending at each point.
inline QberSeries qber_series_from_counts(std::span<const SecondCounts> seconds, std::int64_t window_s) {
  if (window_s < 1) throw std::invalid_argument("window must be >= 1 s");
  QberSeries out;
  detail::Rolling rk, rc;
  std::uint64_t nk = 0, mk = 0, nc = 0, mc = 0;
  for (const auto& sc : seconds) {
    QberPoint p;
    p.second = sc.second;
    p.counts = sc;
    nk += sc.n_K;
    mk += sc.m_K;
    nc += sc.n_C;
    mc += sc.m_C;
    rk.expire(sc.second - window_s + 1);
    rc.expire(sc.second - window_s + 1);
    if (sc.n_K > 0) {
      p.q_K = static_cast<double>(sc.m_K) / static_cast<double>(sc.n_K);
      rk.push(sc.second, *p.q_K);
    }
    if (sc.n_C > 0) {
      p.q_C = static_cast<double>(sc.m_C) / static_cast<double>(sc.n_C);
      rc.push(sc.second, *p.q_C);
    }
    std::tie(p.mean_K, p.sd_K) = rk.stats();
    std::tie(p.mean_C, p.sd_C) = rc.stats();
    out.points.push_back(p);
  }
  out.overall_K = nk ? static_cast<double>(mk) / static_cast<double>(nk) : 0.0;
  out.overall_C = nc ? static_cast<double>(mc) / static_cast<double>(nc) : 0.0;
  return out;
}

inline QberSeries qber_series(std::span<const SiftedPair> pairs, std::int64_t window_s) {
  std::vector<SiftedPair> sorted(pairs.begin(), pairs.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.second < b.second; });
  std::vector<SecondCounts> seconds;
  for (const auto& p : sorted) {
    if (seconds.empty() || seconds.back().second != p.second) seconds.push_back(SecondCounts{p.second});
    auto& sc = seconds.back();
    if (p.basis == BasisId::K) {
      ++sc.n_K;
      sc.m_K += p.error();
    } else {
      ++sc.n_C;
      sc.m_C += p.error();
    }
  }
  return qber_series_from_counts(seconds, window_s);
}

// ---------------------------------------------------------------------------
// Finite-key analysis

inline double binary_entropy(double x) {
  if (!(x >= 0.0 && x <= 1.0)) throw std::domain_error("binary_entropy: argument outside [0,1]");
  if (x == 0.0 || x == 1.0) return 0.0;
  return -x * std::log2(x) - (1.0 - x) * std::log2(1.0 - x);
}

/// Probability that a pulse carries n photons, averaged over both intensities.
inline double tau_n(unsigned n, const ProtocolParams& p) {
  const auto term = [n](double k) {
    if (k == 0.0) return n == 0 ? 1.0 : 0.0;
    return std::exp(-k + n * std::log(k) - std::lgamma(n + 1.0));
  };
  return p.p_signal * term(p.mu) + (1.0 - p.p_signal) * term(p.nu);
}

inline double hoeffding_delta(double total, double eps) {
  return std::sqrt(0.5 * total * std::log(1.0 / eps));
}

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

/// Hoeffding interval on a count, rescaled by e^k / p_k. A class that is never
/// sent (p_k = 0) carries no information and gives (-inf, +inf).
inline Interval finite_size_bounds(double count, double total, double eps, double intensity_k,
                                   double p_k) {
  if (!(p_k > 0.0)) return {-INFINITY, INFINITY};
  const double delta = eps >= 1.0 ? 0.0 : hoeffding_delta(total, eps);
  const double scale = std::exp(intensity_k) / p_k;
  return {scale * (count - delta), scale * (count + delta)};
}

/// Each Hoeffding invocation gets an equal share of eps_sec.
inline constexpr double kEpsilonTerms = 19.0;

struct BasisBounds {
  double n_mu_plus = 0.0;   // upper bound, signal, rescaled
  double n_nu_minus = 0.0;  // lower bound, decoy, rescaled
  double s0_low = 0.0;
  double s0_up = 0.0;
  double s1_low = 0.0;
};

struct DecoyBounds {
  double tau0 = 0.0;
  double tau1 = 0.0;
  double eps_term = 0.0;
  BasisBounds K;
  BasisBounds C;
  double m_C_mu_plus = 0.0;
  double m_C_nu_minus = 0.0;
  double v_C1_up = 0.0;
  std::vector<std::string> warnings;

  double s_K0_low() const noexcept { return K.s0_low; }
  double s_K0_up() const noexcept { return K.s0_up; }
  double s_K1_low() const noexcept { return K.s1_low; }
  double s_C1_low() const noexcept { return C.s1_low; }
};

namespace detail {
inline double clamp_count(double v, double hi) noexcept {
  if (std::isnan(v)) return 0.0;
  return std::clamp(v, 0.0, std::max(hi, 0.0));
}
}  // namespace detail

template <class T>
DecoyBounds decoy_bounds(const BasicCountTable<T>& t, const ProtocolParams& p) {
  const double mu = p.mu, nu = p.nu;
  if (!(mu > nu)) throw std::invalid_argument("decoy_bounds: mu must exceed nu");
  const double p_mu = p.p_signal, p_nu = 1.0 - p.p_signal;
  DecoyBounds out;
  out.tau0 = tau_n(0, p);
  out.tau1 = tau_n(1, p);
  out.eps_term = p.eps_sec / kEpsilonTerms;
  const double e = out.eps_term;

  const auto basis = [&](BasisId b) {
    BasisBounds bb;
    const double n_tot = static_cast<double>(t.n_total(b));
    const double m_tot = static_cast<double>(t.m_total(b));
    const double n_mu = static_cast<double>(t.detections(b, IntensityClass::Signal));
    const double n_nu = static_cast<double>(t.detections(b, IntensityClass::Decoy));
    if (n_mu == 0 || n_nu == 0)
      out.warnings.push_back(std::string("basis ") + to_char(b) + ": " +
                             (n_mu == 0 ? "signal" : "decoy") + " cells empty, bounds degenerate");
    bb.n_mu_plus = finite_size_bounds(n_mu, n_tot, e, mu, p_mu).high;
    bb.n_nu_minus = finite_size_bounds(n_nu, n_tot, e, nu, p_nu).low;
    const double s0_low = out.tau0 * (mu * bb.n_nu_minus - nu * bb.n_mu_plus) / (mu - nu);
    const double s0_up = 2.0 * (m_tot + hoeffding_delta(m_tot, e));
    const double s1_low = out.tau1 * mu / (nu * (mu - nu)) *
                          (bb.n_nu_minus - (nu * nu) / (mu * mu) * bb.n_mu_plus -
                           (mu * mu - nu * nu) / (mu * mu) * (s0_up / out.tau0));
    bb.s0_low = detail::clamp_count(s0_low, n_tot);
    bb.s0_up = detail::clamp_count(s0_up, n_tot);
    bb.s1_low = detail::clamp_count(s1_low, n_tot);
    return bb;
  };
  out.K = basis(BasisId::K);
  out.C = basis(BasisId::C);

  const double m_c_tot = static_cast<double>(t.m_total(BasisId::C));
  out.m_C_mu_plus =
      finite_size_bounds(static_cast<double>(t.errors(BasisId::C, IntensityClass::Signal)), m_c_tot, e, mu, p_mu).high;
  out.m_C_nu_minus =
      finite_size_bounds(static_cast<double>(t.errors(BasisId::C, IntensityClass::Decoy)), m_c_tot, e, nu, p_nu).low;
  out.v_C1_up = detail::clamp_count(out.tau1 * (out.m_C_mu_plus - out.m_C_nu_minus) / (mu - nu),
                                    static_cast<double>(t.n_total(BasisId::C)));
  return out;
}

/// Statistical correction for estimating the K-basis phase error from C-basis
/// single-photon errors by sampling without replacement.
inline double gamma_correction(double a, double b, double c, double d) {
  if (!(b > 0.0 && b < 1.0) || !(c > 0.0) || !(d > 0.0)) return 0.0;
  const double inner = (c + d) / (c * d * (1.0 - b) * b) * (21.0 / a) * (21.0 / a);
  const double v = (c + d) * (1.0 - b) * b / (c * d * std::log(2.0)) * std::log2(inner);
  return v > 0.0 ? std::sqrt(v) : 0.0;
}

inline double phase_error_upper(double s_C1_low, double v_C1_up, double s_K1_low, double eps_sec) {
  if (!(s_C1_low > 0.0) || !(s_K1_low > 0.0)) return 0.5;
  const double ratio = v_C1_up / s_C1_low;
  if (ratio >= 0.5) return 0.5;
  const double phi = ratio + gamma_correction(eps_sec, ratio, s_C1_low, s_K1_low);
  return std::clamp(phi, 0.0, 0.5);
}

inline double ec_leakage(double n_K, double Q_K, double f_ec) { return f_ec * n_K * binary_entropy(Q_K); }

inline double confirmation_leakage(double eps_cor) { return std::ceil(std::log2(1.0 / eps_cor)); }

/// Bits charged for the eps_sec terms of privacy amplification.
inline double secrecy_penalty(double eps_sec) { return 6.0 * std::log2(kEpsilonTerms / eps_sec); }

struct SecurityAccounting {
  double s_K0_low = 0.0;
  double s_K1_low = 0.0;
  double phi_K_up = 0.5;
  double n_K = 0.0;
  double Q_K = 0.0;
  double lambda_EC = 0.0;
  double lambda_conf = 0.0;
  double secrecy_penalty = 0.0;
  double eps_sec = 0.0;
  double eps_cor = 0.0;
  double secret_length = 0.0;  // bits, floored and clamped at zero
  double duration = 0.0;       // s
  double skr = 0.0;            // bit/s
};

struct KeyAnalysis {
  DecoyBounds bounds;
  SecurityAccounting accounting;
};

inline SecurityAccounting secret_key_length(const DecoyBounds& b, double n_K, double Q_K,
                                            const ProtocolParams& p, double t) {
  if (!(t > 0.0)) throw std::invalid_argument("secret_key_length: duration must be > 0");
  SecurityAccounting a;
  a.s_K0_low = b.s_K0_low();
  a.s_K1_low = b.s_K1_low();
  a.phi_K_up = phase_error_upper(b.s_C1_low(), b.v_C1_up, b.s_K1_low(), p.eps_sec);
  a.n_K = n_K;
  a.Q_K = Q_K;
  a.lambda_EC = ec_leakage(n_K, Q_K, p.f_ec);
  a.lambda_conf = confirmation_leakage(p.eps_cor);
  a.secrecy_penalty = secrecy_penalty(p.eps_sec);
  a.eps_sec = p.eps_sec;
  a.eps_cor = p.eps_cor;
  const double raw = a.s_K0_low + a.s_K1_low * (1.0 - binary_entropy(a.phi_K_up)) - a.lambda_EC -
                     a.lambda_conf - a.secrecy_penalty;
  a.secret_length = std::max(0.0, std::floor(raw));
  a.duration = t;
  a.skr = a.secret_length / t;
  return a;
}

template <class T>
KeyAnalysis analyze_counts(const BasicCountTable<T>& table, const ProtocolParams& p, double t) {
  KeyAnalysis k;
  k.bounds = decoy_bounds(table, p);
  const double n_K = static_cast<double>(table.n_total(BasisId::K));
  const double Q_K = n_K > 0 ? static_cast<double>(table.m_total(BasisId::K)) / n_K : 0.0;
  k.accounting = secret_key_length(k.bounds, n_K, Q_K, p, t);
  return k;
}

}  // namespace qkd
