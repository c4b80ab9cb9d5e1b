#pragma once

// Bob's passive-basis analyzer and four free-running threshold detectors.
//
// Two sampling paths produce the same event distribution:
//  * SkipSampling jumps between candidate pulses with geometric gaps at the
//    signal-intensity any-click probability, thins decoy candidates, and then
//    routes the (nonzero) detected photons to detectors. The any-click
//    probability of a pulse does not depend on its polarization because the
//    four analyzer projections sum to one.
//  * NaiveBernoulli visits every pulse and flips an independent coin per
//    detector. It is the reference used to validate the fast path.
//
// Dark counts are a Poisson process per detector on Bob's clock. Hold-off and
// afterpulsing act on the merged, time-ordered stream of each detector.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <queue>
#include <stdexcept>
#include <vector>

#include "qkd/channel.hpp"
#include "qkd/random.hpp"
#include "qkd/transmitter.hpp"
#include "qkd/types.hpp"

namespace qkd {

enum class DetectorId : std::uint8_t { L = 0, R = 1, D = 2, A = 3 };

inline constexpr std::array<DetectorId, 4> kDetectors = {DetectorId::L, DetectorId::R,
                                                         DetectorId::D, DetectorId::A};

constexpr std::size_t index_of(DetectorId d) noexcept { return static_cast<std::size_t>(d); }

constexpr StateSymbol outcome_of(DetectorId d) noexcept {
  switch (d) {
    case DetectorId::L: return StateSymbol::L;
    case DetectorId::R: return StateSymbol::R;
    case DetectorId::D: return StateSymbol::D;
    case DetectorId::A: return StateSymbol::A;
  }
  return StateSymbol::D;
}

constexpr BasisId basis_of(DetectorId d) noexcept { return basis_of(outcome_of(d)); }

constexpr StokesVector analyzer_axis(DetectorId d) noexcept { return state_to_stokes(outcome_of(d)); }

constexpr bool is_valid_detector(std::uint8_t raw) noexcept { return raw <= 3; }

/// What the time-to-digital converter records. Sync and post-processing only
/// ever see these.
struct TimeTag {
  std::uint64_t timestamp_ps = 0;
  DetectorId detector = DetectorId::L;

  double timestamp() const noexcept { return static_cast<double>(timestamp_ps) * 1e-12; }
  auto operator<=>(const TimeTag&) const = default;
};

/// Simulation-only labels. Noise events carry neither field.
struct GroundTruth {
  std::optional<std::uint64_t> pulse_index;
  std::optional<std::uint32_t> photon_number;

  bool operator==(const GroundTruth&) const = default;
};

struct DetectionEvent {
  TimeTag tag;
  GroundTruth truth;
};

using ClickProbabilities = std::array<double, 4>;

/// Channel, receiver insertion and detector efficiency combined.
inline double total_efficiency(const ProtocolParams& p) {
  return transmittance(p.channel_loss_db) * transmittance(p.receiver_insertion_loss_db) *
         p.detector_efficiency;
}

/// Weight of each detector for an incoming state: 50:50 basis split times the
/// analyzer projection. The four weights sum to one.
inline std::array<double, 4> detector_weights(const StokesVector& s_in) noexcept {
  std::array<double, 4> w{};
  for (auto d : kDetectors) w[index_of(d)] = 0.5 * projection_probability(s_in, analyzer_axis(d));
  return w;
}

inline ClickProbabilities click_probabilities(const StokesVector& s_in, double mean_photons,
                                              double eta_total) noexcept {
  ClickProbabilities p{};
  const auto w = detector_weights(s_in);
  for (std::size_t d = 0; d < 4; ++d) p[d] = -std::expm1(-mean_photons * eta_total * w[d]);
  return p;
}

inline ClickProbabilities click_probabilities(const StokesVector& s_in, double mean_photons,
                                              const ProtocolParams& params) {
  return click_probabilities(s_in, mean_photons, total_efficiency(params));
}

/// First candidate index >= `index` when each pulse independently succeeds
/// with probability `p_click`. Consecutive calls from (previous + 1) give
/// geometric gaps with mean 1/p_click.
inline std::uint64_t skip_sample_next(std::uint64_t index, double p_click, Rng& rng) {
  if (!(p_click > 0.0 && p_click < 1.0))
    throw std::invalid_argument("skip_sample_next requires 0 < p_click < 1");
  const double failures = std::floor(std::log(rng.uniform_open()) / std::log1p(-p_click));
  constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
  if (!(failures < static_cast<double>(kMax - index))) return kMax;
  return index + static_cast<std::uint64_t>(failures);
}

inline constexpr double kFwhmToSigma = 0.42466090014400953;  // 1 / (2 sqrt(2 ln 2))

/// Gaussian timing spread of a detection: optical pulse width combined with
/// detector jitter.
inline double timing_sigma(const ProtocolParams& p) noexcept {
  return std::hypot(p.pulse_fwhm, p.detector_jitter_fwhm) * kFwhmToSigma;
}

struct SimulatorOptions {
  enum class Path { SkipSampling, NaiveBernoulli };
  Path path = Path::SkipSampling;
  bool record_truth = true;
  bool dark_counts = true;
  bool hold_off = true;
  std::uint64_t block_pulses = std::uint64_t{1} << 24;
};

struct EventBlock {
  std::vector<TimeTag> tags;
  std::vector<GroundTruth> truth;  // parallel to tags when truth is recorded

  std::size_t size() const noexcept { return tags.size(); }
  void clear() {
    tags.clear();
    truth.clear();
  }
  void append(const EventBlock& o) {
    tags.insert(tags.end(), o.tags.begin(), o.tags.end());
    truth.insert(truth.end(), o.truth.begin(), o.truth.end());
  }
};

/// Pulls time-ordered detection events block by block. Each block of pulses
/// draws from its own RNG substream derived from (seed, block index), so the
/// output is a pure function of (params, channel, train, seed, options).
class DetectionSimulator {
 public:
  DetectionSimulator(const ValidatedParams& params, const ChannelModel& channel, PulseTrain train,
                     std::uint64_t seed, SimulatorOptions options = {})
      : params_(*params),
        channel_(channel),
        train_(std::move(train)),
        seed_(seed),
        options_(options),
        eta_(total_efficiency(*params)),
        sigma_ps_(timing_sigma(*params) * 1e12),
        period_ps_(1e12 / params->pulse_rate),
        delay_ps_((channel.propagation_delay + channel.clock_offset) * 1e12),
        hold_off_ps_(static_cast<std::int64_t>(std::llround(params->hold_off * 1e12))),
        afterpulse_rng_(mix(seed, Domain::DarkCount, ~std::uint64_t{0})) {
    if (options_.block_pulses == 0) throw std::invalid_argument("block_pulses must be > 0");
    last_click_.fill(std::numeric_limits<std::int64_t>::min() / 2);
    const auto n = train_.size();
    n_blocks_ = n == 0 ? 1 : (n + options_.block_pulses - 1) / options_.block_pulses;
    k_max_ = params_.p_signal > 0.0 ? params_.mu : params_.nu;
    p_max_ = -std::expm1(-k_max_ * eta_);
  }

  /// Replaces `out` with the next batch of events. Returns false once the
  /// stream is exhausted (and `out` is empty).
  bool next_block(EventBlock& out) {
    out.clear();
    while (out.tags.empty()) {
      if (block_ >= n_blocks_) return false;
      produce_block(out);
    }
    return true;
  }

  EventBlock run_all() {
    EventBlock all, block;
    while (next_block(block)) all.append(block);
    return all;
  }

  /// Signal clicks per detector before hold-off (dark counts excluded).
  const std::array<std::uint64_t, 4>& raw_signal_clicks() const noexcept { return raw_clicks_; }

  /// Bob-clock arrival time of pulse `index` in picoseconds (no jitter).
  double arrival_ps(std::uint64_t index) const noexcept {
    return (1.0 + channel_.clock_drift) * static_cast<double>(index) * period_ps_ + delay_ps_;
  }

  const PulseTrain& train() const noexcept { return train_; }
  double efficiency() const noexcept { return eta_; }

 private:
  struct Pending {
    std::int64_t t_ps;
    DetectorId detector;
    GroundTruth truth;

    bool operator<(const Pending& o) const noexcept {
      return t_ps != o.t_ps ? t_ps < o.t_ps : detector < o.detector;
    }
    bool operator>(const Pending& o) const noexcept { return o < *this; }
  };

  void emit_click(std::uint64_t index, DetectorId d, double mean_ps, std::optional<std::uint32_t> n,
                  Rng& rng, std::vector<Pending>& sink) {
    ++raw_clicks_[index_of(d)];
    const double t = mean_ps + sigma_ps_ * rng.normal();
    const auto t_ps = static_cast<std::int64_t>(std::llround(t));
    if (t_ps < 0) return;  // before Bob's recording starts
    Pending e{t_ps, d, {}};
    if (options_.record_truth) e.truth = GroundTruth{index, n};
    sink.push_back(e);
  }

  void signal_skip(std::uint64_t begin, std::uint64_t end, Rng& rng, std::vector<Pending>& sink) {
    if (!(p_max_ > 0.0)) return;
    std::uint64_t i = begin;
    while (true) {
      i = p_max_ < 1.0 ? skip_sample_next(i, p_max_, rng) : i;
      if (i >= end) break;
      const auto rec = train_.at(i);
      const double k = mean_photon_number(rec, params_);
      if (k != k_max_) {
        const double accept = -std::expm1(-k * eta_) / p_max_;
        if (!rng.bernoulli(accept)) {
          ++i;
          continue;
        }
      }
      const auto s = apply_rotation(state_to_stokes(rec.state), rec.emission_time, channel_);
      const auto w = detector_weights(s);
      const auto detected = rng.poisson_nonzero(k * eta_);
      std::array<bool, 4> clicked{};
      for (std::uint64_t ph = 0; ph < detected; ++ph) {
        double u = rng.uniform();
        std::size_t d = 0;
        while (d < 3 && u >= w[d]) u -= w[d++];
        clicked[d] = true;
      }
      const auto lost = rng.poisson(k * (1.0 - eta_));
      const auto n = static_cast<std::uint32_t>(detected + lost);
      const double mean_ps = arrival_ps(i);
      for (auto d : kDetectors)
        if (clicked[index_of(d)]) emit_click(i, d, mean_ps, n, rng, sink);
      ++i;
    }
  }

  void signal_naive(std::uint64_t begin, std::uint64_t end, Rng& rng, std::vector<Pending>& sink) {
    for (std::uint64_t i = begin; i < end; ++i) {
      const auto rec = train_.at(i);
      const double k = mean_photon_number(rec, params_);
      const auto s = apply_rotation(state_to_stokes(rec.state), rec.emission_time, channel_);
      const auto p = click_probabilities(s, k, eta_);
      const double mean_ps = arrival_ps(i);
      for (auto d : kDetectors)
        if (rng.uniform() < p[index_of(d)]) emit_click(i, d, mean_ps, std::nullopt, rng, sink);
    }
  }

  void dark(std::int64_t lo_ps, std::int64_t hi_ps, std::vector<Pending>& sink) const {
    if (!(params_.dark_rate > 0.0) || hi_ps <= lo_ps) return;
    const double rate_per_ps = params_.dark_rate * 1e-12;
    for (auto d : kDetectors) {
      Rng rng(mix(seed_, Domain::DarkCount, block_, index_of(d)));
      double t = static_cast<double>(lo_ps);
      while (true) {
        t += rng.exponential(rate_per_ps);
        if (!(t < static_cast<double>(hi_ps))) break;
        sink.push_back(Pending{static_cast<std::int64_t>(t), d, {}});
      }
    }
  }

  void accept(const Pending& e, EventBlock& out) {
    const auto di = index_of(e.detector);
    if (options_.hold_off && e.t_ps - last_click_[di] < hold_off_ps_) return;
    last_click_[di] = e.t_ps;
    out.tags.push_back(TimeTag{static_cast<std::uint64_t>(e.t_ps), e.detector});
    if (options_.record_truth) out.truth.push_back(e.truth);
    if (params_.afterpulse_prob > 0.0 && afterpulse_rng_.bernoulli(params_.afterpulse_prob)) {
      const double tail = afterpulse_rng_.exponential(1.0 / (params_.afterpulse_time_constant * 1e12));
      afterpulses_.push(Pending{e.t_ps + hold_off_ps_ + static_cast<std::int64_t>(tail), e.detector, {}});
    }
  }

  void produce_block(EventBlock& out) {
    const auto n = train_.size();
    const auto begin = std::min(block_ * options_.block_pulses, n);
    const auto end = std::min(begin + options_.block_pulses, n);
    const bool last = block_ + 1 == n_blocks_;

    std::vector<Pending> pending = std::move(carry_);
    carry_.clear();
    Rng rng(mix(seed_, Domain::SignalBlock, block_));
    if (options_.path == SimulatorOptions::Path::SkipSampling)
      signal_skip(begin, end, rng, pending);
    else
      signal_naive(begin, end, rng, pending);

    const auto lo_ps = block_ == 0 ? std::int64_t{0} : block_edge_ps(begin);
    const auto hi_ps = block_edge_ps(end);
    if (options_.dark_counts) dark(lo_ps, hi_ps, pending);
    std::sort(pending.begin(), pending.end());

    // Signal events from the next block can jitter a few sigma below its edge.
    constexpr std::int64_t kMarginPs = 5000;
    const auto boundary = last ? std::numeric_limits<std::int64_t>::max() : hi_ps - kMarginPs;
    auto it = pending.begin();
    for (;;) {
      const bool have_pending = it != pending.end() && it->t_ps < boundary;
      const bool have_ap = !afterpulses_.empty() && afterpulses_.top().t_ps < boundary;
      if (!have_pending && !have_ap) break;
      if (have_ap && (!have_pending || afterpulses_.top() < *it)) {
        const Pending ap = afterpulses_.top();
        afterpulses_.pop();
        accept(ap, out);
      } else {
        accept(*it++, out);
      }
    }
    carry_.assign(it, pending.end());
    ++block_;
  }

  std::int64_t block_edge_ps(std::uint64_t index) const noexcept {
    return static_cast<std::int64_t>(std::llround(arrival_ps(index)));
  }

  ProtocolParams params_;
  ChannelModel channel_;
  PulseTrain train_;
  std::uint64_t seed_;
  SimulatorOptions options_;
  double eta_;
  double sigma_ps_;
  double period_ps_;
  double delay_ps_;
  std::int64_t hold_off_ps_;
  double k_max_ = 0.0;
  double p_max_ = 0.0;
  std::uint64_t n_blocks_ = 1;
  std::uint64_t block_ = 0;
  std::vector<Pending> carry_;
  std::priority_queue<Pending, std::vector<Pending>, std::greater<Pending>> afterpulses_;
  Rng afterpulse_rng_;
  std::array<std::int64_t, 4> last_click_{};
  std::array<std::uint64_t, 4> raw_clicks_{};
};

/// Convenience: simulate a whole run in memory.
inline EventBlock simulate_detections(const ValidatedParams& params, const ChannelModel& channel,
                                      const PulseTrain& train, std::uint64_t seed,
                                      SimulatorOptions options = {}) {
  DetectionSimulator sim(params, channel, train, seed, options);
  return sim.run_all();
}

}  // namespace qkd
