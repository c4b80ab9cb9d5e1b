#pragma once

// End-to-end runs: simulate, analyze stored data, loss sweeps and sync trials.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "qkd/channel.hpp"
#include "qkd/config.hpp"
#include "qkd/event_io.hpp"
#include "qkd/postproc.hpp"
#include "qkd/random.hpp"
#include "qkd/receiver.hpp"
#include "qkd/sync.hpp"
#include "qkd/transmitter.hpp"
#include "qkd/types.hpp"

namespace qkd {

class SyncFailure : public std::runtime_error {
 public:
  SyncFailure(const std::string& what, FoldedHistogram hist)
      : std::runtime_error(what), histogram(std::move(hist)) {}
  FoldedHistogram histogram;
};

using RecordLookup = std::function<std::optional<PulseRecord>(std::uint64_t)>;

/// Detections attributed to each emitted photon number, from simulation labels.
struct GroundTruthTally {
  std::uint64_t vacuum_K = 0;
  std::uint64_t single_K = 0;
  std::uint64_t single_C = 0;
  std::uint64_t single_C_errors = 0;

  double single_photon_error_rate() const noexcept {
    return single_C ? static_cast<double>(single_C_errors) / static_cast<double>(single_C) : 0.0;
  }
};

struct SyncReport {
  PeriodEstimate period;
  SyncSolution solution;
  std::uint64_t acquisition_events = 0;
  std::uint64_t acquisition_filtered = 0;
  double tracked_shift = 0.0;  // s, total phase correction applied after acquisition
};

/// Streaming Bob-side chain: buffer the acquisition interval, synchronize,
/// then filter and sift everything that follows.
class StreamProcessor {
 public:
  StreamProcessor(const ValidatedParams& params, std::shared_ptr<const SyncString> sync,
                  RecordLookup alice, std::uint64_t seed)
      : params_(*params),
        sync_(std::move(sync)),
        alice_(std::move(alice)),
        seed_(seed),
        acquisition_ps_(std::min(params->sync_acquisition, params->duration) * 1e12) {}

  /// Called for every pulse whose record Alice reveals.
  void on_announce(std::function<void(const PulseRecord&)> f) { announce_ = std::move(f); }
  void on_kept(std::function<void(const PulseRecord&, const SiftedPair&)> f) { kept_ = std::move(f); }

  /// `events` must continue the time-ordered stream.
  void feed(std::span<const TimeTag> events) {
    total_ += events.size();
    if (no_signal_) return;
    if (sifter_) {
      process(events);
      return;
    }
    std::size_t split = 0;
    while (split < events.size() && static_cast<double>(events[split].timestamp_ps) < acquisition_ps_) ++split;
    buffer_.insert(buffer_.end(), events.begin(), events.begin() + static_cast<std::ptrdiff_t>(split));
    if (split == events.size()) return;
    synchronize();
    process(events.subspan(split));
  }

  void finish() {
    if (!sifter_ && !no_signal_) synchronize();
    if (sifter_) sifter_->finish();
  }

  /// True when the acquisition showed no periodic structure at all.
  bool no_signal() const noexcept { return no_signal_; }

  const SyncReport& sync_report() const { return sync_report_; }
  const FoldedHistogram& histogram() const { return histogram_; }
  std::uint64_t total_events() const noexcept { return total_; }
  std::uint64_t filtered_events() const noexcept { return filtered_; }
  const CountTable& table() const { return sifter_ ? sifter_->table() : empty_table_; }
  const SiftCounters& counters() const { return sifter_ ? sifter_->counters() : empty_counters_; }
  const std::vector<SecondCounts>& seconds() const { return sifter_ ? sifter_->seconds() : empty_seconds_; }

 private:
  void synchronize() {
    const double nominal = 1.0 / params_.pulse_rate;
    const auto bins = static_cast<std::size_t>(params_.histogram_bins);
    sync_report_.acquisition_events = buffer_.size();
    sync_report_.period = recover_period(buffer_, nominal, params_.sync_search_ppm);
    const double period = sync_report_.period.success ? sync_report_.period.period : nominal;
    histogram_ = fold_histogram(buffer_, period, bins);
    if (!sync_report_.period.success) {
      // Nothing periodic to lock onto: the link carries no usable signal.
      no_signal_ = true;
      buffer_.clear();
      buffer_.shrink_to_fit();
      return;
    }
    const double center = find_peak_center(buffer_, period, bins, 0.5 * params_.filter_window);
    window_ = TemporalWindow{period, center, params_.filter_window};
    const auto filtered = temporal_filter(buffer_, window_);
    sync_report_.acquisition_filtered = filtered.size();
    sync_report_.solution = recover_offset(filtered, *sync_, period, center,
                                           default_offset_search(*sync_, period, params_));
    sync_report_.solution.period_significance = sync_report_.period.significance;
    if (!sync_report_.solution.success)
      throw SyncFailure("sync failure: offset correlation below threshold (score " +
                            std::to_string(sync_report_.solution.correlation_score) + ", floor " +
                            std::to_string(sync_report_.solution.noise_floor) + ")",
                        histogram_);
    sifter_.emplace(alice_, sync_report_.solution, sync_->size(), seed_, false);
    if (announce_) sifter_->on_announce(announce_);
    if (kept_) sifter_->on_kept(kept_);
    filtered_ += filtered.size();
    sifter_->feed(filtered);
    next_retime_ps_ = acquisition_ps_;
    buffer_.clear();
    buffer_.shrink_to_fit();
  }

  void process(std::span<const TimeTag> events) {
    scratch_.clear();
    const double period_ps = window_.period * 1e12;
    for (const auto& e : events) {
      if (static_cast<double>(e.timestamp_ps) >= next_retime_ps_) retime(e.timestamp_ps);
      if (!window_.contains(e.timestamp_ps)) continue;
      scratch_.push_back(e);
      residual_sum_ += detail::circular_delta(detail::folded_phase_ps(e.timestamp_ps, period_ps),
                                              window_.center * 1e12, period_ps);
      ++residual_count_;
    }
    filtered_ += scratch_.size();
    sifter_->feed(scratch_);
  }

  // First-order phase tracking: once per interval, move the window and the
  // slot mapping onto the mean residual of the events just filtered. This
  // absorbs the slow walk left by the residual period error. Events already
  // in scratch_ are flushed first so each is sifted under the timing that
  // filtered it.
  void retime(std::uint64_t now_ps) {
    next_retime_ps_ = static_cast<double>(now_ps) + kRetimeInterval * 1e12;
    if (residual_count_ >= kRetimeMinEvents) {
      sifter_->feed(scratch_);
      filtered_ += scratch_.size();
      scratch_.clear();
      const double shift = residual_sum_ / static_cast<double>(residual_count_) * 1e-12;
      window_.center += shift;
      sync_report_.tracked_shift += shift;
      auto timing = sync_report_.solution;
      timing.phase_center = window_.center;
      sifter_->retime(timing);
    }
    residual_sum_ = 0.0;
    residual_count_ = 0;
  }

  static constexpr double kRetimeInterval = 1.0;  // s of Bob time
  static constexpr std::uint64_t kRetimeMinEvents = 100;

  ProtocolParams params_;
  std::shared_ptr<const SyncString> sync_;
  RecordLookup alice_;
  std::uint64_t seed_;
  double acquisition_ps_;
  std::vector<TimeTag> buffer_;
  std::vector<TimeTag> scratch_;
  TemporalWindow window_;
  FoldedHistogram histogram_;
  SyncReport sync_report_;
  std::optional<Sifter<RecordLookup>> sifter_;
  std::function<void(const PulseRecord&)> announce_;
  std::function<void(const PulseRecord&, const SiftedPair&)> kept_;
  std::uint64_t total_ = 0;
  std::uint64_t filtered_ = 0;
  bool no_signal_ = false;
  double next_retime_ps_ = 0.0;
  double residual_sum_ = 0.0;  // ps
  std::uint64_t residual_count_ = 0;
  CountTable empty_table_;
  SiftCounters empty_counters_;
  std::vector<SecondCounts> empty_seconds_;
};

struct RunOptions {
  std::uint64_t seed = 1;
  std::optional<std::filesystem::path> out_dir;
  bool write_truth_csv = false;
  std::uint64_t dump_pulses = 0;  // first N pulses to pulses.csv
  bool tally_truth = false;
  SimulatorOptions simulator{.record_truth = false};  // labels only when a consumer needs them
};

struct RunReport {
  ProtocolParams params;
  std::uint64_t seed = 0;
  std::uint64_t raw_events = 0;
  std::uint64_t filtered_events = 0;
  SiftCounters counters;
  CountTable table;
  double Q_K = 0.0;
  double Q_C = 0.0;
  double sifted_rate = 0.0;  // key-basis sifted detections per second
  SyncReport sync;
  KeyAnalysis run;           // accounting on the counts of this run
  KeyAnalysis extrapolated;  // same rates, one key block of key_block_duration
  double extrapolation_factor = 1.0;
  std::optional<GroundTruthTally> truth;
  double runtime_s = 0.0;

  bool no_signal = false;

  bool has_key() const noexcept { return extrapolated.accounting.secret_length > 0.0; }
  std::string status() const {
    if (has_key()) return "secret key";
    return no_signal ? "no secret key (no signal)" : "no secret key";
  }
};

/// Key accounting for a count table gathered over `duration`, at this
/// duration and scaled to one key block.
inline void fill_accounting(RunReport& r, const ProtocolParams& p) {
  const double duration = p.duration;
  if (!(duration > 0.0)) return;
  r.Q_K = r.table.qber(BasisId::K);
  r.Q_C = r.table.qber(BasisId::C);
  r.sifted_rate = static_cast<double>(r.table.n_total(BasisId::K)) / duration;
  r.run = analyze_counts(r.table, p, duration);
  r.extrapolation_factor = p.key_block_duration / duration;
  r.extrapolated = analyze_counts(scale_counts(r.table, r.extrapolation_factor), p, p.key_block_duration);
}

inline void write_outputs(const RunReport& report, const StreamProcessor& proc, const std::filesystem::path& dir);
inline void write_histogram_csv(const std::filesystem::path& path, const FoldedHistogram& h);

namespace detail {

inline std::filesystem::path prepare_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

/// Photon numbers of pulses with detected photons, consumed in index order.
class PhotonNumberQueue {
 public:
  void push(std::uint64_t index, std::uint32_t n) {
    auto it = queue_.end();
    while (it != queue_.begin() && std::prev(it)->first > index) --it;
    queue_.insert(it, {index, n});
  }
  std::optional<std::uint32_t> take(std::uint64_t index) {
    while (!queue_.empty() && queue_.front().first < index) queue_.pop_front();
    if (!queue_.empty() && queue_.front().first == index) return queue_.front().second;
    return std::nullopt;
  }

 private:
  std::deque<std::pair<std::uint64_t, std::uint32_t>> queue_;
};

}  // namespace detail

inline RunReport run_simulation(const ValidatedParams& params, const RunOptions& opt) {
  const auto start = std::chrono::steady_clock::now();
  const ProtocolParams& p = *params;
  auto sync = std::make_shared<const SyncString>(generate_sync_string(p.sync_string_length, sync_seed(opt.seed)));
  PulseTrain train(params, sync, opt.seed);
  const auto channel = make_channel(params);
  SimulatorOptions sim_opt = opt.simulator;
  sim_opt.record_truth = sim_opt.record_truth || opt.tally_truth || opt.write_truth_csv;
  DetectionSimulator sim(params, channel, train, opt.seed, sim_opt);

  StreamProcessor proc(params, sync, train_lookup(train), opt.seed);

  std::optional<TagWriter> tags;
  std::optional<AliceRecordWriter> records;
  std::optional<std::ofstream> truth_csv;
  if (opt.out_dir) {
    const auto dir = detail::prepare_dir(*opt.out_dir);
    tags.emplace((dir / "events.bin").string());
    records.emplace((dir / "alice_records.bin").string());
    proc.on_announce([&records](const PulseRecord& r) { records->write(r); });
    if (opt.write_truth_csv) {
      truth_csv.emplace(dir / "truth.csv");
      if (!*truth_csv) throw IoError("cannot write truth.csv");
      write_truth_header(*truth_csv);
    }
    if (opt.dump_pulses > 0) {
      std::ofstream out(dir / "pulses.csv");
      if (!out) throw IoError("cannot write pulses.csv");
      write_pulse_csv(out, train, opt.dump_pulses);
    }
  }

  GroundTruthTally tally;
  detail::PhotonNumberQueue photons;
  const double eta = total_efficiency(p);
  if (opt.tally_truth) {
    proc.on_kept([&](const PulseRecord& rec, const SiftedPair& pair) {
      auto n = photons.take(rec.index);
      if (!n) {
        const double lost_mean = mean_photon_number(rec, p) * (1.0 - eta);
        n = static_cast<std::uint32_t>(hashed_poisson(mix(opt.seed, Domain::GroundTruth, rec.index), lost_mean));
      }
      if (pair.basis == BasisId::K) {
        tally.vacuum_K += *n == 0;
        tally.single_K += *n == 1;
      } else if (*n == 1) {
        ++tally.single_C;
        tally.single_C_errors += pair.error();
      }
    });
  }

  EventBlock block;
  try {
    while (sim.next_block(block)) {
      if (tags) tags->write(block.tags);
      if (truth_csv) write_truth_rows(*truth_csv, block.tags, block.truth);
      if (opt.tally_truth)
        for (const auto& t : block.truth)
          if (t.pulse_index && t.photon_number) photons.push(*t.pulse_index, *t.photon_number);
      proc.feed(block.tags);
    }
    proc.finish();
  } catch (const SyncFailure& e) {
    if (opt.out_dir) write_histogram_csv(*opt.out_dir / "histogram.csv", e.histogram);
    throw;
  }

  RunReport r;
  r.params = p;
  r.seed = opt.seed;
  r.raw_events = proc.total_events();
  r.filtered_events = proc.filtered_events();
  r.counters = proc.counters();
  r.table = proc.table();
  r.sync = proc.sync_report();
  r.no_signal = proc.no_signal();
  fill_accounting(r, p);
  if (opt.tally_truth) r.truth = tally;
  r.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (opt.out_dir) write_outputs(r, proc, *opt.out_dir);
  return r;
}

/// Re-runs synchronization and post-processing on stored timestamps and
/// Alice's revealed records. The sync pattern is regenerated from the seed.
inline RunReport run_analysis(const ValidatedParams& params, std::uint64_t seed,
                              const std::filesystem::path& in_dir,
                              const std::optional<std::filesystem::path>& out_dir) {
  const auto start = std::chrono::steady_clock::now();
  const ProtocolParams& p = *params;
  auto sync = std::make_shared<const SyncString>(generate_sync_string(p.sync_string_length, sync_seed(seed)));
  const auto tags = read_tags((in_dir / "events.bin").string());
  auto table = std::make_shared<const AliceRecordTable>(
      read_alice_records((in_dir / "alice_records.bin").string(), p.pulse_rate));
  StreamProcessor proc(params, sync, [table](std::uint64_t i) { return (*table)(i); }, seed);
  try {
    proc.feed(tags);
    proc.finish();
  } catch (const SyncFailure& e) {
    if (out_dir) write_histogram_csv(detail::prepare_dir(*out_dir) / "histogram.csv", e.histogram);
    throw;
  }
  RunReport r;
  r.params = p;
  r.seed = seed;
  r.raw_events = proc.total_events();
  r.filtered_events = proc.filtered_events();
  r.counters = proc.counters();
  r.table = proc.table();
  r.sync = proc.sync_report();
  r.no_signal = proc.no_signal();
  fill_accounting(r, p);
  r.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (out_dir) write_outputs(r, proc, detail::prepare_dir(*out_dir));
  return r;
}

// ---------------------------------------------------------------------------
// Loss sweep

struct SweepPoint {
  double loss_db = 0.0;
  double sifted_rate = 0.0;
  double skr = 0.0;  // bit/s, key-block extrapolated
  bool synchronized = false;
  std::string message;
};

inline std::vector<double> loss_grid(double loss_min, double loss_max, double step) {
  if (!(step > 0.0)) throw ConfigError("sweep step must be > 0");
  if (!(loss_min <= loss_max)) throw ConfigError("sweep requires loss_min <= loss_max");
  if (loss_min < 0.0) throw ConfigError("sweep losses must be >= 0");
  std::vector<double> grid;
  const auto n = static_cast<std::size_t>(std::floor((loss_max - loss_min) / step + 1e-9));
  for (std::size_t i = 0; i <= n; ++i) grid.push_back(loss_min + static_cast<double>(i) * step);
  return grid;
}

/// Every point reuses the base seed, so the point at a given loss matches a
/// standalone simulate at that loss.
inline std::vector<SweepPoint> run_sweep(const ProtocolParams& base, std::span<const double> losses,
                                         std::uint64_t seed, unsigned workers = 1) {
  std::vector<SweepPoint> out(losses.size());
  std::vector<ValidatedParams> params;
  params.reserve(losses.size());
  for (double loss : losses) {
    ProtocolParams p = base;
    p.channel_loss_db = loss;
    params.push_back(validate_params(p));
  }
  std::mutex mu;
  std::size_t next = 0;
  const auto work = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= losses.size()) return;
        i = next++;
      }
      SweepPoint& pt = out[i];
      pt.loss_db = losses[i];
      try {
        RunOptions opt;
        opt.seed = seed;
        const auto r = run_simulation(params[i], opt);
        pt.synchronized = true;
        pt.sifted_rate = r.sifted_rate;
        pt.skr = r.extrapolated.accounting.skr;
      } catch (const SyncFailure& e) {
        pt.message = e.what();
      }
    }
  };
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(losses.size())));
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  return out;
}

inline void write_sweep_csv(std::ostream& out, std::span<const SweepPoint> points) {
  out << "loss_db,sifted_rate,skr\n";
  out << std::setprecision(10);
  for (const auto& p : points) out << p.loss_db << ',' << p.sifted_rate << ',' << p.skr << '\n';
}

// ---------------------------------------------------------------------------
// Synchronization trials

struct SyncTrialOptions {
  double drift_ppm = 0.0;
  std::optional<double> offset;  // s; drawn per trial so that propagation + offset < sync_max_delay
  std::size_t trials = 20;
  std::uint64_t seed = 1;
  double duration = 0.5;  // s simulated per trial, all of it used for acquisition
  double max_period_error = 1e-9;
};

struct SyncTrial {
  std::size_t trial = 0;
  double drift_ppm = 0.0;
  double offset = 0.0;
  std::uint64_t events = 0;
  double period_error = 0.0;  // relative
  std::int64_t offset_pulses = 0;
  std::int64_t true_offset_pulses = 0;
  bool period_ok = false;
  bool offset_ok = false;
  bool success = false;
  std::string failure;
};

struct SyncTrialSummary {
  std::vector<SyncTrial> trials;
  std::size_t successes = 0;
  double success_rate() const noexcept {
    return trials.empty() ? 0.0 : static_cast<double>(successes) / static_cast<double>(trials.size());
  }
};

/// Simulates fresh acquisitions and scores the recovered period against the
/// true Bob-clock period and every filtered labeled detection against its
/// true pulse index.
inline SyncTrial run_sync_trial(const ProtocolParams& base, const SyncTrialOptions& opt, std::size_t t) {
  if (!(opt.duration > 0.0)) throw ConfigError("sync trial duration must be > 0");
  const auto trial_seed = mix(opt.seed, Domain::Trial, t);
  Rng rng(mix(trial_seed, Domain::Trial));
  ProtocolParams p = base;
  p.duration = opt.duration;
  p.sync_acquisition = opt.duration;
  p.clock_drift_ppm = opt.drift_ppm;
  p.clock_offset = opt.offset ? *opt.offset : rng.uniform() * std::max(0.0, p.sync_max_delay - p.propagation_delay);
  const auto params = validate_params(p);

  SyncTrial res;
  res.trial = t;
  res.drift_ppm = opt.drift_ppm;
  res.offset = p.clock_offset;

  auto sync = std::make_shared<const SyncString>(generate_sync_string(p.sync_string_length, sync_seed(trial_seed)));
  PulseTrain train(params, sync, trial_seed);
  SimulatorOptions so;
  so.record_truth = true;
  const auto channel = make_channel(params);
  const auto events = simulate_detections(params, channel, train, trial_seed, so);
  res.events = events.size();

  const double nominal = 1.0 / p.pulse_rate;
  const double true_period = nominal * (1.0 + channel.clock_drift);
  const auto est = recover_period(events.tags, nominal, p.sync_search_ppm);
  res.period_error = std::abs(est.period / true_period - 1.0);
  res.period_ok = est.success && res.period_error < opt.max_period_error;
  if (!est.success) {
    res.failure = "period not found";
    return res;
  }
  const auto bins = static_cast<std::size_t>(p.histogram_bins);
  const double center = find_peak_center(events.tags, est.period, bins, 0.5 * p.filter_window);
  const TemporalWindow window{est.period, center, p.filter_window};
  std::vector<TimeTag> filtered;
  std::vector<GroundTruth> labels;
  for (std::size_t i = 0; i < events.size(); ++i)
    if (window.contains(events.tags[i].timestamp_ps)) {
      filtered.push_back(events.tags[i]);
      labels.push_back(events.truth[i]);
    }
  const auto sol = recover_offset(filtered, *sync, est.period, center, default_offset_search(*sync, est.period, p));
  res.offset_pulses = sol.offset_pulses;
  bool all_match = sol.success;
  std::optional<std::int64_t> true_offset;
  for (std::size_t i = 0; i < filtered.size(); ++i) {
    if (!labels[i].pulse_index) continue;
    const auto idx = static_cast<std::int64_t>(*labels[i].pulse_index);
    if (!true_offset) true_offset = sol.slot_of(filtered[i].timestamp_ps) - idx;
    if (sol.pulse_index(filtered[i].timestamp_ps) != idx) all_match = false;
  }
  res.true_offset_pulses = true_offset.value_or(0);
  res.offset_ok = all_match && true_offset.has_value();
  res.success = res.period_ok && res.offset_ok;
  if (!res.success)
    res.failure = !res.period_ok ? "period error " + std::to_string(res.period_error)
                  : !sol.success ? "offset correlation below threshold"
                                 : "offset mismatch";
  return res;
}

inline SyncTrialSummary run_sync_test(const ProtocolParams& base, const SyncTrialOptions& opt) {
  if (opt.trials < 1) throw ConfigError("sync-test needs at least one trial");
  SyncTrialSummary s;
  for (std::size_t t = 0; t < opt.trials; ++t) {
    s.trials.push_back(run_sync_trial(base, opt, t));
    s.successes += s.trials.back().success;
  }
  return s;
}

}  // namespace qkd

#include "qkd/report.hpp"
