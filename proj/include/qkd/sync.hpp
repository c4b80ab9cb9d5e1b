#pragma once

// Clock recovery from Bob's timestamps alone.
//
// 1. recover_period: maximize the mean resultant length of the folded phases
//    over candidate periods. A coarse scan on a short prefix is followed by
//    golden-section refinement on progressively longer spans.
// 2. find_peak_center / temporal_filter: fold at the recovered period and keep
//    events within +-window/2 of the peak (circular distance).
// 3. recover_offset: correlate K-basis outcomes (L=+1, R=-1) against the
//    public sync pattern over integer pulse offsets.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <mutex>
#include <numbers>
#include <ranges>
#include <span>
#include <stdexcept>
#include <vector>

#include "qkd/receiver.hpp"
#include "qkd/transmitter.hpp"
#include "qkd/types.hpp"

namespace qkd {

namespace detail {

constexpr std::uint64_t stamp_of(const TimeTag& t) noexcept { return t.timestamp_ps; }
constexpr std::uint64_t stamp_of(std::uint64_t t) noexcept { return t; }

/// t mod period in picoseconds, in [0, period).
inline double folded_phase_ps(std::uint64_t t_ps, double period_ps) noexcept {
  const long double p = period_ps;
  long double r = std::fmod(static_cast<long double>(t_ps), p);
  if (r < 0) r += p;
  if (r >= p) r -= p;
  return static_cast<double>(r);
}

/// Signed circular difference a - b wrapped to [-period/2, period/2).
inline double circular_delta(double a, double b, double period) noexcept {
  double d = std::fmod(a - b, period);
  if (d < -0.5 * period) d += period;
  if (d >= 0.5 * period) d -= period;
  return d;
}

inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace detail

template <class R>
concept TimestampRange = std::ranges::input_range<R> && requires(std::ranges::range_value_t<R> v) {
  { detail::stamp_of(v) } -> std::convertible_to<std::uint64_t>;
};

struct FoldedHistogram {
  std::vector<std::uint64_t> bins;
  double bin_width = 0.0;  // s
  double period = 0.0;     // s
  std::size_t peak_index = 0;

  double bin_center(std::size_t b) const noexcept {
    return (static_cast<double>(b) + 0.5) * bin_width;
  }
  std::uint64_t total() const noexcept {
    std::uint64_t s = 0;
    for (auto c : bins) s += c;
    return s;
  }
};

template <TimestampRange R>
FoldedHistogram fold_histogram(const R& timestamps, double period, std::size_t n_bins) {
  if (!(period > 0.0)) throw std::invalid_argument("fold_histogram: period must be > 0");
  if (n_bins < 2) throw std::invalid_argument("fold_histogram: need at least 2 bins");
  FoldedHistogram h;
  h.bins.assign(n_bins, 0);
  h.period = period;
  h.bin_width = period / static_cast<double>(n_bins);
  const double period_ps = period * 1e12;
  const double width_ps = period_ps / static_cast<double>(n_bins);
  for (const auto& t : timestamps) {
    const double phase = detail::folded_phase_ps(detail::stamp_of(t), period_ps);
    auto b = static_cast<std::size_t>(phase / width_ps);
    if (b >= n_bins) b = n_bins - 1;
    ++h.bins[b];
  }
  h.peak_index = static_cast<std::size_t>(
      std::distance(h.bins.begin(), std::max_element(h.bins.begin(), h.bins.end())));
  return h;
}

/// Mean resultant length of the phases of timestamps relative to `origin_ps`.
inline double mean_resultant_length(std::span<const TimeTag> events, std::uint64_t origin_ps,
                                    double period_ps) noexcept {
  if (events.empty()) return 0.0;
  double c = 0.0, s = 0.0;
  const double inv = 1.0 / period_ps;
  for (const auto& e : events) {
    const double x = static_cast<double>(e.timestamp_ps - origin_ps) * inv;
    const double theta = 2.0 * std::numbers::pi * (x - std::floor(x));
    c += std::cos(theta);
    s += std::sin(theta);
  }
  return std::hypot(c, s) / static_cast<double>(events.size());
}

struct PeriodSearchOptions {
  std::size_t min_events = 1000;
  std::size_t coarse_events = 1000;       // events in the first coarse scan
  std::size_t max_coarse_events = 1 << 20;  // coarse scan gives up beyond this
  double coarse_step = 0.1;               // frequency grid spacing, in units of 1/span
  double span_growth = 16.0;             // largest span ratio between refinement stages
  double bracket_lobes = 0.9;            // refinement half-width in main-lobe widths
  double detection_threshold = 5.0;       // required R * sqrt(N)
  double relative_tolerance = 1e-14;
};

struct PeriodEstimate {
  double period = 0.0;     // s
  double sharpness = 0.0;  // mean resultant length at `period`
  double significance = 0.0;
  std::size_t events_used = 0;
  bool success = false;
};

namespace detail {

template <class F>
double golden_maximize(F&& f, double lo, double hi, double tolerance) {
  constexpr double kInvPhi = 0.6180339887498949;
  double a = lo, b = hi;
  double x1 = b - kInvPhi * (b - a), x2 = a + kInvPhi * (b - a);
  double f1 = f(x1), f2 = f(x2);
  while (b - a > tolerance) {
    if (f1 < f2) {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + kInvPhi * (b - a);
      f2 = f(x2);
    } else {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - kInvPhi * (b - a);
      f1 = f(x1);
    }
  }
  return f1 < f2 ? x2 : x1;
}

}  // namespace detail

namespace detail {

struct CoarseScan {
  double period_ps = 0.0;
  double sharpness = 0.0;
  double step_ps = 0.0;  // period spacing of the frequency grid near nominal
};

/// Mean resultant length on a grid of pulse frequencies within the search
/// range, evaluated with one FFT of phase-weighted, time-binned events. Bins
/// are short enough that the in-bin phase slip stays below pi/8.
inline CoarseScan coarse_frequency_scan(std::span<const TimeTag> events, double nominal_ps,
                                        double search_ppm, double grid_step) {
  CoarseScan out;
  out.period_ps = nominal_ps;
  const std::uint64_t origin = events.front().timestamp_ps;
  const double span_s = static_cast<double>(events.back().timestamp_ps - origin) * 1e-12;
  const double f0 = 1e12 / nominal_ps;
  const double f_max = f0 * search_ppm * 1e-6 / (1.0 - search_ppm * 1e-6);
  const double bin_s = 1.0 / (16.0 * std::max(f_max, 1.0 / std::max(span_s, 1e-12)));
  const auto n_bins = static_cast<std::size_t>(std::floor(span_s / bin_s)) + 1;
  std::size_t fft_n = 1;
  while (static_cast<double>(fft_n) < std::max(static_cast<double>(n_bins), span_s / bin_s / grid_step)) fft_n <<= 1;

  fftw_complex* buf = fftw_alloc_complex(fft_n);
  std::fill(reinterpret_cast<double*>(buf), reinterpret_cast<double*>(buf) + 2 * fft_n, 0.0);
  for (const auto& e : events) {
    const std::uint64_t dt = e.timestamp_ps - origin;
    const double theta = 2.0 * std::numbers::pi * folded_phase_ps(dt, nominal_ps) / nominal_ps;
    auto b = static_cast<std::size_t>(static_cast<double>(dt) * 1e-12 / bin_s);
    if (b >= n_bins) b = n_bins - 1;
    buf[b][0] += std::cos(theta);
    buf[b][1] += std::sin(theta);
  }
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_dft_1d(static_cast<int>(fft_n), buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
  }
  fftw_execute(plan);

  // Bin k holds frequency offset f = k / (fft_n * bin_s), i.e. 1/P = f0 - f.
  const double df = 1.0 / (static_cast<double>(fft_n) * bin_s);
  const auto k_max = static_cast<std::int64_t>(std::floor(f_max / df));
  double best_power = -1.0, best_f = 0.0;
  for (std::int64_t k = -k_max; k <= k_max; ++k) {
    const auto idx = static_cast<std::size_t>(k < 0 ? k + static_cast<std::int64_t>(fft_n) : k);
    const double power = buf[idx][0] * buf[idx][0] + buf[idx][1] * buf[idx][1];
    if (power > best_power) {
      best_power = power;
      best_f = static_cast<double>(k) * df;
    }
  }
  {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(buf);

  const auto exact_period = [&](double f) { return 1e12 / (f0 - f); };
  out.period_ps = exact_period(best_f);
  out.step_ps = std::abs(exact_period(best_f + df) - out.period_ps);
  out.sharpness = mean_resultant_length(events, origin, out.period_ps);
  return out;
}

}  // namespace detail

/// Events must be in nondecreasing timestamp order. Only time differences
/// enter the estimate, so it is exactly invariant under a global shift.
inline PeriodEstimate recover_period(std::span<const TimeTag> events, double nominal_period,
                                     double search_ppm, const PeriodSearchOptions& opt = {}) {
  if (!(nominal_period > 0.0)) throw std::invalid_argument("nominal period must be > 0");
  PeriodEstimate out;
  out.period = nominal_period;
  const std::size_t n_total = events.size();
  if (n_total < std::max<std::size_t>(opt.min_events, 2)) return out;

  const std::uint64_t origin = events.front().timestamp_ps;
  const double nominal_ps = nominal_period * 1e12;
  const auto span_of = [&](std::size_t n) {
    return static_cast<double>(events[n - 1].timestamp_ps - origin);
  };
  const auto sharpness = [&](std::size_t n, double period_ps) {
    return mean_resultant_length(events.first(n), origin, period_ps);
  };

  // Coarse scan on a prefix, widened until the peak stands out.
  std::size_t n = std::min(opt.coarse_events, n_total);
  double best = nominal_ps, step = 0.0;
  for (;;) {
    const double span = span_of(n);
    if (!(span > 0.0)) return out;
    const auto scan = detail::coarse_frequency_scan(events.first(n), nominal_ps, search_ppm, opt.coarse_step);
    best = scan.period_ps;
    step = scan.step_ps;
    out.significance = scan.sharpness * std::sqrt(static_cast<double>(n));
    if (out.significance >= opt.detection_threshold) break;
    if (n == n_total || n >= opt.max_coarse_events) {
      out.period = best * 1e-12;
      out.sharpness = scan.sharpness;
      out.events_used = n;
      return out;
    }
    n = std::min({n_total, n * 4, opt.max_coarse_events});
  }

  const auto refine = [&](std::size_t count, double center, double half_width, bool final_stage) {
    const double span = span_of(count);
    const double lobe = nominal_ps * nominal_ps / span;
    const double tol = final_stage ? opt.relative_tolerance * nominal_ps
                                   : std::max(opt.relative_tolerance * nominal_ps, 1e-3 * lobe);
    return detail::golden_maximize([&](double p) { return sharpness(count, p); },
                                   center - half_width, center + half_width, tol);
  };

  best = refine(n, best, 2.0 * step, n == n_total);
  while (n < n_total) {
    // The frequency error after a stage is about 0.4 / (R sqrt(N)) main
    // lobes; grow the span only as far as keeps it inside the next bracket.
    const double z = sharpness(n, best) * std::sqrt(static_cast<double>(n));
    const double growth = std::clamp(0.5 * z, 1.5, opt.span_growth);
    const double next_span = span_of(n) * growth;
    std::size_t next = n;
    while (next < n_total && static_cast<double>(events[next].timestamp_ps - origin) <= next_span)
      ++next;
    if (next <= n) next = n_total;
    n = next;
    const double half = opt.bracket_lobes * nominal_ps * nominal_ps / span_of(n);
    best = refine(n, best, half, n == n_total);
  }

  out.period = best * 1e-12;
  out.sharpness = sharpness(n_total, best);
  out.events_used = n_total;
  out.significance = out.sharpness * std::sqrt(static_cast<double>(n_total));
  out.success = out.significance >= opt.detection_threshold;
  return out;
}

/// Peak of the folded distribution, in seconds within [-period/2, period/2).
/// The histogram argmax is refined by the circular mean of phases within
/// `half_width` of it.
inline double find_peak_center(std::span<const TimeTag> events, double period, std::size_t n_bins,
                               double half_width) {
  if (events.empty()) return 0.0;
  const auto hist = fold_histogram(events, period, n_bins);
  const double period_ps = period * 1e12;
  double center = hist.bin_center(hist.peak_index) * 1e12;
  const double hw = half_width * 1e12;
  for (int iter = 0; iter < 4; ++iter) {
    double c = 0.0, s = 0.0;
    std::size_t used = 0;
    for (const auto& e : events) {
      const double phase = detail::folded_phase_ps(e.timestamp_ps, period_ps);
      if (std::abs(detail::circular_delta(phase, center, period_ps)) > hw) continue;
      const double theta = 2.0 * std::numbers::pi * phase / period_ps;
      c += std::cos(theta);
      s += std::sin(theta);
      ++used;
    }
    if (used == 0) break;
    double mean = std::atan2(s, c) / (2.0 * std::numbers::pi) * period_ps;
    center = mean;
  }
  return detail::circular_delta(center, 0.0, period_ps) * 1e-12;
}

struct TemporalWindow {
  double period = 0.0;  // s
  double center = 0.0;  // s
  double width = 0.0;   // s, full width

  bool contains(std::uint64_t t_ps) const noexcept {
    const double period_ps = period * 1e12;
    const double phase = detail::folded_phase_ps(t_ps, period_ps);
    return std::abs(detail::circular_delta(phase, center * 1e12, period_ps)) <= 0.5 * width * 1e12;
  }
};

inline std::vector<TimeTag> temporal_filter(std::span<const TimeTag> events,
                                            const TemporalWindow& window) {
  if (!(window.width < window.period))
    throw std::invalid_argument("temporal_filter: window must be shorter than the period");
  std::vector<TimeTag> kept;
  for (const auto& e : events)
    if (window.contains(e.timestamp_ps)) kept.push_back(e);
  return kept;
}

/// Centers the window on the folded peak of `events` itself.
inline std::vector<TimeTag> temporal_filter(std::span<const TimeTag> events, double period,
                                            double window, std::size_t n_bins = 100) {
  const double center = find_peak_center(events, period, n_bins, 0.5 * window);
  return temporal_filter(events, TemporalWindow{period, center, window});
}

struct OffsetSearch {
  std::int64_t min_offset = 0;  // pulses
  std::int64_t max_offset = 0;
};

struct SyncSolution {
  double period_estimate = 0.0;  // s
  double phase_center = 0.0;     // s, folded peak in [-period/2, period/2)
  std::int64_t offset_pulses = 0;
  double offset_estimate = 0.0;  // s, Bob-clock arrival of pulse 0
  double correlation_score = 0.0;
  double second_best_score = 0.0;
  double noise_floor = 0.0;
  std::uint64_t matched = 0;     // K-basis detections inside the winning window
  double period_significance = 0.0;
  bool success = false;

  /// Slot count since Bob's origin, aligned to the peak.
  std::int64_t slot_of(std::uint64_t t_ps) const noexcept {
    const long double x = (static_cast<long double>(t_ps) - phase_center * 1e12L) /
                          (static_cast<long double>(period_estimate) * 1e12L);
    return static_cast<std::int64_t>(std::llround(x));
  }
  /// Alice pulse index for a detection (may be negative or past the train).
  std::int64_t pulse_index(std::uint64_t t_ps) const noexcept {
    return slot_of(t_ps) - offset_pulses;
  }
};

/// Default offset range: half a sync prefix of early start on Bob's side up to
/// the configured maximum delay.
inline OffsetSearch default_offset_search(const SyncString& sync, double period,
                                          const ProtocolParams& p) {
  OffsetSearch s;
  s.min_offset = -static_cast<std::int64_t>(sync.size() / 2);
  s.max_offset = static_cast<std::int64_t>(std::ceil(p.sync_max_delay / period)) + 1;
  return s;
}

struct OffsetOptions {
  double min_window_fraction = 0.5;  // ignore offsets whose window is mostly empty
  double threshold_sigma = 6.0;
};

/// Normalized correlation of K-basis detections with the sync pattern for
/// every offset in `range`, computed with FFTs. Entry j is for offset
/// range.min_offset + j; `matched` receives the per-offset detection counts.
inline std::vector<double> sync_correlation(std::span<const TimeTag> events, const SyncString& sync,
                                            double period, double center, OffsetSearch range,
                                            std::vector<std::uint64_t>* matched = nullptr) {
  if (range.max_offset < range.min_offset) throw std::invalid_argument("empty offset range");
  const auto L = static_cast<std::int64_t>(sync.size());
  const auto n_offsets = static_cast<std::size_t>(range.max_offset - range.min_offset + 1);
  const auto width = static_cast<std::size_t>(range.max_offset - range.min_offset + L);

  SyncSolution probe;
  probe.period_estimate = period;
  probe.phase_center = center;
  std::vector<double> signal(width, 0.0);
  std::vector<std::uint64_t> counts(width, 0);
  for (const auto& e : events) {
    if (basis_of(e.detector) != BasisId::K) continue;
    const auto j = probe.slot_of(e.timestamp_ps) - range.min_offset;
    if (j < 0 || j >= static_cast<std::int64_t>(width)) continue;
    signal[static_cast<std::size_t>(j)] += e.detector == DetectorId::L ? 1.0 : -1.0;
    ++counts[static_cast<std::size_t>(j)];
  }

  std::size_t fft_n = 1;
  while (fft_n < width) fft_n <<= 1;
  const std::size_t spectrum_n = fft_n / 2 + 1;
  double* a = fftw_alloc_real(fft_n);
  double* b = fftw_alloc_real(fft_n);
  fftw_complex* fa = fftw_alloc_complex(spectrum_n);
  fftw_complex* fb = fftw_alloc_complex(spectrum_n);
  fftw_plan pa, pb, pinv;
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    pa = fftw_plan_dft_r2c_1d(static_cast<int>(fft_n), a, fa, FFTW_ESTIMATE);
    pb = fftw_plan_dft_r2c_1d(static_cast<int>(fft_n), b, fb, FFTW_ESTIMATE);
    pinv = fftw_plan_dft_c2r_1d(static_cast<int>(fft_n), fa, a, FFTW_ESTIMATE);
  }
  std::fill(a, a + fft_n, 0.0);
  std::fill(b, b + fft_n, 0.0);
  std::copy(signal.begin(), signal.end(), a);
  for (std::int64_t j = 0; j < L; ++j) b[j] = sync.sign(static_cast<std::size_t>(j));
  fftw_execute(pa);
  fftw_execute(pb);
  for (std::size_t i = 0; i < spectrum_n; ++i) {
    const std::complex<double> x(fa[i][0], fa[i][1]);
    const std::complex<double> y(fb[i][0], fb[i][1]);
    const auto z = x * std::conj(y);
    fa[i][0] = z.real();
    fa[i][1] = z.imag();
  }
  fftw_execute(pinv);

  std::vector<std::uint64_t> prefix(width + 1, 0);
  for (std::size_t j = 0; j < width; ++j) prefix[j + 1] = prefix[j] + counts[j];
  std::vector<double> scores(n_offsets, 0.0);
  if (matched) matched->assign(n_offsets, 0);
  for (std::size_t m = 0; m < n_offsets; ++m) {
    const auto in_window = prefix[m + static_cast<std::size_t>(L)] - prefix[m];
    const double corr = std::round(a[m] / static_cast<double>(fft_n));
    scores[m] = in_window ? corr / static_cast<double>(in_window) : 0.0;
    if (matched) (*matched)[m] = in_window;
  }
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(pa);
    fftw_destroy_plan(pb);
    fftw_destroy_plan(pinv);
  }
  fftw_free(a);
  fftw_free(b);
  fftw_free(fa);
  fftw_free(fb);
  return scores;
}

/// `events` should already be temporally filtered. Success requires the best
/// score to clear the median of the other candidates by threshold_sigma
/// standard errors (1/sqrt(matched)).
inline SyncSolution recover_offset(std::span<const TimeTag> events, const SyncString& sync,
                                   double period, double center, OffsetSearch range,
                                   const OffsetOptions& opt = {}) {
  SyncSolution sol;
  sol.period_estimate = period;
  sol.phase_center = center;
  std::vector<std::uint64_t> matched;
  const auto scores = sync_correlation(events, sync, period, center, range, &matched);
  const auto max_matched = *std::max_element(matched.begin(), matched.end());
  if (max_matched == 0) return sol;
  const auto floor_count = std::max<std::uint64_t>(
      1, static_cast<std::uint64_t>(std::ceil(opt.min_window_fraction * static_cast<double>(max_matched))));

  std::size_t best = scores.size();
  std::vector<double> others;
  others.reserve(scores.size());
  for (std::size_t m = 0; m < scores.size(); ++m) {
    if (matched[m] < floor_count) continue;
    others.push_back(scores[m]);
    if (best == scores.size() || scores[m] > scores[best]) best = m;
  }
  sol.offset_pulses = range.min_offset + static_cast<std::int64_t>(best);
  sol.offset_estimate = center + static_cast<double>(sol.offset_pulses) * period;
  sol.correlation_score = scores[best];
  sol.matched = matched[best];

  double second = -1.0;
  for (std::size_t m = 0; m < scores.size(); ++m)
    if (m != best && matched[m] >= floor_count) second = std::max(second, scores[m]);
  sol.second_best_score = others.size() > 1 ? second : 0.0;

  // Median of the non-winning candidates.
  if (auto it = std::find(others.begin(), others.end(), scores[best]); it != others.end())
    others.erase(it);
  if (!others.empty()) {
    auto mid = others.begin() + static_cast<std::ptrdiff_t>(others.size() / 2);
    std::nth_element(others.begin(), mid, others.end());
    sol.noise_floor = *mid;
  }
  const double sigma = 1.0 / std::sqrt(static_cast<double>(sol.matched));
  sol.success = sol.correlation_score - sol.noise_floor > opt.threshold_sigma * sigma;
  return sol;
}

inline SyncSolution recover_offset(std::span<const TimeTag> events, const SyncString& sync,
                                   double period, const ProtocolParams& p) {
  const double center =
      find_peak_center(events, period, static_cast<std::size_t>(p.histogram_bins), 0.5 * p.filter_window);
  return recover_offset(events, sync, period, center, default_offset_search(sync, period, p));
}

}  // namespace qkd
