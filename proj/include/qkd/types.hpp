#pragma once

// Core domain types shared by every stage of the link simulation.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace qkd {

enum class StateSymbol : std::uint8_t { D = 0, L = 1, R = 2, A = 3 };
enum class BasisId : std::uint8_t { K = 0, C = 1 };
enum class IntensityClass : std::uint8_t { Signal = 0, Decoy = 1 };

constexpr BasisId basis_of(StateSymbol s) noexcept {
  return (s == StateSymbol::L || s == StateSymbol::R) ? BasisId::K : BasisId::C;
}

/// Only D, L and R are ever prepared; A exists as a measurement outcome.
constexpr bool is_transmittable(StateSymbol s) noexcept { return s != StateSymbol::A; }

constexpr char to_char(StateSymbol s) noexcept {
  switch (s) {
    case StateSymbol::D: return 'D';
    case StateSymbol::L: return 'L';
    case StateSymbol::R: return 'R';
    case StateSymbol::A: return 'A';
  }
  return '?';
}

constexpr char to_char(BasisId b) noexcept { return b == BasisId::K ? 'K' : 'C'; }

constexpr const char* to_string(IntensityClass c) noexcept {
  return c == IntensityClass::Signal ? "signal" : "decoy";
}

struct StokesVector {
  double s1 = 0.0;
  double s2 = 0.0;
  double s3 = 0.0;

  constexpr double dot(const StokesVector& o) const noexcept {
    return s1 * o.s1 + s2 * o.s2 + s3 * o.s3;
  }
  constexpr StokesVector cross(const StokesVector& o) const noexcept {
    return {s2 * o.s3 - s3 * o.s2, s3 * o.s1 - s1 * o.s3, s1 * o.s2 - s2 * o.s1};
  }
  double norm() const noexcept { return std::sqrt(dot(*this)); }
  StokesVector normalized() const {
    const double n = norm();
    if (n == 0.0) throw std::invalid_argument("cannot normalize a zero Stokes vector");
    return {s1 / n, s2 / n, s3 / n};
  }
  constexpr StokesVector operator*(double k) const noexcept { return {s1 * k, s2 * k, s3 * k}; }
  constexpr StokesVector operator+(const StokesVector& o) const noexcept {
    return {s1 + o.s1, s2 + o.s2, s3 + o.s3};
  }
  constexpr StokesVector operator-() const noexcept { return {-s1, -s2, -s3}; }
  constexpr bool operator==(const StokesVector&) const = default;
};

inline constexpr double kUnitNormTolerance = 1e-9;

inline bool is_unit(const StokesVector& s) noexcept {
  return std::abs(s.norm() - 1.0) <= kUnitNormTolerance;
}

/// Poincare-sphere image of each polarization state. D/A sit on the s2 axis,
/// L/R on the s3 axis.
constexpr StokesVector state_to_stokes(StateSymbol s) noexcept {
  switch (s) {
    case StateSymbol::D: return {0.0, 1.0, 0.0};
    case StateSymbol::A: return {0.0, -1.0, 0.0};
    case StateSymbol::L: return {0.0, 0.0, 1.0};
    case StateSymbol::R: return {0.0, 0.0, -1.0};
  }
  return {};
}

/// Probability that a state projects onto the analyzer axis b.
constexpr double projection_probability(const StokesVector& state,
                                        const StokesVector& analyzer) noexcept {
  return 0.5 * (1.0 + analyzer.dot(state));
}

/// Every physical and protocol constant of a run. Config-file key names equal
/// the member names.
struct ProtocolParams {
  // Transmitter.
  double pulse_rate = 5e7;                  // Hz
  double mu = 0.487;                        // signal mean photon number
  double nu = 0.109;                        // decoy mean photon number
  double p_signal = 0.5;                    // P(signal intensity)
  double p_key_alice = 0.9;                 // P(Alice prepares in K)
  double pulse_fwhm = 270e-12;              // s
  std::uint64_t sync_string_length = 1000000;

  // Channel.
  double channel_loss_db = 9.0;
  double propagation_delay = 16.650e-6;     // s, 3.4 km at group index 1.468
  double clock_offset = 0.0;                // s
  double clock_drift_ppm = 0.0;
  double misalignment_angle = 0.33943;      // rad
  double rotation_axis_x = 0.0;
  double rotation_axis_y = 0.81133;
  double rotation_axis_z = 0.58459;
  double rotation_rate = 0.0;               // rad/s

  // Receiver.
  double detector_efficiency = 0.15;
  double receiver_insertion_loss_db = 4.0;
  double hold_off = 20e-6;                  // s
  double dark_rate = 2000.0;                // Hz per detector
  double detector_jitter_fwhm = 150e-12;    // s
  double afterpulse_prob = 0.0;
  double afterpulse_time_constant = 2e-6;   // s, tail beyond hold-off

  // Synchronization and filtering.
  double filter_window = 750e-12;           // s
  std::uint64_t histogram_bins = 100;
  double sync_search_ppm = 20.0;
  double sync_max_delay = 1e-3;             // s
  double sync_acquisition = 10.0;           // s of data used for period recovery

  // Post-processing.
  double eps_sec = 1e-10;
  double eps_cor = 1e-15;
  double f_ec = 1.16;
  double qber_window = 60.0;                // s
  double key_block_duration = 3600.0;       // s, finite-key block for the reported SKR

  double duration = 60.0;                   // s
};

class ParamError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Parameters that passed validate_params(). Only validate_params() can make one.
class ValidatedParams {
 public:
  const ProtocolParams& operator*() const noexcept { return params_; }
  const ProtocolParams* operator->() const noexcept { return &params_; }
  const ProtocolParams& get() const noexcept { return params_; }

 private:
  explicit ValidatedParams(const ProtocolParams& p) : params_(p) {}
  friend ValidatedParams validate_params(const ProtocolParams& p);
  ProtocolParams params_;
};

namespace detail {
inline void require(bool ok, const std::string& message) {
  if (!ok) throw ParamError(message);
}
inline void require_probability(double p, const char* name) {
  require(p >= 0.0 && p <= 1.0, std::string(name) + " must be in [0,1]");
}
inline void require_nonnegative(double v, const char* name) {
  require(v >= 0.0 && std::isfinite(v), std::string(name) + " must be >= 0");
}
inline void require_open_unit(double v, const char* name) {
  require(v > 0.0 && v < 1.0, std::string(name) + " must be in (0,1)");
}
}  // namespace detail

/// Throws ParamError naming the first violated invariant.
inline ValidatedParams validate_params(const ProtocolParams& p) {
  using namespace detail;
  require(p.pulse_rate > 0.0 && std::isfinite(p.pulse_rate), "pulse_rate must be > 0");
  require_nonnegative(p.mu, "mu");
  require(p.nu > 0.0, "nu must be > 0");
  require(p.mu > p.nu, "mu must exceed nu");
  require_probability(p.p_signal, "p_signal");
  require_probability(p.p_key_alice, "p_key_alice");
  require_nonnegative(p.pulse_fwhm, "pulse_fwhm");
  require(p.sync_string_length >= 1, "sync_string_length must be >= 1");

  require_nonnegative(p.channel_loss_db, "channel_loss_db");
  require_nonnegative(p.propagation_delay, "propagation_delay");
  require(p.propagation_delay + p.clock_offset >= 0.0,
          "propagation_delay + clock_offset must be >= 0");
  require(p.clock_drift_ppm > -1e6, "clock_drift_ppm must be > -1e6");
  require(std::isfinite(p.misalignment_angle), "misalignment_angle must be finite");
  require(std::isfinite(p.rotation_rate), "rotation_rate must be finite");
  const double axis_norm = std::sqrt(p.rotation_axis_x * p.rotation_axis_x +
                                     p.rotation_axis_y * p.rotation_axis_y +
                                     p.rotation_axis_z * p.rotation_axis_z);
  require(axis_norm > 1e-12, "rotation_axis must be nonzero");

  require_probability(p.detector_efficiency, "detector_efficiency");
  require_nonnegative(p.receiver_insertion_loss_db, "receiver_insertion_loss_db");
  require_nonnegative(p.hold_off, "hold_off");
  require_nonnegative(p.dark_rate, "dark_rate");
  require_nonnegative(p.detector_jitter_fwhm, "detector_jitter_fwhm");
  require_probability(p.afterpulse_prob, "afterpulse_prob");
  require(p.afterpulse_time_constant > 0.0, "afterpulse_time_constant must be > 0");

  require(p.filter_window > 0.0, "filter_window must be > 0");
  require(p.filter_window < 1.0 / p.pulse_rate, "filter_window must be shorter than the pulse period");
  require(p.histogram_bins >= 2, "histogram_bins must be >= 2");
  require(p.sync_search_ppm > 0.0, "sync_search_ppm must be > 0");
  require_nonnegative(p.sync_max_delay, "sync_max_delay");
  require(p.sync_acquisition > 0.0, "sync_acquisition must be > 0");

  require_open_unit(p.eps_sec, "eps_sec");
  require_open_unit(p.eps_cor, "eps_cor");
  require_nonnegative(p.f_ec, "f_ec");
  require(p.qber_window >= 1.0, "qber_window must be >= 1");
  require(p.key_block_duration > 0.0, "key_block_duration must be > 0");
  require_nonnegative(p.duration, "duration");
  return ValidatedParams(p);
}

inline double pulse_period(const ProtocolParams& p) noexcept { return 1.0 / p.pulse_rate; }

inline std::uint64_t total_pulses(const ProtocolParams& p) noexcept {
  return static_cast<std::uint64_t>(std::llround(p.duration * p.pulse_rate));
}

}  // namespace qkd
