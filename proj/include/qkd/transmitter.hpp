#pragma once

// Alice's pulse train: a public synchronization prefix followed by random
// state/intensity choices. Every pulse is a pure function of (seed, index), so
// the train is an indexable lazy sequence and never has to be materialized.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "qkd/random.hpp"
#include "qkd/types.hpp"

namespace qkd {

struct PulseRecord {
  std::uint64_t index = 0;
  StateSymbol state = StateSymbol::D;
  IntensityClass intensity = IntensityClass::Signal;
  double emission_time = 0.0;  // s, Alice clock

  bool operator==(const PulseRecord&) const = default;
};

/// Public pattern over {L, R} known to both sides.
struct SyncString {
  std::vector<StateSymbol> pattern;

  std::size_t size() const noexcept { return pattern.size(); }
  static constexpr bool is_public() noexcept { return true; }
  /// +1 for L, -1 for R.
  int sign(std::size_t i) const noexcept { return pattern[i] == StateSymbol::L ? 1 : -1; }
};

inline SyncString generate_sync_string(std::uint64_t length, std::uint64_t seed) {
  if (length == 0) throw std::invalid_argument("sync string length must be >= 1");
  SyncString s;
  s.pattern.resize(length);
  for (std::uint64_t i = 0; i < length; ++i) {
    s.pattern[i] = (mix(seed, Domain::SyncPattern, i) >> 63) ? StateSymbol::L : StateSymbol::R;
  }
  return s;
}

/// Seed of the public sync pattern for a run.
inline std::uint64_t sync_seed(std::uint64_t run_seed) noexcept {
  return mix(run_seed, Domain::SyncSeed);
}

inline double mean_photon_number(IntensityClass c, const ProtocolParams& p) noexcept {
  return c == IntensityClass::Signal ? p.mu : p.nu;
}

inline double mean_photon_number(const PulseRecord& r, const ProtocolParams& p) noexcept {
  return mean_photon_number(r.intensity, p);
}

class PulseTrain {
 public:
  PulseTrain(const ValidatedParams& params, SyncString sync, std::uint64_t seed)
      : PulseTrain(params, std::make_shared<const SyncString>(std::move(sync)), seed) {}

  PulseTrain(const ValidatedParams& params, std::shared_ptr<const SyncString> sync,
             std::uint64_t seed)
      : sync_(std::move(sync)),
        seed_(seed),
        rate_(params->pulse_rate),
        p_key_(params->p_key_alice),
        p_signal_(params->p_signal),
        size_(total_pulses(*params)) {}

  std::uint64_t size() const noexcept { return size_; }
  std::uint64_t sync_length() const noexcept { return sync_->size(); }
  const SyncString& sync() const noexcept { return *sync_; }
  std::uint64_t seed() const noexcept { return seed_; }

  PulseRecord at(std::uint64_t index) const noexcept {
    PulseRecord r;
    r.index = index;
    r.emission_time = static_cast<double>(index) / rate_;
    if (index < sync_->size()) {
      r.state = sync_->pattern[index];
      r.intensity = IntensityClass::Signal;
      return r;
    }
    const double u = to_unit(mix(seed_, Domain::PulseState, index));
    if (u < 0.5 * p_key_)
      r.state = StateSymbol::L;
    else if (u < p_key_)
      r.state = StateSymbol::R;
    else
      r.state = StateSymbol::D;
    r.intensity = to_unit(mix(seed_, Domain::PulseIntensity, index)) < p_signal_
                      ? IntensityClass::Signal
                      : IntensityClass::Decoy;
    return r;
  }

  /// Pull interface: the next record, or false at the end of the train.
  bool next(PulseRecord& out) noexcept {
    if (cursor_ >= size_) return false;
    out = at(cursor_++);
    return true;
  }

  void rewind() noexcept { cursor_ = 0; }

 private:
  std::shared_ptr<const SyncString> sync_;
  std::uint64_t seed_;
  double rate_;
  double p_key_;
  double p_signal_;
  std::uint64_t size_;
  std::uint64_t cursor_ = 0;
};

/// Debug dump of the first `count` pulses.
inline void write_pulse_csv(std::ostream& out, const PulseTrain& train, std::uint64_t count) {
  out << "index,state,intensity\n";
  const auto n = std::min(count, train.size());
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto r = train.at(i);
    out << r.index << ',' << to_char(r.state) << ',' << to_string(r.intensity) << '\n';
  }
}

}  // namespace qkd
