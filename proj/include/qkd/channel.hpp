#pragma once

#include <cmath>
#include <stdexcept>

#include "qkd/types.hpp"

namespace qkd {

inline constexpr double kSpeedOfLight = 299792458.0;  // m/s

struct ChannelModel {
  double loss_db = 0.0;
  StokesVector rotation_axis{0.0, 1.0, 0.0};
  double rotation_rate = 0.0;    // rad/s
  double rotation_offset = 0.0;  // rad
  double propagation_delay = 0.0;
  double clock_offset = 0.0;
  double clock_drift = 0.0;      // fractional, 1e-6 per ppm
};

inline ChannelModel make_channel(const ValidatedParams& vp) {
  const auto& p = *vp;
  ChannelModel ch;
  ch.loss_db = p.channel_loss_db;
  ch.rotation_axis = StokesVector{p.rotation_axis_x, p.rotation_axis_y, p.rotation_axis_z}.normalized();
  ch.rotation_rate = p.rotation_rate;
  ch.rotation_offset = p.misalignment_angle;
  ch.propagation_delay = p.propagation_delay;
  ch.clock_offset = p.clock_offset;
  ch.clock_drift = p.clock_drift_ppm * 1e-6;
  return ch;
}

inline double transmittance(double loss_db) {
  if (!(loss_db >= 0.0)) throw std::invalid_argument("loss must be >= 0 dB");
  return std::pow(10.0, -loss_db / 10.0);
}

inline double fiber_delay(double length_m, double group_index) noexcept {
  return length_m * group_index / kSpeedOfLight;
}

/// Rodrigues rotation of `v` about unit axis `k` by `angle`.
inline StokesVector rotate(const StokesVector& v, const StokesVector& k, double angle) noexcept {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  return v * c + k.cross(v) * s + k * (k.dot(v) * (1.0 - c));
}

inline double rotation_angle(double t, const ChannelModel& ch) noexcept {
  return ch.rotation_offset + ch.rotation_rate * t;
}

inline StokesVector apply_rotation(const StokesVector& s, double t, const ChannelModel& ch) noexcept {
  return rotate(s, ch.rotation_axis, rotation_angle(t, ch));
}

inline double alice_to_bob_time(double t_alice, const ChannelModel& ch) noexcept {
  return (1.0 + ch.clock_drift) * t_alice + ch.propagation_delay + ch.clock_offset;
}

}  // namespace qkd
