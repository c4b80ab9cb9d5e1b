#pragma once

// Plain-text `key = value` configuration files for ProtocolParams.

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>

#include "qkd/types.hpp"

namespace qkd {

struct ConfigField {
  std::string_view key;
  std::variant<double ProtocolParams::*, std::uint64_t ProtocolParams::*> member;
};

/// Stable key names, in the order they are written by write_config().
inline constexpr ConfigField kConfigFields[] = {
    {"pulse_rate", &ProtocolParams::pulse_rate},
    {"mu", &ProtocolParams::mu},
    {"nu", &ProtocolParams::nu},
    {"p_signal", &ProtocolParams::p_signal},
    {"p_key_alice", &ProtocolParams::p_key_alice},
    {"pulse_fwhm", &ProtocolParams::pulse_fwhm},
    {"sync_string_length", &ProtocolParams::sync_string_length},
    {"channel_loss_db", &ProtocolParams::channel_loss_db},
    {"propagation_delay", &ProtocolParams::propagation_delay},
    {"clock_offset", &ProtocolParams::clock_offset},
    {"clock_drift_ppm", &ProtocolParams::clock_drift_ppm},
    {"misalignment_angle", &ProtocolParams::misalignment_angle},
    {"rotation_axis_x", &ProtocolParams::rotation_axis_x},
    {"rotation_axis_y", &ProtocolParams::rotation_axis_y},
    {"rotation_axis_z", &ProtocolParams::rotation_axis_z},
    {"rotation_rate", &ProtocolParams::rotation_rate},
    {"detector_efficiency", &ProtocolParams::detector_efficiency},
    {"receiver_insertion_loss_db", &ProtocolParams::receiver_insertion_loss_db},
    {"hold_off", &ProtocolParams::hold_off},
    {"dark_rate", &ProtocolParams::dark_rate},
    {"detector_jitter_fwhm", &ProtocolParams::detector_jitter_fwhm},
    {"afterpulse_prob", &ProtocolParams::afterpulse_prob},
    {"afterpulse_time_constant", &ProtocolParams::afterpulse_time_constant},
    {"filter_window", &ProtocolParams::filter_window},
    {"histogram_bins", &ProtocolParams::histogram_bins},
    {"sync_search_ppm", &ProtocolParams::sync_search_ppm},
    {"sync_max_delay", &ProtocolParams::sync_max_delay},
    {"sync_acquisition", &ProtocolParams::sync_acquisition},
    {"eps_sec", &ProtocolParams::eps_sec},
    {"eps_cor", &ProtocolParams::eps_cor},
    {"f_ec", &ProtocolParams::f_ec},
    {"qber_window", &ProtocolParams::qber_window},
    {"key_block_duration", &ProtocolParams::key_block_duration},
    {"duration", &ProtocolParams::duration},
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline double parse_double(std::string_view text, std::string_view key, int line) {
  std::string buf(text);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(buf, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != buf.size())
    throw ConfigError("line " + std::to_string(line) + ": invalid number for '" +
                      std::string(key) + "'");
  return v;
}

}  // namespace detail

/// Applies `key = value` lines on top of `base`. Unknown keys are an error.
inline ProtocolParams parse_config(std::istream& in, ProtocolParams base = {}) {
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line(raw);
    if (const auto hash = line.find('#'); hash != std::string_view::npos)
      line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& field : kConfigFields) {
      if (field.key != key) continue;
      found = true;
      const double v = detail::parse_double(value, key, line_no);
      std::visit(
          [&](auto member) {
            using T = std::remove_reference_t<decltype(base.*member)>;
            if constexpr (std::is_same_v<T, std::uint64_t>) {
              if (v < 0 || v != std::floor(v))
                throw ConfigError("line " + std::to_string(line_no) + ": '" +
                                  std::string(key) + "' must be a nonnegative integer");
              base.*member = static_cast<std::uint64_t>(v);
            } else {
              base.*member = v;
            }
          },
          field.member);
      break;
    }
    if (!found)
      throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" +
                        std::string(key) + "'");
  }
  return base;
}

inline ProtocolParams load_config(const std::string& path, ProtocolParams base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in, base);
}

/// Writes every field with round-trip precision.
inline void write_config(std::ostream& out, const ProtocolParams& p) {
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& field : kConfigFields) {
    out << field.key << " = ";
    std::visit([&](auto member) { out << p.*member; }, field.member);
    out << '\n';
  }
}

}  // namespace qkd
