#pragma once

// On-disk formats.
//
// Timestamp file: a flat sequence of 9-byte little-endian records,
//   u64 timestamp in picoseconds, u8 detector id (0=L 1=R 2=D 3=A).
// Alice record file: 10-byte little-endian records,
//   u64 pulse index, u8 state (0=D 1=L 2=R), u8 intensity (0=signal 1=decoy),
// sorted by pulse index without duplicates.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qkd/receiver.hpp"
#include "qkd/transmitter.hpp"

namespace qkd {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u64(unsigned char* out, std::uint64_t v) noexcept {
  for (int i = 0; i < 8; ++i) out[i] = static_cast<unsigned char>(v >> (8 * i));
}

inline std::uint64_t get_u64(const unsigned char* in) noexcept {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline constexpr std::size_t kTagRecordSize = 9;
inline constexpr std::size_t kAliceRecordSize = 10;

class TagWriter {
 public:
  explicit TagWriter(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open '" + path + "' for writing");
  }

  void write(std::span<const TimeTag> tags) {
    std::vector<unsigned char> buf(tags.size() * kTagRecordSize);
    for (std::size_t i = 0; i < tags.size(); ++i) {
      detail::put_u64(&buf[i * kTagRecordSize], tags[i].timestamp_ps);
      buf[i * kTagRecordSize + 8] = static_cast<unsigned char>(tags[i].detector);
    }
    out_.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out_) throw IoError("write failed");
    count_ += tags.size();
  }

  std::uint64_t count() const noexcept { return count_; }

 private:
  std::ofstream out_;
  std::uint64_t count_ = 0;
};

inline void write_tags(const std::string& path, std::span<const TimeTag> tags) {
  TagWriter w(path);
  w.write(tags);
}

inline std::vector<TimeTag> read_tags(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open '" + path + "'");
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size % kTagRecordSize != 0) throw IoError("'" + path + "' is not a whole number of records");
  in.seekg(0);
  std::vector<unsigned char> buf(size);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  if (!in) throw IoError("read failed on '" + path + "'");
  std::vector<TimeTag> tags(size / kTagRecordSize);
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const auto* rec = &buf[i * kTagRecordSize];
    if (!is_valid_detector(rec[8])) throw IoError("invalid detector id in '" + path + "'");
    tags[i] = TimeTag{detail::get_u64(rec), static_cast<DetectorId>(rec[8])};
  }
  return tags;
}

/// Sidecar with simulation labels, one row per event in file order.
inline void write_truth_header(std::ostream& out) { out << "timestamp_ps,detector,pulse_index,photon_number\n"; }

inline void write_truth_rows(std::ostream& out, std::span<const TimeTag> tags,
                             std::span<const GroundTruth> truth) {
  constexpr char kNames[] = {'L', 'R', 'D', 'A'};
  for (std::size_t i = 0; i < tags.size(); ++i) {
    out << tags[i].timestamp_ps << ',' << kNames[index_of(tags[i].detector)] << ',';
    if (i < truth.size() && truth[i].pulse_index) out << *truth[i].pulse_index;
    out << ',';
    if (i < truth.size() && truth[i].photon_number) out << *truth[i].photon_number;
    out << '\n';
  }
}

inline void write_truth_csv(std::ostream& out, std::span<const TimeTag> tags,
                            std::span<const GroundTruth> truth) {
  write_truth_header(out);
  write_truth_rows(out, tags, truth);
}

/// Alice's side of the sifting exchange, stored as an index-sorted table.
class AliceRecordTable {
 public:
  AliceRecordTable() = default;
  explicit AliceRecordTable(std::vector<PulseRecord> records, double pulse_rate)
      : records_(std::move(records)), pulse_rate_(pulse_rate) {
    std::sort(records_.begin(), records_.end(),
              [](const auto& a, const auto& b) { return a.index < b.index; });
    records_.erase(std::unique(records_.begin(), records_.end(),
                               [](const auto& a, const auto& b) { return a.index == b.index; }),
                   records_.end());
  }

  std::optional<PulseRecord> operator()(std::uint64_t index) const {
    auto it = std::lower_bound(records_.begin(), records_.end(), index,
                               [](const PulseRecord& r, std::uint64_t i) { return r.index < i; });
    if (it == records_.end() || it->index != index) return std::nullopt;
    return *it;
  }

  std::span<const PulseRecord> records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }

 private:
  std::vector<PulseRecord> records_;
  double pulse_rate_ = 5e7;
};

class AliceRecordWriter {
 public:
  explicit AliceRecordWriter(const std::string& path)
      : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open '" + path + "' for writing");
  }

  /// Records must arrive in nondecreasing index order; repeats are skipped.
  void write(const PulseRecord& r) {
    if (any_ && r.index <= last_) return;
    std::array<unsigned char, kAliceRecordSize> buf{};
    detail::put_u64(buf.data(), r.index);
    buf[8] = static_cast<unsigned char>(r.state);
    buf[9] = static_cast<unsigned char>(r.intensity);
    out_.write(reinterpret_cast<const char*>(buf.data()), buf.size());
    if (!out_) throw IoError("write failed");
    any_ = true;
    last_ = r.index;
    ++count_;
  }

  std::uint64_t count() const noexcept { return count_; }

 private:
  std::ofstream out_;
  bool any_ = false;
  std::uint64_t last_ = 0;
  std::uint64_t count_ = 0;
};

inline AliceRecordTable read_alice_records(const std::string& path, double pulse_rate) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open '" + path + "'");
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size % kAliceRecordSize != 0) throw IoError("'" + path + "' is not a whole number of records");
  in.seekg(0);
  std::vector<unsigned char> buf(size);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  if (!in) throw IoError("read failed on '" + path + "'");
  std::vector<PulseRecord> records(size / kAliceRecordSize);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto* rec = &buf[i * kAliceRecordSize];
    if (rec[8] > 2 || rec[9] > 1) throw IoError("invalid Alice record in '" + path + "'");
    records[i].index = detail::get_u64(rec);
    records[i].state = static_cast<StateSymbol>(rec[8]);
    records[i].intensity = static_cast<IntensityClass>(rec[9]);
    records[i].emission_time = static_cast<double>(records[i].index) / pulse_rate;
  }
  return AliceRecordTable(std::move(records), pulse_rate);
}

}  // namespace qkd
