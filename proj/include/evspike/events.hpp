#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evspike/tensor.hpp"

namespace evspike {

enum class Polarity : std::uint8_t { neg = 0, pos = 1 };

/// One sensor event: pixel (x, y), timestamp in microseconds, polarity.
struct Event {
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::uint64_t t = 0;
  Polarity p = Polarity::neg;

  friend bool operator==(const Event&, const Event&) = default;
};

/// Time-ordered events with the geometry of the sensor (or of the region
/// they were cropped/downsampled to).
struct EventStream {
  int width = 0;
  int height = 0;
  std::vector<Event> events;

  /// Throws ValidationError naming the first offending record.
  void validate() const;

  friend bool operator==(const EventStream&, const EventStream&) = default;
};

struct RoiConfig {
  int x0 = 0;
  int y0 = 0;
  int w = 0;
  int h = 0;
};

/// Center crop of a source geometry to a square of side `side`.
RoiConfig center_crop(int src_width, int src_height, int side);

enum class AccumulationMode : std::uint8_t { graded = 0, binary = 1 };

struct AccumulationConfig {
  std::uint64_t window_us = 20'000;
  AccumulationMode mode = AccumulationMode::graded;
  int width = 0;
  int height = 0;
  /// Consecutive windows merged into one output frame.
  int group = 1;
};

/// Accumulated (2, H, W) frames; channel 0 is negative polarity, 1 positive.
struct FrameSequence {
  std::vector<Tensor> frames;
  std::uint64_t window_us = 0;
  int group = 1;
  AccumulationMode mode = AccumulationMode::graded;
  /// True when the final frame covers less than a full window (or group).
  bool last_partial = false;

  friend bool operator==(const FrameSequence&, const FrameSequence&) = default;
};

inline constexpr std::size_t kEvs1HeaderBytes = 24;
inline constexpr std::size_t kEvs1RecordBytes = 16;

std::vector<std::uint8_t> encode_stream(const EventStream& s);
EventStream decode_stream(std::span<const std::uint8_t> bytes);

/// CSV: header `t_us,x,y,p`, one event per line, p in {0,1}. CSV carries no
/// geometry, so the caller supplies it.
EventStream read_csv(std::istream& in, int width, int height);
void write_csv(std::ostream& out, const EventStream& s);

/// Loads EVS1 or CSV (detected from the magic bytes). Geometry is required
/// for CSV input only.
EventStream load_stream(const std::string& path, std::optional<std::pair<int, int>> csv_geometry = {});

EventStream crop_roi(const EventStream& s, const RoiConfig& roi);
EventStream downsample(const EventStream& s, int factor);
FrameSequence accumulate(const EventStream& s, const AccumulationConfig& cfg);

/// EVF1 sparse frame container written by `evspike accumulate`.
std::vector<std::uint8_t> encode_frames(const FrameSequence& seq);
FrameSequence decode_frames(std::span<const std::uint8_t> bytes);

}  // namespace evspike
