#include "evspike/events.hpp"

#include <algorithm>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "evspike/bytes.hpp"
#include "evspike/error.hpp"

namespace evspike {

namespace {

constexpr char kEvs1Magic[4] = {'E', 'V', 'S', '1'};
constexpr char kEvf1Magic[4] = {'E', 'V', 'F', '1'};
constexpr std::uint16_t kVersion = 1;

void check_event(const Event& e, int width, int height, std::size_t index,
                 std::uint64_t prev_t) {
  if (e.x >= width || e.y >= height) {
    throw ValidationError("event " + std::to_string(index) + " at (" + std::to_string(e.x) +
                          ", " + std::to_string(e.y) + ") outside " + std::to_string(width) +
                          "x" + std::to_string(height));
  }
  if (e.t < prev_t) {
    throw ValidationError("event " + std::to_string(index) + " timestamp " +
                          std::to_string(e.t) + " precedes " + std::to_string(prev_t));
  }
}

void check_geometry(int width, int height) {
  if (width <= 0 || height <= 0 || width > 0xFFFF || height > 0xFFFF) {
    throw CapacityError("geometry " + std::to_string(width) + "x" + std::to_string(height) +
                        " does not fit 16-bit fields");
  }
}

}  // namespace

void EventStream::validate() const {
  std::uint64_t prev = 0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    check_event(events[i], width, height, i, prev);
    prev = events[i].t;
  }
}

RoiConfig center_crop(int src_width, int src_height, int side) {
  if (side <= 0 || side > src_width || side > src_height) {
    throw ConfigError("center crop side " + std::to_string(side) + " does not fit " +
                      std::to_string(src_width) + "x" + std::to_string(src_height));
  }
  return {(src_width - side) / 2, (src_height - side) / 2, side, side};
}

std::vector<std::uint8_t> encode_stream(const EventStream& s) {
  check_geometry(s.width, s.height);
  ByteWriter w;
  w.buffer().reserve(kEvs1HeaderBytes + kEvs1RecordBytes * s.events.size());
  w.put_bytes({kEvs1Magic, 4});
  w.put_u16(kVersion);
  w.put_u16(static_cast<std::uint16_t>(s.width));
  w.put_u16(static_cast<std::uint16_t>(s.height));
  w.put_u16(0);  // aligns reserved and count
  w.put_u32(0);
  w.put_u64(static_cast<std::uint64_t>(s.events.size()));
  for (const Event& e : s.events) {
    w.put_u64(e.t);
    w.put_u16(e.x);
    w.put_u16(e.y);
    w.put_u8(static_cast<std::uint8_t>(e.p));
    w.put_u8(0);
    w.put_u8(0);
    w.put_u8(0);
  }
  return w.take();
}

EventStream decode_stream(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.get_bytes(4, "EVS1 magic") != std::string_view(kEvs1Magic, 4)) {
    throw FormatError("bad magic: not an EVS1 stream");
  }
  const auto version = r.get_u16("EVS1 version");
  if (version != kVersion) {
    throw FormatError("unsupported EVS1 version " + std::to_string(version));
  }
  EventStream s;
  s.width = r.get_u16("EVS1 width");
  s.height = r.get_u16("EVS1 height");
  if (r.get_u16("EVS1 header pad") != 0) throw FormatError("EVS1 header padding is not zero");
  if (r.get_u32("EVS1 reserved") != 0) throw FormatError("EVS1 reserved field is not zero");
  const std::uint64_t count = r.get_u64("EVS1 count");

  const std::uint64_t complete = r.remaining() / kEvs1RecordBytes;
  if (complete < count) {
    throw TruncationError("truncated EVS1 record " + std::to_string(complete) + " of " +
                              std::to_string(count),
                          kEvs1HeaderBytes + complete * kEvs1RecordBytes);
  }
  s.events.reserve(static_cast<std::size_t>(count));
  std::uint64_t prev = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    Event e;
    e.t = r.get_u64("EVS1 record");
    e.x = r.get_u16("EVS1 record");
    e.y = r.get_u16("EVS1 record");
    const auto p = r.get_u8("EVS1 record");
    const auto pad0 = r.get_u8("EVS1 record");
    const auto pad1 = r.get_u8("EVS1 record");
    const auto pad2 = r.get_u8("EVS1 record");
    if (p > 1) {
      throw ValidationError("event " + std::to_string(i) + " has polarity byte " +
                            std::to_string(p));
    }
    if ((pad0 | pad1 | pad2) != 0) {
      throw FormatError("event " + std::to_string(i) + " has nonzero padding");
    }
    e.p = static_cast<Polarity>(p);
    check_event(e, s.width, s.height, static_cast<std::size_t>(i), prev);
    prev = e.t;
    s.events.push_back(e);
  }
  return s;
}

EventStream read_csv(std::istream& in, int width, int height) {
  check_geometry(width, height);
  EventStream s;
  s.width = width;
  s.height = height;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty CSV: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "t_us,x,y,p") throw FormatError("CSV header must be 't_us,x,y,p', got '" + line + "'");

  std::size_t lineno = 1;
  std::uint64_t prev = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::istringstream row(line);
    unsigned long long t = 0;
    long x = 0, y = 0, p = 0;
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(row >> t >> c1 >> x >> c2 >> y >> c3 >> p) || c1 != ',' || c2 != ',' || c3 != ',' ||
        x < 0 || y < 0 || x > 0xFFFF || y > 0xFFFF || (p != 0 && p != 1)) {
      throw FormatError("malformed CSV line " + std::to_string(lineno) + ": '" + line + "'");
    }
    Event e{static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y),
            static_cast<std::uint64_t>(t), static_cast<Polarity>(p)};
    check_event(e, width, height, s.events.size(), prev);
    prev = e.t;
    s.events.push_back(e);
  }
  return s;
}

void write_csv(std::ostream& out, const EventStream& s) {
  out << "t_us,x,y,p\n";
  for (const Event& e : s.events) {
    out << e.t << ',' << e.x << ',' << e.y << ',' << static_cast<int>(e.p) << '\n';
  }
}

EventStream load_stream(const std::string& path, std::optional<std::pair<int, int>> csv_geometry) {
  const auto bytes = read_file(path);
  if (bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, kEvs1Magic)) {
    return decode_stream(bytes);
  }
  if (!csv_geometry) {
    throw ConfigError("'" + path + "' is not EVS1; CSV input needs --width/--height");
  }
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  return read_csv(in, csv_geometry->first, csv_geometry->second);
}

EventStream crop_roi(const EventStream& s, const RoiConfig& roi) {
  if (roi.w <= 0 || roi.h <= 0 || roi.x0 < 0 || roi.y0 < 0 || roi.x0 + roi.w > s.width ||
      roi.y0 + roi.h > s.height) {
    throw ConfigError("ROI (" + std::to_string(roi.x0) + "," + std::to_string(roi.y0) + "," +
                      std::to_string(roi.w) + "," + std::to_string(roi.h) + ") invalid for " +
                      std::to_string(s.width) + "x" + std::to_string(s.height));
  }
  EventStream out;
  out.width = roi.w;
  out.height = roi.h;
  out.events.reserve(s.events.size());
  const unsigned x0 = static_cast<unsigned>(roi.x0);
  const unsigned y0 = static_cast<unsigned>(roi.y0);
  const unsigned w = static_cast<unsigned>(roi.w);
  const unsigned h = static_cast<unsigned>(roi.h);
  for (const Event& e : s.events) {
    // unsigned wrap turns "left of / above the ROI" into "too large"
    const unsigned dx = static_cast<unsigned>(e.x) - x0;
    const unsigned dy = static_cast<unsigned>(e.y) - y0;
    if (dx < w && dy < h) {
      out.events.push_back({static_cast<std::uint16_t>(dx), static_cast<std::uint16_t>(dy), e.t, e.p});
    }
  }
  return out;
}

EventStream downsample(const EventStream& s, int factor) {
  if (factor < 1) throw ConfigError("downsample factor must be >= 1, got " + std::to_string(factor));
  EventStream out;
  out.width = (s.width + factor - 1) / factor;
  out.height = (s.height + factor - 1) / factor;
  out.events = s.events;
  if (factor == 1) return out;
  const auto f = static_cast<std::uint16_t>(factor);
  for (Event& e : out.events) {
    e.x = static_cast<std::uint16_t>(e.x / f);
    e.y = static_cast<std::uint16_t>(e.y / f);
  }
  return out;
}

FrameSequence accumulate(const EventStream& s, const AccumulationConfig& cfg) {
  if (cfg.window_us == 0) throw ConfigError("window_us must be > 0");
  if (cfg.group < 1) throw ConfigError("group must be >= 1");
  if (s.width != cfg.width || s.height != cfg.height) {
    throw ValidationError("stream geometry " + std::to_string(s.width) + "x" +
                          std::to_string(s.height) + " does not match accumulation geometry " +
                          std::to_string(cfg.width) + "x" + std::to_string(cfg.height));
  }
  FrameSequence seq;
  seq.window_us = cfg.window_us;
  seq.group = cfg.group;
  seq.mode = cfg.mode;
  if (s.events.empty()) return seq;

  const std::uint64_t max_t = s.events.back().t;
  const std::uint64_t windows = max_t / cfg.window_us + 1;
  const auto group = static_cast<std::uint64_t>(cfg.group);
  const std::uint64_t frames = (windows + group - 1) / group;
  const std::uint64_t span = static_cast<std::uint64_t>(cfg.group) * cfg.window_us;

  const Shape shape{2, cfg.height, cfg.width};
  seq.frames.assign(static_cast<std::size_t>(frames), Tensor(shape));
  const std::size_t plane = shape.plane();
  const auto width = static_cast<std::size_t>(cfg.width);

  std::uint64_t prev = 0;
  for (std::size_t i = 0; i < s.events.size(); ++i) {
    const Event& e = s.events[i];
    check_event(e, cfg.width, cfg.height, i, prev);
    prev = e.t;
    auto& frame = seq.frames[static_cast<std::size_t>(e.t / span)];
    frame[static_cast<std::size_t>(e.p) * plane + e.y * width + e.x] += 1.0;
  }
  if (cfg.mode == AccumulationMode::binary) {
    for (Tensor& f : seq.frames) {
      for (double& v : f.values()) v = v > 0.0 ? 1.0 : 0.0;
    }
  }
  // the last frame is complete only if the final event closes its window span
  seq.last_partial = (windows % group) != 0 || (max_t + 1) % cfg.window_us != 0;
  return seq;
}

std::vector<std::uint8_t> encode_frames(const FrameSequence& seq) {
  ByteWriter w;
  const Shape shape = seq.frames.empty() ? Shape{2, 0, 0} : seq.frames.front().shape();
  w.put_bytes({kEvf1Magic, 4});
  w.put_u16(kVersion);
  w.put_u16(static_cast<std::uint16_t>(shape.channels));
  w.put_u16(static_cast<std::uint16_t>(shape.height));
  w.put_u16(static_cast<std::uint16_t>(shape.width));
  w.put_u64(seq.window_us);
  w.put_u16(static_cast<std::uint16_t>(seq.group));
  w.put_u8(static_cast<std::uint8_t>(seq.mode));
  w.put_u8(seq.last_partial ? 1 : 0);
  w.put_u32(static_cast<std::uint32_t>(seq.frames.size()));
  w.put_u32(0);
  for (const Tensor& f : seq.frames) {
    if (!(f.shape() == shape)) throw ValidationError("frames of a sequence must share one shape");
    w.put_u32(static_cast<std::uint32_t>(f.count_nonzero()));
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (f[i] != 0.0) {
        w.put_u32(static_cast<std::uint32_t>(i));
        w.put_f32(static_cast<float>(f[i]));
      }
    }
  }
  return w.take();
}

FrameSequence decode_frames(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.get_bytes(4, "EVF1 magic") != std::string_view(kEvf1Magic, 4)) {
    throw FormatError("bad magic: not an EVF1 frame file");
  }
  if (const auto v = r.get_u16("EVF1 version"); v != kVersion) {
    throw FormatError("unsupported EVF1 version " + std::to_string(v));
  }
  Shape shape;
  shape.channels = r.get_u16("EVF1 header");
  shape.height = r.get_u16("EVF1 header");
  shape.width = r.get_u16("EVF1 header");
  FrameSequence seq;
  seq.window_us = r.get_u64("EVF1 header");
  seq.group = r.get_u16("EVF1 header");
  const auto mode = r.get_u8("EVF1 header");
  if (mode > 1) throw FormatError("EVF1 mode byte " + std::to_string(mode));
  seq.mode = static_cast<AccumulationMode>(mode);
  seq.last_partial = r.get_u8("EVF1 header") != 0;
  const auto count = r.get_u32("EVF1 header");
  r.get_u32("EVF1 header");
  for (std::uint32_t k = 0; k < count; ++k) {
    Tensor f(shape);
    const auto nnz = r.get_u32("EVF1 frame");
    r.require(static_cast<std::size_t>(nnz) * 8, "EVF1 frame entries");
    for (std::uint32_t j = 0; j < nnz; ++j) {
      const auto idx = r.get_u32("EVF1 entry");
      const float v = r.get_f32("EVF1 entry");
      if (idx >= f.size()) {
        throw ValidationError("EVF1 frame " + std::to_string(k) + " index " + std::to_string(idx) +
                              " out of range");
      }
      f[idx] = v;
    }
    seq.frames.push_back(std::move(f));
  }
  return seq;
}

}  // namespace evspike
