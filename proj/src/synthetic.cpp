#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "evspike/bench.hpp"
#include "evspike/bytes.hpp"
#include "evspike/error.hpp"

namespace evspike {

const char* to_string(MotionKind k) noexcept {
  switch (k) {
    case MotionKind::fall: return "fall";
    case MotionKind::walk: return "walk";
    case MotionKind::sit: return "sit";
    case MotionKind::idle: return "idle";
  }
  return "?";
}

namespace {

MotionKind parse_motion(const std::string& s) {
  for (auto k : {MotionKind::fall, MotionKind::walk, MotionKind::sit, MotionKind::idle}) {
    if (s == to_string(k)) return k;
  }
  throw FormatError("unknown motion kind '" + s + "'");
}

}  // namespace

std::pair<double, double> MotionScript::center(std::uint64_t t_us) const {
  if (keys.empty()) return {0.0, 0.0};
  if (t_us <= keys.front().t_us) return {keys.front().x, keys.front().y};
  for (std::size_t i = 1; i < keys.size(); ++i) {
    if (t_us <= keys[i].t_us) {
      const auto& a = keys[i - 1];
      const auto& b = keys[i];
      const double f = static_cast<double>(t_us - a.t_us) / static_cast<double>(b.t_us - a.t_us);
      return {a.x + f * (b.x - a.x), a.y + f * (b.y - a.y)};
    }
  }
  return {keys.back().x, keys.back().y};
}

void SyntheticParams::validate() const {
  if (width < 8 || height < 8) throw ConfigError("synthetic geometry must be at least 8x8");
  if (width > 65535 || height > 65535) throw ConfigError("synthetic geometry exceeds 65535");
  if (n_samples < 0) throw ConfigError("n_samples must be >= 0");
  if (!(fall_fraction >= 0.0 && fall_fraction <= 1.0)) throw ConfigError("fall_fraction must lie in [0, 1]");
  if (!(noise_rate >= 0.0)) throw ConfigError("noise_rate must be >= 0");
  if (duration_us < 100'000) throw ConfigError("duration must be >= 100 ms");
  if (!(events_per_px > 0.0)) throw ConfigError("events_per_px must be > 0");
}

namespace {

using Rng = std::mt19937_64;

double uni(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Horizontal walk between the borders, reflected, sampled every 100 ms.
void walk_keys(MotionScript& m, double x, double y, double vx, std::uint64_t t0, std::uint64_t t1,
               double lo, double hi) {
  constexpr std::uint64_t kStep = 100'000;
  for (std::uint64_t t = t0; t <= t1; t += kStep) {
    m.keys.push_back({t, x, y});
    x += vx * static_cast<double>(kStep) * 1e-6;
    if (x < lo) {
      x = 2 * lo - x;
      vx = -vx;
    } else if (x > hi) {
      x = 2 * hi - x;
      vx = -vx;
    }
  }
}

MotionScript make_script(MotionKind kind, const SyntheticParams& p, Rng& rng) {
  MotionScript m;
  m.kind = kind;
  const double W = p.width;
  const double H = p.height;
  m.radius = std::max(1.5, 0.1 * std::min(W, H));
  const double r = m.radius;
  const double xlo = r + 1.0;
  const double xhi = W - r - 1.0;
  const double ylo = r + 1.0;
  const double yhi = H - r - 1.0;
  const auto D = static_cast<double>(p.duration_us);
  const auto at = [&](double frac) { return static_cast<std::uint64_t>(frac * D); };
  const double sign = uni(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;

  switch (kind) {
    case MotionKind::fall: {
      const double x = uni(rng, xlo, xhi);
      const double y0 = std::clamp(uni(rng, 0.2, 0.4) * H, ylo, yhi);
      const double vx = sign * uni(rng, 0.0, 0.4) * W;
      const auto t_fall = at(uni(rng, 0.25, 0.6));
      walk_keys(m, x, y0, vx, 0, t_fall, xlo, xhi);
      const auto [xf, yf] = m.center(t_fall);
      m.keys.push_back({t_fall, xf, yf});
      const auto t_land = t_fall + static_cast<std::uint64_t>(uni(rng, 250'000, 400'000));
      const double y1 = std::min(yf + uni(rng, 0.35, 0.5) * H, yhi);
      m.keys.push_back({t_land, xf, y1});
      m.keys.push_back({std::max(t_land, p.duration_us), xf, y1});
      break;
    }
    case MotionKind::walk: {
      const double y = uni(rng, 0.2 * H, 0.6 * H);
      walk_keys(m, uni(rng, xlo, xhi), std::clamp(y, ylo, yhi), sign * uni(rng, 0.2, 0.6) * W, 0,
                p.duration_us, xlo, xhi);
      break;
    }
    case MotionKind::sit: {
      const double x = uni(rng, xlo, xhi);
      const double y0 = std::clamp(uni(rng, 0.2, 0.4) * H, ylo, yhi);
      const auto t0 = at(uni(rng, 0.1, 0.3));
      const auto t1 = t0 + at(uni(rng, 0.5, 0.65));
      const double y1 = std::min(y0 + uni(rng, 0.15, 0.3) * H, yhi);
      m.keys.push_back({0, x, y0});
      m.keys.push_back({t0, x, y0});
      m.keys.push_back({t1, x, y1});
      m.keys.push_back({std::max(t1, p.duration_us), x, y1});
      break;
    }
    case MotionKind::idle: {
      const double x = uni(rng, xlo + 1.0, xhi - 1.0);
      const double y = uni(rng, ylo + 1.0, yhi - 1.0);
      // slow sway of about one pixel
      for (std::uint64_t t = 0; t <= p.duration_us; t += 250'000) {
        m.keys.push_back({t, x + uni(rng, -1.0, 1.0), y + uni(rng, -0.5, 0.5)});
      }
      break;
    }
  }
  return m;
}

EventStream render(const MotionScript& m, const SyntheticParams& p, Rng& rng) {
  EventStream s;
  s.width = p.width;
  s.height = p.height;
  const double r = m.radius;
  std::uniform_real_distribution<double> disk(-r, r);
  for (std::uint64_t t = m.tick_us; t < p.duration_us; t += m.tick_us) {
    const auto [cx, cy] = m.center(t);
    const auto [px, py] = m.center(t - m.tick_us);
    const double dx = cx - px;
    const double dy = cy - py;
    const double d = std::hypot(dx, dy);
    if (d <= 0.0) continue;
    const double lambda = p.events_per_px * d * 2.0 * r;
    const int n = std::poisson_distribution<int>(lambda)(rng);
    for (int k = 0; k < n; ++k) {
      double ox = 0.0;
      double oy = 0.0;
      do {
        ox = disk(rng);
        oy = disk(rng);
      } while (ox * ox + oy * oy > r * r);
      const double fx = std::floor(cx + ox);
      const double fy = std::floor(cy + oy);
      if (fx < 0 || fy < 0 || fx >= p.width || fy >= p.height) continue;
      Event e;
      e.x = static_cast<std::uint16_t>(fx);
      e.y = static_cast<std::uint16_t>(fy);
      e.t = t;
      e.p = ox * dx + oy * dy >= 0.0 ? Polarity::pos : Polarity::neg;
      s.events.push_back(e);
    }
  }
  if (p.noise_rate > 0.0) {
    const double lambda = p.noise_rate * p.width * p.height * static_cast<double>(p.duration_us) * 1e-6;
    const auto n = std::poisson_distribution<long>(lambda)(rng);
    std::uniform_int_distribution<std::uint64_t> tt(0, p.duration_us - 1);
    std::uniform_int_distribution<int> xx(0, p.width - 1);
    std::uniform_int_distribution<int> yy(0, p.height - 1);
    for (long k = 0; k < n; ++k) {
      Event e;
      e.t = tt(rng);
      e.x = static_cast<std::uint16_t>(xx(rng));
      e.y = static_cast<std::uint16_t>(yy(rng));
      e.p = (rng() & 1u) ? Polarity::pos : Polarity::neg;
      s.events.push_back(e);
    }
  }
  std::stable_sort(s.events.begin(), s.events.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
  return s;
}

}  // namespace

std::vector<Sample> gen_synthetic(std::uint64_t seed, const SyntheticParams& params) {
  params.validate();
  const auto n = static_cast<std::size_t>(params.n_samples);
  const auto n_fall = static_cast<std::size_t>(std::llround(params.fall_fraction * static_cast<double>(n)));
  Rng master(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), master);
  std::vector<bool> is_fall(n, false);
  for (std::size_t i = 0; i < n_fall; ++i) is_fall[order[i]] = true;

  std::vector<Sample> out(n);
  const auto count = static_cast<long>(n);
#pragma omp parallel for schedule(dynamic, 4)
  for (long li = 0; li < count; ++li) {
    const auto i = static_cast<std::size_t>(li);
    std::seed_seq sq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(i), 0x5eedu};
    Rng rng(sq);
    MotionKind kind = MotionKind::fall;
    if (!is_fall[i]) {
      const auto k = std::uniform_int_distribution<int>(0, 2)(rng);
      kind = k == 0 ? MotionKind::walk : (k == 1 ? MotionKind::sit : MotionKind::idle);
    }
    Sample& s = out[i];
    std::ostringstream id;
    id << "s" << std::setw(5) << std::setfill('0') << i;
    s.id = id.str();
    s.fall = is_fall[i];
    s.script = make_script(kind, params, rng);
    s.stream = render(s.script, params, rng);
  }
  return out;
}

void save_dataset(const std::string& dir, const std::vector<Sample>& samples) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
  std::ostringstream labels;
  labels << "id,label,kind\n";
  for (const auto& s : samples) {
    write_file_atomic((fs::path(dir) / (s.id + ".evs")).string(), encode_stream(s.stream));
    labels << s.id << "," << (s.fall ? 1 : 0) << "," << to_string(s.script.kind) << "\n";
  }
  write_file_atomic((fs::path(dir) / "labels.csv").string(), labels.str());
}

std::vector<Sample> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto path = fs::path(dir) / "labels.csv";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line.rfind("id,label", 0) != 0) {
    throw FormatError("'" + path.string() + "' lacks the id,label header");
  }
  std::vector<Sample> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id;
    std::string label;
    std::string kind;
    std::getline(ls, id, ',');
    std::getline(ls, label, ',');
    std::getline(ls, kind, ',');
    if (id.empty() || (label != "0" && label != "1")) {
      throw FormatError("labels.csv line " + std::to_string(lineno) + " is malformed");
    }
    Sample s;
    s.id = id;
    s.fall = label == "1";
    s.script.kind = kind.empty() ? (s.fall ? MotionKind::fall : MotionKind::idle) : parse_motion(kind);
    s.stream = load_stream((fs::path(dir) / (id + ".evs")).string());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace evspike
