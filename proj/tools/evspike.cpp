#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "evspike/bench.hpp"
#include "evspike/bytes.hpp"
#include "evspike/error.hpp"
#include "evspike/events.hpp"
#include "evspike/models.hpp"
#include "evspike/parallel.hpp"
#include "evspike/schedule.hpp"
#include "evspike/train.hpp"

namespace fs = std::filesystem;
using namespace evspike;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitInternal = 3;

struct Globals {
  std::uint64_t seed = 1;
  int threads = 0;
  std::string log_level;
};

std::string slurp_text(const std::string& path) {
  const auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw IoError(std::string(what) + " '" + path + "' does not exist");
}

void require_dir(const std::string& path, const char* what) {
  if (!fs::is_directory(path)) throw IoError(std::string(what) + " '" + path + "' is not a directory");
}

// Output goes next to an existing directory; the file itself is created atomically.
void require_writable_parent(const std::string& path) {
  const auto parent = fs::absolute(path).parent_path();
  if (!fs::is_directory(parent)) throw IoError("output directory '" + parent.string() + "' does not exist");
}

RoiConfig parse_crop(const std::string& s) {
  RoiConfig r;
  char c1 = 0;
  char c2 = 0;
  char c3 = 0;
  std::istringstream is(s);
  if (!(is >> r.x0 >> c1 >> r.y0 >> c2 >> r.w >> c3 >> r.h) || c1 != ',' || c2 != ',' || c3 != ',' ||
      !is.eof()) {
    throw ConfigError("--crop expects x0,y0,w,h (got '" + s + "')");
  }
  return r;
}

AccumulationMode parse_mode(const std::string& s) {
  if (s == "graded") return AccumulationMode::graded;
  if (s == "binary") return AccumulationMode::binary;
  throw ConfigError("--mode must be graded or binary (got '" + s + "')");
}

NumericMode parse_numeric(const std::string& s) {
  if (s == "reference") return NumericMode::reference;
  if (s == "fixed") return NumericMode::fixed_point;
  throw ConfigError("--numeric must be reference or fixed (got '" + s + "')");
}

// cores=K,static=mW,dyn=pW
PowerSpec parse_power(const std::string& s) {
  PowerSpec p;
  bool have_cores = false;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("--power item '" + item + "' lacks '='");
    const auto key = item.substr(0, eq);
    const auto val = item.substr(eq + 1);
    try {
      std::size_t used = 0;
      if (key == "cores") {
        p.cores = std::stoi(val, &used);
        have_cores = true;
      } else if (key == "static") {
        p.model.static_mw_per_core = std::stod(val, &used);
      } else if (key == "dyn") {
        p.model.dynamic_pw_per_synop = std::stod(val, &used);
      } else {
        throw ConfigError("unknown --power key '" + key + "'");
      }
      if (used != val.size()) throw std::invalid_argument(val);
    } catch (const std::logic_error&) {
      throw ConfigError("--power value '" + val + "' for '" + key + "' is not a number");
    }
  }
  if (!have_cores || p.cores < 1) throw ConfigError("--power needs cores=K with K >= 1");
  p.model.validate();
  return p;
}

void emit(const std::string& text, const std::optional<std::string>& report, const std::string& json) {
  std::cout << text;
  if (report) {
    write_file_atomic(*report, json);
    spdlog::info("report written to {}", *report);
  }
}

// --- subcommands ------------------------------------------------------------------------

struct GenArgs {
  std::string out;
  SyntheticParams p;
};

int cmd_gen(const Globals& g, const GenArgs& a) {
  a.p.validate();
  const auto samples = gen_synthetic(g.seed, a.p);
  save_dataset(a.out, samples);
  std::size_t falls = 0;
  std::size_t events = 0;
  for (const auto& s : samples) {
    falls += s.fall ? 1 : 0;
    events += s.stream.events.size();
  }
  std::cout << "generated " << samples.size() << " samples (" << falls << " falls, " << events << " events) in "
            << a.out << "\n";
  return kExitOk;
}

struct AccArgs {
  std::string in;
  std::string out;
  std::uint64_t window_us = 20'000;
  std::string mode = "graded";
  int group = 1;
  std::string crop;
  int down = 1;
  int csv_width = 0;
  int csv_height = 0;
};

int cmd_accumulate(const AccArgs& a) {
  require_file(a.in, "input");
  require_writable_parent(a.out);
  AccumulationConfig ac;
  ac.window_us = a.window_us;
  ac.mode = parse_mode(a.mode);
  ac.group = a.group;
  std::optional<RoiConfig> roi;
  if (!a.crop.empty()) roi = parse_crop(a.crop);
  std::optional<std::pair<int, int>> geo;
  if (a.csv_width > 0 && a.csv_height > 0) geo = std::make_pair(a.csv_width, a.csv_height);
  EventStream s = load_stream(a.in, geo);
  spdlog::debug("loaded {} events ({}x{})", s.events.size(), s.width, s.height);
  if (roi) s = crop_roi(s, *roi);
  if (a.down != 1) s = downsample(s, a.down);
  ac.width = s.width;
  ac.height = s.height;
  const auto seq = accumulate(s, ac);
  write_file_atomic(a.out, encode_frames(seq));
  std::size_t nnz = 0;
  for (const auto& f : seq.frames) nnz += f.count_nonzero();
  std::cout << "wrote " << seq.frames.size() << " frames of 2x" << s.height << "x" << s.width << " (" << nnz
            << " nonzero cells" << (seq.last_partial ? ", last frame partial" : "") << ") to " << a.out << "\n";
  return kExitOk;
}

struct BuildArgs {
  std::string config;
  std::string out;
};

int cmd_build(const Globals& g, const BuildArgs& a) {
  require_file(a.config, "model config");
  require_writable_parent(a.out);
  auto cfg = parse_model_config(slurp_text(a.config));
  if (g.seed != 1 && cfg.options.seed == 1) cfg.options.seed = g.seed;
  const auto model = build_model(cfg);
  save_model_file(model, a.out);
  std::cout << describe_model(model);
  return kExitOk;
}

struct InferArgs {
  std::string model;
  std::string frames;
  std::optional<std::string> report;
  std::string numeric = "reference";
  double threshold = 0.5;
};

int cmd_infer(const InferArgs& a) {
  require_file(a.model, "model");
  require_file(a.frames, "frames");
  if (a.report) require_writable_parent(*a.report);
  const auto numeric = parse_numeric(a.numeric);
  const auto model = load_model_file(a.model);
  const auto seq = decode_frames(read_file(a.frames));
  if (seq.frames.empty()) throw ValidationError("frames file holds no frames");
  InferenceSession session(model, numeric);
  std::vector<Logits> outs;
  for (const auto& f : seq.frames) outs.push_back(session.step(f));
  const auto d = decide(outs, model.decision, a.threshold);

  ordered_json j;
  j["schema"] = "evspike.infer/1";
  j["model"] = model.name;
  j["timesteps"] = outs.size();
  j["decision"] = {{"class", d.cls == FallClass::fall ? "fall" : "nofall"}, {"p", d.p}, {"threshold", a.threshold}};
  ordered_json steps = ordered_json::array();
  for (const auto& o : outs) steps.push_back({o[kFallUnit], o[kNoFallUnit]});
  j["outputs"] = steps;
  ordered_json layers = ordered_json::array();
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    layers.push_back({{"name", model.layers[i].name},
                      {"synops", session.ledger()[i].synops},
                      {"neuron_updates", session.ledger()[i].neuron_updates}});
  }
  j["synops"] = {{"total", session.ledger().total_synops()}, {"per_layer", layers}};

  std::ostringstream os;
  os << "model " << model.name << ", " << outs.size() << " timesteps\n";
  os << "decision " << (d.cls == FallClass::fall ? "FALL" : "no fall") << " (p = " << std::setprecision(4) << d.p
     << ")\n";
  os << "synops " << session.ledger().total_synops() << "\n";
  emit(os.str(), a.report, j.dump(2) + "\n");
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string model_config;
  std::string init;
  std::optional<std::string> report;
  std::uint64_t window_us = 0;
  std::string crop;
  int down = 1;
  bool resume = false;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  require_file(a.config, "train config");
  require_dir(a.data, "data directory");
  require_writable_parent(a.out);
  if (a.report) require_writable_parent(*a.report);
  if (a.model_config.empty() == a.init.empty()) {
    throw ConfigError("train needs exactly one of --model-config or --init");
  }
  if (!a.model_config.empty()) require_file(a.model_config, "model config");
  if (!a.init.empty()) require_file(a.init, "initial model");

  std::optional<ModelGraph> graph;
  if (!a.model_config.empty()) {
    auto mc = parse_model_config(slurp_text(a.model_config));
    if (g.seed != 1 && mc.options.seed == 1) mc.options.seed = g.seed;
    graph = build_model(mc);
  } else if (!a.resume) {
    graph = load_model_file(a.init);
  }
  const auto arch = graph ? graph->architecture : load_model_file(a.init).architecture;
  auto cfg = parse_train_config(slurp_text(a.config), default_train_config(arch));

  auto trainer = graph ? Trainer(*graph, cfg) : Trainer::load_checkpoint(a.init, cfg);
  BenchConfig prep;
  prep.window_us = a.window_us;
  if (!a.crop.empty()) prep.crop = parse_crop(a.crop);
  prep.downsample = a.down;
  const auto data = make_examples(load_dataset(a.data), trainer.graph(), prep);
  spdlog::info("training {} on {} examples, {} epochs", trainer.graph().name, data.size(), cfg.epochs);

  ordered_json hist = ordered_json::array();
  std::ostringstream os;
  trainer.fit(data, [&](const EpochResult& e) {
    spdlog::info("epoch {} loss {:.6f}", e.epoch, e.mean_loss);
    hist.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"steps", e.steps}});
    os << "epoch " << std::setw(4) << e.epoch << "  loss " << std::setprecision(6) << e.mean_loss << "\n";
  });
  trainer.save_checkpoint(a.out);
  os << "saved " << a.out << " (+ optimizer state " << a.out << ".opt)\n";
  ordered_json j;
  j["schema"] = "evspike.train/1";
  j["model"] = trainer.graph().name;
  j["examples"] = data.size();
  j["epochs"] = hist;
  emit(os.str(), a.report, j.dump(2) + "\n");
  return kExitOk;
}

struct BenchArgs {
  std::string model;
  std::string data;
  std::optional<std::string> report;
  std::uint64_t window_us = 0;
  std::string mode;
  std::string crop;
  int down = 1;
  double threshold = 0.5;
  std::string numeric = "reference";
  std::string power;
  std::string scheme;
  double step_us = 0.0;
  bool json_stdout = false;
};

int cmd_bench(const BenchArgs& a) {
  require_file(a.model, "model");
  require_dir(a.data, "data directory");
  if (a.report) require_writable_parent(*a.report);
  BenchConfig cfg;
  cfg.window_us = a.window_us;
  if (!a.mode.empty()) cfg.mode = parse_mode(a.mode);
  if (!a.crop.empty()) cfg.crop = parse_crop(a.crop);
  cfg.downsample = a.down;
  cfg.threshold = a.threshold;
  cfg.numeric = parse_numeric(a.numeric);
  if (!a.power.empty()) cfg.power = parse_power(a.power);
  if (!a.scheme.empty()) {
    ScheduleConfig sc;
    sc.scheme = parse_scheme(a.scheme);
    if (a.step_us > 0.0) sc.step_time_us = a.step_us;
    cfg.schedule = sc;
  }
  const auto model = load_model_file(a.model);
  if (cfg.schedule && model.patch) {
    cfg.schedule->patches = static_cast<int>(patch_offsets(model.input_shape.height, *model.patch).size() *
                                             patch_offsets(model.input_shape.width, *model.patch).size());
  }
  const auto data = load_dataset(a.data);
  spdlog::info("benchmarking {} on {} samples", model.name, data.size());
  const auto rep = run_benchmark(model, data, cfg);
  for (const auto& s : rep.samples) {
    if (s.failed) spdlog::warn("sample {} failed: {}", s.id, s.error);
  }
  emit(a.json_stdout ? rep.to_json() : rep.to_text(), a.report, rep.to_json());
  return kExitOk;
}

struct TimingArgs {
  std::string model;
  std::string scheme = "fall_through";
  double step_us = 1000.0;
  int patches = 0;
  std::optional<std::string> report;
  std::string power;
  double synops_per_s = 0.0;
};

int cmd_timing(const TimingArgs& a) {
  require_file(a.model, "model");
  if (a.report) require_writable_parent(*a.report);
  ScheduleConfig sc;
  sc.scheme = parse_scheme(a.scheme);
  sc.step_time_us = a.step_us;
  const auto model = load_model_file(a.model);
  if (a.patches > 0) {
    sc.patches = a.patches;
  } else if (model.patch) {
    sc.patches = static_cast<int>(patch_offsets(model.input_shape.height, *model.patch).size() *
                                  patch_offsets(model.input_shape.width, *model.patch).size());
  }
  std::optional<PowerSpec> power;
  if (!a.power.empty()) power = parse_power(a.power);
  const auto steps = hardware_steps(model, sc);
  const auto t = timing(steps, sc.step_time_us);

  ordered_json j;
  j["schema"] = "evspike.timing/1";
  j["model"] = model.name;
  j["scheme"] = to_string(sc.scheme);
  j["patches"] = sc.patches;
  j["step_time_us"] = sc.step_time_us;
  j["hardware_steps"] = t.hardware_steps;
  j["latency_us"] = t.latency_us;
  j["max_throughput_hz"] = t.max_throughput_hz;
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "model " << model.name << ", scheme " << to_string(sc.scheme) << ", " << sc.patches << " patch(es)\n";
  os << "  hardware steps  " << t.hardware_steps << "\n";
  os << "  latency         " << t.latency_us / 1e3 << " ms\n";
  os << "  max throughput  " << t.max_throughput_hz << " Hz\n";
  if (power) {
    const auto pe = estimate_power(power->cores, a.synops_per_s, power->model);
    j["power"] = {{"cores", power->cores},
                  {"synops_per_s", a.synops_per_s},
                  {"static_mw", pe.static_mw},
                  {"dynamic_mw", pe.dynamic_mw},
                  {"total_mw", pe.total_mw}};
    os << "  power           " << pe.static_mw << " + " << pe.dynamic_mw << " = " << pe.total_mw << " mW\n";
  }
  emit(os.str(), a.report, j.dump(2) + "\n");
  return kExitOk;
}

struct InspectArgs {
  std::string path;
  bool json = false;
};

int cmd_inspect(const InspectArgs& a) {
  require_file(a.path, "file");
  const auto bytes = read_file(a.path);
  const std::string magic(bytes.begin(), bytes.begin() + static_cast<long>(std::min<std::size_t>(4, bytes.size())));
  ordered_json j;
  std::ostringstream os;
  if (magic == "EVSM") {
    const auto m = load_model(bytes);
    j["kind"] = "model";
    j["name"] = m.name;
    j["architecture"] = to_string(m.architecture);
    j["input"] = to_string(m.input_shape);
    j["parameters"] = m.parameter_count();
    j["dense_synops_per_step"] = m.dense_synops_per_step();
    ordered_json layers = ordered_json::array();
    const auto dense = m.dense_synops_per_layer(m.patch);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
      const auto& l = m.layers[i];
      layers.push_back({{"name", l.name},
                        {"kind", to_string(l.kind)},
                        {"neuron", to_string(l.neuron.kind)},
                        {"in", to_string(l.in_shape)},
                        {"out", to_string(l.out_shape)},
                        {"weights", l.weights.values.size()},
                        {"dense_synops", dense[i]}});
    }
    j["layers"] = layers;
    os << describe_model(m);
  } else if (magic == "EVF1") {
    const auto seq = decode_frames(bytes);
    std::size_t nnz = 0;
    for (const auto& f : seq.frames) nnz += f.count_nonzero();
    j["kind"] = "frames";
    j["frames"] = seq.frames.size();
    j["shape"] = seq.frames.empty() ? "-" : to_string(seq.frames[0].shape());
    j["window_us"] = seq.window_us;
    j["group"] = seq.group;
    j["mode"] = seq.mode == AccumulationMode::graded ? "graded" : "binary";
    j["last_partial"] = seq.last_partial;
    j["nonzero"] = nnz;
    os << "frames: " << seq.frames.size() << " x " << j["shape"].get<std::string>() << ", window "
       << seq.window_us << " us, group " << seq.group << ", " << j["mode"].get<std::string>() << ", " << nnz
       << " nonzero cells" << (seq.last_partial ? ", last partial" : "") << "\n";
  } else if (magic == "EVS1") {
    const auto s = decode_stream(bytes);
    j["kind"] = "events";
    j["width"] = s.width;
    j["height"] = s.height;
    j["events"] = s.events.size();
    const auto t0 = s.events.empty() ? 0 : s.events.front().t;
    const auto t1 = s.events.empty() ? 0 : s.events.back().t;
    j["t_first_us"] = t0;
    j["t_last_us"] = t1;
    os << "events: " << s.events.size() << " on " << s.width << "x" << s.height << ", t " << t0 << ".." << t1
       << " us\n";
  } else {
    throw FormatError("'" + a.path + "' is not an EVSM, EVF1 or EVS1 file");
  }
  std::cout << (a.json ? j.dump(2) + "\n" : os.str());
  return kExitOk;
}

spdlog::level::level_enum parse_level(const std::string& s) {
  const auto lvl = spdlog::level::from_str(s);
  if (lvl == spdlog::level::off && s != "off") throw ConfigError("unknown log level '" + s + "'");
  return lvl;
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("evspike");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::warn);

  CLI::App app{"Event-based spiking network toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off (env EVSPIKE_LOG)");

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen", "Generate a synthetic fall/no-fall dataset");
  c_gen->add_option("--out", gen.out, "Output directory")->required();
  c_gen->add_option("--n", gen.p.n_samples, "Number of samples")->capture_default_str();
  c_gen->add_option("--width", gen.p.width, "Sensor width")->capture_default_str();
  c_gen->add_option("--height", gen.p.height, "Sensor height")->capture_default_str();
  c_gen->add_option("--fall-fraction", gen.p.fall_fraction, "Share of fall samples")->capture_default_str();
  c_gen->add_option("--noise", gen.p.noise_rate, "Background events per pixel per second")->capture_default_str();
  c_gen->add_option("--duration-us", gen.p.duration_us, "Sample duration")->capture_default_str();
  c_gen->add_option("--events-per-px", gen.p.events_per_px, "Motion event density")->capture_default_str();

  AccArgs acc;
  auto* c_acc = app.add_subcommand("accumulate", "Accumulate an event file into frames");
  c_acc->add_option("--in", acc.in, "EVS1 or CSV event file")->required();
  c_acc->add_option("--out", acc.out, "Output frames file (EVF1)")->required();
  c_acc->add_option("--window-us", acc.window_us, "Window length")->capture_default_str();
  c_acc->add_option("--mode", acc.mode, "graded|binary")->capture_default_str();
  c_acc->add_option("--group", acc.group, "Windows merged per frame")->capture_default_str();
  c_acc->add_option("--crop", acc.crop, "x0,y0,w,h");
  c_acc->add_option("--down", acc.down, "Downsampling factor")->capture_default_str();
  c_acc->add_option("--width", acc.csv_width, "CSV sensor width");
  c_acc->add_option("--height", acc.csv_height, "CSV sensor height");

  BuildArgs bld;
  auto* c_build = app.add_subcommand("build", "Build an initialized model from a model config");
  c_build->add_option("--config", bld.config, "Model config JSON")->required();
  c_build->add_option("--out", bld.out, "Output EVSM file")->required();

  InferArgs inf;
  auto* c_infer = app.add_subcommand("infer", "Run a model over a frames file");
  c_infer->add_option("--model", inf.model, "EVSM model")->required();
  c_infer->add_option("--frames", inf.frames, "EVF1 frames")->required();
  c_infer->add_option("--report", inf.report, "JSON report path");
  c_infer->add_option("--numeric", inf.numeric, "reference|fixed")->capture_default_str();
  c_infer->add_option("--threshold", inf.threshold, "Fall threshold")->capture_default_str();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model on a dataset directory");
  c_train->add_option("--config", tr.config, "Train config JSON")->required();
  c_train->add_option("--data", tr.data, "Dataset directory")->required();
  c_train->add_option("--out", tr.out, "Output EVSM checkpoint")->required();
  c_train->add_option("--model-config", tr.model_config, "Model config JSON for a fresh model");
  c_train->add_option("--init", tr.init, "Start from an EVSM model");
  c_train->add_flag("--resume", tr.resume, "Also restore the optimizer sidecar of --init");
  c_train->add_option("--report", tr.report, "JSON report path");
  c_train->add_option("--window-us", tr.window_us, "Accumulation window (default: model timestep)");
  c_train->add_option("--crop", tr.crop, "x0,y0,w,h");
  c_train->add_option("--down", tr.down, "Downsampling factor")->capture_default_str();

  BenchArgs bn;
  auto* c_bench = app.add_subcommand("bench", "Evaluate a model on a labeled dataset");
  c_bench->add_option("--model", bn.model, "EVSM model")->required();
  c_bench->add_option("--data", bn.data, "Dataset directory")->required();
  c_bench->add_option("--report", bn.report, "JSON report path");
  c_bench->add_option("--window-us", bn.window_us, "Accumulation window (default: model timestep)");
  c_bench->add_option("--mode", bn.mode, "graded|binary (default: model input mode)");
  c_bench->add_option("--crop", bn.crop, "x0,y0,w,h");
  c_bench->add_option("--down", bn.down, "Downsampling factor")->capture_default_str();
  c_bench->add_option("--threshold", bn.threshold, "Fall threshold")->capture_default_str();
  c_bench->add_option("--numeric", bn.numeric, "reference|fixed")->capture_default_str();
  c_bench->add_option("--power", bn.power, "cores=K,static=mW,dyn=pW");
  c_bench->add_option("--scheme", bn.scheme, "pipelined|fall_through");
  c_bench->add_option("--step-us", bn.step_us, "Hardware step time");
  c_bench->add_flag("--json", bn.json_stdout, "Print the JSON report instead of text");

  TimingArgs tm;
  auto* c_timing = app.add_subcommand("timing", "Hardware step count, latency and power");
  c_timing->add_option("--model", tm.model, "EVSM model")->required();
  c_timing->add_option("--scheme", tm.scheme, "pipelined|fall_through")->capture_default_str();
  c_timing->add_option("--step-us", tm.step_us, "Hardware step time")->capture_default_str();
  c_timing->add_option("--patches", tm.patches, "Patch count (default: model patching)");
  c_timing->add_option("--report", tm.report, "JSON report path");
  c_timing->add_option("--power", tm.power, "cores=K,static=mW,dyn=pW");
  c_timing->add_option("--synops-per-s", tm.synops_per_s, "Measured SynOps/s for the power estimate");

  InspectArgs ins;
  auto* c_inspect = app.add_subcommand("inspect", "Describe an EVSM, EVF1 or EVS1 file");
  c_inspect->add_option("path", ins.path, "File")->required();
  c_inspect->add_flag("--json", ins.json, "JSON output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    std::string level = g.log_level;
    if (level.empty()) {
      if (const char* env = std::getenv("EVSPIKE_LOG")) level = env;
    }
    if (!level.empty()) spdlog::set_level(parse_level(level));
    set_thread_count(g.threads);

    if (c_gen->parsed()) return cmd_gen(g, gen);
    if (c_acc->parsed()) return cmd_accumulate(acc);
    if (c_build->parsed()) return cmd_build(g, bld);
    if (c_infer->parsed()) return cmd_infer(inf);
    if (c_train->parsed()) return cmd_train(g, tr);
    if (c_bench->parsed()) return cmd_bench(bn);
    if (c_timing->parsed()) return cmd_timing(tm);
    if (c_inspect->parsed()) return cmd_inspect(ins);
    return kExitUsage;
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return kExitInternal;
  }
}
