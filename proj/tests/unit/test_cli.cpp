#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "evspike/models.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

// Runs the CLI with stdout and stderr captured to a file in the scratch dir.
Run run(const fs::path& dir, const std::string& args) {
  const auto log = dir / "last_run.txt";
  const std::string cmd = std::string("\"") + EVSPIKE_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> dir_contents(const fs::path& d) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::directory_iterator(d)) m[e.path().filename().string()] = slurp(e.path());
  return m;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

struct Scratch {
  fs::path dir;
  Scratch() {
    dir = fs::temp_directory_path() / ("evspike_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string p(const std::string& name) const { return "\"" + (dir / name).string() + "\""; }
};

constexpr const char* kModelCfg = R"({"architecture": "cnn_mlp", "neuron": "lif_graded", "input_side": 32,
  "conv_channels": [4, 8], "mlp_hidden": [16], "timestep_us": 60000, "seed": 2})";

}  // namespace

TEST_CASE("gen is reproducible") {
  Scratch s;
  REQUIRE(run(s.dir, "--seed 7 gen --out " + s.p("d1") + " --n 12 --width 32 --height 32").code == 0);
  REQUIRE(run(s.dir, "--seed 7 gen --out " + s.p("d2") + " --n 12 --width 32 --height 32").code == 0);
  const auto a = dir_contents(s.dir / "d1");
  const auto b = dir_contents(s.dir / "d2");
  CHECK(a.size() == 13);
  CHECK(a.count("labels.csv") == 1);
  CHECK(a == b);
  REQUIRE(run(s.dir, "--seed 8 gen --out " + s.p("d3") + " --n 12 --width 32 --height 32").code == 0);
  CHECK(dir_contents(s.dir / "d3") != a);
}

TEST_CASE("usage errors exit 1") {
  Scratch s;
  CHECK(run(s.dir, "gen --out " + s.p("d") + " --bogus").code == 1);
  CHECK(run(s.dir, "gen").code == 1);
  CHECK(run(s.dir, "frobnicate").code == 1);
  CHECK(run(s.dir, "--threads -2 gen --out " + s.p("d")).code == 1);
  write_text(s.dir / "bad.json", R"({"architecture": "rnn"})");
  CHECK(run(s.dir, "build --config " + s.p("bad.json") + " --out " + s.p("m.evsm")).code == 1);
  CHECK(!fs::exists(s.dir / "m.evsm"));
  CHECK(run(s.dir, "--help").code == 0);
}

TEST_CASE("data errors exit 2 without partial output") {
  Scratch s;
  write_text(s.dir / "model.json", kModelCfg);
  REQUIRE(run(s.dir, "build --config " + s.p("model.json") + " --out " + s.p("m.evsm")).code == 0);
  const auto r = run(s.dir, "bench --model " + s.p("m.evsm") + " --data " + s.p("missing") + " --report " + s.p("r.json"));
  CHECK(r.code == 2);
  CHECK(!fs::exists(s.dir / "r.json"));
  CHECK(run(s.dir, "bench --model " + s.p("nope.evsm") + " --data " + s.p("missing") + " --report " + s.p("r.json")).code == 2);
  CHECK(!fs::exists(s.dir / "r.json"));

  write_text(s.dir / "garbage.evsm", "EVSMnot really a model");
  CHECK(run(s.dir, "inspect " + s.p("garbage.evsm")).code == 2);
  write_text(s.dir / "junk.bin", "????");
  CHECK(run(s.dir, "inspect " + s.p("junk.bin")).code == 2);

  auto bytes = slurp(s.dir / "m.evsm");
  bytes[bytes.size() / 2] ^= 0x40;
  { std::ofstream(s.dir / "flipped.evsm", std::ios::binary) << bytes; }
  CHECK(run(s.dir, "inspect " + s.p("flipped.evsm")).code == 2);
}

TEST_CASE("inspect a model") {
  Scratch s;
  write_text(s.dir / "model.json", kModelCfg);
  REQUIRE(run(s.dir, "build --config " + s.p("model.json") + " --out " + s.p("m.evsm")).code == 0);
  const auto g = evspike::load_model_file((s.dir / "m.evsm").string());
  const auto r = run(s.dir, "inspect " + s.p("m.evsm"));
  REQUIRE(r.code == 0);
  CHECK(r.out.find("parameters: " + std::to_string(g.parameter_count())) != std::string::npos);
  CHECK(r.out.find(std::to_string(g.dense_synops_per_step())) != std::string::npos);
  for (const auto& l : g.layers) CHECK(r.out.find(l.name) != std::string::npos);

  const auto j = run(s.dir, "inspect --json " + s.p("m.evsm"));
  REQUIRE(j.code == 0);
  const auto doc = nlohmann::json::parse(j.out);
  CHECK(doc["parameters"] == g.parameter_count());
  CHECK(doc["layers"].size() == g.layers.size());
}

TEST_CASE("accumulate, infer and timing") {
  Scratch s;
  REQUIRE(run(s.dir, "--seed 3 gen --out " + s.p("d") + " --n 4 --width 32 --height 32").code == 0);
  write_text(s.dir / "model.json", kModelCfg);
  REQUIRE(run(s.dir, "build --config " + s.p("model.json") + " --out " + s.p("m.evsm")).code == 0);

  std::string first;
  for (const auto& e : fs::directory_iterator(s.dir / "d"))
    if (e.path().extension() == ".evs" && (first.empty() || e.path().string() < first)) first = e.path().string();
  REQUIRE(!first.empty());
  REQUIRE(run(s.dir, "accumulate --in \"" + first + "\" --out " + s.p("f.evf") + " --window-us 60000").code == 0);
  const auto fi = run(s.dir, "inspect --json " + s.p("f.evf"));
  REQUIRE(fi.code == 0);
  CHECK(nlohmann::json::parse(fi.out)["kind"] == "frames");
  CHECK(run(s.dir, "inspect " + s.p("d/labels.csv")).code == 2);

  REQUIRE(run(s.dir, "infer --model " + s.p("m.evsm") + " --frames " + s.p("f.evf") + " --report " + s.p("i.json")).code == 0);
  const auto rep = nlohmann::json::parse(slurp(s.dir / "i.json"));
  CHECK(rep["schema"] == "evspike.infer/1");
  CHECK(rep["outputs"].size() == rep["timesteps"]);

  REQUIRE(run(s.dir, "timing --model " + s.p("m.evsm") + " --scheme fall_through --step-us 250 --report " + s.p("t.json")).code == 0);
  const auto t = nlohmann::json::parse(slurp(s.dir / "t.json"));
  const auto g = evspike::load_model_file((s.dir / "m.evsm").string());
  const auto synapse_layers = g.synapse_layer_count();
  CHECK(t["hardware_steps"] == synapse_layers);
  CHECK(t["latency_us"].get<double>() == doctest::Approx(250.0 * synapse_layers));
  CHECK(run(s.dir, "timing --model " + s.p("m.evsm") + " --scheme sideways").code == 1);
}

TEST_CASE("bench and train are thread-count independent") {
  Scratch s;
  REQUIRE(run(s.dir, "--seed 5 gen --out " + s.p("d") + " --n 10 --width 32 --height 32 --fall-fraction 0.3").code == 0);
  write_text(s.dir / "model.json", kModelCfg);
  REQUIRE(run(s.dir, "build --config " + s.p("model.json") + " --out " + s.p("m.evsm")).code == 0);

  REQUIRE(run(s.dir, "--threads 1 bench --model " + s.p("m.evsm") + " --data " + s.p("d") + " --report " + s.p("b1.json")).code == 0);
  REQUIRE(run(s.dir, "--threads 3 bench --model " + s.p("m.evsm") + " --data " + s.p("d") + " --report " + s.p("b3.json")).code == 0);
  CHECK(slurp(s.dir / "b1.json") == slurp(s.dir / "b3.json"));
  const auto b = nlohmann::json::parse(slurp(s.dir / "b1.json"));
  CHECK(b.contains("metrics"));

  write_text(s.dir / "train.json", R"({"epochs": 1, "batch_size": 4, "seed": 9})");
  const std::string train = " train --config " + s.p("train.json") + " --data " + s.p("d") + " --model-config " + s.p("model.json");
  REQUIRE(run(s.dir, "--threads 1" + train + " --out " + s.p("t1.evsm") + " --report " + s.p("tr1.json")).code == 0);
  REQUIRE(run(s.dir, "--threads 3" + train + " --out " + s.p("t3.evsm") + " --report " + s.p("tr3.json")).code == 0);
  CHECK(slurp(s.dir / "t1.evsm") == slurp(s.dir / "t3.evsm"));
  CHECK(slurp(s.dir / "tr1.json") == slurp(s.dir / "tr3.json"));
  CHECK(nlohmann::json::parse(slurp(s.dir / "tr1.json"))["schema"] == "evspike.train/1");

  write_text(s.dir / "badtrain.json", R"({"epochs": 0})");
  CHECK(run(s.dir, "train --config " + s.p("badtrain.json") + " --data " + s.p("d") + " --model-config " + s.p("model.json") +
                       " --out " + s.p("x.evsm")).code == 1);
  CHECK(!fs::exists(s.dir / "x.evsm"));
}
