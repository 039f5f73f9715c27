#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string output;
};

// Runs the CLI with stderr merged into the captured output.
Result run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + CIRCUITSCOPE_CLI + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

// A scratch directory holding a fixture model and dataset.
struct Workdir {
  fs::path root;
  explicit Workdir(const std::string& name) : root(fs::temp_directory_path() / ("cs_cli_" + name)) {
    fs::remove_all(root);
    fs::create_directories(root);
    REQUIRE(run("fixture " + model().string() + " --n 4").code == 0);
  }
  ~Workdir() { fs::remove_all(root); }
  fs::path model() const { return root / "model"; }
  fs::path dataset() const { return model() / "dataset.jsonl"; }
  std::string io(const std::string& out) const {
    return "--model " + model().string() + " --dataset " + dataset().string() + " --out " + (root / out).string();
  }
};

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("eval writes a report") {
  Workdir w("eval");
  const auto r = run("eval " + w.io("out"));
  CHECK(r.code == 0);
  CHECK(r.output.find("zero_rank_rate=") != std::string::npos);
  const auto report = read_json(w.root / "out" / "report.json");
  CHECK(report.at("command") == "eval");
  CHECK(report.at("result").at("n") == 4);
  CHECK(report.at("model").at("fingerprint").get<std::string>().size() == 64);
  CHECK(report.at("dataset").at("digest").get<std::string>().size() == 64);
}

TEST_CASE("missing dataset fails with the path") {
  Workdir w("missing");
  const auto r = run("eval --model " + w.model().string() + " --dataset /nonexistent/cli.jsonl --out " +
                     (w.root / "out").string());
  CHECK(r.code != 0);
  CHECK(r.output.find("/nonexistent/cli.jsonl") != std::string::npos);
  CHECK(r.output.find("IoError") != std::string::npos);
  CHECK(run("eval --dataset " + w.dataset().string()).code != 0);
  CHECK(run("no-such-command").code != 0);
}

TEST_CASE("flow output is identical across reruns and worker counts") {
  Workdir w("flow");
  REQUIRE(run("flow " + w.io("a") + " --workers 1").code == 0);
  REQUIRE(run("flow " + w.io("b") + " --workers 1").code == 0);
  REQUIRE(run("flow " + w.io("c") + " --workers 4").code == 0);
  for (const char* f : {"frequency.json", "frequency.csv", "graphs/synthetic-0.dot", "graphs/synthetic-3.dot"}) {
    const auto a = slurp(w.root / "a" / f);
    CHECK(a == slurp(w.root / "b" / f));
    CHECK(a == slurp(w.root / "c" / f));
  }
  auto ra = read_json(w.root / "a" / "report.json");
  auto rc = read_json(w.root / "c" / "report.json");
  for (const char* key : {"frequency", "frequency_matrix", "contribution", "graphs"}) CHECK(ra.at(key) == rc.at(key));
}

TEST_CASE("compare a frequency file with itself") {
  Workdir w("compare");
  const auto freq = w.root / "freq.json";
  write(freq, R"({"n_layers": 2, "n_heads": 2, "values": [0.0, 0.25, 0.5, 1.0]})");
  const auto r = run("compare " + freq.string() + " " + freq.string() + " --out " + (w.root / "out").string());
  CHECK(r.code == 0);
  const auto report = read_json(w.root / "out" / "report.json");
  CHECK(report.at("result").at("pearson_rho").get<double>() == doctest::Approx(1.0));
  CHECK(report.at("result").at("jaccard").get<double>() == doctest::Approx(1.0));
  CHECK(fs::exists(w.root / "out" / "circuits" / "shared.dot"));
}

TEST_CASE("config file values are overridden by flags") {
  Workdir w("config");
  const auto cfg = w.root / "flow.json";
  json c = {{"model_dir", w.model().string()},
            {"dataset_path", w.dataset().string()},
            {"output_dir", (w.root / "from_config").string()},
            {"tau", 0.5},
            {"graphs", false}};
  write(cfg, c.dump());
  REQUIRE(run("flow --config " + cfg.string()).code == 0);
  auto report = read_json(w.root / "from_config" / "report.json");
  CHECK(report.at("params").at("tau").get<double>() == doctest::Approx(0.5));
  CHECK_FALSE(fs::exists(w.root / "from_config" / "graphs"));

  REQUIRE(run("flow --config " + cfg.string() + " --tau 0.1 --out " + (w.root / "flagged").string()).code == 0);
  report = read_json(w.root / "flagged" / "report.json");
  CHECK(report.at("params").at("tau").get<double>() == doctest::Approx(0.1));

  write(w.root / "bad.json", R"({"tau": "x", "model_dir": ")" + w.model().string() + R"(", "dataset_path": ")" +
                                 w.dataset().string() + "\"}");
  CHECK(run("flow --config " + (w.root / "bad.json").string() + " --out " + (w.root / "bad").string()).code != 0);
  CHECK(run("flow --config " + (w.root / "absent.json").string()).code != 0);
}

TEST_CASE("scratch directory is left clean") {
  Workdir w("cache");
  const auto cache = w.root / "cache";
  fs::create_directories(cache);
  REQUIRE(run("flow " + w.io("out"), "CIRCUITSCOPE_CACHE=" + cache.string()).code == 0);
  CHECK(fs::is_empty(cache));
  for (const auto& entry : fs::recursive_directory_iterator(w.root / "out")) {
    CHECK(entry.path().extension() != ".tmp");
  }
  CHECK(fs::exists(w.root / "out" / "frequency.json"));
}

TEST_CASE("patch rejects a dataset without corrupted prompts") {
  Workdir w("zh");
  const auto data = w.root / "zh.jsonl";
  write(data, R"({"id":"zh-0","task":"tense","lang":"zh","variant":"normal","tokens":[1,2,3],"roles":{"END":2},"answer":4})"
              "\n");
  const auto r = run("patch --model " + w.model().string() + " --dataset " + data.string() + " --out " +
                     (w.root / "out").string());
  CHECK(r.code != 0);
  CHECK(r.output.find("MissingCorrupted") != std::string::npos);
  CHECK(run("eval --model " + w.model().string() + " --dataset " + data.string() + " --out " +
            (w.root / "eval").string())
            .code == 0);
}

TEST_CASE("lens clips an oversized topk with a warning") {
  Workdir w("lens");
  const auto r = run("lens " + w.io("out") + " --topk 100000");
  CHECK(r.code == 0);
  CHECK(r.output.find("warning: topk 100000 exceeds vocabulary size") != std::string::npos);
}

TEST_CASE("selftest passes") {
  Workdir w("selftest");
  const auto r = run("selftest --out " + (w.root / "out").string());
  CHECK(r.code == 0);
  CHECK(read_json(w.root / "out" / "report.json").at("result").at("passed") == true);
}

}  // TEST_SUITE
