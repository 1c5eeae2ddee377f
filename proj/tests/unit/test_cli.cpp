#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using dddr::cli::run_cli;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome call(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dddr_cli_" + name);
  fs::remove_all(p);
  return p;
}

fs::path tiny_config() {
  const auto path = fs::temp_directory_path() / "dddr_cli_tiny.json";
  std::ofstream f(path);
  f << R"({
  "experiment": {"n_tasks": 2},
  "data": {"classes": 4, "samples_per_class": 16, "image_size": 8},
  "federation": {"clients": 2},
  "pretrain": {"samples_per_class": 8, "steps": 30, "batch": 16, "hidden": 32, "layers": 1,
               "timesteps": 10, "embed_dim": 4, "time_dim": 4},
  "inversion": {"rounds": 2, "local_steps": 3, "batch": 8, "eval_rows": 8},
  "training": {"rounds": 2, "epochs": 1, "batch": 8},
  "replay": {"past": 6, "current": 6},
  "classifier": {"hidden": 16, "feature_dim": 8, "proj_hidden": 8, "proj_dim": 4}
})";
  return path;
}

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// relative path -> contents for every file under `root`.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = bytes(e.path());
  return out;
}

bool one_error_line(const std::string& err, const std::string& kind) {
  std::istringstream in(err);
  std::string line, last;
  while (std::getline(in, line))
    if (line.rfind("error ", 0) == 0) last = line;
  return last.rfind("error kind=" + kind + " msg=\"", 0) == 0;
}

}  // namespace

TEST_CASE("usage errors") {
  CHECK(call({}).code == 1);
  CHECK(call({"frobnicate"}).code == 1);
  CHECK(call({"run", "--threads", "0"}).code == 1);
  const auto r = call({"run", "--set", "loss.w2=abc", "--out", scratch("usage").string()});
  CHECK(r.code == 1);
  CHECK(one_error_line(r.err, "usage"));
  CHECK(r.err.find("loss.w2") != std::string::npos);
  const auto unknown = call({"run", "--set", "loss.w9=1"});
  CHECK(unknown.code == 1);
  CHECK(unknown.err.find("loss.w9") != std::string::npos);
  CHECK(call({"run", "--help"}).code == 0);
}

TEST_CASE("stage commands need earlier artifacts") {
  const auto dir = scratch("stages");
  const auto cfg = tiny_config().string();
  const auto inv = call({"invert", "--config", cfg, "--out", dir.string()});
  CHECK(inv.code == 2);
  CHECK(one_error_line(inv.err, "data"));
  CHECK(inv.err.find("meta.json") != std::string::npos);

  CHECK(call({"gen-data", "--config", cfg, "--out", dir.string()}).code == 0);
  const auto inv2 = call({"invert", "--out", dir.string()});
  CHECK(inv2.code == 2);
  CHECK(inv2.err.find("denoiser.ckpt") != std::string::npos);
  CHECK(call({"plot", "--out", dir.string()}).code == 2);
  fs::remove_all(dir);
}

TEST_CASE("run, eval, plot and audit") {
  const auto cfg = tiny_config().string();
  const auto a = scratch("run_a"), b = scratch("run_b"), s = scratch("run_staged");
  const std::vector<std::string> common = {"--config", cfg, "--set", "experiment.seed=7", "--set",
                                           "federation.clients=3"};
  auto with = [&](std::string cmd, const fs::path& out) {
    std::vector<std::string> v = {std::move(cmd)};
    v.insert(v.end(), common.begin(), common.end());
    v.push_back("--out");
    v.push_back(out.string());
    return call(v);
  };
  REQUIRE(with("run", a).code == 0);
  REQUIRE(with("run", b).code == 0);
  CHECK(tree(a) == tree(b));

  const auto echoed = nlohmann::json::parse(bytes(a / "config.effective.json"));
  CHECK(echoed["federation"]["clients"] == 3);
  CHECK(echoed["experiment"]["seed"] == 7);

  const auto ev = call({"eval", "--out", a.string()});
  CHECK(ev.code == 0);
  CHECK(ev.out.find("matches_stored=true") != std::string::npos);
  CHECK(bytes(a / "eval_metrics.json") == bytes(a / "metrics.json"));

  const std::string svg = bytes(a / "accuracy.svg");
  fs::remove(a / "accuracy.svg");
  CHECK(call({"plot", "--out", a.string()}).code == 0);
  CHECK(bytes(a / "accuracy.svg") == svg);

  const auto au = call({"audit", "--out", a.string()});
  CHECK(au.code == 0);
  CHECK(au.out.find("best_psnr_db=") != std::string::npos);

  for (const char* stage : {"gen-data", "pretrain", "invert", "train"}) REQUIRE(with(stage, s).code == 0);
  for (const char* f : {"metrics.json", "accuracy.csv", "logs/train.jsonl", "checkpoints/classifier_task1.ckpt",
                        "checkpoints/embeddings.ckpt", "config.effective.json"})
    CHECK_MESSAGE(bytes(a / f) == bytes(s / f), f);

  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(s);
}

TEST_CASE("output root from the environment") {
  const auto root = scratch("envroot");
  ::setenv("DDDR_OUT", root.string().c_str(), 1);
  const auto r = call({"gen-data", "--config", tiny_config().string(), "--set", "experiment.seed=3"});
  ::unsetenv("DDDR_OUT");
  CHECK(r.code == 0);
  REQUIRE(fs::exists(root));
  std::size_t dirs = 0;
  for (const auto& e : fs::directory_iterator(root)) {
    ++dirs;
    const std::string name = e.path().filename().string();
    CHECK(name.size() > 6);
    CHECK(name.substr(name.size() - 6) == "-seed3");
    CHECK(fs::exists(e.path() / "data" / "client" / "manifest.csv"));
  }
  CHECK(dirs == 1);
  fs::remove_all(root);
}
