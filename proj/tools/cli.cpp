#include "cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "dddr/orchestrator.hpp"
#include "json.hpp"

namespace dddr::cli {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  int threads = 1;
};

void fail_line(std::ostream& err, const char* kind, const std::string& msg) {
  err << "error kind=" << kind << " msg=" << nlohmann::json(msg).dump() << "\n";
}

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path resolve_out(const Options& o, const ExperimentConfig& cfg) {
  if (!o.out.empty()) return o.out;
  const char* root = std::getenv("DDDR_OUT");
  const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
  return base / (timestamp() + "-seed" + std::to_string(cfg.seed));
}

/// --config wins; otherwise a stage reuses the effective config echoed into
/// the output directory by an earlier stage.
ExperimentConfig load_config(const Options& o) {
  if (!o.config.empty()) return parse_config(o.config, o.sets);
  if (!o.out.empty()) {
    const fs::path echoed = RunLayout{o.out}.effective_config();
    if (fs::exists(echoed)) return parse_config(echoed, o.sets);
  }
  return parse_config_text("", o.sets);
}

void echo_config(const ExperimentConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  std::ofstream f(RunLayout{out}.effective_config(), std::ios::binary | std::ios::trunc);
  f << config_to_json(cfg);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingArtifact(p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + p.string());
  f << text;
}

void print_report(std::ostream& out, const MetricsReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "method=%s average_accuracy=%.4f forgetting=%.4f local_mean=%.4f local_std=%.4f\n",
                r.method.c_str(), r.average_accuracy, r.forgetting, r.local.mean, r.local.stddev);
  out << buf;
}

int dispatch(const std::string& cmd, const Options& o, std::ostream& out, std::ostream& err) {
  const ExperimentConfig cfg = load_config(o);
  const fs::path dir = resolve_out(o, cfg);
  const ProgressFn progress = [&err](const std::string& s) { err << s << "\n"; };
  const RunLayout lay{dir};

  if (cmd == "run") {
    const RunResult r = run_fccl(cfg, dir, progress);
    print_report(out, r.report);
    out << "out=" << dir.string() << "\n";
    return kOk;
  }
  if (cmd == "gen-data") {
    echo_config(cfg, dir);
    stage_gen_data(cfg, dir);
  } else if (cmd == "pretrain") {
    echo_config(cfg, dir);
    const DiffusionModel m = stage_pretrain(cfg, dir, progress);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(m.frozen_checksum()));
    out << "denoiser_checksum=" << buf << "\n";
  } else if (cmd == "invert") {
    echo_config(cfg, dir);
    const EmbeddingStore s = stage_invert(cfg, dir, progress);
    out << "embeddings=" << s.size() << "\n";
  } else if (cmd == "train") {
    echo_config(cfg, dir);
    print_report(out, stage_train(cfg, dir, progress).report);
  } else if (cmd == "eval") {
    const MetricsReport r = evaluate_run(cfg, dir);
    const std::string text = metrics_json(r);
    write_file(dir / "eval_metrics.json", text);
    print_report(out, r);
    if (fs::exists(lay.metrics())) {
      const bool same = read_file(lay.metrics()) == text;
      out << "matches_stored=" << (same ? "true" : "false") << "\n";
      if (!same) {
        fail_line(err, "numeric", "recomputed metrics differ from " + lay.metrics().string());
        return kNumeric;
      }
    }
  } else if (cmd == "audit") {
    for (const auto& a : audit_run(cfg, dir)) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "class=%u best_psnr_db=%.3f best_ssim=%.4f\n", a.cls, a.best_psnr.value,
                    a.best_ssim.value);
      out << buf;
    }
  } else if (cmd == "plot") {
    const AccuracyMatrix m = read_accuracy_csv(lay.accuracy_csv());
    std::vector<double> curve;
    for (std::size_t t = 0; t < m.rows.size(); ++t) curve.push_back(seen_class_accuracy(m, t));
    write_file(lay.accuracy_svg(), accuracy_svg(curve, to_string(cfg.method) + ": seen-class accuracy"));
    out << "svg=" << lay.accuracy_svg().string() << "\n";
  }
  out << "out=" << dir.string() << "\n";
  return kOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Federated class-incremental learning with diffusion-based replay"};
  app.require_subcommand(1, 1);
  Options o;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "Generate the client and pretraining corpora"},
      {"pretrain", "Pretrain the conditional denoiser"},
      {"invert", "Federated class inversion for every task"},
      {"train", "Replay-augmented federated training for every task"},
      {"run", "Full pipeline"},
      {"eval", "Recompute metrics from stored checkpoints"},
      {"audit", "Similarity audit of generated replay against real data"},
      {"plot", "Write the accuracy chart from accuracy.csv"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "JSON config file");
    sub->add_option("--set", o.sets, "Override, key=value (repeatable)");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
  }

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    fail_line(err, "usage", e.what());
    return kUsage;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    return dispatch(cmd, o, out, err);
  } catch (const Error& e) {
    switch (e.kind()) {
      case ErrorKind::Usage: fail_line(err, "usage", e.what()); return kUsage;
      case ErrorKind::Data: fail_line(err, "data", e.what()); return kData;
      case ErrorKind::Numeric: fail_line(err, "numeric", e.what()); return kNumeric;
    }
  } catch (const fs::filesystem_error& e) {
    fail_line(err, "data", e.what());
    return kData;
  } catch (const std::exception& e) {
    fail_line(err, "numeric", e.what());
    return kNumeric;
  }
  return kNumeric;
}

}  // namespace dddr::cli
