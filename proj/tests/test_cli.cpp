#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>

#include "doctest.h"
#include "dpad/config.hpp"
#include "dpad/data.hpp"
#include "dpad/errors.hpp"
#include "dpad/scoring.hpp"
#include "testing.hpp"

using namespace dpad;
using dpad::testing::close;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path sandbox() {
  static fs::path dir = [] {
    fs::path p = fs::temp_directory_path() /
                 ("dpad_cli_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

int run_cli(const std::string& args) {
  const std::string cmd =
      std::string(DPAD_BIN) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  return WEXITSTATUS(rc);
}

// Small-but-trainable setup shared by the end-to-end cases.
std::string tiny_config_json(const std::string& out_dir) {
  return R"({
  "data": {
    "stride": 4,
    "synthetic": {"channels": 6, "length": 1200, "seed": 13, "drivers": 3,
                   "min_segment": 8, "max_segment": 20}
  },
  "model": {"window": 8, "history": 40, "embed_dim": 6, "heads": 2,
             "priors": [0.9, 0.05], "diffusion_steps": 1, "scales": 2},
  "train": {"epochs": 2, "batch": 16, "early_stop_patience": 5},
  "seeds": [0, 1],
  "output_dir": ")" + out_dir + R"("
})";
}

json parse_after_header(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string header;
  std::getline(in, header);
  REQUIRE(header.rfind("# ", 0) == 0);
  return json::parse(in);
}

// One generate+train pass reused by the downstream command tests.
struct Workspace {
  fs::path config;   // snapshot pointing at the generated data
  fs::path train_dir;
};

const Workspace& trained_workspace() {
  static Workspace ws = [] {
    const fs::path root = sandbox();
    write_file(root / "base.json", tiny_config_json((root / "unused").string()));
    REQUIRE(run_cli("generate-synthetic --config " +
                    (root / "base.json").string() + " --out " +
                    (root / "gen").string()) == 0);
    Workspace w{root / "gen" / "config.json", root / "train"};
    REQUIRE(run_cli("train --config " + w.config.string() + " --out " +
                    w.train_dir.string()) == 0);
    return w;
  }();
  return ws;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

TEST_CASE("defaults survive an empty config") {
  RunConfig cfg = parse_config("{}", "inline");
  CHECK(cfg.model.window == 30);
  CHECK(cfg.model.history == 300);
  CHECK(cfg.model.embed_dim == 64);
  CHECK(cfg.model.heads == 3);
  CHECK(cfg.model.priors == std::vector<double>{0.9, 0.05, 0.05});
  CHECK(cfg.model.decay == 0.7);
  CHECK(cfg.model.dtype == DType::F64);
  CHECK(cfg.data.stride == 5);
  CHECK(cfg.train.epochs == 200);
  CHECK(cfg.train.lr == 1e-3);
  CHECK(cfg.seeds == std::vector<uint64_t>{0, 1, 2, 3, 4, 5});
  CHECK(cfg.output_dir == "runs");
}

TEST_CASE("unknown keys are rejected by dotted path") {
  CHECK_THROWS_WITH_AS(
      parse_config(R"({"model": {"windoww": 30}})", "inline"),
      doctest::Contains("model.windoww"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config(R"({"outputdir": "x"})", "inline"),
                       doctest::Contains("outputdir"), ConfigError);
  CHECK_THROWS_WITH_AS(
      parse_config(R"({"data": {"synthetic": {"channel": 3}}})", "inline"),
      doctest::Contains("data.synthetic.channel"), ConfigError);
}

TEST_CASE("type and range violations name the key") {
  CHECK_THROWS_WITH_AS(parse_config(R"({"model": {"window": "30"}})", "inline"),
                       doctest::Contains("model.window"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config(R"({"model": {"window": 30.5}})", "inline"),
                       doctest::Contains("model.window"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config(R"({"data": {"stride": 0}})", "inline"),
                       doctest::Contains("data.stride"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config(R"({"seeds": []})", "inline"),
                       doctest::Contains("seeds"), ConfigError);
  CHECK_THROWS_WITH_AS(
      parse_config(R"({"model": {"precision": "f16"}})", "inline"),
      doctest::Contains("precision"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"train": {"kl_form": "x"}})", "inline"),
                  ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("{", "inline"), doctest::Contains("inline"),
                       ConfigError);
}

TEST_CASE("the resolved snapshot reparses to the same snapshot") {
  RunConfig cfg = parse_config(
      R"({"model": {"heads": 2, "priors": [0.8, 0.1], "precision": "f32"},
           "train": {"lr": 0.004, "kl_form": "edge_term"},
           "seeds": [7], "output_dir": "elsewhere"})",
      "inline");
  const std::string snap = config_text(cfg);
  RunConfig again = parse_config(snap, "snapshot");
  CHECK(config_text(again) == snap);
  CHECK(again.model.heads == 2);
  CHECK(again.model.dtype == DType::F32);
  CHECK(again.train.lr == 0.004);
  CHECK(again.train.kl_form == train::KlForm::EdgeTermOnly);
  CHECK(again.seeds == std::vector<uint64_t>{7});
}

TEST_CASE("a missing config file is a configuration error") {
  CHECK_THROWS_WITH_AS(load_config("/nonexistent/cfg.json"),
                       doctest::Contains("/nonexistent/cfg.json"), ConfigError);
}

// ---------------------------------------------------------------------------
// Binary end-to-end
// ---------------------------------------------------------------------------

TEST_CASE("usage errors exit with code 1") {
  CHECK(run_cli("") == 1);                      // no subcommand
  CHECK(run_cli("train") == 1);                 // missing --config
  CHECK(run_cli("frobnicate --config x") == 1); // unknown subcommand
  CHECK(run_cli("--help") == 0);
}

TEST_CASE("bad configs and missing data map to exit codes 1 and 2") {
  const fs::path root = sandbox();
  write_file(root / "unknown_key.json", R"({"model": {"windoww": 30}})");
  CHECK(run_cli("train --config " + (root / "unknown_key.json").string()) == 1);

  write_file(root / "missing_data.json",
             R"({"data": {"train_csv": "/nonexistent/train.csv"}})");
  CHECK(run_cli("train --config " + (root / "missing_data.json").string() +
                " --out " + (root / "missing_data_out").string()) == 2);

  CHECK(run_cli("train --config /nonexistent/cfg.json") == 1);
}

TEST_CASE("generate-synthetic writes a trainable workspace") {
  const Workspace& ws = trained_workspace();
  const fs::path gen = ws.config.parent_path();
  CHECK(fs::is_regular_file(gen / "train.csv"));
  CHECK(fs::is_regular_file(gen / "test.csv"));
  CHECK(fs::is_regular_file(gen / "segments.csv"));
  CHECK(read_file(gen / "segments.csv").rfind("# segments-v1\n", 0) == 0);

  data::TimeSeriesDataset train = data::load_csv((gen / "train.csv").string(), false);
  data::TimeSeriesDataset test = data::load_csv((gen / "test.csv").string(), true);
  CHECK(train.channels == 6);
  CHECK(test.channels == 6);
  CHECK(train.length == 720);
  CHECK(test.length == 480);
  CHECK(!train.has_labels());
  CHECK(test.has_labels());
  CHECK(test.anomaly_ratio() > 0.0);
}

TEST_CASE("train writes per-seed checkpoints, histories, and a summary") {
  const Workspace& ws = trained_workspace();
  for (const char* seed : {"seed_0", "seed_1"}) {
    CHECK(fs::is_regular_file(ws.train_dir / seed / "checkpoint.bin"));
    const std::string hist = read_file(ws.train_dir / seed / "history.csv");
    CHECK(hist.rfind("# history-v1\n", 0) == 0);
    CHECK(hist.find("epoch,train_loss,val_loss,val_nll,lr") != std::string::npos);
  }
  CHECK(fs::is_regular_file(ws.train_dir / "config.json"));
  json summary = parse_after_header(ws.train_dir / "summary.json");
  CHECK(summary["runs"].size() == 2);
  CHECK(summary["runs"][0]["seed"] == 0);
  CHECK(summary["runs"][1]["seed"] == 1);
  CHECK(summary.contains("mean_best_val_loss"));
}

TEST_CASE("retraining from the snapshot reproduces the history bytes") {
  const Workspace& ws = trained_workspace();
  const fs::path rerun = sandbox() / "train_rerun";
  REQUIRE(run_cli("train --config " + (ws.train_dir / "config.json").string() +
                  " --seed 0 --out " + rerun.string()) == 0);
  CHECK(read_file(rerun / "seed_0" / "history.csv") ==
        read_file(ws.train_dir / "seed_0" / "history.csv"));
  CHECK(!fs::exists(rerun / "seed_1"));  // --seed narrows the list
}

TEST_CASE("score writes one scores file per checkpoint") {
  const Workspace& ws = trained_workspace();
  const fs::path out = sandbox() / "score_out";
  REQUIRE(run_cli("score --config " + ws.config.string() + " --checkpoint " +
                  ws.train_dir.string() + " --out " + out.string()) == 0);
  for (const char* seed : {"seed_0", "seed_1"}) {
    scoring::ScoreMatrix m =
        scoring::read_scores_file((out / seed / "scores.csv").string());
    CHECK(m.channels == 6);
    CHECK(m.length == 480);
    CHECK(m.first_scored == 48);
  }
}

TEST_CASE("eval writes per-seed metrics and their average") {
  const Workspace& ws = trained_workspace();
  const fs::path out = sandbox() / "eval_out";
  REQUIRE(run_cli("eval --config " + ws.config.string() + " --checkpoint " +
                  ws.train_dir.string() + " --out " + out.string()) == 0);
  json m0 = parse_after_header(out / "seed_0" / "metrics.json");
  json m1 = parse_after_header(out / "seed_1" / "metrics.json");
  for (const json& m : {m0, m1}) {
    CHECK(m.contains("precision"));
    CHECK(m.contains("recall"));
    CHECK(m.contains("f1"));
    CHECK(m.contains("threshold"));
    CHECK(m["mode"] == "best_f1");
  }
  json avg = parse_after_header(out / "metrics_avg.json");
  CHECK(avg["checkpoints"] == 2);
  CHECK(close(avg["f1"].get<double>(),
              (m0["f1"].get<double>() + m1["f1"].get<double>()) / 2.0, 1e-12,
              1e-12));
  CHECK(close(avg["precision"].get<double>(),
              (m0["precision"].get<double>() + m1["precision"].get<double>()) / 2.0,
              1e-12, 1e-12));
}

TEST_CASE("eval without labels is a data error") {
  const Workspace& ws = trained_workspace();
  // Point the test path at the unlabeled training series.
  RunConfig cfg = load_config(ws.config.string());
  cfg.data.test_csv = cfg.data.train_csv;
  cfg.data.test_has_labels = false;
  const fs::path cfg_path = sandbox() / "unlabeled_eval.json";
  save_config(cfg_path.string(), cfg);
  CHECK(run_cli("eval --config " + cfg_path.string() + " --checkpoint " +
                ws.train_dir.string() + " --out " +
                (sandbox() / "eval_unlabeled").string()) == 2);
}

TEST_CASE("a fixed threshold above every score finds nothing") {
  const Workspace& ws = trained_workspace();
  const fs::path out = sandbox() / "eval_fixed";
  REQUIRE(run_cli("eval --config " + ws.config.string() + " --checkpoint " +
                  ws.train_dir.string() + "/seed_0/checkpoint.bin" +
                  " --mode fixed --threshold 1e12 --out " + out.string()) == 0);
  json m = parse_after_header(out / "seed_0" / "metrics.json");
  CHECK(m["recall"] == 0.0);
  CHECK(m["f1"] == 0.0);
  CHECK(m["mode"] == "fixed");
  CHECK(m["threshold"] == 1e12);
}

TEST_CASE("export-graphs writes one edge list per head plus the affinity") {
  const Workspace& ws = trained_workspace();
  const fs::path out = sandbox() / "graphs_out";
  REQUIRE(run_cli("export-graphs --config " + ws.config.string() +
                  " --checkpoint " + ws.train_dir.string() +
                  " --select anomalous --out " + out.string()) == 0);
  REQUIRE(run_cli("export-graphs --config " + ws.config.string() +
                  " --checkpoint " + ws.train_dir.string() +
                  " --select normal --out " + out.string()) == 0);
  for (const char* tag : {"anomalous", "normal"}) {
    for (int head = 0; head < 2; ++head) {
      const fs::path f = out / "graphs" /
                         (std::string(tag) + "_head" + std::to_string(head) +
                          "_edges.csv");
      const std::string text = read_file(f);
      CHECK(text.rfind("# graph-edges-v1\n", 0) == 0);
      // 6 channels -> 30 ordered off-diagonal pairs + 2 header lines
      CHECK(std::count(text.begin(), text.end(), '\n') == 32);
    }
    const std::string aff =
        read_file(out / "graphs" / (std::string(tag) + "_affinity.csv"));
    CHECK(aff.rfind("# affinity-v1\n", 0) == 0);
    // T = history/window = 5 rows, plus the header
    CHECK(std::count(aff.begin(), aff.end(), '\n') == 6);
    CHECK(fs::is_regular_file(out / "graphs" /
                              (std::string(tag) + "_channel_scores.csv")));
  }
}

TEST_CASE("graph export accepts a window origin and rejects bad selectors") {
  const Workspace& ws = trained_workspace();
  const fs::path out = sandbox() / "graphs_origin";
  REQUIRE(run_cli("export-graphs --config " + ws.config.string() +
                  " --checkpoint " + ws.train_dir.string() +
                  " --select 100 --out " + out.string()) == 0);
  CHECK(fs::is_regular_file(out / "graphs" / "t100_head0_edges.csv"));
  CHECK(run_cli("export-graphs --config " + ws.config.string() +
                " --checkpoint " + ws.train_dir.string() +
                " --select 3 --out " + out.string()) == 2);   // below h
  CHECK(run_cli("export-graphs --config " + ws.config.string() +
                " --checkpoint " + ws.train_dir.string() +
                " --select banana --out " + out.string()) == 1);
}

TEST_CASE("noise injection at ratio zero reproduces the input numerically") {
  const Workspace& ws = trained_workspace();
  const fs::path out = sandbox() / "noise0";
  REQUIRE(run_cli("inject-noise --config " + ws.config.string() +
                  " --ratio 0 --out " + out.string()) == 0);
  RunConfig cfg = load_config(ws.config.string());
  data::TimeSeriesDataset a = data::load_csv(cfg.data.train_csv, false);
  data::TimeSeriesDataset b =
      data::load_csv((out / "train_noisy.csv").string(), false);
  CHECK(a.values == b.values);
  CHECK(a.channel_names == b.channel_names);
}

TEST_CASE("noise injection is reproducible for a fixed seed") {
  const Workspace& ws = trained_workspace();
  const fs::path o1 = sandbox() / "noise_a", o2 = sandbox() / "noise_b";
  REQUIRE(run_cli("inject-noise --config " + ws.config.string() +
                  " --ratio 0.5 --seed 7 --out " + o1.string()) == 0);
  REQUIRE(run_cli("inject-noise --config " + ws.config.string() +
                  " --ratio 0.5 --seed 7 --out " + o2.string()) == 0);
  CHECK(read_file(o1 / "train_noisy.csv") == read_file(o2 / "train_noisy.csv"));
  // and it actually perturbs the data
  RunConfig cfg = load_config(ws.config.string());
  data::TimeSeriesDataset a = data::load_csv(cfg.data.train_csv, false);
  data::TimeSeriesDataset n =
      data::load_csv((o1 / "train_noisy.csv").string(), false);
  CHECK(a.values != n.values);
}
