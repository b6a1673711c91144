#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "extrap/harness.hpp"

using namespace extrap;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny(ShiftMode mode = ShiftMode::Dense, Method method = Method::SourceOnly) {
  auto cfg = ExperimentConfig::table1(mode, method);
  cfg.n_runs = 2;
  cfg.n_source = 256;
  cfg.epochs = 1;
  cfg.distances = {12};
  cfg.block_id_pairs = 16;
  return cfg;
}

std::string csv_of(const MatrixResult& m) {
  std::ostringstream os;
  write_results_csv(os, m.rows);
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

#ifdef EXTRAP_CLI
struct Cli {
  int code = 0;
  std::string out;
};

Cli run_cli(const std::string& args) {
  const std::string cmd = std::string(EXTRAP_CLI) + " " + args + " 2>&1";
  Cli r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("extrap_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}
#endif

}  // namespace

TEST_CASE("config defaults, presets and round trip") {
  ExperimentConfig def;
  CHECK(def.n_runs == 50);
  CHECK(def.n_source == 10000);
  CHECK(def.distances == std::vector<double>{12, 18, 24, 30});
  CHECK(ExperimentConfig::table1(ShiftMode::Sparse, Method::Ours).distances == std::vector<double>{18, 24, 30, 36});
  auto reg = ExperimentConfig::regression(ShiftMode::Dense, Method::Ours);
  CHECK(reg.distances == std::vector<double>{18, 24, 30});
  CHECK(reg.weights == LossWeights::regression());

  for (auto cfg : {def, reg, tiny(ShiftMode::Sparse, Method::Ours)}) {
    cfg.kl_grid = {0.1, 0.01, 0.001};
    cfg.seed = 123456789012345ULL;
    cfg.weights.anti_nat = 0.25;
    auto back = ExperimentConfig::from_json(cfg.to_json());
    CHECK(back == cfg);
    CHECK(ExperimentConfig::from_json(nlohmann::json::parse(cfg.to_json().dump())) == cfg);
  }
}

TEST_CASE("config validation") {
  auto bad = [](auto mutate) {
    ExperimentConfig c;
    mutate(c);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  bad([](ExperimentConfig& c) { c.distances.clear(); });
  bad([](ExperimentConfig& c) { c.distances = {1.0}; });
  bad([](ExperimentConfig& c) { c.n_runs = 0; });
  bad([](ExperimentConfig& c) { c.parallelism = 0; });
  bad([](ExperimentConfig& c) { c.weights.kl = -1; });
  bad([](ExperimentConfig& c) {
    c.task = Task::Regression;
    c.adapt_steps = 2;
  });
  ExperimentConfig ok;
  ok.distances = {0, 12};
  CHECK_NOTHROW(ok.validate());

  CHECK_THROWS_AS(ExperimentConfig::from_json({{"no_such_key", 1}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"mode", "diagonal"}}), ConfigError);
  ExperimentConfig merged;
  merged.merge_json({{"n_runs", 3}, {"mode", "sparse"}});
  CHECK(merged.n_runs == 3);
  CHECK(merged.mode == ShiftMode::Sparse);
  // Switching task without weights picks the task's defaults.
  merged.merge_json({{"task", "regression"}});
  CHECK(merged.weights == LossWeights::regression());
}

TEST_CASE("run matrix is deterministic and independent of parallelism") {
  auto cfg = tiny();
  cfg.n_runs = 1;
  auto a = run_matrix(cfg);
  auto b = run_matrix(cfg);
  CHECK(csv_of(a) == csv_of(b));

  cfg = tiny(ShiftMode::Dense, Method::Ours);
  cfg.n_runs = 3;
  cfg.distances = {12, 24};
  cfg.parallelism = 1;
  auto serial = run_matrix(cfg);
  cfg.parallelism = 8;
  auto parallel = run_matrix(cfg);
  CHECK(csv_of(serial) == csv_of(parallel));
  CHECK(serial.rows.size() == 6);
  CHECK(serial.cells.size() == 2);
  CHECK(serial.rows[0].distance == 12);
  CHECK(serial.rows[5].distance == 24);
}

TEST_CASE("failed runs stay in the matrix") {
  auto cfg = tiny();
  cfg.lr = 1e9;
  cfg.epochs = 2;
  cfg.distances = {12, 18};
  auto m = run_matrix(cfg);
  CHECK(m.rows.size() == cfg.n_runs * cfg.distances.size());
  std::size_t failed = 0;
  for (const auto& r : m.rows) {
    if (!r.failed) continue;
    ++failed;
    CHECK_FALSE(r.error.empty());
  }
  CHECK(failed > 0);
  std::size_t summarized = 0;
  for (const auto& c : m.cells) summarized += c.failed;
  CHECK(summarized == failed);
  const auto csv = csv_of(m);
  CHECK(csv.find("nan") != std::string::npos);
}

TEST_CASE("results csv round trip and summary") {
  auto cfg = tiny();
  cfg.n_runs = 2;
  auto m = run_matrix(cfg);
  const auto csv = csv_of(m);
  CHECK(csv.rfind("mode,task,distance,seed,method,correct,sq_error,block_id,degenerate\n", 0) == 0);
  std::istringstream in(csv);
  auto rows = read_results_csv(in);
  REQUIRE(rows.size() == m.rows.size());
  std::ostringstream again;
  write_results_csv(again, rows);
  CHECK(again.str() == csv);

  auto cells = summarize(rows, cfg.distances);
  REQUIRE(cells.size() == 1);
  CHECK(cells[0].n_runs == 2);
  CHECK(cells[0].mean == doctest::Approx(target_accuracy(rows)));

  std::ostringstream md;
  write_summary_markdown(md, cfg, cells);
  CHECK(md.str().find("| distance |") != std::string::npos);

  std::istringstream broken("mode,task,distance,seed,method,correct,sq_error,block_id,degenerate\ndense,x\n");
  CHECK_THROWS(read_results_csv(broken));
}

TEST_CASE("plot emission") {
  CHECK_THROWS_AS(emit_plot(std::vector<GridCell>{}), MetricsError);
  auto one = emit_plot(std::vector<GridCell>{{2, 18.0, 0.3, 50}});
  CHECK(one.rfind("<svg", 0) == 0);
  std::size_t circles = 0;
  for (std::size_t p = one.find("<circle"); p != std::string::npos; p = one.find("<circle", p + 1)) ++circles;
  CHECK(circles == 1);

  std::vector<GridCell> grid = {{2, 18, 0.1, 50}, {2, 36, 0.12, 50}, {6, 18, 0.2, 50}, {6, 36, 0.45, 50}};
  auto a = emit_plot(grid), b = emit_plot(grid);
  CHECK(a == b);
  std::size_t lines = 0;
  for (std::size_t p = a.find("<polyline"); p != std::string::npos; p = a.find("<polyline", p + 1)) ++lines;
  CHECK(lines == 2);
  CHECK(a.find("severity") != std::string::npos);
  CHECK(a.find("error") != std::string::npos);

  std::istringstream bad("scope,severity,mean_error,n_runs\n2,18,0.1,50\n2,18\n");
  try {
    emit_plot_csv(bad);
    FAIL("expected failure");
  } catch (const MetricsError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("assumption report") {
  auto cfg = tiny(ShiftMode::Sparse);
  auto j = assumption_report(cfg, 30);
  CHECK(j.contains("index_sets"));
  CHECK(j["index_sets"]["I_s"] == nlohmann::json::array({4, 5}));
  CHECK(j.contains("mechanistic_dependence"));
  CHECK(j["mechanistic_dependence"]["partitions"].size() == 7);
  CHECK(j.contains("dense_bound"));
  CHECK(assumption_report(cfg, 30).dump() == j.dump());
  std::vector<std::string> names;
  for (const auto& a : j["assumptions"]) {
    CHECK(a.contains("satisfied"));
    CHECK(a.contains("evidence"));
    names.push_back(a["name"]);
  }
  CHECK(names == std::vector<std::string>{"invertibility", "well_conditioned", "sparse_influence",
                                          "mechanistic_dependence", "dense_bound"});
  CHECK(j["assumptions"][0]["satisfied"] == true);
  CHECK(j["assumptions"][2]["satisfied"] == true);
}

TEST_CASE("sweep is deterministic") {
  auto cfg = tiny(ShiftMode::Dense, Method::SourceOnly);
  cfg.n_runs = 2;
  cfg.scopes = {2, 6};
  cfg.severities = {0, 12};
  auto a = run_sweep(cfg);
  cfg.parallelism = 4;
  auto b = run_sweep(cfg);
  CHECK(a == b);
  REQUIRE(a.size() == 4);
  CHECK(a[0].scope == 2);
  CHECK(a[1].severity == 12);
  for (const auto& c : a) CHECK(c.n_runs == 2);
}

#ifdef EXTRAP_CLI
TEST_CASE("cli: usage and validation exit codes") {
  auto none = run_cli("");
  CHECK(none.code == 1);
  CHECK(none.out.find("Usage") != std::string::npos);
  CHECK(run_cli("evaluate --no-such-flag").code == 1);
  CHECK(run_cli("reproduce-table1 --mode diagonal").code == 1);
  CHECK(run_cli("bogus-subcommand").code == 1);
  auto help = run_cli("--help");
  CHECK(help.code == 0);
  for (const char* sub : {"generate", "train", "adapt", "evaluate", "sweep", "check-assumptions", "reproduce-table1",
                          "reproduce-regression"})
    CHECK(help.out.find(sub) != std::string::npos);
}

TEST_CASE("cli: subcommands are byte-deterministic") {
  auto dir = scratch_dir("cli");
  const std::string d = dir.string();
  const std::string small = " --runs 1 --n-source 256 --epochs 1";

  for (int pass = 0; pass < 2; ++pass) {
    const std::string p = d + "/p" + std::to_string(pass);
    fs::create_directories(p);
    CHECK(run_cli("generate --mode sparse --n-source 64 --out " + p + "/src.csv --target-out " + p + "/tgt.json").code == 0);
    CHECK(run_cli("train --mode dense" + small + " --distance 12 --checkpoint " + p + "/model.json --trace " + p +
                  "/trace.csv")
              .code == 0);
    CHECK(run_cli("adapt --mode dense" + small + " --checkpoint " + p + "/model.json --steps 2 --out " + p +
                  "/adapt.json")
              .code == 0);
    CHECK(run_cli("evaluate --mode dense" + small + " --checkpoint " + p + "/model.json --pairs 50 --out " + p +
                  "/eval.json")
              .code == 0);
    CHECK(run_cli("check-assumptions --mode sparse --out " + p + "/assume.json").code == 0);
    CHECK(run_cli("sweep" + small + " --scopes 2,6 --severities 0,12 --grid-out " + p + "/grid.csv --plot-out " + p +
                  "/grid.svg")
              .code == 0);
    CHECK(run_cli("reproduce-table1 --mode dense" + small + " --distances 12 --out-dir " + p).code == 0);
  }
  for (const char* f : {"src.csv", "tgt.json", "model.json", "trace.csv", "adapt.json", "eval.json", "assume.json",
                        "grid.csv", "grid.svg", "table1_dense.csv", "table1_dense.md"}) {
    CAPTURE(f);
    const auto a = slurp(dir / "p0" / f), b = slurp(dir / "p1" / f);
    CHECK_FALSE(a.empty());
    CHECK(a == b);
  }
  auto assume = nlohmann::json::parse(slurp(dir / "p0" / "assume.json"));
  CHECK(assume.dump().find("mechanistic_dependence") != std::string::npos);

  // Re-plotting from the grid csv matches the sweep's own plot.
  CHECK(run_cli("sweep --grid-in " + d + "/p0/grid.csv --plot-out " + d + "/replot.svg").code == 0);
  CHECK(slurp(dir / "replot.svg") == slurp(dir / "p0" / "grid.svg"));

  std::ofstream(dir / "bad.csv") << "scope,severity,mean_error,n_runs\n2,x,0.1,5\n";
  auto bad = run_cli("sweep --grid-in " + d + "/bad.csv --plot-out " + d + "/bad.svg");
  CHECK(bad.code == 1);
  CHECK(bad.out.find("line 2") != std::string::npos);
  fs::remove_all(dir);
}
#endif
