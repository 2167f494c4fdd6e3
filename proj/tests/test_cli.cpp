#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "tokenprune/report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
  int exit_code;
  std::string output;
};

RunResult run_cli(const std::string& args) {
  const fs::path out = fs::temp_directory_path() / "tokenprune_cli_out.txt";
  const std::string cmd =
      std::string(TOKENPRUNE_CLI_PATH) + " " + args + " > " + out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(out);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  fs::remove(out);
  return RunResult{WEXITSTATUS(status), text};
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("tokenprune_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_micro_config(const fs::path& dir) {
  json j;
  j["seed"] = 5;
  j["threads"] = 2;
  j["oracle"] = {{"n_visual", 10}, {"n_prompt", 2}, {"n_caption", 2}, {"n_layers", 5},
                 {"bias_strength", 0.8}, {"noise", 0.1}};
  j["n_scenes"] = 6;
  j["n_eval_scenes"] = 3;
  j["estimator"] = {{"d_in_visual", 8}, {"d_in_text", 6},  {"d_model", 16}, {"d_lowrank", 4},
                    {"n_layers", 1},    {"epochs", 2},     {"batch_size", 3}};
  j["pruning"] = {{"start_layer", 2}};
  j["output_dir"] = (dir / "out").string();
  const fs::path path = dir / "config.json";
  std::ofstream(path) << j.dump(2);
  return path;
}

std::set<std::string> list_files(const fs::path& dir) {
  std::set<std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    out.insert(fs::relative(entry.path(), dir).string());
  }
  return out;
}

}  // namespace

TEST_CASE("missing config exits 2 with no outputs") {
  const fs::path dir = scratch_dir("missing");
  const RunResult r = run_cli("gradcheck --config " + (dir / "nope.json").string());
  CHECK(r.exit_code == 2);
  CHECK(list_files(dir).empty());
}

TEST_CASE("unparseable config exits 2") {
  const fs::path dir = scratch_dir("badjson");
  std::ofstream(dir / "config.json") << "{ not json";
  const RunResult r = run_cli("gradcheck --config " + (dir / "config.json").string());
  CHECK(r.exit_code == 2);
}

TEST_CASE("unknown config key and unknown override key exit 3") {
  const fs::path dir = scratch_dir("badkey");
  const fs::path cfg = write_micro_config(dir);

  json j = json::parse(std::ifstream(cfg));
  j["estimatr"] = json::object();
  std::ofstream(dir / "typo.json") << j.dump();
  const RunResult r1 = run_cli("gradcheck --config " + (dir / "typo.json").string());
  CHECK(r1.exit_code == 3);
  CHECK(r1.output.find("estimatr") != std::string::npos);

  const RunResult r2 = run_cli("gradcheck --config " + cfg.string() + " --set nope.key=3");
  CHECK(r2.exit_code == 3);

  const RunResult r3 = run_cli("frobnicate --config " + cfg.string());
  CHECK(r3.exit_code == 3);
}

TEST_CASE("invalid config values exit 3") {
  const fs::path dir = scratch_dir("badval");
  const fs::path cfg = write_micro_config(dir);
  const RunResult r =
      run_cli("gradcheck --config " + cfg.string() + " --set estimator.d_lowrank=99");
  CHECK(r.exit_code == 3);  // d_lowrank must stay below d_model
}

TEST_CASE("gradcheck prints the max gradient error and exits 0") {
  const fs::path dir = scratch_dir("gradcheck");
  const fs::path cfg = write_micro_config(dir);
  const RunResult r = run_cli("gradcheck --config " + cfg.string());
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("max relative gradient error") != std::string::npos);
}

TEST_CASE("train with zero epochs writes an untrained checkpoint") {
  const fs::path dir = scratch_dir("train0");
  const fs::path cfg = write_micro_config(dir);
  const RunResult r =
      run_cli("train --config " + cfg.string() + " --set estimator.epochs=0 --verbosity 0");
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(dir / "out" / "checkpoint.json"));
  CHECK(fs::exists(dir / "out" / "resolved_config.json"));
  CHECK(fs::exists(dir / "out" / "loss_history.csv"));

  const json resolved = json::parse(std::ifstream(dir / "out" / "resolved_config.json"));
  CHECK(resolved.at("estimator").at("epochs").get<int>() == 0);
}

TEST_CASE("override precedence lands in the resolved config") {
  const fs::path dir = scratch_dir("override");
  const fs::path cfg = write_micro_config(dir);
  const RunResult r = run_cli("gen-traces --config " + cfg.string() +
                              " --set estimator.lambda=0.31 --set n_scenes=2 --verbosity 0");
  CHECK(r.exit_code == 0);
  const json resolved = json::parse(std::ifstream(dir / "out" / "resolved_config.json"));
  CHECK(resolved.at("estimator").at("lambda").get<double>() == 0.31);
  CHECK(resolved.at("n_scenes").get<int>() == 2);
  CHECK(fs::exists(dir / "out" / "trace_0.json"));
  CHECK(fs::exists(dir / "out" / "trace_1.json"));
  CHECK(!fs::exists(dir / "out" / "trace_2.json"));
}

TEST_CASE("train, evaluate and prune produce reports inside the output dir only") {
  const fs::path dir = scratch_dir("pipeline");
  const fs::path cfg = write_micro_config(dir);
  const std::set<std::string> before_outside = list_files(dir);

  CHECK(run_cli("train --config " + cfg.string() + " --verbosity 0").exit_code == 0);
  CHECK(run_cli("evaluate --config " + cfg.string() + " --verbosity 0").exit_code == 0);
  CHECK(run_cli("prune --config " + cfg.string() + " --verbosity 0").exit_code == 0);
  CHECK(run_cli("prune --config " + cfg.string() +
                " --set pruning.mode=adaptive --verbosity 0").exit_code == 0);
  CHECK(run_cli("debias-sweep --config " + cfg.string() +
                " --set sweep.k_values=[0,2] --verbosity 0").exit_code == 0);

  CHECK(fs::exists(dir / "out" / "evaluate.csv"));
  CHECK(fs::exists(dir / "out" / "prune.csv"));
  CHECK(fs::exists(dir / "out" / "schedule_0.json"));
  CHECK(fs::exists(dir / "out" / "debias.csv"));

  // Reports parse back and carry the pinned schema.
  const tokenprune::Report report = tokenprune::read_report(dir / "out" / "prune.csv");
  CHECK(!report.rows.empty());

  // Nothing outside the output dir changed (config itself aside).
  for (const std::string& f : list_files(dir)) {
    if (f == "config.json") continue;
    CHECK(f.rfind("out", 0) == 0);
  }
  CHECK(before_outside.count("config.json") == 1);
}

TEST_CASE("output dir flag overrides the config path") {
  const fs::path dir = scratch_dir("outflag");
  const fs::path cfg = write_micro_config(dir);
  const fs::path alt = dir / "alt_out";
  const RunResult r = run_cli("gen-traces --config " + cfg.string() + " --output-dir " +
                              alt.string() + " --set n_scenes=1 --verbosity 0");
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(alt / "trace_0.json"));
  CHECK(!fs::exists(dir / "out" / "trace_0.json"));
}
