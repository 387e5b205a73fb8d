#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "dualmind/cli.hpp"
#include "dualmind/image.hpp"
#include "json.hpp"

namespace {

namespace fs = std::filesystem;

struct cli_result {
  int code = -1;
  std::string out, err;
};

cli_result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  cli_result r;
  r.code = dm::run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string fresh_dir(const std::string& tag) {
  const std::string dir = "cli_work/" + tag;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(bool(f));
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

nlohmann::json manifest_of(const std::string& dir) {
  return nlohmann::json::parse(slurp(dir + "/manifest.json"));
}

// Training logs keep a wall-clock column; comparisons for reproducibility
// strip it so only the numeric trajectory is compared.
std::string drop_seconds_column(const std::string& csv) {
  std::istringstream in(csv);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) {
    const auto cut = line.rfind(',');
    out << line.substr(0, cut) << "\n";
  }
  return out.str();
}

// Resolved snapshots embed the output directory; drop it when comparing runs
// that differ only by destination.
std::string drop_out_line(const std::string& snapshot) {
  std::istringstream in(snapshot);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line))
    if (line.rfind("out=", 0) != 0) out << line << "\n";
  return out.str();
}

// Small architecture used by every training test in this file.
std::vector<std::string> tiny_model_flags() {
  return {"--model.embed_dim", "16",     "--model.layers",  "2",  "--model.heads",
          "2",                 "--model.context_length",    "3",  "--model.state_tokens",
          "2",                 "--model.action_tokens",     "2",  "--model.xattn_layers",
          "1",                 "--model.tl_hidden",         "8",  "--model.mlp_ratio",
          "2"};
}

void append(std::vector<std::string>& args, const std::vector<std::string>& extra) {
  args.insert(args.end(), extra.begin(), extra.end());
}

// One shared shard per domain mix, collected lazily and reused across cases.
const std::string& train_shard() {
  static const std::string base = [] {
    const std::string dir = fresh_dir("shard_train");
    auto r = cli({"collect", "--run.out", dir, "--env", "both", "--episodes", "8",
                  "--run.seed", "11"});
    REQUIRE(r.code == 0);
    return dir + "/shard";
  }();
  return base;
}

const std::string& heldout_shard() {
  static const std::string base = [] {
    const std::string dir = fresh_dir("shard_heldout");
    auto r = cli({"collect", "--run.out", dir, "--env", "gridnav", "--episodes", "6",
                  "--split", "heldout", "--families", "7", "--run.seed", "21"});
    REQUIRE(r.code == 0);
    return dir + "/shard";
  }();
  return base;
}

// A short phase-1 run whose checkpoint seeds the finetuning tests.
const std::string& phase1_ckpt() {
  static const std::string path = [] {
    const std::string dir = fresh_dir("phase1");
    std::vector<std::string> args{"train",  "--run.out", dir,     "--mode",
                                  "dualmind", "--phase", "1",     "--data",
                                  train_shard(), "--steps", "3",  "--log_every",
                                  "1",      "--snapshot_every",   "100",
                                  "--train.batch", "4",           "--run.seed", "1"};
    append(args, tiny_model_flags());
    auto r = cli(args);
    REQUIRE(r.code == 0);
    return dir + "/model.ckpt";
  }();
  return path;
}

}  // namespace

TEST_CASE("help prints usage and unknown commands fail") {
  auto ok = cli({"help"});
  CHECK(ok.code == 0);
  CHECK(ok.out.find("usage: dualmind") != std::string::npos);
  CHECK(ok.out.find("collect") != std::string::npos);

  auto bad = cli({"frobnicate"});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("unknown command 'frobnicate'") != std::string::npos);

  auto none = cli({});
  CHECK(none.code == 1);
  CHECK(none.err.find("usage") != std::string::npos);
}

TEST_CASE("unknown flags are rejected with the known key list") {
  auto r = cli({"gradcheck", "--bogus.key", "1"});
  CHECK(r.code == 1);
  CHECK(r.err.find("unknown key") != std::string::npos);
  CHECK(r.err.find("gradcheck.tol") != std::string::npos);

  auto pos = cli({"gradcheck", "stray"});
  CHECK(pos.code == 1);
  CHECK(pos.err.find("unexpected argument 'stray'") != std::string::npos);
}

TEST_CASE("config file values load and flags override them") {
  const std::string dir = fresh_dir("cfgfile");
  {
    std::ofstream f(dir + "/run.cfg");
    f << "# shared settings\n[collect]\nepisodes = 5\nenv = gridnav\n[run]\nseed = 33\n";
  }
  std::vector<std::string> args{"collect", "--config", dir + "/run.cfg", "--run.out",
                                dir + "/a", "--episodes", "4"};
  auto r = cli(args);
  REQUIRE(r.code == 0);
  auto m = manifest_of(dir + "/a");
  CHECK(m["episodes"]["gridnav"].get<int>() == 4);  // flag beat the file
  const std::string snap = slurp(dir + "/a/config.txt");
  CHECK(snap.find("episodes=4") != std::string::npos);
  CHECK(snap.find("seed=33") != std::string::npos);
}

TEST_CASE("collect writes shards whose hashes reproduce bit-for-bit") {
  const std::string a = fresh_dir("col_a"), b = fresh_dir("col_b");
  auto ra = cli({"collect", "--run.out", a, "--env", "both", "--episodes", "5",
                 "--run.seed", "9"});
  auto rb = cli({"collect", "--run.out", b, "--env", "both", "--episodes", "5",
                 "--run.seed", "9"});
  REQUIRE(ra.code == 0);
  REQUIRE(rb.code == 0);
  auto ma = manifest_of(a), mb = manifest_of(b);
  CHECK(ma["content_hash"] == mb["content_hash"]);
  CHECK(ma["episodes"]["gridnav"].get<int>() == 5);
  CHECK(ma["episodes"]["reachbin"].get<int>() == 5);
  CHECK(slurp(a + "/shard.bin") == slurp(b + "/shard.bin"));

  auto rc = cli({"collect", "--run.out", a, "--env", "both", "--episodes", "5",
                 "--run.seed", "10"});
  REQUIRE(rc.code == 0);
  CHECK(manifest_of(a)["content_hash"] != ma["content_hash"]);  // seed moves the data

  auto bad = cli({"collect", "--run.out", b, "--env", "atari"});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("collect.env") != std::string::npos);
}

TEST_CASE("heldout collection keeps only held-out families") {
  const auto& base = heldout_shard();
  auto j = nlohmann::json::parse(slurp(base + ".json"));
  for (const auto& e : j["episodes"]) {
    CHECK(e["split"].get<std::string>() == "heldout-ood");
    CHECK(e["task_id"].get<std::string>().find("gridnav/f7/") == 0);
  }
}

TEST_CASE("train runs every mode and reports its objective") {
  struct row {
    const char* mode;
    const char* phase;
    const char* objective;
  };
  const row rows[] = {{"smart-only", "1", "self_supervised"},
                      {"il-only", "1", "imitation"},
                      {"jointly", "1", "joint"},
                      {"gato-ct", "1", "imitation"}};
  for (const auto& t : rows) {
    const std::string dir = fresh_dir(std::string("mode_") + t.mode);
    std::vector<std::string> args{"train",      "--run.out", dir,  "--mode", t.mode,
                                  "--phase",    t.phase,     "--data", train_shard(),
                                  "--steps",    "2",         "--log_every", "1",
                                  "--snapshot_every", "100", "--train.batch", "4",
                                  "--run.seed", "2"};
    append(args, tiny_model_flags());
    auto r = cli(args);
    REQUIRE_MESSAGE(r.code == 0, t.mode, " failed: ", r.err);
    auto m = manifest_of(dir);
    CHECK(m["objective"].get<std::string>() == t.objective);
    CHECK(m["steps_done"].get<int>() == 2);
    CHECK(m["aborted"].get<bool>() == false);
    const std::string log = slurp(dir + "/train_log.csv");
    CHECK(log.find("step,loss_total,L1,L2,L3,L_P2,lr,seconds") == 0);
    CHECK(fs::exists(dir + "/model.ckpt"));
    CHECK(fs::exists(dir + "/model.ckpt.meta.json"));
  }
}

TEST_CASE("phase 2 finetunes a phase-1 checkpoint under the freeze partition") {
  const std::string dir = fresh_dir("phase2");
  std::vector<std::string> args{"train", "--run.out", dir,          "--mode", "dualmind",
                                "--phase", "2",       "--init",     phase1_ckpt(),
                                "--data", train_shard(), "--steps", "2",
                                "--log_every", "1",   "--snapshot_every", "100",
                                "--train.batch", "4", "--run.seed", "3"};
  auto r = cli(args);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  auto m = manifest_of(dir);
  CHECK(m["objective"].get<std::string>() == "imitation");
  CHECK(m["phase"].get<int>() == 2);
  CHECK(m["freeze"].get<int>() == 3);

  // Mode 1 (cross-attention only) trains strictly fewer tensors than mode 3.
  const std::string dir1 = fresh_dir("phase2_xonly");
  std::vector<std::string> args1{"train", "--run.out", dir1,         "--mode", "dualmind",
                                 "--phase", "2",       "--init",     phase1_ckpt(),
                                 "--data", train_shard(), "--steps", "2",
                                 "--log_every", "1",   "--snapshot_every", "100",
                                 "--train.batch", "4", "--run.seed", "3",
                                 "--freeze", "1"};
  auto r1 = cli(args1);
  REQUIRE_MESSAGE(r1.code == 0, r1.err);
  CHECK(manifest_of(dir1)["trainable_parameters"].get<int>() <
        m["trainable_parameters"].get<int>());

  auto missing = cli({"train", "--mode", "dualmind", "--phase", "2", "--data", train_shard(),
                      "--run.out", fresh_dir("phase2_bad")});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("train.init") != std::string::npos);
}

TEST_CASE("train rejects bad modes and missing data") {
  auto bad_mode = cli({"train", "--mode", "zen", "--data", train_shard(), "--run.out",
                       fresh_dir("badmode")});
  CHECK(bad_mode.code == 1);
  CHECK(bad_mode.err.find("unknown train.mode") != std::string::npos);

  auto no_data = cli({"train", "--run.out", fresh_dir("nodata")});
  CHECK(no_data.code == 1);
  CHECK(no_data.err.find("train.data") != std::string::npos);
}

TEST_CASE("training reruns reproduce the log and checkpoint exactly") {
  const std::string a = fresh_dir("det_a"), b = fresh_dir("det_b");
  for (const auto& dir : {a, b}) {
    std::vector<std::string> args{"train",       "--run.out", dir,   "--mode",
                                  "il-only",     "--data",    train_shard(),
                                  "--steps",     "3",         "--log_every", "1",
                                  "--snapshot_every", "100",  "--train.batch", "4",
                                  "--run.seed",  "14"};
    append(args, tiny_model_flags());
    REQUIRE(cli(args).code == 0);
  }
  CHECK(drop_seconds_column(slurp(a + "/train_log.csv")) ==
        drop_seconds_column(slurp(b + "/train_log.csv")));
  CHECK(manifest_of(a)["checkpoint_hash"] == manifest_of(b)["checkpoint_hash"]);
  CHECK(slurp(a + "/model.ckpt") == slurp(b + "/model.ckpt"));
  CHECK(drop_out_line(slurp(a + "/config.txt")) == drop_out_line(slurp(b + "/config.txt")));
}

TEST_CASE("eval pipes the scripted expert through to a perfect report") {
  const std::string dir = fresh_dir("eval_expert");
  auto r = cli({"eval", "--run.out", dir, "--policy", "expert", "--env", "gridnav",
                "--episodes", "9", "--families", "0,1,2", "--band", "medium",
                "--run.seed", "5"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  auto report = nlohmann::json::parse(slurp(dir + "/report.json"));
  CHECK(report["aggregates"]["success_rate"].get<double>() == 1.0);
  CHECK(report["aggregates"]["spl"].get<double>() == 1.0);
  CHECK(report["episodes"].size() == 9);
  const std::string csv = slurp(dir + "/thresholds.csv");
  CHECK(csv.find("threshold,count") == 0);
  CHECK(csv.find("\n1,3\n") != std::string::npos);  // 3 families, all at SR 1.0
  auto m = manifest_of(dir);
  CHECK(m["success_rate"].get<double>() == 1.0);
}

TEST_CASE("eval with the model policy loads a checkpoint and reproduces itself") {
  const std::string a = fresh_dir("eval_model_a"), b = fresh_dir("eval_model_b");
  for (const auto& dir : {a, b}) {
    auto r = cli({"eval", "--run.out", dir, "--policy", "model", "--ckpt", phase1_ckpt(),
                  "--env", "reachbin", "--episodes", "4", "--eval.threads", "2",
                  "--prompting", "xattn", "--run.seed", "6"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
  }
  CHECK(slurp(a + "/report.json") == slurp(b + "/report.json"));
  CHECK(manifest_of(a)["report_hash"] == manifest_of(b)["report_hash"]);

  auto no_ckpt = cli({"eval", "--policy", "model", "--run.out", fresh_dir("eval_bad")});
  CHECK(no_ckpt.code == 1);
  CHECK(no_ckpt.err.find("eval.ckpt") != std::string::npos);
}

TEST_CASE("expert-referenced eval reports a percentage score") {
  const std::string dir = fresh_dir("eval_ref");
  auto r = cli({"eval", "--run.out", dir, "--policy", "expert", "--env", "gridnav",
                "--episodes", "6", "--families", "0", "--band", "easy",
                "--expert_reference", "true", "--eval.window", "3", "--run.seed", "8"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  auto report = nlohmann::json::parse(slurp(dir + "/report.json"));
  // The expert measured against its own reference sits at 100%.
  CHECK(report["aggregates"]["percentage_expert_score"].get<double>() ==
        doctest::Approx(100.0));
}

TEST_CASE("export-attn writes one convex attention grid per decided step") {
  const std::string dir = fresh_dir("attn");
  auto r = cli({"export-attn", "--run.out", dir, "--ckpt", phase1_ckpt(), "--env",
                "gridnav", "--families", "0", "--band", "easy", "--episodes", "1",
                "--prompting", "xattn", "--run.seed", "7"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const std::string csv = slurp(dir + "/attn/attention.csv");
  std::istringstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header.find("episode,step,w0") == 0);
  int rows = 0, pgms = 0;
  std::string line;
  while (std::getline(in, line)) {
    double sum = 0.0;
    std::istringstream cells(line);
    std::string cell;
    int col = 0;
    while (std::getline(cells, cell, ',')) {
      if (col >= 2) sum += std::stod(cell);
      ++col;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    ++rows;
  }
  for (const auto& entry : fs::directory_iterator(dir + "/attn"))
    if (entry.path().extension() == ".pgm") ++pgms;
  CHECK(rows >= 1);
  CHECK(pgms == rows);
}

TEST_CASE("fewshot emits one table row per family-shots-init cell") {
  const std::string dir = fresh_dir("fewshot");
  std::vector<std::string> args{"fewshot",     "--run.out", dir,
                                "--fewshot.data", heldout_shard(),
                                "--families",  "7",         "--shots", "2",
                                "--inits",     "scratch,pretrained=" + phase1_ckpt(),
                                "--fewshot.steps", "2",     "--fewshot.batch", "2",
                                "--eval_tasks", "2",        "--fewshot.window", "2",
                                "--fewshot.log_every", "1", "--run.seed", "4"};
  append(args, tiny_model_flags());
  auto r = cli(args);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const std::string csv = slurp(dir + "/fewshot.csv");
  CHECK(csv.find("family,shots,init,final_loss,success_rate,spl,mean_return") == 0);
  CHECK(csv.find("\n7,2,scratch,") != std::string::npos);
  CHECK(csv.find("\n7,2,pretrained,") != std::string::npos);
  auto m = manifest_of(dir);
  CHECK(m["rows"].size() == 2);
  for (const auto& row : m["rows"]) CHECK(std::isfinite(row["final_loss"].get<double>()));
}

TEST_CASE("gradcheck passes and records its report") {
  const std::string dir = fresh_dir("gradcheck");
  auto r = cli({"gradcheck", "--run.out", dir, "--run.seed", "3"});
  CHECK(r.code == 0);
  CHECK(r.out.find("gradcheck PASS") != std::string::npos);
  const std::string report = slurp(dir + "/gradcheck.txt");
  CHECK(report.find("FAIL") == std::string::npos);
  CHECK(report.find("cross_entropy") != std::string::npos);
  CHECK(manifest_of(dir)["passed"].get<bool>() == true);
}
