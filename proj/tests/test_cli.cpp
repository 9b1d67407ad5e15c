#include <filesystem>
#include <fstream>

#include "cli.hpp"
#include "doctest.h"
#include "iop/config.hpp"
#include "iop/task_env.hpp"

namespace fs = std::filesystem;

namespace {

int run(std::initializer_list<std::string> args) {
  return iop::cli::run(std::vector<std::string>(args));
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path tmpdir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("cli gen-data: happy path, usage error, determinism") {
  fs::path d = tmpdir("iop_cli_gen");
  std::string out = (d / "cs.jsonl").string();
  CHECK(run({"gen-data", "--n", "20", "--seed", "3", "--out", out}) == 0);
  auto data = iop::read_coldstart_jsonl(out);
  CHECK(data.size() == 20);

  CHECK(run({"gen-data", "--n", "0", "--out", out}) == 2);

  std::string out2 = (d / "cs2.jsonl").string();
  CHECK(run({"gen-data", "--n", "20", "--seed", "3", "--out", out2}) == 0);
  CHECK(slurp(out) == slurp(out2));
  fs::remove_all(d);
}

TEST_CASE("cli align-debug") {
  CHECK(run({"align-debug", "--y", "1,2,3", "--repair", "1,5,3"}) == 0);
  CHECK(run({"align-debug", "--y", "1,2", "--repair", "1,2"}) == 0);
  CHECK(run({"align-debug", "--y", "1,2", "--repair", "1,2", "--K", "inf"}) == 0);
  CHECK(run({"align-debug", "--y", "1,x", "--repair", "1"}) == 2);
  CHECK(run({"align-debug", "--y", "1", "--repair", "2", "--K", "0"}) == 2);
}

TEST_CASE("cli rejects unknown subcommands and bad configs") {
  CHECK(run({"frobnicate"}) == 2);
  CHECK(run({}) == 2);

  fs::path d = tmpdir("iop_cli_cfg");
  std::ofstream((d / "bad.json")) << R"({"unknown_key": 1})";
  CHECK(run({"train", "--config", (d / "bad.json").string(), "--out", (d / "r").string()}) == 2);
  CHECK(run({"train", "--config", (d / "missing.json").string()}) == 2);
  CHECK(run({"train", "--skip-sft", "--out", (d / "r2").string()}) == 2);
  fs::remove_all(d);
}

TEST_CASE("cli sft, train, eval round trip") {
  fs::path d = tmpdir("iop_cli_train");
  std::ofstream((d / "c.json")) << R"({
    "seed": 11, "hidden": 16, "chain_min": 2, "chain_max": 3,
    "g_prime": 4, "g_rep": 2, "batch_prompts": 3, "k_trunc": 2,
    "sft_epochs": 1, "coldstart_n": 24, "eval_interval": 2,
    "eval_problems": 8, "eval_samples": 2, "final_eval_samples": 2,
    "max_steps": 3, "token_budget": 100000000, "checkpoint_interval": 2
  })";

  SUBCASE("sft writes a checkpoint") {
    CHECK(run({"sft", "--config", (d / "c.json").string(), "--out", (d / "s").string()}) == 0);
    CHECK(fs::exists(d / "s" / "sft.ckpt"));
  }
  SUBCASE("train then eval") {
    CHECK(run({"train", "--config", (d / "c.json").string(), "--out", (d / "r").string()}) == 0);
    CHECK(fs::exists(d / "r" / "final.ckpt"));
    CHECK(fs::exists(d / "r" / "manifest.json"));
    CHECK(run({"eval", "--ckpt", (d / "r" / "final.ckpt").string(), "--n", "6", "--k", "2",
               "--config", (d / "c.json").string()}) == 0);
    CHECK(run({"eval", "--ckpt", (d / "missing.ckpt").string()}) == 2);
  }
  SUBCASE("train gspo with flag override") {
    CHECK(run({"train", "--config", (d / "c.json").string(), "--out", (d / "g").string(),
               "--method", "gspo"}) == 0);
    std::string manifest = slurp(d / "g" / "manifest.json");
    CHECK(manifest.find("\"method\": \"gspo\"") != std::string::npos);
  }
  fs::remove_all(d);
}

TEST_CASE("cli sweep writes one csv row per cell and refuses dir collisions") {
  fs::path d = tmpdir("iop_cli_sweep");
  std::ofstream((d / "c.json")) << R"({
    "seed": 13, "hidden": 12, "chain_min": 2, "chain_max": 2,
    "g_prime": 3, "g_rep": 2, "batch_prompts": 2, "k_trunc": 1,
    "sft_epochs": 1, "coldstart_n": 12, "eval_interval": 2,
    "eval_problems": 4, "eval_samples": 1, "final_eval_samples": 1,
    "max_steps": 2, "token_budget": 100000000
  })";
  CHECK(run({"sweep", "--param", "g_rep", "--values", "2,3", "--seeds", "1,2", "--config",
             (d / "c.json").string(), "--out", (d / "sw").string()}) == 0);
  std::string csv = slurp(d / "sw" / "sweep.csv");
  CHECK(csv.rfind("param,value,seed,final_acc,repair_success,tokens\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);  // header + 4 cells

  // same output dirs again: refused
  CHECK(run({"sweep", "--param", "g_rep", "--values", "2,3", "--seeds", "1,2", "--config",
             (d / "c.json").string(), "--out", (d / "sw").string()}) == 2);

  CHECK(run({"sweep", "--param", "nope", "--values", "1", "--seeds", "1", "--config",
             (d / "c.json").string(), "--out", (d / "sw2").string()}) == 2);
  fs::remove_all(d);
}
