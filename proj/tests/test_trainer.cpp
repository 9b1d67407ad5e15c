#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "iop/trainer.hpp"
#include "test_helpers.hpp"

using namespace iop;
using namespace test;
namespace fs = std::filesystem;

namespace {

// Small-but-real configuration for fast trainer tests.
TrainConfig mini_config() {
  TrainConfig cfg;
  cfg.seed = 5;
  cfg.hidden = 16;
  cfg.chain_min = 2;
  cfg.chain_max = 4;
  cfg.g_prime = 6;
  cfg.g_rep = 3;
  cfg.batch_prompts = 4;
  cfg.k_trunc = 2;
  cfg.sft_epochs = 2;
  cfg.coldstart_n = 48;
  cfg.eval_interval = 4;
  cfg.eval_problems = 24;
  cfg.eval_samples = 2;
  cfg.final_eval_samples = 4;
  cfg.checkpoint_interval = 4;
  cfg.defer_retry_interval = 3;
  cfg.max_steps = 8;
  cfg.token_budget = 100000000;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("stage1_sft reduces the loss and is reproducible") {
  TrainConfig cfg = mini_config();
  auto data = gather_coldstart(cfg);
  REQUIRE(data.size() == 48);
  std::vector<double> curve;
  Params p1 = stage1_sft(cfg, data, &curve);
  REQUIRE(curve.size() == 2);
  CHECK(curve.back() < curve.front());

  Params p2 = stage1_sft(cfg, data);
  CHECK(p1.w == p2.w);
}

TEST_CASE("collect_rollouts: cardinality, rewards, accounting") {
  TrainConfig cfg = mini_config();
  Params p = tiny_params(81, cfg.hidden);
  std::vector<PromptSpec> specs = {{101, 3}, {102, 2}};
  int64_t tokens = 0;
  auto rollouts = collect_rollouts(p, specs, cfg, 1, &tokens);
  REQUIRE(rollouts.size() == 2);
  int64_t expect_tokens = 0;
  for (const auto& rs : rollouts) {
    CHECK(rs.samples.size() == static_cast<size_t>(cfg.g_prime));
    for (const auto& t : rs.samples) {
      CHECK(t.reward == verify(rs.problem, t.tokens));
      CHECK(t.logprobs.size() == t.tokens.size());
      CHECK(t.tokens.size() <= static_cast<size_t>(cfg.max_len));
      expect_tokens += static_cast<int64_t>(t.tokens.size());
    }
  }
  CHECK(tokens == expect_tokens);

  int64_t tokens2 = 0;
  auto again = collect_rollouts(p, specs, cfg, 1, &tokens2);
  CHECK(again[0].samples[0].tokens == rollouts[0].samples[0].tokens);
  CHECK(tokens2 == tokens);
}

TEST_CASE("partition_and_anchor statuses") {
  TrainConfig cfg = mini_config();
  Params p = tiny_params(82, cfg.hidden);
  RolloutSet rs;
  rs.problem = generate_problem(7, 3);
  Trajectory good = render_solution(rs.problem);
  Trajectory bad = corrupt(rs.problem, good, 2);
  bad.reward = 0;

  SUBCASE("all correct skips") {
    rs.samples = {good, good, good};
    auto part = partition_and_anchor(rs, 0.5, 1);
    CHECK(part.status == GroupPartition::Status::Skip);
  }
  SUBCASE("all failed defers") {
    rs.samples = {bad, bad, bad};
    auto part = partition_and_anchor(rs, 0.5, 1);
    CHECK(part.status == GroupPartition::Status::Defer);
  }
  SUBCASE("mixed picks a correct anchor") {
    rs.samples = {bad, good, bad, good};
    auto part = partition_and_anchor(rs, 0.5, 1);
    REQUIRE(part.status == GroupPartition::Status::Ok);
    CHECK((part.anchor == 1 || part.anchor == 3));
    CHECK(part.errors == std::vector<int>{0, 2});
    CHECK(part.correct == std::vector<int>{1, 3});
  }
}

TEST_CASE("anchor selection is uniform (chi-square over seeded draws)") {
  TrainConfig cfg = mini_config();
  RolloutSet rs;
  rs.problem = generate_problem(7, 3);
  Trajectory good = render_solution(rs.problem);
  Trajectory bad = corrupt(rs.problem, good, 2);
  rs.samples = {bad, good, good, good, good, good};  // 5 correct anchors

  std::vector<int> counts(6, 0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    auto part = partition_and_anchor(rs, 0.5, derive_seed(9, kSeedAnchor, static_cast<uint64_t>(i)));
    counts[static_cast<size_t>(part.anchor)]++;
  }
  CHECK(counts[0] == 0);
  double expected = draws / 5.0;
  double chi2 = 0.0;
  for (int i = 1; i <= 5; ++i)
    chi2 += (counts[static_cast<size_t>(i)] - expected) * (counts[static_cast<size_t>(i)] - expected) / expected;
  // chi-square upper 0.99 quantile with 4 dof
  CHECK(chi2 < 13.2767);
}

TEST_CASE("build_dual_batches invariants") {
  TrainConfig cfg = mini_config();
  auto data = gather_coldstart(cfg);
  Params p = stage1_sft(cfg, data);

  std::vector<PromptSpec> specs;
  for (int i = 0; i < 6; ++i) {
    uint64_t s = derive_seed(cfg.seed, kSeedProblem, 1, static_cast<uint64_t>(i), 7);
    specs.push_back({s, 2 + static_cast<int>(s % 3)});
  }
  int64_t tok = 0;
  auto rollouts = collect_rollouts(p, specs, cfg, 1, &tok);
  std::vector<GroupPartition> parts;
  for (size_t i = 0; i < rollouts.size(); ++i)
    parts.push_back(partition_and_anchor(rollouts[i], cfg.tau_r,
                                         derive_seed(cfg.seed, kSeedAnchor, 1, i)));
  auto db = build_dual_batches(p, rollouts, parts, cfg, 1);

  // every pair satisfies r(y)=0, r_task(repair)=1, and honest under the rule audit
  for (const auto& pair : db.pairs) {
    CHECK(verify(pair.problem, pair.y_tokens) == 0);
    CHECK(verify(pair.problem, pair.rep_tokens) == 1);
  }
  CHECK(db.hacked_admitted == 0);
  CHECK(db.groups.size() >= db.pairs.size());
  CHECK(db.repair_attempts >= static_cast<int>(db.groups.size()));
  for (const auto& g : db.groups) CHECK(g.candidates.size() == static_cast<size_t>(cfg.g_rep));
  CHECK(db.kstar_k + db.kstar_2k + db.kstar_full == static_cast<int>(db.pairs.size()));
}

TEST_CASE("no-truncation toggle opens the full masks") {
  TrainConfig cfg = mini_config();
  cfg.no_truncation = true;
  auto data = gather_coldstart(cfg);
  Params p = stage1_sft(cfg, data);
  std::vector<PromptSpec> specs = {{derive_seed(cfg.seed, kSeedProblem, 1, 0, 7), 3},
                                   {derive_seed(cfg.seed, kSeedProblem, 1, 1, 7), 4}};
  int64_t tok = 0;
  auto rollouts = collect_rollouts(p, specs, cfg, 1, &tok);
  std::vector<GroupPartition> parts;
  for (size_t i = 0; i < rollouts.size(); ++i)
    parts.push_back(partition_and_anchor(rollouts[i], cfg.tau_r, derive_seed(1, kSeedAnchor, 1, i)));
  auto db = build_dual_batches(p, rollouts, parts, cfg, 1);
  CHECK(db.graft_tokens == 0);
  for (const auto& pair : db.pairs) {
    Alignment aln = align(pair.y_tokens, pair.rep_tokens);
    CHECK(pair.gate_err == aln.err_mask);
    CHECK(pair.gate_rep == aln.rep_mask);
    CHECK(pair.k_star == aln.distance);
  }
}

TEST_CASE("evaluate: oracle policy scores 1.0, determinism holds") {
  TrainConfig cfg = mini_config();

  SUBCASE("deterministic") {
    Params p = tiny_params(83, cfg.hidden);
    double a = evaluate(p, 10, 2, cfg, 7);
    double b = evaluate(p, 10, 2, cfg, 7);
    CHECK(a == b);
  }
  SUBCASE("per-problem accuracies average to the mean") {
    Params p = tiny_params(84, cfg.hidden);
    auto per = evaluate_per_problem(p, 10, 2, cfg, 7);
    double mean = 0.0;
    for (double v : per) mean += v;
    CHECK(evaluate(p, 10, 2, cfg, 7) == doctest::Approx(mean / 10.0).epsilon(1e-15));
  }
}

TEST_CASE("run_training: budget, metrics, determinism") {
  TrainConfig cfg = mini_config();
  cfg.max_steps = 6;
  RunResult a = run_training(cfg);
  CHECK(a.steps == 6);
  REQUIRE(a.metrics.size() == 7);  // step-0 record plus six steps
  CHECK(a.metrics[0].step == 0);
  CHECK(a.metrics[0].evaluated);

  // token accounting is cumulative and consistent
  for (size_t i = 1; i < a.metrics.size(); ++i) {
    const auto& r = a.metrics[i];
    CHECK(r.tokens_total == r.tokens_policy + r.tokens_repair + r.tokens_graft);
    CHECK(r.tokens_total >= a.metrics[i - 1].tokens_total);
  }
  CHECK(a.tokens_used == a.metrics.back().tokens_total);

  SUBCASE("bit-identical metrics on re-run") {
    RunResult b = run_training(cfg);
    REQUIRE(b.metrics.size() == a.metrics.size());
    for (size_t i = 0; i < a.metrics.size(); ++i)
      CHECK(metrics_jsonl_line(a.metrics[i]) == metrics_jsonl_line(b.metrics[i]));
    CHECK(b.params.w == a.params.w);
    CHECK(b.final_acc == a.final_acc);
  }
  SUBCASE("gspo method trains too") {
    TrainConfig g = cfg;
    g.method = "gspo";
    RunResult r = run_training(g);
    CHECK(r.steps == 6);
    for (size_t i = 1; i < r.metrics.size(); ++i) {
      CHECK(r.metrics[i].pairs == 0);
      CHECK(r.metrics[i].tokens_repair == 0);
    }
  }
}

TEST_CASE("token budget is the stop condition and is not exceeded by more than a step") {
  TrainConfig cfg = mini_config();
  cfg.max_steps = 0;
  cfg.token_budget = 3000;
  RunResult r = run_training(cfg);
  CHECK(r.tokens_used >= cfg.token_budget);
  // the final step overshoots by at most one step's worth
  int64_t prev = r.metrics[r.metrics.size() - 2].tokens_total;
  CHECK(prev < cfg.token_budget);
}

TEST_CASE("files: metrics jsonl, summary csv, checkpoints, manifest, resume") {
  TrainConfig cfg = mini_config();
  cfg.max_steps = 6;
  cfg.checkpoint_interval = 3;
  fs::path dir = fs::temp_directory_path() / "iop_trainer_test";
  fs::remove_all(dir);

  RunIo io;
  io.out_dir = dir.string();
  RunResult a = run_training(cfg, io);

  CHECK(fs::exists(dir / "metrics.jsonl"));
  CHECK(fs::exists(dir / "summary.csv"));
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "ref.ckpt"));
  CHECK(fs::exists(dir / "ckpt_3.ckpt"));
  CHECK(fs::exists(dir / "final.ckpt"));

  auto recs = read_metrics_jsonl((dir / "metrics.jsonl").string());
  REQUIRE(recs.size() == a.metrics.size());
  for (size_t i = 0; i < recs.size(); ++i)
    CHECK(metrics_jsonl_line(recs[i]) == metrics_jsonl_line(a.metrics[i]));

  std::string csv = slurp((dir / "summary.csv").string());
  CHECK(csv.rfind("step,accuracy,repair_success,active_token_ratio,tokens\n", 0) == 0);

  SUBCASE("byte-identical metrics across reruns") {
    fs::path dir2 = fs::temp_directory_path() / "iop_trainer_test2";
    fs::remove_all(dir2);
    RunIo io2;
    io2.out_dir = dir2.string();
    run_training(cfg, io2);
    CHECK(slurp((dir / "metrics.jsonl").string()) == slurp((dir2 / "metrics.jsonl").string()));
    fs::remove_all(dir2);
  }

  SUBCASE("resume reproduces the uninterrupted run") {
    fs::path dir3 = fs::temp_directory_path() / "iop_trainer_test3";
    fs::remove_all(dir3);
    fs::create_directories(dir3);
    fs::copy(dir / "ref.ckpt", dir3 / "ref.ckpt");
    fs::copy(dir / "ckpt_3.ckpt", dir3 / "ckpt_3.ckpt");
    RunIo io3;
    io3.out_dir = dir3.string();
    RunResult b = run_training(cfg, io3, (dir3 / "ckpt_3.ckpt").string());
    CHECK(b.steps == 6);
    // records for steps 4..6 must match the uninterrupted run exactly
    size_t off = a.metrics.size() - b.metrics.size();
    for (size_t i = 0; i < b.metrics.size(); ++i)
      CHECK(metrics_jsonl_line(b.metrics[i]) == metrics_jsonl_line(a.metrics[off + i]));
    CHECK(b.params.w == a.params.w);
    CHECK(b.final_acc == a.final_acc);
    fs::remove_all(dir3);
  }
  fs::remove_all(dir);
}

TEST_CASE("deferral queue: retries within the interval, dropped after the limit") {
  // Force deferrals with an untrained (random) policy: no correct samples.
  TrainConfig cfg = mini_config();
  cfg.chain_min = 6;
  cfg.chain_max = 8;
  cfg.g_prime = 3;
  cfg.max_steps = 12;
  cfg.defer_retry_interval = 2;
  cfg.defer_max_retries = 2;
  cfg.sft_epochs = 1;
  cfg.sft_policy_weight = 0.0;  // keep the policy mode weak on purpose
  cfg.coldstart_n = 8;

  RunResult r = run_training(cfg);
  bool saw_deferrals = false;
  for (const auto& m : r.metrics) saw_deferrals |= m.deferred > 0;
  CHECK(saw_deferrals);
}

TEST_CASE("config json round trip and unknown key rejection") {
  TrainConfig cfg;
  std::string js = config_to_json(cfg);
  TrainConfig back = parse_config_json(js);
  CHECK(config_hash(back) == config_hash(cfg));

  CHECK_THROWS_WITH_AS(parse_config_json(R"({"lambda_rap": 0.2})"),
                       doctest::Contains("lambda_rap"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_json(R"({"lr": "fast"})"), doctest::Contains("lr"),
                       ConfigError);
  CHECK_THROWS_AS(parse_config_json(R"({"method": "ppo"})"), ConfigError);
  CHECK_THROWS_AS(parse_config_json("not json"), ConfigError);

  // hash is insensitive to key order
  TrainConfig c1 = parse_config_json(R"({"lr": 0.001, "seed": 9})");
  TrainConfig c2 = parse_config_json(R"({"seed": 9, "lr": 0.001})");
  CHECK(config_hash(c1) == config_hash(c2));
  CHECK(config_hash(c1) != config_hash(cfg));
}

TEST_CASE("metrics jsonl round trip") {
  MetricsRecord r;
  r.step = 3;
  r.tokens_total = 1234;
  r.repair_success = 0.375;
  r.eval_acc = 0.5;
  r.evaluated = true;
  auto line = metrics_jsonl_line(r);
  MetricsRecord back = metrics_from_jsonl_line(line);
  CHECK(metrics_jsonl_line(back) == line);
}
