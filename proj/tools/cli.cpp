#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "iop/alignment.hpp"
#include "iop/checkpoint.hpp"
#include "iop/config.hpp"
#include "iop/rng.hpp"
#include "iop/task_env.hpp"
#include "iop/trainer.hpp"

namespace iop::cli {

namespace {

namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kNumeric = 3;

std::vector<int> parse_token_list(const std::string& text) {
  std::vector<int> out;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    size_t pos = 0;
    int v = std::stoi(cur, &pos);
    if (pos != cur.size()) throw std::invalid_argument("bad token: " + cur);
    out.push_back(v);
    cur.clear();
  };
  for (char c : text) {
    if (c == ',' || c == ' ' || c == '\t' || c == '\n') {
      flush();
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

std::vector<int> tokens_from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_token_list(ss.str());
}

struct TrainArgs {
  std::string config_path;
  std::string out_dir = "run";
  std::string method;
  std::string resume;
  std::string init_ckpt;
  bool skip_sft = false;
  bool verbose = false;
  std::optional<uint64_t> seed;
  std::optional<int64_t> token_budget;
  std::optional<int> max_steps;
  std::optional<double> lr;
  std::optional<double> lambda_rep;
  std::optional<int> k_trunc;
  std::optional<int> g_rep;
  bool no_gating = false, no_truncation = false, fixed_truncation = false;
  bool no_min_edit = false, include_correct = false, audit_off = false;
  bool kl_double = false, graft_sample = false;
};

TrainConfig assemble_config(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config_path.empty()) cfg = load_config_file(a.config_path);
  if (!a.method.empty()) cfg.method = a.method;
  if (a.seed) cfg.seed = *a.seed;
  if (a.token_budget) cfg.token_budget = *a.token_budget;
  if (a.max_steps) cfg.max_steps = *a.max_steps;
  if (a.lr) cfg.lr = *a.lr;
  if (a.lambda_rep) cfg.lambda_rep = *a.lambda_rep;
  if (a.k_trunc) cfg.k_trunc = *a.k_trunc;
  if (a.g_rep) cfg.g_rep = *a.g_rep;
  cfg.no_gating |= a.no_gating;
  cfg.no_truncation |= a.no_truncation;
  cfg.fixed_truncation |= a.fixed_truncation;
  cfg.no_min_edit |= a.no_min_edit;
  cfg.include_correct |= a.include_correct;
  cfg.audit_off |= a.audit_off;
  cfg.kl_double |= a.kl_double;
  cfg.graft_sample |= a.graft_sample;
  validate_config(cfg);
  return cfg;
}

void add_override_flags(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--config", a.config_path, "JSON config file");
  cmd->add_option("--out", a.out_dir, "output directory");
  cmd->add_option("--method", a.method, "iop | gspo")
      ->check(CLI::IsMember({"iop", "gspo"}));
  cmd->add_option("--seed", a.seed, "master seed");
  cmd->add_option("--token-budget", a.token_budget, "total generated-token budget");
  cmd->add_option("--max-steps", a.max_steps, "step safety rail (0 = budget only)");
  cmd->add_option("--lr", a.lr, "stage-2 learning rate");
  cmd->add_option("--lambda-rep", a.lambda_rep, "repair objective weight");
  cmd->add_option("--k-trunc", a.k_trunc, "truncation window K");
  cmd->add_option("--g-rep", a.g_rep, "repair candidates per failure");
  cmd->add_flag("--no-gating", a.no_gating, "full-token updates");
  cmd->add_flag("--no-truncation", a.no_truncation, "use full difference masks");
  cmd->add_flag("--fixed-truncation", a.fixed_truncation, "pin K* = K, no verification");
  cmd->add_flag("--no-min-edit", a.no_min_edit, "drop the edit-distance penalty");
  cmd->add_flag("--include-correct", a.include_correct,
                "let correct samples contribute policy gradients");
  cmd->add_flag("--audit-off", a.audit_off, "replace the rule auditor with always-pass");
  cmd->add_flag("--kl-double", a.kl_double, "charge KL inside both objectives");
  cmd->add_flag("--graft-sample", a.graft_sample, "sample graft continuations");
  cmd->add_flag("-v,--verbose", a.verbose, "progress to stderr");
}

int cmd_gen_data(const std::string& out, int n, uint64_t seed, int chain_min,
                 int chain_max) {
  auto data = gen_coldstart(seed, n, chain_min, chain_max);
  write_coldstart_jsonl(out, data);
  std::cout << "wrote " << data.size() << " examples to " << out << "\n";
  return kOk;
}

int cmd_sft(const TrainArgs& a) {
  TrainConfig cfg = assemble_config(a);
  fs::create_directories(a.out_dir);
  auto data = gather_coldstart(cfg);
  std::vector<double> curve;
  Params params = stage1_sft(cfg, data, &curve);
  Checkpoint ck;
  ck.params = params;
  ck.master_seed = cfg.seed;
  ck.step = 0;
  save_checkpoint(a.out_dir + "/sft.ckpt", ck);
  std::cout << "sft done: loss " << curve.front() << " -> " << curve.back() << ", checkpoint "
            << a.out_dir << "/sft.ckpt\n";
  return kOk;
}

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg = assemble_config(a);
  if (a.skip_sft && a.init_ckpt.empty() && a.resume.empty())
    throw ConfigError("--skip-sft requires --init-ckpt");
  RunIo io;
  io.out_dir = a.out_dir;
  io.verbose = a.verbose;
  RunResult res = run_training(cfg, io, a.resume, a.skip_sft ? a.init_ckpt : "");
  std::cout << "method=" << cfg.method << " seed=" << cfg.seed << " steps=" << res.steps
            << " tokens=" << res.tokens_used << " final_acc=" << res.final_acc << "\n";
  return kOk;
}

int cmd_eval(const std::string& ckpt_path, int n, int k, uint64_t seed,
             const std::string& config_path) {
  if (!fs::exists(ckpt_path)) throw ConfigError("checkpoint not found: " + ckpt_path);
  TrainConfig cfg;
  if (!config_path.empty()) cfg = load_config_file(config_path);
  cfg.seed = seed;
  Checkpoint ck = load_checkpoint(ckpt_path);
  auto acc = evaluate_per_problem(ck.params, n, k, cfg, derive_seed(seed, kSeedEval, 1));
  double mean = 0.0;
  for (double a : acc) mean += a;
  mean /= static_cast<double>(acc.size());

  // Percentile bootstrap over problems.
  const int B = 1000;
  std::vector<double> boots(B);
  Rng rng(derive_seed(seed, kSeedEval, 2));
  for (int b = 0; b < B; ++b) {
    double s = 0.0;
    for (size_t i = 0; i < acc.size(); ++i) s += acc[rng.next_below(acc.size())];
    boots[static_cast<size_t>(b)] = s / static_cast<double>(acc.size());
  }
  std::sort(boots.begin(), boots.end());
  double lo = boots[static_cast<size_t>(std::floor(0.025 * (B - 1)))];
  double hi = boots[static_cast<size_t>(std::ceil(0.975 * (B - 1)))];
  std::cout << "avg@" << k << " accuracy=" << mean << " ci95=[" << lo << "," << hi
            << "] n=" << n << "\n";
  return kOk;
}

int cmd_align_debug(const std::string& y_text, const std::string& rep_text,
                    const std::string& y_file, const std::string& rep_file,
                    const std::string& k_text) {
  std::vector<int> y = y_file.empty() ? parse_token_list(y_text) : tokens_from_file(y_file);
  std::vector<int> rep =
      rep_file.empty() ? parse_token_list(rep_text) : tokens_from_file(rep_file);
  int k = kNoTruncation;
  if (!k_text.empty() && k_text != "inf") {
    size_t pos = 0;
    k = std::stoi(k_text, &pos);
    if (pos != k_text.size() || k < 1) throw std::invalid_argument("bad --K: " + k_text);
  }
  Alignment a = align(y, rep);
  if (a.distance == 0) std::cout << "0 edits\n";
  std::cout << render_alignment(y, rep, a, k);
  return kOk;
}

int cmd_sweep(const std::string& param, const std::string& values_text,
              const std::string& seeds_text, const TrainArgs& base, int parallel) {
  static const std::vector<std::string> kParams = {"lambda_rep", "k_trunc", "g_rep"};
  if (std::find(kParams.begin(), kParams.end(), param) == kParams.end())
    throw ConfigError("unknown sweep parameter: " + param);

  std::vector<std::string> values;
  {
    std::stringstream ss(values_text);
    std::string v;
    while (std::getline(ss, v, ',')) values.push_back(v);
  }
  std::vector<uint64_t> seeds;
  for (int s : parse_token_list(seeds_text)) seeds.push_back(static_cast<uint64_t>(s));
  if (values.empty() || seeds.empty()) throw ConfigError("sweep needs values and seeds");

  struct Cell {
    std::string value;
    uint64_t seed;
    std::string dir;
    double final_acc = 0.0;
    double repair_success = 0.0;
    int64_t tokens = 0;
  };
  std::vector<Cell> cells;
  for (const auto& v : values)
    for (uint64_t s : seeds) {
      Cell c;
      c.value = v;
      c.seed = s;
      c.dir = base.out_dir + "/" + param + "_" + v + "_seed" + std::to_string(s);
      if (fs::exists(c.dir)) throw ConfigError("output dir already exists: " + c.dir);
      cells.push_back(std::move(c));
    }

  auto run_cell = [&](Cell& c) {
    TrainArgs a = base;
    a.out_dir = c.dir;
    TrainConfig cfg = assemble_config(a);
    cfg.seed = c.seed;
    if (param == "lambda_rep") {
      cfg.lambda_rep = std::stod(c.value);
    } else if (param == "k_trunc") {
      if (c.value == "inf") {
        cfg.no_truncation = true;
      } else {
        cfg.k_trunc = std::stoi(c.value);
      }
    } else if (param == "g_rep") {
      cfg.g_rep = std::stoi(c.value);
    }
    validate_config(cfg);
    RunIo io;
    io.out_dir = c.dir;
    RunResult res = run_training(cfg, io);
    c.final_acc = res.final_acc;
    c.tokens = res.tokens_used;
    // repair success over the last quartile of steps
    size_t n = res.metrics.size();
    size_t from = n - n / 4;
    double rs = 0.0;
    int cnt = 0;
    for (size_t i = from; i < n; ++i) {
      rs += res.metrics[i].repair_success;
      ++cnt;
    }
    c.repair_success = cnt > 0 ? rs / cnt : 0.0;
  };

  if (parallel <= 1) {
    for (auto& c : cells) run_cell(c);
  } else {
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    for (int t = 0; t < parallel; ++t)
      pool.emplace_back([&] {
        for (size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1))
          run_cell(cells[i]);
      });
    for (auto& th : pool) th.join();
  }

  fs::create_directories(base.out_dir);
  std::string csv_path = base.out_dir + "/sweep.csv";
  std::ofstream csv(csv_path, std::ios::binary);
  csv << "param,value,seed,final_acc,repair_success,tokens\n";
  csv << std::setprecision(17);
  for (const auto& c : cells)
    csv << param << "," << c.value << "," << c.seed << "," << c.final_acc << ","
        << c.repair_success << "," << c.tokens << "\n";
  std::cout << "wrote " << csv_path << " (" << cells.size() << " cells)\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"repair-gated policy optimization on chain arithmetic"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the cold-start repair dataset");
  int gen_n = 500;
  uint64_t gen_seed = 1;
  int gen_cmin = 4, gen_cmax = 8;
  std::string gen_out = "coldstart.jsonl";
  gen->add_option("--n", gen_n, "number of examples");
  gen->add_option("--seed", gen_seed, "seed");
  gen->add_option("--out", gen_out, "output JSONL path");
  gen->add_option("--chain-min", gen_cmin, "min chain length");
  gen->add_option("--chain-max", gen_cmax, "max chain length");

  // sft
  auto* sft = app.add_subcommand("sft", "stage 1 only: cold-start SFT");
  TrainArgs sft_args;
  add_override_flags(sft, sft_args);

  // train
  auto* train = app.add_subcommand("train", "stage 1 + stage 2 training");
  TrainArgs train_args;
  add_override_flags(train, train_args);
  train->add_flag("--skip-sft", train_args.skip_sft, "start stage 2 from --init-ckpt");
  train->add_option("--init-ckpt", train_args.init_ckpt, "checkpoint for --skip-sft");
  train->add_option("--resume", train_args.resume, "resume an interrupted run");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_config;
  int ev_n = 200, ev_k = 32;
  uint64_t ev_seed = 1;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--n", ev_n, "problems");
  ev->add_option("--k", ev_k, "samples per problem");
  ev->add_option("--seed", ev_seed, "seed");
  ev->add_option("--config", ev_config, "config for temperature/curriculum");

  // align-debug
  auto* ad = app.add_subcommand("align-debug", "print the edit path and masks");
  std::string ad_y, ad_rep, ad_yf, ad_repf, ad_k;
  ad->add_option("--y", ad_y, "error-side tokens, comma separated");
  ad->add_option("--repair", ad_rep, "repair-side tokens, comma separated");
  ad->add_option("--y-file", ad_yf, "error-side tokens from file");
  ad->add_option("--repair-file", ad_repf, "repair-side tokens from file");
  ad->add_option("--K", ad_k, "truncation window (integer or 'inf')");

  // sweep
  auto* sw = app.add_subcommand("sweep", "sensitivity sweep over one parameter");
  TrainArgs sw_args;
  std::string sw_param, sw_values, sw_seeds;
  int sw_parallel = 1;
  add_override_flags(sw, sw_args);
  sw->add_option("--param", sw_param, "lambda_rep | k_trunc | g_rep")->required();
  sw->add_option("--values", sw_values, "comma-separated values ('inf' allowed for k_trunc)")
      ->required();
  sw->add_option("--seeds", sw_seeds, "comma-separated seeds")->required();
  sw->add_option("--parallel", sw_parallel, "cells run concurrently");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e);
      return kOk;
    }
    std::cerr << e.what() << "\n";
    return kUsage;
  }

  try {
    if (gen->parsed()) {
      if (gen_n < 1) {
        std::cerr << "--n must be >= 1\n";
        return kUsage;
      }
      return cmd_gen_data(gen_out, gen_n, gen_seed, gen_cmin, gen_cmax);
    }
    if (sft->parsed()) return cmd_sft(sft_args);
    if (train->parsed()) return cmd_train(train_args);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_n, ev_k, ev_seed, ev_config);
    if (ad->parsed()) return cmd_align_debug(ad_y, ad_rep, ad_yf, ad_repf, ad_k);
    if (sw->parsed()) return cmd_sweep(sw_param, sw_values, sw_seeds, sw_args, sw_parallel);
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace iop::cli
