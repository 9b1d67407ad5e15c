#include "iop/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "iop/rng.hpp"
#include "json.hpp"

namespace iop {

namespace {

namespace fs = std::filesystem;

int chain_len_for(const TrainConfig& cfg, uint64_t seed) {
  int span = cfg.chain_max - cfg.chain_min + 1;
  return cfg.chain_min + static_cast<int>(mix64(seed ^ 0xc2b2ae3d27d4eb4fULL) %
                                          static_cast<uint64_t>(span));
}

AuditFn audit_for(const TrainConfig& cfg) {
  if (cfg.audit_off)
    return [](const Problem& p, std::span<const int> y, std::span<const int> c,
              std::span<const int> a) { return always_pass_audit(p, y, c, a); };
  return [](const Problem& p, std::span<const int> y, std::span<const int> c,
            std::span<const int> a) { return rule_audit(p, y, c, a); };
}

RepairScoreConfig score_config(const TrainConfig& cfg) {
  RepairScoreConfig sc;
  sc.lambda_edit = cfg.no_min_edit ? 0.0 : cfg.lambda_edit;
  sc.edit_floor = cfg.edit_floor;
  return sc;
}

ClipConfig clip_config(const TrainConfig& cfg) {
  ClipConfig cc;
  cc.eps = cfg.clip_eps;
  cc.beta_kl = cfg.beta_kl;
  cc.lambda_rep = cfg.lambda_rep;
  cc.kl_double = cfg.kl_double;
  cc.no_gating = cfg.no_gating;
  return cc;
}

std::string trailer_json(int step, int64_t tok_total, int64_t tok_policy,
                         int64_t tok_repair, int64_t tok_graft, double last_eval,
                         const std::vector<DeferEntry>& queue) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["tokens_total"] = tok_total;
  j["tokens_policy"] = tok_policy;
  j["tokens_repair"] = tok_repair;
  j["tokens_graft"] = tok_graft;
  j["last_eval_acc"] = last_eval;
  auto q = nlohmann::ordered_json::array();
  for (const auto& e : queue) {
    nlohmann::ordered_json je;
    je["seed"] = e.spec.seed;
    je["chain_len"] = e.spec.chain_len;
    je["retries"] = e.retries;
    je["due_step"] = e.due_step;
    je["reason"] = e.reason;
    q.push_back(je);
  }
  j["queue"] = q;
  return j.dump();
}

void parse_trailer(const std::string& s, int* step, int64_t* tt, int64_t* tp, int64_t* tr,
                   int64_t* tg, double* last_eval, std::vector<DeferEntry>* queue) {
  auto j = nlohmann::json::parse(s);
  *step = j.at("step").get<int>();
  *tt = j.at("tokens_total").get<int64_t>();
  *tp = j.at("tokens_policy").get<int64_t>();
  *tr = j.at("tokens_repair").get<int64_t>();
  *tg = j.at("tokens_graft").get<int64_t>();
  *last_eval = j.at("last_eval_acc").get<double>();
  queue->clear();
  for (const auto& je : j.at("queue")) {
    DeferEntry e;
    e.spec.seed = je.at("seed").get<uint64_t>();
    e.spec.chain_len = je.at("chain_len").get<int>();
    e.retries = je.at("retries").get<int>();
    e.due_step = je.at("due_step").get<int>();
    e.reason = je.at("reason").get<std::string>();
    queue->push_back(std::move(e));
  }
}

void write_manifest(const TrainConfig& cfg, const RunIo& io, const RunResult& res,
                    const std::string& started, const std::string& finished) {
  if (io.out_dir.empty()) return;
  nlohmann::ordered_json j;
  j["config"] = nlohmann::json::parse(config_to_json(cfg));
  j["config_hash"] = config_hash(cfg);
  j["seed"] = cfg.seed;
  j["method"] = cfg.method;
  j["started_at"] = started;
  j["finished_at"] = finished;
  j["steps"] = res.steps;
  j["tokens_used"] = res.tokens_used;
  j["final_acc"] = res.final_acc;
  nlohmann::ordered_json outs;
  outs["metrics"] = io.out_dir + "/metrics.jsonl";
  outs["summary"] = io.out_dir + "/summary.csv";
  outs["final_checkpoint"] = io.out_dir + "/final.ckpt";
  j["outputs"] = outs;
  std::ofstream f(io.out_dir + "/manifest.json", std::ios::binary);
  f << j.dump(2) << "\n";
}

std::string now_iso() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof(buf), "%FT%TZ", std::gmtime(&t));
  return buf;
}

}  // namespace

Arch arch_from_config(const TrainConfig& cfg) {
  Arch a;
  a.vocab_size = vocab().size;
  a.context_len = cfg.context_len;
  a.hidden = cfg.hidden;
  a.heads = cfg.heads;
  a.layers = cfg.layers;
  return a;
}

std::vector<ColdStartExample> gather_coldstart(const TrainConfig& cfg) {
  if (!cfg.coldstart_path.empty()) return read_coldstart_jsonl(cfg.coldstart_path);
  return gen_coldstart(cfg.seed, cfg.coldstart_n, cfg.chain_min, cfg.chain_max);
}

Params stage1_sft(const TrainConfig& cfg, std::span<const ColdStartExample> data,
                  std::vector<double>* loss_curve) {
  if (data.empty()) throw std::invalid_argument("stage1_sft: no cold-start data");
  Params params = init_params(cfg.seed, arch_from_config(cfg));
  AdamState opt;
  OptConfig oc;
  oc.lr = cfg.sft_lr;
  oc.beta1 = cfg.adam_beta1;
  oc.beta2 = cfg.adam_beta2;
  oc.eps = cfg.adam_eps;
  oc.weight_decay = cfg.weight_decay;
  oc.warmup_steps = cfg.warmup_steps;

  std::vector<int> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  std::vector<ColdStartExample> batch, clone;
  const int batches_per_epoch =
      static_cast<int>((order.size() + cfg.sft_batch - 1) / cfg.sft_batch);
  const int total_updates = cfg.sft_epochs * batches_per_epoch;
  int64_t update = 0;
  uint64_t stream = 0;
  for (int epoch = 0; epoch < cfg.sft_epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, kSeedSftShuffle, static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.next_below(i)]);
    double epoch_loss = 0.0;
    int batches = 0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.sft_batch)) {
      batch.clear();
      for (size_t k = at; k < std::min(order.size(), at + static_cast<size_t>(cfg.sft_batch)); ++k)
        batch.push_back(data[static_cast<size_t>(order[k])]);
      GradientVector grad;
      double loss = sft_loss(params, batch, &grad);
      if (cfg.sft_policy_weight > 0.0) {
        // The solution-cloning term streams fresh problems with a chain-length
        // ramp; it stands in for the base competence a pretrained model would
        // bring to stage 2. The repair dataset itself stays fixed.
        int cap = 2;
        if (total_updates > 1)
          cap += static_cast<int>((cfg.chain_max - 2) * 3 * update / (2 * total_updates));
        cap = std::min(cap, cfg.chain_max);
        clone.clear();
        for (int j = 0; j < cfg.sft_batch; ++j) {
          uint64_t s = derive_seed(cfg.seed, kSeedCloneStream, ++stream);
          int len = 1 + static_cast<int>(mix64(s) % static_cast<uint64_t>(cap));
          ColdStartExample ex;
          ex.problem = generate_problem(s, len);
          ex.reference = render_solution(ex.problem).tokens;
          clone.push_back(std::move(ex));
        }
        GradientVector g2;
        double l2 = solution_nll(params, clone, &g2);
        loss += cfg.sft_policy_weight * l2;
        for (size_t i = 0; i < grad.size(); ++i) grad[i] += cfg.sft_policy_weight * g2[i];
      }
      if (!std::isfinite(loss)) throw NumericalError("stage1_sft: loss diverged");
      apply_update(params, grad, opt, oc);
      ++update;
      epoch_loss += loss;
      ++batches;
    }
    if (loss_curve) loss_curve->push_back(epoch_loss / std::max(1, batches));
  }
  return params;
}

std::vector<RolloutSet> collect_rollouts(const Params& snapshot,
                                         std::span<const PromptSpec> prompts,
                                         const TrainConfig& cfg, int step,
                                         int64_t* policy_tokens) {
  std::vector<RolloutSet> out;
  out.reserve(prompts.size());
  for (size_t i = 0; i < prompts.size(); ++i) {
    RolloutSet rs;
    rs.spec = prompts[i];
    rs.problem = generate_problem(rs.spec.seed, rs.spec.chain_len);
    State ctx_state = initial_state(snapshot.arch);
    advance(snapshot, ctx_state, rs.problem.prompt);
    const int ctx_len = static_cast<int>(rs.problem.prompt.size());
    rs.samples.reserve(static_cast<size_t>(cfg.g_prime));
    for (int g = 0; g < cfg.g_prime; ++g) {
      SampleOut s = sample_from_state(
          snapshot, ctx_state, ctx_len, cfg.temperature, cfg.max_len,
          derive_seed(cfg.seed, kSeedRollout, static_cast<uint64_t>(step), i,
                      static_cast<uint64_t>(g)));
      Trajectory t;
      t.tokens = std::move(s.tokens);
      t.logprobs = std::move(s.logprobs);
      t.reward = verify(rs.problem, t.tokens);
      if (policy_tokens) *policy_tokens += static_cast<int64_t>(t.tokens.size());
      rs.samples.push_back(std::move(t));
    }
    out.push_back(std::move(rs));
  }
  return out;
}

GroupPartition partition_and_anchor(const RolloutSet& rollout, double tau_r,
                                    uint64_t seed) {
  GroupPartition part;
  for (int i = 0; i < static_cast<int>(rollout.samples.size()); ++i) {
    if (rollout.samples[static_cast<size_t>(i)].reward >= tau_r)
      part.correct.push_back(i);
    else
      part.errors.push_back(i);
  }
  if (part.errors.empty()) {
    part.status = GroupPartition::Status::Skip;
    return part;
  }
  if (part.correct.empty()) {
    part.status = GroupPartition::Status::Defer;
    return part;
  }
  part.status = GroupPartition::Status::Ok;
  Rng rng(seed);
  part.anchor = part.correct[rng.next_below(part.correct.size())];
  return part;
}

DualBatches build_dual_batches(const Params& snapshot, std::span<const RolloutSet> rollouts,
                               std::span<const GroupPartition> partitions,
                               const TrainConfig& cfg, int step) {
  DualBatches out;
  AuditFn audit = audit_for(cfg);
  RepairScoreConfig sc = score_config(cfg);

  for (size_t i = 0; i < rollouts.size(); ++i) {
    const GroupPartition& part = partitions[i];
    if (part.status != GroupPartition::Status::Ok) continue;
    const RolloutSet& rs = rollouts[i];
    const Trajectory& anchor = rs.samples[static_cast<size_t>(part.anchor)];
    int pairs_before = static_cast<int>(out.pairs.size());

    for (int f : part.errors) {
      const Trajectory& failed = rs.samples[static_cast<size_t>(f)];
      RepairGroup group = generate_candidates(
          snapshot, rs.problem, failed, anchor, cfg.g_rep, cfg.temperature, cfg.max_len,
          audit, sc,
          derive_seed(cfg.seed, kSeedRepair, static_cast<uint64_t>(step), i,
                      static_cast<uint64_t>(f)));
      for (const auto& c : group.candidates)
        out.repair_tokens += static_cast<int64_t>(c.tokens.size());
      ++out.repair_attempts;

      int best = select_best(group);
      // A group with no honest correct candidate carries no useful ranking:
      // its relative ordering would favor answer-overwrites over honest
      // wrong attempts. Dropped unless explicitly kept.
      if (best >= 0 || cfg.keep_deferred_groups) out.groups.push_back(group);
      if (best < 0) continue;
      ++out.repair_successes;
      const RepairCandidate& chosen = group.candidates[static_cast<size_t>(best)];

      Alignment aln = align(failed.tokens, chosen.tokens);
      int k_star;
      if (cfg.no_truncation) {
        k_star = aln.distance;
        ++out.kstar_full;
      } else {
        ContinuationFn cont =
            cfg.graft_sample
                ? sampled_continuation(snapshot, cfg.temperature,
                                       derive_seed(cfg.seed, kSeedGraft,
                                                   static_cast<uint64_t>(step), i,
                                                   static_cast<uint64_t>(f)))
                : greedy_continuation(snapshot);
        AdaptiveKResult ak = adaptive_k(rs.problem, failed.tokens, chosen.tokens, aln,
                                        cfg.k_trunc, cfg.max_len, cont,
                                        cfg.fixed_truncation);
        out.graft_tokens += ak.graft_tokens;
        k_star = ak.k_star;
        switch (ak.level) {
          case AdaptiveKResult::Level::AtK: ++out.kstar_k; break;
          case AdaptiveKResult::Level::At2K: ++out.kstar_2k; break;
          case AdaptiveKResult::Level::Full: ++out.kstar_full; break;
        }
      }
      PairGroup pair = build_pair_group(snapshot, rs.problem, failed, chosen, k_star, aln);
      if (rule_audit(rs.problem, failed.tokens, chosen.tokens, anchor.tokens) == 0)
        ++out.hacked_admitted;
      out.pairs.push_back(std::move(pair));
    }
    if (static_cast<int>(out.pairs.size()) == pairs_before)
      out.deferred_prompts.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<double> evaluate_per_problem(const Params& params, int n_problems,
                                         int samples_per, const TrainConfig& cfg,
                                         uint64_t seed) {
  if (n_problems < 1 || samples_per < 1)
    throw std::invalid_argument("evaluate: counts must be >= 1");
  std::vector<double> acc(static_cast<size_t>(n_problems), 0.0);
  for (int i = 0; i < n_problems; ++i) {
    uint64_t pseed = derive_seed(cfg.seed, kSeedEval, 0, static_cast<uint64_t>(i));
    Problem p = generate_problem(pseed, chain_len_for(cfg, pseed));
    State ctx_state = initial_state(params.arch);
    advance(params, ctx_state, p.prompt);
    const int ctx_len = static_cast<int>(p.prompt.size());
    double total = 0.0;
    for (int k = 0; k < samples_per; ++k) {
      SampleOut s = sample_from_state(params, ctx_state, ctx_len, cfg.temperature,
                                      cfg.max_len,
                                      derive_seed(seed, kSeedEval, static_cast<uint64_t>(i),
                                                  static_cast<uint64_t>(k), 1));
      total += verify(p, s.tokens);
    }
    acc[static_cast<size_t>(i)] = total / samples_per;
  }
  return acc;
}

double evaluate(const Params& params, int n_problems, int samples_per,
                const TrainConfig& cfg, uint64_t seed) {
  auto acc = evaluate_per_problem(params, n_problems, samples_per, cfg, seed);
  double total = 0.0;
  for (double a : acc) total += a;
  return total / static_cast<double>(acc.size());
}

RunResult run_training(const TrainConfig& cfg, const RunIo& io,
                       const std::string& resume_ckpt, const std::string& init_ckpt) {
  validate_config(cfg);
  const std::string started = now_iso();
  const bool to_disk = !io.out_dir.empty();
  if (to_disk) fs::create_directories(io.out_dir);

  const bool iop = cfg.method == "iop";
  ClipConfig cc = clip_config(cfg);

  Params params;
  Params ref;
  AdamState opt;
  int start_step = 0;
  int64_t tok_total = 0, tok_policy = 0, tok_repair = 0, tok_graft = 0;
  double last_eval = 0.0;
  std::vector<DeferEntry> queue;
  RunResult res;

  if (!resume_ckpt.empty()) {
    Checkpoint ck = load_checkpoint(resume_ckpt);
    params = std::move(ck.params);
    if (ck.adam) opt = *ck.adam;
    parse_trailer(ck.trailer, &start_step, &tok_total, &tok_policy, &tok_repair,
                  &tok_graft, &last_eval, &queue);
    ref = load_checkpoint(io.out_dir.empty()
                              ? fs::path(resume_ckpt).parent_path().string() + "/ref.ckpt"
                              : io.out_dir + "/ref.ckpt")
              .params;
  } else if (!init_ckpt.empty()) {
    params = load_checkpoint(init_ckpt).params;
    ref = params;
  } else {
    auto coldstart = gather_coldstart(cfg);
    std::vector<double> curve;
    params = stage1_sft(cfg, coldstart, &curve);
    if (io.verbose && !curve.empty())
      std::cerr << "sft loss " << curve.front() << " -> " << curve.back() << "\n";
    ref = params;
  }
  if (to_disk && resume_ckpt.empty()) {
    Checkpoint rc;
    rc.params = ref;
    rc.master_seed = cfg.seed;
    rc.step = 0;
    save_checkpoint(io.out_dir + "/ref.ckpt", rc);
  }

  OptConfig oc;
  oc.lr = cfg.lr;
  oc.beta1 = cfg.adam_beta1;
  oc.beta2 = cfg.adam_beta2;
  oc.eps = cfg.adam_eps;
  oc.weight_decay = cfg.weight_decay;
  oc.warmup_steps = cfg.warmup_steps;

  if (resume_ckpt.empty()) {
    last_eval = evaluate(params, cfg.eval_problems, cfg.eval_samples, cfg,
                         derive_seed(cfg.seed, kSeedEval, 0));
    MetricsRecord r0;
    r0.step = 0;
    r0.eval_acc = last_eval;
    r0.evaluated = true;
    res.metrics.push_back(r0);
  }

  int step = start_step;
  while (tok_total < cfg.token_budget && (cfg.max_steps == 0 || step < cfg.max_steps)) {
    ++step;
    // Assemble the prompt batch: due deferrals first (capped at half the
    // batch so retries can never starve the run of fresh prompts).
    std::vector<PromptSpec> specs;
    std::vector<int> queue_slot(static_cast<size_t>(cfg.batch_prompts), -1);
    const int retry_cap = std::max(1, cfg.batch_prompts / 4);
    for (size_t qi = 0; qi < queue.size() && static_cast<int>(specs.size()) < retry_cap; ++qi) {
      if (queue[qi].due_step <= step) {
        queue_slot[specs.size()] = static_cast<int>(qi);
        specs.push_back(queue[qi].spec);
      }
    }
    for (int slot = static_cast<int>(specs.size()); slot < cfg.batch_prompts; ++slot) {
      PromptSpec ps;
      ps.seed = derive_seed(cfg.seed, kSeedProblem, static_cast<uint64_t>(step),
                            static_cast<uint64_t>(slot), 7);
      ps.chain_len = chain_len_for(cfg, ps.seed);
      specs.push_back(ps);
    }

    auto rollouts = collect_rollouts(params, specs, cfg, step, &tok_policy);

    MetricsRecord rec;
    rec.step = step;
    ObjectiveReport report;
    GradientVector grad;
    bool have_grad = false;

    if (iop) {
      std::vector<GroupPartition> parts;
      parts.reserve(rollouts.size());
      for (size_t i = 0; i < rollouts.size(); ++i)
        parts.push_back(partition_and_anchor(
            rollouts[i], cfg.tau_r,
            derive_seed(cfg.seed, kSeedAnchor, static_cast<uint64_t>(step), i)));

      DualBatches db = build_dual_batches(params, rollouts, parts, cfg, step);
      tok_repair += db.repair_tokens;
      tok_graft += db.graft_tokens;

      rec.pairs = static_cast<int>(db.pairs.size());
      rec.repair_groups = static_cast<int>(db.groups.size());
      rec.repair_success =
          db.repair_attempts > 0
              ? static_cast<double>(db.repair_successes) / db.repair_attempts
              : 0.0;
      rec.kstar_k = db.kstar_k;
      rec.kstar_2k = db.kstar_2k;
      rec.kstar_full = db.kstar_full;
      rec.hacked_admitted = db.hacked_admitted;

      // Deferral bookkeeping. A prompt defers when it has no correct sample
      // (no anchor) or produced no usable repair pair.
      std::vector<bool> deferred_now(rollouts.size(), false);
      std::vector<std::string> reason(rollouts.size());
      for (size_t i = 0; i < rollouts.size(); ++i) {
        if (parts[i].status == GroupPartition::Status::Defer) {
          deferred_now[i] = true;
          reason[i] = "no-correct-sample";
        } else if (parts[i].status == GroupPartition::Status::Skip) {
          ++rec.skipped;
        }
      }
      for (int i : db.deferred_prompts) {
        deferred_now[static_cast<size_t>(i)] = true;
        reason[static_cast<size_t>(i)] = "no-correct-repair";
      }
      std::vector<size_t> to_remove;
      for (size_t s = 0; s < specs.size(); ++s) {
        int qi = queue_slot[s];
        if (deferred_now[s]) {
          ++rec.deferred;
          if (qi >= 0) {
            DeferEntry& e = queue[static_cast<size_t>(qi)];
            e.retries += 1;
            e.due_step = step + cfg.defer_retry_interval;
            e.reason = reason[s];
            if (e.retries > cfg.defer_max_retries) to_remove.push_back(static_cast<size_t>(qi));
          } else {
            DeferEntry e;
            e.spec = specs[s];
            e.retries = 0;
            e.due_step = step + cfg.defer_retry_interval;
            e.reason = reason[s];
            queue.push_back(std::move(e));
          }
        } else if (qi >= 0) {
          to_remove.push_back(static_cast<size_t>(qi));
        }
      }
      std::sort(to_remove.begin(), to_remove.end());
      for (size_t k = to_remove.size(); k > 0; --k)
        queue.erase(queue.begin() + static_cast<std::ptrdiff_t>(to_remove[k - 1]));

      if (!db.pairs.empty() || !db.groups.empty()) {
        for (int e = 0; e < cfg.inner_epochs; ++e) {
          report = joint_objective(params, ref, db.pairs, db.groups, cc,
                                   &grad);
          if (!std::isfinite(report.total))
            throw NumericalError("joint objective is not finite");
          if (cfg.include_correct) {
            std::vector<RolloutGroup> full;
            full.reserve(rollouts.size());
            for (const auto& rs : rollouts) full.push_back({rs.problem, rs.samples});
            GradientVector g2;
            ObjectiveReport r2 = gspo_objective(params, ref, full, cc, &g2);
            report.total += r2.total;
            for (size_t i = 0; i < grad.size(); ++i) grad[i] += g2[i];
          }
          have_grad = true;
          for (auto& g : grad) g = -g;  // ascend the objective
          if (!apply_update(params, grad, opt, oc) && io.verbose)
            std::cerr << "step " << step << ": non-finite gradient, update skipped\n";
        }
      }
      rec.active_token_ratio = report.active_fraction;
    } else {
      std::vector<RolloutGroup> groups;
      groups.reserve(rollouts.size());
      for (const auto& rs : rollouts) groups.push_back({rs.problem, rs.samples});
      for (int e = 0; e < cfg.inner_epochs; ++e) {
        report = gspo_objective(params, ref, groups, cc, &grad);
        if (!std::isfinite(report.total))
          throw NumericalError("gspo objective is not finite");
        if (report.empty) break;
        have_grad = true;
        for (auto& g : grad) g = -g;
        if (!apply_update(params, grad, opt, oc) && io.verbose)
          std::cerr << "step " << step << ": non-finite gradient, update skipped\n";
      }
      rec.active_token_ratio = report.groups_used > 0 ? 1.0 : 0.0;
      rec.skipped = report.groups_skipped;
    }
    (void)have_grad;

    if (cfg.refresh_ref_interval > 0 && step % cfg.refresh_ref_interval == 0) ref = params;

    tok_total = tok_policy + tok_repair + tok_graft;
    rec.tokens_total = tok_total;
    rec.tokens_policy = tok_policy;
    rec.tokens_repair = tok_repair;
    rec.tokens_graft = tok_graft;
    rec.objective = report.total;
    rec.obj_policy = report.policy_term;
    rec.obj_repair = report.repair_term;
    rec.kl_policy = report.kl_policy;
    rec.kl_repair = report.kl_repair;

    if (step % cfg.eval_interval == 0) {
      last_eval = evaluate(params, cfg.eval_problems, cfg.eval_samples, cfg,
                           derive_seed(cfg.seed, kSeedEval, static_cast<uint64_t>(step)));
      rec.evaluated = true;
    }
    rec.eval_acc = last_eval;
    res.metrics.push_back(rec);

    if (to_disk && cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0) {
      Checkpoint ck;
      ck.params = params;
      ck.master_seed = cfg.seed;
      ck.step = step;
      ck.adam = opt;
      ck.trailer = trailer_json(step, tok_total, tok_policy, tok_repair, tok_graft,
                                last_eval, queue);
      save_checkpoint(io.out_dir + "/ckpt_" + std::to_string(step) + ".ckpt", ck);
    }
    if (io.verbose && step % 10 == 0)
      std::cerr << "step " << step << " tokens " << tok_total << " acc " << last_eval
                << " repair " << rec.repair_success << "\n";
  }

  res.params = params;
  res.steps = step;
  res.tokens_used = tok_total;
  res.final_acc = evaluate(params, cfg.eval_problems, cfg.final_eval_samples, cfg,
                           derive_seed(cfg.seed, kSeedEval, 0xfffffffULL));

  if (to_disk) {
    // On resume, only the records from the resumed segment are rewritten; a
    // dedicated file keeps comparisons straightforward.
    std::string metrics_path =
        io.out_dir + (resume_ckpt.empty() ? "/metrics.jsonl" : "/metrics_resumed.jsonl");
    write_metrics_jsonl(metrics_path, res.metrics);
    write_summary_csv(io.out_dir + (resume_ckpt.empty() ? "/summary.csv" : "/summary_resumed.csv"),
                      res.metrics);
    Checkpoint ck;
    ck.params = params;
    ck.master_seed = cfg.seed;
    ck.step = step;
    ck.adam = opt;
    ck.trailer =
        trailer_json(step, tok_total, tok_policy, tok_repair, tok_graft, last_eval, queue);
    save_checkpoint(io.out_dir + "/final.ckpt", ck);
    write_manifest(cfg, io, res, started, now_iso());
  }
  return res;
}

}  // namespace iop
