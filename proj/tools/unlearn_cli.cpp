#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include <json.hpp>

#include "unlearn/bytes.hpp"
#include "unlearn/controller.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/hotpath.hpp"
#include "unlearn/workspace.hpp"

using namespace unlearn;
namespace fs = std::filesystem;

namespace {

// exit codes: 0 success/PASS, 1 audit fail, 2 integrity fail,
// 3 precondition/pin-drift refusal
constexpr int kExitOk = 0;
constexpr int kExitAuditFail = 1;
constexpr int kExitIntegrityFail = 2;
constexpr int kExitRefused = 3;

void warn_unkeyed(const std::vector<uint8_t>& key) {
  if (key.empty()) {
    std::cerr << "warning: running in toy mode with unkeyed FNV-1a content hashes; "
                 "production deployments MUST use keyed HMAC-SHA256 (--hmac-key)\n";
  }
}

std::vector<uint8_t> parse_key(const std::string& hex) { return from_hex(hex); }

TrainConfig config_from_flags(uint32_t steps, uint32_t accum, uint32_t mb_size, uint64_t seed,
                              float lr, bool mean) {
  TrainConfig cfg;
  cfg.total_steps = steps;
  cfg.warmup_steps = std::min<uint32_t>(10, steps);
  cfg.accum_len = accum;
  cfg.microbatch_size = mb_size;
  cfg.master_seed = seed;
  cfg.base_lr = lr;
  cfg.reduction = mean ? Reduction::Mean : Reduction::Sum;
  return cfg;
}

// ring patches persisted by `train` live under ring/ as patch files
RingBuffer load_ring(const RunWorkspace& ws, size_t window) {
  RingBuffer ring(window);
  std::vector<std::string> paths;
  if (fs::exists(ws.ring_dir())) {
    for (const auto& e : fs::directory_iterator(ws.ring_dir())) {
      if (e.path().extension() == ".bin") paths.push_back(e.path().string());
    }
  }
  std::sort(paths.begin(), paths.end());
  std::vector<DeltaPatch> patches;
  for (const std::string& p : paths) patches.push_back(DeltaPatch::load(p));
  std::sort(patches.begin(), patches.end(),
            [](const DeltaPatch& a, const DeltaPatch& b) { return a.step_index < b.step_index; });
  for (DeltaPatch& p : patches) ring.push(std::move(p));
  return ring;
}

AdapterRegistry load_registry(const RunWorkspace& ws) {
  AdapterRegistry registry(ws.adapters_dir() + "/journal.log");
  if (fs::exists(ws.adapters_dir())) {
    for (const auto& e : fs::directory_iterator(ws.adapters_dir())) {
      if (e.path().extension() == ".bin") registry.add(Adapter::load(e.path().string()));
    }
  }
  return registry;
}

int cmd_gen_corpus(const std::string& root, uint64_t size, double dup_rate, int canaries,
                   int canary_bits, uint64_t seed) {
  RunWorkspace ws(root);
  GenCorpusOptions opt;
  opt.size = size;
  opt.dup_rate = dup_rate;
  opt.num_canaries = canaries;
  opt.canary_bits = canary_bits;
  opt.seed = seed;
  GeneratedCorpus gen = generate_corpus(opt);
  ws.save_corpus(gen);
  std::cout << "corpus: " << gen.corpus.size() << " samples, forget cohort "
            << gen.meta.forget_cohort.size() << ", retain "
            << gen.corpus.size() - gen.meta.forget_cohort.size() << "\n";
  std::cout << "written to " << ws.corpus_dir() << "\n";
  return kExitOk;
}

int cmd_train(const std::string& root, uint32_t steps, uint32_t accum, uint32_t mb_size,
              uint64_t seed, float lr, bool mean, uint32_t ckpt_interval, uint32_t ring_window,
              const std::string& key_hex, bool exclude_cohort) {
  RunWorkspace ws(root);
  ws.ensure_dirs();
  std::vector<uint8_t> key = parse_key(key_hex);
  warn_unkeyed(key);
  Corpus corpus = ws.load_corpus();
  if (exclude_cohort) {
    // cohort data stays out of the base run (it belongs to adapters)
    CorpusMeta meta = ws.load_corpus_meta();
    std::set<uint64_t> cohort(meta.forget_cohort.begin(), meta.forget_cohort.end());
    std::vector<Document> kept;
    for (const Document& d : corpus.docs()) {
      if (!cohort.count(d.id)) kept.push_back(d);
    }
    corpus = Corpus(std::move(kept));
    std::cout << "training base on " << corpus.size() << " samples (cohort excluded)\n";
  }
  TrainConfig cfg = config_from_flags(steps, accum, mb_size, seed, lr, mean);
  fs::remove_all(ws.wal_dir());
  fs::remove_all(ws.ring_dir());
  WalWriter wal(ws.wal_dir(), seed, key);
  CheckpointPolicy policy{ws.checkpoints_dir(), ckpt_interval, true};
  RingBuffer ring(ring_window, DeltaMode::Xor, Codec::Zrle, true);
  TrainRunResult result =
      train(corpus, cfg, &wal, &policy, ring_window > 0 ? &ring : nullptr);
  if (ring_window > 0) {
    fs::create_directories(ws.ring_dir());
    for (const DeltaPatch& p : ring.patches()) {
      char name[64];
      std::snprintf(name, sizeof name, "patch_step%06u.bin", p.step_index);
      p.save(ws.ring_dir() + "/" + name);
    }
  }
  nlohmann::json meta = nlohmann::json::parse(run_metadata_json(cfg, result));
  meta["ring_window"] = ring_window;
  meta["wal_keyed"] = !key.empty();
  ws.save_run_meta(meta.dump(2));
  std::cout << "trained " << steps << " steps, " << result.wal_records << " WAL records, "
            << result.checkpoints.size() << " checkpoints\n";
  std::cout << "final state hash "
            << to_hex(state_hash(result.state.params, result.state.opt).data(), 8) << "\n";
  return kExitOk;
}

int cmd_verify_wal(const std::string& root, const std::string& key_hex) {
  RunWorkspace ws(root);
  std::vector<uint8_t> key = parse_key(key_hex);
  warn_unkeyed(key);
  WalReader reader = WalReader::open(ws.wal_dir());
  IntegrityReport rep = reader.verify(key.empty() ? nullptr : &key);
  std::cout << "records: " << rep.records << "\n";
  std::cout << "stream sha256: " << rep.segment_sha256_hex << "\n";
  if (rep.ok) {
    std::cout << "integrity: PASS\n";
    return kExitOk;
  }
  std::cout << "integrity: FAIL (" << rep.first_failure << " at record "
            << rep.first_failure_record << ")\n";
  return kExitIntegrityFail;
}

struct LoadedRun {
  Corpus corpus;
  CorpusMeta meta;
  TrainConfig cfg;
  std::vector<SavedCheckpoint> checkpoints;
  WalReader reader;
  IdManifest manifest;
};

LoadedRun load_run(const RunWorkspace& ws, const TrainConfig* cfg_override = nullptr) {
  LoadedRun run{ws.load_corpus(), ws.load_corpus_meta(), ws.load_train_config(),
                ws.checkpoint_catalog(), WalReader::open(ws.wal_dir()),
                IdManifest::load(ws.wal_dir() + "/id_manifest.bin")};
  if (cfg_override != nullptr) run.cfg = *cfg_override;
  check_run_pins(ws.load_run_meta(), run.cfg);
  return run;
}

// near-duplicate admission thresholds; CLI-overridable
struct ClosureKnobs {
  int tau_hamming = 3;
  double tau_jaccard = 0.8;
};

ForgetClosure expand_request(const LoadedRun& run, const std::set<uint64_t>& ids,
                             const ClosureKnobs& knobs) {
  SimHashIndex index;
  index.build(run.corpus);
  return expand_closure(ids, index, knobs.tau_hamming, knobs.tau_jaccard);
}

int cmd_replay(const std::string& root, const std::string& request_path,
               const std::string& key_hex, const ClosureKnobs& knobs) {
  RunWorkspace ws(root);
  std::vector<uint8_t> key = parse_key(key_hex);
  warn_unkeyed(key);
  LoadedRun run = load_run(ws);

  std::set<uint64_t> requested;
  if (!request_path.empty()) {
    ForgetRequest req = ForgetRequest::from_json(read_file(request_path));
    requested = req.sample_ids;
  }
  ForgetClosure closure = expand_request(run, requested, knobs);
  ws.write_artifact(ws.reports_dir(), "closure_report", "json", closure.to_json());

  auto groups = run.reader.read_tail(0);
  std::set<uint32_t> offending = offending_steps(groups, run.manifest, closure.expanded);
  // empty closure: replay a real tail anyway (the CI-style equality check)
  uint32_t min_step = offending.empty() ? run.cfg.total_steps - 1 : *offending.begin();
  const SavedCheckpoint* chosen = nullptr;
  for (const SavedCheckpoint& c : run.checkpoints) {
    if (c.step <= min_step && (chosen == nullptr || c.step > chosen->step)) chosen = &c;
  }
  if (chosen == nullptr) throw PreconditionError("replay: no usable checkpoint");
  std::cout << "replaying from checkpoint step " << chosen->step << " with closure of "
            << closure.expanded.size() << " ids\n";
  LoadedCheckpoint ck = checkpoint_load(chosen->path, run.cfg.config_digest_hex());
  auto tail = run.reader.read_tail(static_cast<uint32_t>(ck.state.opt.step));
  std::string digest = run.reader.combined_sha256_hex();
  ReplayOutcome replay = replay_filter(ck.state, tail, run.manifest, closure.expanded, run.corpus,
                                       run.cfg, digest);
  ReplayOutcome oracle = oracle_retain_train(ck.state, tail, run.manifest, closure.expanded,
                                             run.corpus, run.cfg, digest);
  EqualityProof proof = prove_equality(oracle, replay, digest);
  std::string path = ws.write_artifact(ws.reports_dir(), "equality_proof", "json",
                                       proof.to_json());
  std::cout << "equality proof: " << proof.status << " (" << path << ")\n";
  std::cout << "model hash: " << proof.model_hash_replay.substr(0, 16) << "...\n";
  return proof.pass() ? kExitOk : kExitAuditFail;
}

int cmd_revert(const std::string& root, uint32_t u) {
  RunWorkspace ws(root);
  LoadedRun run = load_run(ws);
  nlohmann::json meta = nlohmann::json::parse(ws.load_run_meta());
  size_t window = meta.value("ring_window", 0);
  if (window == 0) throw PreconditionError("revert: run has no ring buffer");
  RingBuffer ring = load_ring(ws, window);
  const SavedCheckpoint& final_ck = run.checkpoints.back();
  LoadedCheckpoint ck = checkpoint_load(final_ck.path, run.cfg.config_digest_hex());
  TrainState state = ck.state;
  revert(state, ring, u);
  CheckpointMeta out_meta;
  out_meta.config_digest_hex = run.cfg.config_digest_hex();
  out_meta.opt_step = state.opt.step;
  Digest256 h = state_hash(state.params, state.opt);
  char name[96];
  std::snprintf(name, sizeof name, "ckpt_revert%06u_%s.bin",
                static_cast<uint32_t>(state.opt.step), to_hex(h.data(), 4).c_str());
  std::string out_path = ws.checkpoints_dir() + "/" + name;
  checkpoint_save(out_path, state.params, state.opt, out_meta);
  std::cout << "reverted " << u << " steps to opt_step " << state.opt.step << "\n";
  std::cout << "state hash " << to_hex(h.data(), 8) << " -> " << out_path << "\n";
  return kExitOk;
}

int cmd_budget(double params, double dtype_bytes, uint32_t n, double ratio, uint32_t k,
               double t_step, uint64_t microbatches, bool as_json) {
  BudgetTable t = budget_report(params, dtype_bytes, n, ratio, k, t_step, microbatches);
  std::cout << (as_json ? t.to_json() : t.render_text());
  return kExitOk;
}

int cmd_ci_gate(const std::string& root, uint32_t steps, bool inject_nondet, bool truncate) {
  RunWorkspace ws(root);
  Corpus corpus = ws.load_corpus();
  TrainConfig cfg = config_from_flags(steps, 2, 8, 17, 1e-3f, false);
  CiGateOptions opts;
  opts.steps = steps;
  opts.inject_nondeterminism = inject_nondet;
  opts.truncate_wal = truncate;
  std::string detail;
  int stage = ci_gate(corpus, cfg, ws.root() + "/ci_gate", opts, &detail);
  if (stage == 0) {
    std::cout << "ci gate: PASS (train-train equality, checkpoint-replay equality, "
                 "WAL integrity)\n";
    return kExitOk;
  }
  std::cout << "ci gate: FAIL at stage " << stage << " (" << detail << ")\n";
  std::cout << "forgetting is blocked until the gate passes\n";
  return stage;
}

int cmd_audit(const std::string& root, const std::string& request_path, double baseline_ppl,
              const AuditThresholds& thresholds, const ClosureKnobs& knobs) {
  RunWorkspace ws(root);
  LoadedRun run = load_run(ws);
  std::set<uint64_t> requested;
  if (!request_path.empty())
    requested = ForgetRequest::from_json(read_file(request_path)).sample_ids;
  else
    requested.insert(run.meta.forget_cohort.begin(), run.meta.forget_cohort.end());
  ForgetClosure closure = expand_request(run, requested, knobs);

  LoadedCheckpoint ck = checkpoint_load(run.checkpoints.back().path,
                                        run.cfg.config_digest_hex());
  AuditContext ctx;
  ctx.corpus = &run.corpus;
  for (uint64_t id : closure.expanded) ctx.forget_ids.push_back(id);
  std::vector<uint64_t> retain_pool;
  for (uint64_t id : run.corpus.all_ids()) {
    if (!closure.expanded.count(id)) retain_pool.push_back(id);
  }
  ctx.control_ids = match_controls_by_length(run.corpus, ctx.forget_ids, retain_pool);
  for (size_t i = 0; i < retain_pool.size() && ctx.retain_eval_ids.size() < 128; i += 7)
    ctx.retain_eval_ids.push_back(retain_pool[i]);
  for (const CanarySpec& c : run.meta.canaries) {
    if (closure.expanded.count(c.doc_id)) ctx.canaries.push_back(c);
  }
  for (const SecretSpec& s : run.meta.secrets) {
    if (!closure.expanded.count(s.doc_id)) continue;
    const Document& d = run.corpus.doc(s.doc_id);
    ExtractionItem item;
    item.prompt.assign(d.bytes.begin(), d.bytes.begin() + s.prompt_len);
    item.suffix.assign(d.bytes.begin() + s.prompt_len,
                       d.bytes.begin() + s.prompt_len + s.suffix_len);
    ctx.extraction_items.push_back(std::move(item));
  }
  ctx.baseline_retain_ppl = baseline_ppl;
  ctx.model_id = to_hex(model_hash(ck.state.params).data(), 8);
  AuditReport report = run_audit_suite(ck.state.params, ctx, thresholds);
  std::string path = ws.write_artifact(ws.reports_dir(), "audit_report", "json",
                                       report.to_json());
  for (const AuditTestResult& t : report.tests) {
    std::cout << (t.pass ? "[PASS] " : "[FAIL] ") << t.name << " = " << t.metric
              << (t.applicable ? "" : " (not applicable)")
              << (t.detail.empty() ? "" : " — " + t.detail) << "\n";
  }
  std::cout << "overall: " << (report.overall_pass ? "PASS" : "FAIL") << " (" << path << ")\n";
  return report.overall_pass ? kExitOk : kExitAuditFail;
}

int cmd_train_cohort(const std::string& root, const std::string& ids_csv, uint32_t steps,
                     uint64_t seed) {
  RunWorkspace ws(root);
  LoadedRun run = load_run(ws);
  std::vector<uint64_t> cohort_ids;
  std::stringstream ss(ids_csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) cohort_ids.push_back(std::stoull(tok));
  if (cohort_ids.empty()) throw PreconditionError("train-cohort: no sample ids given");

  LoadedCheckpoint ck = checkpoint_load(run.checkpoints.back().path,
                                        run.cfg.config_digest_hex());
  AdapterRegistry registry = load_registry(ws);
  CohortTrainConfig ccfg;
  ccfg.steps = steps;
  ccfg.seed = seed;
  Adapter ad = train_cohort(ck.state.params, run.corpus, cohort_ids, ccfg, run.cfg, &registry);
  char name[64];
  std::snprintf(name, sizeof name, "cohort_%04llu.bin",
                static_cast<unsigned long long>(ad.cohort_id));
  fs::create_directories(ws.adapters_dir());
  ad.save(ws.adapters_dir() + "/" + name);
  std::cout << "trained cohort " << ad.cohort_id << " on " << cohort_ids.size()
            << " samples (base frozen, hash checked)\n";
  return kExitOk;
}

int cmd_forget(const std::string& root, const std::string& request_path,
               const std::string& key_hex, const AuditThresholds& thresholds,
               const ClosureKnobs& knobs) {
  RunWorkspace ws(root);
  std::vector<uint8_t> key = parse_key(key_hex);
  warn_unkeyed(key);
  LoadedRun run = load_run(ws);
  ForgetRequest req = ForgetRequest::from_json(read_file(request_path));
  ForgetClosure closure = expand_request(run, req.sample_ids, knobs);
  ws.write_artifact(ws.reports_dir(), "closure_report", "json", closure.to_json());

  nlohmann::json meta = nlohmann::json::parse(ws.load_run_meta());
  AdapterRegistry registry = load_registry(ws);
  RingBuffer ring = load_ring(ws, meta.value("ring_window", 0));

  LoadedCheckpoint final_ck = checkpoint_load(run.checkpoints.back().path,
                                              run.cfg.config_digest_hex());
  TrainState serving = final_ck.state;

  auto groups = run.reader.read_tail(0);
  RoutingState rs;
  rs.ring_window = static_cast<uint32_t>(ring.size());
  rs.current_step = run.cfg.total_steps;
  for (const SavedCheckpoint& c : run.checkpoints) rs.checkpoint_steps.push_back(c.step);
  rs.offending_steps = offending_steps(groups, run.manifest, closure.expanded);
  rs.urgency = req.urgency;
  rs.confined_to_cohorts = !closure.expanded.empty();
  for (uint64_t id : closure.expanded) {
    auto cohort = registry.cohort_of_sample(id);
    if (!cohort.has_value()) {
      rs.confined_to_cohorts = false;
      break;
    }
    if (std::find(rs.affected_cohorts.begin(), rs.affected_cohorts.end(), *cohort) ==
        rs.affected_cohorts.end())
      rs.affected_cohorts.push_back(*cohort);
  }

  PlannedAction action = route(closure.expanded, rs);
  std::cout << "routing: " << path_name(action.path) << "\n";

  ControllerEnv env;
  env.corpus = &run.corpus;
  env.corpus_meta = &run.meta;
  env.wal = &run.reader;
  env.id_manifest = &run.manifest;
  env.train_cfg = run.cfg;
  env.checkpoints = run.checkpoints;
  env.serving = &serving;
  env.adapter_base = &final_ck.state.params;
  env.registry = &registry;
  env.ring = &ring;
  ManifestLog log(ws.manifest_log_path(), key.empty() ? std::vector<uint8_t>{'t', 'o', 'y'} : key);
  env.manifest_log = &log;
  env.thresholds = thresholds;
  std::map<std::string, std::pair<std::string, std::string>> artifacts;
  env.artifact_store = &artifacts;

  ExecuteResult result = execute(req, closure, action, env);
  for (const auto& [digest, tagged] : artifacts) {
    ws.write_artifact(ws.reports_dir(), tagged.first, "json", tagged.second);
  }
  if (!result.duplicate && result.entry.servable) {
    // persist the post-action serving state
    CheckpointMeta out_meta;
    out_meta.config_digest_hex = run.cfg.config_digest_hex();
    out_meta.opt_step = serving.opt.step;
    Digest256 h = state_hash(serving.params, serving.opt);
    char name[96];
    std::snprintf(name, sizeof name, "ckpt_unlearned%06u_%s.bin",
                  static_cast<uint32_t>(serving.opt.step), to_hex(h.data(), 4).c_str());
    std::string out_path = ws.checkpoints_dir() + "/" + name;
    checkpoint_save(out_path, serving.params, serving.opt, out_meta);
    std::cout << "serving state -> " << out_path << "\n";
  }
  if (result.duplicate) {
    std::cout << "duplicate request: returning the original manifest entry seq "
              << result.entry.seq << "\n";
  }
  std::cout << "manifest entry seq " << result.entry.seq << " path "
            << path_name(result.entry.path) << (result.entry.servable ? " (servable)" : "")
            << "\n";
  switch (result.entry.outcome) {
    case Outcome::Served:
    case Outcome::Trivial:
      return kExitOk;
    case Outcome::Escalated:
      return kExitAuditFail;
    case Outcome::Refused:
      return kExitRefused;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deterministic-training and exact-unlearning engine"};
  app.require_subcommand(1);

  std::string root = "workspace";
  app.add_option("--workspace,-w", root, "run workspace directory")->capture_default_str();

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
  uint64_t size = 2009;
  double dup_rate = 0.10;
  int canaries = 4, canary_bits = 12;
  uint64_t seed = 1;
  gen->add_option("--size", size, "total samples")->capture_default_str();
  gen->add_option("--dup-rate", dup_rate, "near-duplicate family rate")->capture_default_str();
  gen->add_option("--canaries", canaries, "planted canaries")->capture_default_str();
  gen->add_option("--canary-bits", canary_bits, "candidate-space bits per canary")
      ->capture_default_str();
  gen->add_option("--seed", seed, "generator seed")->capture_default_str();

  // train
  auto* tr = app.add_subcommand("train", "deterministic training run with WAL");
  uint32_t steps = 200, accum = 2, mb_size = 8, ckpt_interval = 50, ring_window = 16;
  uint64_t train_seed = 42;
  float lr = 1e-3f;
  bool mean = false;
  std::string key_hex;
  tr->add_option("--steps", steps)->capture_default_str();
  tr->add_option("--accum", accum)->capture_default_str();
  tr->add_option("--mb-size", mb_size)->capture_default_str();
  tr->add_option("--seed", train_seed)->capture_default_str();
  tr->add_option("--lr", lr)->capture_default_str();
  tr->add_flag("--mean", mean, "mean loss reduction (breaks exact replay; for demos)");
  tr->add_option("--ckpt-interval", ckpt_interval)->capture_default_str();
  tr->add_option("--ring-window", ring_window, "per-step delta window (0 disables)")
      ->capture_default_str();
  tr->add_option("--hmac-key", key_hex, "hex key for WAL hashes/segments");
  bool exclude_cohort = false;
  tr->add_flag("--exclude-cohort", exclude_cohort,
               "keep the corpus cohort out of the base run (cohort lives in adapters)");

  // verify-wal
  auto* vw = app.add_subcommand("verify-wal", "WAL integrity scan");
  vw->add_option("--hmac-key", key_hex, "hex key for WAL hashes/segments");

  // replay
  auto* rp = app.add_subcommand("replay", "filtered replay + oracle + equality proof");
  std::string request_path;
  rp->add_option("--request", request_path, "forget request JSON (omit for empty closure)");
  rp->add_option("--hmac-key", key_hex, "hex key");

  // revert
  auto* rv = app.add_subcommand("revert", "exact revert of recent steps via ring patches");
  uint32_t revert_u = 1;
  rv->add_option("--u", revert_u, "steps to revert")->required();

  // forget
  auto* fg = app.add_subcommand("forget", "route and execute a forget request");
  fg->add_option("--request", request_path, "forget request JSON")->required();
  fg->add_option("--hmac-key", key_hex, "hex key");

  // audit
  auto* au = app.add_subcommand("audit", "leakage/utility audit suite on the final state");
  double baseline_ppl = 0.0;
  au->add_option("--request", request_path, "forget request JSON (default: corpus cohort)");
  au->add_option("--baseline-ppl", baseline_ppl, "utility reference perplexity");

  // closure admission thresholds (shared by replay/forget/audit)
  ClosureKnobs knobs;
  for (CLI::App* sub : {rp, fg, au}) {
    sub->add_option("--tau-h", knobs.tau_hamming, "simhash hamming threshold")
        ->capture_default_str();
    sub->add_option("--tau-sim", knobs.tau_jaccard, "shingle-jaccard threshold")
        ->capture_default_str();
  }

  // audit gate thresholds (policy knobs shared by forget/audit)
  AuditThresholds thresholds;
  for (CLI::App* sub : {fg, au}) {
    sub->add_option("--mia-low", thresholds.mia_low)->capture_default_str();
    sub->add_option("--mia-high", thresholds.mia_high)->capture_default_str();
    sub->add_option("--exposure-max", thresholds.exposure_max, "E*, bits")
        ->capture_default_str();
    sub->add_option("--extraction-max", thresholds.extraction_max, "p*")->capture_default_str();
    sub->add_option("--utility-band", thresholds.utility_band_pct, "X, percent")
        ->capture_default_str();
    sub->add_option("--fuzzy-max", thresholds.fuzzy_recall_max)->capture_default_str();
  }

  // ci-gate
  auto* ci = app.add_subcommand("ci-gate", "determinism/replay gate (blocks forgetting)");
  uint32_t ci_steps = 100;
  bool inject_nondet = false, truncate_wal = false;
  ci->add_option("--steps", ci_steps)->capture_default_str();
  ci->add_flag("--inject-nondeterminism", inject_nondet, "fault stub for stage 1");
  ci->add_flag("--truncate-wal", truncate_wal, "fault stub for stage 3");

  // budget
  auto* bu = app.add_subcommand("budget", "storage/latency budget calculator");
  double params = 1.3e9, dtype_bytes = 2.0, ratio = 0.70, t_step = 1.0;
  uint32_t budget_n = 16, budget_k = 1000;
  uint64_t microbatches = 0;
  bool as_json = false;
  bu->add_option("--params", params)->capture_default_str();
  bu->add_option("--dtype-bytes", dtype_bytes)->capture_default_str();
  bu->add_option("--n", budget_n, "ring window")->capture_default_str();
  bu->add_option("--ratio", ratio, "compression ratio")->capture_default_str();
  bu->add_option("--k", budget_k, "checkpoint interval")->capture_default_str();
  bu->add_option("--t-step", t_step, "seconds per step")->capture_default_str();
  bu->add_option("--microbatches", microbatches)->capture_default_str();
  bu->add_flag("--json", as_json);

  // train-cohort
  auto* tc = app.add_subcommand("train-cohort", "train a cohort adapter on the frozen base");
  std::string cohort_ids_csv;
  uint32_t cohort_steps = 20;
  uint64_t cohort_seed = 7;
  tc->add_option("--ids", cohort_ids_csv, "comma-separated sample ids")->required();
  tc->add_option("--steps", cohort_steps)->capture_default_str();
  tc->add_option("--seed", cohort_seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_corpus(root, size, dup_rate, canaries, canary_bits, seed);
    if (tr->parsed())
      return cmd_train(root, steps, accum, mb_size, train_seed, lr, mean, ckpt_interval,
                       ring_window, key_hex, exclude_cohort);
    if (vw->parsed()) return cmd_verify_wal(root, key_hex);
    if (rp->parsed()) return cmd_replay(root, request_path, key_hex, knobs);
    if (rv->parsed()) return cmd_revert(root, revert_u);
    if (fg->parsed()) return cmd_forget(root, request_path, key_hex, thresholds, knobs);
    if (au->parsed()) return cmd_audit(root, request_path, baseline_ppl, thresholds, knobs);
    if (ci->parsed()) return cmd_ci_gate(root, ci_steps, inject_nondet, truncate_wal);
    if (bu->parsed())
      return cmd_budget(params, dtype_bytes, budget_n, ratio, budget_k, t_step, microbatches,
                        as_json);
    if (tc->parsed()) return cmd_train_cohort(root, cohort_ids_csv, cohort_steps, cohort_seed);
  } catch (const PinDriftError& e) {
    std::cerr << "refused (pin drift): " << e.what() << "\n";
    return kExitRefused;
  } catch (const PreconditionError& e) {
    std::cerr << "refused (precondition): " << e.what() << "\n";
    return kExitRefused;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity failure: " << e.what() << "\n";
    return kExitIntegrityFail;
  } catch (const CorruptionError& e) {
    std::cerr << "corruption: " << e.what() << "\n";
    return kExitIntegrityFail;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIntegrityFail;
  }
  return kExitOk;
}
