#include "unlearn/controller.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "unlearn/bytes.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/hotpath.hpp"

namespace fs = std::filesystem;

namespace unlearn {

std::array<uint8_t, 16> ForgetRequest::id_from_string(const std::string& s) {
  Digest256 d = sha256(s);
  std::array<uint8_t, 16> out{};
  std::copy(d.begin(), d.begin() + 16, out.begin());
  return out;
}

std::string ForgetRequest::to_json() const {
  nlohmann::json j;
  j["request_id"] = to_hex(request_id.data(), request_id.size());
  j["sample_ids"] = std::vector<uint64_t>(sample_ids.begin(), sample_ids.end());
  j["urgency"] = urgency == Urgency::Urgent ? "URGENT" : "NORMAL";
  j["submitted_at"] = submitted_at;
  return j.dump(2);
}

ForgetRequest ForgetRequest::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  ForgetRequest r;
  std::vector<uint8_t> id = from_hex(j.at("request_id"));
  id.resize(16, 0);
  std::copy(id.begin(), id.end(), r.request_id.begin());
  for (uint64_t s : j.at("sample_ids")) r.sample_ids.insert(s);
  r.urgency = j.at("urgency") == "URGENT" ? Urgency::Urgent : Urgency::Normal;
  r.submitted_at = j.value("submitted_at", int64_t{0});
  return r;
}

std::string path_name(Path p) {
  switch (p) {
    case Path::AdapterDelete: return "ADAPTER_DELETE";
    case Path::RecentRevert: return "RECENT_REVERT";
    case Path::HotPath: return "HOT_PATH";
    case Path::ExactReplay: return "EXACT_REPLAY";
    case Path::NoOp: return "NO_OP";
  }
  return "?";
}

std::set<uint32_t> offending_steps(const std::vector<StepGroup>& groups, const IdManifest& manifest,
                                   const std::set<uint64_t>& closure) {
  std::set<uint32_t> out;
  for (const StepGroup& g : groups) {
    for (const WalRecord& r : g.records) {
      for (uint64_t id : manifest.lookup(r.hash64)) {
        if (closure.count(id)) {
          out.insert(g.opt_step);
          break;
        }
      }
      if (out.count(g.opt_step)) break;
    }
  }
  return out;
}

PlannedAction route(const std::set<uint64_t>& closure_ids, const RoutingState& state) {
  PlannedAction action;
  if (closure_ids.empty()) {
    action.path = Path::NoOp;
    return action;
  }
  if (state.confined_to_cohorts) {
    action.path = Path::AdapterDelete;
    action.cohorts = state.affected_cohorts;
    return action;
  }
  const auto& steps = state.offending_steps;
  if (!steps.empty() && state.ring_window > 0) {
    uint32_t window_start =
        state.current_step >= state.ring_window ? state.current_step - state.ring_window : 0;
    uint32_t min_step = *steps.begin();
    uint32_t max_step = *steps.rbegin();
    // revert only when the whole offending range sits inside the window;
    // a request spanning the boundary is never partially reverted
    if (max_step >= window_start && min_step >= window_start) {
      action.path = Path::RecentRevert;
      action.revert_u = state.current_step - min_step;
      return action;
    }
  }
  if (state.urgency == Urgency::Urgent) {
    action.path = Path::HotPath;
    return action;
  }
  action.path = Path::ExactReplay;
  uint32_t min_offending = steps.empty() ? state.current_step : *steps.begin();
  uint32_t best = 0;
  for (uint32_t ck : state.checkpoint_steps) {
    if (ck <= min_offending && ck >= best) best = ck;
  }
  action.replay_from_step = best;
  return action;
}

std::array<uint8_t, 32> closure_digest_of(const std::set<uint64_t>& ids) {
  std::vector<uint8_t> bytes;
  for (uint64_t id : ids) put_u64(bytes, id);
  Digest256 d = sha256(bytes);
  std::array<uint8_t, 32> out{};
  std::copy(d.begin(), d.end(), out.begin());
  return out;
}

std::vector<uint8_t> ManifestEntry::canonical_bytes(bool include_tag) const {
  std::vector<uint8_t> out;
  put_u64(out, seq);
  out.insert(out.end(), prev_entry_hash.begin(), prev_entry_hash.end());
  out.insert(out.end(), request_id.begin(), request_id.end());
  out.push_back(static_cast<uint8_t>(urgency));
  put_u64(out, static_cast<uint64_t>(submitted_at));
  put_u32(out, static_cast<uint32_t>(requested_ids.size()));
  for (uint64_t id : requested_ids) put_u64(out, id);
  out.insert(out.end(), closure_digest.begin(), closure_digest.end());
  out.push_back(static_cast<uint8_t>(path));
  out.push_back(static_cast<uint8_t>(outcome));
  put_u64(out, static_cast<uint64_t>(escalated_from_seq));
  put_u32(out, static_cast<uint32_t>(artifacts.size()));
  for (const ArtifactRef& a : artifacts) {
    put_u16(out, static_cast<uint16_t>(a.tag.size()));
    out.insert(out.end(), a.tag.begin(), a.tag.end());
    std::vector<uint8_t> h = from_hex(a.sha256_hex);
    h.resize(32, 0);
    out.insert(out.end(), h.begin(), h.end());
  }
  auto put_f64 = [&out](double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
  };
  put_f64(threshold_exposure);
  put_f64(threshold_extraction);
  put_f64(threshold_utility);
  out.push_back(servable ? 1 : 0);
  if (include_tag) out.insert(out.end(), hmac_tag.begin(), hmac_tag.end());
  return out;
}

ManifestLog::ManifestLog(std::string path, std::vector<uint8_t> hmac_key)
    : path_(std::move(path)), hmac_key_(std::move(hmac_key)) {
  if (fs::exists(path_)) load();
}

namespace {

ManifestEntry parse_entry(const uint8_t* p, size_t len) {
  ManifestEntry e;
  size_t off = 0;
  auto need = [&](size_t n) {
    if (off + n > len) throw CorruptionError("manifest entry truncated");
  };
  need(8);
  e.seq = get_u64(p + off);
  off += 8;
  need(32);
  std::copy(p + off, p + off + 32, e.prev_entry_hash.begin());
  off += 32;
  need(16);
  std::copy(p + off, p + off + 16, e.request_id.begin());
  off += 16;
  need(1);
  e.urgency = static_cast<Urgency>(p[off++]);
  need(8);
  e.submitted_at = static_cast<int64_t>(get_u64(p + off));
  off += 8;
  need(4);
  uint32_t nids = get_u32(p + off);
  off += 4;
  need(8ull * nids);
  for (uint32_t i = 0; i < nids; ++i) {
    e.requested_ids.push_back(get_u64(p + off));
    off += 8;
  }
  need(32);
  std::copy(p + off, p + off + 32, e.closure_digest.begin());
  off += 32;
  need(2);
  e.path = static_cast<Path>(p[off++]);
  e.outcome = static_cast<Outcome>(p[off++]);
  need(8);
  e.escalated_from_seq = static_cast<int64_t>(get_u64(p + off));
  off += 8;
  need(4);
  uint32_t narts = get_u32(p + off);
  off += 4;
  for (uint32_t i = 0; i < narts; ++i) {
    need(2);
    uint16_t tag_len = get_u16(p + off);
    off += 2;
    need(tag_len + 32);
    ArtifactRef a;
    a.tag.assign(reinterpret_cast<const char*>(p + off), tag_len);
    off += tag_len;
    a.sha256_hex = to_hex(p + off, 32);
    off += 32;
    e.artifacts.push_back(std::move(a));
  }
  auto get_f64 = [&](double& v) {
    need(8);
    uint64_t bits = get_u64(p + off);
    off += 8;
    std::memcpy(&v, &bits, 8);
  };
  get_f64(e.threshold_exposure);
  get_f64(e.threshold_extraction);
  get_f64(e.threshold_utility);
  need(1);
  e.servable = p[off++] != 0;
  need(32);
  std::copy(p + off, p + off + 32, e.hmac_tag.begin());
  off += 32;
  if (off != len) throw CorruptionError("manifest entry has trailing bytes");
  return e;
}

}  // namespace

void ManifestLog::load() {
  std::ifstream f(path_, std::ios::binary);
  if (!f) throw IoError("ManifestLog: cannot open " + path_);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  size_t off = 0;
  while (off + 4 <= buf.size()) {
    uint32_t len = get_u32(buf.data() + off);
    off += 4;
    if (off + len > buf.size()) throw CorruptionError("ManifestLog: truncated entry");
    entries_.push_back(parse_entry(buf.data() + off, len));
    off += len;
  }
}

ManifestEntry ManifestLog::append(ManifestEntry entry) {
  entry.seq = entries_.size();
  if (entries_.empty()) {
    entry.prev_entry_hash.fill(0);
  } else {
    std::vector<uint8_t> prev_bytes = entries_.back().canonical_bytes(true);
    Digest256 d = sha256(prev_bytes);
    std::copy(d.begin(), d.end(), entry.prev_entry_hash.begin());
  }
  std::vector<uint8_t> unsigned_bytes = entry.canonical_bytes(false);
  Digest256 tag = hmac_sha256(hmac_key_, unsigned_bytes);
  std::copy(tag.begin(), tag.end(), entry.hmac_tag.begin());

  std::vector<uint8_t> full = entry.canonical_bytes(true);
  std::ofstream f(path_, std::ios::binary | std::ios::app);
  if (!f) throw IoError("ManifestLog: cannot append " + path_);
  std::vector<uint8_t> framed;
  put_u32(framed, static_cast<uint32_t>(full.size()));
  framed.insert(framed.end(), full.begin(), full.end());
  f.write(reinterpret_cast<const char*>(framed.data()), static_cast<std::streamsize>(framed.size()));
  f.flush();
  if (!f) throw IoError("ManifestLog: append failed " + path_);
  entries_.push_back(entry);
  return entry;
}

std::optional<ManifestEntry> ManifestLog::find_request(
    const std::array<uint8_t, 16>& request_id) const {
  for (const ManifestEntry& e : entries_) {
    if (e.request_id == request_id) return e;
  }
  return std::nullopt;
}

ManifestLog::ChainStatus ManifestLog::verify_chain() const {
  ChainStatus status;
  std::array<uint8_t, 32> expect_prev{};
  for (const ManifestEntry& e : entries_) {
    if (e.prev_entry_hash != expect_prev) {
      status.ok = false;
      status.first_bad_seq = static_cast<int64_t>(e.seq);
      status.reason = "prev-hash link broken";
      return status;
    }
    Digest256 tag = hmac_sha256(hmac_key_, e.canonical_bytes(false));
    if (!std::equal(tag.begin(), tag.end(), e.hmac_tag.begin())) {
      status.ok = false;
      status.first_bad_seq = static_cast<int64_t>(e.seq);
      status.reason = "HMAC tag mismatch";
      return status;
    }
    Digest256 h = sha256(e.canonical_bytes(true));
    std::copy(h.begin(), h.end(), expect_prev.begin());
  }
  return status;
}

ManifestLog::ChainStatus ManifestLog::verify_chain_file(const std::string& path,
                                                        const std::vector<uint8_t>& hmac_key) {
  ChainStatus status;
  if (!fs::exists(path)) return status;  // empty log is ok
  try {
    ManifestLog log(path, hmac_key);
    return log.verify_chain();
  } catch (const Error& e) {
    status.ok = false;
    status.first_bad_seq = -1;
    status.reason = e.what();
    return status;
  }
}

namespace {

ArtifactRef store_artifact(ControllerEnv& env, const std::string& tag, const std::string& body) {
  ArtifactRef ref;
  ref.tag = tag;
  ref.sha256_hex = sha256_hex(body.data(), body.size());
  if (env.artifact_store != nullptr) (*env.artifact_store)[ref.sha256_hex] = {tag, body};
  return ref;
}

AuditContext build_audit_context(const ControllerEnv& env, const ForgetClosure& closure) {
  AuditContext ctx;
  ctx.corpus = env.corpus;
  ctx.bootstrap_seed = env.audit_seed;
  for (uint64_t id : closure.expanded) ctx.forget_ids.push_back(id);
  std::vector<uint64_t> retain_pool;
  for (uint64_t id : env.corpus->all_ids()) {
    if (!closure.expanded.count(id)) retain_pool.push_back(id);
  }
  ctx.control_ids = match_controls_by_length(*env.corpus, ctx.forget_ids, retain_pool);
  // fixed-size retain eval slice, deterministic
  for (size_t i = 0; i < retain_pool.size() && ctx.retain_eval_ids.size() < 128; i += 7) {
    ctx.retain_eval_ids.push_back(retain_pool[i]);
  }
  if (env.corpus_meta != nullptr) {
    for (const CanarySpec& c : env.corpus_meta->canaries) {
      if (closure.expanded.count(c.doc_id)) ctx.canaries.push_back(c);
    }
    for (const SecretSpec& s : env.corpus_meta->secrets) {
      if (!closure.expanded.count(s.doc_id)) continue;
      const Document& d = env.corpus->doc(s.doc_id);
      ExtractionItem item;
      item.prompt.assign(d.bytes.begin(), d.bytes.begin() + s.prompt_len);
      item.suffix.assign(d.bytes.begin() + s.prompt_len,
                         d.bytes.begin() + s.prompt_len + s.suffix_len);
      ctx.extraction_items.push_back(std::move(item));
    }
  }
  // fuzzy variants: provenance targets that carry a reserved marker byte
  for (const ProvenanceEdge& e : closure.edges) {
    const Document& d = env.corpus->doc(e.to);
    for (size_t i = 0; i + 1 < d.bytes.size(); ++i) {
      if (d.bytes[i] >= 192) {
        ExtractionItem item;
        item.prompt.assign(d.bytes.begin(), d.bytes.begin() + i + 1);
        item.suffix.assign(d.bytes.begin() + i + 1, d.bytes.end());
        ctx.fuzzy_variant_items.push_back(std::move(item));
        break;
      }
    }
  }
  return ctx;
}

}  // namespace

ExecuteResult execute(const ForgetRequest& request, const ForgetClosure& closure,
                      const PlannedAction& action, ControllerEnv& env) {
  if (env.manifest_log == nullptr || env.corpus == nullptr || env.serving == nullptr)
    throw PreconditionError("execute: incomplete controller environment");

  ExecuteResult result;
  if (auto existing = env.manifest_log->find_request(request.request_id)) {
    result.entry = *existing;
    result.duplicate = true;
    return result;
  }
  ManifestLog::ChainStatus chain = env.manifest_log->verify_chain();
  if (!chain.ok)
    throw IntegrityError("execute: manifest chain verification failed at seq " +
                         std::to_string(chain.first_bad_seq));

  ManifestEntry base_entry;
  base_entry.request_id = request.request_id;
  base_entry.urgency = request.urgency;
  base_entry.submitted_at = request.submitted_at;
  base_entry.requested_ids.assign(request.sample_ids.begin(), request.sample_ids.end());
  base_entry.closure_digest = closure_digest_of(closure.expanded);
  base_entry.threshold_exposure = env.thresholds.exposure_max;
  base_entry.threshold_extraction = env.thresholds.extraction_max;
  base_entry.threshold_utility = env.thresholds.utility_band_pct;

  if (action.path == Path::NoOp) {
    base_entry.path = Path::NoOp;
    base_entry.outcome = Outcome::Trivial;
    base_entry.servable = true;
    result.entry = env.manifest_log->append(base_entry);
    result.all.push_back(result.entry);
    return result;
  }

  double baseline_ppl = 0.0;
  {
    AuditContext probe = build_audit_context(env, closure);
    baseline_ppl = retain_ppl(env.serving->params, *env.corpus, probe.retain_eval_ids);
  }

  auto run_audits = [&](ManifestEntry& entry) {
    AuditContext ctx = build_audit_context(env, closure);
    ctx.baseline_retain_ppl = baseline_ppl;
    ctx.model_id = to_hex(model_hash(env.serving->params).data(), 8);
    AuditReport report = run_audit_suite(env.serving->params, ctx, env.thresholds);
    entry.artifacts.push_back(store_artifact(env, "audit_report", report.to_json()));
    entry.servable = report.overall_pass;
    return report.overall_pass;
  };

  auto finish = [&](ManifestEntry entry, bool audits_ok) {
    entry.outcome = audits_ok ? Outcome::Served : Outcome::Escalated;
    ManifestEntry stored = env.manifest_log->append(entry);
    result.all.push_back(stored);
    return stored;
  };

  auto min_offending_step = [&]() -> uint32_t {
    std::set<uint32_t> steps = offending_steps(env.wal->read_tail(0), *env.id_manifest,
                                               closure.expanded);
    return steps.empty() ? 0 : *steps.begin();
  };

  auto run_exact_replay = [&](int64_t escalated_from, uint32_t from_step) -> ManifestEntry {
    ManifestEntry entry = base_entry;
    entry.path = Path::ExactReplay;
    entry.escalated_from_seq = escalated_from;
    // nearest checkpoint <= from_step
    const SavedCheckpoint* chosen = nullptr;
    for (const SavedCheckpoint& c : env.checkpoints) {
      if (c.step <= from_step && (chosen == nullptr || c.step > chosen->step)) chosen = &c;
    }
    if (chosen == nullptr) throw PreconditionError("execute: no checkpoint at or before step " +
                                                   std::to_string(from_step));
    LoadedCheckpoint ck = checkpoint_load(chosen->path, env.train_cfg.config_digest_hex());
    std::vector<StepGroup> tail = env.wal->read_tail(static_cast<uint32_t>(ck.state.opt.step));
    std::string wal_digest = env.wal->combined_sha256_hex();
    ReplayOutcome replay = replay_filter(ck.state, tail, *env.id_manifest, closure.expanded,
                                         *env.corpus, env.train_cfg, wal_digest);
    ReplayOutcome oracle = oracle_retain_train(ck.state, tail, *env.id_manifest, closure.expanded,
                                               *env.corpus, env.train_cfg, wal_digest);
    EqualityProof proof = prove_equality(oracle, replay, wal_digest);
    entry.artifacts.push_back(store_artifact(env, "equality_proof", proof.to_json()));
    if (!proof.pass()) {
      entry.outcome = Outcome::Refused;
      entry.servable = false;
      ManifestEntry stored = env.manifest_log->append(entry);
      result.all.push_back(stored);
      return stored;
    }
    *env.serving = replay.state;
    bool ok = run_audits(entry);
    return finish(entry, ok);
  };

  switch (action.path) {
    case Path::AdapterDelete: {
      ManifestEntry entry = base_entry;
      entry.path = Path::AdapterDelete;
      if (env.registry == nullptr || env.adapter_base == nullptr)
        throw PreconditionError("execute: adapter path without registry");
      try {
        for (uint64_t cohort : action.cohorts) env.registry->delete_adapter(cohort);
      } catch (const EscalateToReplay& e) {
        entry.outcome = Outcome::Escalated;
        entry.servable = false;
        entry.artifacts.push_back(store_artifact(env, "escalation_reason", e.what()));
        ManifestEntry stored = env.manifest_log->append(entry);
        result.all.push_back(stored);
        result.entry = run_exact_replay(static_cast<int64_t>(stored.seq), min_offending_step());
        return result;
      }
      env.serving->params = compose_serving(*env.adapter_base, env.registry->live_adapters());
      if (env.adapter_retain_tune_steps > 0) {
        // optional smoothing: a fresh adapter trained on retain data keeps
        // the base frozen, so cohort deletability is preserved
        AuditContext probe = build_audit_context(env, closure);
        CohortTrainConfig smooth;
        smooth.steps = env.adapter_retain_tune_steps;
        smooth.seed = env.audit_seed;
        train_cohort(*env.adapter_base, *env.corpus, probe.retain_eval_ids, smooth,
                     env.train_cfg, env.registry);
        env.serving->params = compose_serving(*env.adapter_base, env.registry->live_adapters());
      }
      bool ok = run_audits(entry);
      ManifestEntry stored = finish(entry, ok);
      if (!ok) {
        result.entry = run_exact_replay(static_cast<int64_t>(stored.seq), min_offending_step());
        return result;
      }
      result.entry = stored;
      return result;
    }
    case Path::RecentRevert: {
      ManifestEntry entry = base_entry;
      entry.path = Path::RecentRevert;
      if (env.ring == nullptr) throw PreconditionError("execute: revert path without ring");
      revert(*env.serving, *env.ring, action.revert_u);
      bool ok = run_audits(entry);
      ManifestEntry stored = finish(entry, ok);
      if (!ok) {
        result.entry = run_exact_replay(static_cast<int64_t>(stored.seq), min_offending_step());
        return result;
      }
      result.entry = stored;
      return result;
    }
    case Path::HotPath: {
      ManifestEntry entry = base_entry;
      entry.path = Path::HotPath;
      AuditContext probe = build_audit_context(env, closure);
      std::vector<uint64_t> closure_list(closure.expanded.begin(), closure.expanded.end());
      FisherDiag fisher = estimate_fisher_diag(env.serving->params, *env.corpus,
                                               probe.retain_eval_ids, 0.0);
      fisher.damping = default_damping(fisher);
      HotPathReport hp = anti_update(env.serving->params, *env.corpus, closure_list, fisher,
                                     probe.retain_eval_ids, env.hotpath);
      entry.artifacts.push_back(store_artifact(env, "hotpath_report", hp.to_json()));
      bool ok = false;
      if (hp.feasible) {
        retain_tune(*env.serving, *env.corpus, probe.retain_eval_ids,
                    env.hotpath.retain_tune_steps, env.hotpath.retain_lr, env.train_cfg,
                    env.audit_seed);
        ok = run_audits(entry);
      } else {
        entry.servable = false;
      }
      if (ok) {
        result.entry = finish(entry, true);
        return result;
      }
      // escalate to exact replay with a causal link
      entry.outcome = Outcome::Escalated;
      ManifestEntry stored = env.manifest_log->append(entry);
      result.all.push_back(stored);
      result.entry = run_exact_replay(static_cast<int64_t>(stored.seq), min_offending_step());
      return result;
    }
    case Path::ExactReplay: {
      result.entry = run_exact_replay(-1, action.replay_from_step);
      return result;
    }
    case Path::NoOp:
      break;
  }
  throw PreconditionError("execute: unreachable path");
}

int ci_gate(const Corpus& corpus, TrainConfig cfg, const std::string& scratch_dir,
            const CiGateOptions& opts, std::string* detail) {
  cfg.total_steps = opts.steps;
  fs::create_directories(scratch_dir);
  auto set_detail = [&](const std::string& s) {
    if (detail != nullptr) *detail = s;
  };

  // stage 1: train twice under identical pins, byte-identical states
  TrainHooks hooks;
  hooks.inject_nondeterminism = opts.inject_nondeterminism;
  CheckpointPolicy policy;
  policy.dir = scratch_dir + "/ci_ckpt";
  policy.interval = opts.steps / 2 == 0 ? 1 : opts.steps / 2;
  std::string wal_dir = scratch_dir + "/ci_wal";
  fs::remove_all(wal_dir);
  fs::remove_all(policy.dir);
  WalWriter wal(wal_dir, /*run_id=*/opts.steps);
  TrainRunResult run1 = train(corpus, cfg, &wal, &policy, nullptr, &hooks);
  TrainRunResult run2 = train(corpus, cfg, nullptr, nullptr, nullptr, &hooks);
  if (state_hash(run1.state.params, run1.state.opt) !=
      state_hash(run2.state.params, run2.state.opt)) {
    set_detail("stage 1: train-train byte equality failed");
    return 1;
  }

  // stage 2: unfiltered replay from the mid checkpoint equals the direct run
  const SavedCheckpoint* mid = nullptr;
  for (const SavedCheckpoint& c : run1.checkpoints) {
    if (c.step > 0 && c.step < opts.steps && (mid == nullptr || c.step > mid->step)) mid = &c;
  }
  if (mid == nullptr) {
    set_detail("stage 2: no mid-run checkpoint captured");
    return 2;
  }
  try {
    LoadedCheckpoint ck = checkpoint_load(mid->path, cfg.config_digest_hex());
    WalReader reader = WalReader::open(wal_dir);
    std::vector<StepGroup> tail = reader.read_tail(static_cast<uint32_t>(ck.state.opt.step));
    ReplayOutcome replayed = replay_filter(ck.state, tail, wal.manifest(), {}, corpus, cfg,
                                           reader.combined_sha256_hex());
    if (state_hash(replayed.state.params, replayed.state.opt) !=
        state_hash(run1.state.params, run1.state.opt)) {
      set_detail("stage 2: checkpoint-replay equality failed");
      return 2;
    }
  } catch (const Error& e) {
    set_detail(std::string("stage 2: ") + e.what());
    return 2;
  }

  // stage 3: WAL integrity scan
  if (opts.truncate_wal) {
    // fault stub: drop the last record of the last segment
    std::vector<std::string> segs = wal.segment_paths();
    std::string last = segs.back();
    auto size = fs::file_size(last);
    fs::resize_file(last, size - WalRecord::kSize);
  }
  try {
    WalReader reader = WalReader::open(wal_dir);
    IntegrityReport rep = reader.verify();
    if (!rep.ok) {
      set_detail("stage 3: " + rep.first_failure);
      return 3;
    }
  } catch (const Error& e) {
    set_detail(std::string("stage 3: ") + e.what());
    return 3;
  }
  set_detail("ok");
  return 0;
}

}  // namespace unlearn
