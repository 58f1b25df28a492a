#include "unlearn/replay.hpp"

#include <cmath>

#include <json.hpp>

#include "unlearn/bytes.hpp"
#include "unlearn/errors.hpp"

namespace unlearn {

namespace {

std::vector<uint64_t> filter_ordered(const std::vector<uint64_t>& ids,
                                     const std::set<uint64_t>& closure) {
  std::vector<uint64_t> out;
  out.reserve(ids.size());
  for (uint64_t id : ids) {
    if (!closure.count(id)) out.push_back(id);
  }
  return out;
}

nlohmann::json report_to_json(const ReplayReport& r) {
  return {{"applied_steps", r.applied_steps},
          {"empty_logical_steps", r.empty_logical_steps},
          {"logical_first", r.logical_first},
          {"logical_last", r.logical_last},
          {"wal_segment_digest", r.wal_segment_digest},
          {"final_state_hash", r.final_state_hash}};
}

ReplayReport report_from_json(const nlohmann::json& j) {
  ReplayReport r;
  r.applied_steps = j.at("applied_steps");
  r.empty_logical_steps = j.at("empty_logical_steps");
  r.logical_first = j.at("logical_first");
  r.logical_last = j.at("logical_last");
  r.wal_segment_digest = j.at("wal_segment_digest");
  r.final_state_hash = j.at("final_state_hash");
  return r;
}

}  // namespace

void check_run_pins(const std::string& run_metadata_json, const TrainConfig& cfg) {
  nlohmann::json j = nlohmann::json::parse(run_metadata_json);
  if (j.at("format_version").get<int>() != 1)
    throw PinDriftError("replay: run metadata format version differs; refusing to run");
  std::string recorded = j.at("config_digest");
  if (recorded != cfg.config_digest_hex())
    throw PinDriftError("replay: config digest mismatch; refusing to run");
}

ReplayOutcome replay_filter(const TrainState& start, const std::vector<StepGroup>& tail,
                            const IdManifest& manifest, const std::set<uint64_t>& closure,
                            const Corpus& corpus, const TrainConfig& cfg,
                            const std::string& wal_digest_hex, const ReplayOptions& opts) {
  ReplayOutcome out;
  out.state = start;
  out.report.wal_segment_digest = wal_digest_hex;
  TrainState& st = out.state;

  uint64_t skipped = 0;
  bool first = true;
  for (const StepGroup& group : tail) {
    if (first) {
      out.report.logical_first = group.opt_step;
      first = false;
    }
    out.report.logical_last = group.opt_step;

    Grads accum(st.params);
    bool had_contrib = false;
    for (const WalRecord& rec : group.records) {
      const std::vector<uint64_t>& original = manifest.lookup(rec.hash64);
      if (original.size() != rec.mb_len)
        throw IntegrityError("replay: manifest id list length " +
                             std::to_string(original.size()) + " != mb_len " +
                             std::to_string(rec.mb_len) + " at opt_step " +
                             std::to_string(rec.opt_step));
      std::vector<uint64_t> kept = filter_ordered(original, closure);
      if (!kept.empty()) {
        GradOptions gopt;
        gopt.reduction = cfg.reduction;
        gopt.dropout = cfg.dropout;
        gopt.dropout_p = cfg.dropout_p;
        // replay normalizes by the recorded original cardinality: it
        // re-executes the logged program minus the filtered addends
        if (cfg.reduction == Reduction::Mean) gopt.mean_denominator = rec.mb_len;
        GradResult g = grad(st.params, corpus, kept, rec.seed64, gopt);
        accum.add_scaled(g.grads);
        had_contrib = true;
      }
      if (rec.accum_end) {
        if (had_contrib) {
          uint64_t expected = rec.opt_step - skipped;
          if (st.opt.step != expected)
            throw IntegrityError("replay: optimizer step " + std::to_string(st.opt.step) +
                                 " != expected " + std::to_string(expected) +
                                 " at recorded opt_step " + std::to_string(rec.opt_step));
          // LR comes from the record; no scheduler runs at replay
          adamw_update(st.params, st.opt, accum, rec.lr_f32, cfg);
          ++out.report.applied_steps;
        } else {
          ++out.report.empty_logical_steps;
          if (opts.advance_counter_on_empty_step) {
            st.opt.step += 1;  // test hook: the forbidden behavior
          } else {
            ++skipped;
          }
        }
      }
    }
  }
  Digest256 h = state_hash(st.params, st.opt);
  out.report.final_state_hash = to_hex(h.data(), h.size());
  return out;
}

ReplayOutcome oracle_retain_train(const TrainState& start, const std::vector<StepGroup>& tail,
                                  const IdManifest& manifest, const std::set<uint64_t>& closure,
                                  const Corpus& corpus, const TrainConfig& cfg,
                                  const std::string& wal_digest_hex) {
  // Materialize the retained plan first: this loop is deliberately shaped
  // differently from replay_filter so that equality is a real check.
  struct PlannedBatch {
    std::vector<uint64_t> ids;
    uint64_t seed = 0;
  };
  struct PlannedUpdate {
    std::vector<PlannedBatch> batches;
    float lr = 0.0f;
  };
  ReplayOutcome out;
  out.state = start;
  out.report.wal_segment_digest = wal_digest_hex;

  std::vector<PlannedUpdate> plan;
  bool first = true;
  for (const StepGroup& group : tail) {
    if (first) {
      out.report.logical_first = group.opt_step;
      first = false;
    }
    out.report.logical_last = group.opt_step;
    PlannedUpdate update;
    for (const WalRecord& rec : group.records) {
      const std::vector<uint64_t>& original = manifest.lookup(rec.hash64);
      if (original.size() != rec.mb_len)
        throw IntegrityError("oracle: manifest id list length mismatch at opt_step " +
                             std::to_string(rec.opt_step));
      std::vector<uint64_t> kept = filter_ordered(original, closure);
      if (!kept.empty()) update.batches.push_back({std::move(kept), rec.seed64});
      if (rec.accum_end) update.lr = rec.lr_f32;
    }
    if (update.batches.empty()) {
      ++out.report.empty_logical_steps;
      continue;  // the retain-only program has no such step at all
    }
    plan.push_back(std::move(update));
  }

  TrainState& st = out.state;
  for (const PlannedUpdate& update : plan) {
    Grads accum(st.params);
    for (const PlannedBatch& batch : update.batches) {
      GradOptions gopt;
      gopt.reduction = cfg.reduction;
      gopt.dropout = cfg.dropout;
      gopt.dropout_p = cfg.dropout_p;
      // the retain-only program normalizes by its own batch cardinality
      GradResult g = grad(st.params, corpus, batch.ids, batch.seed, gopt);
      accum.add_scaled(g.grads);
    }
    adamw_update(st.params, st.opt, accum, update.lr, cfg);
    ++out.report.applied_steps;
  }
  Digest256 h = state_hash(st.params, st.opt);
  out.report.final_state_hash = to_hex(h.data(), h.size());
  return out;
}

EqualityProof prove_equality(const ReplayOutcome& oracle_side, const ReplayOutcome& replay_side,
                             const std::string& wal_digest_hex) {
  const ModelParams& pa = oracle_side.state.params;
  const ModelParams& pb = replay_side.state.params;
  if (!(pa.dims == pb.dims))
    throw PreconditionError("prove_equality: structural mismatch between states");
  for (size_t i = 0; i < pa.tensors().size(); ++i) {
    if (!pa.tensors()[i]->same_shape(*pb.tensors()[i]))
      throw PreconditionError("prove_equality: tensor shape mismatch");
  }

  EqualityProof proof;
  Digest256 mo = model_hash(pa), mr = model_hash(pb);
  Digest256 oo = optimizer_hash(oracle_side.state.opt), orp = optimizer_hash(replay_side.state.opt);
  proof.model_hash_oracle = to_hex(mo.data(), mo.size());
  proof.model_hash_replay = to_hex(mr.data(), mr.size());
  proof.opt_hash_oracle = to_hex(oo.data(), oo.size());
  proof.opt_hash_replay = to_hex(orp.data(), orp.size());

  auto tensors_equal = [](const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
      if (a[i].shape != b[i].shape) return false;
      if (std::memcmp(a[i].ptr(), b[i].ptr(), a[i].byte_count()) != 0) return false;
    }
    return true;
  };
  proof.exp_avg_equal = tensors_equal(oracle_side.state.opt.exp_avg, replay_side.state.opt.exp_avg);
  proof.exp_avg_sq_equal =
      tensors_equal(oracle_side.state.opt.exp_avg_sq, replay_side.state.opt.exp_avg_sq);
  proof.step_equal = oracle_side.state.opt.step == replay_side.state.opt.step;

  bool pass = proof.model_hash_oracle == proof.model_hash_replay &&
              proof.opt_hash_oracle == proof.opt_hash_replay && proof.exp_avg_equal &&
              proof.exp_avg_sq_equal && proof.step_equal;
  proof.status = pass ? "PASS" : "FAIL";
  proof.oracle_invariants = oracle_side.report;
  proof.replay_invariants = replay_side.report;
  proof.wal_sha256 = wal_digest_hex;
  return proof;
}

std::string EqualityProof::to_json() const {
  nlohmann::json j;
  j["status"] = status;
  j["model_hash_oracle"] = model_hash_oracle;
  j["model_hash_replay"] = model_hash_replay;
  j["opt_hash_oracle"] = opt_hash_oracle;
  j["opt_hash_replay"] = opt_hash_replay;
  j["component_equality"] = {
      {"exp_avg", exp_avg_equal}, {"exp_avg_sq", exp_avg_sq_equal}, {"step", step_equal}};
  j["oracle_invariants"] = report_to_json(oracle_invariants);
  j["replay_invariants"] = report_to_json(replay_invariants);
  j["wal_sha256"] = wal_sha256;
  return j.dump(2);
}

EqualityProof EqualityProof::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  EqualityProof p;
  p.status = j.at("status");
  p.model_hash_oracle = j.at("model_hash_oracle");
  p.model_hash_replay = j.at("model_hash_replay");
  p.opt_hash_oracle = j.at("opt_hash_oracle");
  p.opt_hash_replay = j.at("opt_hash_replay");
  p.exp_avg_equal = j.at("component_equality").at("exp_avg");
  p.exp_avg_sq_equal = j.at("component_equality").at("exp_avg_sq");
  p.step_equal = j.at("component_equality").at("step");
  p.oracle_invariants = report_from_json(j.at("oracle_invariants"));
  p.replay_invariants = report_from_json(j.at("replay_invariants"));
  p.wal_sha256 = j.at("wal_sha256");
  return p;
}

ReductionDivergenceReport mean_reduction_counterexample(
    const TrainState& start, const std::vector<StepGroup>& tail, const IdManifest& manifest,
    const std::set<uint64_t>& closure, const Corpus& corpus, const TrainConfig& cfg) {
  ReplayOutcome replay = replay_filter(start, tail, manifest, closure, corpus, cfg,
                                       /*wal_digest_hex=*/"");
  ReplayOutcome oracle = oracle_retain_train(start, tail, manifest, closure, corpus, cfg,
                                             /*wal_digest_hex=*/"");
  ReductionDivergenceReport rep;
  rep.reduction = cfg.reduction == Reduction::Sum ? "sum" : "mean";
  rep.bitwise_equal = true;
  auto ta = replay.state.params.tensors();
  auto tb = oracle.state.params.tensors();
  for (size_t i = 0; i < ta.size(); ++i) {
    for (size_t e = 0; e < ta[i]->element_count(); ++e) {
      float a = ta[i]->data[e];
      float b = tb[i]->data[e];
      if (std::memcmp(&a, &b, 4) != 0) rep.bitwise_equal = false;
      double diff = std::abs(static_cast<double>(a) - static_cast<double>(b));
      if (diff > rep.max_abs_param_diff) rep.max_abs_param_diff = diff;
    }
  }
  return rep;
}

}  // namespace unlearn
