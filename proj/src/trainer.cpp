#include "unlearn/trainer.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "unlearn/bytes.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/ring.hpp"

namespace fs = std::filesystem;

namespace unlearn {

MicrobatchSchedule::MicrobatchSchedule(const Corpus& corpus, uint64_t master_seed,
                                       uint32_t microbatch_size)
    : base_ids_(corpus.all_ids()), master_seed_(master_seed), mb_size_(microbatch_size) {
  if (base_ids_.empty()) throw PreconditionError("MicrobatchSchedule: empty corpus");
}

const std::vector<uint64_t>& MicrobatchSchedule::epoch_perm(uint64_t epoch) const {
  for (const auto& [e, perm] : perm_cache_) {
    if (e == epoch) return perm;
  }
  std::vector<uint64_t> perm = base_ids_;
  // Fisher-Yates keyed by (seed, epoch, position)
  for (size_t i = perm.size() - 1; i > 0; --i) {
    uint64_t j = rng_below({master_seed_, epoch, static_cast<uint32_t>(i), kRngShuffle, 0}, i + 1);
    std::swap(perm[i], perm[j]);
  }
  if (perm_cache_.size() >= 4) perm_cache_.erase(perm_cache_.begin());
  perm_cache_.emplace_back(epoch, std::move(perm));
  return perm_cache_.back().second;
}

std::vector<uint64_t> MicrobatchSchedule::ids_at(uint64_t mb_index) const {
  std::vector<uint64_t> out;
  out.reserve(mb_size_);
  uint64_t n = base_ids_.size();
  uint64_t pos = mb_index * mb_size_;
  for (uint32_t k = 0; k < mb_size_; ++k) {
    uint64_t global = pos + k;
    out.push_back(epoch_perm(global / n)[global % n]);
  }
  return out;
}

uint64_t MicrobatchSchedule::seed_at(uint64_t mb_index) const {
  return rng_u64({master_seed_, mb_index, 0, kRngMicrobatchSeed, 0});
}

namespace {

std::string save_checkpoint_file(const std::string& dir, uint32_t step, const TrainState& st,
                                 const std::string& config_digest_hex) {
  fs::create_directories(dir);
  CheckpointMeta meta;
  meta.config_digest_hex = config_digest_hex;
  meta.opt_step = st.opt.step;
  Digest256 h = state_hash(st.params, st.opt);
  char name[96];
  std::snprintf(name, sizeof name, "ckpt_step%06u_%s.bin", step,
                to_hex(h.data(), 4).c_str());
  std::string path = dir + "/" + name;
  checkpoint_save(path, st.params, st.opt, meta);
  return path;
}

}  // namespace

TrainRunResult train(const Corpus& corpus, const TrainConfig& cfg, WalWriter* wal,
                     const CheckpointPolicy* ckpt_policy, RingBuffer* ring,
                     const TrainHooks* hooks) {
  cfg.validate();
  static std::atomic<uint32_t> invocation{0};
  uint32_t call_index = ++invocation;

  TrainRunResult result;
  result.config_digest_hex = cfg.config_digest_hex();
  result.state = TrainState(cfg.dims, cfg.master_seed);
  TrainState& st = result.state;

  if (hooks != nullptr && hooks->inject_nondeterminism) {
    // stand-in for a nondeterministic kernel: output depends on how many
    // times train() ran in this process
    st.params.embed.data[0] += 1e-4f * static_cast<float>(call_index);
  }

  MicrobatchSchedule sched(corpus, cfg.master_seed, cfg.microbatch_size);
  uint64_t mb_index = 0;

  for (uint32_t t = 0; t < cfg.total_steps; ++t) {
    if (ckpt_policy != nullptr && ckpt_policy->interval > 0 && t % ckpt_policy->interval == 0) {
      result.checkpoints.push_back(
          {t, save_checkpoint_file(ckpt_policy->dir, t, st, result.config_digest_hex)});
    }
    float lr = lr_at(static_cast<uint32_t>(st.opt.step), cfg);
    Grads accum(st.params);
    GradOptions gopt;
    gopt.reduction = cfg.reduction;
    gopt.dropout = cfg.dropout;
    gopt.dropout_p = cfg.dropout_p;
    for (uint32_t i = 0; i < cfg.accum_len; ++i) {
      std::vector<uint64_t> ids = sched.ids_at(mb_index);
      uint64_t seed = sched.seed_at(mb_index);
      ++mb_index;
      GradResult g = grad(st.params, corpus, ids, seed, gopt);
      accum.add_scaled(g.grads);
      if (wal != nullptr) {
        wal->emit_record(ids, seed, lr, static_cast<uint32_t>(st.opt.step),
                         i + 1 == cfg.accum_len);
        result.wal_records = wal->records_written();
      }
    }
    std::optional<TrainState> pre;
    if (ring != nullptr) pre = st;
    adamw_update(st.params, st.opt, accum, lr, cfg);
    ++result.applied_updates;
    if (ring != nullptr) ring->capture(*pre, st, t);
    if (hooks != nullptr && hooks->after_update) hooks->after_update(t, st);
  }

  if (ckpt_policy != nullptr && ckpt_policy->save_final) {
    result.checkpoints.push_back({cfg.total_steps, save_checkpoint_file(
        ckpt_policy->dir, cfg.total_steps, st, result.config_digest_hex)});
  }
  if (wal != nullptr) wal->close();
  return result;
}

std::string run_metadata_json(const TrainConfig& cfg, const TrainRunResult& result) {
  nlohmann::json j;
  j["engine_version"] = "0.1.0";
  j["format_version"] = 1;
  j["config"] = nlohmann::json::parse(cfg.canonical_json());
  j["config_digest"] = result.config_digest_hex;
  j["grad_clip"] = cfg.grad_clip;
  j["master_seed"] = cfg.master_seed;
  j["wal_records"] = result.wal_records;
  j["applied_updates"] = result.applied_updates;
  nlohmann::json ckpts = nlohmann::json::array();
  for (const auto& c : result.checkpoints) ckpts.push_back({{"step", c.step}, {"path", c.path}});
  j["checkpoints"] = ckpts;
  return j.dump(2);
}

}  // namespace unlearn
