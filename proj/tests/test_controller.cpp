#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "test_util.hpp"
#include "unlearn/bytes.hpp"
#include "unlearn/controller.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/workspace.hpp"

using namespace unlearn;

namespace {

RoutingState base_state() {
  RoutingState s;
  s.ring_window = 16;
  s.current_step = 200;
  s.checkpoint_steps = {0, 50, 100, 150};
  return s;
}

// end-to-end fixture: generated corpus, trained run with WAL +
// checkpoints + ring, reader, registry, manifest log
struct Fixture {
  GeneratedCorpus gen;
  TrainConfig cfg;
  std::unique_ptr<WalWriter> wal;
  std::unique_ptr<WalReader> reader;
  TrainRunResult run;
  TrainState serving;
  ModelParams adapter_base;
  AdapterRegistry registry;
  RingBuffer ring{16, DeltaMode::Xor, Codec::Identity, true};
  std::unique_ptr<ManifestLog> log;
  std::map<std::string, std::pair<std::string, std::string>> artifacts;
  std::vector<uint8_t> key{'k', 'e', 'y'};

  explicit Fixture(const std::string& tag, uint32_t steps = 16) {
    std::string dir = testutil::tmp_dir(tag);
    gen = generate_corpus({.size = 80, .dup_rate = 0.2, .num_canaries = 1, .canary_bits = 6,
                           .seed = 31});
    cfg.dims = {kVocabSize, 64, 8, 16};
    cfg.total_steps = steps;
    cfg.warmup_steps = 4;
    cfg.accum_len = 2;
    cfg.microbatch_size = 4;
    cfg.master_seed = 51;
    wal = std::make_unique<WalWriter>(dir + "/wal", 1);
    CheckpointPolicy policy{dir + "/ck", 8, true};
    run = train(gen.corpus, cfg, wal.get(), &policy, &ring);
    reader = std::make_unique<WalReader>(WalReader::open(dir + "/wal"));
    serving = run.state;
    adapter_base = run.state.params;
    log = std::make_unique<ManifestLog>(dir + "/manifest.log", key);
  }

  ControllerEnv env() {
    ControllerEnv e;
    e.corpus = &gen.corpus;
    e.corpus_meta = &gen.meta;
    e.wal = reader.get();
    e.id_manifest = &wal->manifest();
    e.train_cfg = cfg;
    e.checkpoints = run.checkpoints;
    e.serving = &serving;
    e.adapter_base = &adapter_base;
    e.registry = &registry;
    e.ring = &ring;
    e.manifest_log = log.get();
    e.thresholds.mia_low = 0.01;
    e.thresholds.mia_high = 0.99;
    e.thresholds.exposure_max = 6.0;
    e.thresholds.utility_band_pct = 200.0;
    e.artifact_store = &artifacts;
    return e;
  }
};

ForgetRequest request_of(const std::string& name, std::set<uint64_t> ids,
                         Urgency urgency = Urgency::Normal) {
  ForgetRequest r;
  r.request_id = ForgetRequest::id_from_string(name);
  r.sample_ids = std::move(ids);
  r.urgency = urgency;
  r.submitted_at = 1700000000;
  return r;
}

ForgetClosure closure_of(const std::set<uint64_t>& ids) {
  ForgetClosure cl;
  cl.requested = ids;
  cl.expanded = ids;
  return cl;
}

}  // namespace

TEST_CASE("routing follows the strict priority order") {
  RoutingState s = base_state();

  // empty closure -> nothing to do
  CHECK(route({}, s).path == Path::NoOp);

  // cohort confinement wins over everything
  s.confined_to_cohorts = true;
  s.affected_cohorts = {3};
  s.offending_steps = {198};
  s.urgency = Urgency::Urgent;
  PlannedAction a = route({1}, s);
  CHECK(a.path == Path::AdapterDelete);
  CHECK(a.cohorts == std::vector<uint64_t>{3});

  // in-window offending steps -> revert with u = T - min
  s.confined_to_cohorts = false;
  s.offending_steps = {198};
  a = route({1}, s);
  CHECK(a.path == Path::RecentRevert);
  CHECK(a.revert_u == 2);

  // offending steps spanning the window boundary: no partial revert
  s.offending_steps = {100, 198};
  s.urgency = Urgency::Normal;
  a = route({1}, s);
  CHECK(a.path == Path::ExactReplay);
  CHECK(a.replay_from_step == 100);  // greatest checkpoint <= min(offending)

  // urgency routes to the hot path when the window misses
  s.offending_steps = {100};
  s.urgency = Urgency::Urgent;
  CHECK(route({1}, s).path == Path::HotPath);

  // default: exact replay from the nearest checkpoint
  s.urgency = Urgency::Normal;
  s.offending_steps = {100};
  a = route({1}, s);
  CHECK(a.path == Path::ExactReplay);
  CHECK(a.replay_from_step == 100);
  s.offending_steps = {99};
  CHECK(route({1}, s).replay_from_step == 50);
}

TEST_CASE("routing is pure and never violates priority (randomized states)") {
  for (uint64_t trial = 0; trial < 300; ++trial) {
    RoutingState s = base_state();
    auto bit = [&](uint32_t i) { return (rng_u64({trial, i, 0, 80, 0}) & 1) != 0; };
    s.confined_to_cohorts = bit(0);
    if (s.confined_to_cohorts) s.affected_cohorts = {1};
    s.urgency = bit(1) ? Urgency::Urgent : Urgency::Normal;
    bool in_window = bit(2);
    bool has_steps = bit(3);
    if (has_steps) {
      s.offending_steps =
          in_window ? std::set<uint32_t>{190} : std::set<uint32_t>{20};
    }
    PlannedAction a = route({5}, s);
    PlannedAction b = route({5}, s);
    CHECK(a.path == b.path);  // pure
    if (s.confined_to_cohorts) {
      CHECK(a.path == Path::AdapterDelete);
    } else if (has_steps && in_window) {
      CHECK(a.path == Path::RecentRevert);
    } else if (s.urgency == Urgency::Urgent) {
      CHECK(a.path == Path::HotPath);
    } else {
      CHECK(a.path == Path::ExactReplay);
    }
  }
}

TEST_CASE("offending steps derive from manifest lookups") {
  Fixture fx("ctrl_offending");
  auto groups = fx.reader->read_tail(0);
  // pick an id from step 3's first record
  uint64_t victim = fx.wal->manifest().lookup(groups.at(3).records[0].hash64).front();
  auto steps = offending_steps(groups, fx.wal->manifest(), {victim});
  CHECK(steps.count(3) == 1);
  // every reported step really contains the id
  for (uint32_t t : steps) {
    bool found = false;
    for (const WalRecord& rec : groups.at(t).records) {
      for (uint64_t id : fx.wal->manifest().lookup(rec.hash64)) found |= id == victim;
    }
    CHECK(found);
  }
}

TEST_CASE("manifest chain: append, verify, tamper detection, file reload") {
  std::string dir = testutil::tmp_dir("ctrl_chain");
  std::vector<uint8_t> key{'s'};
  {
    ManifestLog log(dir + "/m.log", key);
    CHECK(log.verify_chain().ok);  // empty log verifies
    for (int i = 0; i < 5; ++i) {
      ManifestEntry e;
      e.request_id = ForgetRequest::id_from_string("req" + std::to_string(i));
      e.path = Path::NoOp;
      e.outcome = Outcome::Trivial;
      log.append(e);
      CHECK(log.verify_chain().ok);  // re-verify after every append
    }
    CHECK(log.entries().size() == 5);
    CHECK(log.entries()[0].prev_entry_hash == std::array<uint8_t, 32>{});
  }
  // reload from disk and verify
  {
    ManifestLog log(dir + "/m.log", key);
    CHECK(log.entries().size() == 5);
    CHECK(log.verify_chain().ok);
    // wrong key fails immediately
    ManifestLog bad(dir + "/m.log", {'x'});
    auto status = bad.verify_chain();
    CHECK_FALSE(status.ok);
    CHECK(status.first_bad_seq == 0);
  }
  // tamper one byte inside entry 3 (the outcome byte region)
  {
    std::fstream f(dir + "/m.log", std::ios::binary | std::ios::in | std::ios::out);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    // walk frames to entry 3, flip a byte near its middle
    size_t off = 0;
    for (int i = 0; i < 3; ++i) off += 4 + get_u32(buf.data() + off);
    size_t target = off + 4 + 60;
    f.seekp(static_cast<std::streamoff>(target));
    f.put(static_cast<char>(buf[target] ^ 0x01));
  }
  {
    auto status = ManifestLog::verify_chain_file(dir + "/m.log", key);
    CHECK_FALSE(status.ok);
    CHECK(status.first_bad_seq == 3);
  }
}

TEST_CASE("empty closure executes as trivially-complete") {
  Fixture fx("ctrl_noop");
  ControllerEnv env = fx.env();
  ForgetRequest req = request_of("noop", {});
  PlannedAction action = route({}, base_state());
  ExecuteResult r = execute(req, closure_of({}), action, env);
  CHECK(r.entry.path == Path::NoOp);
  CHECK(r.entry.outcome == Outcome::Trivial);
  CHECK(r.entry.servable);
  CHECK_FALSE(r.duplicate);
}

TEST_CASE("duplicate request ids return the original entry without growth") {
  Fixture fx("ctrl_idem");
  ControllerEnv env = fx.env();
  ForgetRequest req = request_of("dup", {});
  ExecuteResult first = execute(req, closure_of({}), route({}, base_state()), env);
  size_t len = fx.log->entries().size();
  ExecuteResult second = execute(req, closure_of({}), route({}, base_state()), env);
  CHECK(second.duplicate);
  CHECK(second.entry.seq == first.entry.seq);
  CHECK(fx.log->entries().size() == len);
}

TEST_CASE("exact replay execution emits a passing equality proof and audits") {
  Fixture fx("ctrl_replay");
  ControllerEnv env = fx.env();
  // forget the cohort base docs that appear in the WAL
  std::set<uint64_t> ids(fx.gen.meta.forget_cohort.begin(),
                         fx.gen.meta.forget_cohort.begin() + 6);
  ForgetClosure cl = closure_of(ids);
  auto groups = fx.reader->read_tail(0);
  RoutingState rs;
  rs.ring_window = 0;  // force the replay path
  rs.current_step = fx.cfg.total_steps;
  for (const auto& c : fx.run.checkpoints) rs.checkpoint_steps.push_back(c.step);
  rs.offending_steps = offending_steps(groups, fx.wal->manifest(), ids);
  PlannedAction action = route(ids, rs);
  CHECK(action.path == Path::ExactReplay);
  ExecuteResult r = execute(request_of("replay1", ids), cl, action, env);
  CHECK(r.entry.path == Path::ExactReplay);
  // artifacts: equality proof + audit report, both stored
  bool has_proof = false, has_audit = false;
  for (const ArtifactRef& a : r.entry.artifacts) {
    has_proof |= a.tag == "equality_proof";
    has_audit |= a.tag == "audit_report";
    CHECK(fx.artifacts.count(a.sha256_hex) == 1);
  }
  CHECK(has_proof);
  CHECK(has_audit);
  // the stored equality proof says PASS
  for (const ArtifactRef& a : r.entry.artifacts) {
    if (a.tag == "equality_proof") {
      EqualityProof proof = EqualityProof::from_json(fx.artifacts[a.sha256_hex].second);
      CHECK(proof.pass());
    }
  }
  // serving was replaced by the replayed state
  CHECK(fx.serving.opt.step <= fx.cfg.total_steps);
  CHECK(fx.log->verify_chain().ok);
}

TEST_CASE("hot-path audit failure escalates to a linked exact replay") {
  Fixture fx("ctrl_escalate");
  ControllerEnv env = fx.env();
  env.thresholds.utility_band_pct = -1.0;  // unsatisfiable: the utility gate always fails
  env.hotpath.max_anti_steps = 1;
  env.hotpath.retain_tune_steps = 0;
  std::set<uint64_t> ids(fx.gen.meta.forget_cohort.begin(),
                         fx.gen.meta.forget_cohort.begin() + 4);
  PlannedAction action;
  action.path = Path::HotPath;
  ExecuteResult r = execute(request_of("hot1", ids), closure_of(ids), action, env);
  REQUIRE(r.all.size() == 2);
  CHECK(r.all[0].path == Path::HotPath);
  CHECK(r.all[0].outcome == Outcome::Escalated);
  CHECK_FALSE(r.all[0].servable);
  CHECK(r.entry.path == Path::ExactReplay);
  CHECK(r.entry.escalated_from_seq == static_cast<int64_t>(r.all[0].seq));
  CHECK(fx.log->verify_chain().ok);
}

TEST_CASE("revert-path audit failure escalates to a linked exact replay") {
  Fixture fx("ctrl_revert_escalate");
  ControllerEnv env = fx.env();
  env.thresholds.utility_band_pct = -1.0;  // audits cannot pass
  std::set<uint64_t> ids{fx.gen.meta.forget_cohort[0]};
  PlannedAction action;
  action.path = Path::RecentRevert;
  action.revert_u = 2;
  ExecuteResult r = execute(request_of("rev1", ids), closure_of(ids), action, env);
  REQUIRE(r.all.size() == 2);
  CHECK(r.all[0].path == Path::RecentRevert);
  CHECK(r.all[0].outcome == Outcome::Escalated);
  CHECK(r.entry.path == Path::ExactReplay);
  CHECK(r.entry.escalated_from_seq == static_cast<int64_t>(r.all[0].seq));
  CHECK(fx.log->verify_chain().ok);
}

TEST_CASE("merged-adapter deletion escalates to exact replay") {
  Fixture fx("ctrl_merged");
  ControllerEnv env = fx.env();
  Adapter ad = make_adapter(3, fx.cfg.dims, 2, 2, 9);
  ad.merged = true;
  ad.trained_sample_ids = {fx.gen.meta.forget_cohort[0]};
  fx.registry.add(std::move(ad));
  std::set<uint64_t> ids{fx.gen.meta.forget_cohort[0]};
  PlannedAction action;
  action.path = Path::AdapterDelete;
  action.cohorts = {3};
  ExecuteResult r = execute(request_of("merged1", ids), closure_of(ids), action, env);
  REQUIRE(r.all.size() == 2);
  CHECK(r.all[0].path == Path::AdapterDelete);
  CHECK(r.all[0].outcome == Outcome::Escalated);
  CHECK(r.entry.path == Path::ExactReplay);
  CHECK(r.entry.escalated_from_seq == static_cast<int64_t>(r.all[0].seq));
}

TEST_CASE("request json round-trips") {
  ForgetRequest r = request_of("json1", {7, 8, 9}, Urgency::Urgent);
  ForgetRequest back = ForgetRequest::from_json(r.to_json());
  CHECK(back.request_id == r.request_id);
  CHECK(back.sample_ids == r.sample_ids);
  CHECK(back.urgency == Urgency::Urgent);
  CHECK(back.submitted_at == r.submitted_at);
}

TEST_CASE("ci gate passes clean and fails under injected faults") {
  Corpus corpus = testutil::small_corpus(30);
  TrainConfig cfg;
  cfg.dims = {kVocabSize, 32, 8, 16};
  cfg.warmup_steps = 5;
  cfg.accum_len = 2;
  cfg.microbatch_size = 4;
  cfg.master_seed = 61;
  std::string dir = testutil::tmp_dir("ctrl_ci");

  std::string detail;
  CiGateOptions opts;
  opts.steps = 40;
  CHECK(ci_gate(corpus, cfg, dir + "/clean", opts, &detail) == 0);
  CHECK(detail == "ok");

  opts.inject_nondeterminism = true;
  CHECK(ci_gate(corpus, cfg, dir + "/nondet", opts, &detail) == 1);
  CHECK(detail.find("stage 1") == 0);

  opts.inject_nondeterminism = false;
  opts.truncate_wal = true;
  CHECK(ci_gate(corpus, cfg, dir + "/trunc", opts, &detail) == 3);
  CHECK(detail.find("stage 3") == 0);
}
