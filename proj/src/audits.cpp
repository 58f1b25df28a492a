#include "unlearn/audits.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <json.hpp>

#include "unlearn/errors.hpp"
#include "unlearn/rng.hpp"

namespace unlearn {

BootstrapCi bootstrap_ci_mean(const std::vector<double>& values, uint64_t seed, int resamples) {
  if (values.empty()) return {0.0, 0.0};
  std::vector<double> means;
  means.reserve(resamples);
  for (int r = 0; r < resamples; ++r) {
    double sum = 0.0;
    for (size_t i = 0; i < values.size(); ++i) {
      uint64_t idx = rng_below({seed, static_cast<uint64_t>(r), static_cast<uint32_t>(i),
                                kRngBootstrap, 0},
                               values.size());
      sum += values[idx];
    }
    means.push_back(sum / static_cast<double>(values.size()));
  }
  std::sort(means.begin(), means.end());
  size_t lo = static_cast<size_t>(0.025 * (resamples - 1));
  size_t hi = static_cast<size_t>(0.975 * (resamples - 1));
  return {means[lo], means[hi]};
}

double auc_from_scores(const std::vector<double>& positive, const std::vector<double>& negative) {
  if (positive.empty() || negative.empty())
    throw PreconditionError("auc_from_scores: empty score set");
  double u = 0.0;
  for (double p : positive) {
    for (double n : negative) {
      if (p > n) u += 1.0;
      else if (p == n) u += 0.5;
    }
  }
  return u / (static_cast<double>(positive.size()) * static_cast<double>(negative.size()));
}

MiaResult mia_auc(const ModelParams& model, const Corpus& corpus,
                  const std::vector<uint64_t>& forget_set,
                  const std::vector<uint64_t>& matched_controls, uint64_t bootstrap_seed) {
  if (forget_set.empty() || matched_controls.empty())
    throw PreconditionError("mia_auc: forget and control sets must be nonempty");
  auto scores = [&](const std::vector<uint64_t>& ids) {
    std::vector<double> out;
    out.reserve(ids.size());
    for (uint64_t id : ids) {
      LossResult r = forward_loss_sum(model, corpus, {id});
      out.push_back(-(r.loss / static_cast<double>(r.token_count)));
    }
    return out;
  };
  std::vector<double> pos = scores(forget_set);
  std::vector<double> neg = scores(matched_controls);
  MiaResult result;
  result.auc = auc_from_scores(pos, neg);

  std::vector<double> resampled;
  constexpr int kResamples = 1000;
  resampled.reserve(kResamples);
  for (int r = 0; r < kResamples; ++r) {
    std::vector<double> rp, rn;
    rp.reserve(pos.size());
    rn.reserve(neg.size());
    for (size_t i = 0; i < pos.size(); ++i) {
      rp.push_back(pos[rng_below({bootstrap_seed, static_cast<uint64_t>(r),
                                  static_cast<uint32_t>(i), kRngBootstrap, 1},
                                 pos.size())]);
    }
    for (size_t i = 0; i < neg.size(); ++i) {
      rn.push_back(neg[rng_below({bootstrap_seed, static_cast<uint64_t>(r),
                                  static_cast<uint32_t>(i), kRngBootstrap, 2},
                                 neg.size())]);
    }
    resampled.push_back(auc_from_scores(rp, rn));
  }
  std::sort(resampled.begin(), resampled.end());
  result.ci = {resampled[static_cast<size_t>(0.025 * (kResamples - 1))],
               resampled[static_cast<size_t>(0.975 * (kResamples - 1))]};
  return result;
}

double canary_exposure(const ModelParams& model, const CanarySpec& canary) {
  if (canary.k < 1) throw PreconditionError("canary_exposure: k must be >= 1");
  if (canary.k > 20)
    throw PreconditionError("canary_exposure: k > 20 exceeds the exhaustive-ranking cap");
  // cache log-softmax rows for every context byte the candidates can use
  std::map<uint32_t, std::vector<float>> rows;
  auto row = [&](uint32_t ctx) -> const std::vector<float>& {
    auto it = rows.find(ctx);
    if (it == rows.end()) it = rows.emplace(ctx, next_token_logprobs(model, ctx)).first;
    return it->second;
  };
  uint32_t start_ctx = canary.prefix.empty() ? kTokenBos : canary.prefix.back();

  auto ll_of = [&](uint32_t bits) {
    double ll = 0.0;
    uint32_t ctx = start_ctx;
    for (size_t i = 0; i < canary.slots.size(); ++i) {
      uint8_t tok = (bits >> i) & 1 ? canary.slots[i].second : canary.slots[i].first;
      ll += row(ctx)[tok];
      ctx = tok;
    }
    return ll;
  };

  const uint64_t space = uint64_t(1) << canary.k;
  double true_ll = ll_of(canary.true_bits);
  uint64_t better = 0, ties = 0;
  for (uint64_t c = 0; c < space; ++c) {
    if (c == canary.true_bits) continue;
    double ll = ll_of(static_cast<uint32_t>(c));
    if (ll > true_ll) ++better;
    else if (ll == true_ll) ++ties;
  }
  double rank = 1.0 + static_cast<double>(better) + 0.5 * static_cast<double>(ties);
  return static_cast<double>(canary.k) - std::log2(rank);
}

double targeted_extraction(const ModelParams& model, const std::vector<ExtractionItem>& items) {
  if (items.empty()) throw PreconditionError("targeted_extraction: empty item list");
  size_t hits = 0;
  for (const ExtractionItem& item : items) {
    std::vector<uint8_t> got = greedy_decode(model, item.prompt, item.suffix.size());
    if (got == item.suffix) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(items.size());
}

std::optional<double> fuzzy_recall(const ModelParams& model,
                                   const std::vector<ExtractionItem>& variant_items) {
  if (variant_items.empty()) return std::nullopt;
  return targeted_extraction(model, variant_items);
}

double retain_ppl(const ModelParams& model, const Corpus& corpus,
                  const std::vector<uint64_t>& retain_eval_ids) {
  return std::exp(mean_nll(model, corpus, retain_eval_ids));
}

std::vector<uint64_t> match_controls_by_length(const Corpus& corpus,
                                               const std::vector<uint64_t>& forget_ids,
                                               const std::vector<uint64_t>& retain_pool) {
  std::vector<std::pair<size_t, uint64_t>> pool;  // (length, id)
  for (uint64_t id : retain_pool) pool.emplace_back(corpus.doc(id).bytes.size(), id);
  std::sort(pool.begin(), pool.end());
  std::vector<bool> taken(pool.size(), false);
  std::vector<uint64_t> controls;
  for (uint64_t fid : forget_ids) {
    size_t want = corpus.doc(fid).bytes.size();
    size_t best = pool.size();
    size_t best_gap = SIZE_MAX;
    for (size_t i = 0; i < pool.size(); ++i) {
      if (taken[i]) continue;
      size_t gap = pool[i].first > want ? pool[i].first - want : want - pool[i].first;
      if (gap < best_gap) {
        best_gap = gap;
        best = i;
      }
    }
    if (best == pool.size()) break;
    taken[best] = true;
    controls.push_back(pool[best].second);
  }
  return controls;
}

AuditReport run_audit_suite(const ModelParams& model, const AuditContext& ctx,
                            const AuditThresholds& thresholds) {
  if (ctx.corpus == nullptr) throw PreconditionError("run_audit_suite: corpus required");
  AuditReport report;
  report.thresholds = thresholds;
  report.model_id = ctx.model_id;

  // membership inference
  {
    AuditTestResult t;
    t.name = "mia_auc";
    try {
      MiaResult r = mia_auc(model, *ctx.corpus, ctx.forget_ids, ctx.control_ids,
                            ctx.bootstrap_seed);
      t.metric = r.auc;
      t.ci = r.ci;
      t.pass = r.auc >= thresholds.mia_low && r.auc <= thresholds.mia_high;
      if (!t.pass) t.detail = "outside acceptance band";
    } catch (const Error& e) {
      t.pass = false;
      t.detail = e.what();
    }
    report.tests.push_back(t);
  }
  // canary exposure (mean over canaries)
  {
    AuditTestResult t;
    t.name = "canary_exposure";
    if (ctx.canaries.empty()) {
      t.applicable = false;
      t.pass = true;
      t.detail = "no canaries planted";
    } else {
      try {
        std::vector<double> exposures;
        for (const CanarySpec& c : ctx.canaries) exposures.push_back(canary_exposure(model, c));
        double mean = 0.0;
        for (double e : exposures) mean += e;
        mean /= static_cast<double>(exposures.size());
        t.metric = mean;
        t.ci = bootstrap_ci_mean(exposures, ctx.bootstrap_seed + 1);
        t.pass = mean <= thresholds.exposure_max;
        if (!t.pass) t.detail = "exposure above E*";
      } catch (const Error& e) {
        t.pass = false;
        t.detail = e.what();
      }
    }
    report.tests.push_back(t);
  }
  // targeted extraction
  {
    AuditTestResult t;
    t.name = "targeted_extraction";
    if (ctx.extraction_items.empty()) {
      t.applicable = false;
      t.pass = true;
      t.detail = "not applicable: no extraction targets in the closure";
    } else {
      try {
        t.metric = targeted_extraction(model, ctx.extraction_items);
        t.pass = t.metric <= thresholds.extraction_max;
        if (!t.pass) t.detail = "extraction above p*";
      } catch (const Error& e) {
        t.pass = false;
        t.detail = e.what();
      }
    }
    report.tests.push_back(t);
  }
  // fuzzy span recall
  {
    AuditTestResult t;
    t.name = "fuzzy_recall";
    std::optional<double> r = fuzzy_recall(model, ctx.fuzzy_variant_items);
    if (!r.has_value()) {
      t.applicable = false;
      t.pass = true;
      t.detail = "not applicable: no near-duplicate variants";
    } else {
      t.metric = *r;
      t.pass = *r <= thresholds.fuzzy_recall_max;
      if (!t.pass) t.detail = "fuzzy recall above threshold";
    }
    report.tests.push_back(t);
  }
  // utility
  {
    AuditTestResult t;
    t.name = "retain_ppl";
    try {
      t.metric = retain_ppl(model, *ctx.corpus, ctx.retain_eval_ids);
      if (ctx.baseline_retain_ppl > 0.0) {
        double rel_pct = std::abs(t.metric - ctx.baseline_retain_ppl) /
                         ctx.baseline_retain_ppl * 100.0;
        t.pass = rel_pct <= thresholds.utility_band_pct;
        if (!t.pass) t.detail = "utility drift outside band";
      } else {
        t.pass = true;
        t.detail = "no baseline supplied; reported only";
      }
    } catch (const Error& e) {
      t.pass = false;
      t.detail = e.what();
    }
    report.tests.push_back(t);
  }

  report.overall_pass = true;
  for (const AuditTestResult& t : report.tests) report.overall_pass &= t.pass;
  return report;
}

std::string AuditReport::to_json() const {
  nlohmann::json j;
  j["model_id"] = model_id;
  j["overall_pass"] = overall_pass;
  j["thresholds"] = {{"mia_low", thresholds.mia_low},
                     {"mia_high", thresholds.mia_high},
                     {"exposure_max", thresholds.exposure_max},
                     {"extraction_max", thresholds.extraction_max},
                     {"utility_band_pct", thresholds.utility_band_pct},
                     {"fuzzy_recall_max", thresholds.fuzzy_recall_max}};
  nlohmann::json tests_j = nlohmann::json::array();
  for (const auto& t : tests) {
    tests_j.push_back({{"name", t.name},
                       {"applicable", t.applicable},
                       {"metric", t.metric},
                       {"ci_low", t.ci.low},
                       {"ci_high", t.ci.high},
                       {"pass", t.pass},
                       {"detail", t.detail}});
  }
  j["tests"] = tests_j;
  return j.dump(2);
}

AuditReport AuditReport::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  AuditReport r;
  r.model_id = j.at("model_id");
  r.overall_pass = j.at("overall_pass");
  r.thresholds.mia_low = j.at("thresholds").at("mia_low");
  r.thresholds.mia_high = j.at("thresholds").at("mia_high");
  r.thresholds.exposure_max = j.at("thresholds").at("exposure_max");
  r.thresholds.extraction_max = j.at("thresholds").at("extraction_max");
  r.thresholds.utility_band_pct = j.at("thresholds").at("utility_band_pct");
  r.thresholds.fuzzy_recall_max = j.at("thresholds").at("fuzzy_recall_max");
  for (const auto& t : j.at("tests")) {
    AuditTestResult tr;
    tr.name = t.at("name");
    tr.applicable = t.at("applicable");
    tr.metric = t.at("metric");
    tr.ci.low = t.at("ci_low");
    tr.ci.high = t.at("ci_high");
    tr.pass = t.at("pass");
    tr.detail = t.at("detail");
    r.tests.push_back(tr);
  }
  return r;
}

}  // namespace unlearn
