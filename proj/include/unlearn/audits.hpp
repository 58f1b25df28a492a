#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "unlearn/corpus.hpp"
#include "unlearn/model.hpp"

namespace unlearn {

struct AuditThresholds {
  double mia_low = 0.45, mia_high = 0.55;  // band around 0.5
  double exposure_max = 2.0;               // E*, bits
  double extraction_max = 0.0;             // p*
  double utility_band_pct = 1.0;           // X, percent
  double fuzzy_recall_max = 0.0;
};

struct BootstrapCi {
  double low = 0.0, high = 0.0;
};

// Percentile bootstrap (1000 resamples) of a mean-like statistic.
BootstrapCi bootstrap_ci_mean(const std::vector<double>& values, uint64_t seed,
                              int resamples = 1000);

// Mann-Whitney AUC with tie correction over raw score vectors
// (positives should score higher).
double auc_from_scores(const std::vector<double>& positive, const std::vector<double>& negative);

struct MiaResult {
  double auc = 0.5;
  BootstrapCi ci;
};

// Loss-threshold attack: score = -per-example loss, AUC over
// forget-vs-control labels, bootstrap CI over paired resampling.
MiaResult mia_auc(const ModelParams& model, const Corpus& corpus,
                  const std::vector<uint64_t>& forget_set,
                  const std::vector<uint64_t>& matched_controls, uint64_t bootstrap_seed = 1);

// exposure = k - log2(rank of the true fill among all 2^k candidates by
// model log-likelihood), exhaustive at desk scale (k <= 20).
double canary_exposure(const ModelParams& model, const CanarySpec& canary);

struct ExtractionItem {
  std::vector<uint8_t> prompt;
  std::vector<uint8_t> suffix;
};

// Greedy-decodes len(suffix) tokens from each prompt; success is an exact
// byte match. Errors on an empty item list.
double targeted_extraction(const ModelParams& model, const std::vector<ExtractionItem>& items);

// Extraction over near-duplicate variants; "not applicable" when none.
std::optional<double> fuzzy_recall(const ModelParams& model,
                                   const std::vector<ExtractionItem>& variant_items);

// exp(mean per-token NLL).
double retain_ppl(const ModelParams& model, const Corpus& corpus,
                  const std::vector<uint64_t>& retain_eval_ids);

struct AuditTestResult {
  std::string name;
  bool applicable = true;
  double metric = 0.0;
  BootstrapCi ci;
  bool pass = false;
  std::string detail;
};

struct AuditReport {
  std::vector<AuditTestResult> tests;
  bool overall_pass = false;
  std::string model_id;
  AuditThresholds thresholds;

  std::string to_json() const;
  static AuditReport from_json(const std::string& text);
};

struct AuditContext {
  const Corpus* corpus = nullptr;
  std::vector<uint64_t> forget_ids;
  std::vector<uint64_t> control_ids;      // length-matched retain controls
  std::vector<uint64_t> retain_eval_ids;  // disjoint from the closure
  std::vector<CanarySpec> canaries;
  std::vector<ExtractionItem> extraction_items;
  std::vector<ExtractionItem> fuzzy_variant_items;
  double baseline_retain_ppl = 0.0;  // utility reference
  uint64_t bootstrap_seed = 1;
  std::string model_id;
};

// Runs all five tests; overall pass is the conjunction of every
// applicable test. Sub-test failures become failed entries with reasons.
AuditReport run_audit_suite(const ModelParams& model, const AuditContext& ctx,
                            const AuditThresholds& thresholds);

// Length-matched control sampling: for each forget doc, the closest
// retain doc by length not yet taken (deterministic).
std::vector<uint64_t> match_controls_by_length(const Corpus& corpus,
                                               const std::vector<uint64_t>& forget_ids,
                                               const std::vector<uint64_t>& retain_pool);

}  // namespace unlearn
