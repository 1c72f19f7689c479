#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cradle/model.hpp"
#include "cradle/qc.hpp"
#include "cradle/train.hpp"

namespace cradle {

struct AteVector {
  Eigen::ArrayXd effect;  // per gene, log1p(counts/library * 1e4) scale
  std::string treatment;
  int n_treated = 0, n_control = 0;
};

/// Per-gene mean log1p(CPM) difference, treated minus control, with
/// CPM = counts / library_size * 1e4.
AteVector average_treatment_effect(const CountMatrix& treated, const CountMatrix& control,
                                   const std::string& treatment = "");

double ate_pearson(const AteVector& pred, const AteVector& truth);
/// 1 - SS_res/SS_tot with pred as the predictor of truth; can be negative.
double ate_r2(const AteVector& pred, const AteVector& truth);
/// Jaccard of the two top-k sets ranked by |effect| (ties by gene index).
double jaccard_top_k(const AteVector& pred, const AteVector& truth, int k);

struct TreatmentEval {
  std::string treatment;
  int n_test_cells = 0;
  bool skipped = false;
  std::string skip_reason;
  double ate_rho = 0, ate_r2 = 0, jaccard = 0;
  double true_ate_norm = 0;
  AteVector predicted, truth;
};

struct EvalReport {
  std::vector<TreatmentEval> treatments;
  double mean_rho = 0, mean_r2 = 0, mean_jaccard = 0;
  // Same metrics over the 20 treatments with the largest true-ATE L2 norm.
  double top20_rho = 0, top20_r2 = 0, top20_jaccard = 0;
  std::map<double, double> qcpr;  // keyed by n_mads
  int n_generated_per_treatment = 0;
  std::uint64_t seed = 0;
  int jaccard_k = 50;
  /// Pooled generated cells (all treatments plus control), for export and
  /// for cross-checking QCPR against the qc module.
  ExpressionMatrix generated;
};

struct EvalOptions {
  int n_generated_per_treatment = 512;
  std::vector<double> n_mads_list = {3.0, 4.0, 5.0};
  QcConfig qc;  // n_mads field is overridden per list entry
  std::uint64_t seed = 0;
  int jaccard_k = 50;
  /// Evaluate only these patterns; default: every non-control pattern in the
  /// test split. Patterns absent from the test split are reported as skipped.
  std::vector<std::string> requested_treatments;
};

/// Generates responses for each test treatment (artifact flag 0), scores them
/// against the held-out cells, and computes the QC pass rate of everything
/// generated under thresholds fitted on the training split.
EvalReport evaluate(const ModelBundle& bundle, const ExpressionMatrix& data,
                    const PerturbationSet& perts, const Split& split, const EvalOptions& opts);

void write_eval_report_json(const std::string& path, const EvalReport& report);
void write_eval_summary_csv(const std::string& path, const EvalReport& report);

/// latents.csv: per-cell encodings under a fixed-seed posterior sample.
void write_latents_csv(const std::string& path, const Model& model,
                       const ExpressionMatrix& data, const PerturbationSet& perts,
                       const std::vector<std::uint8_t>& artifact_labels, std::uint64_t seed);

}  // namespace cradle
