#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cradle/data.hpp"

namespace cradle {

/// The five MAD-thresholded sub-criteria; doublet detection is the sixth.
enum QcCriterion : int {
  kUmiCount = 0,
  kNFeatures = 1,
  kPctMito = 2,
  kPctHemoglobin = 3,
  kPctRibosomal = 4,
  kDoublet = 5,
};
constexpr int kNumQcCriteria = 6;
const char* qc_criterion_name(int c);

struct QcConfig {
  double n_mads = 3.0;
  double mad_scale = 1.4826;  // consistency constant; 1.0 gives the raw MAD
  // Sidedness of the five MAD criteria. One-sided criteria cut high values
  // only. Defaults: umi/features/ribo two-sided, mito/hb upper-only.
  std::array<bool, 5> two_sided = {true, true, false, false, true};
  bool exclude_doublets_from_pools = false;

  void validate() const;
};

/// Per-cell raw QC statistics. Percent fields are in [0,100].
struct QcStats {
  Eigen::ArrayXd umi_count, n_features, pct_mito, pct_hb, pct_ribo;
  Eigen::Index n_cells() const { return umi_count.size(); }
};

struct QcThresholds {
  // lo/hi per MAD criterion; lo is -inf for one-sided criteria.
  std::array<double, 5> lo{}, hi{};
};

struct QcReport {
  QcStats stats;
  std::vector<std::uint8_t> is_doublet;
  // pass[c] per criterion per cell.
  std::array<std::vector<std::uint8_t>, kNumQcCriteria> pass;
  std::vector<std::uint8_t> artifact_label;  // a_i = 0 iff all six pass
  QcThresholds thresholds;
};

/// (median - n*smad, median + n*smad), smad = mad_scale * median(|v - med|).
/// Medians of even-length inputs are the mean of the two central order
/// statistics.
std::pair<double, double> mad_threshold(const Eigen::ArrayXd& values, double n_mads,
                                        double mad_scale);

QcStats compute_qc_stats(const ExpressionMatrix& m);
QcThresholds fit_qc_thresholds(const QcStats& stats, const std::vector<std::uint8_t>& is_doublet,
                               const QcConfig& cfg);
QcReport apply_qc_thresholds(const QcStats& stats, const std::vector<std::uint8_t>& is_doublet,
                             const QcThresholds& thr);

/// Fits thresholds on this dataset and applies them to it.
QcReport qc_evaluate(const ExpressionMatrix& m, const std::vector<std::uint8_t>& is_doublet,
                     const QcConfig& cfg);

std::vector<std::uint8_t> artifact_labels(const QcReport& report);
double qc_pass_rate(const std::vector<std::uint8_t>& labels);

void write_qc_report_csv(const std::string& path, const QcReport& report,
                         const std::vector<std::string>& cell_ids);

}  // namespace cradle
