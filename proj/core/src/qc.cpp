#include "cradle/qc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

namespace cradle {

const char* qc_criterion_name(int c) {
  switch (c) {
    case kUmiCount: return "umi_count";
    case kNFeatures: return "n_features";
    case kPctMito: return "pct_mito";
    case kPctHemoglobin: return "pct_hb";
    case kPctRibosomal: return "pct_ribo";
    case kDoublet: return "doublet";
  }
  return "?";
}

void QcConfig::validate() const {
  if (n_mads < 0.0) throw DataError("QcConfig: n_mads must be nonnegative");
  if (mad_scale <= 0.0) throw DataError("QcConfig: mad_scale must be positive");
}

namespace {

double median_sorted(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

}  // namespace

std::pair<double, double> mad_threshold(const Eigen::ArrayXd& values, double n_mads,
                                        double mad_scale) {
  if (values.size() == 0) throw DataError("mad_threshold: empty input");
  std::vector<double> v(values.data(), values.data() + values.size());
  const double med = median_sorted(v);
  std::vector<double> dev(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) dev[i] = std::abs(v[i] - med);
  const double smad = mad_scale * median_sorted(dev);
  return {med - n_mads * smad, med + n_mads * smad};
}

QcStats compute_qc_stats(const ExpressionMatrix& m) {
  m.validate();
  const Eigen::Index n = m.n_cells();
  QcStats s;
  s.umi_count = library_sizes(m);  // zero library sizes error out here
  s.n_features.resize(n);
  s.pct_mito.resize(n);
  s.pct_hb.resize(n);
  s.pct_ribo.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double features = 0.0, mito = 0.0, hb = 0.0, ribo = 0.0;
    for (Eigen::Index g = 0; g < m.n_genes(); ++g) {
      const double c = m.counts(i, g);
      if (c > 0.0) features += 1.0;
      const auto gi = static_cast<std::size_t>(g);
      if (m.gene_flags.is_mito[gi]) mito += c;
      if (m.gene_flags.is_hemoglobin[gi]) hb += c;
      if (m.gene_flags.is_ribosomal[gi]) ribo += c;
    }
    s.n_features(i) = features;
    s.pct_mito(i) = 100.0 * mito / s.umi_count(i);
    s.pct_hb(i) = 100.0 * hb / s.umi_count(i);
    s.pct_ribo(i) = 100.0 * ribo / s.umi_count(i);
  }
  return s;
}

QcThresholds fit_qc_thresholds(const QcStats& stats, const std::vector<std::uint8_t>& is_doublet,
                               const QcConfig& cfg) {
  cfg.validate();
  if (static_cast<Eigen::Index>(is_doublet.size()) != stats.n_cells())
    throw DataError("fit_qc_thresholds: doublet flag length mismatch");

  const Eigen::ArrayXd* fields[5] = {&stats.umi_count, &stats.n_features, &stats.pct_mito,
                                     &stats.pct_hb, &stats.pct_ribo};
  QcThresholds thr;
  for (int c = 0; c < 5; ++c) {
    Eigen::ArrayXd pool;
    if (cfg.exclude_doublets_from_pools) {
      std::vector<double> keep;
      for (Eigen::Index i = 0; i < stats.n_cells(); ++i)
        if (!is_doublet[static_cast<std::size_t>(i)]) keep.push_back((*fields[c])(i));
      if (keep.empty()) throw DataError("fit_qc_thresholds: doublet-free pool is empty");
      pool = Eigen::Map<Eigen::ArrayXd>(keep.data(), static_cast<Eigen::Index>(keep.size()));
    } else {
      pool = *fields[c];
    }
    auto [lo, hi] = mad_threshold(pool, cfg.n_mads, cfg.mad_scale);
    thr.lo[static_cast<std::size_t>(c)] =
        cfg.two_sided[static_cast<std::size_t>(c)] ? lo : -std::numeric_limits<double>::infinity();
    thr.hi[static_cast<std::size_t>(c)] = hi;
  }
  return thr;
}

QcReport apply_qc_thresholds(const QcStats& stats, const std::vector<std::uint8_t>& is_doublet,
                             const QcThresholds& thr) {
  if (static_cast<Eigen::Index>(is_doublet.size()) != stats.n_cells())
    throw DataError("apply_qc_thresholds: doublet flag length mismatch");
  const Eigen::Index n = stats.n_cells();
  const Eigen::ArrayXd* fields[5] = {&stats.umi_count, &stats.n_features, &stats.pct_mito,
                                     &stats.pct_hb, &stats.pct_ribo};
  QcReport rep;
  rep.stats = stats;
  rep.is_doublet = is_doublet;
  rep.thresholds = thr;
  for (auto& p : rep.pass) p.assign(static_cast<std::size_t>(n), 0);
  rep.artifact_label.assign(static_cast<std::size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto ii = static_cast<std::size_t>(i);
    bool all_pass = true;
    for (int c = 0; c < 5; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const double v = (*fields[c])(i);
      const bool ok = v >= thr.lo[ci] && v <= thr.hi[ci];
      rep.pass[ci][ii] = ok ? 1 : 0;
      all_pass = all_pass && ok;
    }
    const bool not_doublet = is_doublet[ii] == 0;
    rep.pass[kDoublet][ii] = not_doublet ? 1 : 0;
    all_pass = all_pass && not_doublet;
    rep.artifact_label[ii] = all_pass ? 0 : 1;
  }
  return rep;
}

QcReport qc_evaluate(const ExpressionMatrix& m, const std::vector<std::uint8_t>& is_doublet,
                     const QcConfig& cfg) {
  const QcStats stats = compute_qc_stats(m);
  const QcThresholds thr = fit_qc_thresholds(stats, is_doublet, cfg);
  return apply_qc_thresholds(stats, is_doublet, thr);
}

std::vector<std::uint8_t> artifact_labels(const QcReport& report) { return report.artifact_label; }

double qc_pass_rate(const std::vector<std::uint8_t>& labels) {
  if (labels.empty()) throw DataError("qc_pass_rate: empty label array");
  std::size_t pass = 0;
  for (auto a : labels)
    if (a == 0) ++pass;
  return static_cast<double>(pass) / static_cast<double>(labels.size());
}

void write_qc_report_csv(const std::string& path, const QcReport& report,
                         const std::vector<std::string>& cell_ids) {
  if (static_cast<Eigen::Index>(cell_ids.size()) != report.stats.n_cells())
    throw DataError("write_qc_report_csv: cell id count mismatch");
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.precision(17);
  out << "#thresholds";
  for (int c = 0; c < 5; ++c)
    out << ',' << qc_criterion_name(c) << ":lo=" << report.thresholds.lo[static_cast<std::size_t>(c)]
        << ";hi=" << report.thresholds.hi[static_cast<std::size_t>(c)];
  out << '\n';
  out << "cell_id,umi_count,n_features,pct_mito,pct_hb,pct_ribo,is_doublet";
  for (int c = 0; c < kNumQcCriteria; ++c) out << ",pass_" << qc_criterion_name(c);
  out << ",artifact\n";
  for (Eigen::Index i = 0; i < report.stats.n_cells(); ++i) {
    const auto ii = static_cast<std::size_t>(i);
    out << cell_ids[ii] << ',' << report.stats.umi_count(i) << ',' << report.stats.n_features(i)
        << ',' << report.stats.pct_mito(i) << ',' << report.stats.pct_hb(i) << ','
        << report.stats.pct_ribo(i) << ',' << int(report.is_doublet[ii]);
    for (int c = 0; c < kNumQcCriteria; ++c)
      out << ',' << int(report.pass[static_cast<std::size_t>(c)][ii]);
    out << ',' << int(report.artifact_label[ii]) << '\n';
  }
}

}  // namespace cradle
