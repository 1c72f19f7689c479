#include "cradle/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

namespace cradle {

namespace {
constexpr double kCpmScale = 1e4;

Eigen::ArrayXd mean_log_cpm(const CountMatrix& counts) {
  Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(counts.cols());
  for (Eigen::Index i = 0; i < counts.rows(); ++i) {
    const double lib = counts.row(i).sum();
    if (lib <= 0.0) throw DataError("average_treatment_effect: cell with zero library size");
    acc += (counts.row(i) * (kCpmScale / lib)).unaryExpr([](double v) { return std::log1p(v); })
               .transpose();
  }
  return acc / static_cast<double>(counts.rows());
}
}  // namespace

AteVector average_treatment_effect(const CountMatrix& treated, const CountMatrix& control,
                                   const std::string& treatment) {
  if (treated.rows() == 0 || control.rows() == 0)
    throw DataError("average_treatment_effect: empty group");
  if (treated.cols() != control.cols())
    throw DataError("average_treatment_effect: gene count mismatch");
  AteVector ate;
  ate.treatment = treatment;
  ate.n_treated = static_cast<int>(treated.rows());
  ate.n_control = static_cast<int>(control.rows());
  ate.effect = mean_log_cpm(treated) - mean_log_cpm(control);
  return ate;
}

double ate_pearson(const AteVector& pred, const AteVector& truth) {
  const auto& x = pred.effect;
  const auto& y = truth.effect;
  if (x.size() != y.size() || x.size() < 2) throw DataError("ate_pearson: bad vector lengths");
  const double mx = x.mean(), my = y.mean();
  const double sxx = (x - mx).square().sum();
  const double syy = (y - my).square().sum();
  if (sxx <= 0.0 || syy <= 0.0) throw DataError("ate_pearson: zero variance");
  return ((x - mx) * (y - my)).sum() / std::sqrt(sxx * syy);
}

double ate_r2(const AteVector& pred, const AteVector& truth) {
  const auto& p = pred.effect;
  const auto& t = truth.effect;
  if (p.size() != t.size() || p.size() < 2) throw DataError("ate_r2: bad vector lengths");
  const double ss_tot = (t - t.mean()).square().sum();
  if (ss_tot <= 0.0) throw DataError("ate_r2: constant truth");
  return 1.0 - (t - p).square().sum() / ss_tot;
}

double jaccard_top_k(const AteVector& pred, const AteVector& truth, int k) {
  if (pred.effect.size() != truth.effect.size()) throw DataError("jaccard_top_k: length mismatch");
  if (k <= 0 || k > pred.effect.size()) throw DataError("jaccard_top_k: k out of range");
  const auto top = [&](const Eigen::ArrayXd& e) {
    std::vector<int> idx(static_cast<std::size_t>(e.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      const double da = std::abs(e(a)), db = std::abs(e(b));
      return da != db ? da > db : a < b;
    });
    return std::set<int>(idx.begin(), idx.begin() + k);
  };
  const auto a = top(pred.effect);
  const auto b = top(truth.effect);
  std::size_t inter = 0;
  for (int g : a) inter += b.count(g);
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

namespace {

Eigen::ArrayXXd pattern_row(const std::string& pattern,
                            const std::vector<std::string>& registry) {
  Eigen::ArrayXXd row = Eigen::ArrayXXd::Zero(1, static_cast<Eigen::Index>(registry.size()));
  std::string piece;
  std::stringstream ss(pattern);
  while (std::getline(ss, piece, '+')) {
    auto it = std::find(registry.begin(), registry.end(), piece);
    if (it == registry.end()) throw DataError("unknown treatment '" + piece + "'");
    row(0, static_cast<Eigen::Index>(it - registry.begin())) = 1.0;
  }
  return row;
}

CountMatrix rows_of(const CountMatrix& m, const std::vector<int>& idx) {
  CountMatrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(idx[k]);
  return out;
}

}  // namespace

EvalReport evaluate(const ModelBundle& bundle, const ExpressionMatrix& data,
                    const PerturbationSet& perts, const Split& split, const EvalOptions& opts) {
  if (!bundle.model) throw DataError("evaluate: missing model");
  if (!perts.control_index)
    throw DataError("evaluate: perturbation set has no control (non-targeting) column");
  const Model& model = *bundle.model;
  const auto& registry = bundle.treatment_names;
  if (registry != perts.treatment_names)
    throw DataError("evaluate: model treatment registry does not match the dataset");

  EvalReport report;
  report.n_generated_per_treatment = opts.n_generated_per_treatment;
  report.seed = opts.seed;
  report.jaccard_k = std::min<int>(opts.jaccard_k, static_cast<int>(data.n_genes()));

  // Real control cells (whole dataset): the measured reference condition.
  const std::string control_name = registry[static_cast<std::size_t>(*perts.control_index)];
  std::vector<int> control_cells;
  for (Eigen::Index i = 0; i < perts.n_cells(); ++i)
    if (perts.pattern_name(i) == control_name) control_cells.push_back(static_cast<int>(i));
  if (control_cells.empty()) throw DataError("evaluate: no control cells in dataset");
  const CountMatrix control_counts = rows_of(data.counts, control_cells);

  // Test patterns and their cells.
  std::map<std::string, std::vector<int>> test_cells;
  for (int i : split.test_indices) {
    const std::string name = perts.pattern_name(i);
    if (name == control_name || name.empty()) continue;
    test_cells[name].push_back(i);
  }
  std::vector<std::string> targets;
  if (opts.requested_treatments.empty()) {
    for (const auto& [name, cells] : test_cells) targets.push_back(name);
  } else {
    targets = opts.requested_treatments;
  }

  // One generated control pool shared by every treatment.
  Rng ctrl_rng = Rng::substream(opts.seed, 0xC011);
  const Eigen::ArrayXXd ctrl_row = pattern_row(control_name, registry);
  Eigen::ArrayXXd ctrl_rows(opts.n_generated_per_treatment, ctrl_row.cols());
  for (Eigen::Index r = 0; r < ctrl_rows.rows(); ++r) ctrl_rows.row(r) = ctrl_row.row(0);
  const CountMatrix gen_control =
      model.generate(ctrl_rows, bundle.median_train_library, ctrl_rng, 0);

  std::vector<CountMatrix> generated_pool{gen_control};
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    const std::string& name = targets[ti];
    TreatmentEval te;
    te.treatment = name;
    auto cells_it = test_cells.find(name);
    if (cells_it == test_cells.end()) {
      te.skipped = true;
      te.skip_reason = "treatment absent from test split";
      report.treatments.push_back(std::move(te));
      continue;
    }
    te.n_test_cells = static_cast<int>(cells_it->second.size());

    Rng rng = Rng::substream(opts.seed, 1 + ti);
    const Eigen::ArrayXXd row = pattern_row(name, registry);
    Eigen::ArrayXXd rows(opts.n_generated_per_treatment, row.cols());
    for (Eigen::Index r = 0; r < rows.rows(); ++r) rows.row(r) = row.row(0);
    const CountMatrix gen_treated = model.generate(rows, bundle.median_train_library, rng, 0);
    generated_pool.push_back(gen_treated);

    try {
      te.predicted = average_treatment_effect(gen_treated, gen_control, name);
      te.truth = average_treatment_effect(rows_of(data.counts, cells_it->second),
                                          control_counts, name);
      te.true_ate_norm = std::sqrt(te.truth.effect.square().sum());
      te.ate_rho = ate_pearson(te.predicted, te.truth);
      te.ate_r2 = ate_r2(te.predicted, te.truth);
      te.jaccard = jaccard_top_k(te.predicted, te.truth, report.jaccard_k);
    } catch (const DataError& e) {
      te.skipped = true;
      te.skip_reason = e.what();
    }
    report.treatments.push_back(std::move(te));
  }

  // Aggregates over scored treatments.
  std::vector<const TreatmentEval*> scored;
  for (const auto& te : report.treatments)
    if (!te.skipped) scored.push_back(&te);
  const auto mean_over = [](const std::vector<const TreatmentEval*>& v, auto field) {
    double acc = 0;
    for (const auto* te : v) acc += field(*te);
    return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
  };
  report.mean_rho = mean_over(scored, [](const TreatmentEval& t) { return t.ate_rho; });
  report.mean_r2 = mean_over(scored, [](const TreatmentEval& t) { return t.ate_r2; });
  report.mean_jaccard = mean_over(scored, [](const TreatmentEval& t) { return t.jaccard; });

  std::vector<const TreatmentEval*> ranked = scored;
  std::sort(ranked.begin(), ranked.end(), [](const TreatmentEval* a, const TreatmentEval* b) {
    return a->true_ate_norm != b->true_ate_norm ? a->true_ate_norm > b->true_ate_norm
                                                : a->treatment < b->treatment;
  });
  if (ranked.size() > 20) ranked.resize(20);
  report.top20_rho = mean_over(ranked, [](const TreatmentEval& t) { return t.ate_rho; });
  report.top20_r2 = mean_over(ranked, [](const TreatmentEval& t) { return t.ate_r2; });
  report.top20_jaccard = mean_over(ranked, [](const TreatmentEval& t) { return t.jaccard; });

  // QCPR of everything generated, thresholds fitted on the training split.
  Eigen::Index total_rows = 0;
  for (const auto& g : generated_pool) total_rows += g.rows();
  report.generated.counts.resize(total_rows, data.n_genes());
  Eigen::Index at = 0;
  for (const auto& g : generated_pool) {
    report.generated.counts.middleRows(at, g.rows()) = g;
    at += g.rows();
  }
  report.generated.gene_ids = data.gene_ids;
  report.generated.gene_flags = data.gene_flags;
  for (Eigen::Index i = 0; i < total_rows; ++i)
    report.generated.cell_ids.push_back("gen_" + std::to_string(i));

  CountMatrix train_counts = rows_of(data.counts, split.train_indices);
  ExpressionMatrix train_view;
  train_view.counts = std::move(train_counts);
  train_view.gene_ids = data.gene_ids;
  train_view.gene_flags = data.gene_flags;
  for (Eigen::Index i = 0; i < train_view.counts.rows(); ++i)
    train_view.cell_ids.push_back("train_" + std::to_string(i));
  const QcStats train_stats = compute_qc_stats(train_view);
  const QcStats gen_stats = compute_qc_stats(report.generated);
  const std::vector<std::uint8_t> train_doublets(
      static_cast<std::size_t>(train_view.counts.rows()), 0);
  const std::vector<std::uint8_t> gen_doublets(static_cast<std::size_t>(total_rows), 0);
  for (double n_mads : opts.n_mads_list) {
    QcConfig cfg = opts.qc;
    cfg.n_mads = n_mads;
    const QcThresholds thr = fit_qc_thresholds(train_stats, train_doublets, cfg);
    const QcReport qrep = apply_qc_thresholds(gen_stats, gen_doublets, thr);
    report.qcpr[n_mads] = qc_pass_rate(qrep.artifact_label);
  }
  return report;
}

void write_eval_report_json(const std::string& path, const EvalReport& report) {
  nlohmann::json j;
  j["normalization"] = "log1p(counts / library_size * 1e4)";
  j["ranking"] = "top-20 treatments by true-ATE L2 norm";
  j["n_generated_per_treatment"] = report.n_generated_per_treatment;
  j["seed"] = report.seed;
  j["jaccard_k"] = report.jaccard_k;
  j["mean"] = {{"ate_rho", report.mean_rho},
               {"ate_r2", report.mean_r2},
               {"jaccard", report.mean_jaccard}};
  j["top20"] = {{"ate_rho", report.top20_rho},
                {"ate_r2", report.top20_r2},
                {"jaccard", report.top20_jaccard}};
  nlohmann::json qcpr = nlohmann::json::object();
  for (const auto& [n_mads, rate] : report.qcpr) {
    std::ostringstream key;
    key << n_mads;
    qcpr[key.str()] = rate;
  }
  j["qcpr"] = qcpr;
  j["treatments"] = nlohmann::json::array();
  for (const auto& te : report.treatments) {
    j["treatments"].push_back({{"name", te.treatment},
                               {"n_test_cells", te.n_test_cells},
                               {"skipped", te.skipped},
                               {"reason", te.skip_reason},
                               {"ate_rho", te.ate_rho},
                               {"ate_r2", te.ate_r2},
                               {"jaccard", te.jaccard},
                               {"true_ate_norm", te.true_ate_norm}});
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
}

void write_eval_summary_csv(const std::string& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.precision(17);
  out << "treatment,n_test_cells,ate_rho,ate_r2,jaccard,true_ate_norm,skipped,reason\n";
  for (const auto& te : report.treatments) {
    out << te.treatment << ',' << te.n_test_cells << ',' << te.ate_rho << ',' << te.ate_r2 << ','
        << te.jaccard << ',' << te.true_ate_norm << ',' << (te.skipped ? 1 : 0) << ','
        << te.skip_reason << '\n';
  }
}

void write_latents_csv(const std::string& path, const Model& model, const ExpressionMatrix& data,
                       const PerturbationSet& perts,
                       const std::vector<std::uint8_t>& artifact_labels, std::uint64_t seed) {
  if (data.n_cells() != perts.n_cells() ||
      static_cast<Eigen::Index>(artifact_labels.size()) != data.n_cells())
    throw DataError("write_latents_csv: row count mismatch");
  Batch batch;
  batch.x = data.counts;
  batch.p = perts.assignments;
  batch.a.resize(data.n_cells());
  for (Eigen::Index i = 0; i < data.n_cells(); ++i)
    batch.a(i) = static_cast<double>(artifact_labels[static_cast<std::size_t>(i)]);
  batch.lib = library_sizes(data);

  Rng rng = Rng::substream(seed, 0x1A7E);
  const GlobalSample globals = model.sample_globals(0.5, true, rng);
  const EncodeResult enc = model.encode(batch, globals, rng);

  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.precision(10);
  const int dz = model.config().d_z;
  out << "cell_id,a,treatment";
  for (int k = 0; k < dz; ++k) out << ",z_b" << k;
  for (int k = 0; k < dz; ++k) out << ",z_p" << k;
  for (int k = 0; k < dz; ++k) out << ",z_a" << k;
  out << '\n';
  for (Eigen::Index i = 0; i < data.n_cells(); ++i) {
    out << data.cell_ids[static_cast<std::size_t>(i)] << ','
        << int(artifact_labels[static_cast<std::size_t>(i)]) << ',' << perts.pattern_name(i);
    for (int k = 0; k < dz; ++k) out << ',' << enc.z_b.value()(i, k);
    for (int k = 0; k < dz; ++k) out << ',' << enc.z_p.value()(i, k);
    for (int k = 0; k < dz; ++k) out << ',' << enc.z_a.value()(i, k);
    out << '\n';
  }
}

}  // namespace cradle
