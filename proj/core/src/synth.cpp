#include "cradle/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cradle/distributions.hpp"
#include "cradle/rng.hpp"

namespace cradle {

void SynthConfig::validate() const {
  if (n_cells < 1) throw ConfigError("SynthConfig: n_cells must be positive");
  if (n_genes < 10) throw ConfigError("SynthConfig: n_genes must be >= 10");
  if (n_treatments < 2) throw ConfigError("SynthConfig: need control plus >= 1 treatment");
  if (d_z < 1) throw ConfigError("SynthConfig: d_z must be positive");
  if (mask_density <= 0.0 || mask_density >= 1.0)
    throw ConfigError("SynthConfig: mask_density must lie in (0,1)");
  const auto rate_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
  if (!rate_ok(artifact_prevalence) || !rate_ok(doublet_rate) || !rate_ok(control_fraction))
    throw ConfigError("SynthConfig: rates must lie in [0,1]");
  if (theta <= 0.0) throw ConfigError("SynthConfig: theta must be positive");
  if (hb_shift <= 0.0 || artifact_library_factor <= 0.0)
    throw ConfigError("SynthConfig: artifact shift factors must be positive");
  const int n_flagged = std::max(1, static_cast<int>(std::lround(mito_fraction * n_genes))) +
                        std::max(1, static_cast<int>(std::lround(hb_fraction * n_genes))) +
                        std::max(1, static_cast<int>(std::lround(ribo_fraction * n_genes)));
  if (n_flagged >= n_genes) throw ConfigError("SynthConfig: flagged genes exhaust the panel");
}

namespace {

struct Registry {
  std::vector<std::string> names;                 // column names, control first
  std::vector<Eigen::ArrayXd> patterns;           // drawable multi-hot patterns
  std::vector<std::string> pattern_names;
};

Registry build_registry(const SynthConfig& cfg) {
  Registry reg;
  reg.names.push_back("non-targeting");
  for (int t = 1; t < cfg.n_treatments; ++t) reg.names.push_back("T" + std::to_string(t));

  const auto row_for = [&](const std::vector<int>& idx) {
    Eigen::ArrayXd row = Eigen::ArrayXd::Zero(cfg.n_treatments);
    for (int t : idx) row(t) = 1.0;
    return row;
  };
  // Pattern 0 is control; singles follow; combos last.
  reg.patterns.push_back(row_for({0}));
  reg.pattern_names.push_back("non-targeting");
  for (int t = 1; t < cfg.n_treatments; ++t) {
    reg.patterns.push_back(row_for({t}));
    reg.pattern_names.push_back(reg.names[static_cast<std::size_t>(t)]);
  }
  for (const auto& combo : cfg.combos) {
    std::vector<int> idx;
    std::string piece;
    std::stringstream ss(combo);
    while (std::getline(ss, piece, '+')) {
      auto it = std::find(reg.names.begin(), reg.names.end(), piece);
      if (it == reg.names.end())
        throw ConfigError("SynthConfig: combo '" + combo + "' names unknown treatment '" + piece +
                          "'");
      idx.push_back(static_cast<int>(it - reg.names.begin()));
    }
    if (idx.size() < 2) throw ConfigError("SynthConfig: combo '" + combo + "' is not multi-gene");
    std::vector<std::string> sorted_names;
    for (int t : idx) sorted_names.push_back(reg.names[static_cast<std::size_t>(t)]);
    std::sort(sorted_names.begin(), sorted_names.end());
    std::string canonical;
    for (std::size_t k = 0; k < sorted_names.size(); ++k)
      canonical += (k ? "+" : "") + sorted_names[k];
    reg.patterns.push_back(row_for(idx));
    reg.pattern_names.push_back(canonical);
  }
  return reg;
}

Eigen::ArrayXd softmax(const Eigen::ArrayXd& logits) {
  Eigen::ArrayXd x = logits - logits.maxCoeff();
  x = x.exp();
  return x / x.sum();
}

struct CellDraw {
  Eigen::ArrayXd counts;
  double library = 0;
  bool artifact_shift = false;
  std::size_t pattern_id = 0;
};

}  // namespace

SynthDataset synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  const Registry reg = build_registry(cfg);

  // Truths come from a substream keyed only by the seed and structure, so
  // datasets that differ in prevalence or size share masks/effects/maps.
  Rng truth_rng = Rng::substream(cfg.seed, 1);
  SynthTruth truth;
  truth.mask = Eigen::ArrayXXd::Zero(cfg.n_treatments, cfg.d_z);
  truth.e = Eigen::ArrayXXd::Zero(cfg.n_treatments, cfg.d_z);
  for (int t = 1; t < cfg.n_treatments; ++t) {
    bool any = false;
    for (int k = 0; k < cfg.d_z; ++k) {
      truth.mask(t, k) = truth_rng.bernoulli(cfg.mask_density) ? 1.0 : 0.0;
      any = any || truth.mask(t, k) == 1.0;
    }
    if (!any) truth.mask(t, static_cast<int>(truth_rng.below(static_cast<std::uint64_t>(cfg.d_z)))) = 1.0;
    for (int k = 0; k < cfg.d_z; ++k) truth.e(t, k) = cfg.effect_scale * truth_rng.normal();
  }
  truth.latent_gene_map = truth_rng.normal_array(cfg.d_z, cfg.n_genes) /
                          std::sqrt(static_cast<double>(cfg.d_z));
  truth.gene_baseline = truth_rng.normal_array(1, cfg.n_genes).row(0).transpose();

  // Gene panel: flagged blocks first, then unflagged genes.
  ExpressionMatrix data;
  const int n_mito = std::max(1, static_cast<int>(std::lround(cfg.mito_fraction * cfg.n_genes)));
  const int n_hb = std::max(1, static_cast<int>(std::lround(cfg.hb_fraction * cfg.n_genes)));
  const int n_ribo = std::max(1, static_cast<int>(std::lround(cfg.ribo_fraction * cfg.n_genes)));
  data.gene_flags.is_mito.assign(static_cast<std::size_t>(cfg.n_genes), 0);
  data.gene_flags.is_hemoglobin.assign(static_cast<std::size_t>(cfg.n_genes), 0);
  data.gene_flags.is_ribosomal.assign(static_cast<std::size_t>(cfg.n_genes), 0);
  for (int g = 0; g < cfg.n_genes; ++g) {
    if (g < n_mito) {
      data.gene_ids.push_back("MT" + std::to_string(g));
      data.gene_flags.is_mito[static_cast<std::size_t>(g)] = 1;
    } else if (g < n_mito + n_hb) {
      data.gene_ids.push_back("HB" + std::to_string(g - n_mito));
      data.gene_flags.is_hemoglobin[static_cast<std::size_t>(g)] = 1;
    } else if (g < n_mito + n_hb + n_ribo) {
      data.gene_ids.push_back("RB" + std::to_string(g - n_mito - n_hb));
      data.gene_flags.is_ribosomal[static_cast<std::size_t>(g)] = 1;
    } else {
      data.gene_ids.push_back("G" + std::to_string(g));
    }
  }
  // Unflagged genes get a wide abundance spread (so dropout keeps the
  // feature-count statistic informative). Flagged genes sit at stable
  // baselines with damped latent loadings, keeping the clean percentage
  // statistics tight enough that the MAD rule's false-positive floor stays
  // low while the artifact hb boost stands far outside it.
  truth.u_gene_log_shift = Eigen::ArrayXd::Zero(cfg.n_genes);
  for (int g = 0; g < cfg.n_genes; ++g) {
    const auto gi = static_cast<std::size_t>(g);
    const bool flagged = data.gene_flags.is_mito[gi] || data.gene_flags.is_ribosomal[gi] ||
                         data.gene_flags.is_hemoglobin[gi];
    if (flagged) truth.latent_gene_map.col(g) *= 0.15;
    if (data.gene_flags.is_mito[gi] || data.gene_flags.is_ribosomal[gi]) {
      truth.gene_baseline(g) = 0.25 * truth.gene_baseline(g);
    } else if (data.gene_flags.is_hemoglobin[gi]) {
      truth.gene_baseline(g) = -1.0 + 0.25 * truth.gene_baseline(g);
      truth.u_gene_log_shift(g) = std::log(cfg.hb_shift);
    } else {
      truth.gene_baseline(g) *= cfg.baseline_sd;
    }
  }

  // Noiseless per-pattern ATE on the evaluation scale.
  const Eigen::ArrayXd freq_control = softmax(truth.gene_baseline);
  for (std::size_t pid = 1; pid < reg.patterns.size(); ++pid) {
    Eigen::ArrayXd z_p = Eigen::ArrayXd::Zero(cfg.d_z);
    for (int t = 0; t < cfg.n_treatments; ++t)
      if (reg.patterns[pid](t) != 0.0)
        z_p += (truth.mask.row(t) * truth.e.row(t)).transpose();
    const Eigen::ArrayXd logits =
        truth.gene_baseline + (z_p.matrix().transpose() * truth.latent_gene_map.matrix())
                                  .array()
                                  .transpose();
    const Eigen::ArrayXd freq = softmax(logits);
    truth.true_ate[reg.pattern_names[pid]] =
        (1e4 * freq).unaryExpr([](double v) { return std::log1p(v); }) -
        (1e4 * freq_control).unaryExpr([](double v) { return std::log1p(v); });
  }

  const auto draw_cell = [&](Rng& rng, bool allow_artifact) {
    CellDraw cell;
    cell.pattern_id = rng.uniform() < cfg.control_fraction
                          ? 0
                          : 1 + rng.below(reg.patterns.size() - 1);
    Eigen::ArrayXd z = cfg.basal_scale * rng.normal_array(1, cfg.d_z).row(0).transpose();
    for (int t = 0; t < cfg.n_treatments; ++t)
      if (reg.patterns[cell.pattern_id](t) != 0.0)
        z += (truth.mask.row(t) * truth.e.row(t)).transpose();
    Eigen::ArrayXd logits =
        truth.gene_baseline +
        (z.matrix().transpose() * truth.latent_gene_map.matrix()).array().transpose();
    Eigen::ArrayXd freq = softmax(logits);
    cell.library = std::exp(cfg.lib_log_mean + cfg.lib_log_sd * rng.normal());
    if (allow_artifact && rng.bernoulli(cfg.artifact_prevalence)) {
      cell.artifact_shift = true;
      freq = freq * truth.u_gene_log_shift.exp();
      freq /= freq.sum();
      cell.library *= cfg.artifact_library_factor;
    }
    cell.counts.resize(cfg.n_genes);
    for (int g = 0; g < cfg.n_genes; ++g)
      cell.counts(g) = static_cast<double>(
          gamma_poisson_sample(std::max(freq(g) * cell.library, 1e-12), cfg.theta, rng));
    return cell;
  };

  data.counts.resize(cfg.n_cells, cfg.n_genes);
  PerturbationSet perts;
  perts.treatment_names = reg.names;
  perts.control_index = 0;
  perts.assignments = Eigen::ArrayXXd::Zero(cfg.n_cells, cfg.n_treatments);

  SynthDataset ds;
  ds.doublets.assign(static_cast<std::size_t>(cfg.n_cells), 0);
  truth.artifact.assign(static_cast<std::size_t>(cfg.n_cells), 0);
  truth.doublet.assign(static_cast<std::size_t>(cfg.n_cells), 0);
  truth.pattern.resize(static_cast<std::size_t>(cfg.n_cells));

  for (int i = 0; i < cfg.n_cells; ++i) {
    Rng cell_rng = Rng::substream(cfg.seed, 1000 + static_cast<std::uint64_t>(i));
    CellDraw cell = draw_cell(cell_rng, true);
    bool is_doublet = cell_rng.bernoulli(cfg.doublet_rate);
    if (is_doublet) {
      Rng partner_rng = Rng::substream(cfg.seed, 500000 + static_cast<std::uint64_t>(i));
      const CellDraw partner = draw_cell(partner_rng, false);
      cell.counts += partner.counts;
    }
    // A cell with every count zero is not a valid observation; keep one read.
    if (cell.counts.sum() == 0.0) cell.counts(0) = 1.0;

    const auto ii = static_cast<std::size_t>(i);
    data.counts.row(i) = cell.counts.transpose();
    perts.assignments.row(i) = reg.patterns[cell.pattern_id].transpose();
    ds.doublets[ii] = is_doublet ? 1 : 0;
    truth.doublet[ii] = is_doublet ? 1 : 0;
    truth.artifact[ii] = (cell.artifact_shift || is_doublet) ? 1 : 0;
    truth.pattern[ii] = reg.pattern_names[cell.pattern_id];
    data.cell_ids.push_back("cell_" + std::to_string(i));
  }

  data.validate();
  perts.validate();
  ds.data = std::move(data);
  ds.perts = std::move(perts);
  ds.truth = std::move(truth);
  return ds;
}

void write_synth_dataset(const std::string& dir, const SynthDataset& ds) {
  std::filesystem::create_directories(dir);
  const auto path = [&](const char* name) { return (std::filesystem::path(dir) / name).string(); };
  write_counts_csv(path("counts.csv"), ds.data);
  write_counts_mtx(path("counts.mtx"), ds.data);
  write_genes_csv(path("genes.csv"), ds.data);
  write_perturbations_csv(path("perts.csv"), ds.perts, ds.data.cell_ids);
  write_doublets_csv(path("doublets.csv"), ds.data.cell_ids, ds.doublets);

  nlohmann::json j;
  std::vector<std::vector<double>> mask_rows, e_rows, map_rows;
  for (Eigen::Index i = 0; i < ds.truth.mask.rows(); ++i) {
    std::vector<double> mr, er;
    for (Eigen::Index k = 0; k < ds.truth.mask.cols(); ++k) {
      mr.push_back(ds.truth.mask(i, k));
      er.push_back(ds.truth.e(i, k));
    }
    mask_rows.push_back(mr);
    e_rows.push_back(er);
  }
  for (Eigen::Index i = 0; i < ds.truth.latent_gene_map.rows(); ++i) {
    std::vector<double> row;
    for (Eigen::Index k = 0; k < ds.truth.latent_gene_map.cols(); ++k)
      row.push_back(ds.truth.latent_gene_map(i, k));
    map_rows.push_back(row);
  }
  j["mask"] = mask_rows;
  j["e"] = e_rows;
  j["latent_gene_map"] = map_rows;
  j["gene_baseline"] =
      std::vector<double>(ds.truth.gene_baseline.data(),
                          ds.truth.gene_baseline.data() + ds.truth.gene_baseline.size());
  j["u_gene_log_shift"] =
      std::vector<double>(ds.truth.u_gene_log_shift.data(),
                          ds.truth.u_gene_log_shift.data() + ds.truth.u_gene_log_shift.size());
  j["artifact"] = ds.truth.artifact;
  j["doublet"] = ds.truth.doublet;
  j["pattern"] = ds.truth.pattern;
  nlohmann::json ate = nlohmann::json::object();
  for (const auto& [name, effect] : ds.truth.true_ate)
    ate[name] = std::vector<double>(effect.data(), effect.data() + effect.size());
  j["true_ate"] = ate;
  std::ofstream out((std::filesystem::path(dir) / "truth.json").string());
  if (!out) throw DataError("cannot write truth.json in '" + dir + "'");
  out << j.dump(2) << '\n';
}

double QcConfusion::recall() const {
  const long denom = true_artifact_qc_fail + true_artifact_qc_pass;
  return denom == 0 ? 0.0 : static_cast<double>(true_artifact_qc_fail) / static_cast<double>(denom);
}

double QcConfusion::false_positive_rate() const {
  const long denom = clean_qc_fail + clean_qc_pass;
  return denom == 0 ? 0.0 : static_cast<double>(clean_qc_fail) / static_cast<double>(denom);
}

QcConfusion synth_qc_consistency(const SynthDataset& ds, const QcConfig& cfg) {
  const QcReport report = qc_evaluate(ds.data, ds.doublets, cfg);
  QcConfusion confusion;
  for (std::size_t i = 0; i < report.artifact_label.size(); ++i) {
    const bool truly = ds.truth.artifact[i] == 1;
    const bool flagged = report.artifact_label[i] == 1;
    if (truly && flagged) ++confusion.true_artifact_qc_fail;
    if (truly && !flagged) ++confusion.true_artifact_qc_pass;
    if (!truly && flagged) ++confusion.clean_qc_fail;
    if (!truly && !flagged) ++confusion.clean_qc_pass;
  }
  return confusion;
}

}  // namespace cradle
