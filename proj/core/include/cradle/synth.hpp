#pragma once

#include <map>
#include <string>
#include <vector>

#include "cradle/data.hpp"
#include "cradle/qc.hpp"

namespace cradle {

/// Ground-truth generator configuration. The latent family mirrors the
/// model's own generative process: sparse-masked additive treatment effects
/// in latent space, a fixed random latent-to-gene map with softmax
/// frequencies, and Gamma-Poisson counts. Artifact cells get a hemoglobin
/// frequency boost and a shrunken library; doublets are sums of two cells.
struct SynthConfig {
  int n_cells = 2000;
  int n_genes = 50;
  int n_treatments = 6;  // includes the non-targeting control column
  int d_z = 8;
  double mask_density = 0.5;
  double effect_scale = 1.0;
  double basal_scale = 0.6;   // weight of z_b in the gene logits
  double baseline_sd = 2.0;   // abundance spread of unflagged genes
  double artifact_prevalence = 0.3;
  double hb_shift = 20.0;              // multiplicative boost on hb-gene frequency
  double artifact_library_factor = 0.2;
  double doublet_rate = 0.05;
  double lib_log_mean = 8.5172;  // log(5000)
  double lib_log_sd = 0.3;
  double control_fraction = 0.25;
  std::vector<std::string> combos = {"T1+T2", "T3+T4"};
  double theta = 2.0;  // Gamma-Poisson inverse dispersion
  double mito_fraction = 0.16, hb_fraction = 0.06, ribo_fraction = 0.16;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthTruth {
  Eigen::ArrayXXd mask;  // T x d_z binary
  Eigen::ArrayXXd e;     // T x d_z
  Eigen::ArrayXd gene_baseline;     // D_x logits
  Eigen::ArrayXXd latent_gene_map;  // d_z x D_x
  Eigen::ArrayXd u_gene_log_shift;  // per-gene log frequency shift of artifacts
  std::vector<std::uint8_t> artifact;  // a*: shift applied or doublet
  std::vector<std::uint8_t> doublet;
  std::vector<std::string> pattern;  // per-cell treatment pattern name
  std::map<std::string, Eigen::ArrayXd> true_ate;  // noiseless, eval scale
};

struct SynthDataset {
  ExpressionMatrix data;
  PerturbationSet perts;
  std::vector<std::uint8_t> doublets;
  SynthTruth truth;
};

/// Deterministic by seed; per-cell streams are derived from (seed, cell), so
/// the draw for cell i does not depend on any other cell.
SynthDataset synth_generate(const SynthConfig& cfg);

/// Writes counts.csv, counts.mtx, genes.csv, perts.csv, doublets.csv and
/// truth.json into a directory.
void write_synth_dataset(const std::string& dir, const SynthDataset& ds);

struct QcConfusion {
  long true_artifact_qc_fail = 0;   // injected artifact flagged by QC
  long true_artifact_qc_pass = 0;   // injected artifact missed
  long clean_qc_fail = 0;           // false positive
  long clean_qc_pass = 0;
  double recall() const;
  double false_positive_rate() const;
};

/// Runs the QC engine on the synthetic data and scores it against the
/// injected ground-truth artifact labels.
QcConfusion synth_qc_consistency(const SynthDataset& ds, const QcConfig& cfg);

}  // namespace cradle
