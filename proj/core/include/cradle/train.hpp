#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cradle/checkpoint.hpp"
#include "cradle/model.hpp"

namespace cradle {

struct TrainConfig {
  double alpha = 1.0;       // weight of the counterfactual alignment loss
  double beta = 0.5;        // weight of the KL terms inside the ELBO
  int particles = 5;
  int epochs = 2000;
  int batch_size = 512;
  double lr = 3e-4;
  double clip_norm = 100.0;
  std::uint64_t seed = 0;
  double qc_n_mads = 3.0;
  double temp_start = 1.0;  // relaxed-mask temperature, annealed linearly
  double temp_end = 0.5;
  int anneal_epochs = 0;     // schedule horizon; 0 means epochs (set this when
                             // a run will stop early and resume later)
  int checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
  bool stop_grad_cf_reference = false;

  void validate() const;
};

struct EpochStats {
  int epoch = 0;  // 1-based; resumed runs continue the numbering
  double j1 = 0, j2 = 0, recon = 0, kl_zb = 0, kl_e = 0, kl_m = 0, kl_u = 0;
  long cf_eligible = 0;  // eligible counterfactual cells seen this epoch
  double seconds = 0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
};

/// history.csv holds the deterministic columns; per-epoch wall-clock goes to
/// a separate timing.csv so equal seeds give byte-identical histories.
void write_history_csv(const std::string& path, const TrainHistory& history);
void write_timing_csv(const std::string& path, const TrainHistory& history);

/// All loss pieces of one batch under shared random draws.
/// total = -(j1 + alpha * j2) exactly.
struct LossParts {
  Var total, j1, j2;
  double recon = 0, kl_zb = 0, kl_e = 0, kl_m = 0, kl_u = 0;  // per-particle means
  int cf_eligible = 0;
};

LossParts compute_losses(const Model& model, const Batch& batch, const CfLookup* lookup,
                         const TrainConfig& cfg, double temperature, Rng& rng,
                         std::int64_t n_total_cells, bool force_cf = false);

/// Monte Carlo ELBO estimate: batch-mean reconstruction log-likelihood minus
/// beta-weighted KL terms, global KLs scaled by batch_size / n_total_cells.
Var elbo(const Model& model, const Batch& batch, int n_particles, double beta, double temperature,
         Rng& rng, std::int64_t n_total_cells);

/// Mean over eligible cells of -KL[q(z_b_cf) || q(z_b_cf_reference)]; zero
/// when no cell is eligible.
Var cf_alignment_loss(const Model& model, const Batch& batch, const CfLookup& lookup,
                      double temperature, Rng& rng);

/// The scalar minimized by training: -(J1 + alpha * J2).
Var total_loss(const Model& model, const Batch& batch, const CfLookup* lookup,
               const TrainConfig& cfg, double temperature, Rng& rng, std::int64_t n_total_cells);

struct ModelBundle {
  std::unique_ptr<Model> model;
  std::vector<std::string> treatment_names;
  std::vector<std::string> gene_ids;
  double median_train_library = 0.0;
  std::uint64_t seed = 0;
  std::int64_t epochs_done = 0;
};

struct TrainOutput {
  ModelBundle bundle;
  TrainHistory history;
};

/// Seeded deterministic loop: per-epoch shuffle, forward, total_loss,
/// backward, Adam with global-norm clipping. Checkpoints (when a prefix is
/// given) are written every checkpoint_every epochs and at the end; a
/// non-finite loss aborts with the last checkpoint retained on disk.
TrainOutput train(const ExpressionMatrix& data, const PerturbationSet& perts,
                  const std::vector<std::uint8_t>& artifact_labels, const Split& split,
                  ModelConfig model_cfg, const TrainConfig& cfg,
                  const std::string& checkpoint_prefix = "", const std::string& resume_from = "");

/// Writes <prefix>.bin (parameters plus optimizer state) and
/// <prefix>.manifest.json (config echo).
void save_checkpoint(const Model& model, const Adam* adam, std::int64_t epochs_done,
                     const std::vector<std::string>& treatment_names,
                     const std::vector<std::string>& gene_ids, double median_train_library,
                     std::uint64_t seed, const std::string& prefix);

struct LoadedCheckpoint {
  ModelBundle bundle;
  bool has_adam = false;
  std::int64_t adam_step = 0;
  std::vector<Array> adam_m, adam_v;
};
LoadedCheckpoint load_checkpoint(const std::string& prefix);

}  // namespace cradle
