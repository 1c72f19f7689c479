#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cradle/data.hpp"
#include "cradle/distributions.hpp"
#include "cradle/nn.hpp"

namespace cradle {

enum class ModelVariant { full, no_cf, no_causal };
std::string to_string(ModelVariant v);
ModelVariant variant_from_string(const std::string& s);

/// Per-gene mean/std of log1p(counts), fitted on the training split.
struct NormStats {
  Eigen::ArrayXd mean, stdev;
  bool fitted = false;
};
NormStats fit_log_standardize(const CountMatrix& train_counts);
Array apply_log_standardize(const NormStats& stats, const CountMatrix& counts);

struct ModelConfig {
  int d_z = 200;
  int n_treatments = 0;
  int n_genes = 0;
  double mask_prior_prob = 0.01;
  double embedding_prior_scale = 1.0;
  std::vector<int> enc_hidden = {400, 400, 400, 400};
  std::vector<int> emb_hidden = {400, 400, 400, 400};
  std::vector<int> dec_hidden = {};  // empty: single linear layer into softmax
  Activation hidden_activation = Activation::relu;
  ModelVariant variant = ModelVariant::full;
  NormStats normalization;

  void validate() const;
  MlpSpec encoder_spec() const;   // input D_x + 2*d_z, heads mean/scale
  MlpSpec embedding_spec() const; // input d_z + T, heads mean/scale
  MlpSpec decoder_spec() const;   // input 3*d_z, softmax head freq
};

/// One minibatch of observations.
struct Batch {
  CountMatrix x;       // B x D_x raw counts
  Eigen::ArrayXXd p;   // B x T multi-hot
  Eigen::ArrayXd a;    // B artifact labels in {0,1}
  Eigen::ArrayXd lib;  // B library sizes (> 0)

  Eigen::Index size() const { return x.rows(); }
};

/// Globals drawn once per batch: masks, treatment embeddings, artifact
/// embedding, plus the distribution parameters they came from.
struct GlobalSample {
  Var mask;       // T x d_z, relaxed (or hard) sample
  Var mask_prob;  // sigmoid of mask logits
  Var e_mean, e_scale, e;  // T x d_z
  Var u_mean, u_scale, u;  // 1 x d_z (u_scale undefined for no_causal)
};

struct EncodeResult {
  GlobalSample globals;
  Var z_p, z_a;             // B x d_z
  Var zb_mean, zb_scale;    // B x d_z
  Var z_b;                  // B x d_z
};

/// Medians of QC-failed cells grouped by exact treatment pattern.
class CfLookup {
 public:
  static CfLookup build(const CountMatrix& counts, const Eigen::ArrayXXd& assignments,
                        const std::vector<std::uint8_t>& artifact_labels);
  /// nullptr when no QC-failed cell shares this exact pattern.
  const Eigen::ArrayXd* find(const Eigen::ArrayXXd& assignments, Eigen::Index row) const;
  std::size_t n_patterns() const { return medians_.size(); }

 private:
  std::map<std::string, Eigen::ArrayXd> medians_;
};

struct CfResult {
  std::vector<Eigen::Index> eligible;          // batch row indices
  Var q_mean, q_scale;                         // actual counterfactual branch
  Var ref_mean, ref_scale;                     // reference branch
};

enum class EffectMode { expected, hard };

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  Var theta() const;    // positive inverse dispersion
  Var u_scale() const;  // positive artifact posterior scale

  GlobalSample sample_globals(double temperature, bool hard_mask, Rng& rng) const;
  EncodeResult encode(const Batch& batch, const GlobalSample& globals, Rng& rng) const;

  /// Counterfactual branch for cells with a_i = 0 whose pattern has a
  /// reference median. Reuses the main pass's z_p and u samples. Throws if
  /// called with forced=true on a batch with no eligible cell.
  std::optional<CfResult> encode_counterfactual(const Batch& batch, const EncodeResult& enc,
                                                const CfLookup& lookup,
                                                bool stop_grad_reference) const;

  Var decode_freq(const Var& z) const;  // rows sum to 1
  /// freq * library size; rows sum to the library size exactly.
  Var decode_nb_mean(const Var& freq, const Eigen::ArrayXd& lib) const;
  Var reconstruction_log_prob(const CountMatrix& x, const Var& nb_mean) const;

  /// Draws counts through the Gamma-Poisson observation model.
  CountMatrix sample_counts(const Array& nb_mean, Rng& rng) const;

  /// Generative process: z_b from the standard normal prior, masks drawn as
  /// hard Bernoulli(sigmoid(logits)), artifact embedding gated by
  /// artifact_flag (default 0).
  CountMatrix generate(const Eigen::ArrayXXd& p_rows, double library_size, Rng& rng,
                       int artifact_flag = 0) const;

  /// Latent z_p contribution of a single treatment.
  Eigen::ArrayXd perturbation_effect(int t, EffectMode mode) const;

 private:
  Var embed_treatments(const Var& mask_sample, Var* e_scale) const;

  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace cradle
