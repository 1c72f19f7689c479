#include "cradle/model.hpp"

#include <algorithm>
#include <cmath>

namespace cradle {

std::string to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::full: return "full";
    case ModelVariant::no_cf: return "no_cf";
    case ModelVariant::no_causal: return "no_causal";
  }
  return "?";
}

ModelVariant variant_from_string(const std::string& s) {
  if (s == "full") return ModelVariant::full;
  if (s == "no_cf") return ModelVariant::no_cf;
  if (s == "no_causal") return ModelVariant::no_causal;
  throw ConfigError("unknown model variant '" + s + "' (expected full|no_cf|no_causal)");
}

NormStats fit_log_standardize(const CountMatrix& train_counts) {
  if (train_counts.rows() == 0) throw DataError("fit_log_standardize: empty training split");
  NormStats s;
  Array logged = train_counts.unaryExpr([](double v) { return std::log1p(v); });
  s.mean = logged.colwise().mean();
  Eigen::ArrayXd var(logged.cols());
  for (Eigen::Index g = 0; g < logged.cols(); ++g)
    var(g) = (logged.col(g) - s.mean(g)).square().mean();
  s.stdev = var.sqrt();
  // Constant genes carry no signal; unit scale keeps them finite.
  for (Eigen::Index g = 0; g < s.stdev.size(); ++g)
    if (s.stdev(g) < 1e-8) s.stdev(g) = 1.0;
  s.fitted = true;
  return s;
}

Array apply_log_standardize(const NormStats& stats, const CountMatrix& counts) {
  if (!stats.fitted) throw NumericError("apply_log_standardize: statistics not fitted");
  if (counts.cols() != stats.mean.size())
    throw DataError("apply_log_standardize: gene count mismatch");
  Array logged = counts.unaryExpr([](double v) { return std::log1p(v); });
  Array out(counts.rows(), counts.cols());
  for (Eigen::Index g = 0; g < counts.cols(); ++g)
    out.col(g) = (logged.col(g) - stats.mean(g)) / stats.stdev(g);
  return out;
}

void ModelConfig::validate() const {
  if (d_z <= 0) throw ConfigError("ModelConfig: d_z must be positive");
  if (n_treatments <= 0) throw ConfigError("ModelConfig: n_treatments must be positive");
  if (n_genes <= 0) throw ConfigError("ModelConfig: n_genes must be positive");
  if (mask_prior_prob <= 0.0 || mask_prior_prob >= 1.0)
    throw ConfigError("ModelConfig: mask_prior_prob must lie in (0,1)");
  if (embedding_prior_scale <= 0.0)
    throw ConfigError("ModelConfig: embedding_prior_scale must be positive");
}

MlpSpec ModelConfig::encoder_spec() const {
  MlpSpec spec;
  spec.widths = {n_genes + 2 * d_z};
  spec.widths.insert(spec.widths.end(), enc_hidden.begin(), enc_hidden.end());
  spec.activation = hidden_activation;
  spec.heads = {{"mean", d_z, HeadTransform::identity}, {"scale", d_z, HeadTransform::softplus}};
  return spec;
}

MlpSpec ModelConfig::embedding_spec() const {
  MlpSpec spec;
  spec.widths = {d_z + n_treatments};
  spec.widths.insert(spec.widths.end(), emb_hidden.begin(), emb_hidden.end());
  spec.activation = hidden_activation;
  spec.heads = {{"mean", d_z, HeadTransform::identity}, {"scale", d_z, HeadTransform::softplus}};
  return spec;
}

MlpSpec ModelConfig::decoder_spec() const {
  MlpSpec spec;
  spec.widths = {3 * d_z};
  spec.widths.insert(spec.widths.end(), dec_hidden.begin(), dec_hidden.end());
  spec.activation = hidden_activation;
  spec.heads = {{"freq", n_genes, HeadTransform::softmax}};
  return spec;
}

CfLookup CfLookup::build(const CountMatrix& counts, const Eigen::ArrayXXd& assignments,
                         const std::vector<std::uint8_t>& labels) {
  if (counts.rows() != assignments.rows() ||
      static_cast<Eigen::Index>(labels.size()) != counts.rows())
    throw DataError("CfLookup: row count mismatch");
  std::map<std::string, std::vector<Eigen::Index>> pools;
  for (Eigen::Index i = 0; i < counts.rows(); ++i) {
    if (labels[static_cast<std::size_t>(i)] == 0) continue;
    std::string key(static_cast<std::size_t>(assignments.cols()), '0');
    for (Eigen::Index t = 0; t < assignments.cols(); ++t)
      if (assignments(i, t) != 0.0) key[static_cast<std::size_t>(t)] = '1';
    pools[key].push_back(i);
  }
  CfLookup lookup;
  for (auto& [key, rows] : pools) {
    Eigen::ArrayXd med(counts.cols());
    std::vector<double> column(rows.size());
    for (Eigen::Index g = 0; g < counts.cols(); ++g) {
      for (std::size_t k = 0; k < rows.size(); ++k) column[k] = counts(rows[k], g);
      std::sort(column.begin(), column.end());
      const std::size_t n = column.size();
      med(g) = n % 2 == 1 ? column[n / 2] : (column[n / 2 - 1] + column[n / 2]) / 2.0;
    }
    lookup.medians_.emplace(key, std::move(med));
  }
  return lookup;
}

const Eigen::ArrayXd* CfLookup::find(const Eigen::ArrayXXd& assignments, Eigen::Index row) const {
  std::string key(static_cast<std::size_t>(assignments.cols()), '0');
  for (Eigen::Index t = 0; t < assignments.cols(); ++t)
    if (assignments(row, t) != 0.0) key[static_cast<std::size_t>(t)] = '1';
  auto it = medians_.find(key);
  return it == medians_.end() ? nullptr : &it->second;
}

namespace {
double logit(double p) { return std::log(p / (1.0 - p)); }
}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0xC0DEULL));
  params_.add("mask_logits",
              Array::Constant(cfg_.n_treatments, cfg_.d_z, logit(cfg_.mask_prior_prob)));
  params_.add("u_mean", Array::Zero(1, cfg_.d_z));
  params_.add("u_scale_raw", Array::Constant(1, cfg_.d_z, softplus_inverse(1.0)));
  params_.add("theta_raw", Array::Constant(1, 1, softplus_inverse(1.0)));
  mlp_init(cfg_.embedding_spec(), "emb", params_, rng);
  mlp_init(cfg_.encoder_spec(), "enc", params_, rng);
  mlp_init(cfg_.decoder_spec(), "dec", params_, rng);
}

Var Model::theta() const { return softplus(params_.get("theta_raw")); }
Var Model::u_scale() const { return softplus(params_.get("u_scale_raw")); }

Var Model::embed_treatments(const Var& mask_sample, Var* e_scale) const {
  Array onehot = Array::Zero(cfg_.n_treatments, cfg_.n_treatments);
  for (int t = 0; t < cfg_.n_treatments; ++t) onehot(t, t) = 1.0;
  Var input = concat_cols({mask_sample, Var::constant(onehot)});
  auto heads = mlp_forward(cfg_.embedding_spec(), "emb", params_, input);
  if (e_scale) *e_scale = heads.at("scale");
  return heads.at("mean");
}

GlobalSample Model::sample_globals(double temperature, bool hard_mask, Rng& rng) const {
  GlobalSample g;
  const Var& logits = params_.get("mask_logits");
  g.mask_prob = sigmoid(logits);
  g.mask = relaxed_bernoulli_rsample(logits, temperature,
                                     rng.uniform_array(cfg_.n_treatments, cfg_.d_z), hard_mask);
  g.e_mean = embed_treatments(g.mask, &g.e_scale);
  g.e = normal_rsample(g.e_mean, g.e_scale, rng.normal_array(cfg_.n_treatments, cfg_.d_z));
  g.u_mean = params_.get("u_mean");
  if (cfg_.variant == ModelVariant::no_causal) {
    // Fixed learnable embedding: no sampling, no posterior scale.
    g.u = g.u_mean;
  } else {
    g.u_scale = u_scale();
    g.u = normal_rsample(g.u_mean, g.u_scale, rng.normal_array(1, cfg_.d_z));
  }
  return g;
}

EncodeResult Model::encode(const Batch& batch, const GlobalSample& globals, Rng& rng) const {
  if (batch.x.cols() != cfg_.n_genes || batch.p.cols() != cfg_.n_treatments)
    throw DataError("encode: batch shape mismatch");
  for (Eigen::Index i = 0; i < batch.a.size(); ++i)
    if (batch.a(i) != 0.0 && batch.a(i) != 1.0)
      throw DataError("encode: artifact label outside {0,1}");

  EncodeResult r;
  r.globals = globals;
  r.z_p = matmul(Var::constant(batch.p), globals.e * globals.mask);
  r.z_a = matmul(Var::constant(Array(batch.a.matrix())), globals.u);
  Var x_norm = Var::constant(apply_log_standardize(cfg_.normalization, batch.x));
  Var enc_in = concat_cols({x_norm, r.z_p, r.z_a});
  auto heads = mlp_forward(cfg_.encoder_spec(), "enc", params_, enc_in);
  r.zb_mean = heads.at("mean");
  r.zb_scale = heads.at("scale");
  r.z_b = normal_rsample(r.zb_mean, r.zb_scale, rng.normal_array(batch.size(), cfg_.d_z));
  return r;
}

std::optional<CfResult> Model::encode_counterfactual(const Batch& batch, const EncodeResult& enc,
                                                     const CfLookup& lookup,
                                                     bool stop_grad_reference) const {
  CfResult cf;
  std::vector<const Eigen::ArrayXd*> refs;
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    if (batch.a(i) != 0.0) continue;
    const Eigen::ArrayXd* med = lookup.find(batch.p, i);
    if (!med) continue;
    cf.eligible.push_back(i);
    refs.push_back(med);
  }
  if (cf.eligible.empty()) return std::nullopt;

  const auto n = static_cast<Eigen::Index>(cf.eligible.size());
  CountMatrix x(n, cfg_.n_genes), x_ref(n, cfg_.n_genes);
  for (Eigen::Index k = 0; k < n; ++k) {
    x.row(k) = batch.x.row(cf.eligible[static_cast<std::size_t>(k)]);
    x_ref.row(k) = refs[static_cast<std::size_t>(k)]->transpose();
  }
  Var z_p = select_rows(enc.z_p, cf.eligible);
  // a_i = 0 for every eligible cell, so the counterfactual gate (1 - a_i)
  // passes u through unchanged.
  Var z_a_c = Var::constant(Array::Ones(n, 1)) * enc.globals.u;

  const MlpSpec spec = cfg_.encoder_spec();
  auto actual = mlp_forward(spec, "enc", params_,
                            concat_cols({Var::constant(apply_log_standardize(cfg_.normalization, x)),
                                         z_p, z_a_c}));
  cf.q_mean = actual.at("mean");
  cf.q_scale = actual.at("scale");
  auto ref = mlp_forward(spec, "enc", params_,
                         concat_cols({Var::constant(apply_log_standardize(cfg_.normalization, x_ref)),
                                      z_p, z_a_c}));
  cf.ref_mean = stop_grad_reference ? detach(ref.at("mean")) : ref.at("mean");
  cf.ref_scale = stop_grad_reference ? detach(ref.at("scale")) : ref.at("scale");
  return cf;
}

Var Model::decode_freq(const Var& z) const {
  return mlp_forward(cfg_.decoder_spec(), "dec", params_, z).at("freq");
}

Var Model::decode_nb_mean(const Var& freq, const Eigen::ArrayXd& lib) const {
  if (lib.size() != freq.rows()) throw DataError("decode_nb_mean: library size count mismatch");
  if ((lib <= 0.0).any()) throw DataError("decode_nb_mean: library sizes must be positive");
  return freq * Var::constant(Array(lib.matrix()));
}

Var Model::reconstruction_log_prob(const CountMatrix& x, const Var& nb_mean) const {
  return gamma_poisson_log_prob(x, nb_mean, theta());
}

CountMatrix Model::sample_counts(const Array& nb_mean, Rng& rng) const {
  const double th = theta().scalar();
  CountMatrix out(nb_mean.rows(), nb_mean.cols());
  for (Eigen::Index i = 0; i < nb_mean.rows(); ++i)
    for (Eigen::Index g = 0; g < nb_mean.cols(); ++g)
      out(i, g) = static_cast<double>(gamma_poisson_sample(nb_mean(i, g), th, rng));
  return out;
}

CountMatrix Model::generate(const Eigen::ArrayXXd& p_rows, double library_size, Rng& rng,
                            int artifact_flag) const {
  if (p_rows.cols() != cfg_.n_treatments) throw DataError("generate: treatment width mismatch");
  if (artifact_flag != 0 && artifact_flag != 1)
    throw DataError("generate: artifact_flag must be 0 or 1");
  if (library_size <= 0.0) throw DataError("generate: library size must be positive");

  const Array prob = params_.get("mask_logits").value().unaryExpr(&sigmoid_value);
  Array mask(cfg_.n_treatments, cfg_.d_z);
  for (Eigen::Index t = 0; t < mask.rows(); ++t)
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
      mask(t, j) = rng.bernoulli(prob(t, j)) ? 1.0 : 0.0;
  Var e_scale;
  Var e_mean = embed_treatments(Var::constant(mask), &e_scale);
  Array e = e_mean.value() + e_scale.value() * rng.normal_array(cfg_.n_treatments, cfg_.d_z);

  Array u = params_.get("u_mean").value();
  if (cfg_.variant != ModelVariant::no_causal)
    u += u_scale().value() * rng.normal_array(1, cfg_.d_z);

  const Eigen::Index n = p_rows.rows();
  Array z(n, 3 * cfg_.d_z);
  const Array effect = e * mask;
  for (Eigen::Index i = 0; i < n; ++i) {
    z.row(i).segment(0, cfg_.d_z) = rng.normal_array(1, cfg_.d_z);
    Eigen::ArrayXd z_p = Eigen::ArrayXd::Zero(cfg_.d_z);
    for (Eigen::Index t = 0; t < cfg_.n_treatments; ++t)
      if (p_rows(i, t) != 0.0) z_p += effect.row(t).transpose();
    z.row(i).segment(cfg_.d_z, cfg_.d_z) = z_p.transpose();
    z.row(i).segment(2 * cfg_.d_z, cfg_.d_z) = static_cast<double>(artifact_flag) * u.row(0);
  }

  const Array freq = decode_freq(Var::constant(z)).value();
  return sample_counts(freq * library_size, rng);
}

Eigen::ArrayXd Model::perturbation_effect(int t, EffectMode mode) const {
  if (t < 0 || t >= cfg_.n_treatments) throw DataError("perturbation_effect: treatment index");
  const Array prob_all = params_.get("mask_logits").value().unaryExpr(&sigmoid_value);
  Array gate(cfg_.n_treatments, cfg_.d_z);
  if (mode == EffectMode::expected)
    gate = prob_all;
  else
    gate = (prob_all > 0.5).cast<double>();
  const Array e_mean = embed_treatments(Var::constant(gate), nullptr).value();
  return (gate.row(t) * e_mean.row(t)).transpose();
}

}  // namespace cradle
