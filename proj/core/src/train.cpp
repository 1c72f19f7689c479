#include "cradle/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace cradle {

void TrainConfig::validate() const {
  if (alpha < 0.0) throw ConfigError("TrainConfig: alpha must be nonnegative");
  if (beta < 0.0) throw ConfigError("TrainConfig: beta must be nonnegative");
  if (particles < 1) throw ConfigError("TrainConfig: particles must be >= 1");
  if (epochs < 0) throw ConfigError("TrainConfig: epochs must be nonnegative");
  if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (lr < 0.0) throw ConfigError("TrainConfig: lr must be nonnegative");
  if (temp_start <= 0.0 || temp_end <= 0.0)
    throw ConfigError("TrainConfig: temperatures must be positive");
}

namespace {

// Keeps mask probabilities inside (0,1) for the analytic Bernoulli KL.
Var clamp_open_unit(const Var& p) {
  constexpr double eps = 1e-12;
  return p * (1.0 - 2.0 * eps) + eps;
}

}  // namespace

LossParts compute_losses(const Model& model, const Batch& batch, const CfLookup* lookup,
                         const TrainConfig& cfg, double temperature, Rng& rng,
                         std::int64_t n_total_cells, bool force_cf) {
  cfg.validate();
  const auto& mc = model.config();
  const double batch_n = static_cast<double>(batch.size());
  const double global_scale = batch_n / static_cast<double>(n_total_cells);
  const bool want_cf = (mc.variant != ModelVariant::no_cf) && lookup != nullptr &&
                       (force_cf || cfg.alpha != 0.0);

  Var zeros_dz = Var::constant(Array::Zero(1, 1));
  Var ones_dz = Var::constant(Array::Ones(1, 1));
  Var prior_e_scale = Var::constant(mc.embedding_prior_scale);
  Var prior_mask = Var::constant(mc.mask_prior_prob);

  Var j1_sum, j2_sum;
  double recon_acc = 0, kl_zb_acc = 0, kl_e_acc = 0, kl_m_acc = 0, kl_u_acc = 0;
  int eligible = 0;
  for (int k = 0; k < cfg.particles; ++k) {
    GlobalSample g = model.sample_globals(temperature, false, rng);
    EncodeResult enc = model.encode(batch, g, rng);

    Var z = concat_cols({enc.z_b, enc.z_p, enc.z_a});
    Var nb_mean = model.decode_nb_mean(model.decode_freq(z), batch.lib);
    Var recon = model.reconstruction_log_prob(batch.x, nb_mean);

    Var kl_zb = normal_kl(enc.zb_mean, enc.zb_scale, zeros_dz, ones_dz);
    Var kl_e = normal_kl(g.e_mean, g.e_scale, zeros_dz, prior_e_scale);
    Var kl_m = bernoulli_kl(clamp_open_unit(g.mask_prob), prior_mask);
    Var kl_globals = kl_e + kl_m;
    Var kl_u = Var::constant(0.0);
    if (mc.variant != ModelVariant::no_causal) {
      kl_u = normal_kl(g.u_mean, g.u_scale, zeros_dz, ones_dz);
      kl_globals = kl_globals + kl_u;
    }
    Var j1 = (recon - cfg.beta * kl_zb) / batch_n - cfg.beta * global_scale * kl_globals / batch_n;
    j1_sum = k == 0 ? j1 : j1_sum + j1;

    Var j2 = Var::constant(0.0);
    if (want_cf) {
      auto cf = model.encode_counterfactual(batch, enc, *lookup, cfg.stop_grad_cf_reference);
      if (cf) {
        eligible = static_cast<int>(cf->eligible.size());
        j2 = -normal_kl(cf->q_mean, cf->q_scale, cf->ref_mean, cf->ref_scale) /
             static_cast<double>(cf->eligible.size());
      }
    }
    j2_sum = k == 0 ? j2 : j2_sum + j2;

    recon_acc += recon.scalar() / batch_n;
    kl_zb_acc += kl_zb.scalar() / batch_n;
    kl_e_acc += kl_e.scalar();
    kl_m_acc += kl_m.scalar();
    kl_u_acc += kl_u.scalar();
  }
  const double np = static_cast<double>(cfg.particles);
  LossParts parts;
  parts.j1 = j1_sum / np;
  parts.j2 = j2_sum / np;
  parts.total = -(parts.j1 + cfg.alpha * parts.j2);
  parts.recon = recon_acc / np;
  parts.kl_zb = kl_zb_acc / np;
  parts.kl_e = kl_e_acc / np;
  parts.kl_m = kl_m_acc / np;
  parts.kl_u = kl_u_acc / np;
  parts.cf_eligible = eligible;
  if (!std::isfinite(parts.total.scalar())) {
    throw NumericError("non-finite loss: j1=" + std::to_string(parts.j1.scalar()) +
                       " j2=" + std::to_string(parts.j2.scalar()) +
                       " recon=" + std::to_string(parts.recon) +
                       " kl_zb=" + std::to_string(parts.kl_zb) +
                       " kl_e=" + std::to_string(parts.kl_e) +
                       " kl_m=" + std::to_string(parts.kl_m) +
                       " kl_u=" + std::to_string(parts.kl_u));
  }
  return parts;
}

Var elbo(const Model& model, const Batch& batch, int n_particles, double beta, double temperature,
         Rng& rng, std::int64_t n_total_cells) {
  TrainConfig cfg;
  cfg.particles = n_particles;
  cfg.beta = beta;
  cfg.alpha = 0.0;
  return compute_losses(model, batch, nullptr, cfg, temperature, rng, n_total_cells).j1;
}

Var cf_alignment_loss(const Model& model, const Batch& batch, const CfLookup& lookup,
                      double temperature, Rng& rng) {
  TrainConfig cfg;
  cfg.particles = 1;
  return compute_losses(model, batch, &lookup, cfg, temperature, rng, batch.size(),
                        /*force_cf=*/true)
      .j2;
}

Var total_loss(const Model& model, const Batch& batch, const CfLookup* lookup,
               const TrainConfig& cfg, double temperature, Rng& rng,
               std::int64_t n_total_cells) {
  return compute_losses(model, batch, lookup, cfg, temperature, rng, n_total_cells).total;
}

void write_history_csv(const std::string& path, const TrainHistory& history) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.precision(17);
  out << "epoch,j1,j2,recon_ll,kl_zb,kl_e,kl_m,kl_u,cf_eligible\n";
  for (const auto& s : history.epochs) {
    out << s.epoch << ',' << s.j1 << ',' << s.j2 << ',' << s.recon << ',' << s.kl_zb << ','
        << s.kl_e << ',' << s.kl_m << ',' << s.kl_u << ',' << s.cf_eligible << '\n';
  }
}

void write_timing_csv(const std::string& path, const TrainHistory& history) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "epoch,seconds\n";
  for (const auto& s : history.epochs) out << s.epoch << ',' << s.seconds << '\n';
}

namespace {

nlohmann::json array_to_json(const Eigen::ArrayXd& a) {
  std::vector<double> v(a.data(), a.data() + a.size());
  return nlohmann::json(v);
}

Eigen::ArrayXd array_from_json(const nlohmann::json& j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<Eigen::ArrayXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

nlohmann::json manifest_json(const Model& model, std::int64_t epochs_done,
                             const std::vector<std::string>& treatment_names,
                             const std::vector<std::string>& gene_ids,
                             double median_train_library, std::uint64_t seed) {
  const auto& mc = model.config();
  nlohmann::json j;
  j["format_version"] = 1;
  j["d_z"] = mc.d_z;
  j["n_treatments"] = mc.n_treatments;
  j["n_genes"] = mc.n_genes;
  j["mask_prior_prob"] = mc.mask_prior_prob;
  j["embedding_prior_scale"] = mc.embedding_prior_scale;
  j["enc_hidden"] = mc.enc_hidden;
  j["emb_hidden"] = mc.emb_hidden;
  j["dec_hidden"] = mc.dec_hidden;
  j["activation"] = mc.hidden_activation == Activation::relu ? "relu" : "softplus";
  j["variant"] = to_string(mc.variant);
  j["norm_mean"] = array_to_json(mc.normalization.mean);
  j["norm_std"] = array_to_json(mc.normalization.stdev);
  j["treatment_names"] = treatment_names;
  j["gene_ids"] = gene_ids;
  j["median_train_library"] = median_train_library;
  j["seed"] = seed;
  j["epochs_done"] = epochs_done;
  return j;
}

}  // namespace

void save_checkpoint(const Model& model, const Adam* adam, std::int64_t epochs_done,
                     const std::vector<std::string>& treatment_names,
                     const std::vector<std::string>& gene_ids, double median_train_library,
                     std::uint64_t seed, const std::string& prefix) {
  std::vector<NamedTensor> tensors = store_to_tensors(model.params());
  if (adam) {
    Array step(1, 1);
    step(0, 0) = static_cast<double>(adam->step_count());
    tensors.push_back({"adam/step", step});
    const auto& items = model.params().items();
    for (std::size_t k = 0; k < items.size(); ++k) {
      tensors.push_back({"adam/m/" + items[k].first, adam->first_moments()[k]});
      tensors.push_back({"adam/v/" + items[k].first, adam->second_moments()[k]});
    }
  }
  write_tensor_file(prefix + ".bin", tensors);
  const auto j =
      manifest_json(model, epochs_done, treatment_names, gene_ids, median_train_library, seed);
  const std::string tmp = prefix + ".manifest.json.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw DataError("cannot open '" + tmp + "' for writing");
    out << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, prefix + ".manifest.json");
}

LoadedCheckpoint load_checkpoint(const std::string& prefix) {
  std::ifstream in(prefix + ".manifest.json");
  if (!in) throw DataError("checkpoint manifest '" + prefix + ".manifest.json' not found");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint manifest: ") + e.what());
  }

  ModelConfig mc;
  mc.d_z = j.at("d_z").get<int>();
  mc.n_treatments = j.at("n_treatments").get<int>();
  mc.n_genes = j.at("n_genes").get<int>();
  mc.mask_prior_prob = j.at("mask_prior_prob").get<double>();
  mc.embedding_prior_scale = j.at("embedding_prior_scale").get<double>();
  mc.enc_hidden = j.at("enc_hidden").get<std::vector<int>>();
  mc.emb_hidden = j.at("emb_hidden").get<std::vector<int>>();
  mc.dec_hidden = j.at("dec_hidden").get<std::vector<int>>();
  mc.hidden_activation =
      j.at("activation").get<std::string>() == "relu" ? Activation::relu : Activation::softplus;
  mc.variant = variant_from_string(j.at("variant").get<std::string>());
  mc.normalization.mean = array_from_json(j.at("norm_mean"));
  mc.normalization.stdev = array_from_json(j.at("norm_std"));
  mc.normalization.fitted = true;

  LoadedCheckpoint out;
  out.bundle.seed = j.at("seed").get<std::uint64_t>();
  out.bundle.epochs_done = j.at("epochs_done").get<std::int64_t>();
  out.bundle.treatment_names = j.at("treatment_names").get<std::vector<std::string>>();
  out.bundle.gene_ids = j.at("gene_ids").get<std::vector<std::string>>();
  out.bundle.median_train_library = j.at("median_train_library").get<double>();
  out.bundle.model = std::make_unique<Model>(mc, out.bundle.seed);

  const auto tensors = read_tensor_file(prefix + ".bin");
  load_into_store(tensors, out.bundle.model->params());

  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  if (by_name.count("adam/step")) {
    out.has_adam = true;
    out.adam_step = static_cast<std::int64_t>(by_name.at("adam/step")->value(0, 0));
    for (const auto& [name, var] : out.bundle.model->params().items()) {
      (void)var;
      auto m_it = by_name.find("adam/m/" + name);
      auto v_it = by_name.find("adam/v/" + name);
      if (m_it == by_name.end() || v_it == by_name.end())
        throw DataError("checkpoint: incomplete optimizer state for '" + name + "'");
      out.adam_m.push_back(m_it->second->value);
      out.adam_v.push_back(v_it->second->value);
    }
  }
  return out;
}

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

}  // namespace

TrainOutput train(const ExpressionMatrix& data, const PerturbationSet& perts,
                  const std::vector<std::uint8_t>& artifact_labels, const Split& split,
                  ModelConfig model_cfg, const TrainConfig& cfg,
                  const std::string& checkpoint_prefix, const std::string& resume_from) {
  cfg.validate();
  if (data.n_cells() != perts.n_cells())
    throw DataError("train: counts and perturbations disagree on cell count");
  if (static_cast<Eigen::Index>(artifact_labels.size()) != data.n_cells())
    throw DataError("train: artifact label count mismatch");
  if (split.train_indices.empty()) throw DataError("train: empty training split");

  const Eigen::ArrayXd lib_all = library_sizes(data);
  const auto& train_idx = split.train_indices;
  const auto n_train = static_cast<Eigen::Index>(train_idx.size());

  CountMatrix train_counts(n_train, data.n_genes());
  Eigen::ArrayXXd train_p(n_train, perts.n_treatments());
  Eigen::ArrayXd train_a(n_train), train_lib(n_train);
  std::vector<std::uint8_t> train_labels(train_idx.size());
  std::vector<double> lib_values;
  for (Eigen::Index k = 0; k < n_train; ++k) {
    const int i = train_idx[static_cast<std::size_t>(k)];
    train_counts.row(k) = data.counts.row(i);
    train_p.row(k) = perts.assignments.row(i);
    train_a(k) = static_cast<double>(artifact_labels[static_cast<std::size_t>(i)]);
    train_lib(k) = lib_all(i);
    train_labels[static_cast<std::size_t>(k)] = artifact_labels[static_cast<std::size_t>(i)];
    lib_values.push_back(lib_all(i));
  }
  const double median_lib = median_of(lib_values);

  model_cfg.n_treatments = static_cast<int>(perts.n_treatments());
  model_cfg.n_genes = static_cast<int>(data.n_genes());
  if (!model_cfg.normalization.fitted)
    model_cfg.normalization = fit_log_standardize(train_counts);

  // Reference medians come from training cells only.
  const CfLookup lookup = CfLookup::build(train_counts, train_p, train_labels);

  TrainOutput out;
  std::int64_t start_epoch = 0;
  std::unique_ptr<Adam> adam;
  if (!resume_from.empty()) {
    LoadedCheckpoint ck = load_checkpoint(resume_from);
    const auto& lc = ck.bundle.model->config();
    if (lc.d_z != model_cfg.d_z)
      throw DataError("resume: manifest d_z=" + std::to_string(lc.d_z) + " != configured " +
                      std::to_string(model_cfg.d_z));
    if (lc.n_treatments != model_cfg.n_treatments)
      throw DataError("resume: manifest n_treatments mismatch");
    if (lc.n_genes != model_cfg.n_genes) throw DataError("resume: manifest n_genes mismatch");
    if (lc.variant != model_cfg.variant) throw DataError("resume: manifest variant mismatch");
    if (ck.bundle.seed != cfg.seed) throw DataError("resume: manifest seed mismatch");
    out.bundle = std::move(ck.bundle);
    start_epoch = out.bundle.epochs_done;
    adam = std::make_unique<Adam>(out.bundle.model->params(),
                                  AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.clip_norm});
    if (ck.has_adam) adam->restore(ck.adam_step, std::move(ck.adam_m), std::move(ck.adam_v));
  } else {
    out.bundle.model = std::make_unique<Model>(model_cfg, cfg.seed);
    out.bundle.treatment_names = perts.treatment_names;
    out.bundle.gene_ids = data.gene_ids;
    out.bundle.median_train_library = median_lib;
    out.bundle.seed = cfg.seed;
    adam = std::make_unique<Adam>(out.bundle.model->params(),
                                  AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.clip_norm});
  }
  Model& model = *out.bundle.model;

  std::vector<int> order(train_idx.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = static_cast<int>(k);

  const auto checkpoint_now = [&](std::int64_t epochs_done) {
    if (checkpoint_prefix.empty()) return;
    save_checkpoint(model, adam.get(), epochs_done, out.bundle.treatment_names,
                    out.bundle.gene_ids, out.bundle.median_train_library, cfg.seed,
                    checkpoint_prefix);
  };

  for (std::int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // Per-epoch RNG derived from (seed, epoch) so resumed runs replay the
    // exact stream; the permutation starts from identity for the same reason.
    Rng rng = Rng::substream(cfg.seed, 2 * static_cast<std::uint64_t>(epoch) + 1);
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = static_cast<int>(k);
    rng.shuffle(order);
    const int horizon = cfg.anneal_epochs > 0 ? cfg.anneal_epochs : cfg.epochs;
    const double frac =
        horizon > 1 ? static_cast<double>(epoch) / static_cast<double>(horizon - 1) : 0.0;
    const double temperature = cfg.temp_start + (cfg.temp_end - cfg.temp_start) * frac;

    EpochStats stats;
    stats.epoch = static_cast<int>(epoch) + 1;
    int n_batches = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
      const auto bsize = static_cast<Eigen::Index>(end - at);
      Batch batch;
      batch.x.resize(bsize, data.n_genes());
      batch.p.resize(bsize, perts.n_treatments());
      batch.a.resize(bsize);
      batch.lib.resize(bsize);
      for (Eigen::Index k = 0; k < bsize; ++k) {
        const int row = order[at + static_cast<std::size_t>(k)];
        batch.x.row(k) = train_counts.row(row);
        batch.p.row(k) = train_p.row(row);
        batch.a(k) = train_a(row);
        batch.lib(k) = train_lib(row);
      }
      LossParts parts;
      try {
        parts = compute_losses(model, batch, &lookup, cfg, temperature, rng, n_train);
        backward(parts.total);
        adam->step(model.params());
      } catch (const NumericError&) {
        checkpoint_now(epoch);
        throw;
      }
      stats.j1 += parts.j1.scalar();
      stats.j2 += parts.j2.scalar();
      stats.recon += parts.recon;
      stats.kl_zb += parts.kl_zb;
      stats.kl_e += parts.kl_e;
      stats.kl_m += parts.kl_m;
      stats.kl_u += parts.kl_u;
      stats.cf_eligible += parts.cf_eligible;
      ++n_batches;
    }
    const double nb = static_cast<double>(n_batches);
    stats.j1 /= nb;
    stats.j2 /= nb;
    stats.recon /= nb;
    stats.kl_zb /= nb;
    stats.kl_e /= nb;
    stats.kl_m /= nb;
    stats.kl_u /= nb;
    stats.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.history.epochs.push_back(stats);

    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
      checkpoint_now(epoch + 1);
  }
  out.bundle.epochs_done = cfg.epochs;
  checkpoint_now(cfg.epochs);
  return out;
}

}  // namespace cradle
