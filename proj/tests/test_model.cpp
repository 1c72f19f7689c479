#include <doctest.h>

#include <cmath>

#include "cradle/model.hpp"

using namespace cradle;

namespace {

ModelConfig tiny_config(int d_z = 4, int n_treat = 3, int n_genes = 8) {
  ModelConfig cfg;
  cfg.d_z = d_z;
  cfg.n_treatments = n_treat;
  cfg.n_genes = n_genes;
  cfg.enc_hidden = {16};
  cfg.emb_hidden = {12};
  cfg.dec_hidden = {};
  cfg.normalization.mean = Eigen::ArrayXd::Zero(n_genes);
  cfg.normalization.stdev = Eigen::ArrayXd::Ones(n_genes);
  cfg.normalization.fitted = true;
  return cfg;
}

Batch tiny_batch(const ModelConfig& cfg, Rng& rng, std::initializer_list<double> labels) {
  Batch b;
  const auto n = static_cast<Eigen::Index>(labels.size());
  b.x = (rng.uniform_array(n, cfg.n_genes) * 9.0).floor() + 1.0;
  b.p = Eigen::ArrayXXd::Zero(n, cfg.n_treatments);
  for (Eigen::Index i = 0; i < n; ++i)
    b.p(i, static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(cfg.n_treatments)))) = 1;
  b.a.resize(n);
  Eigen::Index i = 0;
  for (double v : labels) b.a(i++) = v;
  b.lib.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) b.lib(k) = b.x.row(k).sum();
  return b;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("artifact gating: z_a is exactly zero when a = 0, exactly u when a = 1") {
  auto cfg = tiny_config();
  Model model(cfg, 5);
  Rng rng(1);
  Batch batch = tiny_batch(cfg, rng, {0, 1, 0, 1});
  auto globals = model.sample_globals(1.0, false, rng);
  auto enc = model.encode(batch, globals, rng);
  for (int k = 0; k < cfg.d_z; ++k) {
    CHECK(enc.z_a.value()(0, k) == 0.0);
    CHECK(enc.z_a.value()(2, k) == 0.0);
    CHECK(enc.z_a.value()(1, k) == globals.u.value()(0, k));
    CHECK(enc.z_a.value()(3, k) == globals.u.value()(0, k));
  }
}

TEST_CASE("superposition: multi-hot z_p equals the sum of its single-hot parts") {
  auto cfg = tiny_config(4, 4, 8);
  Model model(cfg, 6);
  Rng rng(2);
  Batch batch;
  batch.x = (rng.uniform_array(3, cfg.n_genes) * 5.0).floor() + 1.0;
  batch.p = Eigen::ArrayXXd::Zero(3, 4);
  batch.p(0, 1) = 1;              // single t1
  batch.p(1, 2) = 1;              // single t2
  batch.p(2, 1) = batch.p(2, 2) = 1;  // the combination
  batch.a = Eigen::ArrayXd::Zero(3);
  batch.lib = Eigen::ArrayXd::Constant(3, 10.0);
  auto globals = model.sample_globals(1.0, false, rng);
  auto enc = model.encode(batch, globals, rng);
  for (int k = 0; k < cfg.d_z; ++k)
    CHECK(enc.z_p.value()(2, k) ==
          doctest::Approx(enc.z_p.value()(0, k) + enc.z_p.value()(1, k)).epsilon(1e-15));
}

TEST_CASE("all-zero treatment row gives a zero z_p") {
  auto cfg = tiny_config();
  Model model(cfg, 7);
  Rng rng(3);
  Batch batch = tiny_batch(cfg, rng, {0, 0});
  batch.p.setZero();
  auto globals = model.sample_globals(1.0, false, rng);
  auto enc = model.encode(batch, globals, rng);
  CHECK((enc.z_p.value() == 0.0).all());
}

TEST_CASE("hard-zero masks annihilate every perturbation effect") {
  auto cfg = tiny_config();
  Model model(cfg, 8);
  model.params().get("mask_logits").set_value(
      Array::Constant(cfg.n_treatments, cfg.d_z, -500.0));
  Rng rng(4);
  Batch batch = tiny_batch(cfg, rng, {0, 0, 0});
  auto globals = model.sample_globals(0.05, true, rng);  // hard samples at tiny temperature
  CHECK((globals.mask.value() == 0.0).all());
  auto enc = model.encode(batch, globals, rng);
  CHECK((enc.z_p.value() == 0.0).all());
}

TEST_CASE("encode rejects labels outside {0,1}") {
  auto cfg = tiny_config();
  Model model(cfg, 9);
  Rng rng(5);
  Batch batch = tiny_batch(cfg, rng, {0, 0});
  batch.a(1) = 0.5;
  auto globals = model.sample_globals(1.0, false, rng);
  CHECK_THROWS_AS(model.encode(batch, globals, rng), DataError);
}

TEST_CASE("decoder mean sums to the library size") {
  auto cfg = tiny_config(3, 2, 12);
  Model model(cfg, 11);
  Rng rng(6);
  Var z = Var::constant(rng.normal_array(5, 3 * cfg.d_z));
  Eigen::ArrayXd lib(5);
  lib << 100, 3, 77, 1234, 8;
  Var nb_mean = model.decode_nb_mean(model.decode_freq(z), lib);
  for (int i = 0; i < 5; ++i) {
    double sum = 0;
    for (int g = 0; g < cfg.n_genes; ++g) sum += nb_mean.value()(i, g);
    CHECK(std::abs(sum - lib(i)) / lib(i) < 1e-9);
  }
}

TEST_CASE("uniform decoder frequencies split the library evenly") {
  auto cfg = tiny_config(2, 2, 4);
  Model model(cfg, 12);
  model.params().get("dec/freq.W").set_value(Array::Zero(3 * cfg.d_z, 4));
  model.params().get("dec/freq.b").set_value(Array::Zero(1, 4));
  Var z = Var::constant(Array::Ones(1, 3 * cfg.d_z));
  Eigen::ArrayXd lib(1);
  lib << 100;
  Var nb_mean = model.decode_nb_mean(model.decode_freq(z), lib);
  for (int g = 0; g < 4; ++g) CHECK(nb_mean.value()(0, g) == doctest::Approx(25.0));
}

TEST_CASE("counterfactual reference medians: per-gene sort") {
  CountMatrix counts(3, 2);
  counts << 1, 2, 3, 4, 5, 100;
  Eigen::ArrayXXd p = Eigen::ArrayXXd::Zero(3, 2);
  p.col(0) = 1;  // same pattern everywhere
  const std::vector<std::uint8_t> labels = {1, 1, 1};
  auto lookup = CfLookup::build(counts, p, labels);
  const auto* med = lookup.find(p, 0);
  REQUIRE(med != nullptr);
  CHECK((*med)(0) == 3.0);
  CHECK((*med)(1) == 4.0);
}

TEST_CASE("counterfactual lookup: single member and empty pools") {
  CountMatrix counts(2, 2);
  counts << 7, 9, 1, 1;
  Eigen::ArrayXXd p(2, 2);
  p << 1, 0, 0, 1;
  const std::vector<std::uint8_t> labels = {1, 0};  // only row 0 is QC-failed
  auto lookup = CfLookup::build(counts, p, labels);
  const auto* med = lookup.find(p, 0);
  REQUIRE(med != nullptr);
  CHECK((*med)(0) == 7.0);
  CHECK(lookup.find(p, 1) == nullptr);  // pattern (0,1) has no failed pool
}

TEST_CASE("counterfactual branch: identical inputs give identical Gaussians") {
  auto cfg = tiny_config();
  Model model(cfg, 13);
  Rng rng(7);
  Batch batch = tiny_batch(cfg, rng, {0, 0});
  // Reference pool whose median equals the cell's own counts.
  CountMatrix pool = batch.x;
  Eigen::ArrayXXd pool_p = batch.p;
  const std::vector<std::uint8_t> labels(2, 1);
  auto lookup = CfLookup::build(pool, pool_p, labels);

  auto globals = model.sample_globals(1.0, false, rng);
  auto enc = model.encode(batch, globals, rng);
  auto cf = model.encode_counterfactual(batch, enc, lookup, false);
  REQUIRE(cf.has_value());
  // Pools hold exactly each cell's own row, so actual == reference.
  CHECK((cf->q_mean.value() == cf->ref_mean.value()).all());
  CHECK((cf->q_scale.value() == cf->ref_scale.value()).all());
}

TEST_CASE("counterfactual eligibility excludes labeled cells and missing pools") {
  auto cfg = tiny_config(4, 2, 8);
  Model model(cfg, 14);
  Rng rng(8);
  Batch batch;
  batch.x = (rng.uniform_array(3, cfg.n_genes) * 5.0).floor() + 1.0;
  batch.p = Eigen::ArrayXXd::Zero(3, 2);
  batch.p(0, 0) = 1;  // has a pool
  batch.p(1, 0) = 1;  // labeled a=1: ineligible
  batch.p(2, 1) = 1;  // no pool for this pattern
  batch.a.resize(3);
  batch.a << 0, 1, 0;
  batch.lib = Eigen::ArrayXd::Constant(3, 20.0);

  CountMatrix pool(1, cfg.n_genes);
  pool.row(0) = (rng.uniform_array(1, cfg.n_genes) * 5.0).floor() + 1.0;
  Eigen::ArrayXXd pool_p = Eigen::ArrayXXd::Zero(1, 2);
  pool_p(0, 0) = 1;
  auto lookup = CfLookup::build(pool, pool_p, {1});

  auto globals = model.sample_globals(1.0, false, rng);
  auto enc = model.encode(batch, globals, rng);
  auto cf = model.encode_counterfactual(batch, enc, lookup, false);
  REQUIRE(cf.has_value());
  CHECK(cf->eligible == std::vector<Eigen::Index>{0});

  // z_a_c for an eligible (a=0) cell is u itself; the branch reuses the
  // main pass's z_p rows.
  batch.a(0) = 0;
  CHECK((cf->q_mean.value().rows()) == 1);
}

TEST_CASE("generation defaults to the artifact-free branch") {
  auto cfg = tiny_config();
  Model model(cfg, 15);
  Eigen::ArrayXXd p = Eigen::ArrayXXd::Zero(6, cfg.n_treatments);
  p.col(1) = 1;

  Rng r1(99), r2(99);
  auto a = model.generate(p, 500.0, r1);
  auto b = model.generate(p, 500.0, r2, 0);
  CHECK((a == b).all());  // default flag is 0

  // With flag 0 the output cannot depend on the artifact embedding.
  model.params().get("u_mean").set_value(Array::Constant(1, cfg.d_z, 25.0));
  Rng r3(99);
  auto c = model.generate(p, 500.0, r3, 0);
  CHECK((a == c).all());
  Rng r4(99);
  auto d = model.generate(p, 500.0, r4, 1);
  CHECK(!(a == d).all());
}

TEST_CASE("generation is deterministic under equal seeds") {
  auto cfg = tiny_config();
  Model model(cfg, 16);
  Eigen::ArrayXXd p = Eigen::ArrayXXd::Zero(4, cfg.n_treatments);
  p.col(0) = 1;
  Rng r1(7), r2(7), r3(7), r4(8);
  CHECK((model.generate(p, 300.0, r1) == model.generate(p, 300.0, r2)).all());
  CHECK(!(model.generate(p, 300.0, r3) == model.generate(p, 300.0, r4)).all());
}

TEST_CASE("generate rejects malformed requests") {
  auto cfg = tiny_config();
  Model model(cfg, 17);
  Rng rng(0);
  Eigen::ArrayXXd bad(1, cfg.n_treatments + 1);
  bad.setZero();
  CHECK_THROWS_AS(model.generate(bad, 100.0, rng), DataError);
  Eigen::ArrayXXd ok = Eigen::ArrayXXd::Zero(1, cfg.n_treatments);
  CHECK_THROWS_AS(model.generate(ok, 100.0, rng, 2), DataError);
  CHECK_THROWS_AS(model.generate(ok, 0.0, rng, 0), DataError);
}

TEST_CASE("perturbation effect: saturated-off masks give a zero vector") {
  auto cfg = tiny_config();
  Model model(cfg, 18);
  model.params().get("mask_logits").set_value(
      Array::Constant(cfg.n_treatments, cfg.d_z, -1000.0));
  const auto effect = model.perturbation_effect(1, EffectMode::expected);
  for (int k = 0; k < cfg.d_z; ++k) CHECK(effect(k) == 0.0);
  const auto hard = model.perturbation_effect(1, EffectMode::hard);
  for (int k = 0; k < cfg.d_z; ++k) CHECK(hard(k) == 0.0);
}

TEST_CASE("perturbation effect: all-on masks return the embedding mean") {
  auto cfg = tiny_config();
  Model model(cfg, 19);
  model.params().get("mask_logits").set_value(
      Array::Constant(cfg.n_treatments, cfg.d_z, 1000.0));
  const auto hard = model.perturbation_effect(2, EffectMode::hard);
  // Gate is exactly 1, so the effect is the embedding-mean head itself;
  // verify by building it through the same globals path with a hard mask.
  Rng rng(1);
  auto globals = model.sample_globals(0.05, true, rng);
  for (int k = 0; k < cfg.d_z; ++k)
    CHECK(hard(k) == doctest::Approx(globals.e_mean.value()(2, k)).epsilon(1e-12));
}

TEST_CASE("log-standardize fit and apply") {
  CountMatrix counts(3, 2);
  counts << 0, 10, 3, 10, 8, 10;
  auto stats = fit_log_standardize(counts);
  CHECK(stats.fitted);
  CHECK(stats.stdev(1) == 1.0);  // constant gene falls back to unit scale
  Array normed = apply_log_standardize(stats, counts);
  CHECK(normed.col(0).mean() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(normed(0, 1) == doctest::Approx(0.0).epsilon(1e-12));
  ModelConfig cfg = tiny_config();
  cfg.normalization.fitted = false;
  CHECK_THROWS_AS(apply_log_standardize(cfg.normalization, counts), NumericError);
}

TEST_CASE("encoder and decoder input widths follow the concatenation contract") {
  auto cfg = tiny_config(5, 3, 9);
  CHECK(cfg.encoder_spec().input_width() == 9 + 2 * 5);
  CHECK(cfg.decoder_spec().input_width() == 3 * 5);
  CHECK(cfg.embedding_spec().input_width() == 5 + 3);
}

}  // TEST_SUITE
