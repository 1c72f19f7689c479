#include <doctest.h>

#include <cmath>

#include "cradle/eval.hpp"
#include "cradle/synth.hpp"

using namespace cradle;

namespace {
AteVector vec(std::initializer_list<double> vals) {
  AteVector v;
  v.effect.resize(static_cast<Eigen::Index>(vals.size()));
  Eigen::Index i = 0;
  for (double x : vals) v.effect(i++) = x;
  v.n_treated = v.n_control = 1;
  return v;
}
}  // namespace

TEST_SUITE("eval") {

TEST_CASE("average treatment effect on a two-gene pair of cells") {
  CountMatrix treated(1, 2), control(1, 2);
  treated << 10, 0;
  control << 0, 10;
  auto ate = average_treatment_effect(treated, control);
  // Library size 10 per cell: CPM scale 1e4 puts all mass at 1e4.
  const double full = std::log1p(1e4);
  CHECK(ate.effect(0) == doctest::Approx(full).epsilon(1e-12));
  CHECK(ate.effect(1) == doctest::Approx(-full).epsilon(1e-12));
}

TEST_CASE("identical groups give a zero effect; doubling counts changes nothing") {
  Rng rng(1);
  CountMatrix group = (rng.uniform_array(6, 5) * 9.0).floor() + 1.0;
  auto zero = average_treatment_effect(group, group);
  CHECK(zero.effect.abs().maxCoeff() == 0.0);

  CountMatrix treated = (rng.uniform_array(4, 5) * 9.0).floor() + 1.0;
  auto base = average_treatment_effect(treated, group);
  auto scaled = average_treatment_effect(CountMatrix(treated * 2.0), CountMatrix(group * 2.0));
  for (int g = 0; g < 5; ++g)
    CHECK(base.effect(g) == doctest::Approx(scaled.effect(g)).epsilon(1e-12));

  CountMatrix empty(0, 5);
  CHECK_THROWS_AS(average_treatment_effect(empty, group), DataError);
}

TEST_CASE("pearson correlation endpoints and a hand value") {
  auto t = vec({1, 2, 3});
  CHECK(ate_pearson(t, t) == doctest::Approx(1.0));
  auto neg = vec({-1, -2, -3});
  CHECK(ate_pearson(neg, t) == doctest::Approx(-1.0));
  auto other = vec({1, 2, 4});
  CHECK(ate_pearson(vec({1, 2, 3}), other) == doctest::Approx(0.98198).epsilon(1e-5));
  CHECK_THROWS_AS(ate_pearson(vec({2, 2, 2}), t), DataError);
}

TEST_CASE("pearson is invariant to positive affine transforms") {
  Rng rng(2);
  AteVector a, b;
  a.effect = rng.normal_array(1, 20).row(0);
  b.effect = rng.normal_array(1, 20).row(0);
  const double base = ate_pearson(a, b);
  AteVector a2 = a;
  a2.effect = 3.5 * a.effect + 2.0;
  CHECK(ate_pearson(a2, b) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("r2 endpoints and the negative-regime example") {
  auto t = vec({1, 2, 3});
  CHECK(ate_r2(t, t) == doctest::Approx(1.0));
  CHECK(ate_r2(vec({2, 2, 2}), t) == doctest::Approx(0.0));  // predictor at mean(truth)
  CHECK(ate_r2(vec({0, 0, 0}), t) == doctest::Approx(-6.0));
  CHECK_THROWS_AS(ate_r2(t, vec({5, 5, 5})), DataError);
}

TEST_CASE("jaccard top-k endpoints, hand value and tie-breaking") {
  auto t = vec({5, 4, 3, 2, 1});
  CHECK(jaccard_top_k(t, t, 3) == doctest::Approx(1.0));
  CHECK(jaccard_top_k(vec({5, 4, 0, 0, 0}), vec({0, 0, 0, 4, 5}), 2) == doctest::Approx(0.0));
  // pred top-2 {g1,g2}, truth top-2 {g2,g3} -> 1/3.
  CHECK(jaccard_top_k(vec({9, 8, 0}), vec({0, 9, 8}), 2) == doctest::Approx(1.0 / 3));
  // Ties break by gene index: both pick {g0,g1}.
  CHECK(jaccard_top_k(vec({1, 1, 1}), vec({2, 2, 2}), 2) == doctest::Approx(1.0));
  CHECK_THROWS_AS(jaccard_top_k(t, t, 6), DataError);
}

TEST_CASE("jaccard is invariant to strictly monotone magnitude transforms") {
  Rng rng(3);
  AteVector a, b;
  a.effect = rng.normal_array(1, 30).row(0);
  b.effect = rng.normal_array(1, 30).row(0);
  const double base = jaccard_top_k(a, b, 7);
  AteVector a2 = a;
  a2.effect = a.effect.unaryExpr([](double v) { return v >= 0 ? v * v : -v * v; });
  CHECK(jaccard_top_k(a2, b, 7) == doctest::Approx(base));
}

TEST_CASE("self-consistency: empirical ate of generator samples tracks the truth") {
  SynthConfig sc;
  sc.n_cells = 4000;
  sc.artifact_prevalence = 0.0;
  sc.doublet_rate = 0.0;
  sc.seed = 9;
  auto ds = synth_generate(sc);

  std::vector<int> control_cells;
  std::map<std::string, std::vector<int>> by_pattern;
  for (Eigen::Index i = 0; i < ds.data.n_cells(); ++i) {
    const std::string name = ds.perts.pattern_name(i);
    if (name == "non-targeting")
      control_cells.push_back(static_cast<int>(i));
    else
      by_pattern[name].push_back(static_cast<int>(i));
  }
  CountMatrix control(static_cast<Eigen::Index>(control_cells.size()), ds.data.n_genes());
  for (std::size_t k = 0; k < control_cells.size(); ++k)
    control.row(static_cast<Eigen::Index>(k)) = ds.data.counts.row(control_cells[k]);

  for (const auto& [name, cells] : by_pattern) {
    CountMatrix treated(static_cast<Eigen::Index>(cells.size()), ds.data.n_genes());
    for (std::size_t k = 0; k < cells.size(); ++k)
      treated.row(static_cast<Eigen::Index>(k)) = ds.data.counts.row(cells[k]);
    auto empirical = average_treatment_effect(treated, control, name);
    AteVector truth;
    truth.effect = ds.truth.true_ate.at(name);
    truth.n_treated = truth.n_control = 1;
    CHECK(ate_pearson(empirical, truth) > 0.98);
  }
}

TEST_CASE("evaluate: skip entries for absent treatments and constant truth") {
  SynthConfig sc;
  sc.n_cells = 300;
  sc.n_genes = 20;
  sc.n_treatments = 3;
  sc.d_z = 3;
  sc.combos = {};
  sc.artifact_prevalence = 0.0;
  sc.doublet_rate = 0.0;
  sc.seed = 12;
  auto ds = synth_generate(sc);
  auto split = split_random(300, 0.6, 0.2, 0.2, 3);

  ModelConfig mc;
  mc.d_z = 3;
  mc.enc_hidden = {8};
  mc.emb_hidden = {8};
  mc.dec_hidden = {};
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 128;
  tc.particles = 1;
  auto out = train(ds.data, ds.perts, ds.truth.artifact, split, mc, tc);

  EvalOptions opts;
  opts.n_generated_per_treatment = 32;
  opts.n_mads_list = {3.0};
  opts.requested_treatments = {"T1", "NOT_A_TREATMENT"};
  auto report = evaluate(out.bundle, ds.data, ds.perts, split, opts);
  REQUIRE(report.treatments.size() == 2);
  CHECK(!report.treatments[0].skipped);
  CHECK(report.treatments[1].skipped);
  CHECK(report.treatments[1].skip_reason.find("absent") != std::string::npos);
}

TEST_CASE("evaluate is deterministic and internally consistent") {
  SynthConfig sc;
  sc.n_cells = 400;
  sc.n_genes = 20;
  sc.n_treatments = 4;
  sc.d_z = 3;
  sc.combos = {};
  sc.seed = 13;
  auto ds = synth_generate(sc);
  auto split = split_random(400, 0.6, 0.2, 0.2, 5);

  ModelConfig mc;
  mc.d_z = 3;
  mc.enc_hidden = {8};
  mc.emb_hidden = {8};
  mc.dec_hidden = {};
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 128;
  tc.particles = 1;
  auto out = train(ds.data, ds.perts, ds.truth.artifact, split, mc, tc);

  EvalOptions opts;
  opts.n_generated_per_treatment = 24;
  opts.seed = 31;
  auto r1 = evaluate(out.bundle, ds.data, ds.perts, split, opts);
  auto r2 = evaluate(out.bundle, ds.data, ds.perts, split, opts);
  CHECK(r1.mean_rho == r2.mean_rho);
  CHECK(r1.mean_jaccard == r2.mean_jaccard);
  CHECK((r1.generated.counts == r2.generated.counts).all());

  // Mean of per-treatment values equals the reported mean.
  double acc = 0;
  int n = 0;
  for (const auto& te : r1.treatments)
    if (!te.skipped) {
      acc += te.ate_rho;
      ++n;
    }
  REQUIRE(n > 0);
  CHECK(r1.mean_rho == doctest::Approx(acc / n).epsilon(1e-12));

  // QCPR equals the qc module's pass rate on the exported generated matrix,
  // thresholds refitted on the training split exactly as evaluate does.
  QcConfig qc;
  qc.n_mads = 3.0;
  ExpressionMatrix train_view;
  train_view.counts.resize(static_cast<Eigen::Index>(split.train_indices.size()),
                           ds.data.n_genes());
  for (std::size_t k = 0; k < split.train_indices.size(); ++k)
    train_view.counts.row(static_cast<Eigen::Index>(k)) =
        ds.data.counts.row(split.train_indices[k]);
  train_view.gene_ids = ds.data.gene_ids;
  train_view.gene_flags = ds.data.gene_flags;
  for (Eigen::Index i = 0; i < train_view.counts.rows(); ++i)
    train_view.cell_ids.push_back("t" + std::to_string(i));
  const auto thr = fit_qc_thresholds(
      compute_qc_stats(train_view),
      std::vector<std::uint8_t>(static_cast<std::size_t>(train_view.counts.rows()), 0), qc);
  const auto gen_report = apply_qc_thresholds(
      compute_qc_stats(r1.generated),
      std::vector<std::uint8_t>(static_cast<std::size_t>(r1.generated.counts.rows()), 0), thr);
  CHECK(r1.qcpr.at(3.0) == doctest::Approx(qc_pass_rate(gen_report.artifact_label)).epsilon(1e-12));
}

}  // TEST_SUITE
