#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "cradle/qc.hpp"
#include "cradle/tensor.hpp"
#include "cradle/rng.hpp"
#include "support/qc_oracle.hpp"

using namespace cradle;
using cradle::testsupport::oracle_qc;

namespace {

ExpressionMatrix random_matrix(Eigen::Index n_cells, Eigen::Index n_genes, Rng& rng) {
  ExpressionMatrix m;
  m.counts.resize(n_cells, n_genes);
  for (Eigen::Index i = 0; i < n_cells; ++i)
    for (Eigen::Index g = 0; g < n_genes; ++g)
      m.counts(i, g) = std::floor(rng.uniform() * 12.0);
  for (Eigen::Index i = 0; i < n_cells; ++i)
    if (m.counts.row(i).sum() == 0.0) m.counts(i, 0) = 1.0;
  for (Eigen::Index g = 0; g < n_genes; ++g) m.gene_ids.push_back("G" + std::to_string(g));
  for (Eigen::Index i = 0; i < n_cells; ++i) m.cell_ids.push_back("c" + std::to_string(i));
  const auto ng = static_cast<std::size_t>(n_genes);
  m.gene_flags.is_mito.assign(ng, 0);
  m.gene_flags.is_hemoglobin.assign(ng, 0);
  m.gene_flags.is_ribosomal.assign(ng, 0);
  m.gene_flags.is_mito[0] = 1;
  m.gene_flags.is_hemoglobin[1 % ng] = 1;
  m.gene_flags.is_ribosomal[2 % ng] = 1;
  return m;
}

}  // namespace

TEST_SUITE("qc") {

TEST_CASE("mad_threshold on 1..9 plus an outlier") {
  Eigen::ArrayXd v(10);
  v << 1, 2, 3, 4, 5, 6, 7, 8, 9, 100;
  auto [lo, hi] = mad_threshold(v, 3.0, 1.4826);
  // median 5.5, MAD 2.5, smad 3.7065
  CHECK(lo == doctest::Approx(5.5 - 3 * 3.7065).epsilon(1e-12));
  CHECK(hi == doctest::Approx(5.5 + 3 * 3.7065).epsilon(1e-12));
  CHECK(100.0 > hi);  // the outlier fails
  CHECK(9.0 < hi);
}

TEST_CASE("mad_threshold degenerate cases") {
  Eigen::ArrayXd constant(3);
  constant << 5, 5, 5;
  auto [lo, hi] = mad_threshold(constant, 3.0, 1.4826);
  CHECK(lo == 5.0);
  CHECK(hi == 5.0);

  Eigen::ArrayXd v(4);
  v << 1, 2, 3, 4;
  auto [lo0, hi0] = mad_threshold(v, 0.0, 1.4826);
  CHECK(lo0 == doctest::Approx(2.5));
  CHECK(hi0 == doctest::Approx(2.5));

  Eigen::ArrayXd empty(0);
  CHECK_THROWS_AS(mad_threshold(empty, 3.0, 1.4826), DataError);
}

TEST_CASE("single cell defines its own median and passes") {
  ExpressionMatrix m;
  m.counts = Array::Constant(1, 10, 2.0);
  for (int g = 0; g < 10; ++g) m.gene_ids.push_back("G" + std::to_string(g));
  m.cell_ids = {"only"};
  m.gene_flags.is_mito.assign(10, 0);
  m.gene_flags.is_hemoglobin.assign(10, 0);
  m.gene_flags.is_ribosomal.assign(10, 0);
  auto report = qc_evaluate(m, {0}, QcConfig{});
  CHECK(report.artifact_label == std::vector<std::uint8_t>{0});
  CHECK(report.stats.pct_mito(0) == 0.0);
  CHECK(report.stats.pct_hb(0) == 0.0);
}

TEST_CASE("a doublet fails regardless of every other criterion") {
  Rng rng(50);
  auto m = random_matrix(20, 10, rng);
  std::vector<std::uint8_t> doublets(20, 0);
  doublets[7] = 1;
  auto report = qc_evaluate(m, doublets, QcConfig{});
  CHECK(report.artifact_label[7] == 1);
  CHECK(report.pass[kDoublet][7] == 0);

  // Flipping the flag flips only the doublet criterion.
  std::vector<std::uint8_t> none(20, 0);
  auto base = qc_evaluate(m, none, QcConfig{});
  for (int c = 0; c < 5; ++c) CHECK(base.pass[static_cast<std::size_t>(c)] ==
                                    report.pass[static_cast<std::size_t>(c)]);
}

TEST_CASE("100-cell table with one injected outlier against the oracle") {
  Rng rng(123);
  ExpressionMatrix m = random_matrix(100, 12, rng);
  // One cell at 50x the typical scale trips the umi criterion at 3 MADs.
  m.counts.row(42) = m.counts.row(42) * 50.0 + 50.0;
  std::vector<std::uint8_t> doublets(100, 0);
  QcConfig cfg;
  auto report = qc_evaluate(m, doublets, cfg);
  auto oracle = oracle_qc(m, doublets, cfg);

  CHECK(report.artifact_label == oracle.label);
  CHECK(report.pass[kUmiCount][42] == 0);
  long fails = 0;
  for (auto a : report.artifact_label) fails += a;
  CHECK(fails == 1);
  CHECK(qc_pass_rate(report.artifact_label) == doctest::Approx(0.99));
  CHECK(artifact_labels(report) == oracle.label);
}

TEST_CASE("oracle equivalence is bit-for-bit on randomized instances") {
  Rng rng(999);
  for (int trial = 0; trial < 10; ++trial) {
    const auto n = static_cast<Eigen::Index>(20 + rng.below(180));
    const auto d = static_cast<Eigen::Index>(10 + rng.below(20));
    auto m = random_matrix(n, d, rng);
    std::vector<std::uint8_t> doublets(static_cast<std::size_t>(n), 0);
    for (auto& f : doublets) f = rng.bernoulli(0.1) ? 1 : 0;
    QcConfig cfg;
    cfg.n_mads = 3.0 + static_cast<double>(rng.below(3));
    auto report = qc_evaluate(m, doublets, cfg);
    auto oracle = oracle_qc(m, doublets, cfg);
    for (int c = 0; c < 5; ++c) {
      CHECK(report.thresholds.lo[static_cast<std::size_t>(c)] == oracle.lo[c]);
      CHECK(report.thresholds.hi[static_cast<std::size_t>(c)] == oracle.hi[c]);
    }
    for (int c = 0; c < kNumQcCriteria; ++c)
      CHECK(report.pass[static_cast<std::size_t>(c)] == oracle.pass[c]);
    CHECK(report.artifact_label == oracle.label);
  }
}

TEST_CASE("pass sets nest as the MAD multiplier grows") {
  Rng rng(77);
  auto m = random_matrix(150, 15, rng);
  m.counts.row(3) *= 40.0;
  m.counts.row(9) *= 25.0;
  std::vector<std::uint8_t> doublets(150, 0);
  std::vector<std::vector<std::uint8_t>> labels;
  for (double n_mads : {3.0, 4.0, 5.0}) {
    QcConfig cfg;
    cfg.n_mads = n_mads;
    labels.push_back(qc_evaluate(m, doublets, cfg).artifact_label);
  }
  for (std::size_t i = 0; i < labels[0].size(); ++i) {
    if (labels[0][i] == 0) CHECK(labels[1][i] == 0);  // pass at 3 implies pass at 4
    if (labels[1][i] == 0) CHECK(labels[2][i] == 0);
  }
}

TEST_CASE("permuting cells permutes the report identically") {
  Rng rng(31);
  auto m = random_matrix(60, 10, rng);
  std::vector<std::uint8_t> doublets(60, 0);
  doublets[5] = 1;
  auto base = qc_evaluate(m, doublets, QcConfig{});

  std::vector<int> perm(60);
  for (int i = 0; i < 60; ++i) perm[i] = i;
  rng.shuffle(perm);
  ExpressionMatrix pm = m;
  std::vector<std::uint8_t> pd(60);
  for (int i = 0; i < 60; ++i) {
    pm.counts.row(i) = m.counts.row(perm[static_cast<std::size_t>(i)]);
    pd[static_cast<std::size_t>(i)] = doublets[static_cast<std::size_t>(perm[i])];
  }
  auto permuted = qc_evaluate(pm, pd, QcConfig{});
  for (int i = 0; i < 60; ++i)
    CHECK(permuted.artifact_label[static_cast<std::size_t>(i)] ==
          base.artifact_label[static_cast<std::size_t>(perm[i])]);
  for (int c = 0; c < 5; ++c)
    CHECK(permuted.thresholds.hi[static_cast<std::size_t>(c)] ==
          base.thresholds.hi[static_cast<std::size_t>(c)]);
}

TEST_CASE("pass rate arithmetic and edge cases") {
  CHECK(qc_pass_rate({0, 0, 1, 0}) == doctest::Approx(0.75));
  CHECK(qc_pass_rate({0, 0, 0}) == 1.0);
  CHECK(qc_pass_rate({1, 1}) == 0.0);
  CHECK_THROWS_AS(qc_pass_rate({}), DataError);
}

TEST_CASE("report csv carries thresholds and one row per cell") {
  Rng rng(8);
  auto m = random_matrix(12, 10, rng);
  std::vector<std::uint8_t> doublets(12, 0);
  auto report = qc_evaluate(m, doublets, QcConfig{});
  const auto path = std::filesystem::temp_directory_path() / "cradle_qc_report_test.csv";
  write_qc_report_csv(path.string(), report, m.cell_ids);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line.rfind("#thresholds", 0) == 0);
  std::getline(in, line);
  CHECK(line.find("pass_doublet") != std::string::npos);
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 12);
  std::filesystem::remove(path);
}

}  // TEST_SUITE
