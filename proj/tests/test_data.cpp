#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "cradle/data.hpp"
#include "cradle/tensor.hpp"
#include "cradle/rng.hpp"

using namespace cradle;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("cradle_test_" + std::to_string(Rng(std::random_device{}()).next_u64()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("dense csv echoes its input") {
  TempDir tmp;
  write_file(tmp.file("counts.csv"), "g1,g2,g3\n1,0,2\n0,5,0\n");
  auto m = load_counts(tmp.file("counts.csv"), CountsFormat::dense_csv);
  CHECK(m.n_cells() == 2);
  CHECK(m.n_genes() == 3);
  CHECK(m.counts(0, 0) == 1);
  CHECK(m.counts(0, 2) == 2);
  CHECK(m.counts(1, 1) == 5);
  CHECK(m.gene_ids[1] == "g2");
  CHECK(m.gene_flags.is_mito == std::vector<std::uint8_t>{0, 0, 0});
}

TEST_CASE("matrix market triplets expand by hand") {
  TempDir tmp;
  write_file(tmp.file("counts.mtx"),
             "%%MatrixMarket matrix coordinate integer general\n2 3 2\n1 1 4\n2 3 7\n");
  auto m = load_counts(tmp.file("counts.mtx"), CountsFormat::matrix_market);
  Array expected(2, 3);
  expected << 4, 0, 0, 0, 0, 7;
  CHECK((m.counts == expected).all());
}

TEST_CASE("negative and malformed counts are rejected with a line number") {
  TempDir tmp;
  write_file(tmp.file("bad.csv"), "g1,g2\n1,-1\n");
  try {
    load_counts(tmp.file("bad.csv"), CountsFormat::dense_csv);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  write_file(tmp.file("frac.csv"), "g1\n1.5\n");
  CHECK_THROWS_AS(load_counts(tmp.file("frac.csv"), CountsFormat::dense_csv), DataError);
  write_file(tmp.file("junk.csv"), "g1,g2\n1\n");
  CHECK_THROWS_AS(load_counts(tmp.file("junk.csv"), CountsFormat::dense_csv), DataError);
}

TEST_CASE("round trip: write then load is exact for both formats") {
  Rng rng(41);
  ExpressionMatrix m;
  m.counts = (rng.uniform_array(13, 7) * 20.0).floor();
  m.counts(0, 0) = 1;  // keep the first library size positive
  for (int g = 0; g < 7; ++g) m.gene_ids.push_back("G" + std::to_string(g));
  for (int i = 0; i < 13; ++i) m.cell_ids.push_back("cell_" + std::to_string(i));
  m.gene_flags.is_mito.assign(7, 0);
  m.gene_flags.is_hemoglobin.assign(7, 0);
  m.gene_flags.is_ribosomal.assign(7, 0);
  m.gene_flags.is_mito[0] = 1;
  m.gene_flags.is_ribosomal[6] = 1;

  TempDir tmp;
  write_counts_csv(tmp.file("c.csv"), m);
  write_genes_csv(tmp.file("genes.csv"), m);
  auto back = load_counts(tmp.file("c.csv"), CountsFormat::dense_csv, tmp.file("genes.csv"));
  CHECK((back.counts == m.counts).all());
  CHECK(back.gene_ids == m.gene_ids);
  CHECK(back.gene_flags.is_mito == m.gene_flags.is_mito);
  CHECK(back.gene_flags.is_ribosomal == m.gene_flags.is_ribosomal);

  write_counts_mtx(tmp.file("c.mtx"), m);
  auto back2 = load_counts(tmp.file("c.mtx"), CountsFormat::matrix_market);
  CHECK((back2.counts == m.counts).all());
}

TEST_CASE("perturbation parsing builds a multi-hot registry") {
  TempDir tmp;
  write_file(tmp.file("perts.csv"),
             "cell_id,treatment\nc0,A\nc1,A+B\nc2,non-targeting\nc3,B+A\n");
  auto p = load_perturbations(tmp.file("perts.csv"));
  CHECK(p.n_treatments() == 3);
  REQUIRE(p.control_index.has_value());
  CHECK(p.treatment_names[static_cast<std::size_t>(*p.control_index)] == "non-targeting");
  // A+B and B+A encode identically.
  CHECK((p.assignments.row(1) == p.assignments.row(3)).all());
  CHECK(p.assignments.row(1).sum() == 2.0);
  CHECK(p.pattern_name(1) == "A+B");
  CHECK(p.pattern_name(3) == "A+B");
  CHECK(p.assignments.row(0).sum() == 1.0);
}

TEST_CASE("empty treatment field is rejected") {
  TempDir tmp;
  write_file(tmp.file("perts.csv"), "cell_id,treatment\nc0,\n");
  CHECK_THROWS_AS(load_perturbations(tmp.file("perts.csv")), DataError);
  write_file(tmp.file("perts2.csv"), "cell_id,treatment\nc0,A++B\n");
  CHECK_THROWS_AS(load_perturbations(tmp.file("perts2.csv")), DataError);
}

TEST_CASE("library sizes are row sums; zero rows are invalid") {
  ExpressionMatrix m;
  m.counts.resize(2, 3);
  m.counts << 1, 0, 2, 0, 5, 0;
  auto l = library_sizes(m);
  CHECK(l(0) == 3);
  CHECK(l(1) == 5);

  m.counts.row(1).setZero();
  CHECK_THROWS_AS(library_sizes(m), DataError);

  ExpressionMatrix eye;
  eye.counts = Array::Zero(2, 2);
  eye.counts(0, 0) = eye.counts(1, 1) = 1;
  auto l2 = library_sizes(eye);
  CHECK(l2(0) == 1);
  CHECK(l2(1) == 1);
}

namespace {
PerturbationSet combo_set() {
  // 12 cells: 4 distinct multi-gene combos (2 cells each) + 4 singles.
  PerturbationSet p;
  p.treatment_names = {"A", "B", "C", "D", "non-targeting"};
  p.control_index = 4;
  p.assignments = Eigen::ArrayXXd::Zero(12, 5);
  const int combos[4][2] = {{0, 1}, {1, 2}, {2, 3}, {0, 3}};
  for (int c = 0; c < 4; ++c)
    for (int rep = 0; rep < 2; ++rep) {
      p.assignments(2 * c + rep, combos[c][0]) = 1;
      p.assignments(2 * c + rep, combos[c][1]) = 1;
    }
  for (int i = 8; i < 12; ++i) p.assignments(i, i - 8) = 1;
  return p;
}
}  // namespace

TEST_CASE("ood split: ceil(fraction * combos) held out, all their cells in test") {
  auto p = combo_set();
  auto split = split_ood_combinations(p, 0.25, 7);
  CHECK(split.held_out_treatments.size() == 1);  // ceil(0.25 * 4)
  std::set<int> test(split.test_indices.begin(), split.test_indices.end());
  for (Eigen::Index i = 0; i < p.n_cells(); ++i) {
    const bool held = std::count(split.held_out_treatments.begin(),
                                 split.held_out_treatments.end(), p.pattern_name(i)) > 0;
    CHECK(held == (test.count(static_cast<int>(i)) > 0));
  }
  // No train/val cell carries a held-out combination.
  for (int i : split.train_indices)
    CHECK(std::count(split.held_out_treatments.begin(), split.held_out_treatments.end(),
                     p.pattern_name(i)) == 0);
}

TEST_CASE("ood split: fraction near 1 holds out every combination") {
  auto p = combo_set();
  auto split = split_ood_combinations(p, 0.999, 3);
  CHECK(split.held_out_treatments.size() == 4);
  for (int i : split.train_indices) CHECK(p.assignments.row(i).sum() == 1.0);
}

TEST_CASE("ood split is reproducible and partitions the cells") {
  auto p = combo_set();
  auto a = split_ood_combinations(p, 0.5, 99);
  auto b = split_ood_combinations(p, 0.5, 99);
  CHECK(a.train_indices == b.train_indices);
  CHECK(a.val_indices == b.val_indices);
  CHECK(a.test_indices == b.test_indices);
  CHECK(a.held_out_treatments == b.held_out_treatments);
  std::set<int> all;
  for (int i : a.train_indices) all.insert(i);
  for (int i : a.val_indices) all.insert(i);
  for (int i : a.test_indices) all.insert(i);
  CHECK(all.size() == static_cast<std::size_t>(p.n_cells()));
}

TEST_CASE("ood split without combinations points at split_random") {
  PerturbationSet p;
  p.treatment_names = {"A", "B"};
  p.assignments = Eigen::ArrayXXd::Zero(3, 2);
  p.assignments(0, 0) = p.assignments(1, 1) = p.assignments(2, 0) = 1;
  try {
    split_ood_combinations(p, 0.25, 0);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("split_random") != std::string::npos);
  }
}

TEST_CASE("random split: exact sizes for n=10 at 80/10/10") {
  auto s = split_random(10, 0.8, 0.1, 0.1, 0);
  CHECK(s.train_indices.size() == 8);
  CHECK(s.val_indices.size() == 1);
  CHECK(s.test_indices.size() == 1);
}

TEST_CASE("random split: thirds of 3 stay within one of proportionality") {
  auto s = split_random(3, 1.0 / 3, 1.0 / 3, 1.0 / 3, 5);
  const auto sizes = {s.train_indices.size(), s.val_indices.size(), s.test_indices.size()};
  std::size_t total = 0;
  for (auto n : sizes) {
    CHECK(n <= 2);
    total += n;
  }
  CHECK(total == 3);
}

TEST_CASE("random split: reproducible, disjoint, validated") {
  auto a = split_random(101, 0.7, 0.2, 0.1, 12);
  auto b = split_random(101, 0.7, 0.2, 0.1, 12);
  CHECK(a.train_indices == b.train_indices);
  CHECK(a.test_indices == b.test_indices);
  std::set<int> all(a.train_indices.begin(), a.train_indices.end());
  all.insert(a.val_indices.begin(), a.val_indices.end());
  all.insert(a.test_indices.begin(), a.test_indices.end());
  CHECK(all.size() == 101);
  CHECK_THROWS_AS(split_random(10, 0.5, 0.2, 0.2, 0), DataError);
}

TEST_CASE("split json round trip") {
  TempDir tmp;
  Split s;
  s.train_indices = {0, 2, 4};
  s.val_indices = {1};
  s.test_indices = {3, 5};
  s.held_out_treatments = {"A+B"};
  write_split_json(tmp.file("split.json"), s);
  auto back = load_split_json(tmp.file("split.json"));
  CHECK(back.train_indices == s.train_indices);
  CHECK(back.val_indices == s.val_indices);
  CHECK(back.test_indices == s.test_indices);
  CHECK(back.held_out_treatments == s.held_out_treatments);
}

TEST_CASE("doublets csv: missing file means no doublets") {
  TempDir tmp;
  auto flags = load_doublets_csv(tmp.file("doublets.csv"), 4);
  CHECK(flags == std::vector<std::uint8_t>(4, 0));
  write_doublets_csv(tmp.file("doublets.csv"), {"a", "b"}, {1, 0});
  auto back = load_doublets_csv(tmp.file("doublets.csv"), 2);
  CHECK(back == std::vector<std::uint8_t>{1, 0});
  CHECK_THROWS_AS(load_doublets_csv(tmp.file("doublets.csv"), 3), DataError);
}

}  // TEST_SUITE
