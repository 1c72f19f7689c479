#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cradle/errors.hpp"

namespace cradle {

using CountMatrix = Eigen::ArrayXXd;  // raw counts; values are nonnegative integers

struct GeneFlags {
  std::vector<std::uint8_t> is_mito, is_hemoglobin, is_ribosomal;
};

/// Cells x genes raw count matrix with gene annotations.
struct ExpressionMatrix {
  CountMatrix counts;
  std::vector<std::string> gene_ids;
  GeneFlags gene_flags;  // all-false when no annotation file is given
  std::vector<std::string> cell_ids;

  Eigen::Index n_cells() const { return counts.rows(); }
  Eigen::Index n_genes() const { return counts.cols(); }
  void validate() const;
};

/// Cells x treatments multi-hot assignment matrix with a name registry.
struct PerturbationSet {
  Eigen::ArrayXXd assignments;  // entries in {0,1}
  std::vector<std::string> treatment_names;
  std::optional<int> control_index;  // the non-targeting column, when present

  Eigen::Index n_cells() const { return assignments.rows(); }
  Eigen::Index n_treatments() const { return assignments.cols(); }
  void validate() const;

  /// "+"-joined sorted treatment names of one assignment row.
  std::string pattern_name(Eigen::Index row) const;
};

struct Split {
  std::vector<int> train_indices, val_indices, test_indices;
  std::vector<std::string> held_out_treatments;  // combination identifiers
};

enum class CountsFormat { dense_csv, matrix_market };

/// Reads counts.csv (header row of gene ids, one integer row per cell) or a
/// 1-based matrix-market coordinate integer file. Cell ids are synthesized as
/// cell_<i> when the format carries none. An optional genes.csv supplies the
/// per-gene flags; without it all flags are false.
ExpressionMatrix load_counts(const std::string& path, CountsFormat format,
                             const std::string& genes_csv_path = "");
void write_counts_csv(const std::string& path, const ExpressionMatrix& m);
void write_counts_mtx(const std::string& path, const ExpressionMatrix& m);
void write_genes_csv(const std::string& path, const ExpressionMatrix& m);

/// perts.csv: columns cell_id,treatment with "+"-joined combination names.
/// The registry is the sorted set of names seen; "non-targeting" maps to
/// control_index. Must be paired with a count matrix of the same row count.
PerturbationSet load_perturbations(const std::string& path);
void write_perturbations_csv(const std::string& path, const PerturbationSet& p,
                             const std::vector<std::string>& cell_ids);

/// Holds out ceil(fraction * #distinct multi-gene combinations) combinations
/// (selected by seed); every cell carrying a held-out combination goes to
/// test, the rest are split train/val by val_fraction.
Split split_ood_combinations(const PerturbationSet& pert, double fraction, std::uint64_t seed,
                             double val_fraction = 0.1);

/// Seeded partition with sizes within 1 of the exact proportions.
Split split_random(int n_cells, double train_frac, double val_frac, double test_frac,
                   std::uint64_t seed);

void write_split_json(const std::string& path, const Split& split);
Split load_split_json(const std::string& path);

/// Per-cell total counts; a zero row is not a valid observation.
Eigen::ArrayXd library_sizes(const ExpressionMatrix& m);

/// doublets.csv: columns cell_id,is_doublet. Returns all-false when the file
/// does not exist.
std::vector<std::uint8_t> load_doublets_csv(const std::string& path, Eigen::Index n_cells);
void write_doublets_csv(const std::string& path, const std::vector<std::string>& cell_ids,
                        const std::vector<std::uint8_t>& is_doublet);

}  // namespace cradle
