#include "cradle/data.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cradle/rng.hpp"

namespace cradle {

namespace {

std::vector<std::string> split_line(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.push_back("");
  return out;
}

std::string strip(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_count(const std::string& raw, const std::string& path, std::size_t line_no) {
  const std::string s = strip(raw);
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw DataError(path + ":" + std::to_string(line_no) + ": cannot parse count '" + s + "'");
  if (v < 0.0)
    throw DataError(path + ":" + std::to_string(line_no) + ": negative count " + s);
  if (v != std::floor(v))
    throw DataError(path + ":" + std::to_string(line_no) + ": non-integer count " + s);
  return v;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

GeneFlags load_gene_flags(const std::string& path, const std::vector<std::string>& gene_ids) {
  auto lines = read_lines(path);
  if (lines.empty()) throw DataError(path + ":1: empty genes file");
  auto header = split_line(lines[0], ',');
  if (header.size() != 4 || header[0] != "gene_id")
    throw DataError(path + ":1: expected header gene_id,is_mito,is_hemoglobin,is_ribosomal");
  std::map<std::string, std::array<std::uint8_t, 3>> by_id;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (strip(lines[i]).empty()) continue;
    auto f = split_line(lines[i], ',');
    if (f.size() != 4) throw DataError(path + ":" + std::to_string(i + 1) + ": expected 4 fields");
    std::array<std::uint8_t, 3> flags{};
    for (int k = 0; k < 3; ++k) {
      const std::string v = strip(f[k + 1]);
      if (v != "0" && v != "1")
        throw DataError(path + ":" + std::to_string(i + 1) + ": flag must be 0 or 1");
      flags[static_cast<std::size_t>(k)] = v == "1" ? 1 : 0;
    }
    by_id[strip(f[0])] = flags;
  }
  GeneFlags out;
  const auto n = gene_ids.size();
  out.is_mito.assign(n, 0);
  out.is_hemoglobin.assign(n, 0);
  out.is_ribosomal.assign(n, 0);
  for (std::size_t g = 0; g < n; ++g) {
    auto it = by_id.find(gene_ids[g]);
    if (it == by_id.end()) throw DataError(path + ": no entry for gene '" + gene_ids[g] + "'");
    out.is_mito[g] = it->second[0];
    out.is_hemoglobin[g] = it->second[1];
    out.is_ribosomal[g] = it->second[2];
  }
  return out;
}

ExpressionMatrix load_dense_csv(const std::string& path) {
  auto lines = read_lines(path);
  if (lines.empty()) throw DataError(path + ":1: empty counts file");
  ExpressionMatrix m;
  for (auto& id : split_line(lines[0], ',')) m.gene_ids.push_back(strip(id));
  const auto n_genes = m.gene_ids.size();
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (strip(lines[i]).empty()) continue;
    auto fields = split_line(lines[i], ',');
    if (fields.size() != n_genes)
      throw DataError(path + ":" + std::to_string(i + 1) + ": expected " +
                      std::to_string(n_genes) + " fields, got " + std::to_string(fields.size()));
    std::vector<double> row(n_genes);
    for (std::size_t g = 0; g < n_genes; ++g) row[g] = parse_count(fields[g], path, i + 1);
    rows.push_back(std::move(row));
  }
  m.counts.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(n_genes));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t g = 0; g < n_genes; ++g)
      m.counts(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(g)) = rows[i][g];
  return m;
}

ExpressionMatrix load_matrix_market(const std::string& path) {
  auto lines = read_lines(path);
  std::size_t at = 0;
  if (at >= lines.size() || lines[0].rfind("%%MatrixMarket", 0) != 0)
    throw DataError(path + ":1: missing MatrixMarket banner");
  {
    std::string banner = lines[0];
    std::transform(banner.begin(), banner.end(), banner.begin(), ::tolower);
    if (banner.find("coordinate") == std::string::npos)
      throw DataError(path + ":1: only coordinate format is supported");
  }
  ++at;
  while (at < lines.size() && (lines[at].empty() || lines[at][0] == '%')) ++at;
  if (at >= lines.size()) throw DataError(path + ": missing size line");
  std::istringstream size_line(lines[at]);
  long rows = 0, cols = 0, nnz = 0;
  if (!(size_line >> rows >> cols >> nnz) || rows <= 0 || cols <= 0 || nnz < 0)
    throw DataError(path + ":" + std::to_string(at + 1) + ": bad size line");
  ExpressionMatrix m;
  m.counts = CountMatrix::Zero(rows, cols);
  long seen = 0;
  for (std::size_t i = at + 1; i < lines.size(); ++i) {
    if (strip(lines[i]).empty()) continue;
    std::istringstream entry(lines[i]);
    long r = 0, c = 0;
    double v = 0.0;
    if (!(entry >> r >> c >> v))
      throw DataError(path + ":" + std::to_string(i + 1) + ": bad entry");
    if (r < 1 || r > rows || c < 1 || c > cols)
      throw DataError(path + ":" + std::to_string(i + 1) + ": index out of range");
    if (v < 0.0 || v != std::floor(v))
      throw DataError(path + ":" + std::to_string(i + 1) + ": counts must be nonnegative integers");
    m.counts(r - 1, c - 1) = v;
    ++seen;
  }
  if (seen != nnz)
    throw DataError(path + ": entry count " + std::to_string(seen) + " != declared " +
                    std::to_string(nnz));
  for (long g = 0; g < cols; ++g) m.gene_ids.push_back("gene_" + std::to_string(g));
  return m;
}

}  // namespace

void ExpressionMatrix::validate() const {
  if (static_cast<Eigen::Index>(gene_ids.size()) != n_genes())
    throw DataError("ExpressionMatrix: gene_ids length != column count");
  if (static_cast<Eigen::Index>(cell_ids.size()) != n_cells())
    throw DataError("ExpressionMatrix: cell_ids length != row count");
  std::set<std::string> uniq(gene_ids.begin(), gene_ids.end());
  if (uniq.size() != gene_ids.size()) throw DataError("ExpressionMatrix: duplicate gene ids");
  if ((counts < 0.0).any()) throw DataError("ExpressionMatrix: negative count");
  const auto check_len = [&](const std::vector<std::uint8_t>& f, const char* nm) {
    if (static_cast<Eigen::Index>(f.size()) != n_genes())
      throw DataError(std::string("ExpressionMatrix: ") + nm + " length != gene count");
  };
  check_len(gene_flags.is_mito, "is_mito");
  check_len(gene_flags.is_hemoglobin, "is_hemoglobin");
  check_len(gene_flags.is_ribosomal, "is_ribosomal");
}

void PerturbationSet::validate() const {
  if (static_cast<Eigen::Index>(treatment_names.size()) != n_treatments())
    throw DataError("PerturbationSet: name registry length != column count");
  std::set<std::string> uniq(treatment_names.begin(), treatment_names.end());
  if (uniq.size() != treatment_names.size())
    throw DataError("PerturbationSet: duplicate treatment names");
  if (((assignments != 0.0) && (assignments != 1.0)).any())
    throw DataError("PerturbationSet: entries must be 0 or 1");
  if (control_index && (*control_index < 0 || *control_index >= n_treatments()))
    throw DataError("PerturbationSet: control index out of range");
}

std::string PerturbationSet::pattern_name(Eigen::Index row) const {
  std::vector<std::string> names;
  for (Eigen::Index t = 0; t < n_treatments(); ++t)
    if (assignments(row, t) != 0.0) names.push_back(treatment_names[static_cast<std::size_t>(t)]);
  std::sort(names.begin(), names.end());
  std::string out;
  for (std::size_t k = 0; k < names.size(); ++k) {
    if (k) out += "+";
    out += names[k];
  }
  return out;
}

ExpressionMatrix load_counts(const std::string& path, CountsFormat format,
                             const std::string& genes_csv_path) {
  ExpressionMatrix m =
      format == CountsFormat::dense_csv ? load_dense_csv(path) : load_matrix_market(path);
  for (Eigen::Index i = 0; i < m.n_cells(); ++i) m.cell_ids.push_back("cell_" + std::to_string(i));
  if (!genes_csv_path.empty()) {
    m.gene_flags = load_gene_flags(genes_csv_path, m.gene_ids);
  } else {
    const auto n = static_cast<std::size_t>(m.n_genes());
    m.gene_flags.is_mito.assign(n, 0);
    m.gene_flags.is_hemoglobin.assign(n, 0);
    m.gene_flags.is_ribosomal.assign(n, 0);
  }
  m.validate();
  return m;
}

void write_counts_csv(const std::string& path, const ExpressionMatrix& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (std::size_t g = 0; g < m.gene_ids.size(); ++g) {
    if (g) out << ',';
    out << m.gene_ids[g];
  }
  out << '\n';
  for (Eigen::Index i = 0; i < m.n_cells(); ++i) {
    for (Eigen::Index g = 0; g < m.n_genes(); ++g) {
      if (g) out << ',';
      out << static_cast<long long>(m.counts(i, g));
    }
    out << '\n';
  }
}

void write_counts_mtx(const std::string& path, const ExpressionMatrix& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  long nnz = 0;
  for (Eigen::Index i = 0; i < m.n_cells(); ++i)
    for (Eigen::Index g = 0; g < m.n_genes(); ++g)
      if (m.counts(i, g) != 0.0) ++nnz;
  out << "%%MatrixMarket matrix coordinate integer general\n";
  out << m.n_cells() << ' ' << m.n_genes() << ' ' << nnz << '\n';
  for (Eigen::Index i = 0; i < m.n_cells(); ++i)
    for (Eigen::Index g = 0; g < m.n_genes(); ++g)
      if (m.counts(i, g) != 0.0)
        out << (i + 1) << ' ' << (g + 1) << ' ' << static_cast<long long>(m.counts(i, g)) << '\n';
}

void write_genes_csv(const std::string& path, const ExpressionMatrix& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "gene_id,is_mito,is_hemoglobin,is_ribosomal\n";
  for (std::size_t g = 0; g < m.gene_ids.size(); ++g) {
    out << m.gene_ids[g] << ',' << int(m.gene_flags.is_mito[g]) << ','
        << int(m.gene_flags.is_hemoglobin[g]) << ',' << int(m.gene_flags.is_ribosomal[g]) << '\n';
  }
}

PerturbationSet load_perturbations(const std::string& path) {
  auto lines = read_lines(path);
  if (lines.empty()) throw DataError(path + ":1: empty perturbation file");
  auto header = split_line(lines[0], ',');
  if (header.size() != 2 || strip(header[0]) != "cell_id" || strip(header[1]) != "treatment")
    throw DataError(path + ":1: expected header cell_id,treatment");

  std::vector<std::vector<std::string>> per_cell;
  std::set<std::string> registry;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (strip(lines[i]).empty()) continue;
    auto f = split_line(lines[i], ',');
    if (f.size() != 2) throw DataError(path + ":" + std::to_string(i + 1) + ": expected 2 fields");
    const std::string combo = strip(f[1]);
    if (combo.empty())
      throw DataError(path + ":" + std::to_string(i + 1) + ": empty treatment field");
    std::vector<std::string> names;
    for (auto& piece : split_line(combo, '+')) {
      const std::string name = strip(piece);
      if (name.empty())
        throw DataError(path + ":" + std::to_string(i + 1) + ": empty treatment name in '" +
                        combo + "'");
      names.push_back(name);
      registry.insert(name);
    }
    per_cell.push_back(std::move(names));
  }

  PerturbationSet p;
  p.treatment_names.assign(registry.begin(), registry.end());
  std::map<std::string, int> index;
  for (std::size_t t = 0; t < p.treatment_names.size(); ++t) {
    index[p.treatment_names[t]] = static_cast<int>(t);
    if (p.treatment_names[t] == "non-targeting") p.control_index = static_cast<int>(t);
  }
  p.assignments = Eigen::ArrayXXd::Zero(static_cast<Eigen::Index>(per_cell.size()),
                                        static_cast<Eigen::Index>(p.treatment_names.size()));
  for (std::size_t i = 0; i < per_cell.size(); ++i)
    for (const auto& name : per_cell[i])
      p.assignments(static_cast<Eigen::Index>(i), index[name]) = 1.0;
  p.validate();
  return p;
}

void write_perturbations_csv(const std::string& path, const PerturbationSet& p,
                             const std::vector<std::string>& cell_ids) {
  if (static_cast<Eigen::Index>(cell_ids.size()) != p.n_cells())
    throw DataError("write_perturbations_csv: cell id count mismatch");
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "cell_id,treatment\n";
  for (Eigen::Index i = 0; i < p.n_cells(); ++i)
    out << cell_ids[static_cast<std::size_t>(i)] << ',' << p.pattern_name(i) << '\n';
}

Split split_ood_combinations(const PerturbationSet& pert, double fraction, std::uint64_t seed,
                             double val_fraction) {
  if (fraction <= 0.0 || fraction >= 1.0)
    throw DataError("split_ood_combinations: fraction must lie in (0,1)");
  std::map<std::string, std::vector<int>> combo_cells;  // multi-gene patterns only
  for (Eigen::Index i = 0; i < pert.n_cells(); ++i) {
    if (pert.assignments.row(i).sum() >= 2.0)
      combo_cells[pert.pattern_name(i)].push_back(static_cast<int>(i));
  }
  if (combo_cells.empty())
    throw DataError(
        "split_ood_combinations: no multi-gene combinations present; use split_random");

  std::vector<std::string> combos;
  for (const auto& [name, cells] : combo_cells) combos.push_back(name);
  Rng rng(seed);
  rng.shuffle(combos);
  const auto n_held =
      static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(combos.size())));
  Split split;
  split.held_out_treatments.assign(combos.begin(),
                                   combos.begin() + static_cast<std::ptrdiff_t>(n_held));
  std::sort(split.held_out_treatments.begin(), split.held_out_treatments.end());
  std::set<std::string> held(split.held_out_treatments.begin(), split.held_out_treatments.end());

  std::vector<int> rest;
  for (Eigen::Index i = 0; i < pert.n_cells(); ++i) {
    if (held.count(pert.pattern_name(i)))
      split.test_indices.push_back(static_cast<int>(i));
    else
      rest.push_back(static_cast<int>(i));
  }
  rng.shuffle(rest);
  const auto n_val = static_cast<std::size_t>(
      std::llround(val_fraction * static_cast<double>(rest.size())));
  split.val_indices.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_val));
  split.train_indices.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_val), rest.end());
  std::sort(split.train_indices.begin(), split.train_indices.end());
  std::sort(split.val_indices.begin(), split.val_indices.end());
  std::sort(split.test_indices.begin(), split.test_indices.end());
  return split;
}

Split split_random(int n_cells, double train_frac, double val_frac, double test_frac,
                   std::uint64_t seed) {
  if (train_frac <= 0.0 || val_frac <= 0.0 || test_frac <= 0.0)
    throw DataError("split_random: fractions must be positive");
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    throw DataError("split_random: fractions must sum to 1");
  std::vector<int> idx(static_cast<std::size_t>(n_cells));
  for (int i = 0; i < n_cells; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(idx);

  // Largest-remainder apportionment keeps every part within 1 of exact.
  const double exact[3] = {train_frac * n_cells, val_frac * n_cells, test_frac * n_cells};
  int sizes[3];
  double rema[3];
  int assigned = 0;
  for (int k = 0; k < 3; ++k) {
    sizes[k] = static_cast<int>(std::floor(exact[k]));
    rema[k] = exact[k] - sizes[k];
    assigned += sizes[k];
  }
  while (assigned < n_cells) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (rema[k] > rema[best]) best = k;
    ++sizes[best];
    rema[best] = -1.0;
    ++assigned;
  }

  Split split;
  auto it = idx.begin();
  split.train_indices.assign(it, it + sizes[0]);
  it += sizes[0];
  split.val_indices.assign(it, it + sizes[1]);
  it += sizes[1];
  split.test_indices.assign(it, idx.end());
  std::sort(split.train_indices.begin(), split.train_indices.end());
  std::sort(split.val_indices.begin(), split.val_indices.end());
  std::sort(split.test_indices.begin(), split.test_indices.end());
  return split;
}

void write_split_json(const std::string& path, const Split& split) {
  nlohmann::json j;
  j["train"] = split.train_indices;
  j["val"] = split.val_indices;
  j["test"] = split.test_indices;
  j["held_out_treatments"] = split.held_out_treatments;
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
}

Split load_split_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  Split split;
  split.train_indices = j.at("train").get<std::vector<int>>();
  split.val_indices = j.at("val").get<std::vector<int>>();
  split.test_indices = j.at("test").get<std::vector<int>>();
  split.held_out_treatments = j.at("held_out_treatments").get<std::vector<std::string>>();
  return split;
}

Eigen::ArrayXd library_sizes(const ExpressionMatrix& m) {
  // Sequential left-to-right sums keep the result independent of Eigen's
  // reduction order.
  Eigen::ArrayXd l(m.n_cells());
  for (Eigen::Index i = 0; i < m.n_cells(); ++i) {
    double acc = 0.0;
    for (Eigen::Index g = 0; g < m.n_genes(); ++g) acc += m.counts(i, g);
    if (acc <= 0.0)
      throw DataError("library_sizes: cell " + std::to_string(i) + " has zero library size");
    l(i) = acc;
  }
  return l;
}

std::vector<std::uint8_t> load_doublets_csv(const std::string& path, Eigen::Index n_cells) {
  if (!std::filesystem::exists(path))
    return std::vector<std::uint8_t>(static_cast<std::size_t>(n_cells), 0);
  auto lines = read_lines(path);
  if (lines.empty() || split_line(lines[0], ',').size() != 2)
    throw DataError(path + ":1: expected header cell_id,is_doublet");
  std::vector<std::uint8_t> flags;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (strip(lines[i]).empty()) continue;
    auto f = split_line(lines[i], ',');
    if (f.size() != 2) throw DataError(path + ":" + std::to_string(i + 1) + ": expected 2 fields");
    const std::string v = strip(f[1]);
    if (v != "0" && v != "1")
      throw DataError(path + ":" + std::to_string(i + 1) + ": is_doublet must be 0 or 1");
    flags.push_back(v == "1" ? 1 : 0);
  }
  if (static_cast<Eigen::Index>(flags.size()) != n_cells)
    throw DataError(path + ": row count " + std::to_string(flags.size()) + " != cell count " +
                    std::to_string(n_cells));
  return flags;
}

void write_doublets_csv(const std::string& path, const std::vector<std::string>& cell_ids,
                        const std::vector<std::uint8_t>& is_doublet) {
  if (cell_ids.size() != is_doublet.size())
    throw DataError("write_doublets_csv: length mismatch");
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "cell_id,is_doublet\n";
  for (std::size_t i = 0; i < cell_ids.size(); ++i)
    out << cell_ids[i] << ',' << int(is_doublet[i]) << '\n';
}

}  // namespace cradle
