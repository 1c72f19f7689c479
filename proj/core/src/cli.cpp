#include "cradle/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cradle/eval.hpp"
#include "cradle/synth.hpp"
#include "cradle/train.hpp"

namespace fs = std::filesystem;

namespace cradle::cli {

namespace {

std::string strip(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "' for hashing");
  std::ostringstream ss;
  ss << in.rdbuf();
  std::ostringstream hex;
  hex << std::hex << fnv1a64(ss.str());
  return hex.str();
}

/// Tracks consumed keys so leftovers can be reported by name.
class SectionReader {
 public:
  SectionReader(const ConfigFile& cfg, std::string section) : section_(std::move(section)) {
    auto it = cfg.sections.find(section_);
    if (it != cfg.sections.end()) entries_ = it->second;
  }

  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  std::string raw(const std::string& key) {
    consumed_.insert(key);
    return entries_.at(key);
  }

  double number(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const std::string v = raw(key);
    try {
      std::size_t used = 0;
      const double x = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return x;
    } catch (const std::exception&) {
      throw ConfigError("[" + section_ + "] " + key + ": cannot parse number '" + v + "'");
    }
  }

  std::int64_t integer(const std::string& key, std::int64_t fallback) {
    const double x = number(key, static_cast<double>(fallback));
    if (x != std::floor(x)) throw ConfigError("[" + section_ + "] " + key + ": expected integer");
    return static_cast<std::int64_t>(x);
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const std::string v = raw(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("[" + section_ + "] " + key + ": expected true/false");
  }

  std::string text(const std::string& key, const std::string& fallback) {
    return has(key) ? raw(key) : fallback;
  }

  std::vector<std::string> list(const std::string& key) {
    std::vector<std::string> out;
    if (!has(key)) return out;
    std::stringstream ss(raw(key));
    std::string piece;
    while (std::getline(ss, piece, ',')) {
      piece = strip(piece);
      if (!piece.empty()) out.push_back(piece);
    }
    return out;
  }

  std::vector<int> int_list(const std::string& key, std::vector<int> fallback) {
    if (!has(key)) return fallback;
    std::vector<int> out;
    for (const auto& piece : list(key)) {
      try {
        out.push_back(std::stoi(piece));
      } catch (const std::exception&) {
        throw ConfigError("[" + section_ + "] " + key + ": bad integer '" + piece + "'");
      }
    }
    return out;
  }

  std::vector<double> double_list(const std::string& key, std::vector<double> fallback) {
    if (!has(key)) return fallback;
    std::vector<double> out;
    for (const auto& piece : list(key)) {
      try {
        out.push_back(std::stod(piece));
      } catch (const std::exception&) {
        throw ConfigError("[" + section_ + "] " + key + ": bad number '" + piece + "'");
      }
    }
    return out;
  }

  void finish() const {
    for (const auto& [key, value] : entries_) {
      (void)value;
      if (!consumed_.count(key))
        throw ConfigError("[" + section_ + "] unknown key '" + key + "'");
    }
  }

 private:
  std::string section_;
  std::map<std::string, std::string> entries_;
  std::set<std::string> consumed_;
};

std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

/// One directory per invocation; refuses to reuse a finalized one.
class RunDir {
 public:
  RunDir(const std::string& explicit_out, const std::string& command, std::uint64_t seed) {
    if (!explicit_out.empty()) {
      dir_ = explicit_out;
    } else {
      const char* root_env = std::getenv("CRADLE_OUT_ROOT");
      fs::path root = root_env ? fs::path(root_env) : fs::path("runs");
      fs::path base = root / (command + "-" + timestamp_utc() + "-seed" + std::to_string(seed));
      dir_ = base.string();
      int suffix = 1;
      while (fs::exists(dir_)) dir_ = base.string() + "-" + std::to_string(++suffix);
    }
    const fs::path manifest = fs::path(dir_) / "manifest.json";
    if (fs::exists(manifest)) {
      std::ifstream in(manifest);
      nlohmann::json j;
      in >> j;
      if (j.value("status", "") == "finalized")
        throw ConfigError("run directory '" + dir_ + "' already holds a finalized manifest");
    }
    fs::create_directories(dir_);
  }

  std::string path(const std::string& name) const { return (fs::path(dir_) / name).string(); }
  const std::string& dir() const { return dir_; }

  void start(const std::string& command, const nlohmann::json& config_echo,
             const std::map<std::string, std::string>& input_digests) {
    manifest_["tool"] = "cradle";
    manifest_["version"] = "0.1.0";
    manifest_["command"] = command;
    manifest_["status"] = "started";
    manifest_["started_utc"] = timestamp_utc();
    manifest_["config"] = config_echo;
    manifest_["inputs"] = input_digests;
    write();
  }

  void add_output(const std::string& name) { outputs_.push_back(name); }

  void finalize() {
    nlohmann::json digests = nlohmann::json::object();
    for (const auto& name : outputs_) digests[name] = file_digest(path(name));
    manifest_["outputs"] = digests;
    manifest_["finished_utc"] = timestamp_utc();
    manifest_["status"] = "finalized";
    write();
  }

 private:
  void write() {
    std::ofstream out(path("manifest.json"));
    if (!out) throw DataError("cannot write manifest in '" + dir_ + "'");
    out << manifest_.dump(2) << '\n';
  }

  std::string dir_;
  nlohmann::json manifest_;
  std::vector<std::string> outputs_;
};

nlohmann::json config_echo_json(const ConfigFile& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [section, entries] : cfg.sections) {
    nlohmann::json s = nlohmann::json::object();
    for (const auto& [k, v] : entries) s[k] = v;
    j[section] = s;
  }
  return j;
}

SynthConfig read_synth_config(const ConfigFile& cfg) {
  SectionReader r(cfg, "synth");
  SynthConfig c;
  c.n_cells = static_cast<int>(r.integer("n_cells", c.n_cells));
  c.n_genes = static_cast<int>(r.integer("n_genes", c.n_genes));
  c.n_treatments = static_cast<int>(r.integer("n_treatments", c.n_treatments));
  c.d_z = static_cast<int>(r.integer("d_z", c.d_z));
  c.mask_density = r.number("mask_density", c.mask_density);
  c.effect_scale = r.number("effect_scale", c.effect_scale);
  c.basal_scale = r.number("basal_scale", c.basal_scale);
  c.baseline_sd = r.number("baseline_sd", c.baseline_sd);
  c.artifact_prevalence = r.number("artifact_prevalence", c.artifact_prevalence);
  c.hb_shift = r.number("hb_shift", c.hb_shift);
  c.artifact_library_factor = r.number("artifact_library_factor", c.artifact_library_factor);
  c.doublet_rate = r.number("doublet_rate", c.doublet_rate);
  c.lib_log_mean = r.number("lib_log_mean", c.lib_log_mean);
  c.lib_log_sd = r.number("lib_log_sd", c.lib_log_sd);
  c.control_fraction = r.number("control_fraction", c.control_fraction);
  if (r.has("combos")) c.combos = r.list("combos");
  c.theta = r.number("theta", c.theta);
  c.mito_fraction = r.number("mito_fraction", c.mito_fraction);
  c.hb_fraction = r.number("hb_fraction", c.hb_fraction);
  c.ribo_fraction = r.number("ribo_fraction", c.ribo_fraction);
  c.seed = static_cast<std::uint64_t>(r.integer("seed", static_cast<std::int64_t>(c.seed)));
  r.finish();
  return c;
}

QcConfig read_qc_config(const ConfigFile& cfg) {
  SectionReader r(cfg, "qc");
  QcConfig c;
  c.n_mads = r.number("n_mads", c.n_mads);
  c.mad_scale = r.number("mad_scale", c.mad_scale);
  c.exclude_doublets_from_pools =
      r.boolean("exclude_doublets_from_pools", c.exclude_doublets_from_pools);
  const char* keys[5] = {"sided_umi", "sided_features", "sided_mito", "sided_hb", "sided_ribo"};
  for (int k = 0; k < 5; ++k) {
    if (!r.has(keys[k])) continue;
    const std::string v = r.raw(keys[k]);
    if (v == "two")
      c.two_sided[static_cast<std::size_t>(k)] = true;
    else if (v == "upper")
      c.two_sided[static_cast<std::size_t>(k)] = false;
    else
      throw ConfigError(std::string("[qc] ") + keys[k] + ": expected two|upper");
  }
  r.finish();
  return c;
}

ModelConfig read_model_config(const ConfigFile& cfg) {
  SectionReader r(cfg, "model");
  ModelConfig c;
  c.d_z = static_cast<int>(r.integer("d_z", c.d_z));
  c.mask_prior_prob = r.number("mask_prior_prob", c.mask_prior_prob);
  c.embedding_prior_scale = r.number("embedding_prior_scale", c.embedding_prior_scale);
  c.enc_hidden = r.int_list("enc_hidden", c.enc_hidden);
  c.emb_hidden = r.int_list("emb_hidden", c.emb_hidden);
  c.dec_hidden = r.int_list("dec_hidden", c.dec_hidden);
  if (r.has("activation")) {
    const std::string a = r.raw("activation");
    if (a == "relu")
      c.hidden_activation = Activation::relu;
    else if (a == "softplus")
      c.hidden_activation = Activation::softplus;
    else
      throw ConfigError("[model] activation: expected relu|softplus");
  }
  if (r.has("variant")) c.variant = variant_from_string(r.raw("variant"));
  r.finish();
  return c;
}

struct SplitSettings {
  std::string kind = "random";  // random | ood | file
  double train_frac = 0.8, val_frac = 0.1, test_frac = 0.1;
  double ood_fraction = 0.25, ood_val_fraction = 0.1;
  std::uint64_t seed = 0;
  std::string file;
};

TrainConfig read_train_config(const ConfigFile& cfg, SplitSettings* split_out) {
  SectionReader r(cfg, "train");
  TrainConfig c;
  c.alpha = r.number("alpha", c.alpha);
  c.beta = r.number("beta", c.beta);
  c.particles = static_cast<int>(r.integer("particles", c.particles));
  c.epochs = static_cast<int>(r.integer("epochs", c.epochs));
  c.batch_size = static_cast<int>(r.integer("batch_size", c.batch_size));
  c.lr = r.number("lr", c.lr);
  c.clip_norm = r.number("clip_norm", c.clip_norm);
  c.seed = static_cast<std::uint64_t>(r.integer("seed", static_cast<std::int64_t>(c.seed)));
  c.qc_n_mads = r.number("qc_n_mads", c.qc_n_mads);
  c.temp_start = r.number("temp_start", c.temp_start);
  c.temp_end = r.number("temp_end", c.temp_end);
  c.anneal_epochs = static_cast<int>(r.integer("anneal_epochs", c.anneal_epochs));
  c.checkpoint_every = static_cast<int>(r.integer("checkpoint_every", c.checkpoint_every));
  c.stop_grad_cf_reference = r.boolean("stop_grad_cf_reference", c.stop_grad_cf_reference);
  if (split_out) {
    split_out->kind = r.text("split_kind", split_out->kind);
    split_out->train_frac = r.number("train_frac", split_out->train_frac);
    split_out->val_frac = r.number("val_frac", split_out->val_frac);
    split_out->test_frac = r.number("test_frac", split_out->test_frac);
    split_out->ood_fraction = r.number("ood_fraction", split_out->ood_fraction);
    split_out->ood_val_fraction = r.number("ood_val_fraction", split_out->ood_val_fraction);
    split_out->seed = static_cast<std::uint64_t>(
        r.integer("split_seed", static_cast<std::int64_t>(c.seed)));
    split_out->file = r.text("split_file", "");
  }
  r.finish();
  return c;
}

EvalOptions read_eval_options(const ConfigFile& cfg) {
  SectionReader r(cfg, "eval");
  EvalOptions o;
  o.n_generated_per_treatment =
      static_cast<int>(r.integer("n_generated_per_treatment", o.n_generated_per_treatment));
  o.n_mads_list = r.double_list("n_mads_list", o.n_mads_list);
  o.seed = static_cast<std::uint64_t>(r.integer("seed", static_cast<std::int64_t>(o.seed)));
  o.jaccard_k = static_cast<int>(r.integer("jaccard_k", o.jaccard_k));
  o.requested_treatments = r.list("treatments");
  r.finish();
  return o;
}

struct LoadedData {
  ExpressionMatrix data;
  PerturbationSet perts;
  std::vector<std::uint8_t> doublets;
};

LoadedData load_data_dir(const std::string& dir) {
  LoadedData d;
  const fs::path root(dir);
  const std::string csv = (root / "counts.csv").string();
  const std::string mtx = (root / "counts.mtx").string();
  const std::string genes = (root / "genes.csv").string();
  const std::string gene_file = fs::exists(genes) ? genes : "";
  if (fs::exists(csv))
    d.data = load_counts(csv, CountsFormat::dense_csv, gene_file);
  else if (fs::exists(mtx))
    d.data = load_counts(mtx, CountsFormat::matrix_market, gene_file);
  else
    throw DataError("data directory '" + dir + "' holds neither counts.csv nor counts.mtx");
  d.perts = load_perturbations((root / "perts.csv").string());
  if (d.perts.n_cells() != d.data.n_cells())
    throw DataError("perts.csv row count " + std::to_string(d.perts.n_cells()) +
                    " != counts rows " + std::to_string(d.data.n_cells()));
  d.doublets = load_doublets_csv((root / "doublets.csv").string(), d.data.n_cells());
  return d;
}

struct CommonFlags {
  std::string config_path, out_dir;
  std::int64_t seed = -1;  // -1: no override
  double n_mads = 0;       // 0: no override
  std::string variant, precision = "f64";
  double alpha = -1;       // <0: no override
};

void apply_precision(const std::string& p) {
  if (p == "f64")
    set_precision(Precision::f64);
  else if (p == "f32")
    set_precision(Precision::f32);
  else
    throw ConfigError("--precision must be f32 or f64");
}

int cmd_synth(const CommonFlags& flags) {
  ConfigFile cfg =
      flags.config_path.empty() ? ConfigFile{} : ConfigFile::parse(flags.config_path);
  SynthConfig sc = read_synth_config(cfg);
  if (flags.seed >= 0) sc.seed = static_cast<std::uint64_t>(flags.seed);
  RunDir run(flags.out_dir, "synth", sc.seed);
  std::map<std::string, std::string> inputs;
  if (!flags.config_path.empty()) inputs["config"] = file_digest(flags.config_path);
  run.start("synth", config_echo_json(cfg), inputs);

  SynthDataset ds = synth_generate(sc);
  write_synth_dataset(run.dir(), ds);
  for (const char* f :
       {"counts.csv", "counts.mtx", "genes.csv", "perts.csv", "doublets.csv", "truth.json"})
    run.add_output(f);
  run.finalize();
  std::cout << "wrote synthetic dataset (" << ds.data.n_cells() << " cells, " << ds.data.n_genes()
            << " genes) to " << run.dir() << "\n";
  return 0;
}

int cmd_qc(const std::string& data_dir, const CommonFlags& flags) {
  ConfigFile cfg =
      flags.config_path.empty() ? ConfigFile{} : ConfigFile::parse(flags.config_path);
  QcConfig qc = read_qc_config(cfg);
  if (flags.n_mads > 0) qc.n_mads = flags.n_mads;
  LoadedData d = load_data_dir(data_dir);
  RunDir run(flags.out_dir, "qc", static_cast<std::uint64_t>(qc.n_mads));
  std::map<std::string, std::string> inputs;
  inputs["data_dir"] = data_dir;
  run.start("qc", config_echo_json(cfg), inputs);

  const QcReport report = qc_evaluate(d.data, d.doublets, qc);
  write_qc_report_csv(run.path("qc_report.csv"), report, d.data.cell_ids);
  run.add_output("qc_report.csv");
  run.finalize();
  std::cout << "qc pass rate at " << qc.n_mads << " MADs: " << qc_pass_rate(report.artifact_label)
            << "\n";
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& resume, const CommonFlags& flags) {
  ConfigFile cfg =
      flags.config_path.empty() ? ConfigFile{} : ConfigFile::parse(flags.config_path);
  QcConfig qc = read_qc_config(cfg);
  ModelConfig mc = read_model_config(cfg);
  SplitSettings split_cfg;
  TrainConfig tc = read_train_config(cfg, &split_cfg);
  if (flags.seed >= 0) {
    tc.seed = static_cast<std::uint64_t>(flags.seed);
    split_cfg.seed = tc.seed;
  }
  if (!flags.variant.empty()) mc.variant = variant_from_string(flags.variant);
  if (flags.alpha >= 0) tc.alpha = flags.alpha;
  if (flags.n_mads > 0) tc.qc_n_mads = flags.n_mads;
  if (mc.variant == ModelVariant::no_cf) tc.alpha = 0.0;

  LoadedData d = load_data_dir(data_dir);
  qc.n_mads = tc.qc_n_mads;
  const QcReport qc_report = qc_evaluate(d.data, d.doublets, qc);

  Split split;
  if (!split_cfg.file.empty()) {
    split = load_split_json(split_cfg.file);
  } else if (split_cfg.kind == "ood") {
    split = split_ood_combinations(d.perts, split_cfg.ood_fraction, split_cfg.seed,
                                   split_cfg.ood_val_fraction);
  } else if (split_cfg.kind == "random") {
    split = split_random(static_cast<int>(d.data.n_cells()), split_cfg.train_frac,
                         split_cfg.val_frac, split_cfg.test_frac, split_cfg.seed);
  } else {
    throw ConfigError("[train] split_kind: expected random|ood|(split_file)");
  }

  RunDir run(flags.out_dir, "train", tc.seed);
  std::map<std::string, std::string> inputs;
  inputs["data_dir"] = data_dir;
  if (!flags.config_path.empty()) inputs["config"] = file_digest(flags.config_path);
  run.start("train", config_echo_json(cfg), inputs);

  TrainOutput out = train(d.data, d.perts, qc_report.artifact_label, split, mc, tc,
                          run.path("checkpoint"), resume);
  write_history_csv(run.path("history.csv"), out.history);
  write_timing_csv(run.path("timing.csv"), out.history);
  write_split_json(run.path("split.json"), split);
  write_qc_report_csv(run.path("qc_report.csv"), qc_report, d.data.cell_ids);
  for (const char* f : {"history.csv", "split.json", "qc_report.csv", "checkpoint.bin",
                        "checkpoint.manifest.json"})
    run.add_output(f);
  run.finalize();
  const double last_j1 = out.history.epochs.empty() ? 0.0 : out.history.epochs.back().j1;
  std::cout << "trained " << tc.epochs << " epochs (variant " << to_string(mc.variant)
            << "), final J1 " << last_j1 << ", run dir " << run.dir() << "\n";
  return 0;
}

int cmd_generate(const std::string& run_dir, const std::vector<std::string>& treatments, int n,
                 int artifact_flag, double library_size, const CommonFlags& flags) {
  if (treatments.empty()) throw ConfigError("generate: no treatments requested");
  if (n <= 0) throw ConfigError("generate: --n must be positive");
  if (artifact_flag != 0 && artifact_flag != 1)
    throw ConfigError("generate: --artifact-flag must be 0 or 1");
  LoadedCheckpoint ck = load_checkpoint((fs::path(run_dir) / "checkpoint").string());
  const std::uint64_t seed =
      flags.seed >= 0 ? static_cast<std::uint64_t>(flags.seed) : ck.bundle.seed;
  RunDir run(flags.out_dir, "generate", seed);
  run.start("generate", nlohmann::json::object(), {{"run_dir", run_dir}});

  const auto& registry = ck.bundle.treatment_names;
  Eigen::ArrayXXd rows(static_cast<Eigen::Index>(treatments.size()) * n,
                       static_cast<Eigen::Index>(registry.size()));
  std::vector<std::string> pattern_of_row;
  Eigen::Index at = 0;
  for (const auto& pattern : treatments) {
    Eigen::ArrayXd row = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(registry.size()));
    std::stringstream ss(pattern);
    std::string piece;
    while (std::getline(ss, piece, '+')) {
      auto it = std::find(registry.begin(), registry.end(), strip(piece));
      if (it == registry.end()) throw DataError("generate: unknown treatment '" + piece + "'");
      row(static_cast<Eigen::Index>(it - registry.begin())) = 1.0;
    }
    for (int k = 0; k < n; ++k) {
      rows.row(at++) = row.transpose();
      pattern_of_row.push_back(pattern);
    }
  }
  const double lib = library_size > 0 ? library_size : ck.bundle.median_train_library;
  Rng rng = Rng::substream(seed, 0x6E6);
  const CountMatrix counts = ck.bundle.model->generate(rows, lib, rng, artifact_flag);

  ExpressionMatrix gen;
  gen.counts = counts;
  gen.gene_ids = ck.bundle.gene_ids;
  if (gen.gene_ids.empty())
    for (int g = 0; g < ck.bundle.model->config().n_genes; ++g)
      gen.gene_ids.push_back("gene_" + std::to_string(g));
  const auto ng = static_cast<std::size_t>(gen.counts.cols());
  gen.gene_flags.is_mito.assign(ng, 0);
  gen.gene_flags.is_hemoglobin.assign(ng, 0);
  gen.gene_flags.is_ribosomal.assign(ng, 0);
  for (Eigen::Index i = 0; i < gen.counts.rows(); ++i)
    gen.cell_ids.push_back("gen_" + std::to_string(i));
  write_counts_csv(run.path("generated_counts.csv"), gen);
  {
    std::ofstream out(run.path("generated_treatments.csv"));
    out << "cell_id,treatment\n";
    for (std::size_t i = 0; i < pattern_of_row.size(); ++i)
      out << "gen_" << i << ',' << pattern_of_row[i] << '\n';
  }
  run.add_output("generated_counts.csv");
  run.add_output("generated_treatments.csv");
  run.finalize();
  std::cout << "generated " << counts.rows() << " cells (artifact_flag " << artifact_flag
            << ") to " << run.dir() << "\n";
  return 0;
}

int cmd_evaluate(const std::string& run_dir, const std::string& data_dir,
                 const CommonFlags& flags) {
  ConfigFile cfg =
      flags.config_path.empty() ? ConfigFile{} : ConfigFile::parse(flags.config_path);
  EvalOptions opts = read_eval_options(cfg);
  opts.qc = read_qc_config(cfg);
  if (flags.seed >= 0) opts.seed = static_cast<std::uint64_t>(flags.seed);
  if (flags.n_mads > 0) opts.n_mads_list = {flags.n_mads};

  LoadedCheckpoint ck = load_checkpoint((fs::path(run_dir) / "checkpoint").string());
  LoadedData d = load_data_dir(data_dir);
  Split split = load_split_json((fs::path(run_dir) / "split.json").string());

  RunDir run(flags.out_dir, "evaluate", opts.seed);
  run.start("evaluate", config_echo_json(cfg), {{"run_dir", run_dir}, {"data_dir", data_dir}});

  const EvalReport report = evaluate(ck.bundle, d.data, d.perts, split, opts);
  write_eval_report_json(run.path("eval_report.json"), report);
  write_eval_summary_csv(run.path("eval_summary.csv"), report);
  write_counts_csv(run.path("generated_counts.csv"), report.generated);

  QcConfig label_qc = opts.qc;
  label_qc.n_mads = opts.n_mads_list.front();
  const QcReport qc_report = qc_evaluate(d.data, d.doublets, label_qc);
  write_latents_csv(run.path("latents.csv"), *ck.bundle.model, d.data, d.perts,
                    qc_report.artifact_label, opts.seed);
  for (const char* f : {"eval_report.json", "eval_summary.csv", "generated_counts.csv",
                        "latents.csv"})
    run.add_output(f);
  run.finalize();
  std::cout << "evaluate: mean ATE-rho " << report.mean_rho << ", mean Jaccard@"
            << report.jaccard_k << " " << report.mean_jaccard;
  for (const auto& [n_mads, rate] : report.qcpr)
    std::cout << ", QCPR(" << n_mads << ") " << rate;
  std::cout << ", run dir " << run.dir() << "\n";
  return 0;
}

}  // namespace

ConfigFile ConfigFile::parse_text(const std::string& text, const std::string& origin) {
  ConfigFile cfg;
  std::string section;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string s = strip(line);
    if (s.empty() || s[0] == '#') continue;
    if (s.front() == '[') {
      if (s.back() != ']')
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": malformed section header");
      section = strip(s.substr(1, s.size() - 2));
      if (section.empty())
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty section name");
      cfg.sections[section];
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    if (section.empty())
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": key outside any [section]");
    const std::string key = strip(s.substr(0, eq));
    const std::string value = strip(s.substr(eq + 1));
    if (key.empty())
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
    if (cfg.sections[section].count(key))
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
    cfg.sections[section][key] = value;
  }
  return cfg;
}

ConfigFile ConfigFile::parse(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str(), path);
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"causal VAE for single-cell perturbation response with artifact disentanglement"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string data_dir, run_dir, resume, treatments_arg;
  int n_generate = 512, artifact_flag = 0;
  double library_size = 0;

  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", flags.config_path, "config file (key = value sections)");
    cmd->add_option("--seed", flags.seed, "seed override");
    cmd->add_option("--out", flags.out_dir, "run directory (default: under CRADLE_OUT_ROOT)");
    cmd->add_option("--precision", flags.precision, "f32|f64 (default f64)");
  };

  auto* synth = app.add_subcommand("synth", "generate a ground-truth synthetic dataset");
  add_common(synth);

  auto* qc = app.add_subcommand("qc", "run quality control over a data directory");
  add_common(qc);
  qc->add_option("--data", data_dir, "data directory")->required();
  qc->add_option("--n-mads", flags.n_mads, "MAD multiplier (3|4|5)");

  auto* train_cmd = app.add_subcommand("train", "train a model");
  add_common(train_cmd);
  train_cmd->add_option("--data", data_dir, "data directory")->required();
  train_cmd->add_option("--variant", flags.variant, "full|no_cf|no_causal");
  train_cmd->add_option("--alpha", flags.alpha, "counterfactual loss weight override");
  train_cmd->add_option("--n-mads", flags.n_mads, "QC MAD multiplier for labels");
  train_cmd->add_option("--resume", resume, "checkpoint prefix to resume from");

  auto* gen = app.add_subcommand("generate", "sample responses from a trained model");
  add_common(gen);
  gen->add_option("--run", run_dir, "training run directory")->required();
  gen->add_option("--treatments", treatments_arg, "comma-separated treatment patterns")
      ->required();
  gen->add_option("--n", n_generate, "cells per treatment");
  gen->add_option("--artifact-flag", artifact_flag, "0 (default, artifact-free) or 1");
  gen->add_option("--library-size", library_size, "library size (default: training median)");

  auto* eval_cmd = app.add_subcommand("evaluate", "score a trained model on the test split");
  add_common(eval_cmd);
  eval_cmd->add_option("--run", run_dir, "training run directory")->required();
  eval_cmd->add_option("--data", data_dir, "data directory")->required();
  eval_cmd->add_option("--n-mads", flags.n_mads, "restrict QCPR to one MAD multiplier");

  std::vector<std::string> argv_like{"cradle"};
  argv_like.insert(argv_like.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_like) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    apply_precision(flags.precision);
    if (synth->parsed()) return cmd_synth(flags);
    if (qc->parsed()) return cmd_qc(data_dir, flags);
    if (train_cmd->parsed()) return cmd_train(data_dir, resume, flags);
    if (gen->parsed()) {
      std::vector<std::string> treatments;
      std::stringstream ss(treatments_arg);
      std::string piece;
      while (std::getline(ss, piece, ',')) {
        piece = strip(piece);
        if (!piece.empty()) treatments.push_back(piece);
      }
      return cmd_generate(run_dir, treatments, n_generate, artifact_flag, library_size, flags);
    }
    if (eval_cmd->parsed()) return cmd_evaluate(run_dir, data_dir, flags);
    std::cerr << "error: no command\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace cradle::cli
