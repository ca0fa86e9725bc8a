#pragma once

// Config-driven experiment runner: trains (model x beta x variant x seed)
// cells, aggregates metrics into CSV, sweeps beta multipliers, and renders
// the summary table. All outputs are plain files; reruns with the same
// config produce byte-identical CSVs.

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dlab/checkpoint.hpp"
#include "dlab/dataset.hpp"
#include "dlab/dataset_io.hpp"
#include "dlab/manipulate.hpp"
#include "dlab/metrics.hpp"
#include "dlab/vae.hpp"

namespace dlab {

namespace detail {

using nlohmann::json;

inline void require_object(const json& j, const std::string& who) {
  if (!j.is_object()) throw ValidationError(who + ": expected a JSON object");
}

inline void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed,
                                const std::string& who) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const auto& k : allowed)
      if (item.key() == k) { ok = true; break; }
    if (!ok) throw ValidationError(who + ": unknown key \"" + item.key() + "\"");
  }
}

template <typename T>
T get_required(const json& j, const std::string& key, const std::string& who) {
  if (!j.contains(key)) throw ValidationError(who + ": missing key \"" + key + "\"");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(who + ": key \"" + key + "\" has the wrong type");
  }
}

template <typename T>
T get_optional(const json& j, const std::string& key, T fallback, const std::string& who) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(who + ": key \"" + key + "\" has the wrong type");
  }
}

// Seeded orthonormal mixing matrix for the linear_gaussian generator.
inline NdArray random_mixing_matrix(int64_t d, uint64_t seed) {
  Rng rng(mix_seed(seed, 0x0a71u));
  NdArray Q = NdArray::zeros({d, d});
  fill_normal(Q, rng);
  for (int64_t j = 0; j < d; ++j) {
    for (int64_t l = 0; l < j; ++l) {
      double dot = 0.0;
      for (int64_t i = 0; i < d; ++i) dot += Q.at(i, l) * Q.at(i, j);
      for (int64_t i = 0; i < d; ++i) Q.at(i, j) -= dot * Q.at(i, l);
    }
    double nrm = 0.0;
    for (int64_t i = 0; i < d; ++i) nrm += Q.at(i, j) * Q.at(i, j);
    nrm = std::sqrt(nrm);
    if (nrm < 1e-9) throw ValidationError("random_mixing_matrix: degenerate draw");
    for (int64_t i = 0; i < d; ++i) Q.at(i, j) /= nrm;
  }
  return Q;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset spec

struct DatasetSpec {
  std::string kind;  // "minisprites" | "grid_cloud" | "linear_gaussian"
  uint64_t seed = 7;

  // minisprites
  std::vector<FactorSpec> grid_spec;
  int64_t image_side = 32;

  // grid_cloud
  GridCloudParams cloud;

  // linear_gaussian
  int64_t dim = 0;
  std::vector<double> lambda;
  int64_t samples = 0;
  uint64_t mixing_seed = 0;
  int index_bins = 8;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["kind"] = kind;
    j["seed"] = seed;
    if (kind == "minisprites") {
      j["image_side"] = image_side;
      nlohmann::json g = nlohmann::json::array();
      for (const auto& f : grid_spec)
        g.push_back({{"name", f.name}, {"levels", f.levels}, {"lo", f.lo}, {"hi", f.hi}});
      j["grid"] = g;
    } else if (kind == "grid_cloud") {
      j["k"] = cloud.k;
      j["cluster_half_width"] = cloud.cluster_half_width;
      j["points_per_side"] = cloud.points_per_side;
      j["lattice_lo"] = cloud.lattice_lo;
      j["lattice_hi"] = cloud.lattice_hi;
    } else {
      j["dim"] = dim;
      j["lambda"] = lambda;
      j["samples"] = samples;
      j["mixing_seed"] = mixing_seed;
      j["index_bins"] = index_bins;
    }
    return j;
  }
};

inline DatasetSpec parse_dataset_spec(const nlohmann::json& j) {
  detail::require_object(j, "dataset");
  DatasetSpec s;
  s.kind = detail::get_required<std::string>(j, "kind", "dataset");
  s.seed = detail::get_optional<uint64_t>(j, "seed", 7, "dataset");
  if (s.kind == "minisprites") {
    detail::reject_unknown_keys(j, {"kind", "seed", "image_side", "grid"}, "dataset");
    s.image_side = detail::get_optional<int64_t>(j, "image_side", 32, "dataset");
    if (j.contains("grid")) {
      if (!j.at("grid").is_array()) throw ValidationError("dataset: grid must be an array");
      for (const auto& f : j.at("grid")) {
        detail::require_object(f, "dataset.grid");
        detail::reject_unknown_keys(f, {"name", "levels", "lo", "hi"}, "dataset.grid");
        FactorSpec fs;
        fs.name = detail::get_required<std::string>(f, "name", "dataset.grid");
        fs.levels = detail::get_required<int>(f, "levels", "dataset.grid");
        fs.lo = detail::get_required<double>(f, "lo", "dataset.grid");
        fs.hi = detail::get_required<double>(f, "hi", "dataset.grid");
        s.grid_spec.push_back(fs);
      }
    }
  } else if (s.kind == "grid_cloud") {
    detail::reject_unknown_keys(
        j, {"kind", "seed", "k", "cluster_half_width", "points_per_side", "lattice_lo",
            "lattice_hi"},
        "dataset");
    s.cloud.k = detail::get_optional<int64_t>(j, "k", s.cloud.k, "dataset");
    s.cloud.cluster_half_width =
        detail::get_optional<double>(j, "cluster_half_width", s.cloud.cluster_half_width,
                                     "dataset");
    s.cloud.points_per_side =
        detail::get_optional<int64_t>(j, "points_per_side", s.cloud.points_per_side, "dataset");
    s.cloud.lattice_lo = detail::get_optional<double>(j, "lattice_lo", s.cloud.lattice_lo,
                                                      "dataset");
    s.cloud.lattice_hi = detail::get_optional<double>(j, "lattice_hi", s.cloud.lattice_hi,
                                                      "dataset");
  } else if (s.kind == "linear_gaussian") {
    detail::reject_unknown_keys(
        j, {"kind", "seed", "dim", "lambda", "samples", "mixing_seed", "index_bins"}, "dataset");
    s.dim = detail::get_required<int64_t>(j, "dim", "dataset");
    s.lambda = detail::get_required<std::vector<double>>(j, "lambda", "dataset");
    s.samples = detail::get_required<int64_t>(j, "samples", "dataset");
    s.mixing_seed = detail::get_optional<uint64_t>(j, "mixing_seed", 77, "dataset");
    s.index_bins = detail::get_optional<int>(j, "index_bins", 8, "dataset");
  } else {
    throw ValidationError("dataset: unknown kind \"" + s.kind + "\"");
  }
  return s;
}

inline LabeledDataset build_dataset(const DatasetSpec& s) {
  if (s.kind == "minisprites") {
    MinispritesParams p;
    p.grid = s.grid_spec.empty() ? default_minisprite_grid() : make_factor_grid(s.grid_spec);
    p.image_side = s.image_side;
    return generate_minisprites(p, s.seed);
  }
  if (s.kind == "grid_cloud") return generate_grid_cloud(s.cloud, s.seed);
  LinearGaussianParams p;
  if (s.dim < 1) throw ValidationError("dataset: dim must be positive");
  if (static_cast<int64_t>(s.lambda.size()) != s.dim)
    throw ValidationError("dataset: lambda must list one variance per dim");
  p.A = detail::random_mixing_matrix(s.dim, s.mixing_seed);
  p.lambda = s.lambda;
  p.n = s.samples;
  p.index_bins = s.index_bins;
  return generate_linear_gaussian(p, s.seed);
}

// ---------------------------------------------------------------------------
// Experiment config

struct HarnessModelSpec {
  std::string name;
  std::string arch = "mlp";
  std::vector<int64_t> hidden;
  int64_t latent_dim = 0;
  bool variational = true;
  std::vector<double> betas;          // ignored for non-variational models
  std::vector<std::string> variants;  // subset of the config variants
};

struct PipelineSpec {
  bool present = false;
  double epsilon_max = 0.1;
  int ensemble_size = 1;
  int64_t steps = 1000;
  int64_t batch_size = 64;
  double lr = 1e-4;
  uint64_t seed = 0;
  uint64_t noise_seed = 0;
  std::string candidate_model;  // name of an entry in models
  double candidate_beta = 1.0;
  std::vector<uint64_t> candidate_seeds;

  nlohmann::json to_json() const {
    return {{"epsilon_max", epsilon_max},   {"ensemble_size", ensemble_size},
            {"steps", steps},               {"batch_size", batch_size},
            {"lr", lr},                     {"seed", seed},
            {"noise_seed", noise_seed},     {"candidate_model", candidate_model},
            {"candidate_beta", candidate_beta}, {"candidate_seeds", candidate_seeds}};
  }
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::vector<HarnessModelSpec> models;
  std::vector<uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  TrainHyper train;  // beta field unused; per-cell beta comes from the model spec
  int metric_bins = 20;
  int factorvae_votes = 800;
  int factorvae_batch = 64;
  std::vector<std::string> variants = {"original"};
  PipelineSpec pipeline;
  std::vector<double> multipliers;  // line search over beta, optional
  bool save_checkpoints = false;
  std::string output_dir;

  const HarnessModelSpec& model_by_name(const std::string& name) const {
    for (const auto& m : models)
      if (m.name == name) return m;
    throw ValidationError("config: no model named \"" + name + "\"");
  }
};

inline constexpr const char* kConfigSchema = "dlab-config/1";

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  detail::require_object(j, "config");
  detail::reject_unknown_keys(
      j, {"schema", "dataset", "models", "seeds", "train", "metrics", "variants", "pipeline",
          "line_search", "save_checkpoints", "output_dir"},
      "config");
  const std::string schema = detail::get_required<std::string>(j, "schema", "config");
  if (schema != kConfigSchema)
    throw ValidationError("config: schema \"" + schema + "\" is not \"" + kConfigSchema + "\"");

  ExperimentConfig cfg;
  cfg.dataset = parse_dataset_spec(j.contains("dataset") ? j.at("dataset") : nlohmann::json());

  if (!j.contains("models") || !j.at("models").is_array() || j.at("models").empty())
    throw ValidationError("config: models must be a non-empty array");
  for (const auto& mj : j.at("models")) {
    detail::require_object(mj, "model");
    detail::reject_unknown_keys(
        mj, {"name", "arch", "hidden", "latent_dim", "variational", "betas", "variants"},
        "model");
    HarnessModelSpec m;
    m.name = detail::get_required<std::string>(mj, "name", "model");
    if (m.name.empty() || m.name.find_first_not_of(
                              "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-") !=
                              std::string::npos)
      throw ValidationError("model: name \"" + m.name + "\" must be non-empty [A-Za-z0-9_-]");
    m.arch = detail::get_optional<std::string>(mj, "arch", "mlp", "model");
    if (m.arch != "mlp" && m.arch != "linear")
      throw ValidationError("model: arch must be \"mlp\" or \"linear\"");
    m.hidden = detail::get_optional<std::vector<int64_t>>(mj, "hidden", {}, "model");
    m.latent_dim = detail::get_required<int64_t>(mj, "latent_dim", "model");
    m.variational = detail::get_optional<bool>(mj, "variational", true, "model");
    m.betas = detail::get_optional<std::vector<double>>(mj, "betas", {}, "model");
    if (m.variational) {
      if (m.betas.empty()) throw ValidationError("model: variational models need a betas list");
      for (double b : m.betas)
        if (!(b > 0.0)) throw ValidationError("model: beta must be > 0");
    } else {
      if (!m.betas.empty())
        throw ValidationError("model: non-variational models take no betas list");
      m.betas = {0.0};
    }
    m.variants = detail::get_optional<std::vector<std::string>>(mj, "variants", {}, "model");
    for (const auto& prev : cfg.models)
      if (prev.name == m.name) throw ValidationError("config: duplicate model name " + m.name);
    cfg.models.push_back(std::move(m));
  }

  cfg.seeds = detail::get_optional<std::vector<uint64_t>>(j, "seeds", cfg.seeds, "config");
  if (cfg.seeds.empty()) throw ValidationError("config: seeds must be non-empty");
  for (size_t a = 0; a < cfg.seeds.size(); ++a)
    for (size_t b = a + 1; b < cfg.seeds.size(); ++b)
      if (cfg.seeds[a] == cfg.seeds[b])
        throw ValidationError("config: seeds must be distinct");

  if (j.contains("train")) {
    const auto& tj = j.at("train");
    detail::require_object(tj, "train");
    detail::reject_unknown_keys(tj, {"steps", "lr", "batch_size"}, "train");
    cfg.train.steps = detail::get_required<int64_t>(tj, "steps", "train");
    cfg.train.lr = detail::get_optional<double>(tj, "lr", 1e-4, "train");
    cfg.train.batch_size = detail::get_optional<int64_t>(tj, "batch_size", 64, "train");
  } else {
    throw ValidationError("config: missing key \"train\"");
  }
  if (cfg.train.steps < 1) throw ValidationError("train: steps must be >= 1");
  if (!(cfg.train.lr > 0.0)) throw ValidationError("train: lr must be > 0");
  if (cfg.train.batch_size < 1) throw ValidationError("train: batch_size must be >= 1");

  if (j.contains("metrics")) {
    const auto& gj = j.at("metrics");
    detail::require_object(gj, "metrics");
    detail::reject_unknown_keys(gj, {"bins", "factorvae_votes", "factorvae_batch"}, "metrics");
    cfg.metric_bins = detail::get_optional<int>(gj, "bins", 20, "metrics");
    cfg.factorvae_votes = detail::get_optional<int>(gj, "factorvae_votes", 800, "metrics");
    cfg.factorvae_batch = detail::get_optional<int>(gj, "factorvae_batch", 64, "metrics");
  }

  cfg.variants = detail::get_optional<std::vector<std::string>>(j, "variants", cfg.variants,
                                                                "config");
  if (cfg.variants.empty()) throw ValidationError("config: variants must be non-empty");
  for (const auto& v : cfg.variants)
    if (v != "original" && v != "modified" && v != "noise")
      throw ValidationError("config: unknown variant \"" + v + "\"");
  for (size_t a = 0; a < cfg.variants.size(); ++a)
    for (size_t b = a + 1; b < cfg.variants.size(); ++b)
      if (cfg.variants[a] == cfg.variants[b])
        throw ValidationError("config: variants must be distinct");
  for (auto& m : cfg.models) {
    if (m.variants.empty()) m.variants = cfg.variants;
    for (const auto& v : m.variants) {
      bool ok = false;
      for (const auto& cv : cfg.variants)
        if (cv == v) { ok = true; break; }
      if (!ok)
        throw ValidationError("model " + m.name + ": variant \"" + v +
                              "\" is not in the config variants");
    }
  }

  bool needs_pipeline = false;
  for (const auto& m : cfg.models)
    for (const auto& v : m.variants)
      if (v == "modified") needs_pipeline = true;

  if (j.contains("pipeline")) {
    const auto& pj = j.at("pipeline");
    detail::require_object(pj, "pipeline");
    detail::reject_unknown_keys(pj,
                                {"epsilon_max", "ensemble_size", "steps", "batch_size", "lr",
                                 "seed", "noise_seed", "candidate"},
                                "pipeline");
    PipelineSpec p;
    p.present = true;
    p.epsilon_max = detail::get_optional<double>(pj, "epsilon_max", 0.1, "pipeline");
    p.ensemble_size = detail::get_optional<int>(pj, "ensemble_size", 1, "pipeline");
    p.steps = detail::get_optional<int64_t>(pj, "steps", 1000, "pipeline");
    p.batch_size = detail::get_optional<int64_t>(pj, "batch_size", 64, "pipeline");
    p.lr = detail::get_optional<double>(pj, "lr", 1e-4, "pipeline");
    p.seed = detail::get_optional<uint64_t>(pj, "seed", 0, "pipeline");
    p.noise_seed = detail::get_optional<uint64_t>(pj, "noise_seed", p.seed, "pipeline");
    const auto& cj = pj.contains("candidate") ? pj.at("candidate") : nlohmann::json();
    detail::require_object(cj, "pipeline.candidate");
    detail::reject_unknown_keys(cj, {"model", "beta", "seeds"}, "pipeline.candidate");
    p.candidate_model = detail::get_required<std::string>(cj, "model", "pipeline.candidate");
    p.candidate_beta = detail::get_optional<double>(cj, "beta", 1.0, "pipeline.candidate");
    p.candidate_seeds =
        detail::get_required<std::vector<uint64_t>>(cj, "seeds", "pipeline.candidate");
    cfg.pipeline = p;
    const HarnessModelSpec& cm = cfg.model_by_name(p.candidate_model);
    if (!cm.variational)
      throw ValidationError("pipeline: candidate model must be variational");
  } else if (needs_pipeline) {
    throw ValidationError("config: a \"modified\" variant needs a pipeline section");
  }

  bool needs_noise = false;
  for (const auto& m : cfg.models)
    for (const auto& v : m.variants)
      if (v == "noise") needs_noise = true;
  if (needs_noise && !cfg.pipeline.present)
    throw ValidationError("config: the \"noise\" variant needs a pipeline section for epsilon");

  if (j.contains("line_search")) {
    const auto& lj = j.at("line_search");
    detail::require_object(lj, "line_search");
    detail::reject_unknown_keys(lj, {"multipliers"}, "line_search");
    cfg.multipliers =
        detail::get_required<std::vector<double>>(lj, "multipliers", "line_search");
    if (cfg.multipliers.empty())
      throw ValidationError("line_search: multipliers must be non-empty");
    for (double m : cfg.multipliers)
      if (!(m > 0.0)) throw ValidationError("line_search: multipliers must be positive");
  }

  cfg.save_checkpoints = detail::get_optional<bool>(j, "save_checkpoints", false, "config");
  cfg.output_dir = detail::get_optional<std::string>(j, "output_dir", "", "config");
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: invalid JSON: ") + e.what());
  }
  return parse_experiment_config(j);
}

// ---------------------------------------------------------------------------
// Cells

struct RunCell {
  size_t model_index = 0;
  double beta = 0.0;
  std::string variant;
  uint64_t seed = 0;

  std::string key(const ExperimentConfig& cfg) const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "_b%.6g_s%llu", beta,
                  static_cast<unsigned long long>(seed));
    return cfg.models[model_index].name + buf + "_" + variant;
  }
};

inline std::vector<RunCell> enumerate_cells(const ExperimentConfig& cfg) {
  static const char* order[] = {"original", "modified", "noise"};
  std::vector<RunCell> cells;
  for (size_t mi = 0; mi < cfg.models.size(); ++mi) {
    const auto& m = cfg.models[mi];
    for (double beta : m.betas) {
      for (const char* v : order) {
        bool wanted = false;
        for (const auto& mv : m.variants)
          if (mv == v) { wanted = true; break; }
        if (!wanted) continue;
        for (uint64_t seed : cfg.seeds) cells.push_back({mi, beta, v, seed});
      }
    }
  }
  return cells;
}

struct CellResult {
  bool failed = false;
  std::string error;
  bool overpruned = false;
  MetricReport metrics;
  LossBreakdown loss;
};

inline ModelConfig cell_model_config(const ExperimentConfig& cfg, const HarnessModelSpec& m,
                                     int64_t input_dim, double beta) {
  ModelConfig mc;
  mc.arch = m.arch;
  mc.input_dim = input_dim;
  mc.latent_dim = m.latent_dim;
  mc.hidden = m.hidden;
  mc.beta = beta;
  mc.variational = m.variational;
  (void)cfg;
  return mc;
}

inline CellResult execute_cell(const ExperimentConfig& cfg, const LabeledDataset& ds,
                               const RunCell& cell, VaeModel* trained_out = nullptr) {
  CellResult res;
  try {
    const HarnessModelSpec& m = cfg.models[cell.model_index];
    ModelConfig mc = cell_model_config(cfg, m, ds.dim(), cell.beta);
    TrainHyper h = cfg.train;
    h.beta = cell.beta;
    h.seed = cell.seed;
    TrainedRun run = train_model(make_vae_model(mc, mix_seed(cell.seed, 0x5eedu)), ds, h);
    RepresentationTable tab = make_representation_table(run.rep, ds);
    res.metrics = compute_metric_report(tab, cell.seed, cfg.metric_bins, cfg.factorvae_votes,
                                        cfg.factorvae_batch);
    res.loss = run.final_eval;
    // The active-units rule reads posterior variances, which only a
    // variational model trains; baselines are never flagged.
    res.overpruned = m.variational && res.metrics.active_units < ds.grid.num_factors();
    if (trained_out) *trained_out = std::move(run.model);
  } catch (const std::exception& e) {
    res.failed = true;
    res.error = e.what();
  }
  return res;
}

// Runs fn(i) for i in [0, n) on a small worker pool; results land by index.
inline void run_cell_pool(size_t n, int threads, const std::function<void(size_t)>& fn) {
  int workers = threads;
  if (workers <= 0) workers = static_cast<int>(std::thread::hardware_concurrency());
  if (workers < 1) workers = 1;
  if (static_cast<size_t>(workers) > n) workers = static_cast<int>(n ? n : 1);
  if (workers == 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Aggregation

struct AggregateRow {
  std::string model;
  std::string arch;
  double beta = 0.0;
  std::string variant;
  size_t seeds = 0;
  size_t used = 0;
  size_t excluded_overpruned = 0;
  size_t failed = 0;
  double mean[4] = {0, 0, 0, 0};  // mig, sap, dci_d, factorvae
  double stdev[4] = {0, 0, 0, 0};
  double active_mean = 0.0;
};

inline std::string aggregate_csv_header() {
  return "model,arch,beta,variant,seeds,used,excluded_overpruned,failed,"
         "mig_mean,mig_std,sap_mean,sap_std,dci_d_mean,dci_d_std,"
         "factorvae_mean,factorvae_std,active_mean";
}

namespace detail {

inline std::string fmt_fixed(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string fmt_beta(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace detail

inline std::string aggregate_csv_row(const AggregateRow& r) {
  std::string out = r.model + "," + r.arch + "," + detail::fmt_beta(r.beta) + "," + r.variant;
  out += "," + std::to_string(r.seeds) + "," + std::to_string(r.used);
  out += "," + std::to_string(r.excluded_overpruned) + "," + std::to_string(r.failed);
  for (int i = 0; i < 4; ++i)
    out += "," + detail::fmt_fixed(r.mean[i]) + "," + detail::fmt_fixed(r.stdev[i]);
  out += "," + detail::fmt_fixed(r.active_mean);
  return out;
}

// Mean and sample standard deviation over the non-overpruned, non-failed
// cells of one (model, beta, variant) group, in seed order.
inline AggregateRow aggregate_group(const ExperimentConfig& cfg, size_t model_index, double beta,
                                    const std::string& variant,
                                    const std::vector<RunCell>& cells,
                                    const std::vector<CellResult>& results) {
  AggregateRow row;
  row.model = cfg.models[model_index].name;
  row.arch = cfg.models[model_index].arch;
  row.beta = beta;
  row.variant = variant;
  std::vector<const CellResult*> picked;
  for (size_t i = 0; i < cells.size(); ++i) {
    const RunCell& c = cells[i];
    if (c.model_index != model_index || c.beta != beta || c.variant != variant) continue;
    ++row.seeds;
    const CellResult& r = results[i];
    if (r.failed) { ++row.failed; continue; }
    if (r.overpruned) { ++row.excluded_overpruned; continue; }
    picked.push_back(&r);
  }
  row.used = picked.size();
  if (picked.empty()) {
    for (int k = 0; k < 4; ++k) row.mean[k] = row.stdev[k] = NAN;
    row.active_mean = NAN;
    return row;
  }
  auto score = [](const CellResult& r, int k) {
    switch (k) {
      case 0: return r.metrics.mig;
      case 1: return r.metrics.sap;
      case 2: return r.metrics.dci_d;
      default: return r.metrics.factorvae;
    }
  };
  const double n = static_cast<double>(picked.size());
  for (int k = 0; k < 4; ++k) {
    double s = 0.0;
    for (const CellResult* r : picked) s += score(*r, k);
    row.mean[k] = s / n;
    double q = 0.0;
    for (const CellResult* r : picked) {
      const double dlt = score(*r, k) - row.mean[k];
      q += dlt * dlt;
    }
    row.stdev[k] = picked.size() > 1 ? std::sqrt(q / (n - 1.0)) : 0.0;
  }
  double a = 0.0;
  for (const CellResult* r : picked) a += r->metrics.active_units;
  row.active_mean = a / n;
  return row;
}

inline std::vector<AggregateRow> aggregate_results(const ExperimentConfig& cfg,
                                                   const std::vector<RunCell>& cells,
                                                   const std::vector<CellResult>& results) {
  static const char* order[] = {"original", "modified", "noise"};
  std::vector<AggregateRow> rows;
  for (size_t mi = 0; mi < cfg.models.size(); ++mi)
    for (double beta : cfg.models[mi].betas)
      for (const char* v : order) {
        bool any = false;
        for (const auto& c : cells)
          if (c.model_index == mi && c.beta == beta && c.variant == v) { any = true; break; }
        if (any) rows.push_back(aggregate_group(cfg, mi, beta, v, cells, results));
      }
  return rows;
}

// ---------------------------------------------------------------------------
// Variant datasets (built once per output directory, cached with their
// generating config embedded so stale files are rebuilt, not trusted)

namespace detail {

inline bool cached_dataset_matches(const std::string& path, const nlohmann::json& want,
                                   LabeledDataset& out) {
  if (!std::filesystem::exists(path)) return false;
  try {
    std::ifstream in(path, std::ios::binary);
    std::string line;
    std::getline(in, line);
    nlohmann::json manifest = nlohmann::json::parse(line);
    if (!manifest.contains("config") || manifest.at("config") != want) return false;
    out = load_dataset(path);
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace detail

struct VariantDatasets {
  LabeledDataset original;
  LabeledDataset modified;  // empty images when unused
  LabeledDataset noise;
  bool has_modified = false;
  bool has_noise = false;
  nlohmann::json pipeline_report;  // populated when the pipeline ran this call
};

inline ModificationConfig pipeline_to_modification_config(const ExperimentConfig& cfg,
                                                          int64_t input_dim) {
  const PipelineSpec& p = cfg.pipeline;
  const HarnessModelSpec& cm = cfg.model_by_name(p.candidate_model);
  ModificationConfig mc;
  mc.epsilon_max = p.epsilon_max;
  mc.ensemble_size = p.ensemble_size;
  mc.steps = p.steps;
  mc.batch_size = p.batch_size;
  mc.lr = p.lr;
  mc.seed = p.seed;
  mc.candidate_model = cell_model_config(cfg, cm, input_dim, p.candidate_beta);
  mc.candidate_hyper = cfg.train;
  mc.candidate_hyper.beta = p.candidate_beta;
  mc.candidate_seeds = p.candidate_seeds;
  mc.metric_bins = cfg.metric_bins;
  return mc;
}

inline VariantDatasets ensure_variant_datasets(const ExperimentConfig& cfg,
                                               const std::filesystem::path& out_dir) {
  bool want_modified = false, want_noise = false;
  for (const auto& m : cfg.models)
    for (const auto& v : m.variants) {
      if (v == "modified") want_modified = true;
      if (v == "noise") want_noise = true;
    }

  const auto ds_dir = out_dir / "datasets";
  std::filesystem::create_directories(ds_dir);

  VariantDatasets out;
  const nlohmann::json ds_cfg = cfg.dataset.to_json();
  const std::string orig_path = (ds_dir / "original.dlab").string();
  if (!detail::cached_dataset_matches(orig_path, ds_cfg, out.original)) {
    out.original = build_dataset(cfg.dataset);
    save_dataset(out.original, orig_path, ds_cfg);
  }

  if (want_modified) {
    nlohmann::json mod_cfg = {{"dataset", ds_cfg}, {"pipeline", cfg.pipeline.to_json()},
                              {"train", {{"steps", cfg.train.steps},
                                         {"lr", cfg.train.lr},
                                         {"batch_size", cfg.train.batch_size}}}};
    const std::string mod_path = (ds_dir / "modified.dlab").string();
    if (!detail::cached_dataset_matches(mod_path, mod_cfg, out.modified)) {
      ModificationConfig mc = pipeline_to_modification_config(cfg, out.original.dim());
      auto [mod, rep] = run_modification_pipeline(out.original, mc);
      out.modified = std::move(mod);
      out.pipeline_report = pipeline_report_json(rep);
      save_dataset(out.modified, mod_path, mod_cfg);
      std::ofstream rj(ds_dir / "pipeline_report.json");
      rj << out.pipeline_report.dump(2) << "\n";
    }
    out.has_modified = true;
  }

  if (want_noise) {
    nlohmann::json noise_cfg = {{"dataset", ds_cfg},
                                {"epsilon_max", cfg.pipeline.epsilon_max},
                                {"noise_seed", cfg.pipeline.noise_seed}};
    const std::string noise_path = (ds_dir / "noise.dlab").string();
    if (!detail::cached_dataset_matches(noise_path, noise_cfg, out.noise)) {
      out.noise = uniform_noise_modification(out.original, cfg.pipeline.epsilon_max,
                                             cfg.pipeline.noise_seed);
      save_dataset(out.noise, noise_path, noise_cfg);
    }
    out.has_noise = true;
  }
  return out;
}

// ---------------------------------------------------------------------------
// run_config

inline nlohmann::json cell_result_json(const ExperimentConfig& cfg, const RunCell& cell,
                                       const CellResult& res) {
  const HarnessModelSpec& m = cfg.models[cell.model_index];
  nlohmann::json j;
  j["model"] = m.name;
  j["arch"] = m.arch;
  j["beta"] = cell.beta;
  j["variant"] = cell.variant;
  j["seed"] = cell.seed;
  j["failed"] = res.failed;
  if (res.failed) {
    j["error"] = res.error;
    return j;
  }
  j["overpruned"] = res.overpruned;
  j["metrics"] = {{"mig", res.metrics.mig},
                  {"sap", res.metrics.sap},
                  {"dci_d", res.metrics.dci_d},
                  {"factorvae", res.metrics.factorvae},
                  {"active_units", res.metrics.active_units}};
  j["loss"] = {{"total", res.loss.total}, {"rec", res.loss.rec}, {"kl", res.loss.kl}};
  return j;
}

struct RunConfigOutcome {
  size_t total_cells = 0;
  size_t failed_cells = 0;
  std::filesystem::path aggregate_csv;
  std::vector<AggregateRow> rows;
};

inline RunConfigOutcome run_config(const ExperimentConfig& cfg, int threads = 0) {
  if (cfg.output_dir.empty()) throw ValidationError("config: output_dir is required");
  const std::filesystem::path out_dir(cfg.output_dir);
  std::filesystem::create_directories(out_dir / "runs");

  VariantDatasets data = ensure_variant_datasets(cfg, out_dir);
  const std::vector<RunCell> cells = enumerate_cells(cfg);
  std::vector<CellResult> results(cells.size());
  std::vector<VaeModel> trained(cfg.save_checkpoints ? cells.size() : 0);

  run_cell_pool(cells.size(), threads, [&](size_t i) {
    const RunCell& c = cells[i];
    const LabeledDataset& ds = c.variant == "modified" ? data.modified
                             : c.variant == "noise"    ? data.noise
                                                       : data.original;
    results[i] = execute_cell(cfg, ds, cells[i],
                              cfg.save_checkpoints ? &trained[i] : nullptr);
  });

  RunConfigOutcome outcome;
  outcome.total_cells = cells.size();
  for (size_t i = 0; i < cells.size(); ++i) {
    const std::string key = cells[i].key(cfg);
    std::ofstream rj(out_dir / "runs" / (key + ".json"));
    rj << cell_result_json(cfg, cells[i], results[i]).dump(2) << "\n";
    if (results[i].failed) ++outcome.failed_cells;
    if (cfg.save_checkpoints && !results[i].failed)
      save_checkpoint(trained[i], cfg.train.steps, cells[i].seed,
                      (out_dir / "runs" / (key + ".dckpt")).string());
  }

  outcome.rows = aggregate_results(cfg, cells, results);
  outcome.aggregate_csv = out_dir / "aggregate.csv";
  std::ofstream csv(outcome.aggregate_csv);
  csv << aggregate_csv_header() << "\n";
  for (const auto& row : outcome.rows) csv << aggregate_csv_row(row) << "\n";
  return outcome;
}

// ---------------------------------------------------------------------------
// line_search: sweeps beta multipliers on the original variant only.

inline std::string line_search_csv_header() {
  return "multiplier," + aggregate_csv_header();
}

inline std::filesystem::path line_search(const ExperimentConfig& cfg, int threads = 0) {
  if (cfg.output_dir.empty()) throw ValidationError("config: output_dir is required");
  if (cfg.multipliers.empty())
    throw ValidationError("line_search: config needs a line_search.multipliers list");
  const std::filesystem::path out_dir(cfg.output_dir);
  std::filesystem::create_directories(out_dir / "runs");

  ExperimentConfig base = cfg;
  base.variants = {"original"};
  for (auto& m : base.models) m.variants = {"original"};
  VariantDatasets data = ensure_variant_datasets(base, out_dir);

  // One scaled config per multiplier; cells from all multipliers run in one
  // pool so threads stay busy across the sweep.
  struct SweepCell {
    double multiplier;
    RunCell cell;
  };
  std::vector<ExperimentConfig> scaled;
  std::vector<SweepCell> sweep;
  for (double mult : cfg.multipliers) {
    ExperimentConfig sc = base;
    for (auto& m : sc.models)
      if (m.variational)
        for (double& b : m.betas) b *= mult;
    scaled.push_back(sc);
    for (const RunCell& c : enumerate_cells(sc))
      sweep.push_back({mult, c});
  }
  std::vector<CellResult> results(sweep.size());
  std::vector<size_t> config_of(sweep.size());
  {
    size_t offset = 0;
    for (size_t s = 0; s < cfg.multipliers.size(); ++s) {
      const size_t n = enumerate_cells(scaled[s]).size();
      for (size_t i = 0; i < n; ++i) config_of[offset + i] = s;
      offset += n;
    }
  }
  run_cell_pool(sweep.size(), threads, [&](size_t i) {
    results[i] = execute_cell(scaled[config_of[i]], data.original, sweep[i].cell);
  });

  const std::filesystem::path csv_path = out_dir / "linesearch.csv";
  std::ofstream csv(csv_path);
  csv << line_search_csv_header() << "\n";
  size_t offset = 0;
  for (size_t s = 0; s < cfg.multipliers.size(); ++s) {
    const std::vector<RunCell> cells = enumerate_cells(scaled[s]);
    std::vector<CellResult> slice(results.begin() + static_cast<long>(offset),
                                  results.begin() + static_cast<long>(offset + cells.size()));
    offset += cells.size();
    for (const auto& row : aggregate_results(scaled[s], cells, slice))
      csv << detail::fmt_beta(cfg.multipliers[s]) << "," << aggregate_csv_row(row) << "\n";
  }
  return csv_path;
}

// ---------------------------------------------------------------------------
// emit_report: renders aggregate.csv as the summary table (MIG, mean ± std,
// models by row, variants by column, "--" where a cell never ran).

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else cur.push_back(c);
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline std::pair<std::filesystem::path, std::filesystem::path> emit_report(
    const std::filesystem::path& run_dir) {
  const auto csv_path = run_dir / "aggregate.csv";
  if (!std::filesystem::exists(csv_path))
    throw ValidationError("report: " + csv_path.string() + " not found");
  std::ifstream in(csv_path);
  std::string line;
  if (!std::getline(in, line) || line != aggregate_csv_header())
    throw ValidationError("report: " + csv_path.string() + " has an unexpected header");

  struct Row {
    std::string model, arch, beta, variant;
    size_t used = 0;
    double mig_mean = 0, mig_std = 0;
  };
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 17)
      throw ValidationError("report: malformed row \"" + line + "\"");
    Row r;
    r.model = f[0];
    r.arch = f[1];
    r.beta = f[2];
    r.variant = f[3];
    r.used = static_cast<size_t>(std::stoull(f[5]));
    r.mig_mean = std::atof(f[8].c_str());
    r.mig_std = std::atof(f[9].c_str());
    rows.push_back(r);
  }
  if (rows.empty()) throw ValidationError("report: aggregate.csv has no data rows");

  std::vector<std::pair<std::string, std::string>> families;  // (model, beta)
  for (const auto& r : rows) {
    bool seen = false;
    for (const auto& fam : families)
      if (fam.first == r.model && fam.second == r.beta) { seen = true; break; }
    if (!seen) families.push_back({r.model, r.beta});
  }
  static const char* variants[] = {"original", "modified", "noise"};

  auto cell_text = [&](const std::string& model, const std::string& beta,
                       const std::string& variant) -> std::string {
    for (const auto& r : rows)
      if (r.model == model && r.beta == beta && r.variant == variant) {
        if (r.used == 0) return "--";
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.2f ± %.2f", r.mig_mean, r.mig_std);
        return buf;
      }
    return "--";
  };

  const auto md_path = run_dir / "report.md";
  const auto out_csv_path = run_dir / "report.csv";
  std::ofstream md(md_path);
  std::ofstream oc(out_csv_path);
  md << "| model | orig. | mod. | noise |\n|---|---|---|---|\n";
  oc << "model,orig,mod,noise\n";
  for (const auto& fam : families) {
    std::string label = fam.first;
    if (fam.second != "0") label += " (beta=" + fam.second + ")";
    md << "| " << label;
    oc << label;
    for (const char* v : variants) {
      const std::string cell = cell_text(fam.first, fam.second, v);
      md << " | " << cell;
      oc << "," << cell;
    }
    md << " |\n";
    oc << "\n";
  }
  return {md_path, out_csv_path};
}

}  // namespace dlab
