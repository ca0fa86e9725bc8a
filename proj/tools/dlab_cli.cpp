// Command-line front end: dataset generation, training runs, metric
// evaluation, dataset modification, and report rendering, all driven by a
// JSON config. Exit codes: 0 success, 2 validation error, 1 runtime failure.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dlab/harness.hpp"
#include "dlab/pca_theory.hpp"

namespace {

struct Cli {
  std::string command;
  std::string config_path;
  std::string out;
  bool has_seed = false;
  uint64_t seed = 0;
  int threads = 0;
  std::vector<std::string> positional;
};

void print_usage() {
  std::puts(
      "usage: dlab <command> [--config PATH] [--out DIR] [--seed N] [--threads N]\n"
      "\n"
      "commands:\n"
      "  gen         build the config's datasets (original, and noise when listed)\n"
      "  train       run every (model x beta x variant x seed) cell, write\n"
      "              per-run JSON plus aggregate.csv\n"
      "  eval        eval CKPT DATASET: metric report for a checkpoint (JSON)\n"
      "  modify      run the dataset modification pipeline, write modified.dlab\n"
      "  noise       write the uniform-noise counterpart, noise.dlab\n"
      "  verify-pca  verify-pca CKPT DATASET: decoder/PCA alignment report (JSON)\n"
      "  linesearch  sweep beta multipliers, write linesearch.csv\n"
      "  report      report RUN_DIR: render aggregate.csv as report.md/report.csv\n"
      "\n"
      "--out overrides the config's output_dir. --seed overrides the dataset seed\n"
      "(gen), the noise seed (noise), the pipeline seed (modify), or the metric\n"
      "seed (eval). Exit codes: 0 ok, 2 bad config/arguments, 1 runtime failure.");
}

Cli parse_cli(int argc, char** argv) {
  Cli c;
  if (argc < 2) throw dlab::ValidationError("missing command; try --help");
  c.command = argv[1];
  if (c.command == "--help" || c.command == "-h") c.command = "help";
  for (int i = 2; i < argc; ++i) {
    const std::string a = argv[i];
    auto next = [&](const char* flag) -> std::string {
      if (i + 1 >= argc) throw dlab::ValidationError(std::string(flag) + " needs a value");
      return argv[++i];
    };
    if (a == "--config") c.config_path = next("--config");
    else if (a == "--out") c.out = next("--out");
    else if (a == "--seed") {
      c.seed = std::stoull(next("--seed"));
      c.has_seed = true;
    } else if (a == "--threads") c.threads = std::stoi(next("--threads"));
    else if (a == "--help" || a == "-h") c.command = "help";
    else if (!a.empty() && a[0] == '-')
      throw dlab::ValidationError("unknown flag " + a);
    else c.positional.push_back(a);
  }
  return c;
}

dlab::ExperimentConfig load_config(const Cli& cli) {
  if (cli.config_path.empty()) throw dlab::ValidationError("--config is required");
  dlab::ExperimentConfig cfg = dlab::load_experiment_config(cli.config_path);
  if (!cli.out.empty()) cfg.output_dir = cli.out;
  return cfg;
}

void write_json_output(const nlohmann::json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out);
    f << j.dump(2) << "\n";
  }
}

int run(const Cli& cli) {
  using namespace dlab;

  if (cli.command == "help") {
    print_usage();
    return 0;
  }

  if (cli.command == "gen") {
    ExperimentConfig cfg = load_config(cli);
    if (cli.has_seed) cfg.dataset.seed = cli.seed;
    if (cfg.output_dir.empty()) throw ValidationError("config: output_dir is required");
    // Skip the expensive pipeline here; `modify` owns that step.
    for (auto& m : cfg.models) {
      std::vector<std::string> kept;
      for (const auto& v : m.variants)
        if (v != "modified") kept.push_back(v);
      if (kept.empty()) kept = {"original"};
      m.variants = kept;
    }
    VariantDatasets data = ensure_variant_datasets(cfg, cfg.output_dir);
    std::printf("wrote %s/datasets/original.dlab (n=%lld, d=%lld)\n", cfg.output_dir.c_str(),
                (long long)data.original.n(), (long long)data.original.dim());
    if (data.has_noise)
      std::printf("wrote %s/datasets/noise.dlab\n", cfg.output_dir.c_str());
    return 0;
  }

  if (cli.command == "train") {
    ExperimentConfig cfg = load_config(cli);
    RunConfigOutcome out = run_config(cfg, cli.threads);
    std::printf("ran %zu cells (%zu failed); wrote %s\n", out.total_cells, out.failed_cells,
                out.aggregate_csv.string().c_str());
    return out.failed_cells == out.total_cells && out.total_cells > 0 ? 1 : 0;
  }

  if (cli.command == "eval" || cli.command == "verify-pca") {
    if (cli.positional.size() != 2)
      throw ValidationError(cli.command + " needs: CHECKPOINT DATASET");
    Checkpoint ckpt = load_checkpoint(cli.positional[0]);
    LabeledDataset ds = load_dataset(cli.positional[1]);
    if (cli.command == "eval") {
      Representation rep = eval_representation(ckpt.model, ds.images);
      RepresentationTable tab = make_representation_table(rep, ds);
      MetricReport mr = compute_metric_report(tab, cli.has_seed ? cli.seed : 0);
      write_json_output(metric_report_json(mr), cli.out);
    } else {
      PcaAlignmentReport rep = verify_pca_alignment(ckpt.model, ds);
      write_json_output(alignment_report_json(rep), cli.out);
    }
    return 0;
  }

  if (cli.command == "modify") {
    ExperimentConfig cfg = load_config(cli);
    if (cli.has_seed) cfg.pipeline.seed = cli.seed;
    if (!cfg.pipeline.present)
      throw ValidationError("modify: the config needs a pipeline section");
    if (cfg.output_dir.empty()) throw ValidationError("config: output_dir is required");
    bool listed = false;
    for (auto& m : cfg.models)
      for (const auto& v : m.variants)
        if (v == "modified") listed = true;
    if (!listed) {
      // Force the build even if no model trains on it afterwards.
      ExperimentConfig forced = cfg;
      forced.variants.push_back("modified");
      forced.models.front().variants.push_back("modified");
      ensure_variant_datasets(forced, forced.output_dir);
    } else {
      ensure_variant_datasets(cfg, cfg.output_dir);
    }
    std::printf("wrote %s/datasets/modified.dlab\n", cfg.output_dir.c_str());
    return 0;
  }

  if (cli.command == "noise") {
    ExperimentConfig cfg = load_config(cli);
    if (!cfg.pipeline.present)
      throw ValidationError("noise: the config needs a pipeline section for epsilon");
    if (cli.has_seed) cfg.pipeline.noise_seed = cli.seed;
    if (cfg.output_dir.empty()) throw ValidationError("config: output_dir is required");
    LabeledDataset original = build_dataset(cfg.dataset);
    LabeledDataset noisy =
        uniform_noise_modification(original, cfg.pipeline.epsilon_max, cfg.pipeline.noise_seed);
    const std::filesystem::path dir = std::filesystem::path(cfg.output_dir) / "datasets";
    std::filesystem::create_directories(dir);
    save_dataset(noisy, (dir / "noise.dlab").string(),
                 {{"dataset", cfg.dataset.to_json()},
                  {"epsilon_max", cfg.pipeline.epsilon_max},
                  {"noise_seed", cfg.pipeline.noise_seed}});
    std::printf("wrote %s/datasets/noise.dlab\n", cfg.output_dir.c_str());
    return 0;
  }

  if (cli.command == "linesearch") {
    ExperimentConfig cfg = load_config(cli);
    std::filesystem::path csv = line_search(cfg, cli.threads);
    std::printf("wrote %s\n", csv.string().c_str());
    return 0;
  }

  if (cli.command == "report") {
    std::filesystem::path dir;
    if (!cli.positional.empty()) dir = cli.positional[0];
    else if (!cli.out.empty()) dir = cli.out;
    else throw ValidationError("report needs a run directory (positional or --out)");
    auto [md, csv] = emit_report(dir);
    std::printf("wrote %s and %s\n", md.string().c_str(), csv.string().c_str());
    return 0;
  }

  throw ValidationError("unknown command \"" + cli.command + "\"; try --help");
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(parse_cli(argc, argv));
  } catch (const dlab::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
