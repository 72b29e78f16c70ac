#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "msf/errors.hpp"
#include "msf/experiment.hpp"
#include "msf/masking.hpp"

namespace {

// Exit codes: 1 invalid input, 2 numerical divergence, 3 anything else.
int report(const char* kind, const std::exception& e, int code) {
  std::fprintf(stderr, "msf: %s: %s\n", kind, e.what());
  return code;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Each training step allocates and frees tensors of a few megabytes; keep
  // them on the heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
  CLI::App app{"Multiscale spatiotemporal forecasting under missing data"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::uint64_t seed = 0;

  auto* run = app.add_subcommand("run", "Train and evaluate one experiment");
  run->add_option("--config", config_path, "Experiment configuration (JSON)")->required();
  auto* seed_opt = run->add_option("--seed", seed, "Replace the configuration seed");
  run->add_option("--out", out_dir, "Output directory");

  msf::MsoExportOptions gen;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-mso", "Generate a synthetic multiscale oscillator panel");
  gen_cmd->add_option("--nodes", gen.nodes)->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--steps", gen.steps)->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--fan-in", gen.fan_in)->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--hops", gen.hops)->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--in-degree", gen.in_degree, "In-degree of the random base graph")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed)->required();
  gen_cmd->add_option("--out", gen_out)->required();
  gen_cmd->add_flag("--force", gen.force, "Overwrite an existing output directory");

  std::string stats_config;
  auto* stats = app.add_subcommand("mask-stats", "Simulate the configured mask and print statistics");
  stats->add_option("--config", stats_config)->required();

  std::string checkpoint, scores_out;
  std::size_t window = 0;
  auto* dump = app.add_subcommand("dump-scores", "Export attention scores for one test window");
  dump->add_option("--checkpoint", checkpoint)->required();
  dump->add_option("--window", window, "Index into the test split")->required();
  dump->add_option("--out", scores_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      msf::ExperimentConfig cfg = msf::load_experiment_config(config_path);
      if (*seed_opt) cfg.override_seed(seed);
      if (!out_dir.empty()) cfg.output_dir = out_dir;
      const nlohmann::json metrics = msf::run_experiment(cfg);
      std::printf("%s\n", metrics.dump(2).c_str());
    } else if (*gen_cmd) {
      nlohmann::json invocation = nlohmann::json::array();
      for (int i = 0; i < argc; ++i) invocation.push_back(argv[i]);
      msf::export_mso(gen_out, gen, invocation);
    } else if (*stats) {
      const msf::PreparedExperiment prep =
          msf::prepare_experiment(msf::load_experiment_config(stats_config));
      std::printf("%s\n", msf::to_json(msf::mask_statistics(prep.simulated.mask)).dump(2).c_str());
    } else if (*dump) {
      msf::dump_scores(checkpoint, window, scores_out);
    }
  } catch (const msf::DivergenceError& e) {
    return report("diverged", e, 2);
  } catch (const msf::ContractError& e) {
    return report("invalid input", e, 1);
  } catch (const msf::ParseError& e) {
    return report("parse error", e, 1);
  } catch (const msf::DimensionError& e) {
    return report("shape mismatch", e, 1);
  } catch (const std::exception& e) {
    return report("error", e, 3);
  }
  return 0;
}
