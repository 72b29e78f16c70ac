#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msf/graph.hpp"
#include "msf/masking.hpp"
#include "msf/model.hpp"
#include "msf/panel.hpp"
#include "msf/training.hpp"

namespace msf {

struct DatasetConfig {
  /// "mso" (synthetic) or "csv".
  std::string kind = "mso";
  // Synthetic generator.
  std::size_t nodes = 20;
  std::size_t steps = 5000;
  std::size_t in_degree = 3;
  std::size_t hops = 2;
  std::size_t fan_in = 5;
  // CSV ingestion. The graph comes from an edge list, or else from
  // coordinates with a thresholded kernel.
  std::string observations;
  std::string mask;
  std::string coords;
  std::string graph;
  double tau = 0.1;
  std::size_t knn_cap = 0;
  bool time_encodings = false;
  bool include_dow = false;
  // Shared.
  ScalingMethod scaling = ScalingMethod::standard;
  SplitFractions splits;
};

/// Complete description of one run. Seeds left unset derive from `seed`.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  DatasetConfig dataset;
  MaskConfig mask;
  /// "auto" (mixing graph for synthetic data, data graph otherwise),
  /// "mixing", "graph", or an edge-list path.
  std::string propagation_graph = "auto";
  ModelConfig model;
  TrainConfig train;

  std::optional<std::uint64_t> dataset_seed;
  std::optional<std::uint64_t> mask_seed;
  std::optional<std::uint64_t> init_seed;
  std::optional<std::uint64_t> train_seed;

  /// Replaces the top-level seed and clears every derived seed.
  void override_seed(std::uint64_t s);
};

/// Parses and validates a configuration object. Unknown keys anywhere throw
/// ContractError with the dotted path of the offending field.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);
/// Every field, including derived seeds once resolved.
nlohmann::json to_json(const ExperimentConfig& c);

/// Data, masks and hierarchy ready for training.
struct PreparedExperiment {
  /// Seeds resolved and data-derived model sizes filled in.
  ExperimentConfig config;
  Panel raw;
  WeightedDigraph graph;
  std::optional<WeightedDigraph> mixing;
  SimulatedMask simulated;
  ForecastData data;
  CoarseningHierarchy hierarchy;
};

PreparedExperiment prepare_experiment(const ExperimentConfig& cfg);

struct RunOutcome {
  TrainResult training;
  SplitMetrics val;
  SplitMetrics test;
  SplitMetrics persistence_test;
};

/// Builds a model for `model_cfg` on the prepared data (its hierarchy is
/// rebuilt when the level count differs), trains it and evaluates it.
/// `model_out`, when given, receives the trained model.
RunOutcome train_and_evaluate(const PreparedExperiment& prep, const ModelConfig& model_cfg,
                              const TrainConfig& train_cfg, std::uint64_t init_seed,
                              const EpochCallback& on_epoch = {},
                              std::optional<MultiscaleForecaster>* model_out = nullptr);

/// Runs the full pipeline and writes metrics.json, history.csv,
/// attention.csv, checkpoint.json/.bin, mask-stats.json and
/// resolved-config.json into the output directory. Returns metrics.json.
nlohmann::json run_experiment(const ExperimentConfig& cfg);

nlohmann::json metrics_json(const RunOutcome& r, double missing_fraction);

/// Attention rows (node, horizon_step, k, l, alpha) for one window; shared
/// score sets are repeated for every horizon step.
std::string attention_csv(MultiscaleForecaster& model, const ForecastData& data,
                          const WindowSample& window);

/// Rebuilds the experiment stored in a checkpoint and writes the attention
/// CSV for test window `index`. Throws ContractError if out of range.
void dump_scores(const std::string& checkpoint_path, std::size_t index, const std::string& out_path);

struct MsoExportOptions {
  std::size_t nodes = 20;
  std::size_t steps = 5000;
  std::size_t in_degree = 3;
  std::size_t hops = 2;
  std::size_t fan_in = 5;
  std::uint64_t seed = 0;
  bool force = false;
};

/// Writes panel.csv, mask.csv, graph.csv, adot.csv and manifest.json into
/// `out_dir`. Refuses an existing directory unless opts.force.
void export_mso(const std::string& out_dir, const MsoExportOptions& opts,
                const nlohmann::json& invocation);

}  // namespace msf
