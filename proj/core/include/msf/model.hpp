#pragma once

// Multiscale forecaster: per-node encoder, dilated recurrent temporal stack,
// pooled spatial stack over a coarsening hierarchy, attention over all
// (spatial, temporal) scales, and an MLP readout.
//
// Batches lay rows out time-major as [t, b, n]: row (t * B + b) * N + n.
// Every spatial operator acts blockwise on consecutive groups of N rows.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msf/autodiff.hpp"
#include "msf/graph.hpp"
#include "msf/panel.hpp"

namespace msf {

enum class SmpVariant { isotropic, anisotropic };

struct ModelConfig {
  std::size_t window = 12;
  std::size_t horizon = 4;
  std::size_t nodes = 0;
  std::size_t input_channels = 1;
  std::size_t exog_channels = 0;

  std::size_t hidden = 64;
  std::size_t temporal_layers = 4;
  std::size_t temporal_factor = 3;
  std::size_t spatial_levels = 3;
  std::size_t embedding = 32;
  SmpVariant smp = SmpVariant::isotropic;
  std::size_t diffusion_order = 2;
  std::vector<std::size_t> decoder_hidden{128, 128};
  bool per_step_attention = false;
  /// Row-normalize the adjacency used when propagating lifted encodings.
  bool normalize_lift = false;
  std::size_t kmis_radius = 1;

  std::size_t scale_count() const { return temporal_layers * (spatial_levels + 1); }
  std::size_t score_columns() const { return per_step_attention ? horizon : 1; }

  /// Throws ContractError naming the offending field.
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
/// Missing keys keep their defaults; unknown keys throw ContractError.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

/// Model inputs and targets for B windows in [t, b, n] row layout.
struct Batch {
  std::size_t size = 0;
  /// [W * B * N, C]; values at masked cells are ignored.
  Tensor x;
  Tensor mask;
  /// [W * B * N, d_u].
  Tensor exog;
  /// [H * B * N, C].
  Tensor target;
  Tensor target_mask;
};

/// Gathers windows from a (scaled) panel. `input_mask` is applied to the
/// window steps and `target_mask` to the horizon steps; both are [T, N, C].
Batch make_batch(const Panel& panel, const Tensor& input_mask, const Tensor& target_mask,
                 std::span<const WindowSample> windows);

/// Last-observation-carried-forward along the step axis of a [S * G, C]
/// block (S steps of G series); series with no earlier observation get 0.
Tensor impute_last_value(const Tensor& x, const Tensor& mask, std::size_t series);

/// Recorded intermediate values of one forward pass.
struct ForwardTrace {
  /// Scale slot s = k * L + (l - 1); each [B * N, d_h].
  std::vector<Var> encodings;
  /// One [B * N, L(K+1)] softmax per score column (1, or H when per-step).
  std::vector<Var> alphas;
  /// [H * B * N, C] in [h, b, n] layout.
  Var prediction;
  std::size_t batch = 0;
};

class MultiscaleForecaster {
 public:
  /// The hierarchy's base graph defines the node set and must have
  /// config.spatial_levels levels.
  MultiscaleForecaster(ModelConfig config, CoarseningHierarchy hierarchy, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const CoarseningHierarchy& hierarchy() const { return hierarchy_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }

  /// Input encoder: [W * B * N, d_h].
  Var encode_inputs(Tape& tape, const Batch& batch);
  /// Final hidden state of each recurrent layer, l = 1..L; each [B * N, d_h].
  std::vector<Var> temporal_stack(Tape& tape, Var encoded, std::size_t batch);
  /// Descent through SMP and pooling, then lifting back to level 0, for one
  /// temporal scale. Element k is the level-k encoding at the base nodes.
  std::vector<Var> spatial_stack(Tape& tape, Var z0);
  /// One descent SMP layer at level k (rows: blocks of that level's nodes).
  Var smp_messages(Tape& tape, Var x, std::size_t level);
  /// Fused representation per score column and the attention weights.
  std::pair<std::vector<Var>, std::vector<Var>> attention_fuse(Tape& tape,
                                                               const std::vector<Var>& encodings);
  /// MLP readout to [H * B * N, C].
  Var readout(Tape& tape, const std::vector<Var>& fused);

  ForwardTrace forward(Tape& tape, const Batch& batch);
  /// Gradient-free forward returning predictions [H * B * N, C].
  Tensor predict(const Batch& batch);

 private:
  struct LevelOperators {
    // Isotropic: normalized p-hop operators, incoming and (if directed) reverse.
    std::vector<SparseMatrix> forward_hops;
    std::vector<SparseMatrix> reverse_hops;
    // Anisotropic: edge -> receiver / sender incidence and edge weights.
    SparseMatrix receiver;
    SparseMatrix sender;
    Tensor edge_weight;
    // Propagation applied after lifting into this level.
    SparseMatrix lift_propagation;
  };

  void init_parameters(std::uint64_t seed);
  Var mlp_layer(Tape& tape, Var x, const std::string& prefix);

  ModelConfig config_;
  CoarseningHierarchy hierarchy_;
  std::vector<TemporalDownsampler> temporal_;
  std::vector<LevelOperators> ops_;
  ParameterStore params_;
};

/// Expands predictions [H * B * N, C] into B tensors of shape [H, N, C].
std::vector<Tensor> split_predictions(const Tensor& flat, std::size_t horizon, std::size_t batch,
                                      std::size_t nodes);

}  // namespace msf
