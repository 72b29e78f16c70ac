#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "msf/autodiff.hpp"
#include "msf/model.hpp"
#include "msf/panel.hpp"

namespace msf {

/// Mean over contributing (node, step) rows of the masked mean absolute
/// error across channels. Rows are the leading axis of pred/target/mask
/// ([R, C]); rows whose mask sums to zero are skipped. Throws ContractError
/// when every row is masked.
Var masked_mae_loss(Var pred, const Tensor& target, const Tensor& mask);

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  std::size_t batch_size = 32;
  std::size_t batches_per_epoch = 300;
  std::size_t max_epochs = 200;
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 10;
  std::size_t early_stop_patience = 30;
  /// Global gradient-norm cap; 0 disables clipping.
  double max_grad_norm = 0.0;
  std::size_t eval_batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct AdamWHyper {
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First and second moments in parameter-store order.
struct OptimState {
  std::vector<Tensor> first;
  std::vector<Tensor> second;
  std::size_t step = 0;

  explicit OptimState(const ParameterStore& params);
};

/// One decoupled-weight-decay adaptive-moment update from Parameter::grad.
/// Throws DivergenceError naming the first parameter with a non-finite
/// gradient; no parameter is modified in that case.
void adamw_step(ParameterStore& params, OptimState& state, const AdamWHyper& hp);

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before scaling.
double clip_gradients(ParameterStore& params, double max_norm);

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without strict improvement, then starts counting again.
class PlateauScheduler {
 public:
  PlateauScheduler(double factor, std::size_t patience) : factor_(factor), patience_(patience) {}

  double step(double metric, double learning_rate);
  double best() const { return best_; }

 private:
  double factor_;
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs_ = 0;
};

/// Scaled panel plus the masks of the two evaluation regimes.
struct ForecastData {
  Panel panel;
  Scaler scaler;
  /// Original validity combined with the simulated pattern.
  Tensor input_mask;
  /// Training targets use the simulated pattern too.
  Tensor train_target_mask;
  /// Evaluation targets: original validity only.
  Tensor eval_target_mask;
  WindowSplits splits;
};

using Predictor = std::function<Tensor(const Batch&)>;

struct SplitMetrics {
  double mae = 0.0;
  double mse = 0.0;
  std::vector<double> per_horizon_mae;
  std::size_t valid_targets = 0;
};

/// Masked MAE/MSE in original units over evaluation-valid targets, with
/// inputs masked by data.input_mask.
SplitMetrics evaluate(const Predictor& predictor, const ForecastData& data,
                      std::span<const WindowSample> windows, std::size_t batch_size);

/// Repeats the last observed input value of each series over the horizon.
Tensor persistence_forecast(const Batch& batch, std::size_t nodes, std::size_t horizon);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mae = 0.0;
  double learning_rate = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_mae = std::numeric_limits<double>::infinity();
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch training with plateau scheduling and early stopping. On return
/// the model holds the parameters of the epoch with the lowest validation
/// MAE (the initialization if no epoch ran). Throws DivergenceError on a
/// non-finite loss; epochs already completed were passed to `on_epoch`.
TrainResult train(MultiscaleForecaster& model, const ForecastData& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

}  // namespace msf
