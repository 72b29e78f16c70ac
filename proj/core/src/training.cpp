#include "msf/training.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "msf/errors.hpp"
#include "msf/rng.hpp"
#include "json_fields.hpp"

namespace msf {

Var masked_mae_loss(Var pred, const Tensor& target, const Tensor& mask) {
  const Tensor& p = pred.value();
  if (p.shape() != target.shape() || p.shape() != mask.shape()) {
    throw DimensionError("masked_mae_loss: shapes " + shape_string(p.shape()) + ", " +
                         shape_string(target.shape()) + ", " + shape_string(mask.shape()));
  }
  if (p.rank() != 2) throw DimensionError("masked_mae_loss expects [rows, channels]");
  const std::size_t rows = p.rows(), c = p.cols();
  std::vector<double> row_weight(rows, 0.0);
  std::size_t terms = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    double count = 0.0;
    for (std::size_t j = 0; j < c; ++j) count += mask[r * c + j];
    if (count > 0.0) {
      row_weight[r] = 1.0 / count;
      ++terms;
    }
  }
  if (terms == 0) throw ContractError("masked_mae_loss: no valid target");
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_weight[r] == 0.0) continue;
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      if (mask[i] != 0.0) s += mask[i] * std::abs(p[i] - target[i]);
    }
    total += s * row_weight[r];
  }
  const double inv_terms = 1.0 / static_cast<double>(terms);
  return pred.tape->record(
      Tensor::scalar(total * inv_terms), {pred},
      [pred, target, mask, row_weight, inv_terms, c](Tape& t, const std::vector<double>& g) {
        const auto& pv = t.value(pred).storage();
        auto& gp = t.grad(pred.id);
        for (std::size_t i = 0; i < pv.size(); ++i) {
          if (mask[i] == 0.0) continue;
          const double diff = pv[i] - target[i];
          const double sign = diff > 0.0 ? 1.0 : diff < 0.0 ? -1.0 : 0.0;
          gp[i] += g[0] * inv_terms * row_weight[i / c] * mask[i] * sign;
        }
      });
}

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ContractError("train.learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ContractError("train.weight_decay must be nonnegative");
  if (batch_size == 0) throw ContractError("train.batch_size must be positive");
  if (batches_per_epoch == 0) throw ContractError("train.batches_per_epoch must be positive");
  if (!(plateau_factor > 0.0 && plateau_factor <= 1.0)) {
    throw ContractError("train.plateau_factor must lie in (0, 1]");
  }
  if (plateau_patience == 0) throw ContractError("train.plateau_patience must be positive");
  if (early_stop_patience == 0) throw ContractError("train.early_stop_patience must be positive");
  if (!(max_grad_norm >= 0.0)) throw ContractError("train.max_grad_norm must be nonnegative");
  if (eval_batch_size == 0) throw ContractError("train.eval_batch_size must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"batches_per_epoch", c.batches_per_epoch},
          {"max_epochs", c.max_epochs},
          {"plateau_factor", c.plateau_factor},
          {"plateau_patience", c.plateau_patience},
          {"early_stop_patience", c.early_stop_patience},
          {"max_grad_norm", c.max_grad_norm},
          {"eval_batch_size", c.eval_batch_size},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw ContractError("train: expected an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else if (key == "batch_size") c.batch_size = detail::json_count(value, "train." + key);
      else if (key == "batches_per_epoch") c.batches_per_epoch = detail::json_count(value, "train." + key);
      else if (key == "max_epochs") c.max_epochs = detail::json_count(value, "train." + key);
      else if (key == "plateau_factor") c.plateau_factor = value.get<double>();
      else if (key == "plateau_patience") c.plateau_patience = detail::json_count(value, "train." + key);
      else if (key == "early_stop_patience") c.early_stop_patience = detail::json_count(value, "train." + key);
      else if (key == "max_grad_norm") c.max_grad_norm = value.get<double>();
      else if (key == "eval_batch_size") c.eval_batch_size = detail::json_count(value, "train." + key);
      else if (key == "seed") c.seed = detail::json_count<std::uint64_t>(value, "train." + key);
      else throw ContractError("train: unknown key \"" + key + "\"");
    } catch (const nlohmann::json::exception& e) {
      throw ContractError("train." + key + ": " + e.what());
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Optimization

OptimState::OptimState(const ParameterStore& params) {
  for (const Parameter& p : params) {
    first.emplace_back(p.value.shape());
    second.emplace_back(p.value.shape());
  }
}

void adamw_step(ParameterStore& params, OptimState& state, const AdamWHyper& hp) {
  if (state.first.size() != params.size()) throw ContractError("optimizer state does not match parameters");
  for (const Parameter& p : params) {
    if (!p.grad.all_finite()) throw DivergenceError("non-finite gradient in parameter " + p.name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hp.beta1, t);
  const double c2 = 1.0 - std::pow(hp.beta2, t);
  std::size_t idx = 0;
  for (Parameter& p : params) {
    auto& m = state.first[idx].storage();
    auto& v = state.second[idx].storage();
    auto& w = p.value.storage();
    const auto& g = p.grad.storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
      v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      w[i] -= hp.learning_rate * (mh / (std::sqrt(vh) + hp.epsilon) + hp.weight_decay * w[i]);
    }
    ++idx;
  }
}

double clip_gradients(ParameterStore& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter& p : params) {
    for (double g : p.grad.storage()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (Parameter& p : params) {
      for (double& g : p.grad.storage()) g *= f;
    }
  }
  return norm;
}

double PlateauScheduler::step(double metric, double learning_rate) {
  if (metric < best_) {
    best_ = metric;
    bad_epochs_ = 0;
    return learning_rate;
  }
  if (++bad_epochs_ >= patience_) {
    bad_epochs_ = 0;
    return learning_rate * factor_;
  }
  return learning_rate;
}

// ---------------------------------------------------------------------------
// Evaluation

SplitMetrics evaluate(const Predictor& predictor, const ForecastData& data,
                      std::span<const WindowSample> windows, std::size_t batch_size) {
  SplitMetrics out;
  if (windows.empty()) return out;
  const std::size_t horizon = windows.front().horizon;
  const std::size_t n = data.panel.nodes(), c = data.panel.channels();
  std::vector<double> abs_sum(horizon, 0.0);
  std::vector<std::size_t> counts(horizon, 0);
  double sq_sum = 0.0;
  for (std::size_t begin = 0; begin < windows.size(); begin += batch_size) {
    const auto chunk = windows.subspan(begin, std::min(batch_size, windows.size() - begin));
    const Batch batch = make_batch(data.panel, data.input_mask, data.eval_target_mask, chunk);
    const Tensor pred = predictor(batch);
    if (pred.shape() != batch.target.shape()) throw DimensionError("predictor output shape");
    const std::size_t per_step = chunk.size() * n * c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (batch.target_mask[i] == 0.0) continue;
      const double err = (pred[i] - batch.target[i]) * data.scaler.scale[i % c];
      const std::size_t h = i / per_step;
      abs_sum[h] += std::abs(err);
      sq_sum += err * err;
      ++counts[h];
    }
  }
  double total_abs = 0.0;
  for (std::size_t h = 0; h < horizon; ++h) {
    total_abs += abs_sum[h];
    out.valid_targets += counts[h];
    out.per_horizon_mae.push_back(counts[h] > 0 ? abs_sum[h] / static_cast<double>(counts[h]) : 0.0);
  }
  if (out.valid_targets > 0) {
    out.mae = total_abs / static_cast<double>(out.valid_targets);
    out.mse = sq_sum / static_cast<double>(out.valid_targets);
  }
  return out;
}

Tensor persistence_forecast(const Batch& batch, std::size_t nodes, std::size_t horizon) {
  const std::size_t series = batch.size * nodes;
  const Tensor imputed = impute_last_value(batch.x, batch.mask, series);
  const std::size_t c = batch.x.cols();
  const std::size_t last = imputed.rows() - series;
  Tensor out({horizon * series, c});
  for (std::size_t h = 0; h < horizon; ++h) {
    for (std::size_t g = 0; g < series * c; ++g) out[h * series * c + g] = imputed[last * c + g];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

TrainResult train(MultiscaleForecaster& model, const ForecastData& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  const auto& split = data.splits;
  if (split.train.empty() || split.val.empty()) throw ContractError("train: empty train or validation split");

  ParameterStore& params = model.parameters();
  ParameterStore best = params;
  OptimState state(params);
  PlateauScheduler scheduler(cfg.plateau_factor, cfg.plateau_patience);
  AdamWHyper hp;
  hp.learning_rate = cfg.learning_rate;
  hp.weight_decay = cfg.weight_decay;
  const Predictor predictor = [&model](const Batch& b) { return model.predict(b); };

  TrainResult result;
  std::size_t stale = 0;
  std::vector<WindowSample> windows(cfg.batch_size);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng rng(cfg.seed, "batches-epoch-" + std::to_string(epoch));
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t step = 0; step < cfg.batches_per_epoch; ++step) {
      for (auto& w : windows) w = split.train[rng.below(split.train.size())];
      const Batch batch = make_batch(data.panel, data.input_mask, data.train_target_mask, windows);
      if (std::none_of(batch.target_mask.storage().begin(), batch.target_mask.storage().end(),
                       [](double m) { return m != 0.0; })) {
        continue;
      }
      params.zero_grad();
      Tape tape;
      const ForwardTrace trace = model.forward(tape, batch);
      const Var loss = masked_mae_loss(trace.prediction, batch.target, batch.target_mask);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(step));
      }
      tape.backward(loss);
      if (cfg.max_grad_norm > 0.0) clip_gradients(params, cfg.max_grad_norm);
      try {
        adamw_step(params, state, hp);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(step));
      }
      loss_sum += lv;
      ++loss_count;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;
    rec.val_mae = evaluate(predictor, data, split.val, cfg.eval_batch_size).mae;
    rec.learning_rate = hp.learning_rate;
    if (!std::isfinite(rec.val_mae)) {
      throw DivergenceError("non-finite validation MAE at epoch " + std::to_string(epoch));
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.val_mae < result.best_val_mae) {
      result.best_val_mae = rec.val_mae;
      result.best_epoch = epoch;
      best = params;
      stale = 0;
    } else if (++stale >= cfg.early_stop_patience) {
      break;
    }
    hp.learning_rate = scheduler.step(rec.val_mae, hp.learning_rate);
  }
  params = best;
  params.zero_grad();
  return result;
}

}  // namespace msf
