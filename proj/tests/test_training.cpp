#include <cmath>
#include <gtest/gtest.h>
#include <limits>

#include "msf/checkpoint.hpp"
#include "msf/errors.hpp"
#include "msf/experiment.hpp"
#include "msf/training.hpp"
#include "support.hpp"

namespace msf {
namespace {

using testing::check_gradients;
using testing::random_tensor;

ExperimentConfig tiny_experiment() {
  ExperimentConfig c;
  c.seed = 5;
  c.dataset.nodes = 10;
  c.dataset.steps = 600;
  c.mask = MaskConfig{0.05, 0.01, 4, 12, {}, true, 0};
  c.model.window = 12;
  c.model.horizon = 3;
  c.model.hidden = 8;
  c.model.temporal_layers = 2;
  c.model.temporal_factor = 3;
  c.model.spatial_levels = 1;
  c.model.embedding = 4;
  c.model.decoder_hidden = {16};
  c.train.batch_size = 16;
  c.train.batches_per_epoch = 10;
  c.train.max_epochs = 20;
  c.train.learning_rate = 3e-3;
  return c;
}

const PreparedExperiment& tiny_prepared() {
  static const PreparedExperiment p = prepare_experiment(tiny_experiment());
  return p;
}

MultiscaleForecaster tiny_model(std::uint64_t seed = 1) {
  const auto& p = tiny_prepared();
  return MultiscaleForecaster(p.config.model, p.hierarchy, seed);
}

// ---------------------------------------------------------------------------
// Loss

TEST(MaskedMae, HandExample) {
  Tape tape;
  const Var pred = tape.constant(Tensor({2, 1}, {1.0, 3.0}));
  const Var loss = masked_mae_loss(pred, Tensor({2, 1}, {2.0, 5.0}), Tensor({2, 1}, 1.0));
  EXPECT_DOUBLE_EQ(loss.value().item(), 1.5);
}

TEST(MaskedMae, AveragesChannelsWithinRowThenRows) {
  Tape tape;
  const Var pred = tape.constant(Tensor({3, 2}, {0.0, 0.0, 0.0, 0.0, 0.0, 0.0}));
  const Tensor target({3, 2}, {1.0, 3.0, 4.0, 100.0, 7.0, 7.0});
  const Tensor mask({3, 2}, {1.0, 1.0, 1.0, 0.0, 0.0, 0.0});
  // Rows: mean(1, 3) = 2, 4, skipped.
  EXPECT_DOUBLE_EQ(masked_mae_loss(pred, target, mask).value().item(), 3.0);
}

TEST(MaskedMae, MaskedTargetsDoNotMatter) {
  Rng rng(1, "loss");
  ParameterStore ps;
  Parameter& p = ps.add("p", random_tensor({20, 2}, rng));
  const Tensor target = random_tensor({20, 2}, rng);
  Tensor mask({20, 2}, 1.0);
  for (std::size_t i = 0; i < mask.size(); i += 3) mask[i] = 0.0;
  Tensor perturbed = target;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0.0) perturbed[i] += rng.uniform(-50.0, 50.0);
  }
  auto run = [&](const Tensor& t) {
    ps.zero_grad();
    Tape tape;
    const Var loss = masked_mae_loss(tape.param(p), t, mask);
    tape.backward(loss);
    return std::make_pair(loss.value().item(), p.grad);
  };
  const auto [la, ga] = run(target);
  const auto [lb, gb] = run(perturbed);
  EXPECT_EQ(la, lb);
  EXPECT_EQ(ga, gb);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0.0) {
      EXPECT_EQ(ga[i], 0.0);
    }
  }
}

TEST(MaskedMae, GradientMatchesFiniteDifferences) {
  Rng rng(2, "loss");
  ParameterStore ps;
  Parameter& p = ps.add("p", random_tensor({8, 3}, rng));
  const Tensor target = random_tensor({8, 3}, rng);
  Tensor mask({8, 3}, 1.0);
  mask[4] = mask[5] = 0.0;
  const auto r = check_gradients(ps, [&](Tape& t) { return masked_mae_loss(t.param(p), target, mask); });
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(MaskedMae, RejectsEmptyMaskAndShapeMismatch) {
  Tape tape;
  const Var pred = tape.constant(Tensor({2, 1}, 1.0));
  EXPECT_THROW(masked_mae_loss(pred, Tensor({2, 1}), Tensor({2, 1}, 0.0)), ContractError);
  EXPECT_THROW(masked_mae_loss(pred, Tensor({3, 1}), Tensor({3, 1}, 1.0)), DimensionError);
}

// ---------------------------------------------------------------------------
// Optimizer

TEST(AdamW, MatchesScalarRecurrence) {
  ParameterStore ps;
  Parameter& p = ps.add("w", Tensor({2}, {0.5, -1.5}));
  OptimState st(ps);
  const AdamWHyper hp{0.01, 0.1, 0.9, 0.999, 1e-8};
  const std::vector<std::vector<double>> grads{{0.3, -2.0}, {-0.1, 0.5}, {0.7, 0.0}};
  std::vector<double> w{0.5, -1.5}, m(2, 0.0), v(2, 0.0);
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    p.grad = Tensor({2}, grads[t - 1]);
    adamw_step(ps, st, hp);
    for (std::size_t i = 0; i < 2; ++i) {
      const double g = grads[t - 1][i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1.0 - std::pow(0.9, t)), vh = v[i] / (1.0 - std::pow(0.999, t));
      w[i] -= 0.01 * (mh / (std::sqrt(vh) + 1e-8) + 0.1 * w[i]);
      EXPECT_NEAR(p.value[i], w[i], 1e-15);
    }
  }
  EXPECT_EQ(st.step, 3u);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  ParameterStore ps;
  Parameter& p = ps.add("w", Tensor({3}, {1.0, 2.0, 3.0}));
  OptimState st(ps);
  p.grad = Tensor({3}, {4.0, -0.25, 1e3});
  adamw_step(ps, st, AdamWHyper{0.1, 0.0, 0.9, 0.999, 0.0});
  EXPECT_NEAR(p.value[0], 0.9, 1e-15);
  EXPECT_NEAR(p.value[1], 2.1, 1e-15);
  EXPECT_NEAR(p.value[2], 2.9, 1e-15);
}

TEST(AdamW, DecayWithoutGradientShrinksGeometrically) {
  ParameterStore ps;
  Parameter& p = ps.add("w", Tensor({2}, {2.0, -4.0}));
  OptimState st(ps);
  adamw_step(ps, st, AdamWHyper{0.01, 0.5, 0.9, 0.999, 1e-8});
  EXPECT_DOUBLE_EQ(p.value[0], 2.0 * (1.0 - 0.005));
  EXPECT_DOUBLE_EQ(p.value[1], -4.0 * (1.0 - 0.005));
}

TEST(AdamW, ZeroLearningRateLeavesParameters) {
  Rng rng(3, "opt");
  ParameterStore ps;
  Parameter& p = ps.add("w", random_tensor({4, 4}, rng));
  const Tensor before = p.value;
  OptimState st(ps);
  p.grad = random_tensor({4, 4}, rng);
  adamw_step(ps, st, AdamWHyper{0.0, 0.3});
  EXPECT_EQ(p.value, before);
}

TEST(AdamW, NonFiniteGradientThrowsWithoutUpdating) {
  ParameterStore ps;
  Parameter& a = ps.add("a", Tensor({2}, 1.0));
  Parameter& b = ps.add("b", Tensor({2}, 1.0));
  OptimState st(ps);
  a.grad = Tensor({2}, 0.5);
  b.grad = Tensor({2}, {0.0, std::numeric_limits<double>::quiet_NaN()});
  try {
    adamw_step(ps, st, AdamWHyper{});
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
  }
  EXPECT_EQ(a.value, Tensor({2}, 1.0));
  EXPECT_EQ(st.step, 0u);
}

TEST(AdamW, MinimizesQuadratic) {
  ParameterStore ps;
  Parameter& p = ps.add("w", Tensor({3}, {5.0, -3.0, 0.5}));
  OptimState st(ps);
  const std::vector<double> centre{1.0, 2.0, -1.0};
  for (int it = 0; it < 3000; ++it) {
    for (std::size_t i = 0; i < 3; ++i) p.grad[i] = 2.0 * (p.value[i] - centre[i]);
    adamw_step(ps, st, AdamWHyper{0.01});
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p.value[i], centre[i], 1e-3);
}

TEST(ClipGradients, ScalesToMaximumNorm) {
  ParameterStore ps;
  Parameter& a = ps.add("a", Tensor({1}));
  Parameter& b = ps.add("b", Tensor({1}));
  a.grad = Tensor({1}, 3.0);
  b.grad = Tensor({1}, 4.0);
  EXPECT_DOUBLE_EQ(clip_gradients(ps, 1.0), 5.0);
  EXPECT_DOUBLE_EQ(a.grad[0], 0.6);
  EXPECT_DOUBLE_EQ(b.grad[0], 0.8);
  EXPECT_DOUBLE_EQ(clip_gradients(ps, 10.0), 1.0);
  EXPECT_DOUBLE_EQ(a.grad[0], 0.6);
}

// ---------------------------------------------------------------------------
// Scheduler

TEST(Plateau, HalvesAfterPatienceEpochsWithoutImprovement) {
  PlateauScheduler s(0.5, 10);
  double lr = 1e-3;
  for (int i = 0; i < 11; ++i) lr = s.step(1.0, lr);
  EXPECT_DOUBLE_EQ(lr, 5e-4);
  for (int i = 0; i < 10; ++i) lr = s.step(1.0, lr);
  EXPECT_DOUBLE_EQ(lr, 2.5e-4);
}

TEST(Plateau, ImprovementResetsCounter) {
  PlateauScheduler s(0.5, 3);
  double lr = 1.0;
  lr = s.step(5.0, lr);
  lr = s.step(5.0, lr);
  lr = s.step(5.0, lr);
  lr = s.step(4.0, lr);
  lr = s.step(4.0, lr);
  lr = s.step(4.0, lr);
  EXPECT_EQ(lr, 1.0);
  lr = s.step(4.0, lr);
  EXPECT_EQ(lr, 0.5);
  EXPECT_EQ(s.best(), 4.0);
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(Persistence, RepeatsLastObservedInput) {
  Batch b;
  b.size = 1;
  // W = 3, one series.
  b.x = Tensor({3, 1}, {1.0, 2.0, 0.0});
  b.mask = Tensor({3, 1}, {1.0, 1.0, 0.0});
  EXPECT_EQ(persistence_forecast(b, 1, 2), Tensor({2, 1}, {2.0, 2.0}));
}

TEST(Evaluate, PerfectPredictorScoresZero) {
  const auto& d = tiny_prepared().data;
  const auto m = evaluate([](const Batch& b) { return b.target; }, d, d.splits.test, 64);
  EXPECT_EQ(m.mae, 0.0);
  EXPECT_EQ(m.mse, 0.0);
  EXPECT_GT(m.valid_targets, 0u);
}

TEST(Evaluate, MatchesBruteForceInOriginalUnits) {
  const auto& prep = tiny_prepared();
  const ForecastData& d = prep.data;
  const std::size_t n = d.panel.nodes();
  const auto& ws = d.splits.val;
  const SplitMetrics got = evaluate(
      [n](const Batch& b) { return persistence_forecast(b, n, b.target.rows() / (b.size * n)); }, d, ws, 7);
  const std::size_t hz = ws.front().horizon;
  std::vector<double> abs_sum(hz, 0.0), count(hz, 0.0);
  double sq = 0.0;
  for (const WindowSample& w : ws) {
    for (std::size_t i = 0; i < n; ++i) {
      double last = 0.0;
      bool seen = false;
      for (std::size_t t = w.start; t < w.target_start(); ++t) {
        if (d.input_mask[t * n + i] != 0.0) {
          last = d.panel.x[t * n + i];
          seen = true;
        }
      }
      // Back to original units through the scaler.
      const double pred = (seen ? last : 0.0) * d.scaler.scale[0] + d.scaler.offset[0];
      for (std::size_t h = 0; h < hz; ++h) {
        const std::size_t t = w.target_start() + h;
        if (d.eval_target_mask[t * n + i] == 0.0) continue;
        const double err = pred - prep.raw.x[t * n + i];
        abs_sum[h] += std::abs(err);
        sq += err * err;
        count[h] += 1.0;
      }
    }
  }
  double total = 0.0, c = 0.0;
  for (std::size_t h = 0; h < hz; ++h) {
    EXPECT_NEAR(got.per_horizon_mae[h], abs_sum[h] / count[h], 1e-10);
    total += abs_sum[h];
    c += count[h];
  }
  EXPECT_NEAR(got.mae, total / c, 1e-10);
  EXPECT_NEAR(got.mse, sq / c, 1e-9);
  EXPECT_EQ(got.valid_targets, static_cast<std::size_t>(c));
}

TEST(Evaluate, ConstantMeanPredictorGivesMeanAbsoluteDeviation) {
  const auto& prep = tiny_prepared();
  const ForecastData& d = prep.data;
  const auto got = evaluate([](const Batch& b) { return Tensor(b.target.shape(), 0.0); }, d, d.splits.test, 64);
  const std::size_t n = d.panel.nodes();
  double s = 0.0, c = 0.0;
  for (const WindowSample& w : d.splits.test) {
    for (std::size_t t = w.target_start(); t < w.end(); ++t) {
      for (std::size_t i = 0; i < n; ++i) {
        if (d.eval_target_mask[t * n + i] == 0.0) continue;
        s += std::abs(prep.raw.x[t * n + i] - d.scaler.offset[0]);
        c += 1.0;
      }
    }
  }
  EXPECT_NEAR(got.mae, s / c, 1e-10);
}

// ---------------------------------------------------------------------------
// Training loop

TEST(Train, ZeroEpochsKeepsInitialization) {
  MultiscaleForecaster m = tiny_model();
  const ParameterStore before = m.parameters();
  TrainConfig cfg = tiny_prepared().config.train;
  cfg.max_epochs = 0;
  const TrainResult r = train(m, tiny_prepared().data, cfg);
  EXPECT_TRUE(r.history.empty());
  auto it = before.begin();
  for (const Parameter& p : m.parameters()) EXPECT_EQ(p.value, (it++)->value);
}

TEST(Train, ImprovesOverInitializationAndRestoresBestEpoch) {
  const auto& prep = tiny_prepared();
  MultiscaleForecaster m = tiny_model();
  const Predictor pred = [&m](const Batch& b) { return m.predict(b); };
  const double before = evaluate(pred, prep.data, prep.data.splits.val, 64).mae;
  std::vector<EpochRecord> seen;
  const TrainResult r = train(m, prep.data, prep.config.train, [&](const EpochRecord& e) { seen.push_back(e); });
  ASSERT_EQ(seen.size(), r.history.size());
  EXPECT_LT(r.best_val_mae, 0.8 * before);
  EXPECT_EQ(evaluate(pred, prep.data, prep.data.splits.val, 64).mae, r.best_val_mae);
  EXPECT_EQ(r.history[r.best_epoch - 1].val_mae, r.best_val_mae);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
}

TEST(Train, DeterministicForFixedSeeds) {
  const auto& prep = tiny_prepared();
  TrainConfig cfg = prep.config.train;
  cfg.max_epochs = 3;
  MultiscaleForecaster a = tiny_model(), b = tiny_model();
  const TrainResult ra = train(a, prep.data, cfg), rb = train(b, prep.data, cfg);
  ASSERT_EQ(ra.history.size(), rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) {
    EXPECT_EQ(ra.history[i].train_loss, rb.history[i].train_loss);
    EXPECT_EQ(ra.history[i].val_mae, rb.history[i].val_mae);
  }
  auto it = b.parameters().begin();
  for (const Parameter& p : a.parameters()) EXPECT_EQ(p.value, (it++)->value);
}

TEST(Train, NonFiniteParametersDiverge) {
  MultiscaleForecaster m = tiny_model();
  m.parameters().get("readout.layer1.bias").value[0] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(train(m, tiny_prepared().data, tiny_prepared().config.train), DivergenceError);
}

TEST(Train, RejectsInvalidConfig) {
  MultiscaleForecaster m = tiny_model();
  TrainConfig cfg;
  cfg.batch_size = 0;
  EXPECT_THROW(train(m, tiny_prepared().data, cfg), ContractError);
  EXPECT_THROW(train_config_from_json({{"lr", 0.1}}), ContractError);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripRestoresPredictions) {
  const auto dir = testing::scratch_dir();
  const auto& prep = tiny_prepared();
  MultiscaleForecaster a = tiny_model(1);
  CheckpointInfo info;
  info.model_config = to_json(a.config());
  info.seed = 1;
  info.epoch = 7;
  info.val_mae = 0.25;
  info.extra = {{"note", "x"}};
  const std::string path = (dir / "ckpt.json").string();
  save_checkpoint(path, a.parameters(), info);

  MultiscaleForecaster b = tiny_model(2);
  const CheckpointInfo got = load_checkpoint(path, b.parameters());
  EXPECT_EQ(got.epoch, 7u);
  EXPECT_EQ(got.val_mae, 0.25);
  EXPECT_EQ(got.extra["note"], "x");
  EXPECT_EQ(got.model_config, info.model_config);
  const auto& ws = prep.data.splits.test;
  const Batch batch = make_batch(prep.data.panel, prep.data.input_mask, prep.data.eval_target_mask,
                                 std::span(ws).subspan(0, 4));
  EXPECT_EQ(a.predict(batch), b.predict(batch));
}

TEST(Checkpoint, RejectsMismatchedParameters) {
  const auto dir = testing::scratch_dir();
  MultiscaleForecaster a = tiny_model();
  const std::string path = (dir / "ckpt.json").string();
  save_checkpoint(path, a.parameters(), CheckpointInfo{});
  ParameterStore other;
  other.add("encoder.weight", Tensor({1, 1}));
  EXPECT_THROW(load_checkpoint(path, other), ParseError);
  testing::write_text(dir / "bad.json", "{\"format\": \"other\"}");
  EXPECT_THROW(read_checkpoint_info((dir / "bad.json").string()), ParseError);
}

}  // namespace
}  // namespace msf
