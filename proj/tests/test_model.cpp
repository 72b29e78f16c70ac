#include <cmath>
#include <gtest/gtest.h>
#include <numeric>

#include "msf/errors.hpp"
#include "msf/model.hpp"
#include "msf/mso.hpp"
#include "msf/training.hpp"
#include "support.hpp"

namespace msf {
namespace {

using testing::check_gradients;
using testing::random_tensor;

ModelConfig small_config(std::size_t nodes) {
  ModelConfig c;
  c.window = 6;
  c.horizon = 2;
  c.nodes = nodes;
  c.hidden = 4;
  c.temporal_layers = 2;
  c.temporal_factor = 2;
  c.spatial_levels = 1;
  c.embedding = 3;
  c.diffusion_order = 2;
  c.decoder_hidden = {5};
  return c;
}

Batch random_batch(const ModelConfig& c, std::size_t size, std::uint64_t seed, double missing = 0.0) {
  Rng rng(seed, "test-batch");
  Batch b;
  b.size = size;
  const std::size_t rows = c.window * size * c.nodes;
  const std::size_t out = c.horizon * size * c.nodes;
  b.x = random_tensor({rows, c.input_channels}, rng);
  b.mask = Tensor({rows, c.input_channels}, 1.0);
  for (double& m : b.mask.storage()) m = rng.uniform(0.0, 1.0) < missing ? 0.0 : 1.0;
  b.exog = random_tensor({rows, c.exog_channels}, rng);
  b.target = random_tensor({out, c.input_channels}, rng);
  b.target_mask = Tensor({out, c.input_channels}, 1.0);
  return b;
}

MultiscaleForecaster make_model(const ModelConfig& c, const WeightedDigraph& g, std::uint64_t seed = 1) {
  return MultiscaleForecaster(c, build_hierarchy(g, c.spatial_levels, c.kmis_radius), seed);
}

void zero(Tensor& t) { std::fill(t.storage().begin(), t.storage().end(), 0.0); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TEST(Impute, CarriesLastObservationForward) {
  const Tensor x({4, 1}, {5.0, 7.0, 8.0, 9.0});
  const Tensor m({4, 1}, {1.0, 0.0, 0.0, 1.0});
  EXPECT_EQ(impute_last_value(x, m, 1), Tensor({4, 1}, {5.0, 5.0, 5.0, 9.0}));
}

TEST(Impute, LeadingGapIsZeroAndSeriesAreIndependent) {
  // Two series interleaved per step.
  const Tensor x({6, 1}, {1.0, 4.0, 2.0, 5.0, 3.0, 6.0});
  const Tensor m({6, 1}, {0.0, 1.0, 1.0, 0.0, 0.0, 0.0});
  EXPECT_EQ(impute_last_value(x, m, 2), Tensor({6, 1}, {0.0, 4.0, 2.0, 4.0, 2.0, 4.0}));
}

TEST(Impute, FullyObservedIsIdentity) {
  Rng rng(3, "t");
  const Tensor x = random_tensor({12, 2}, rng);
  EXPECT_EQ(impute_last_value(x, Tensor({12, 2}, 1.0), 3), x);
  EXPECT_THROW(impute_last_value(x, Tensor({12, 2}, 1.0), 5), DimensionError);
}

TEST(MakeBatch, TimeMajorLayoutAndMasking) {
  Panel p;
  p.x = Tensor({6, 2, 1});
  for (std::size_t i = 0; i < p.x.size(); ++i) p.x[i] = static_cast<double>(i);
  p.exog = Tensor({6, 2, 0});
  Tensor in_mask({6, 2, 1}, 1.0), tgt_mask({6, 2, 1}, 1.0);
  in_mask[(1 * 2 + 1)] = 0.0;  // step 1, node 1
  tgt_mask[(4 * 2 + 0)] = 0.0;  // step 4, node 0
  const std::vector<WindowSample> ws{{0, 3, 2}, {1, 3, 2}};
  const Batch b = make_batch(p, in_mask, tgt_mask, ws);
  EXPECT_EQ(b.x.shape(), (std::vector<std::size_t>{12, 1}));
  // Row (t * B + b) * N + n holds step start_b + t of node n.
  EXPECT_EQ(b.x[(2 * 2 + 1) * 2 + 0], p.x[(3 * 2 + 0)]);
  EXPECT_EQ(b.mask[(1 * 2 + 0) * 2 + 1], 0.0);
  EXPECT_EQ(b.x[(1 * 2 + 0) * 2 + 1], 0.0);
  EXPECT_EQ(b.mask[(0 * 2 + 1) * 2 + 1], 0.0);
  EXPECT_EQ(b.target[(0 * 2 + 1) * 2 + 1], p.x[(4 * 2 + 1)]);
  EXPECT_EQ(b.target[(0 * 2 + 1) * 2 + 0], 0.0);
  EXPECT_EQ(b.target_mask[(1 * 2 + 0) * 2 + 0], 0.0);
  EXPECT_EQ(b.target_mask[(0 * 2 + 1) * 2 + 0], 0.0);
}

TEST(SplitPredictions, InvertsHorizonMajorLayout) {
  Tensor flat({2 * 3 * 4, 1});
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = static_cast<double>(i);
  const auto parts = split_predictions(flat, 2, 3, 4);
  ASSERT_EQ(parts.size(), 3u);
  EXPECT_EQ(parts[2][(1 * 4 + 3)], flat[(1 * 3 + 2) * 4 + 3]);
  EXPECT_THROW(split_predictions(flat, 3, 3, 4), DimensionError);
}

TEST(ModelConfig, JsonRoundTripAndUnknownKey) {
  ModelConfig c = small_config(7);
  c.smp = SmpVariant::anisotropic;
  c.per_step_attention = true;
  const ModelConfig back = model_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(model_config_from_json({{"hiden", 3}}), ContractError);
  EXPECT_THROW(model_config_from_json({{"smp", "diagonal"}}), ContractError);
  EXPECT_THROW(model_config_from_json({{"window", "six"}}), ContractError);
  c.hidden = 0;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(Model, RejectsMismatchedHierarchyAndBatch) {
  ModelConfig c = small_config(6);
  const WeightedDigraph g = path_graph(6);
  EXPECT_THROW(MultiscaleForecaster(c, build_hierarchy(g, 2), 0), ContractError);
  c.nodes = 5;
  EXPECT_THROW(MultiscaleForecaster(c, build_hierarchy(g, 1), 0), DimensionError);
  c.nodes = 6;
  MultiscaleForecaster m(c, build_hierarchy(g, 1), 0);
  ModelConfig other = c;
  other.window = 5;
  EXPECT_THROW(m.predict(random_batch(other, 2, 0)), DimensionError);
}

TEST(Model, OutputShapesAndScaleCount) {
  ModelConfig c = small_config(8);
  c.temporal_layers = 3;
  c.spatial_levels = 2;
  c.window = 9;
  c.per_step_attention = true;
  MultiscaleForecaster m = make_model(c, random_in_degree_graph(8, 2, 3));
  Tape tape(false);
  const ForwardTrace tr = m.forward(tape, random_batch(c, 3, 1));
  EXPECT_EQ(tr.encodings.size(), 9u);
  for (const Var& z : tr.encodings) EXPECT_EQ(z.shape(), (std::vector<std::size_t>{24, 4}));
  ASSERT_EQ(tr.alphas.size(), c.horizon);
  EXPECT_EQ(tr.alphas[0].shape(), (std::vector<std::size_t>{24, 9}));
  EXPECT_EQ(tr.prediction.shape(), (std::vector<std::size_t>{c.horizon * 24, 1}));
}

TEST(Model, AttentionRowsSumToOne) {
  for (bool per_step : {false, true}) {
    ModelConfig c = small_config(10);
    c.per_step_attention = per_step;
    MultiscaleForecaster m = make_model(c, random_in_degree_graph(10, 3, 4));
    Tape tape(false);
    const ForwardTrace tr = m.forward(tape, random_batch(c, 2, 5, 0.3));
    for (const Var& a : tr.alphas) {
      for (std::size_t r = 0; r < a.rows(); ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
          EXPECT_GT(a.value()(r, j), 0.0);
          s += a.value()(r, j);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    }
  }
}

TEST(Model, WithoutSpatialLevelsEncodingsAreTemporalStates) {
  ModelConfig c = small_config(5);
  c.spatial_levels = 0;
  MultiscaleForecaster m = make_model(c, path_graph(5));
  const Batch b = random_batch(c, 2, 2);
  Tape tape(false);
  const ForwardTrace tr = m.forward(tape, b);
  const std::vector<Var> states = m.temporal_stack(tape, m.encode_inputs(tape, b), b.size);
  ASSERT_EQ(tr.encodings.size(), c.temporal_layers);
  for (std::size_t l = 0; l < states.size(); ++l) EXPECT_EQ(tr.encodings[l].value(), states[l].value());
}

TEST(Model, SingleScaleAttentionIsIdentity) {
  ModelConfig c = small_config(5);
  c.spatial_levels = 0;
  c.temporal_layers = 1;
  MultiscaleForecaster m = make_model(c, path_graph(5));
  Tape tape(false);
  const ForwardTrace tr = m.forward(tape, random_batch(c, 2, 2));
  EXPECT_EQ(tr.alphas[0].value(), Tensor({10, 1}, 1.0));
}

TEST(Model, ZeroScoreWeightsGiveUniformAttention) {
  ModelConfig c = small_config(6);
  MultiscaleForecaster m = make_model(c, path_graph(6));
  zero(m.parameters().get("attention.weight").value);
  Tape tape(false);
  const ForwardTrace tr = m.forward(tape, random_batch(c, 2, 3));
  const std::size_t s = c.scale_count();
  for (double a : tr.alphas[0].value().storage()) EXPECT_DOUBLE_EQ(a, 1.0 / static_cast<double>(s));
}

TEST(Model, ZeroReadoutGivesZeroPrediction) {
  ModelConfig c = small_config(6);
  MultiscaleForecaster m = make_model(c, path_graph(6));
  zero(m.parameters().get("readout.layer1.weight").value);
  zero(m.parameters().get("readout.layer1.bias").value);
  EXPECT_EQ(m.predict(random_batch(c, 3, 3)), Tensor({c.horizon * 18, 1}, 0.0));
}

TEST(Model, PerStepWithSharedScoresRepeatsAcrossHorizon) {
  ModelConfig c = small_config(6);
  c.per_step_attention = true;
  c.horizon = 3;
  MultiscaleForecaster m = make_model(c, path_graph(6));
  Tensor& theta = m.parameters().get("attention.weight").value;
  for (std::size_t r = 0; r < theta.rows(); ++r) {
    for (std::size_t h = 1; h < 3; ++h) theta(r, h) = theta(r, 0);
  }
  const Tensor y = m.predict(random_batch(c, 2, 4));
  const std::size_t rows = 12;
  for (std::size_t h = 1; h < 3; ++h) {
    for (std::size_t r = 0; r < rows; ++r) EXPECT_EQ(y[h * rows + r], y[r]);
  }
}

TEST(Smp, EdgelessGraphReducesToSelfTerm) {
  for (SmpVariant v : {SmpVariant::isotropic, SmpVariant::anisotropic}) {
    ModelConfig c = small_config(4);
    c.smp = v;
    MultiscaleForecaster m = make_model(c, WeightedDigraph(4, {}));
    Rng rng(1, "x");
    const Tensor x = random_tensor({8, 4}, rng);
    Tape tape(false);
    const Tensor got = m.smp_messages(tape, tape.constant(x), 0).value();
    const Tensor& w = m.parameters().get("smp.level0.self_weight").value;
    const Tensor& b = m.parameters().get("smp.level0.bias").value;
    for (std::size_t r = 0; r < 8; ++r) {
      for (std::size_t j = 0; j < 4; ++j) {
        double e = b[j];
        for (std::size_t k = 0; k < 4; ++k) e += x(r, k) * w(k, j);
        EXPECT_NEAR(got(r, j), e, 1e-14);
      }
    }
  }
}

TEST(Smp, IsotropicDirectedPairByHand) {
  // 0 -> 1 with weight 3: node 1 aggregates node 0 forward, node 0 aggregates
  // node 1 through the reverse operator; both normalized to weight 1.
  ModelConfig c = small_config(2);
  c.diffusion_order = 1;
  MultiscaleForecaster m = make_model(c, WeightedDigraph(2, {{0, 1, 3.0}}));
  Rng rng(2, "x");
  const Tensor x = random_tensor({2, 4}, rng);
  Tape tape(false);
  const Tensor got = m.smp_messages(tape, tape.constant(x), 0).value();
  const auto& ps = m.parameters();
  const Tensor& ws = ps.get("smp.level0.self_weight").value;
  const Tensor& wf = ps.get("smp.level0.hop1.weight").value;
  const Tensor& wr = ps.get("smp.level0.hop1.reverse_weight").value;
  const Tensor& b = ps.get("smp.level0.bias").value;
  for (std::size_t i = 0; i < 2; ++i) {
    const std::size_t other = 1 - i;
    const Tensor& wn = i == 1 ? wf : wr;
    for (std::size_t j = 0; j < 4; ++j) {
      double e = b[j];
      for (std::size_t k = 0; k < 4; ++k) e += x(i, k) * ws(k, j) + x(other, k) * wn(k, j);
      EXPECT_NEAR(got(i, j), e, 1e-14);
    }
  }
}

TEST(Smp, AnisotropicMessagesFollowEdgeDirection) {
  // Only node 1 receives; node 0's output must match the edgeless self term.
  ModelConfig c = small_config(2);
  c.smp = SmpVariant::anisotropic;
  MultiscaleForecaster m = make_model(c, WeightedDigraph(2, {{0, 1, 0.5}}));
  Rng rng(3, "x");
  const Tensor x = random_tensor({2, 4}, rng);
  Tape tape(false);
  const Tensor got = m.smp_messages(tape, tape.constant(x), 0).value();
  const Tensor& ws = m.parameters().get("smp.level0.self_weight").value;
  const Tensor& b = m.parameters().get("smp.level0.bias").value;
  bool node1_differs = false;
  for (std::size_t j = 0; j < 4; ++j) {
    double e0 = b[j], e1 = b[j];
    for (std::size_t k = 0; k < 4; ++k) {
      e0 += x(0, k) * ws(k, j);
      e1 += x(1, k) * ws(k, j);
    }
    EXPECT_NEAR(got(0, j), e0, 1e-14);
    node1_differs = node1_differs || std::abs(got(1, j) - e1) > 1e-9;
  }
  EXPECT_TRUE(node1_differs);
}

TEST(SpatialStack, SingleSupernodeBroadcastsPooledSum) {
  // Complete graph: one supernode; with normalized lifting every node gets
  // the mean of the level-0 messages.
  std::vector<Triplet> e;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      if (i != j) e.push_back({i, j, 1.0});
    }
  }
  ModelConfig c = small_config(4);
  c.normalize_lift = true;
  MultiscaleForecaster m = make_model(c, WeightedDigraph(4, e));
  ASSERT_EQ(m.hierarchy().graphs[1].num_nodes(), 1u);
  Rng rng(4, "x");
  const Tensor z = random_tensor({4, 4}, rng);
  Tape tape(false);
  const Tensor msg = m.smp_messages(tape, tape.constant(z), 0).value();
  const std::vector<Var> levels = m.spatial_stack(tape, tape.constant(z));
  ASSERT_EQ(levels.size(), 2u);
  for (std::size_t j = 0; j < 4; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 4; ++i) mean += msg(i, j) / 4.0;
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(levels[1].value()(i, j), mean, 1e-13);
  }
}

TEST(SpatialStack, ActsBlockwise) {
  ModelConfig c = small_config(7);
  c.spatial_levels = 2;
  MultiscaleForecaster m = make_model(c, random_in_degree_graph(7, 2, 5));
  Rng rng(5, "x");
  const Tensor a = random_tensor({7, 4}, rng), b = random_tensor({7, 4}, rng);
  Tensor ab({14, 4});
  std::copy(a.storage().begin(), a.storage().end(), ab.storage().begin());
  std::copy(b.storage().begin(), b.storage().end(), ab.storage().begin() + 28);
  Tape tape(false);
  const auto joint = m.spatial_stack(tape, tape.constant(ab));
  const auto only_b = m.spatial_stack(tape, tape.constant(b));
  for (std::size_t k = 0; k < joint.size(); ++k) {
    for (std::size_t i = 0; i < 28; ++i) EXPECT_EQ(joint[k].value()[28 + i], only_b[k].value()[i]);
  }
}

TEST(Model, PermutationEquivariance) {
  for (SmpVariant v : {SmpVariant::isotropic, SmpVariant::anisotropic}) {
    ModelConfig c = small_config(9);
    c.smp = v;
    c.spatial_levels = 2;
    const WeightedDigraph g = random_in_degree_graph(9, 2, 6);
    const CoarseningHierarchy h = build_hierarchy(g, 2);
    MultiscaleForecaster m(c, h, 3);
    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(7, "perm");
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    MultiscaleForecaster pm(c, permute_hierarchy(h, perm), 3);
    const Tensor& emb = m.parameters().get("node_embeddings").value;
    Tensor& pemb = pm.parameters().get("node_embeddings").value;
    for (std::size_t i = 0; i < 9; ++i) {
      for (std::size_t j = 0; j < c.embedding; ++j) pemb(perm[i], j) = emb(i, j);
    }
    const Batch b = random_batch(c, 2, 8, 0.2);
    Batch pb = b;
    auto move_rows = [&](const Tensor& src, Tensor& dst) {
      const std::size_t cols = src.cols();
      for (std::size_t r = 0; r < src.rows(); ++r) {
        const std::size_t block = r / 9, i = r % 9;
        for (std::size_t ch = 0; ch < cols; ++ch) dst[(block * 9 + perm[i]) * cols + ch] = src[r * cols + ch];
      }
    };
    move_rows(b.x, pb.x);
    move_rows(b.mask, pb.mask);
    const Tensor y = m.predict(b);
    Tensor expected(y.shape());
    move_rows(y, expected);
    EXPECT_LT(max_abs_diff(pm.predict(pb), expected), 1e-9);
  }
}

TEST(Model, MaskedInputValuesAreIgnored) {
  ModelConfig c = small_config(6);
  MultiscaleForecaster m = make_model(c, path_graph(6));
  Batch b = random_batch(c, 2, 9, 0.4);
  const Tensor y = m.predict(b);
  for (std::size_t i = 0; i < b.x.size(); ++i) {
    if (b.mask[i] == 0.0) b.x[i] = 1e6;
  }
  EXPECT_EQ(m.predict(b), y);
}

TEST(Model, SeedDeterminesParametersAndPredictions) {
  const ModelConfig c = small_config(6);
  MultiscaleForecaster a = make_model(c, path_graph(6), 11), b = make_model(c, path_graph(6), 11);
  MultiscaleForecaster other = make_model(c, path_graph(6), 12);
  const Batch batch = random_batch(c, 2, 1);
  EXPECT_EQ(a.predict(batch), b.predict(batch));
  EXPECT_NE(a.predict(batch), other.predict(batch));
}

TEST(Model, EveryParameterReceivesGradient) {
  for (SmpVariant v : {SmpVariant::isotropic, SmpVariant::anisotropic}) {
    ModelConfig c = small_config(8);
    c.smp = v;
    MultiscaleForecaster m = make_model(c, random_in_degree_graph(8, 2, 2));
    const Batch b = random_batch(c, 2, 3);
    m.parameters().zero_grad();
    Tape tape;
    tape.backward(masked_mae_loss(m.forward(tape, b).prediction, b.target, b.target_mask));
    for (const Parameter& p : m.parameters()) {
      double norm = 0.0;
      for (double g : p.grad.storage()) norm += g * g;
      EXPECT_GT(norm, 0.0) << p.name;
    }
  }
}

class ModelGradient : public ::testing::TestWithParam<std::tuple<SmpVariant, bool>> {};

TEST_P(ModelGradient, MatchesCentralDifferences) {
  const auto [variant, per_step] = GetParam();
  ModelConfig c = small_config(5);
  c.smp = variant;
  c.per_step_attention = per_step;
  c.exog_channels = 1;
  MultiscaleForecaster m = make_model(c, random_in_degree_graph(5, 2, 1));
  const Batch b = random_batch(c, 2, 4, 0.2);
  // Central differences at eps 1e-6 carry ~1e-10 absolute rounding noise on
  // an O(1) loss; the floor keeps near-zero entries from measuring only noise.
  const auto report = check_gradients(
      m.parameters(),
      [&](Tape& t) { return masked_mae_loss(m.forward(t, b).prediction, b.target, b.target_mask); }, 1e-6,
      1e-5);
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst;
  EXPECT_EQ(report.entries, m.parameters().scalar_count());
}

INSTANTIATE_TEST_SUITE_P(Variants, ModelGradient,
                         ::testing::Combine(::testing::Values(SmpVariant::isotropic, SmpVariant::anisotropic),
                                            ::testing::Bool()),
                         [](const auto& info) {
                           return std::string(std::get<0>(info.param) == SmpVariant::isotropic ? "Isotropic"
                                                                                               : "Anisotropic") +
                                  (std::get<1>(info.param) ? "PerStep" : "Shared");
                         });

}  // namespace
}  // namespace msf
