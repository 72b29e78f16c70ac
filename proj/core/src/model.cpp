#include "msf/model.hpp"

#include <algorithm>
#include <cmath>

#include "msf/errors.hpp"
#include "msf/rng.hpp"
#include "json_fields.hpp"

namespace msf {

namespace {

std::string level_name(std::size_t k) { return "smp.level" + std::to_string(k); }
std::string layer_name(std::size_t l) { return "tmp.layer" + std::to_string(l); }

Tensor uniform_tensor(Rng& rng, std::vector<std::size_t> shape, double bound) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(-bound, bound);
  return t;
}

// [R, H*C] with column block h per row -> [H*R, C] in [h, r] row order.
Var horizon_major(Var y, std::size_t horizon, std::size_t channels) {
  const Tensor& in = y.value();
  const std::size_t rows = in.rows();
  Tensor out({horizon * rows, channels});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t h = 0; h < horizon; ++h) {
      for (std::size_t c = 0; c < channels; ++c) {
        out[(h * rows + r) * channels + c] = in[r * horizon * channels + h * channels + c];
      }
    }
  }
  return y.tape->record(std::move(out), {y}, [y, rows, horizon, channels](Tape& t, const std::vector<double>& g) {
    auto& gy = t.grad(y.id);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t h = 0; h < horizon; ++h) {
        for (std::size_t c = 0; c < channels; ++c) {
          gy[r * horizon * channels + h * channels + c] += g[(h * rows + r) * channels + c];
        }
      }
    }
  });
}

SparseMatrix power(const SparseMatrix& a, std::size_t p) {
  SparseMatrix out = a;
  for (std::size_t i = 1; i < p; ++i) out = out.multiply(a);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ContractError(std::string("model.") + name + " must be positive");
  };
  positive(window, "window");
  positive(horizon, "horizon");
  positive(nodes, "nodes");
  positive(input_channels, "input_channels");
  positive(hidden, "hidden");
  positive(temporal_layers, "temporal_layers");
  positive(temporal_factor, "temporal_factor");
  positive(embedding, "embedding");
  positive(diffusion_order, "diffusion_order");
  positive(kmis_radius, "kmis_radius");
  for (std::size_t h : decoder_hidden) positive(h, "decoder_hidden entry");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"window", c.window},
          {"horizon", c.horizon},
          {"nodes", c.nodes},
          {"input_channels", c.input_channels},
          {"exog_channels", c.exog_channels},
          {"hidden", c.hidden},
          {"temporal_layers", c.temporal_layers},
          {"temporal_factor", c.temporal_factor},
          {"spatial_levels", c.spatial_levels},
          {"embedding", c.embedding},
          {"smp", c.smp == SmpVariant::isotropic ? "isotropic" : "anisotropic"},
          {"diffusion_order", c.diffusion_order},
          {"decoder_hidden", c.decoder_hidden},
          {"per_step_attention", c.per_step_attention},
          {"normalize_lift", c.normalize_lift},
          {"kmis_radius", c.kmis_radius}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c) {
  if (!j.is_object()) throw ContractError("model: expected an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "window") c.window = detail::json_count(value, "model." + key);
      else if (key == "horizon") c.horizon = detail::json_count(value, "model." + key);
      else if (key == "nodes") c.nodes = detail::json_count(value, "model." + key);
      else if (key == "input_channels") c.input_channels = detail::json_count(value, "model." + key);
      else if (key == "exog_channels") c.exog_channels = detail::json_count(value, "model." + key);
      else if (key == "hidden") c.hidden = detail::json_count(value, "model." + key);
      else if (key == "temporal_layers") c.temporal_layers = detail::json_count(value, "model." + key);
      else if (key == "temporal_factor") c.temporal_factor = detail::json_count(value, "model." + key);
      else if (key == "spatial_levels") c.spatial_levels = detail::json_count(value, "model." + key);
      else if (key == "embedding") c.embedding = detail::json_count(value, "model." + key);
      else if (key == "diffusion_order") c.diffusion_order = detail::json_count(value, "model." + key);
      else if (key == "decoder_hidden") c.decoder_hidden = detail::json_counts(value, "model." + key);
      else if (key == "per_step_attention") c.per_step_attention = value.get<bool>();
      else if (key == "normalize_lift") c.normalize_lift = value.get<bool>();
      else if (key == "kmis_radius") c.kmis_radius = detail::json_count(value, "model." + key);
      else if (key == "smp") {
        const auto s = value.get<std::string>();
        if (s == "isotropic") c.smp = SmpVariant::isotropic;
        else if (s == "anisotropic") c.smp = SmpVariant::anisotropic;
        else throw ContractError("model.smp: expected \"isotropic\" or \"anisotropic\", got \"" + s + "\"");
      } else {
        throw ContractError("model: unknown key \"" + key + "\"");
      }
    } catch (const nlohmann::json::exception& e) {
      throw ContractError("model." + key + ": " + e.what());
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Batching

Batch make_batch(const Panel& panel, const Tensor& input_mask, const Tensor& target_mask,
                 std::span<const WindowSample> windows) {
  if (windows.empty()) throw ContractError("make_batch: no windows");
  if (input_mask.shape() != panel.x.shape() || target_mask.shape() != panel.x.shape()) {
    throw DimensionError("make_batch: mask shapes differ from the panel");
  }
  const std::size_t w = windows.front().window, hz = windows.front().horizon;
  const std::size_t bsz = windows.size(), n = panel.nodes(), c = panel.channels();
  const std::size_t du = panel.exog_channels();
  Batch b;
  b.size = bsz;
  b.x = Tensor({w * bsz * n, c});
  b.mask = Tensor({w * bsz * n, c});
  b.exog = Tensor({w * bsz * n, du});
  b.target = Tensor({hz * bsz * n, c});
  b.target_mask = Tensor({hz * bsz * n, c});
  for (std::size_t bi = 0; bi < bsz; ++bi) {
    const WindowSample& ws = windows[bi];
    if (ws.window != w || ws.horizon != hz) throw ContractError("make_batch: mixed window sizes");
    if (ws.end() > panel.steps()) throw ContractError("make_batch: window exceeds the panel");
    for (std::size_t t = 0; t < w + hz; ++t) {
      const bool input = t < w;
      const std::size_t step = ws.start + t;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t row = input ? (t * bsz + bi) * n + i : ((t - w) * bsz + bi) * n + i;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t src = (step * n + i) * c + ch;
          const double m = input ? input_mask[src] : target_mask[src];
          Tensor& vals = input ? b.x : b.target;
          Tensor& mk = input ? b.mask : b.target_mask;
          mk[row * c + ch] = m;
          vals[row * c + ch] = m != 0.0 ? panel.x[src] : 0.0;
        }
        if (input) {
          for (std::size_t u = 0; u < du; ++u) b.exog[row * du + u] = panel.exog[(step * n + i) * du + u];
        }
      }
    }
  }
  return b;
}

Tensor impute_last_value(const Tensor& x, const Tensor& mask, std::size_t series) {
  if (x.shape() != mask.shape() || x.rank() != 2 || series == 0 || x.rows() % series != 0) {
    throw DimensionError("impute_last_value: inconsistent shapes");
  }
  const std::size_t steps = x.rows() / series, c = x.cols();
  Tensor out(x.shape());
  std::vector<double> last(series * c, 0.0);
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t g = 0; g < series * c; ++g) {
      const std::size_t idx = s * series * c + g;
      if (mask[idx] != 0.0) last[g] = x[idx];
      out[idx] = last[g];
    }
  }
  return out;
}

std::vector<Tensor> split_predictions(const Tensor& flat, std::size_t horizon, std::size_t batch,
                                      std::size_t nodes) {
  const std::size_t c = flat.cols();
  if (flat.rows() != horizon * batch * nodes) throw DimensionError("split_predictions: row count");
  std::vector<Tensor> out(batch, Tensor({horizon, nodes, c}));
  for (std::size_t h = 0; h < horizon; ++h) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < nodes; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          out[b][(h * nodes + i) * c + ch] = flat[((h * batch + b) * nodes + i) * c + ch];
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

MultiscaleForecaster::MultiscaleForecaster(ModelConfig config, CoarseningHierarchy hierarchy,
                                           std::uint64_t seed)
    : config_(std::move(config)), hierarchy_(std::move(hierarchy)) {
  config_.validate();
  if (hierarchy_.graphs.size() != config_.spatial_levels + 1 ||
      hierarchy_.levels() != config_.spatial_levels) {
    throw ContractError("hierarchy has " + std::to_string(hierarchy_.levels()) +
                        " levels, model expects " + std::to_string(config_.spatial_levels));
  }
  if (hierarchy_.graphs.front().num_nodes() != config_.nodes) {
    throw DimensionError("hierarchy base graph node count differs from model.nodes");
  }
  temporal_ = temporal_chain(config_.window, config_.temporal_factor, config_.temporal_layers);

  ops_.resize(config_.spatial_levels + 1);
  for (std::size_t k = 0; k <= config_.spatial_levels; ++k) {
    const WeightedDigraph& g = hierarchy_.graphs[k];
    const SparseMatrix& a = g.adjacency();
    LevelOperators& op = ops_[k];
    op.lift_propagation = config_.normalize_lift ? a.row_normalized() : a;
    if (k == config_.spatial_levels) continue;
    if (config_.smp == SmpVariant::isotropic) {
      for (std::size_t p = 1; p <= config_.diffusion_order; ++p) {
        const SparseMatrix ap = power(a, p);
        op.forward_hops.push_back(ap.transposed().row_normalized());
        if (g.directed()) op.reverse_hops.push_back(ap.row_normalized());
      }
    } else {
      std::vector<Triplet> recv, send;
      std::vector<double> w;
      const auto edges = a.triplets();
      for (std::size_t e = 0; e < edges.size(); ++e) {
        recv.push_back({e, edges[e].col, 1.0});
        send.push_back({e, edges[e].row, 1.0});
        w.push_back(edges[e].value);
      }
      op.receiver = SparseMatrix(edges.size(), g.num_nodes(), recv);
      op.sender = SparseMatrix(edges.size(), g.num_nodes(), send);
      op.edge_weight = Tensor({edges.size(), 1}, w);
    }
  }
  init_parameters(seed);
}

void MultiscaleForecaster::init_parameters(std::uint64_t seed) {
  Rng rng(seed, "init");
  const std::size_t d = config_.hidden, c = config_.input_channels;
  const std::size_t enc_in = 2 * c + config_.exog_channels;
  const double enc_bound = 1.0 / std::sqrt(static_cast<double>(enc_in + config_.embedding));
  params_.add("encoder.weight", uniform_tensor(rng, {enc_in, d}, enc_bound));
  params_.add("encoder.embedding_weight", uniform_tensor(rng, {config_.embedding, d}, enc_bound));
  params_.add("encoder.bias", uniform_tensor(rng, {d}, enc_bound));
  params_.add("node_embeddings", uniform_tensor(rng, {config_.nodes, config_.embedding}, 0.1));

  const double bd = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t l = 1; l <= config_.temporal_layers; ++l) {
    const std::string p = layer_name(l);
    params_.add(p + ".input_weight", uniform_tensor(rng, {d, 3 * d}, bd));
    params_.add(p + ".hidden_weight", uniform_tensor(rng, {d, 3 * d}, bd));
    params_.add(p + ".input_bias", uniform_tensor(rng, {3 * d}, bd));
    params_.add(p + ".hidden_bias", uniform_tensor(rng, {3 * d}, bd));
  }

  for (std::size_t k = 0; k < config_.spatial_levels; ++k) {
    const std::string p = level_name(k);
    params_.add(p + ".self_weight", uniform_tensor(rng, {d, d}, bd));
    params_.add(p + ".bias", uniform_tensor(rng, {d}, bd));
    if (config_.smp == SmpVariant::isotropic) {
      for (std::size_t hop = 1; hop <= config_.diffusion_order; ++hop) {
        params_.add(p + ".hop" + std::to_string(hop) + ".weight", uniform_tensor(rng, {d, d}, bd));
        if (!ops_[k].reverse_hops.empty()) {
          params_.add(p + ".hop" + std::to_string(hop) + ".reverse_weight",
                      uniform_tensor(rng, {d, d}, bd));
        }
      }
    } else {
      params_.add(p + ".message_in.weight",
                  uniform_tensor(rng, {2 * d + 1, d}, 1.0 / std::sqrt(static_cast<double>(2 * d + 1))));
      params_.add(p + ".message_out.weight", uniform_tensor(rng, {d, d}, bd));
      params_.add(p + ".gate.weight", uniform_tensor(rng, {d, 1}, bd));
    }
  }

  params_.add("attention.weight", uniform_tensor(rng, {d, config_.score_columns()}, bd));

  std::size_t fan_in = d;
  std::vector<std::size_t> widths = config_.decoder_hidden;
  widths.push_back(config_.per_step_attention ? c : config_.horizon * c);
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
    const std::string p = "readout.layer" + std::to_string(i);
    params_.add(p + ".weight", uniform_tensor(rng, {fan_in, widths[i]}, b));
    params_.add(p + ".bias", uniform_tensor(rng, {widths[i]}, b));
    fan_in = widths[i];
  }
}

Var MultiscaleForecaster::encode_inputs(Tape& tape, const Batch& batch) {
  const std::size_t n = config_.nodes, c = config_.input_channels;
  const std::size_t rows = config_.window * batch.size * n;
  if (batch.x.shape() != std::vector<std::size_t>{rows, c} || batch.mask.shape() != batch.x.shape() ||
      batch.exog.shape() != std::vector<std::size_t>{rows, config_.exog_channels}) {
    throw DimensionError("encode_inputs: batch tensors do not match the model configuration");
  }
  const Tensor imputed = impute_last_value(batch.x, batch.mask, batch.size * n);
  const std::size_t du = config_.exog_channels;
  Tensor features({rows, 2 * c + du});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      features(r, ch) = imputed[r * c + ch];
      features(r, c + du + ch) = batch.mask[r * c + ch];
    }
    for (std::size_t u = 0; u < du; ++u) features(r, c + u) = batch.exog[r * du + u];
  }
  Var in = matmul(tape.constant(std::move(features)), tape.param(params_.get("encoder.weight")));
  Var node_term = matmul(tape.param(params_.get("node_embeddings")),
                         tape.param(params_.get("encoder.embedding_weight")));
  Var h = add(in, tile_rows(node_term, config_.window * batch.size));
  return add_bias(h, tape.param(params_.get("encoder.bias")));
}

std::vector<Var> MultiscaleForecaster::temporal_stack(Tape& tape, Var encoded, std::size_t batch) {
  const std::size_t d = config_.hidden;
  const std::size_t rows = batch * config_.nodes;
  std::vector<Var> finals;
  Var seq = encoded;
  std::size_t length = config_.window;
  for (std::size_t l = 1; l <= config_.temporal_layers; ++l) {
    const std::string p = layer_name(l);
    const TemporalDownsampler& ds = temporal_[l - 1];
    Var wh = tape.param(params_.get(p + ".hidden_weight"));
    Var bh = tape.param(params_.get(p + ".hidden_bias"));
    Var gi = add_bias(matmul(seq, tape.param(params_.get(p + ".input_weight"))),
                      tape.param(params_.get(p + ".input_bias")));
    Var h = tape.constant(Tensor({rows, d}));
    std::vector<Var> kept;
    std::size_t next_kept = 0;
    for (std::size_t t = 0; t < length; ++t) {
      Var gx = slice_rows(gi, t * rows, rows);
      Var gh = add_bias(matmul(h, wh), bh);
      Var reset = sigmoid(add(slice_cols(gx, 0, d), slice_cols(gh, 0, d)));
      Var update = sigmoid(add(slice_cols(gx, d, d), slice_cols(gh, d, d)));
      Var cand = tanh(add(slice_cols(gx, 2 * d, d), mul(reset, slice_cols(gh, 2 * d, d))));
      h = add(cand, mul(update, sub(h, cand)));
      if (next_kept < ds.kept.size() && ds.kept[next_kept] == t) {
        kept.push_back(h);
        ++next_kept;
      }
    }
    finals.push_back(h);
    if (l < config_.temporal_layers) seq = kept.size() == 1 ? kept.front() : concat_rows(kept);
    length = ds.output_length();
  }
  return finals;
}

Var MultiscaleForecaster::smp_messages(Tape& tape, Var x, std::size_t level) {
  const std::string p = level_name(level);
  const LevelOperators& op = ops_[level];
  Var out = add_bias(matmul(x, tape.param(params_.get(p + ".self_weight"))),
                     tape.param(params_.get(p + ".bias")));
  if (config_.smp == SmpVariant::isotropic) {
    for (std::size_t hop = 0; hop < op.forward_hops.size(); ++hop) {
      const std::string hp = p + ".hop" + std::to_string(hop + 1);
      if (op.forward_hops[hop].nnz() > 0) {
        Var agg = sparse_dense_matmul(op.forward_hops[hop], x, false);
        out = add(out, matmul(agg, tape.param(params_.get(hp + ".weight"))));
      }
      if (!op.reverse_hops.empty() && op.reverse_hops[hop].nnz() > 0) {
        Var agg = sparse_dense_matmul(op.reverse_hops[hop], x, false);
        out = add(out, matmul(agg, tape.param(params_.get(hp + ".reverse_weight"))));
      }
    }
    return out;
  }
  if (op.receiver.rows() == 0) return out;
  const std::size_t d = config_.hidden;
  const std::size_t blocks = x.rows() / hierarchy_.graphs[level].num_nodes();
  Var w1 = tape.param(params_.get(p + ".message_in.weight"));
  Var pre = add(sparse_dense_matmul(op.receiver, matmul(x, slice_rows(w1, 0, d)), false),
                sparse_dense_matmul(op.sender, matmul(x, slice_rows(w1, d, d)), false));
  Var weights = tile_rows(tape.constant(op.edge_weight), blocks);
  pre = add(pre, matmul(weights, slice_rows(w1, 2 * d, 1)));
  Var msg = matmul(elu(pre), tape.param(params_.get(p + ".message_out.weight")));
  Var gate = sigmoid(matmul(msg, tape.param(params_.get(p + ".gate.weight"))));
  return add(out, sparse_dense_matmul(op.receiver, mul(msg, gate), true));
}

std::vector<Var> MultiscaleForecaster::spatial_stack(Tape& tape, Var z0) {
  const std::size_t levels = config_.spatial_levels;
  std::vector<Var> out{z0};
  Var r = z0;
  for (std::size_t k = 1; k <= levels; ++k) {
    r = sparse_dense_matmul(hierarchy_.selections[k - 1].reduce_operator(),
                            smp_messages(tape, r, k - 1), false);
    Var lifted = r;
    for (std::size_t j = k; j >= 1; --j) {
      lifted = sparse_dense_matmul(hierarchy_.selections[j - 1].lift_operator(), lifted, false);
      lifted = sparse_dense_matmul(ops_[j - 1].lift_propagation, lifted, true);
    }
    out.push_back(lifted);
  }
  return out;
}

std::pair<std::vector<Var>, std::vector<Var>> MultiscaleForecaster::attention_fuse(
    Tape& tape, const std::vector<Var>& encodings) {
  if (encodings.size() != config_.scale_count()) {
    throw ContractError("attention_fuse expects " + std::to_string(config_.scale_count()) +
                        " encodings");
  }
  Var theta = tape.param(params_.get("attention.weight"));
  std::vector<Var> scores;
  for (Var z : encodings) scores.push_back(matmul(z, theta));
  std::vector<Var> fused, alphas;
  for (std::size_t col = 0; col < config_.score_columns(); ++col) {
    std::vector<Var> cols;
    for (Var s : scores) cols.push_back(config_.score_columns() == 1 ? s : slice_cols(s, col, 1));
    Var alpha = softmax_rows(cols.size() == 1 ? cols.front() : concat_cols(cols));
    Var acc = mul(encodings[0], slice_cols(alpha, 0, 1));
    for (std::size_t s = 1; s < encodings.size(); ++s) {
      acc = add(acc, mul(encodings[s], slice_cols(alpha, s, 1)));
    }
    alphas.push_back(alpha);
    fused.push_back(acc);
  }
  return {fused, alphas};
}

Var MultiscaleForecaster::mlp_layer(Tape& tape, Var x, const std::string& prefix) {
  return add_bias(matmul(x, tape.param(params_.get(prefix + ".weight"))),
                  tape.param(params_.get(prefix + ".bias")));
}

Var MultiscaleForecaster::readout(Tape& tape, const std::vector<Var>& fused) {
  Var h = fused.size() == 1 ? fused.front() : concat_rows(fused);
  const std::size_t layers = config_.decoder_hidden.size();
  for (std::size_t i = 0; i < layers; ++i) {
    h = elu(mlp_layer(tape, h, "readout.layer" + std::to_string(i)));
  }
  Var y = mlp_layer(tape, h, "readout.layer" + std::to_string(layers));
  if (config_.per_step_attention) return y;
  return horizon_major(y, config_.horizon, config_.input_channels);
}

ForwardTrace MultiscaleForecaster::forward(Tape& tape, const Batch& batch) {
  ForwardTrace trace;
  trace.batch = batch.size;
  const std::size_t rows = batch.size * config_.nodes;
  Var encoded = encode_inputs(tape, batch);
  std::vector<Var> temporal = temporal_stack(tape, encoded, batch.size);
  const std::size_t layers = config_.temporal_layers;

  // All temporal scales share the spatial weights; stacking them runs the
  // spatial stack once over L * B blocks.
  std::vector<std::vector<Var>> per_level(config_.spatial_levels + 1);
  if (config_.spatial_levels == 0) {
    per_level[0] = temporal;
  } else {
    Var stacked = layers == 1 ? temporal.front() : concat_rows(temporal);
    std::vector<Var> levels = spatial_stack(tape, stacked);
    per_level[0] = temporal;
    for (std::size_t k = 1; k < levels.size(); ++k) {
      for (std::size_t l = 0; l < layers; ++l) {
        per_level[k].push_back(layers == 1 ? levels[k] : slice_rows(levels[k], l * rows, rows));
      }
    }
  }
  for (auto& level : per_level) {
    trace.encodings.insert(trace.encodings.end(), level.begin(), level.end());
  }
  auto [fused, alphas] = attention_fuse(tape, trace.encodings);
  trace.alphas = std::move(alphas);
  trace.prediction = readout(tape, fused);
  return trace;
}

Tensor MultiscaleForecaster::predict(const Batch& batch) {
  Tape tape(false);
  return forward(tape, batch).prediction.value();
}

}  // namespace msf
