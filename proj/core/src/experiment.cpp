#include "msf/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "msf/atomic_file.hpp"
#include "msf/checkpoint.hpp"
#include "msf/errors.hpp"
#include "msf/mso.hpp"
#include "json_fields.hpp"

namespace msf {

namespace fs = std::filesystem;

namespace {

template <class F>
void with_path(const std::string& path, F&& f) {
  try {
    f();
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(path + ": " + e.what());
  }
}

void require_object(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ContractError(path + ": expected an object");
}

DatasetConfig dataset_from_json(const nlohmann::json& j, std::optional<std::uint64_t>& seed) {
  require_object(j, "dataset");
  DatasetConfig d;
  for (const auto& [key, v] : j.items()) {
    with_path("dataset." + key, [&, &key = key, &v = v] {
      if (key == "kind") {
        d.kind = v.get<std::string>();
        if (d.kind != "mso" && d.kind != "csv") {
          throw ContractError("dataset.kind: expected \"mso\" or \"csv\"");
        }
      } else if (key == "nodes") d.nodes = detail::json_count(v, "dataset." + key);
      else if (key == "steps") d.steps = detail::json_count(v, "dataset." + key);
      else if (key == "in_degree") d.in_degree = detail::json_count(v, "dataset." + key);
      else if (key == "hops") d.hops = detail::json_count(v, "dataset." + key);
      else if (key == "fan_in") d.fan_in = detail::json_count(v, "dataset." + key);
      else if (key == "observations") d.observations = v.get<std::string>();
      else if (key == "mask") d.mask = v.get<std::string>();
      else if (key == "coords") d.coords = v.get<std::string>();
      else if (key == "graph") d.graph = v.get<std::string>();
      else if (key == "tau") d.tau = v.get<double>();
      else if (key == "knn_cap") d.knn_cap = detail::json_count(v, "dataset." + key);
      else if (key == "time_encodings") d.time_encodings = v.get<bool>();
      else if (key == "include_dow") d.include_dow = v.get<bool>();
      else if (key == "seed") seed = detail::json_count<std::uint64_t>(v, "dataset.seed");
      else if (key == "scaling") {
        const auto s = v.get<std::string>();
        if (s == "standard") d.scaling = ScalingMethod::standard;
        else if (s == "minmax") d.scaling = ScalingMethod::minmax;
        else throw ContractError("dataset.scaling: expected \"standard\" or \"minmax\"");
      } else if (key == "splits") {
        require_object(v, "dataset.splits");
        for (const auto& [sk, sv] : v.items()) {
          if (sk == "train") d.splits.train = sv.get<double>();
          else if (sk == "val") d.splits.val = sv.get<double>();
          else if (sk == "test") d.splits.test = sv.get<double>();
          else throw ContractError("dataset.splits: unknown key \"" + sk + "\"");
        }
      } else {
        throw ContractError("dataset: unknown key \"" + key + "\"");
      }
    });
  }
  const double total = d.splits.train + d.splits.val + d.splits.test;
  if (d.splits.train <= 0 || d.splits.val < 0 || d.splits.test < 0 || std::abs(total - 1.0) > 1e-9) {
    throw ContractError("dataset.splits: fractions must be nonnegative and sum to 1");
  }
  if (d.kind == "mso") {
    if (d.nodes < 2 || d.steps == 0 || d.hops == 0 || d.fan_in == 0) {
      throw ContractError("dataset: synthetic data needs nodes >= 2 and positive steps, hops, fan_in");
    }
  } else if (d.observations.empty()) {
    throw ContractError("dataset.observations: required for csv data");
  } else if (d.graph.empty() && d.coords.empty()) {
    throw ContractError("dataset: csv data needs a graph edge list or coordinates");
  }
  return d;
}

void mask_from_json(const nlohmann::json& j, ExperimentConfig& c) {
  require_object(j, "mask");
  for (const auto& [key, v] : j.items()) {
    with_path("mask." + key, [&, &key = key, &v = v] {
      if (key == "eta") c.mask.eta = v.get<double>();
      else if (key == "p_f") c.mask.p_f = v.get<double>();
      else if (key == "s_min") c.mask.s_min = detail::json_count(v, "mask." + key);
      else if (key == "s_max") c.mask.s_max = detail::json_count(v, "mask." + key);
      else if (key == "p_g") c.mask.p_g = v.get<std::vector<double>>();
      else if (key == "propagate_noise") c.mask.propagate_noise = v.get<bool>();
      else if (key == "propagation_graph") c.propagation_graph = v.get<std::string>();
      else if (key == "seed") c.mask_seed = detail::json_count<std::uint64_t>(v, "mask.seed");
      else throw ContractError("mask: unknown key \"" + key + "\"");
    });
  }
  try {
    c.mask.validate();
  } catch (const ContractError& e) {
    throw ContractError(std::string("mask: ") + e.what());
  }
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,val_mae,learning_rate\n";
  char buf[160];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_mae,
                  r.learning_rate);
    os << buf;
  }
  return os.str();
}

Tensor elementwise_and(const Tensor& a, const Tensor& b) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] != 0.0 && b[i] != 0.0) ? 1.0 : 0.0;
  return out;
}

}  // namespace

void ExperimentConfig::override_seed(std::uint64_t s) {
  seed = s;
  dataset_seed.reset();
  mask_seed.reset();
  init_seed.reset();
  train_seed.reset();
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  require_object(j, "config");
  ExperimentConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "seed") with_path("seed", [&, &v = v] { c.seed = detail::json_count<std::uint64_t>(v, "seed"); });
    else if (key == "output_dir") with_path("output_dir", [&, &v = v] { c.output_dir = v.get<std::string>(); });
    else if (key == "dataset") c.dataset = dataset_from_json(v, c.dataset_seed);
    else if (key == "mask") mask_from_json(v, c);
    else if (key == "model") {
      require_object(v, "model");
      nlohmann::json m = v;
      if (m.contains("seed")) {
        with_path("model.seed", [&] { c.init_seed = detail::json_count<std::uint64_t>(m.at("seed"), "model.seed"); });
        m.erase("seed");
      }
      c.model = model_config_from_json(m, c.model);
    } else if (key == "train") {
      require_object(v, "train");
      if (v.contains("seed")) with_path("train.seed", [&, &v = v] { c.train_seed = detail::json_count<std::uint64_t>(v.at("seed"), "train.seed"); });
      c.train = train_config_from_json(v, c.train);
    } else {
      throw ContractError("config: unknown key \"" + key + "\"");
    }
  }
  c.train.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ContractError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

nlohmann::json to_json(const ExperimentConfig& c) {
  const DatasetConfig& d = c.dataset;
  nlohmann::json ds{{"kind", d.kind},
                    {"scaling", d.scaling == ScalingMethod::standard ? "standard" : "minmax"},
                    {"splits", {{"train", d.splits.train}, {"val", d.splits.val}, {"test", d.splits.test}}}};
  if (d.kind == "mso") {
    ds.update({{"nodes", d.nodes}, {"steps", d.steps}, {"in_degree", d.in_degree}, {"hops", d.hops},
               {"fan_in", d.fan_in}});
  } else {
    ds.update({{"observations", d.observations}, {"mask", d.mask}, {"coords", d.coords},
               {"graph", d.graph}, {"tau", d.tau}, {"knn_cap", d.knn_cap},
               {"time_encodings", d.time_encodings}, {"include_dow", d.include_dow}});
  }
  if (c.dataset_seed) ds["seed"] = *c.dataset_seed;
  nlohmann::json mask{{"eta", c.mask.eta},
                      {"p_f", c.mask.p_f},
                      {"s_min", c.mask.s_min},
                      {"s_max", c.mask.s_max},
                      {"p_g", c.mask.p_g},
                      {"propagate_noise", c.mask.propagate_noise},
                      {"propagation_graph", c.propagation_graph}};
  if (c.mask_seed) mask["seed"] = *c.mask_seed;
  nlohmann::json model = to_json(c.model);
  if (c.init_seed) model["seed"] = *c.init_seed;
  nlohmann::json train = to_json(c.train);
  if (c.train_seed) train["seed"] = *c.train_seed;
  else train.erase("seed");
  return {{"seed", c.seed}, {"output_dir", c.output_dir}, {"dataset", ds},
          {"mask", mask},   {"model", model},             {"train", train}};
}

// ---------------------------------------------------------------------------
// Preparation

PreparedExperiment prepare_experiment(const ExperimentConfig& input) {
  PreparedExperiment p;
  ExperimentConfig& c = p.config;
  c = input;
  if (!c.dataset_seed) c.dataset_seed = c.seed;
  if (!c.mask_seed) c.mask_seed = c.seed;
  if (!c.init_seed) c.init_seed = c.seed;
  if (!c.train_seed) c.train_seed = c.seed;
  c.mask.seed = *c.mask_seed;
  c.train.seed = *c.train_seed;

  const DatasetConfig& d = c.dataset;
  if (d.kind == "mso") {
    const WeightedDigraph a = random_in_degree_graph(d.nodes, d.in_degree, *c.dataset_seed);
    MsoDataset mso = generate_mso(a, d.hops, d.steps, d.fan_in, *c.dataset_seed);
    p.raw = std::move(mso.panel);
    p.graph = a;
    p.mixing = std::move(mso.mixing);
  } else {
    CsvPanel csv = load_csv_panel(d.observations, d.mask, d.coords);
    p.raw = std::move(csv.panel);
    if (!d.graph.empty()) {
      p.graph = load_edge_list(d.graph, p.raw.nodes());
    } else {
      p.graph = ensure_connected(build_graph_from_coords(csv.coords, d.tau, d.knn_cap), csv.coords, d.tau);
    }
    if (d.time_encodings) {
      if (p.raw.timestamps.empty()) throw ContractError("dataset.time_encodings: panel has no timestamps");
      p.raw.exog = time_encodings(p.raw.timestamps, p.raw.nodes(), d.include_dow);
    }
  }
  if (p.graph.num_nodes() != p.raw.nodes()) {
    throw ContractError("dataset: graph has " + std::to_string(p.graph.num_nodes()) +
                        " nodes, panel has " + std::to_string(p.raw.nodes()));
  }

  ModelConfig& m = c.model;
  auto derive = [](std::size_t& field, std::size_t value, const char* name) {
    if (field != 0 && field != value) {
      throw ContractError(std::string("model.") + name + " is " + std::to_string(field) +
                          " but the data has " + std::to_string(value));
    }
    field = value;
  };
  derive(m.nodes, p.raw.nodes(), "nodes");
  // A single input channel is the default and is widened to fit the data.
  if (m.input_channels == 1) m.input_channels = 0;
  derive(m.input_channels, p.raw.channels(), "input_channels");
  derive(m.exog_channels, p.raw.exog_channels(), "exog_channels");
  m.validate();

  const WeightedDigraph* prop = nullptr;
  std::optional<WeightedDigraph> loaded;
  if (!c.mask.p_g.empty()) {
    const std::string& which = c.propagation_graph;
    if (which == "mixing" || (which == "auto" && p.mixing)) {
      if (!p.mixing) throw ContractError("mask.propagation_graph: no mixing graph for csv data");
      prop = &*p.mixing;
    } else if (which == "graph" || which == "auto") {
      prop = &p.graph;
    } else {
      loaded = load_edge_list(which, p.raw.nodes());
      prop = &*loaded;
    }
  }
  p.simulated = simulate_block(p.raw.x.shape(), c.mask, prop);

  ForecastData& fd = p.data;
  fd.splits = make_windows(p.raw.steps(), m.window, m.horizon, d.splits);
  if (fd.splits.train.empty()) throw ContractError("dataset: no training windows");
  fd.input_mask = elementwise_and(p.raw.mask, p.simulated.mask);
  fd.train_target_mask = fd.input_mask;
  fd.eval_target_mask = p.raw.mask;
  Panel observed = p.raw;
  observed.mask = fd.input_mask;
  fd.scaler = fit_scaler(observed, 0, fd.splits.train.back().end(), d.scaling);
  fd.panel = p.raw;
  fd.panel.x = fd.scaler.apply(p.raw.x);

  p.hierarchy = build_hierarchy(p.graph, m.spatial_levels, m.kmis_radius);
  return p;
}

RunOutcome train_and_evaluate(const PreparedExperiment& prep, const ModelConfig& model_cfg,
                              const TrainConfig& train_cfg, std::uint64_t init_seed,
                              const EpochCallback& on_epoch,
                              std::optional<MultiscaleForecaster>* model_out) {
  CoarseningHierarchy h = prep.hierarchy;
  if (h.levels() != model_cfg.spatial_levels || model_cfg.kmis_radius != prep.config.model.kmis_radius) {
    h = build_hierarchy(prep.graph, model_cfg.spatial_levels, model_cfg.kmis_radius);
  }
  std::optional<MultiscaleForecaster> local;
  std::optional<MultiscaleForecaster>& slot = model_out != nullptr ? *model_out : local;
  slot.emplace(model_cfg, std::move(h), init_seed);
  MultiscaleForecaster& model = *slot;

  RunOutcome r;
  r.training = train(model, prep.data, train_cfg, on_epoch);
  const Predictor predictor = [&model](const Batch& b) { return model.predict(b); };
  const auto& s = prep.data.splits;
  r.val = evaluate(predictor, prep.data, s.val, train_cfg.eval_batch_size);
  r.test = evaluate(predictor, prep.data, s.test, train_cfg.eval_batch_size);
  const std::size_t n = model_cfg.nodes, hz = model_cfg.horizon;
  r.persistence_test = evaluate([n, hz](const Batch& b) { return persistence_forecast(b, n, hz); },
                                prep.data, s.test, train_cfg.eval_batch_size);
  return r;
}

nlohmann::json metrics_json(const RunOutcome& r, double missing_fraction) {
  return {{"test_mae", r.test.mae},
          {"test_mse", r.test.mse},
          {"val_mae", r.val.mae},
          {"per_horizon_mae", r.test.per_horizon_mae},
          {"missing_fraction", missing_fraction},
          {"epochs_run", r.training.history.size()},
          {"best_epoch", r.training.best_epoch},
          {"persistence_test_mae", r.persistence_test.mae}};
}

std::string attention_csv(MultiscaleForecaster& model, const ForecastData& data,
                          const WindowSample& window) {
  const ModelConfig& mc = model.config();
  const std::vector<WindowSample> one{window};
  const Batch batch = make_batch(data.panel, data.input_mask, data.eval_target_mask, one);
  Tape tape(false);
  const ForwardTrace trace = model.forward(tape, batch);
  std::ostringstream os;
  os << "node,horizon_step,k,l,alpha\n";
  char buf[64];
  const std::size_t layers = mc.temporal_layers;
  for (std::size_t i = 0; i < mc.nodes; ++i) {
    for (std::size_t h = 0; h < mc.horizon; ++h) {
      const Tensor& alpha = trace.alphas[mc.per_step_attention ? h : 0].value();
      for (std::size_t s = 0; s < mc.scale_count(); ++s) {
        std::snprintf(buf, sizeof(buf), "%.17g", alpha(i, s));
        os << i << ',' << h << ',' << s / layers << ',' << s % layers + 1 << ',' << buf << '\n';
      }
    }
  }
  return os.str();
}

nlohmann::json run_experiment(const ExperimentConfig& cfg) {
  PreparedExperiment prep = prepare_experiment(cfg);
  const ExperimentConfig& c = prep.config;
  const fs::path out(c.output_dir);
  fs::create_directories(out);
  const nlohmann::json resolved = to_json(c);
  write_file_atomic((out / "resolved-config.json").string(), resolved.dump(2) + "\n");

  const MaskStatistics stats = mask_statistics(prep.simulated.mask);
  write_file_atomic((out / "mask-stats.json").string(), to_json(stats).dump(2) + "\n");

  std::vector<EpochRecord> history;
  const std::string history_path = (out / "history.csv").string();
  write_file_atomic(history_path, history_csv(history));
  std::optional<MultiscaleForecaster> model;
  const RunOutcome r = train_and_evaluate(
      prep, c.model, c.train, *c.init_seed,
      [&](const EpochRecord& rec) {
        history.push_back(rec);
        write_file_atomic(history_path, history_csv(history));
      },
      &model);

  const nlohmann::json metrics = metrics_json(r, stats.missing_fraction);
  CheckpointInfo info;
  info.model_config = to_json(model->config());
  info.seed = *c.init_seed;
  info.epoch = r.training.best_epoch;
  info.val_mae = r.training.best_val_mae;
  info.extra = {{"experiment", resolved}};
  save_checkpoint((out / "checkpoint.json").string(), model->parameters(), info);
  if (!prep.data.splits.test.empty()) {
    write_file_atomic((out / "attention.csv").string(),
                      attention_csv(*model, prep.data, prep.data.splits.test.front()));
  }
  write_file_atomic((out / "metrics.json").string(), metrics.dump(2) + "\n");
  return metrics;
}

void dump_scores(const std::string& checkpoint_path, std::size_t index, const std::string& out_path) {
  const CheckpointInfo info = read_checkpoint_info(checkpoint_path);
  if (!info.extra.contains("experiment")) {
    throw ContractError(checkpoint_path + ": checkpoint carries no experiment configuration");
  }
  const PreparedExperiment prep = prepare_experiment(experiment_config_from_json(info.extra.at("experiment")));
  const auto& test = prep.data.splits.test;
  if (index >= test.size()) {
    throw ContractError("window index " + std::to_string(index) + " out of range (test split has " +
                        std::to_string(test.size()) + " windows)");
  }
  const ModelConfig mc = model_config_from_json(info.model_config);
  CoarseningHierarchy h = prep.hierarchy;
  if (h.levels() != mc.spatial_levels || mc.kmis_radius != prep.config.model.kmis_radius) {
    h = build_hierarchy(prep.graph, mc.spatial_levels, mc.kmis_radius);
  }
  MultiscaleForecaster model(mc, std::move(h), info.seed);
  load_checkpoint(checkpoint_path, model.parameters());
  write_file_atomic(out_path, attention_csv(model, prep.data, test[index]));
}

void export_mso(const std::string& out_dir, const MsoExportOptions& o, const nlohmann::json& invocation) {
  const fs::path out(out_dir);
  if (fs::exists(out) && !o.force) {
    throw ContractError("output directory " + out_dir + " exists; pass --force to overwrite");
  }
  fs::create_directories(out);
  const WeightedDigraph a = random_in_degree_graph(o.nodes, o.in_degree, o.seed);
  const MsoDataset ds = generate_mso(a, o.hops, o.steps, o.fan_in, o.seed);
  write_csv_panel(ds.panel, (out / "panel.csv").string(), (out / "mask.csv").string());
  save_edge_list((out / "graph.csv").string(), a);
  save_edge_list((out / "adot.csv").string(), ds.mixing);
  const nlohmann::json manifest{{"generator", "mso"},
                                {"seed", o.seed},
                                {"parameters",
                                 {{"nodes", o.nodes},
                                  {"steps", o.steps},
                                  {"in_degree", o.in_degree},
                                  {"hops", o.hops},
                                  {"fan_in", o.fan_in}}},
                                {"invocation", invocation},
                                {"files", {"panel.csv", "mask.csv", "graph.csv", "adot.csv"}}};
  write_file_atomic((out / "manifest.json").string(), manifest.dump(2) + "\n");
}

}  // namespace msf
