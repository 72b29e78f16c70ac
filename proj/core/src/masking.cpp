#include "msf/masking.hpp"

#include <algorithm>
#include <deque>
#include <limits>

#include "msf/atomic_file.hpp"
#include "msf/errors.hpp"
#include "msf/rng.hpp"

namespace msf {

namespace {

constexpr std::string_view kPointStream = "mask-point";
constexpr std::string_view kFaultStream = "mask-fault";
constexpr std::string_view kPropagationStream = "mask-propagation";

void check_shape(const std::vector<std::size_t>& shape) {
  if (shape.size() != 3) throw DimensionError("mask shape must be [T, N, C]");
}

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError(std::string(name) + " must lie in [0, 1]");
}

// ring[k-1][v] lists nodes at exactly k directed hops from v.
std::vector<std::vector<std::vector<std::size_t>>> hop_rings(const WeightedDigraph& g,
                                                             std::size_t max_hops) {
  const std::size_t n = g.num_nodes();
  constexpr std::size_t kUnreached = std::numeric_limits<std::size_t>::max();
  std::vector<std::vector<std::vector<std::size_t>>> ring(
      max_hops, std::vector<std::vector<std::size_t>>(n));
  std::vector<std::size_t> dist(n);
  for (std::size_t s = 0; s < n; ++s) {
    std::fill(dist.begin(), dist.end(), kUnreached);
    dist[s] = 0;
    std::deque<std::size_t> queue{s};
    while (!queue.empty()) {
      const std::size_t v = queue.front();
      queue.pop_front();
      if (dist[v] == max_hops) continue;
      for (std::size_t w : g.successors(v)) {
        if (dist[w] != kUnreached) continue;
        dist[w] = dist[v] + 1;
        ring[dist[w] - 1][s].push_back(w);
        queue.push_back(w);
      }
    }
    for (auto& level : ring) std::sort(level[s].begin(), level[s].end());
  }
  return ring;
}

}  // namespace

void MaskConfig::validate() const {
  check_probability(eta, "eta");
  check_probability(p_f, "p_f");
  for (double p : p_g) check_probability(p, "p_g entry");
  if (s_min < 1 || s_min > s_max) throw ContractError("fault durations need 1 <= s_min <= s_max");
}

SimulatedMask simulate_point(const std::vector<std::size_t>& shape, double eta, std::uint64_t seed) {
  check_shape(shape);
  check_probability(eta, "eta");
  SimulatedMask out{Tensor(shape, 1.0), {}};
  Rng rng(seed, kPointStream);
  for (double& m : out.mask.storage()) {
    if (rng.bernoulli(eta)) m = 0.0;
  }
  return out;
}

SimulatedMask simulate_block(const std::vector<std::size_t>& shape, const MaskConfig& cfg,
                             const WeightedDigraph* graph) {
  check_shape(shape);
  cfg.validate();
  if (!cfg.p_g.empty() && graph == nullptr) {
    throw ContractError("fault propagation requested without a graph");
  }
  const std::size_t steps = shape[0], nodes = shape[1], channels = shape[2];
  if (graph != nullptr && !cfg.p_g.empty() && graph->num_nodes() != nodes) {
    throw DimensionError("propagation graph node count differs from the mask");
  }

  // Point noise comes first so its stream position matches simulate_point.
  SimulatedMask out = simulate_point(shape, cfg.eta, cfg.seed);
  Tensor noise = out.mask;

  Rng fault_rng(cfg.seed, kFaultStream);
  for (std::size_t i = 0; i < nodes; ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t t = 0; t < steps; ++t) {
        if (cfg.p_f > 0.0 && fault_rng.bernoulli(cfg.p_f)) {
          const auto len = static_cast<std::size_t>(fault_rng.between(
              static_cast<std::int64_t>(cfg.s_min), static_cast<std::int64_t>(cfg.s_max)));
          out.faults.push_back({i, c, t, len, FaultOrigin::direct, i});
        }
      }
    }
  }

  if (!cfg.p_g.empty()) {
    const auto rings = hop_rings(*graph, cfg.p_g.size());
    Rng prop_rng(cfg.seed, kPropagationStream);
    std::vector<FaultInterval> copies;
    auto spread = [&](std::size_t src, std::size_t c, std::size_t start, std::size_t len) {
      for (std::size_t k = 0; k < rings.size(); ++k) {
        for (std::size_t v : rings[k][src]) {
          if (prop_rng.bernoulli(cfg.p_g[k])) {
            copies.push_back({v, c, start, len, FaultOrigin::propagated, src});
          }
        }
      }
    };
    for (const FaultInterval& f : out.faults) spread(f.node, f.channel, f.start, f.length);
    if (cfg.propagate_noise) {
      for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t i = 0; i < nodes; ++i) {
          for (std::size_t c = 0; c < channels; ++c) {
            if (noise[(t * nodes + i) * channels + c] == 0.0) spread(i, c, t, 1);
          }
        }
      }
    }
    out.faults.insert(out.faults.end(), copies.begin(), copies.end());
  }

  for (const FaultInterval& f : out.faults) {
    const std::size_t end = std::min(steps, f.start + f.length);
    for (std::size_t t = f.start; t < end; ++t) {
      out.mask[(t * nodes + f.node) * channels + f.channel] = 0.0;
    }
  }
  return out;
}

MaskStatistics mask_statistics(const Tensor& mask) {
  if (mask.rank() != 3) throw DimensionError("mask must be [T, N, C]");
  const std::size_t steps = mask.extent(0), nodes = mask.extent(1), channels = mask.extent(2);
  MaskStatistics s;
  s.per_node.assign(nodes, 0.0);
  std::size_t missing = 0;
  for (std::size_t t = 0; t < steps; ++t) {
    std::size_t missing_here = 0;
    for (std::size_t i = 0; i < nodes; ++i) {
      for (std::size_t c = 0; c < channels; ++c) {
        if (mask[(t * nodes + i) * channels + c] == 0.0) {
          ++missing_here;
          s.per_node[i] += 1.0;
        }
      }
    }
    missing += missing_here;
    if (nodes * channels > 0 && missing_here == nodes * channels) ++s.fully_missing_steps;
  }
  if (mask.size() > 0) s.missing_fraction = static_cast<double>(missing) / static_cast<double>(mask.size());
  for (double& f : s.per_node) f /= static_cast<double>(std::max<std::size_t>(1, steps * channels));

  for (std::size_t i = 0; i < nodes; ++i) {
    for (std::size_t c = 0; c < channels; ++c) {
      std::size_t run = 0;
      for (std::size_t t = 0; t <= steps; ++t) {
        if (t < steps && mask[(t * nodes + i) * channels + c] == 0.0) {
          ++run;
        } else if (run > 0) {
          ++s.run_lengths[run];
          run = 0;
        }
      }
    }
  }
  return s;
}

nlohmann::json to_json(const MaskStatistics& stats) {
  nlohmann::json hist = nlohmann::json::object();
  for (const auto& [len, count] : stats.run_lengths) hist[std::to_string(len)] = count;
  return {{"missing_fraction", stats.missing_fraction},
          {"per_node_missing_fraction", stats.per_node},
          {"run_length_histogram", hist},
          {"fully_missing_steps", stats.fully_missing_steps}};
}

void write_fault_log(const std::string& path, const std::vector<FaultInterval>& faults) {
  std::string out;
  for (const FaultInterval& f : faults) {
    nlohmann::json j{{"node", f.node},
                     {"channel", f.channel},
                     {"start", f.start},
                     {"length", f.length},
                     {"origin", f.origin == FaultOrigin::direct ? "direct" : "propagated"},
                     {"source", f.source}};
    out += j.dump();
    out += '\n';
  }
  write_file_atomic(path, out);
}

}  // namespace msf
