#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msf/graph.hpp"
#include "msf/tensor.hpp"

namespace msf {

/// Parameters of the stationary missing-data process. Probabilities are per
/// cell (eta), per node/channel/step (p_f) and per propagation hop (p_g).
struct MaskConfig {
  double eta = 0.0;
  double p_f = 0.0;
  std::size_t s_min = 1;
  std::size_t s_max = 1;
  std::vector<double> p_g;
  /// When set, point-noise cells at a node spread to its neighbors exactly
  /// like fault intervals of length 1.
  bool propagate_noise = true;
  std::uint64_t seed = 0;

  /// Throws ContractError on out-of-range fields.
  void validate() const;
};

enum class FaultOrigin { direct, propagated };

struct FaultInterval {
  std::size_t node = 0;
  std::size_t channel = 0;
  std::size_t start = 0;
  /// Nominal length; the covered range is clipped at the series end.
  std::size_t length = 0;
  FaultOrigin origin = FaultOrigin::direct;
  /// Node whose fault or noise cell was copied; equals `node` for direct faults.
  std::size_t source = 0;
};

struct SimulatedMask {
  /// [T, N, C], 1 = valid.
  Tensor mask;
  std::vector<FaultInterval> faults;
};

/// Every cell independently missing with probability eta.
SimulatedMask simulate_point(const std::vector<std::size_t>& shape, double eta, std::uint64_t seed);

/// Temporal faults, optional propagation to hop-k successors in `graph` and
/// point noise. The point-noise draws use the same stream as simulate_point,
/// so with p_f = 0 and no propagation both functions agree cell for cell.
SimulatedMask simulate_block(const std::vector<std::size_t>& shape, const MaskConfig& cfg,
                             const WeightedDigraph* graph = nullptr);

struct MaskStatistics {
  double missing_fraction = 0.0;
  /// Missing fraction per node over all steps and channels.
  std::vector<double> per_node;
  /// Streak length -> number of maximal missing runs of that length.
  std::map<std::size_t, std::size_t> run_lengths;
  /// Steps at which every node and channel is missing.
  std::size_t fully_missing_steps = 0;
};

MaskStatistics mask_statistics(const Tensor& mask);
nlohmann::json to_json(const MaskStatistics& stats);

/// One JSON object per line: {node, channel, start, length, origin, source}.
void write_fault_log(const std::string& path, const std::vector<FaultInterval>& faults);

}  // namespace msf
