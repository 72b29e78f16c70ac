#pragma once

#include <cstddef>
#include <cstdint>

#include "msf/graph.hpp"
#include "msf/panel.hpp"

namespace msf {

/// Directed binary graph in which every node receives exactly `in_degree`
/// edges from distinct, uniformly chosen other nodes.
WeightedDigraph random_in_degree_graph(std::size_t num_nodes, std::size_t in_degree,
                                       std::uint64_t seed);

/// Undirected unit-weight path 0 - 1 - ... - (n-1).
WeightedDigraph path_graph(std::size_t num_nodes);

struct MsoDataset {
  Panel panel;
  /// Sparse mixing graph: edge j -> i with weight w adds w * base_j to node i.
  WeightedDigraph mixing;
};

/// Superimposed-oscillator panel. Node i carries sin(t * exp(-i/N)); each node
/// then adds up to `fan_in` base signals drawn without replacement from the
/// nodes that reach it within `hops` steps of `adjacency`, weighted by the
/// number of such walks. Self-walks are not candidates. Single channel, full
/// mask, no exogenous variables.
MsoDataset generate_mso(const WeightedDigraph& adjacency, std::size_t hops, std::size_t steps,
                        std::size_t fan_in, std::uint64_t seed);

}  // namespace msf
