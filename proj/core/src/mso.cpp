#include "msf/mso.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "msf/errors.hpp"
#include "msf/rng.hpp"

namespace msf {

WeightedDigraph random_in_degree_graph(std::size_t num_nodes, std::size_t in_degree,
                                       std::uint64_t seed) {
  if (num_nodes == 0) throw ContractError("random graph needs at least one node");
  if (in_degree >= num_nodes) throw ContractError("in-degree must be below the node count");
  Rng rng(seed, "mso-graph");
  std::vector<Triplet> edges;
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < num_nodes; ++i) {
    pool.clear();
    for (std::size_t j = 0; j < num_nodes; ++j) {
      if (j != i) pool.push_back(j);
    }
    // Partial Fisher-Yates: the first in_degree slots are the sample.
    for (std::size_t s = 0; s < in_degree; ++s) {
      std::swap(pool[s], pool[s + rng.below(pool.size() - s)]);
      edges.push_back({pool[s], i, 1.0});
    }
  }
  return WeightedDigraph(num_nodes, edges);
}

WeightedDigraph path_graph(std::size_t num_nodes) {
  std::vector<Triplet> edges;
  for (std::size_t i = 0; i + 1 < num_nodes; ++i) {
    edges.push_back({i, i + 1, 1.0});
    edges.push_back({i + 1, i, 1.0});
  }
  return WeightedDigraph(num_nodes, edges);
}

MsoDataset generate_mso(const WeightedDigraph& adjacency, std::size_t hops, std::size_t steps,
                        std::size_t fan_in, std::uint64_t seed) {
  if (steps == 0) throw ContractError("MSO length must be positive");
  if (hops == 0) throw ContractError("MSO hop order must be at least 1");
  if (fan_in == 0) throw ContractError("MSO fan-in must be at least 1");
  for (double w : adjacency.adjacency().values()) {
    if (w != 1.0) throw ContractError("MSO adjacency must be binary");
  }
  const std::size_t n = adjacency.num_nodes();
  const SparseMatrix& a = adjacency.adjacency();

  // Walk counts summed over lengths 1..hops.
  SparseMatrix power = a;
  SparseMatrix walks = a;
  for (std::size_t k = 2; k <= hops; ++k) {
    power = power.multiply(a);
    auto t = walks.triplets();
    const auto more = power.triplets();
    t.insert(t.end(), more.begin(), more.end());
    walks = SparseMatrix(n, n, std::move(t));
  }
  const SparseMatrix incoming = walks.without_diagonal().transposed();

  Rng rng(seed, "mso-fanin");
  std::vector<Triplet> mixing;
  for (std::size_t i = 0; i < n; ++i) {
    const auto cols = incoming.row_columns(i);
    const auto vals = incoming.row_values(i);
    std::vector<std::size_t> order(cols.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t take = std::min(fan_in, order.size());
    for (std::size_t s = 0; s < take; ++s) {
      std::swap(order[s], order[s + rng.below(order.size() - s)]);
      mixing.push_back({cols[order[s]], i, vals[order[s]]});
    }
  }
  MsoDataset out;
  out.mixing = WeightedDigraph(n, mixing);

  Tensor base({steps, n, 1});
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      base[t * n + i] =
          std::sin(static_cast<double>(t) * std::exp(-static_cast<double>(i) / static_cast<double>(n)));
    }
  }
  Tensor x = base;
  out.mixing.adjacency().apply(base.data(), steps * n, 1, x.data(), /*transpose=*/true,
                               /*accumulate=*/true);
  out.panel = make_panel(std::move(x));
  return out;
}

}  // namespace msf
