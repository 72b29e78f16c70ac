#pragma once

#include <cstddef>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "msf/sparse.hpp"
#include "msf/tensor.hpp"

namespace msf {

/// Sparse nonnegative adjacency over N nodes. Entry (i, j) is the weight of
/// the edge i -> j. The graph is flagged directed unless the adjacency is
/// symmetric.
class WeightedDigraph {
 public:
  WeightedDigraph() = default;
  /// Throws ContractError on duplicate (i, j) pairs or negative weights.
  WeightedDigraph(std::size_t num_nodes, const std::vector<Triplet>& edges);
  explicit WeightedDigraph(SparseMatrix adjacency);

  std::size_t num_nodes() const { return adj_.rows(); }
  std::size_t num_edges() const { return adj_.nnz(); }
  bool directed() const { return directed_; }

  const SparseMatrix& adjacency() const { return adj_; }
  double weight(std::size_t i, std::size_t j) const { return adj_.at(i, j); }
  std::span<const std::size_t> successors(std::size_t i) const { return adj_.row_columns(i); }
  double total_weight() const;

  /// Symmetric version: weight(i,j) = max(a_ij, a_ji).
  WeightedDigraph undirected() const;
  /// Same support with every weight set to 1.
  WeightedDigraph binarized() const;
  /// Component label per node, computed on the undirected version. Labels are
  /// numbered in order of each component's lowest node index.
  std::vector<std::size_t> connected_components() const;
  std::size_t num_components() const;

  friend bool operator==(const WeightedDigraph&, const WeightedDigraph&) = default;

 private:
  SparseMatrix adj_;
  bool directed_ = false;
};

struct GeoPoint {
  double lat_deg;
  double lon_deg;
};

/// Great-circle distance on a sphere of radius 6371 km.
double haversine_km(GeoPoint a, GeoPoint b);

/// Thresholded Gaussian-kernel graph over geographic points. Weights are
/// exp(-d^2 / sigma^2) with sigma the standard deviation of all pairwise
/// distances; weights below tau are dropped, each node keeps its knn_cap
/// strongest out-edges (0 = unlimited), and one-way edges are mirrored.
/// Coincident points produce a weight-1 edge and a message in `warnings`.
WeightedDigraph build_graph_from_coords(std::span<const GeoPoint> coords, double tau,
                                        std::size_t knn_cap,
                                        std::vector<std::string>* warnings = nullptr);

/// Repeatedly bridges the globally closest pair of nodes lying in different
/// components with a weight-tau edge (both directions) until the graph is
/// connected or no pair within max_distance_km remains.
WeightedDigraph ensure_connected(const WeightedDigraph& graph, std::span<const GeoPoint> coords,
                                 double tau,
                                 double max_distance_km = std::numeric_limits<double>::infinity());

/// Unweighted hop distances from `source` on the undirected version, capped at
/// `max_hops` (nodes farther away get SIZE_MAX).
std::vector<std::size_t> hop_distances(const WeightedDigraph& graph, std::size_t source,
                                       std::size_t max_hops = std::numeric_limits<std::size_t>::max());

/// Binary graph with an edge (i, j), i != j, iff j is reachable from i in at
/// most k hops of the undirected version.
WeightedDigraph reach_within(const WeightedDigraph& graph, std::size_t k);

/// Partition of N_{k-1} fine nodes into N_k supernodes.
class SelectionMatrix {
 public:
  SelectionMatrix() = default;
  /// `centroids[s]` is the fine node representing supernode s.
  SelectionMatrix(std::vector<std::size_t> assignment, std::vector<std::size_t> centroids);

  static SelectionMatrix identity(std::size_t n);

  std::size_t num_fine() const { return assignment_.size(); }
  std::size_t num_coarse() const { return sizes_.size(); }
  const std::vector<std::size_t>& assignment() const { return assignment_; }
  const std::vector<std::size_t>& cluster_sizes() const { return sizes_; }
  const std::vector<std::size_t>& centroids() const { return centroids_; }

  /// Binary S (N_k x N_{k-1}); applying it sums member features.
  const SparseMatrix& reduce_operator() const { return reduce_; }
  /// Pseudo-inverse S+ = S^T diag(1/size) (N_{k-1} x N_k).
  const SparseMatrix& lift_operator() const { return lift_; }

  friend bool operator==(const SelectionMatrix& a, const SelectionMatrix& b) {
    return a.assignment_ == b.assignment_ && a.centroids_ == b.centroids_;
  }

 private:
  std::vector<std::size_t> assignment_;
  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> centroids_;
  SparseMatrix reduce_;
  SparseMatrix lift_;
};

/// k-MIS selection with constant ranking: greedy maximal k-independent set
/// in ascending node order on the undirected graph, then every other node
/// joins its nearest centroid by hop count (ties to the lowest centroid).
SelectionMatrix kmis_select(const WeightedDigraph& graph, std::size_t k);

/// S A S^T with supernode self-loops removed.
WeightedDigraph connect_coarse(const SelectionMatrix& s, const WeightedDigraph& a);

/// X^(k) = S X^(k-1): supernode feature is the sum of its members'.
Tensor reduce_features(const SelectionMatrix& s, const Tensor& x);
/// S+ Xc: each node receives its supernode's feature divided by cluster size.
Tensor lift_features(const SelectionMatrix& s, const Tensor& xc);

/// Graphs A^(0..K) and selections S_1..S_K.
struct CoarseningHierarchy {
  std::vector<WeightedDigraph> graphs;
  std::vector<SelectionMatrix> selections;

  std::size_t levels() const { return selections.size(); }
};

/// Applies kmis_select / connect_coarse `levels` times starting from `base`.
CoarseningHierarchy build_hierarchy(const WeightedDigraph& base, std::size_t levels,
                                    std::size_t kmis_radius = 1);

/// Relabels level-0 nodes: new node perm[i] is old node i. Coarse levels keep
/// their numbering.
CoarseningHierarchy permute_hierarchy(const CoarseningHierarchy& h,
                                      std::span<const std::size_t> perm);

/// Row selection keeping one step out of every `factor`, anchored at the end
/// of the sequence so the last step always survives.
struct TemporalDownsampler {
  std::size_t input_length = 0;
  std::size_t factor = 1;
  std::vector<std::size_t> kept;

  std::size_t output_length() const { return kept.size(); }
};

TemporalDownsampler temporal_keep_indices(std::size_t input_length, std::size_t factor);
/// Downsamplers for `layers` chained decimations starting at `window`.
std::vector<TemporalDownsampler> temporal_chain(std::size_t window, std::size_t factor,
                                                std::size_t layers);

// Edge-list CSV with header `src,dst,weight` and zero-based indices.
void write_edge_list(std::ostream& os, const WeightedDigraph& g);
/// num_nodes == 0 infers the count from the largest index.
WeightedDigraph read_edge_list(std::istream& is, std::size_t num_nodes = 0);
void save_edge_list(const std::string& path, const WeightedDigraph& g);
WeightedDigraph load_edge_list(const std::string& path, std::size_t num_nodes = 0);

}  // namespace msf
