#include "msf/graph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <numeric>
#include <set>

#include "msf/errors.hpp"

namespace msf {

namespace {

constexpr std::size_t kUnreached = std::numeric_limits<std::size_t>::max();

bool is_symmetric(const SparseMatrix& a) {
  for (const auto& t : a.triplets()) {
    if (a.at(t.col, t.row) != t.value) return false;
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// WeightedDigraph

WeightedDigraph::WeightedDigraph(std::size_t num_nodes, const std::vector<Triplet>& edges) {
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& e : edges) {
    if (e.row >= num_nodes || e.col >= num_nodes) {
      throw ContractError("edge (" + std::to_string(e.row) + "," + std::to_string(e.col) +
                          ") references a node outside [0," + std::to_string(num_nodes) + ")");
    }
    if (!(e.value >= 0.0)) throw ContractError("negative or NaN edge weight");
    if (!seen.emplace(e.row, e.col).second) {
      throw ContractError("duplicate edge (" + std::to_string(e.row) + "," +
                          std::to_string(e.col) + ")");
    }
  }
  adj_ = SparseMatrix(num_nodes, num_nodes, edges);
  directed_ = !is_symmetric(adj_);
}

WeightedDigraph::WeightedDigraph(SparseMatrix adjacency) : adj_(std::move(adjacency)) {
  if (adj_.rows() != adj_.cols()) throw DimensionError("adjacency must be square");
  for (double v : adj_.values()) {
    if (!(v >= 0.0)) throw ContractError("negative or NaN edge weight");
  }
  directed_ = !is_symmetric(adj_);
}

double WeightedDigraph::total_weight() const {
  double s = 0.0;
  for (double v : adj_.values()) s += v;
  return s;
}

WeightedDigraph WeightedDigraph::undirected() const {
  if (!directed_) return *this;
  std::vector<Triplet> t;
  for (const auto& e : adj_.triplets()) {
    const double w = std::max(e.value, adj_.at(e.col, e.row));
    t.push_back({e.row, e.col, w});
    if (adj_.at(e.col, e.row) == 0.0) t.push_back({e.col, e.row, w});
  }
  return WeightedDigraph(num_nodes(), t);
}

WeightedDigraph WeightedDigraph::binarized() const {
  auto t = adj_.triplets();
  for (auto& e : t) e.value = 1.0;
  return WeightedDigraph(num_nodes(), t);
}

std::vector<std::size_t> WeightedDigraph::connected_components() const {
  const WeightedDigraph u = undirected();
  const std::size_t n = num_nodes();
  std::vector<std::size_t> label(n, kUnreached);
  std::size_t next = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (label[s] != kUnreached) continue;
    std::deque<std::size_t> queue{s};
    label[s] = next;
    while (!queue.empty()) {
      const std::size_t v = queue.front();
      queue.pop_front();
      for (std::size_t w : u.successors(v)) {
        if (label[w] == kUnreached) {
          label[w] = next;
          queue.push_back(w);
        }
      }
    }
    ++next;
  }
  return label;
}

std::size_t WeightedDigraph::num_components() const {
  const auto labels = connected_components();
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
}

// ---------------------------------------------------------------------------
// Geographic construction

double haversine_km(GeoPoint a, GeoPoint b) {
  constexpr double kRadius = 6371.0;
  constexpr double kDeg = std::numbers::pi / 180.0;
  const double dlat = (b.lat_deg - a.lat_deg) * kDeg;
  const double dlon = (b.lon_deg - a.lon_deg) * kDeg;
  const double h = std::sin(dlat / 2) * std::sin(dlat / 2) +
                   std::cos(a.lat_deg * kDeg) * std::cos(b.lat_deg * kDeg) *
                       std::sin(dlon / 2) * std::sin(dlon / 2);
  return 2.0 * kRadius * std::asin(std::min(1.0, std::sqrt(h)));
}

WeightedDigraph build_graph_from_coords(std::span<const GeoPoint> coords, double tau,
                                        std::size_t knn_cap, std::vector<std::string>* warnings) {
  const std::size_t n = coords.size();
  if (n < 2) throw ContractError("graph construction needs at least 2 points");
  if (!(tau > 0.0 && tau < 1.0)) throw ContractError("tau must lie in (0, 1)");

  std::vector<double> dist(n * n, 0.0);
  double mean = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = haversine_km(coords[i], coords[j]);
      dist[i * n + j] = dist[j * n + i] = d;
      mean += d;
      ++pairs;
      if (d == 0.0 && warnings != nullptr) {
        warnings->push_back("nodes " + std::to_string(i) + " and " + std::to_string(j) +
                            " share coordinates; linked with weight 1");
      }
    }
  }
  mean /= static_cast<double>(pairs);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) var += (dist[i * n + j] - mean) * (dist[i * n + j] - mean);
  }
  const double sigma = std::sqrt(var / static_cast<double>(pairs));

  auto kernel = [&](double d) {
    if (d == 0.0) return 1.0;
    if (sigma == 0.0) return 0.0;
    return std::exp(-(d * d) / (sigma * sigma));
  };

  std::set<std::pair<std::size_t, std::size_t>> kept;
  std::vector<std::pair<double, std::size_t>> row;
  for (std::size_t i = 0; i < n; ++i) {
    row.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double w = kernel(dist[i * n + j]);
      if (w >= tau) row.emplace_back(w, j);
    }
    // Strongest first, lower index on ties.
    std::stable_sort(row.begin(), row.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    const std::size_t keep = knn_cap == 0 ? row.size() : std::min(knn_cap, row.size());
    for (std::size_t r = 0; r < keep; ++r) {
      kept.emplace(i, row[r].second);
      kept.emplace(row[r].second, i);
    }
  }
  std::vector<Triplet> edges;
  edges.reserve(kept.size());
  for (const auto& [i, j] : kept) edges.push_back({i, j, kernel(dist[i * n + j])});
  return WeightedDigraph(n, edges);
}

WeightedDigraph ensure_connected(const WeightedDigraph& graph, std::span<const GeoPoint> coords,
                                 double tau, double max_distance_km) {
  if (graph.directed()) throw ContractError("ensure_connected expects an undirected graph");
  const std::size_t n = graph.num_nodes();
  if (coords.size() != n) throw DimensionError("coordinate count does not match node count");
  WeightedDigraph g = graph;
  while (true) {
    const auto comp = g.connected_components();
    if (n == 0 || *std::max_element(comp.begin(), comp.end()) == 0) break;
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (comp[i] == comp[j]) continue;
        const double d = haversine_km(coords[i], coords[j]);
        if (d < best && d <= max_distance_km) {
          best = d;
          bi = i;
          bj = j;
        }
      }
    }
    if (!std::isfinite(best)) break;
    auto edges = g.adjacency().triplets();
    edges.push_back({bi, bj, tau});
    edges.push_back({bj, bi, tau});
    g = WeightedDigraph(n, edges);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Hop structure

namespace {

// BFS over a graph already known to be symmetric.
std::vector<std::size_t> bfs_hops(const WeightedDigraph& u, std::size_t source,
                                  std::size_t max_hops) {
  std::vector<std::size_t> dist(u.num_nodes(), kUnreached);
  dist[source] = 0;
  std::deque<std::size_t> queue{source};
  while (!queue.empty()) {
    const std::size_t v = queue.front();
    queue.pop_front();
    if (dist[v] == max_hops) continue;
    for (std::size_t w : u.successors(v)) {
      if (dist[w] == kUnreached) {
        dist[w] = dist[v] + 1;
        queue.push_back(w);
      }
    }
  }
  return dist;
}

}  // namespace

std::vector<std::size_t> hop_distances(const WeightedDigraph& graph, std::size_t source,
                                       std::size_t max_hops) {
  if (source >= graph.num_nodes()) throw ContractError("hop_distances: source out of range");
  return bfs_hops(graph.undirected(), source, max_hops);
}

WeightedDigraph reach_within(const WeightedDigraph& graph, std::size_t k) {
  if (k < 1) throw ContractError("reach_within needs k >= 1");
  const std::size_t n = graph.num_nodes();
  const WeightedDigraph u = graph.undirected();
  std::vector<Triplet> edges;
  for (std::size_t s = 0; s < n; ++s) {
    const auto dist = bfs_hops(u, s, k);
    for (std::size_t v = 0; v < n; ++v) {
      if (v != s && dist[v] != kUnreached) edges.push_back({s, v, 1.0});
    }
  }
  return WeightedDigraph(n, edges);
}

// ---------------------------------------------------------------------------
// Selection

SelectionMatrix::SelectionMatrix(std::vector<std::size_t> assignment,
                                 std::vector<std::size_t> centroids)
    : assignment_(std::move(assignment)),
      sizes_(centroids.size(), 0),
      centroids_(std::move(centroids)) {
  const std::size_t nc = centroids_.size();
  for (std::size_t a : assignment_) {
    if (a >= nc) throw ContractError("assignment refers to a missing supernode");
    ++sizes_[a];
  }
  for (std::size_t s = 0; s < nc; ++s) {
    if (sizes_[s] == 0) throw ContractError("supernode " + std::to_string(s) + " is empty");
    if (centroids_[s] >= assignment_.size() || assignment_[centroids_[s]] != s) {
      throw ContractError("centroid of supernode " + std::to_string(s) + " is not its member");
    }
  }
  std::vector<Triplet> red, lift;
  for (std::size_t i = 0; i < assignment_.size(); ++i) {
    red.push_back({assignment_[i], i, 1.0});
    lift.push_back({i, assignment_[i], 1.0 / static_cast<double>(sizes_[assignment_[i]])});
  }
  reduce_ = SparseMatrix(nc, assignment_.size(), std::move(red));
  lift_ = SparseMatrix(assignment_.size(), nc, std::move(lift));
}

SelectionMatrix SelectionMatrix::identity(std::size_t n) {
  std::vector<std::size_t> a(n);
  std::iota(a.begin(), a.end(), 0);
  return SelectionMatrix(a, a);
}

SelectionMatrix kmis_select(const WeightedDigraph& graph, std::size_t k) {
  const std::size_t n = graph.num_nodes();
  if (n == 0) throw ContractError("kmis_select on an empty graph");
  if (k < 1) throw ContractError("kmis_select needs k >= 1");
  const WeightedDigraph u = graph.undirected();

  std::vector<char> covered(n, 0);
  std::vector<std::size_t> centroids;
  for (std::size_t v = 0; v < n; ++v) {
    if (covered[v]) continue;
    centroids.push_back(v);
    const auto dist = bfs_hops(u, v, k);
    for (std::size_t w = 0; w < n; ++w) {
      if (dist[w] != kUnreached) covered[w] = 1;
    }
  }

  // Layered multi-source BFS; a node reached simultaneously from several
  // supernodes joins the one with the lowest index.
  std::vector<std::size_t> label(n, kUnreached);
  std::vector<std::size_t> frontier;
  for (std::size_t s = 0; s < centroids.size(); ++s) {
    label[centroids[s]] = s;
    frontier.push_back(centroids[s]);
  }
  std::vector<std::size_t> next;
  std::vector<char> in_next(n, 0);
  while (!frontier.empty()) {
    next.clear();
    for (std::size_t v : frontier) {
      for (std::size_t w : u.successors(v)) {
        if (label[w] == kUnreached) {
          label[w] = label[v];
          in_next[w] = 1;
          next.push_back(w);
        } else if (in_next[w] && label[v] < label[w]) {
          label[w] = label[v];
        }
      }
    }
    for (std::size_t w : next) in_next[w] = 0;
    frontier.swap(next);
  }
  return SelectionMatrix(std::move(label), std::move(centroids));
}

WeightedDigraph connect_coarse(const SelectionMatrix& s, const WeightedDigraph& a) {
  if (s.num_fine() != a.num_nodes()) {
    throw DimensionError("selection covers " + std::to_string(s.num_fine()) +
                         " nodes, graph has " + std::to_string(a.num_nodes()));
  }
  const auto& asg = s.assignment();
  std::vector<Triplet> t;
  for (const auto& e : a.adjacency().triplets()) {
    if (asg[e.row] != asg[e.col]) t.push_back({asg[e.row], asg[e.col], e.value});
  }
  return WeightedDigraph(SparseMatrix(s.num_coarse(), s.num_coarse(), std::move(t)));
}

namespace {

Tensor apply_operator(const SparseMatrix& op, const Tensor& x, const char* what) {
  if (x.rank() != 2 || x.rows() != op.cols()) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(op.cols()) +
                         " rows, got " + shape_string(x.shape()));
  }
  Tensor out({op.rows(), x.cols()});
  op.apply(x.storage(), x.rows(), x.cols(), out.storage(), false, false);
  return out;
}

}  // namespace

Tensor reduce_features(const SelectionMatrix& s, const Tensor& x) {
  return apply_operator(s.reduce_operator(), x, "reduce_features");
}

Tensor lift_features(const SelectionMatrix& s, const Tensor& xc) {
  return apply_operator(s.lift_operator(), xc, "lift_features");
}

CoarseningHierarchy build_hierarchy(const WeightedDigraph& base, std::size_t levels,
                                    std::size_t kmis_radius) {
  CoarseningHierarchy h;
  h.graphs.push_back(base);
  for (std::size_t k = 0; k < levels; ++k) {
    h.selections.push_back(kmis_select(h.graphs.back(), kmis_radius));
    h.graphs.push_back(connect_coarse(h.selections.back(), h.graphs.back()));
  }
  return h;
}

CoarseningHierarchy permute_hierarchy(const CoarseningHierarchy& h,
                                      std::span<const std::size_t> perm) {
  const std::size_t n = h.graphs.front().num_nodes();
  if (perm.size() != n) throw DimensionError("permutation length does not match node count");
  auto edges = h.graphs.front().adjacency().triplets();
  for (auto& e : edges) {
    e.row = perm[e.row];
    e.col = perm[e.col];
  }
  CoarseningHierarchy out = h;
  out.graphs.front() = WeightedDigraph(n, edges);
  if (!h.selections.empty()) {
    const auto& s = h.selections.front();
    std::vector<std::size_t> asg(n);
    for (std::size_t i = 0; i < n; ++i) asg[perm[i]] = s.assignment()[i];
    std::vector<std::size_t> cents = s.centroids();
    for (auto& c : cents) c = perm[c];
    out.selections.front() = SelectionMatrix(asg, cents);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Temporal decimation

TemporalDownsampler temporal_keep_indices(std::size_t input_length, std::size_t factor) {
  if (input_length < 1 || factor < 1) {
    throw ContractError("temporal decimation needs length >= 1 and factor >= 1");
  }
  TemporalDownsampler t{input_length, factor, {}};
  for (std::size_t end = input_length;; end -= factor) {
    t.kept.push_back(end - 1);
    if (end <= factor) break;
  }
  std::reverse(t.kept.begin(), t.kept.end());
  return t;
}

std::vector<TemporalDownsampler> temporal_chain(std::size_t window, std::size_t factor,
                                                std::size_t layers) {
  std::vector<TemporalDownsampler> chain;
  std::size_t w = window;
  for (std::size_t l = 0; l < layers; ++l) {
    chain.push_back(temporal_keep_indices(w, factor));
    w = chain.back().output_length();
  }
  return chain;
}

}  // namespace msf
