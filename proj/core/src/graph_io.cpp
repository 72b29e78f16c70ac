#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "msf/atomic_file.hpp"
#include "msf/errors.hpp"
#include "msf/graph.hpp"
#include "number_parse.hpp"

namespace msf {

void write_edge_list(std::ostream& os, const WeightedDigraph& g) {
  os << "src,dst,weight\n";
  os.precision(17);
  for (const auto& e : g.adjacency().triplets()) os << e.row << ',' << e.col << ',' << e.value << '\n';
}

WeightedDigraph read_edge_list(std::istream& is, std::size_t num_nodes) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("edge list: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "src,dst,weight") throw ParseError("edge list line 1: expected header src,dst,weight");
  std::vector<Triplet> edges;
  std::size_t max_index = 0;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string a, b, w;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') || !std::getline(ss, w, ',')) {
      throw ParseError("edge list line " + std::to_string(lineno) + ": expected 3 fields");
    }
    std::size_t src = 0, dst = 0;
    const auto ra = std::from_chars(a.data(), a.data() + a.size(), src);
    const auto rb = std::from_chars(b.data(), b.data() + b.size(), dst);
    const auto weight = detail::parse_number(w);
    if (ra.ec != std::errc() || ra.ptr != a.data() + a.size() || rb.ec != std::errc() ||
        rb.ptr != b.data() + b.size() || !weight) {
      throw ParseError("edge list line " + std::to_string(lineno) + ": malformed number");
    }
    edges.push_back({src, dst, *weight});
    max_index = std::max({max_index, src, dst});
  }
  const std::size_t n = num_nodes != 0 ? num_nodes : (edges.empty() ? 0 : max_index + 1);
  return WeightedDigraph(n, edges);
}

void save_edge_list(const std::string& path, const WeightedDigraph& g) {
  std::ostringstream os;
  write_edge_list(os, g);
  write_file_atomic(path, os.str());
}

WeightedDigraph load_edge_list(const std::string& path, std::size_t num_nodes) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_edge_list(is, num_nodes);
}

}  // namespace msf
