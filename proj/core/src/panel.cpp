#include "msf/panel.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <regex>
#include <sstream>

#include "msf/atomic_file.hpp"
#include "msf/errors.hpp"
#include "number_parse.hpp"

namespace msf {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && s[i] == ' ') ++i;
  return s.substr(i);
}

bool is_missing_token(const std::string& s) {
  if (s.empty()) return true;
  std::string l = s;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
  return l == "nan" || l == "na" || l == "null" || l == "none";
}

struct RawTable {
  std::vector<std::string> header;
  std::vector<std::int64_t> timestamps;
  std::vector<std::vector<std::string>> cells;
};

RawTable read_table(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  RawTable t;
  std::string line;
  if (!std::getline(is, line)) throw ParseError(path + " line 1: missing header");
  t.header = split_csv_line(trim(line));
  if (t.header.size() < 2) throw ParseError(path + " line 1: need a timestamp and data columns");
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != t.header.size()) {
      throw ParseError(path + " line " + std::to_string(lineno) + ": expected " +
                       std::to_string(t.header.size()) + " fields, got " +
                       std::to_string(fields.size()));
    }
    try {
      t.timestamps.push_back(parse_timestamp(trim(fields[0])));
    } catch (const ParseError& e) {
      throw ParseError(path + " line " + std::to_string(lineno) + ": " + e.what());
    }
    fields.erase(fields.begin());
    t.cells.push_back(std::move(fields));
  }
  return t;
}

// Maps each data column to (node, channel).
std::vector<std::pair<std::size_t, std::size_t>> column_layout(const std::vector<std::string>& header,
                                                                std::size_t& nodes,
                                                                std::size_t& channels) {
  static const std::regex pattern(R"(node(\d+)_ch(\d+))");
  std::vector<std::pair<std::size_t, std::size_t>> layout;
  bool structured = true;
  for (std::size_t c = 1; c < header.size() && structured; ++c) {
    std::smatch m;
    const std::string name = trim(header[c]);
    if (std::regex_match(name, m, pattern)) {
      layout.emplace_back(std::stoul(m[1]), std::stoul(m[2]));
    } else {
      structured = false;
    }
  }
  if (!structured) {
    layout.clear();
    for (std::size_t c = 1; c < header.size(); ++c) layout.emplace_back(c - 1, 0);
  }
  nodes = 0;
  channels = 0;
  for (const auto& [n, ch] : layout) {
    nodes = std::max(nodes, n + 1);
    channels = std::max(channels, ch + 1);
  }
  if (nodes * channels != layout.size()) {
    throw ParseError("header does not describe a complete node x channel grid");
  }
  return layout;
}

double parse_double(const std::string& s, const std::string& where) {
  const auto v = detail::parse_number(s);
  if (!v) throw ParseError(where + ": malformed number '" + s + "'");
  return *v;
}

}  // namespace

void Panel::validate() const {
  if (x.rank() != 3) throw DimensionError("panel observations must be [T, N, C]");
  if (mask.shape() != x.shape()) throw DimensionError("mask shape differs from observations");
  if (exog.rank() != 3 || exog.extent(0) != x.extent(0) || exog.extent(1) != x.extent(1)) {
    throw DimensionError("exogenous shape inconsistent with observations");
  }
  if (!timestamps.empty() && timestamps.size() != x.extent(0)) {
    throw DimensionError("timestamp count differs from step count");
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (mask[i] != 0.0 && mask[i] != 1.0) throw ContractError("mask must be binary");
    if (mask[i] == 1.0 && !std::isfinite(x[i])) throw ContractError("valid observation is not finite");
  }
}

Panel make_panel(Tensor x) {
  Panel p;
  p.mask = Tensor(x.shape(), 1.0);
  p.exog = Tensor({x.extent(0), x.extent(1), 0});
  p.x = std::move(x);
  return p;
}

std::int64_t parse_timestamp(const std::string& text) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  char sep = 0;
  const char* str = text.c_str();
  if (std::sscanf(str, "%d-%d-%d%c%d:%d:%d", &y, &mo, &d, &sep, &h, &mi, &s) >= 6 ||
      std::sscanf(str, "%d-%d-%d", &y, &mo, &d) == 3) {
    if (text.size() > 10 && sep != ' ' && sep != 'T') throw ParseError("bad timestamp " + text);
    if (text.size() <= 10) h = mi = s = 0;
    using namespace std::chrono;
    const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
    if (!ymd.ok()) throw ParseError("invalid date " + text);
    const auto days = sys_days{ymd}.time_since_epoch().count();
    return static_cast<std::int64_t>(days) * 86400 + h * 3600 + mi * 60 + s;
  }
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) throw ParseError("bad timestamp " + text);
  return v;
}

CsvPanel load_csv_panel(const std::string& obs_path, const std::string& mask_path,
                        const std::string& coords_path) {
  const RawTable obs = read_table(obs_path);
  std::size_t nodes = 0, channels = 0;
  const auto layout = column_layout(obs.header, nodes, channels);
  const std::size_t steps = obs.cells.size();
  for (std::size_t t = 1; t < steps; ++t) {
    if (obs.timestamps[t] <= obs.timestamps[t - 1]) {
      throw ContractError(obs_path + ": timestamps not strictly increasing at data row " +
                          std::to_string(t + 1));
    }
  }

  CsvPanel out;
  Panel& p = out.panel;
  p.x = Tensor({steps, nodes, channels});
  p.mask = Tensor({steps, nodes, channels});
  p.exog = Tensor({steps, nodes, 0});
  p.timestamps = obs.timestamps;
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t c = 0; c < layout.size(); ++c) {
      const std::size_t idx = (t * nodes + layout[c].first) * channels + layout[c].second;
      const std::string cell = trim(obs.cells[t][c]);
      if (is_missing_token(cell)) continue;
      const double v = parse_double(cell, obs_path + " line " + std::to_string(t + 2));
      if (!std::isfinite(v)) continue;
      p.x[idx] = v;
      p.mask[idx] = 1.0;
    }
  }

  if (!mask_path.empty()) {
    const RawTable mt = read_table(mask_path);
    if (mt.header != obs.header || mt.cells.size() != steps) {
      throw ParseError(mask_path + ": layout differs from " + obs_path);
    }
    for (std::size_t t = 0; t < steps; ++t) {
      for (std::size_t c = 0; c < layout.size(); ++c) {
        const std::size_t idx = (t * nodes + layout[c].first) * channels + layout[c].second;
        const double v = parse_double(trim(mt.cells[t][c]), mask_path + " line " + std::to_string(t + 2));
        if (v != 0.0 && v != 1.0) {
          throw ParseError(mask_path + " line " + std::to_string(t + 2) + ": mask must be 0 or 1");
        }
        // A valid mask over a missing token keeps x at 0.
        p.mask[idx] = v;
      }
    }
  }

  if (!coords_path.empty()) {
    std::ifstream is(coords_path);
    if (!is) throw std::runtime_error("cannot open " + coords_path);
    std::string line;
    std::getline(is, line);
    if (trim(line) != "node,lat,lon") throw ParseError(coords_path + " line 1: expected node,lat,lon");
    out.coords.assign(nodes, GeoPoint{0, 0});
    std::vector<char> seen(nodes, 0);
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      line = trim(line);
      if (line.empty()) continue;
      const auto f = split_csv_line(line);
      const std::string where = coords_path + " line " + std::to_string(lineno);
      if (f.size() != 3) throw ParseError(where + ": expected 3 fields");
      const auto n = static_cast<std::size_t>(parse_double(f[0], where));
      if (n >= nodes) throw ParseError(where + ": node index out of range");
      out.coords[n] = GeoPoint{parse_double(f[1], where), parse_double(f[2], where)};
      seen[n] = 1;
    }
    if (std::count(seen.begin(), seen.end(), 0) != 0) {
      throw ParseError(coords_path + ": missing coordinates for some nodes");
    }
  }
  p.validate();
  return out;
}

void write_csv_panel(const Panel& panel, const std::string& obs_path, const std::string& mask_path) {
  const std::size_t steps = panel.steps(), nodes = panel.nodes(), channels = panel.channels();
  auto write = [&](const std::string& path, const Tensor& values, bool integral) {
    std::ostringstream os;
    os << "timestamp";
    for (std::size_t n = 0; n < nodes; ++n) {
      for (std::size_t c = 0; c < channels; ++c) os << ",node" << n << "_ch" << c;
    }
    os << '\n';
    char buf[64];
    for (std::size_t t = 0; t < steps; ++t) {
      os << (panel.timestamps.empty() ? static_cast<std::int64_t>(t) : panel.timestamps[t]);
      for (std::size_t i = 0; i < nodes * channels; ++i) {
        const double v = values[t * nodes * channels + i];
        if (integral) {
          os << ',' << (v != 0.0 ? 1 : 0);
        } else {
          std::snprintf(buf, sizeof(buf), "%.17g", v);
          os << ',' << buf;
        }
      }
      os << '\n';
    }
    write_file_atomic(path, os.str());
  };
  write(obs_path, panel.x, false);
  if (!mask_path.empty()) write(mask_path, panel.mask, true);
}

Tensor time_encodings(const std::vector<std::int64_t>& timestamps, std::size_t num_nodes,
                      bool include_dow) {
  using namespace std::chrono;
  const std::size_t steps = timestamps.size();
  const std::size_t width = include_dow ? 11 : 4;
  Tensor u({steps, num_nodes, width});
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  for (std::size_t t = 0; t < steps; ++t) {
    const sys_seconds ts{seconds{timestamps[t]}};
    const auto day_start = floor<days>(ts);
    const double second_of_day = static_cast<double>((ts - day_start).count());
    const year_month_day ymd{day_start};
    const sys_days jan1{ymd.year() / January / 1};
    const double day_of_year = static_cast<double>((day_start - jan1).count());
    const unsigned monday_first = weekday{day_start}.iso_encoding() - 1;
    std::vector<double> f{std::sin(kTwoPi * second_of_day / 86400.0),
                          std::cos(kTwoPi * second_of_day / 86400.0),
                          std::sin(kTwoPi * day_of_year / 365.25),
                          std::cos(kTwoPi * day_of_year / 365.25)};
    if (include_dow) {
      for (unsigned d = 0; d < 7; ++d) f.push_back(d == monday_first ? 1.0 : 0.0);
    }
    for (std::size_t n = 0; n < num_nodes; ++n) {
      std::copy(f.begin(), f.end(), u.storage().begin() + static_cast<std::ptrdiff_t>((t * num_nodes + n) * width));
    }
  }
  return u;
}

Tensor Scaler::apply(const Tensor& x) const {
  Tensor out = x;
  const std::size_t c = offset.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - offset[i % c]) / scale[i % c];
  return out;
}

Tensor Scaler::invert(const Tensor& x) const {
  Tensor out = x;
  const std::size_t c = offset.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * scale[i % c] + offset[i % c];
  return out;
}

Scaler fit_scaler(const Panel& panel, std::size_t begin, std::size_t end, ScalingMethod method) {
  if (begin >= end || end > panel.steps()) throw ContractError("scaler fit range outside the panel");
  constexpr double kFloor = 1e-8;
  const std::size_t nodes = panel.nodes(), channels = panel.channels();
  Scaler s;
  s.method = method;
  for (std::size_t c = 0; c < channels; ++c) {
    std::vector<double> vals;
    for (std::size_t t = begin; t < end; ++t) {
      for (std::size_t n = 0; n < nodes; ++n) {
        const std::size_t i = (t * nodes + n) * channels + c;
        if (panel.mask[i] == 1.0) vals.push_back(panel.x[i]);
      }
    }
    if (vals.empty()) {
      throw ContractError("channel " + std::to_string(c) + " has no valid training values");
    }
    if (method == ScalingMethod::standard) {
      double mean = 0.0;
      for (double v : vals) mean += v;
      mean /= static_cast<double>(vals.size());
      double var = 0.0;
      for (double v : vals) var += (v - mean) * (v - mean);
      s.offset.push_back(mean);
      s.scale.push_back(std::max(std::sqrt(var / static_cast<double>(vals.size())), kFloor));
    } else {
      const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());
      s.offset.push_back(*lo);
      s.scale.push_back(std::max(*hi - *lo, kFloor));
    }
  }
  return s;
}

WindowSplits make_windows(std::size_t steps, std::size_t window, std::size_t horizon,
                          const SplitFractions& fractions) {
  if (window == 0 || horizon == 0) throw ContractError("window and horizon must be positive");
  if (steps < window + horizon) {
    throw ContractError("series of " + std::to_string(steps) + " steps is shorter than window + horizon");
  }
  const std::size_t total = steps - window - horizon + 1;
  const auto n_val = static_cast<std::size_t>(std::floor(fractions.val * static_cast<double>(total)));
  const auto n_test = static_cast<std::size_t>(std::floor(fractions.test * static_cast<double>(total)));
  const std::size_t n_train = total - n_val - n_test;
  WindowSplits s;
  for (std::size_t i = 0; i < total; ++i) {
    WindowSample w{i, window, horizon};
    if (i < n_train) {
      s.train.push_back(w);
    } else if (i < n_train + n_val) {
      s.val.push_back(w);
    } else {
      s.test.push_back(w);
    }
  }
  return s;
}

Tensor slice_steps(const Tensor& t, std::size_t begin, std::size_t count) {
  if (t.rank() < 1 || begin + count > t.extent(0)) throw DimensionError("slice_steps out of range");
  std::vector<std::size_t> shape = t.shape();
  const std::size_t stride = t.size() / shape[0];
  shape[0] = count;
  std::vector<double> data(t.storage().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                           t.storage().begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
  return Tensor(shape, std::move(data));
}

}  // namespace msf
