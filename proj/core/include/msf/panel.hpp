#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "msf/graph.hpp"
#include "msf/tensor.hpp"

namespace msf {

/// Synchronous multivariate series over N nodes.
/// x, mask: [T, N, d_x]; exog: [T, N, d_u]. mask is 1 where x is valid.
struct Panel {
  Tensor x;
  Tensor mask;
  Tensor exog;
  /// Unix seconds (UTC); empty for synthetic data.
  std::vector<std::int64_t> timestamps;

  std::size_t steps() const { return x.extent(0); }
  std::size_t nodes() const { return x.extent(1); }
  std::size_t channels() const { return x.extent(2); }
  std::size_t exog_channels() const { return exog.extent(2); }

  /// Throws DimensionError / ContractError when shapes disagree, the mask is
  /// not binary, or a valid entry is non-finite.
  void validate() const;
};

/// Builds a panel with an all-ones mask and no exogenous channels.
Panel make_panel(Tensor x);

struct CsvPanel {
  Panel panel;
  std::vector<GeoPoint> coords;
};

/// Reads a wide observation CSV `timestamp,<col>...`. Columns named
/// `node<i>_ch<c>` fix the node/channel layout; any other names are one node
/// per column with a single channel. Empty cells and NaN/NA/null tokens are
/// marked missing. A mask CSV of the same layout overrides the inferred mask;
/// a coordinate CSV has header `node,lat,lon`.
CsvPanel load_csv_panel(const std::string& obs_path, const std::string& mask_path = {},
                        const std::string& coords_path = {});

/// Writes observations (every cell, full precision) and, if mask_path is not
/// empty, the mask. Timestamps default to the step index.
void write_csv_panel(const Panel& panel, const std::string& obs_path,
                     const std::string& mask_path = {});

/// Parses `YYYY-MM-DD[ T]HH:MM[:SS]`, `YYYY-MM-DD` or integer Unix seconds.
std::int64_t parse_timestamp(const std::string& text);

/// Exogenous calendar features broadcast over nodes, shape [T, N, 4] or
/// [T, N, 11]: sin/cos of time of day, sin/cos of day of year, then an
/// optional Monday-first one-hot weekday.
Tensor time_encodings(const std::vector<std::int64_t>& timestamps, std::size_t num_nodes,
                      bool include_dow);

enum class ScalingMethod { standard, minmax };

/// Per-channel affine normalization: (x - offset) / scale.
struct Scaler {
  ScalingMethod method = ScalingMethod::standard;
  std::vector<double> offset;
  std::vector<double> scale;

  Tensor apply(const Tensor& x) const;
  Tensor invert(const Tensor& x) const;
};

/// Statistics over valid entries of steps [begin, end).
Scaler fit_scaler(const Panel& panel, std::size_t begin, std::size_t end, ScalingMethod method);

/// One forecasting example: inputs are steps [start, start + window), targets
/// the following `horizon` steps.
struct WindowSample {
  std::size_t start = 0;
  std::size_t window = 0;
  std::size_t horizon = 0;

  std::size_t target_start() const { return start + window; }
  std::size_t end() const { return start + window + horizon; }
};

struct SplitFractions {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct WindowSplits {
  std::vector<WindowSample> train;
  std::vector<WindowSample> val;
  std::vector<WindowSample> test;
};

/// Stride-1 windows split sequentially; val and test get floor(fraction *
/// total) windows and train gets the rest.
WindowSplits make_windows(std::size_t steps, std::size_t window, std::size_t horizon,
                          const SplitFractions& fractions = {});

/// Copies steps [begin, begin + count) of a [T, ...] tensor.
Tensor slice_steps(const Tensor& t, std::size_t begin, std::size_t count);

}  // namespace msf
