#include "msf/sparse.hpp"

#include <algorithm>

#include "msf/errors.hpp"

namespace msf {

SparseMatrix::SparseMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), row_ptr_(rows + 1, 0) {}

SparseMatrix::SparseMatrix(std::size_t rows, std::size_t cols, std::vector<Triplet> triplets,
                           bool drop_zeros)
    : rows_(rows), cols_(cols), row_ptr_(rows + 1, 0) {
  for (const auto& t : triplets) {
    if (t.row >= rows || t.col >= cols) {
      throw DimensionError("triplet (" + std::to_string(t.row) + "," + std::to_string(t.col) +
                           ") outside " + std::to_string(rows) + "x" + std::to_string(cols));
    }
  }
  std::stable_sort(triplets.begin(), triplets.end(), [](const Triplet& a, const Triplet& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  for (std::size_t i = 0; i < triplets.size();) {
    std::size_t j = i;
    double v = 0.0;
    while (j < triplets.size() && triplets[j].row == triplets[i].row &&
           triplets[j].col == triplets[i].col) {
      v += triplets[j].value;
      ++j;
    }
    if (!(drop_zeros && v == 0.0)) {
      col_idx_.push_back(triplets[i].col);
      values_.push_back(v);
      ++row_ptr_[triplets[i].row + 1];
    }
    i = j;
  }
  for (std::size_t r = 0; r < rows; ++r) row_ptr_[r + 1] += row_ptr_[r];
}

SparseMatrix SparseMatrix::identity(std::size_t n) {
  std::vector<Triplet> t;
  t.reserve(n);
  for (std::size_t i = 0; i < n; ++i) t.push_back({i, i, 1.0});
  return {n, n, std::move(t)};
}

double SparseMatrix::at(std::size_t r, std::size_t c) const {
  auto cols = row_columns(r);
  auto it = std::lower_bound(cols.begin(), cols.end(), c);
  if (it == cols.end() || *it != c) return 0.0;
  return values_[row_ptr_[r] + static_cast<std::size_t>(it - cols.begin())];
}

std::vector<Triplet> SparseMatrix::triplets() const {
  std::vector<Triplet> out;
  out.reserve(nnz());
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t p = row_ptr_[r]; p < row_ptr_[r + 1]; ++p) {
      out.push_back({r, col_idx_[p], values_[p]});
    }
  }
  return out;
}

SparseMatrix SparseMatrix::transposed() const {
  auto t = triplets();
  for (auto& e : t) std::swap(e.row, e.col);
  return {cols_, rows_, std::move(t), false};
}

SparseMatrix SparseMatrix::multiply(const SparseMatrix& rhs) const {
  if (cols_ != rhs.rows_) {
    throw DimensionError("sparse product inner extents differ: " + std::to_string(cols_) +
                         " vs " + std::to_string(rhs.rows_));
  }
  std::vector<Triplet> out;
  std::vector<double> acc(rhs.cols_, 0.0);
  std::vector<char> used(rhs.cols_, 0);
  std::vector<std::size_t> touched;
  for (std::size_t r = 0; r < rows_; ++r) {
    touched.clear();
    for (std::size_t p = row_ptr_[r]; p < row_ptr_[r + 1]; ++p) {
      const std::size_t k = col_idx_[p];
      for (std::size_t q = rhs.row_ptr_[k]; q < rhs.row_ptr_[k + 1]; ++q) {
        const std::size_t c = rhs.col_idx_[q];
        if (!used[c]) {
          used[c] = 1;
          touched.push_back(c);
        }
        acc[c] += values_[p] * rhs.values_[q];
      }
    }
    for (std::size_t c : touched) {
      out.push_back({r, c, acc[c]});
      acc[c] = 0.0;
      used[c] = 0;
    }
  }
  return {rows_, rhs.cols_, std::move(out)};
}

SparseMatrix SparseMatrix::without_diagonal() const {
  auto t = triplets();
  std::erase_if(t, [](const Triplet& e) { return e.row == e.col; });
  return {rows_, cols_, std::move(t)};
}

std::vector<double> SparseMatrix::row_sums() const {
  std::vector<double> s(rows_, 0.0);
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t p = row_ptr_[r]; p < row_ptr_[r + 1]; ++p) s[r] += values_[p];
  }
  return s;
}

SparseMatrix SparseMatrix::row_normalized() const {
  SparseMatrix out = *this;
  const auto sums = row_sums();
  for (std::size_t r = 0; r < rows_; ++r) {
    if (sums[r] == 0.0) continue;
    for (std::size_t p = row_ptr_[r]; p < row_ptr_[r + 1]; ++p) out.values_[p] /= sums[r];
  }
  return out;
}

std::vector<double> SparseMatrix::to_dense() const {
  std::vector<double> d(rows_ * cols_, 0.0);
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t p = row_ptr_[r]; p < row_ptr_[r + 1]; ++p) {
      d[r * cols_ + col_idx_[p]] = values_[p];
    }
  }
  return d;
}

void SparseMatrix::apply(std::span<const double> x, std::size_t x_rows, std::size_t x_cols,
                         std::span<double> out, bool transpose, bool accumulate) const {
  const std::size_t in_extent = transpose ? rows_ : cols_;
  const std::size_t out_extent = transpose ? cols_ : rows_;
  if (in_extent == 0 ? x_rows != 0 : x_rows % in_extent != 0) {
    throw DimensionError("sparse operator with input extent " + std::to_string(in_extent) +
                         " cannot act on " + std::to_string(x_rows) + " rows");
  }
  const std::size_t blocks = in_extent == 0 ? 0 : x_rows / in_extent;
  if (out.size() != blocks * out_extent * x_cols) {
    throw DimensionError("sparse operator output buffer has wrong size");
  }
  if (!accumulate) std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t b = 0; b < blocks; ++b) {
    const double* xb = x.data() + b * in_extent * x_cols;
    double* ob = out.data() + b * out_extent * x_cols;
    for (std::size_t r = 0; r < rows_; ++r) {
      for (std::size_t p = row_ptr_[r]; p < row_ptr_[r + 1]; ++p) {
        const std::size_t c = col_idx_[p];
        const double v = values_[p];
        // A·x gathers row c of x into row r; Aᵀ·x scatters row r into row c.
        const double* src = xb + (transpose ? r : c) * x_cols;
        double* dst = ob + (transpose ? c : r) * x_cols;
        for (std::size_t j = 0; j < x_cols; ++j) dst[j] += v * src[j];
      }
    }
  }
}

}  // namespace msf
