#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <tuple>
#include <vector>

namespace msf {

/// Coordinate entry used to assemble a SparseMatrix.
struct Triplet {
  std::size_t row;
  std::size_t col;
  double value;
};

/// Compressed sparse row matrix. Column indices within a row are sorted and
/// unique; duplicate triplets are summed on construction.
class SparseMatrix {
 public:
  SparseMatrix() = default;
  SparseMatrix(std::size_t rows, std::size_t cols);
  SparseMatrix(std::size_t rows, std::size_t cols, std::vector<Triplet> triplets,
               bool drop_zeros = true);

  static SparseMatrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t nnz() const { return col_idx_.size(); }

  std::span<const std::size_t> row_offsets() const { return row_ptr_; }
  std::span<const std::size_t> column_indices() const { return col_idx_; }
  std::span<const double> values() const { return values_; }

  std::span<const std::size_t> row_columns(std::size_t r) const {
    return {col_idx_.data() + row_ptr_[r], row_ptr_[r + 1] - row_ptr_[r]};
  }
  std::span<const double> row_values(std::size_t r) const {
    return {values_.data() + row_ptr_[r], row_ptr_[r + 1] - row_ptr_[r]};
  }

  /// Value at (r, c), zero if absent.
  double at(std::size_t r, std::size_t c) const;

  std::vector<Triplet> triplets() const;
  SparseMatrix transposed() const;
  SparseMatrix multiply(const SparseMatrix& rhs) const;
  SparseMatrix without_diagonal() const;
  /// Scales every row to unit sum; empty rows stay empty.
  SparseMatrix row_normalized() const;
  std::vector<double> row_sums() const;
  std::vector<double> to_dense() const;

  /// out = op(this) * x for a row-major x with `cols` columns. When x has a
  /// multiple B of the operator's input extent as rows, the operator is
  /// applied independently to each of the B consecutive row blocks.
  void apply(std::span<const double> x, std::size_t x_rows, std::size_t x_cols,
             std::span<double> out, bool transpose, bool accumulate) const;

  friend bool operator==(const SparseMatrix&, const SparseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::size_t> row_ptr_{0};
  std::vector<std::size_t> col_idx_;
  std::vector<double> values_;
};

}  // namespace msf
