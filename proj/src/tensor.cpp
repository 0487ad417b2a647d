#include "seqimpute/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace seqimpute {

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     seqimpute::shape_str(rows, cols));
  }
}

Tensor::Tensor(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ ? rows.begin()->size() : 0;
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("ragged tensor literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str());
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::rows_slice(std::size_t lo, std::size_t hi) const {
  if (lo > hi || hi > rows_) {
    throw ShapeError("row slice [" + std::to_string(lo) + ", " + std::to_string(hi) + ") out of " + shape_str());
  }
  Tensor out(hi - lo, cols_);
  std::copy(data_.begin() + static_cast<std::ptrdiff_t>(lo * cols_),
            data_.begin() + static_cast<std::ptrdiff_t>(hi * cols_), out.data_.begin());
  return out;
}

Tensor Tensor::gather_rows(std::span<const std::size_t> idx) const {
  Tensor out(idx.size(), cols_);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows_) throw ShapeError("gather row " + std::to_string(idx[i]) + " out of " + shape_str());
    auto src = row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

std::string Tensor::shape_str() const { return seqimpute::shape_str(rows_, cols_); }

std::string shape_str(std::size_t rows, std::size_t cols) {
  return "(" + std::to_string(rows) + ", " + std::to_string(cols) + ")";
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.vec().begin(), t.vec().end(), [](double v) { return std::isfinite(v); });
}

Tensor hconcat(std::span<const Tensor> parts) {
  if (parts.empty()) return {};
  std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("hconcat row mismatch: " + parts[0].shape_str() + " vs " + p.shape_str());
    cols += p.cols();
  }
  Tensor out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double* dst = out.row(r).data();
    for (const auto& p : parts) {
      auto src = p.row(r);
      dst = std::copy(src.begin(), src.end(), dst);
    }
  }
  return out;
}

}  // namespace seqimpute
