#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "latentflow/errors.hpp"

namespace latentflow {

// Dense row-major tensor of 64-bit reals. Rank is dynamic but in practice
// everything in this codebase is rank 1 or 2.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0)
      : dims_(std::move(dims)),
        data_(std::accumulate(dims_.begin(), dims_.end(), std::size_t{1},
                              std::multiplies<>()),
              fill) {}

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor vector(std::size_t n, double fill = 0.0) {
    return Tensor({n}, fill);
  }

  std::size_t rank() const { return dims_.size(); }
  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t dim(std::size_t i) const { return dims_[i]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return dims_.empty() ? 0 : dims_[0]; }
  std::size_t cols() const { return dims_.size() < 2 ? 1 : dims_[1]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  const double* row(std::size_t r) const { return data_.data() + r * cols(); }
  double* row(std::size_t r) { return data_.data() + r * cols(); }

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor& other) const {
    return dims_ == other.dims_ && data_ == other.data_;
  }

  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

 private:
  std::vector<std::size_t> dims_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const std::string& what) {
  if (!a.same_shape(b)) throw ContractError("shape mismatch in " + what);
}

}  // namespace latentflow
