#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace miml {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of doubles (rank 1 to 3 in practice).
///
/// Value type: copies are deep. The only invariant maintained by the class is
/// `shape_size(shape()) == size()`; finiteness is checked at layer boundaries
/// with `require_finite`.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Same data, new shape of equal total size.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(double value);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// All matrix products sum over the inner index in ascending order, so each
// output element is bit-reproducible regardless of loop tiling.

/// a[M×K] · b[K×N]
Tensor matmul(const Tensor& a, const Tensor& b);
/// a[K×M]ᵀ · b[K×N]
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// a[M×K] · b[N×K]ᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// Adds a length-N row vector to every row of an M×N matrix.
Tensor add_row(const Tensor& a, const Tensor& row);
// Column sums of an M×N matrix, accumulated in ascending row order.
Tensor column_sums(const Tensor& a);

double max_abs(const Tensor& a);
bool all_finite(const Tensor& a);
// Throws NumericalError naming `what` if any element is NaN or infinite.
void require_finite(const Tensor& a, const std::string& what);

}  // namespace miml
