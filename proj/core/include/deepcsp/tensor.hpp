#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace deepcsp {

/// Storage precision tag. Values are always held as double; a tensor tagged
/// f32 keeps every element exactly representable as a float (see quantize()).
enum class DType { f64, f32 };

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major real tensor.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, DType dtype = DType::f64);
  Tensor(Shape shape, std::vector<double> data, DType dtype = DType::f64);

  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> v);
  /// Rows given as nested initializer lists; all rows must have equal length.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const;
  bool empty() const { return data_.empty(); }
  DType dtype() const { return dtype_; }

  /// Rows/cols of a rank-2 tensor.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& operator()(std::size_t b, std::size_t r, std::size_t c) {
    return data_[(b * shape_[1] + r) * shape_[2] + c];
  }
  const double& operator()(std::size_t b, std::size_t r, std::size_t c) const {
    return data_[(b * shape_[1] + r) * shape_[2] + c];
  }

  /// Contiguous slice along axis 0 (copy), e.g. one trial of a (B, C, T) batch.
  Tensor slice0(std::size_t index) const;
  Tensor reshaped(Shape shape) const;

  /// Rounds every element to the nearest float and tags the tensor f32.
  void quantize();
  Tensor cast(DType dtype) const;

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
  DType dtype_ = DType::f64;
};

/// Throws ShapeError naming `what` if the two shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

// Eager helpers used outside the tape.
Tensor transpose(const Tensor& m);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(double s, const Tensor& a);
double trace(const Tensor& m);
double frobenius_norm(const Tensor& a);
double max_abs(const Tensor& a);
/// Symmetric part (A + Aᵀ)/2 of a square matrix.
Tensor symmetrize(const Tensor& m);
/// Stacks rank-2 tensors of equal shape into a (B, R, C) tensor.
Tensor stack(std::span<const Tensor> items);

}  // namespace deepcsp
