#pragma once

#include <Eigen/Core>

#include <string>
#include <vector>

namespace wf {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

std::string shape_str(const Shape& s);
Index shape_numel(const Shape& s);

// Dense n-dimensional array of doubles with row-major layout, backed by a
// flat Eigen array. Rank and sizes live in `shape()`; all math goes through
// `array()` or the 2-D matrix views.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-initialized
  Tensor(Shape shape, Eigen::ArrayXd data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value) { return full({}, value); }
  static Tensor from(Shape shape, const std::vector<double>& values);

  const Shape& shape() const { return shape_; }
  Index ndim() const { return static_cast<Index>(shape_.size()); }
  Index numel() const { return data_.size(); }
  Index dim(Index i) const;

  Eigen::ArrayXd& array() { return data_; }
  const Eigen::ArrayXd& array() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](Index flat) { return data_[flat]; }
  double operator[](Index flat) const { return data_[flat]; }

  // Multi-index access (bounds-checked); mostly for tests and small loops.
  double& at(std::initializer_list<Index> idx);
  double at(std::initializer_list<Index> idx) const;

  // Scalar tensors (shape [] or [1]).
  double scalar_value() const;

  // 2-D matrix view of the buffer as `rows x cols`; total size must match.
  MapRM as_matrix(Index rows, Index cols);
  ConstMapRM as_matrix(Index rows, Index cols) const;
  // Shorthand for rank-2 tensors.
  MapRM mat();
  ConstMapRM mat() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const { return data_.isFinite().all(); }

  Tensor reshaped(Shape shape) const;

 private:
  Index flat_index(std::initializer_list<Index> idx) const;

  Shape shape_;
  Eigen::ArrayXd data_;
};

}  // namespace wf
