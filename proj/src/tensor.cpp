#include "wf/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace wf {

std::string shape_str(const Shape& s) {
  std::ostringstream out;
  out << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out << ',';
    out << s[i];
  }
  out << ']';
  return out.str();
}

Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_ = Eigen::ArrayXd::Zero(shape_numel(shape_));
}

Tensor::Tensor(Shape shape, Eigen::ArrayXd data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_))
    throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                " does not match shape " + shape_str(shape_));
}

Tensor Tensor::full(Shape shape, double value) {
  Index n = shape_numel(shape);
  return Tensor(std::move(shape), Eigen::ArrayXd::Constant(n, value));
}

Tensor Tensor::from(Shape shape, const std::vector<double>& values) {
  Index n = shape_numel(shape);
  if (static_cast<Index>(values.size()) != n)
    throw std::invalid_argument("tensor init list size " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  Eigen::ArrayXd data(n);
  for (Index i = 0; i < n; ++i) data[i] = values[static_cast<size_t>(i)];
  return Tensor(std::move(shape), std::move(data));
}

Index Tensor::dim(Index i) const {
  if (i < 0 || i >= ndim())
    throw std::out_of_range("dim index " + std::to_string(i) + " out of range for shape " + shape_str(shape_));
  return shape_[static_cast<size_t>(i)];
}

Index Tensor::flat_index(std::initializer_list<Index> idx) const {
  if (static_cast<Index>(idx.size()) != ndim())
    throw std::invalid_argument("index rank " + std::to_string(idx.size()) +
                                " does not match tensor shape " + shape_str(shape_));
  Index flat = 0;
  size_t k = 0;
  for (Index i : idx) {
    Index d = shape_[k];
    if (i < 0 || i >= d)
      throw std::out_of_range("index " + std::to_string(i) + " out of range for axis " + std::to_string(k) +
                              " of shape " + shape_str(shape_));
    flat = flat * d + i;
    ++k;
  }
  return flat;
}

double& Tensor::at(std::initializer_list<Index> idx) { return data_[flat_index(idx)]; }
double Tensor::at(std::initializer_list<Index> idx) const { return data_[flat_index(idx)]; }

double Tensor::scalar_value() const {
  if (numel() != 1)
    throw std::invalid_argument("scalar_value on tensor of shape " + shape_str(shape_));
  return data_[0];
}

MapRM Tensor::as_matrix(Index rows, Index cols) {
  if (rows * cols != numel())
    throw std::invalid_argument("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                                " does not cover tensor of shape " + shape_str(shape_));
  return MapRM(data_.data(), rows, cols);
}

ConstMapRM Tensor::as_matrix(Index rows, Index cols) const {
  if (rows * cols != numel())
    throw std::invalid_argument("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                                " does not cover tensor of shape " + shape_str(shape_));
  return ConstMapRM(data_.data(), rows, cols);
}

MapRM Tensor::mat() {
  if (ndim() != 2) throw std::invalid_argument("mat() requires rank-2 tensor, got " + shape_str(shape_));
  return as_matrix(shape_[0], shape_[1]);
}

ConstMapRM Tensor::mat() const {
  if (ndim() != 2) throw std::invalid_argument("mat() requires rank-2 tensor, got " + shape_str(shape_));
  return as_matrix(shape_[0], shape_[1]);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel())
    throw std::invalid_argument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

}  // namespace wf
