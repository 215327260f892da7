// SPDX-License-Identifier: Apache-2.0
#include "uniwrv/tensorkit/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "uniwrv/errors.hpp"

namespace uniwrv::tensorkit {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : Tensor(shape, std::vector<double>(shape_numel(shape), fill)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw UsageError("access to undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis out of range for shape " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data->size() : 0; }

std::span<const double> Tensor::data() const {
  if (!impl_) throw UsageError("access to undefined tensor");
  return {impl_->data->data(), impl_->data->size()};
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw UsageError("access to undefined tensor");
  return {impl_->data->data(), impl_->data->size()};
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return (*impl_->data)[0];
}

double Tensor::at(std::size_t r, std::size_t c, std::size_t ch) const {
  const auto& s = impl_->shape;
  return (*impl_->data)[(r * s[1] + c) * s[2] + ch];
}

double& Tensor::at(std::size_t r, std::size_t c, std::size_t ch) {
  const auto& s = impl_->shape;
  return (*impl_->data)[(r * s[1] + c) * s[2] + ch];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw UsageError("set_requires_grad on undefined tensor");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!impl_) throw UsageError("access to undefined tensor");
  return {impl_->grad.data(), impl_->grad.size()};
}

std::span<double> Tensor::mutable_grad() {
  auto& g = impl_->ensure_grad();
  return {g.data(), g.size()};
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::clone() const {
  Tensor out(shape(), std::vector<double>(impl_->data->begin(), impl_->data->end()));
  return out;
}

Tensor Tensor::detach() const { return make_alias(*this, shape()); }

bool Tensor::same_storage(const Tensor& other) const {
  return impl_ && other.impl_ && impl_->data == other.impl_->data;
}

Tensor make_result(Shape shape, std::vector<double> values) { return Tensor(std::move(shape), std::move(values)); }

Tensor make_alias(const Tensor& src, Shape shape) {
  if (shape_numel(shape) != src.numel()) {
    throw DimensionError("cannot view " + shape_str(src.shape()) + " as " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = src.impl_->data;
  return Tensor(std::move(impl));
}

void check_finite(std::span<const double> values, const char* where) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + where);
  }
}

}  // namespace uniwrv::tensorkit
