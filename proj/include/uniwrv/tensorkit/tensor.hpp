// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace uniwrv::tensorkit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  // Shared so that reshape and stop_gradient can alias without copying.
  std::shared_ptr<std::vector<double>> data;
  std::vector<double> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  const Tape* producer = nullptr;  // tape that recorded this tensor, if any

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data->size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Copies share storage (handle semantics, like a parameter reference);
/// use clone() for a deep copy. Feature maps are laid out H x W x C and
/// convolution kernels k x k x Cin x Cout.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  // 3-D convenience accessors for H x W x C maps.
  double at(std::size_t r, std::size_t c, std::size_t ch) const;
  double& at(std::size_t r, std::size_t c, std::size_t ch);

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  Tensor clone() const;
  // Shares storage; no gradient linkage.
  Tensor detach() const;
  bool same_storage(const Tensor& other) const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend class Tape;
  friend Tensor make_alias(const Tensor&, Shape);
  friend Tensor make_result(Shape, std::vector<double>);

  std::shared_ptr<detail::TensorImpl> impl_;
};

// Fresh tensor with no gradient linkage.
Tensor make_result(Shape shape, std::vector<double> values);
// Tensor sharing `src` storage under a new shape of equal numel.
Tensor make_alias(const Tensor& src, Shape shape);

/// Throws NumericError if any value is NaN/Inf.
void check_finite(std::span<const double> values, const char* where);

}  // namespace uniwrv::tensorkit
