// SPDX-License-Identifier: Apache-2.0
#include "uniwrv/tensorkit/parameters.hpp"

#include <cmath>

namespace uniwrv::tensorkit {

Tensor uniform(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& e : v) e = static_cast<float>(dist(rng));
  return Tensor(std::move(shape), std::move(v));
}

Tensor kaiming_uniform(std::mt19937_64& rng, Shape shape, std::size_t fan_in, double gain) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in));
  return uniform(rng, std::move(shape), -bound, bound);
}

void round_to_float(Tensor& t) {
  for (double& v : t.mutable_data()) v = static_cast<double>(static_cast<float>(v));
}

void mark_trainable(ParameterList& params) {
  for (auto& [_, t] : params) t.set_requires_grad(true);
}

void zero_grads(ParameterList& params) {
  for (auto& [_, t] : params) t.zero_grad();
}

}  // namespace uniwrv::tensorkit
