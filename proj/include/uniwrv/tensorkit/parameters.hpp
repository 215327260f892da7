// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "uniwrv/tensorkit/tensor.hpp"

namespace uniwrv::tensorkit {

using NamedTensor = std::pair<std::string, Tensor>;
using ParameterList = std::vector<NamedTensor>;

// Uniform(-b, b) with b = gain * sqrt(6 / fan_in); values rounded to float.
Tensor kaiming_uniform(std::mt19937_64& rng, Shape shape, std::size_t fan_in, double gain = 1.0);
Tensor uniform(std::mt19937_64& rng, Shape shape, double lo, double hi);

/// Rounds every value to the nearest binary32, in place.
void round_to_float(Tensor& t);

void mark_trainable(ParameterList& params);
void zero_grads(ParameterList& params);

}  // namespace uniwrv::tensorkit
