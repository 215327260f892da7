// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "uniwrv/tensorkit/tensor.hpp"

namespace uniwrv::tensorkit {

/// One differentiable function under test.
///
/// `make_inputs` draws a fresh set of named inputs per trial; the generator
/// is responsible for keeping them away from kinks (integer bilinear
/// coordinates, |x| = 0 for abs/relu, argmin ties). `fn` may return any
/// shape; the checker contracts it with a random projection.
struct GradcheckCase {
  std::vector<std::string> input_names;
  std::function<std::vector<Tensor>(std::mt19937_64&)> make_inputs;
  std::function<Tensor(std::span<const Tensor>)> fn;
  // Inputs with more entries than this are checked on a random subset.
  std::size_t max_coords_per_input = 48;
};

struct GradcheckReport {
  std::string op;
  int trials = 0;
  // Worst error per input across trials, in input_names order.
  std::vector<std::pair<std::string, double>> per_input;
  double max_error = 0.0;
  bool passed = false;
};

struct GradcheckOptions {
  int trials = 10;
  double eps = 1e-5;
  double tol = 1e-4;
  std::uint64_t seed = 1234;
};

/// Central finite differences against the tape gradient.
///
/// Error for one input is max_i |analytic_i - numeric_i| divided by
/// max(max_i |numeric_i|, max_i |analytic_i|, 1e-3), i.e. relative to the
/// gradient's scale with a floor so exactly-zero gradients are not divided
/// by zero.
GradcheckReport run_gradcheck(const std::string& name, const GradcheckCase& test, const GradcheckOptions& opts);

class GradcheckRegistry {
 public:
  /// Process-wide registry, pre-populated with the tensorkit primitives.
  static GradcheckRegistry& global();

  void add(const std::string& name, GradcheckCase test);
  bool contains(const std::string& name) const { return cases_.count(name) != 0; }
  const GradcheckCase& get(const std::string& name) const;  // throws UsageError if unknown
  std::vector<std::string> names() const;

  GradcheckReport run(const std::string& name, const GradcheckOptions& opts) const;

 private:
  std::map<std::string, GradcheckCase> cases_;
};

void register_primitive_gradchecks(GradcheckRegistry& registry);

// Helpers shared by the per-module case generators.
Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0);
// Values with |v| in [min_abs, 1], random sign.
Tensor random_away_from_zero(std::mt19937_64& rng, Shape shape, double min_abs = 0.1);
// Sub-pixel displacements whose fractional part stays in [0.15, 0.85].
Tensor random_fractional_offsets(std::mt19937_64& rng, Shape shape, int max_whole = 1);

}  // namespace uniwrv::tensorkit
