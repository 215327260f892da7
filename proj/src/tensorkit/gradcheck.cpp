// SPDX-License-Identifier: Apache-2.0
#include "uniwrv/tensorkit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "uniwrv/errors.hpp"
#include "uniwrv/tensorkit/ops.hpp"
#include "uniwrv/tensorkit/tape.hpp"

namespace uniwrv::tensorkit {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& e : v) e = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor random_away_from_zero(std::mt19937_64& rng, Shape shape, double min_abs) {
  std::uniform_real_distribution<double> mag(min_abs, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (double& e : v) e = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor random_fractional_offsets(std::mt19937_64& rng, Shape shape, int max_whole) {
  std::uniform_int_distribution<int> whole(-max_whole, max_whole);
  std::uniform_real_distribution<double> frac(0.15, 0.85);
  std::vector<double> v(shape_numel(shape));
  for (double& e : v) e = whole(rng) + frac(rng);
  return Tensor(std::move(shape), std::move(v));
}

namespace {

double projected(const GradcheckCase& test, std::span<const Tensor> inputs, const std::vector<double>& proj,
                 FrozenStopGradients& frozen) {
  NoTapeScope no_tape;
  FrozenStopGradientScope pin(frozen);
  Tensor out = test.fn(inputs);
  auto d = out.data();
  double s = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) s += d[i] * proj[i];
  return s;
}

}  // namespace

GradcheckReport run_gradcheck(const std::string& name, const GradcheckCase& test, const GradcheckOptions& opts) {
  GradcheckReport report;
  report.op = name;
  report.trials = opts.trials;
  for (const auto& n : test.input_names) report.per_input.emplace_back(n, 0.0);

  std::mt19937_64 rng(opts.seed);
  for (int trial = 0; trial < opts.trials; ++trial) {
    std::vector<Tensor> inputs = test.make_inputs(rng);
    if (inputs.size() != test.input_names.size()) throw UsageError("gradcheck case '" + name + "': input count");

    // A random projection turns any output into a scalar loss.
    // Stop-gradient values are captured at the unperturbed point and held
    // fixed while differencing, matching what backward() differentiates.
    std::vector<double> proj;
    FrozenStopGradients frozen;
    {
      NoTapeScope no_tape;
      FrozenStopGradientScope capture(frozen);
      Tensor probe = test.fn(inputs);
      Tensor r = random_tensor(rng, probe.shape());
      proj.assign(r.data().begin(), r.data().end());
    }
    frozen.replay = true;

    Tape tape;
    {
      TapeScope scope(tape);
      for (auto& in : inputs) {
        in.zero_grad();
        in.set_requires_grad(true);
      }
      Tensor out = test.fn(inputs);
      Tensor loss = sum(mul(out, Tensor(out.shape(), proj)));
      tape.backward(loss);
    }

    for (std::size_t k = 0; k < inputs.size(); ++k) {
      Tensor& in = inputs[k];
      const std::size_t n = in.numel();
      std::vector<double> analytic(n, 0.0);
      if (in.has_grad()) analytic.assign(in.grad().begin(), in.grad().end());

      std::vector<std::size_t> coords(n);
      std::iota(coords.begin(), coords.end(), std::size_t{0});
      if (n > test.max_coords_per_input) {
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(test.max_coords_per_input);
      }

      double worst_diff = 0.0;
      double scale = 1e-3;
      auto values = in.mutable_data();
      for (std::size_t i : coords) {
        const double saved = values[i];
        values[i] = saved + opts.eps;
        const double plus = projected(test, inputs, proj, frozen);
        values[i] = saved - opts.eps;
        const double minus = projected(test, inputs, proj, frozen);
        values[i] = saved;
        const double numeric = (plus - minus) / (2.0 * opts.eps);
        worst_diff = std::max(worst_diff, std::fabs(numeric - analytic[i]));
        scale = std::max({scale, std::fabs(numeric), std::fabs(analytic[i])});
      }
      const double err = worst_diff / scale;
      report.per_input[k].second = std::max(report.per_input[k].second, err);
      report.max_error = std::max(report.max_error, err);
    }
  }
  report.passed = report.max_error < opts.tol;
  return report;
}

GradcheckRegistry& GradcheckRegistry::global() {
  static GradcheckRegistry* registry = [] {
    auto* r = new GradcheckRegistry();
    register_primitive_gradchecks(*r);
    return r;
  }();
  return *registry;
}

void GradcheckRegistry::add(const std::string& name, GradcheckCase test) { cases_[name] = std::move(test); }

const GradcheckCase& GradcheckRegistry::get(const std::string& name) const {
  auto it = cases_.find(name);
  if (it == cases_.end()) throw UsageError("unknown gradcheck op '" + name + "'");
  return it->second;
}

std::vector<std::string> GradcheckRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [n, _] : cases_) out.push_back(n);
  return out;
}

GradcheckReport GradcheckRegistry::run(const std::string& name, const GradcheckOptions& opts) const {
  return run_gradcheck(name, get(name), opts);
}

}  // namespace uniwrv::tensorkit
