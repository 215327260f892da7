// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "uniwrv/tensorkit/tensor.hpp"

namespace uniwrv::tensorkit {

// Receives dL/d(output) and accumulates into the inputs' grad buffers.
using BackwardFn = std::function<void(std::span<const double> grad_out)>;

/// Reverse-mode recording of primitive applications.
///
/// Nodes are appended in execution order, so the list is topologically
/// sorted by construction. A tape belongs to one thread; ops record onto
/// the tape installed on the calling thread by TapeScope.
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    BackwardFn backward;
    bool stop_gradient = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  /// Current thread's active tape, or nullptr (no recording).
  static Tape* current();

  Tensor record(const std::string& op, Shape shape, std::vector<double> values,
                std::span<const Tensor> inputs, BackwardFn backward);
  Tensor record_stop_gradient(const Tensor& input);

  /// Populates grad on every requires_grad leaf reachable from `loss`.
  /// Leaf gradients accumulate across calls; intermediate buffers are freed.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear();

 private:
  std::vector<Node> nodes_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording for the lifetime of the guard.
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Gradient buffer of `t` if it participates in differentiation, else nullptr.
double* grad_sink(const Tensor& t);

}  // namespace uniwrv::tensorkit
