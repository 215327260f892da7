// SPDX-License-Identifier: Apache-2.0
#include "uniwrv/tensorkit/tape.hpp"

#include "uniwrv/errors.hpp"

namespace uniwrv::tensorkit {

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape::~Tape() { clear(); }

Tape* Tape::current() { return g_current_tape; }

Tensor Tape::record(const std::string& op, Shape shape, std::vector<double> values,
                    std::span<const Tensor> inputs, BackwardFn backward) {
  check_finite(values, op.c_str());
  Tensor out(std::move(shape), std::move(values));
  Node node;
  node.op = op;
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs)
    if (in.defined()) node.inputs.push_back(in.impl_ptr());
  out.impl_->requires_grad = true;
  out.impl_->producer = this;
  node.output = out.impl_;
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return out;
}

Tensor Tape::record_stop_gradient(const Tensor& input) {
  Tensor out = make_alias(input, input.shape());
  out.impl_->producer = this;
  Node node;
  node.op = "stop_gradient";
  node.inputs.push_back(input.impl_ptr());
  node.output = out.impl_;
  node.stop_gradient = true;
  nodes_.push_back(std::move(node));
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() requires a scalar loss");
  }
  if (!loss.requires_grad()) return;  // constant loss: nothing to differentiate
  auto& seed = loss.impl()->ensure_grad();
  seed[0] += 1.0;

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& out = *it->output;
    if (it->stop_gradient || out.grad.empty()) continue;
    it->backward({out.grad.data(), out.grad.size()});
    out.grad.clear();
    out.grad.shrink_to_fit();
  }
  for (const auto& node : nodes_) {
    for (const auto& in : node.inputs) {
      if (in->producer == nullptr && !in->grad.empty()) check_finite(in->grad, "backward");
    }
  }
}

void Tape::clear() {
  for (auto& node : nodes_) {
    node.output->requires_grad = false;
    node.output->producer = nullptr;
    node.output->grad.clear();
  }
  nodes_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_current_tape) { g_current_tape = &tape; }
TapeScope::~TapeScope() { g_current_tape = previous_; }

NoTapeScope::NoTapeScope() : previous_(g_current_tape) { g_current_tape = nullptr; }
NoTapeScope::~NoTapeScope() { g_current_tape = previous_; }

double* grad_sink(const Tensor& t) {
  if (!t.requires_grad()) return nullptr;
  return t.impl()->ensure_grad().data();
}

}  // namespace uniwrv::tensorkit
