// SPDX-License-Identifier: Apache-2.0
#include "uniwrv/dra.hpp"

#include <cmath>
#include <limits>

#include "uniwrv/errors.hpp"
#include "uniwrv/tensorkit/ops.hpp"

namespace uniwrv::dra {

namespace tk = tensorkit;

ModifySet ModifySet::identity(std::size_t paths, std::size_t k, std::size_t cin, std::size_t cout) {
  if (paths == 0) throw ConfigError("routed convolution needs at least one path");
  return {Tensor({paths, k}, 1.0), Tensor({paths, k}, 1.0), Tensor({paths, cin}, 1.0), Tensor({paths, cout}, 1.0)};
}

RoutedConv RoutedConv::make(std::size_t k, std::size_t cin, std::size_t cout, std::size_t paths, std::mt19937_64& rng,
                            bool zero_init) {
  RoutedConv rc;
  rc.weight = zero_init ? Tensor({k, k, cin, cout}, 0.0) : tk::kaiming_uniform(rng, {k, k, cin, cout}, k * k * cin);
  rc.bias = Tensor({cout}, 0.0);
  rc.mods = ModifySet::identity(paths, k, cin, cout);
  return rc;
}

Tensor route_kernel(const RoutedConv& rc, const Tensor& alpha) {
  return tk::route_kernel(rc.weight, rc.mods.u, rc.mods.v, rc.mods.c, rc.mods.o, alpha);
}

Tensor RoutedConv::forward(const Tensor& x, const Tensor& alpha) const {
  return tk::conv2d(x, route_kernel(*this, alpha), bias, 1, static_cast<int>(k() / 2));
}

void RoutedConv::collect(ParameterList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
  out.emplace_back(prefix + ".mod_u", mods.u);
  out.emplace_back(prefix + ".mod_v", mods.v);
  out.emplace_back(prefix + ".mod_cin", mods.c);
  out.emplace_back(prefix + ".mod_cout", mods.o);
}

FlowEstimator FlowEstimator::make(std::size_t hidden, std::mt19937_64& rng) {
  FlowEstimator net;
  const std::size_t widths[] = {6, hidden, hidden, hidden, hidden, 2};
  for (int i = 0; i < 5; ++i) {
    const std::size_t cin = widths[i], cout = widths[i + 1];
    net.weights.push_back(i == 4 ? Tensor({3, 3, cin, cout}, 0.0) : tk::kaiming_uniform(rng, {3, 3, cin, cout}, 9 * cin));
    net.biases.emplace_back(tk::Shape{cout}, 0.0);
  }
  return net;
}

Tensor FlowEstimator::predict(const Tensor& adjacent, const Tensor& middle) const {
  if (adjacent.shape() != middle.shape() || adjacent.rank() != 3 || adjacent.dim(2) != 3) {
    throw DimensionError("flow estimator: frames " + tk::shape_str(adjacent.shape()) + " and " +
                         tk::shape_str(middle.shape()) + " must be matching [h,w,3]");
  }
  const Tensor pair[] = {adjacent, middle};
  Tensor h = tk::concat_channels(pair);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    h = tk::conv2d(h, weights[i], biases[i], 1, 1);
    if (i + 1 < weights.size()) h = tk::relu(h);
  }
  return h;
}

void FlowEstimator::collect(ParameterList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    out.emplace_back(prefix + ".conv" + std::to_string(i) + ".weight", weights[i]);
    out.emplace_back(prefix + ".conv" + std::to_string(i) + ".bias", biases[i]);
  }
}

FlowField estimate_flow(const Tensor& d_prev, const Tensor& d_mid, const Tensor& d_next, const FlowEstimator& net) {
  if (d_prev.shape() != d_mid.shape() || d_next.shape() != d_mid.shape()) {
    throw DimensionError("estimate_flow: frame resolutions differ");
  }
  return {net.predict(d_prev, d_mid), net.predict(d_next, d_mid)};
}

Tensor warp_feature(const Tensor& features, const Tensor& flow) {
  if (features.rank() != 3 || flow.rank() != 3 || features.dim(0) != flow.dim(0) || features.dim(1) != flow.dim(1)) {
    throw DimensionError("warp_feature: feature grid " + tk::shape_str(features.shape()) + " vs flow " +
                         tk::shape_str(flow.shape()));
  }
  return tk::warp(features, flow);
}

Tensor aggregate_prior(std::span<const wpgm::PriorRecord> records, std::size_t target_len) {
  if (records.empty()) throw UsageError("aggregate_prior: no records");
  Tensor total;
  for (const auto& rec : records) {
    const std::size_t n = rec.prior.numel();
    if (n == 0 || target_len % n != 0) {
      throw ConfigError("aggregate_prior: prior of length " + std::to_string(n) + " does not tile to " +
                        std::to_string(target_len));
    }
    Tensor tiled = n == target_len ? rec.prior : tk::tile(rec.prior, target_len);
    total = total.defined() ? tk::add(total, tiled) : tiled;
  }
  if (records.size() == 1) return total;
  return tk::scale(total, 1.0 / static_cast<double>(records.size()));
}

PathController PathController::make(std::size_t channels, std::size_t paths, std::mt19937_64& rng) {
  return {tk::kaiming_uniform(rng, {channels, paths}, channels), Tensor({paths}, 0.0)};
}

void PathController::collect(ParameterList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

Tensor path_logits(const Tensor& fused, const Tensor& agg_prior, const PathController& ctrl) {
  if (fused.rank() != 3 || agg_prior.numel() != fused.dim(2) || ctrl.weight.dim(0) != fused.dim(2)) {
    throw DimensionError("path_controller: fused " + tk::shape_str(fused.shape()) + ", prior " +
                         tk::shape_str(agg_prior.shape()) + ", controller " + tk::shape_str(ctrl.weight.shape()));
  }
  Tensor pooled = tk::global_avg_pool(tk::broadcast_add(fused, agg_prior));
  return tk::linear(pooled, ctrl.weight, ctrl.bias);
}

Tensor path_controller(const Tensor& fused, const Tensor& agg_prior, const PathController& ctrl) {
  return tk::softmax(path_logits(fused, agg_prior, ctrl));
}

Tensor harden_with_noise(const Tensor& alpha, const Tensor& gumbel, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("hard routing temperature must be > 0");
  if (gumbel.numel() != alpha.numel()) throw DimensionError("harden: noise length");
  Tensor logits = tk::scale(tk::add(tk::log(alpha), tk::reshape(gumbel, alpha.shape())), 1.0 / temperature);
  Tensor soft = tk::softmax(logits);
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.numel(); ++i)
    if (logits[i] > logits[best]) best = i;
  Tensor hard(alpha.shape(), 0.0);
  hard.mutable_data()[best] = 1.0;
  return tk::straight_through(hard, soft);
}

Tensor harden(const Tensor& alpha, double temperature, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(std::numeric_limits<double>::min(), 1.0);
  std::vector<double> g(alpha.numel());
  for (double& e : g) e = -std::log(-std::log(unit(rng)));
  return harden_with_noise(alpha, Tensor(alpha.shape(), std::move(g)), temperature);
}

void DmaConfig::validate(std::size_t channels) const {
  if (frames != 3) throw ConfigError("the attention window must hold 3 frames, got " + std::to_string(frames));
  if (heads == 0 || points == 0 || layers == 0 || paths == 0) throw ConfigError("attention sizes must be positive");
  if (channels % heads != 0) {
    throw ConfigError(std::to_string(channels) + " fusion channels do not split over " + std::to_string(heads) +
                      " heads");
  }
}

DraLayerParams DraLayerParams::make(std::size_t channels, const DmaConfig& cfg, std::mt19937_64& rng) {
  cfg.validate(channels);
  const std::size_t C = channels, P = cfg.paths;
  DraLayerParams p;
  p.controller = PathController::make(C, P, rng);
  p.attention = RoutedConv::make(3, 3 * C, cfg.slots(), P, rng);
  p.offsets = RoutedConv::make(3, 3 * C, 2 * cfg.slots(), P, rng, true);
  p.values = RoutedConv::make(3, 3 * C, cfg.frames * C, P, rng);
  p.output = RoutedConv::make(3, C, C, P, rng, true);
  return p;
}

void DraLayerParams::collect(ParameterList& out, const std::string& prefix) const {
  controller.collect(out, prefix + ".controller");
  attention.collect(out, prefix + ".attention");
  offsets.collect(out, prefix + ".offsets");
  values.collect(out, prefix + ".values");
  output.collect(out, prefix + ".output");
}

DmaProjection dma_project(const Tensor& fused, const Tensor& prev_warped, const Tensor& next_warped,
                          const Tensor& prev, const Tensor& next, const DraLayerParams& params, const Tensor& alpha,
                          const DmaConfig& cfg) {
  cfg.validate(fused.dim(2));
  const Tensor guide[] = {prev_warped, fused, next_warped};
  const Tensor source[] = {fused, prev, next};
  Tensor g = tk::concat_channels(guide);
  DmaProjection out;
  out.weights = tk::softmax_groups(params.attention.forward(g, alpha), cfg.frames * cfg.points);
  out.offsets = params.offsets.forward(g, alpha);
  out.values = params.values.forward(tk::concat_channels(source), alpha);
  return out;
}

Tensor attend(const DmaProjection& proj, const DraLayerParams& params, const Tensor& alpha, const DmaConfig& cfg) {
  Tensor sampled = tk::deformable_attention(proj.weights, proj.offsets, proj.values,
                                            tk::AttentionLayout{cfg.heads, cfg.frames, cfg.points});
  return params.output.forward(sampled, alpha);
}

DraStep dra_layer(const Tensor& fused, const Tensor& prev, const Tensor& next, const Tensor& prev_warped,
                  const Tensor& next_warped, std::span<const wpgm::PriorRecord> records, const DraLayerParams& params,
                  const DmaConfig& cfg, const HardRouting& hard) {
  DraStep step;
  Tensor agg = aggregate_prior(records, fused.dim(2));
  step.soft_alpha = path_controller(fused, agg, params.controller);
  step.alpha = step.soft_alpha;
  if (hard.enabled) {
    step.alpha = hard.rng ? harden(step.soft_alpha, hard.temperature, *hard.rng)
                          : harden_with_noise(step.soft_alpha, Tensor(step.soft_alpha.shape(), 0.0), hard.temperature);
  }
  DmaProjection proj = dma_project(fused, prev_warped, next_warped, prev, next, params, step.alpha, cfg);
  step.next = tk::add(fused, attend(proj, params, step.alpha, cfg));
  return step;
}

WarpLoss warp_loss(const Tensor& g_prev, const Tensor& g_mid, const Tensor& g_next, const FlowField& flows) {
  if (!g_prev.defined() || !g_mid.defined() || !g_next.defined()) return {Tensor::scalar(0.0), true};
  Tensor a = tk::mse(g_mid, tk::warp(g_prev, flows.prev));
  Tensor b = tk::mse(g_mid, tk::warp(g_next, flows.next));
  return {tk::add(a, b), false};
}

}  // namespace uniwrv::dra
