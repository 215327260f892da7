// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "uniwrv/tensorkit/parameters.hpp"
#include "uniwrv/tensorkit/tensor.hpp"
#include "uniwrv/wpgm.hpp"

// Dynamic routing aggregation: flow-aligned multi-frame deformable attention
// whose convolutions are modulated per sample by a path controller.
namespace uniwrv::dra {

using tensorkit::ParameterList;
using tensorkit::Tensor;

/// P rank-1 kernel modifiers. Row i of u, v, c, o holds the four factors of path i.
struct ModifySet {
  Tensor u, v;  // [P, k]
  Tensor c;     // [P, Cin]
  Tensor o;     // [P, Cout]

  static ModifySet identity(std::size_t paths, std::size_t k, std::size_t cin, std::size_t cout);
  std::size_t paths() const { return u.dim(0); }
  std::size_t parameter_count() const { return u.numel() + v.numel() + c.numel() + o.numel(); }
};

/// A 3x3 (or 1x1) convolution with one base kernel and a ModifySet.
struct RoutedConv {
  Tensor weight;  // [k, k, Cin, Cout]
  Tensor bias;    // [Cout]
  ModifySet mods;

  static RoutedConv make(std::size_t k, std::size_t cin, std::size_t cout, std::size_t paths, std::mt19937_64& rng,
                         bool zero_init = false);
  std::size_t k() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(2); }
  std::size_t out_channels() const { return weight.dim(3); }
  Tensor forward(const Tensor& x, const Tensor& alpha) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

/// Kernel of `rc` under routing weights alpha (soft simplex or one-hot).
Tensor route_kernel(const RoutedConv& rc, const Tensor& alpha);

struct FlowField {
  Tensor prev;  // O_{t-1 -> t}, [h, w, 2]
  Tensor next;  // O_{t+1 -> t}
};

/// Five convolutions with ReLU between them, shared across both directions.
/// Input is the channel concat of (adjacent, middle) frames.
struct FlowEstimator {
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

  static FlowEstimator make(std::size_t hidden, std::mt19937_64& rng);
  Tensor predict(const Tensor& adjacent, const Tensor& middle) const;
  void collect(ParameterList& out, const std::string& prefix) const;
};

FlowField estimate_flow(const Tensor& d_prev, const Tensor& d_mid, const Tensor& d_next, const FlowEstimator& net);

Tensor warp_feature(const Tensor& features, const Tensor& flow);

/// Tiles each prior to `target_len` and averages them elementwise.
Tensor aggregate_prior(std::span<const wpgm::PriorRecord> records, std::size_t target_len);

/// Pooled-feature to path-logit map (a 1x1 convolution on the pooled vector).
struct PathController {
  Tensor weight;  // [C_dra, P]
  Tensor bias;    // [P]

  static PathController make(std::size_t channels, std::size_t paths, std::mt19937_64& rng);
  void collect(ParameterList& out, const std::string& prefix) const;
};

/// Pre-softmax path scores: linear(GAP(M_n + broadcast(agg_prior))).
Tensor path_logits(const Tensor& fused, const Tensor& agg_prior, const PathController& ctrl);
/// softmax(path_logits(...)).
Tensor path_controller(const Tensor& fused, const Tensor& agg_prior, const PathController& ctrl);

/// Gumbel-softmax with a straight-through one-hot forward value.
Tensor harden(const Tensor& alpha, double temperature, std::mt19937_64& rng);
/// Same with caller-supplied Gumbel noise.
Tensor harden_with_noise(const Tensor& alpha, const Tensor& gumbel, double temperature);

struct DmaConfig {
  std::size_t heads = 2;   // M
  std::size_t frames = 3;  // T
  std::size_t points = 4;  // K
  std::size_t layers = 2;  // N
  std::size_t paths = 3;   // P

  std::size_t slots() const { return heads * frames * points; }
  /// Throws ConfigError for T != 3, zero sizes, or widths not divisible by M.
  void validate(std::size_t channels) const;
};

struct DraLayerParams {
  PathController controller;
  RoutedConv attention;  // 3*C -> M*T*K
  RoutedConv offsets;    // 3*C -> 2*M*T*K, zero-initialised
  RoutedConv values;     // 3*C -> T*C
  RoutedConv output;     // C -> C, zero-initialised

  static DraLayerParams make(std::size_t channels, const DmaConfig& cfg, std::mt19937_64& rng);
  void collect(ParameterList& out, const std::string& prefix) const;
  std::vector<const RoutedConv*> routed() const { return {&attention, &offsets, &values, &output}; }
};

struct DmaProjection {
  Tensor weights;  // [h, w, M*T*K], softmax per head over T*K
  Tensor offsets;  // [h, w, 2*M*T*K]
  Tensor values;   // [h, w, T*C]
};

DmaProjection dma_project(const Tensor& fused, const Tensor& prev_warped, const Tensor& next_warped,
                          const Tensor& prev, const Tensor& next, const DraLayerParams& params, const Tensor& alpha,
                          const DmaConfig& cfg);

/// Sampling followed by the routed output projection.
Tensor attend(const DmaProjection& proj, const DraLayerParams& params, const Tensor& alpha, const DmaConfig& cfg);

struct HardRouting {
  bool enabled = false;
  double temperature = 1.0;
  std::mt19937_64* rng = nullptr;  // null: noiseless argmax, as at inference
};

struct DraStep {
  Tensor next;   // M_{n+1}
  Tensor alpha;  // routing weights actually applied
  Tensor soft_alpha;
};

DraStep dra_layer(const Tensor& fused, const Tensor& prev, const Tensor& next, const Tensor& prev_warped,
                  const Tensor& next_warped, std::span<const wpgm::PriorRecord> records, const DraLayerParams& params,
                  const DmaConfig& cfg, const HardRouting& hard = {});

struct RouteTrace {
  std::vector<std::vector<double>> alphas;  // one simplex vector per DRA layer
  std::vector<std::size_t> prior_indices;   // one per extraction WPGM layer
};

struct WarpLoss {
  Tensor value;
  bool skipped = false;  // no ground truth supplied
};

/// mse(G_mid, warp(G_prev, O_prev)) + mse(G_mid, warp(G_next, O_next)).
WarpLoss warp_loss(const Tensor& g_prev, const Tensor& g_mid, const Tensor& g_next, const FlowField& flows);

void register_gradchecks();

}  // namespace uniwrv::dra
