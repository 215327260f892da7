// SPDX-License-Identifier: Apache-2.0
#include "uniwrv/dra.hpp"
#include "uniwrv/tensorkit/gradcheck.hpp"
#include "uniwrv/tensorkit/ops.hpp"

namespace uniwrv::dra {

namespace tk = tensorkit;

namespace {

const DmaConfig kSmall{2, 3, 2, 1, 3};
constexpr std::size_t kC = 4;

Tensor simplex(std::mt19937_64& rng, std::size_t n) {
  Tensor t = tk::random_tensor(rng, {n}, 0.1, 1.0);
  double s = 0.0;
  for (double v : t.data()) s += v;
  for (double& v : t.mutable_data()) v /= s;
  return t;
}

// Layer parameters with every zero-initialised head and identity modifier
// replaced by random values, so the check exercises all paths.
DraLayerParams randomized_layer(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  DraLayerParams p = DraLayerParams::make(kC, kSmall, rng);
  for (RoutedConv* rc : {&p.attention, &p.offsets, &p.values, &p.output}) {
    for (Tensor* m : {&rc->mods.u, &rc->mods.v, &rc->mods.c, &rc->mods.o}) *m = tk::random_tensor(rng, m->shape(), 0.5, 1.5);
    rc->bias = tk::random_tensor(rng, rc->bias.shape(), -0.1, 0.1);
  }
  p.offsets.weight = tk::random_tensor(rng, p.offsets.weight.shape(), -0.08, 0.08);
  p.output.weight = tk::random_tensor(rng, p.output.weight.shape(), -0.2, 0.2);
  return p;
}

}  // namespace

void register_gradchecks() {
  auto& registry = tk::GradcheckRegistry::global();

  registry.add("routed_conv",
               {{"x", "weight", "u", "v", "c_in", "c_out", "alpha"},
                [](std::mt19937_64& rng) {
                  const std::size_t P = 3;
                  return std::vector<Tensor>{tk::random_tensor(rng, {4, 4, 2}), tk::random_tensor(rng, {3, 3, 2, 3}),
                                             tk::random_tensor(rng, {P, 3}, 0.5, 1.5),
                                             tk::random_tensor(rng, {P, 3}, 0.5, 1.5),
                                             tk::random_tensor(rng, {P, 2}, 0.5, 1.5),
                                             tk::random_tensor(rng, {P, 3}, 0.5, 1.5), simplex(rng, P)};
                },
                [](std::span<const Tensor> in) {
                  RoutedConv rc{in[1], Tensor({3}, 0.0), ModifySet{in[2], in[3], in[4], in[5]}};
                  return rc.forward(in[0], in[6]);
                },
                96});

  registry.add("path_controller", {{"fused", "prior", "weight", "bias"},
                                   [](std::mt19937_64& rng) {
                                     return std::vector<Tensor>{
                                         tk::random_tensor(rng, {3, 3, 4}), tk::random_tensor(rng, {4}),
                                         tk::random_tensor(rng, {4, 3}), tk::random_tensor(rng, {3})};
                                   },
                                   [](std::span<const Tensor> in) {
                                     return path_controller(in[0], in[1], PathController{in[2], in[3]});
                                   }});

  registry.add("aggregate_prior", {{"q0", "q1"},
                                   [](std::mt19937_64& rng) {
                                     return std::vector<Tensor>{tk::random_tensor(rng, {2}), tk::random_tensor(rng, {4})};
                                   },
                                   [](std::span<const Tensor> in) {
                                     std::vector<wpgm::PriorRecord> recs(2);
                                     recs[0].prior = in[0];
                                     recs[1].prior = in[1];
                                     return aggregate_prior(recs, 8);
                                   }});

  registry.add("flow_estimator",
               {{"adjacent", "middle", "head"},
                [](std::mt19937_64& rng) {
                  return std::vector<Tensor>{tk::random_tensor(rng, {4, 4, 3}, 0, 1), tk::random_tensor(rng, {4, 4, 3}, 0, 1),
                                             tk::random_tensor(rng, {3, 3, 6, 2}, -0.3, 0.3)};
                },
                [](std::span<const Tensor> in) {
                  std::mt19937_64 fixed(5);
                  FlowEstimator net = FlowEstimator::make(6, fixed);
                  net.weights.back() = in[2];
                  return net.predict(in[0], in[1]);
                },
                96});

  registry.add("warp_loss", {{"g_prev", "g_mid", "g_next", "o_prev", "o_next"},
                             [](std::mt19937_64& rng) {
                               return std::vector<Tensor>{tk::random_tensor(rng, {4, 5, 3}, 0, 1),
                                                          tk::random_tensor(rng, {4, 5, 3}, 0, 1),
                                                          tk::random_tensor(rng, {4, 5, 3}, 0, 1),
                                                          tk::random_fractional_offsets(rng, {4, 5, 2}, 1),
                                                          tk::random_fractional_offsets(rng, {4, 5, 2}, 1)};
                             },
                             [](std::span<const Tensor> in) {
                               return warp_loss(in[0], in[1], in[2], FlowField{in[3], in[4]}).value;
                             }});

  registry.add("dra_layer",
               {{"fused", "prev", "next", "prev_warped", "next_warped", "prior", "controller", "attention_w",
                 "attention_cin", "offsets_w", "values_w", "values_cout", "output_w", "output_u"},
                [](std::mt19937_64& rng) {
                  DraLayerParams p = randomized_layer(rng());
                  std::vector<Tensor> in;
                  for (int i = 0; i < 5; ++i) in.push_back(tk::random_tensor(rng, {4, 4, kC}));
                  in.push_back(tk::random_tensor(rng, {kC}, -0.5, 0.5));
                  for (const Tensor& t : {p.controller.weight, p.attention.weight, p.attention.mods.c, p.offsets.weight,
                                          p.values.weight, p.values.mods.o, p.output.weight, p.output.mods.u})
                    in.push_back(t.clone());
                  return in;
                },
                [](std::span<const Tensor> in) {
                  DraLayerParams p = randomized_layer(17);
                  p.controller.weight = in[6];
                  p.attention.weight = in[7];
                  p.attention.mods.c = in[8];
                  p.offsets.weight = in[9];
                  p.values.weight = in[10];
                  p.values.mods.o = in[11];
                  p.output.weight = in[12];
                  p.output.mods.u = in[13];
                  std::vector<wpgm::PriorRecord> recs(1);
                  recs[0].prior = in[5];
                  return dra_layer(in[0], in[1], in[2], in[3], in[4], recs, p, kSmall).next;
                },
                64});
}

}  // namespace uniwrv::dra
