// SPDX-License-Identifier: Apache-2.0
#include "uniwrv/tensorkit/gradcheck.hpp"
#include "uniwrv/tensorkit/ops.hpp"
#include "uniwrv/wpgm.hpp"

namespace uniwrv::wpgm {

namespace tk = tensorkit;

void register_gradchecks() {
  auto& registry = tk::GradcheckRegistry::global();

  registry.add("prior_vector_loss",
               {{"q0", "g0", "q1", "g1"},
                [](std::mt19937_64& rng) {
                  return std::vector<Tensor>{tk::random_away_from_zero(rng, {4}), tk::random_away_from_zero(rng, {4}),
                                             tk::random_away_from_zero(rng, {6}), tk::random_away_from_zero(rng, {6})};
                },
                [](std::span<const Tensor> in) {
                  std::vector<PriorRecord> recs{{0, in[1], in[0], 0, Tensor{}}, {1, in[3], in[2], 0, Tensor{}}};
                  return prior_vector_loss(recs, 0.25).value;
                }});

  registry.add("prior_contrastive_loss",
               {{"bank", "latent"},
                [](std::mt19937_64& rng) {
                  return std::vector<Tensor>{tk::random_away_from_zero(rng, {5, 4}), tk::random_away_from_zero(rng, {4})};
                },
                [](std::span<const Tensor> in) {
                  const std::size_t positive = 2;
                  std::vector<PriorRecord> recs{{0, in[1], tk::select_row(in[0], positive), positive, in[0]}};
                  return prior_contrastive_loss(recs, 0.07);
                }});

  registry.add("embed", {{"f", "w1", "b1", "w2", "b2"},
                         [](std::mt19937_64& rng) {
                           return std::vector<Tensor>{tk::random_tensor(rng, {3, 4, 3}), tk::random_tensor(rng, {3, 3}),
                                                      tk::random_tensor(rng, {3}), tk::random_tensor(rng, {3, 3}),
                                                      tk::random_tensor(rng, {3})};
                         },
                         [](std::span<const Tensor> in) {
                           MappingNet net{in[1], in[2], in[3], in[4]};
                           return embed(in[0], net);
                         }});

  registry.add("wpgm_forward",
               {{"f", "bank"},
                [](std::mt19937_64& rng) {
                  return std::vector<Tensor>{tk::random_tensor(rng, {4, 4, 2}), tk::random_tensor(rng, {3, 2}, -0.5, 0.5)};
                },
                [](std::span<const Tensor> in) {
                  std::mt19937_64 fixed(7);
                  MappingNet net = MappingNet::random(2, fixed);
                  ResidualBlock block(2, fixed);
                  PriorBank bank{0, in[1], std::vector<std::uint64_t>(in[1].dim(0), 0)};
                  return wpgm_forward(in[0], bank, net, block).features;
                }});
}

}  // namespace uniwrv::wpgm
