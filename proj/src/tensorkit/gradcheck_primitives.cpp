// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "uniwrv/tensorkit/gradcheck.hpp"
#include "uniwrv/tensorkit/ops.hpp"

namespace uniwrv::tensorkit {

namespace {

std::size_t pick_size(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Random point of the probability simplex.
Tensor random_simplex(std::mt19937_64& rng, std::size_t n) {
  Tensor t = random_tensor(rng, {n}, 0.1, 1.0);
  double s = 0.0;
  for (double v : t.data()) s += v;
  for (double& v : t.mutable_data()) v /= s;
  return t;
}

}  // namespace

void register_primitive_gradchecks(GradcheckRegistry& registry) {
  registry.add("add", {{"a", "b"},
                       [](std::mt19937_64& rng) {
                         return std::vector<Tensor>{random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})};
                       },
                       [](std::span<const Tensor> in) { return add(in[0], in[1]); }});
  registry.add("sub", {{"a", "b"},
                       [](std::mt19937_64& rng) {
                         return std::vector<Tensor>{random_tensor(rng, {5}), random_tensor(rng, {5})};
                       },
                       [](std::span<const Tensor> in) { return sub(in[0], in[1]); }});
  registry.add("mul", {{"a", "b"},
                       [](std::mt19937_64& rng) {
                         return std::vector<Tensor>{random_tensor(rng, {2, 3, 2}), random_tensor(rng, {2, 3, 2})};
                       },
                       [](std::span<const Tensor> in) { return mul(in[0], in[1]); }});
  registry.add("scale", {{"a"},
                         [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {6})}; },
                         [](std::span<const Tensor> in) { return scale(in[0], -1.7); }});
  registry.add("relu", {{"a"},
                        [](std::mt19937_64& rng) { return std::vector<Tensor>{random_away_from_zero(rng, {4, 3})}; },
                        [](std::span<const Tensor> in) { return relu(in[0]); }});
  registry.add("abs", {{"a"},
                       [](std::mt19937_64& rng) { return std::vector<Tensor>{random_away_from_zero(rng, {7})}; },
                       [](std::span<const Tensor> in) { return abs(in[0]); }});
  registry.add("log", {{"a"},
                       [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {6}, 0.2, 3.0)}; },
                       [](std::span<const Tensor> in) { return log(in[0]); }});
  registry.add("mean", {{"a"},
                        [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {3, 3, 2})}; },
                        [](std::span<const Tensor> in) { return mean(in[0]); }});
  registry.add("mse", {{"a", "b"},
                       [](std::mt19937_64& rng) {
                         return std::vector<Tensor>{random_tensor(rng, {4, 4, 3}), random_tensor(rng, {4, 4, 3})};
                       },
                       [](std::span<const Tensor> in) { return mse(in[0], in[1]); }});
  registry.add("l1", {{"a", "b"},
                      [](std::mt19937_64& rng) {
                        Tensor b = random_tensor(rng, {4, 4, 3});
                        Tensor a = add(b, random_away_from_zero(rng, {4, 4, 3}));
                        return std::vector<Tensor>{a, b};
                      },
                      [](std::span<const Tensor> in) { return l1(in[0], in[1]); }});
  registry.add("stop_gradient", {{"a"},
                                 [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {5})}; },
                                 [](std::span<const Tensor> in) { return mul(stop_gradient(in[0]), in[0]); }});
  registry.add("conv2d", {{"x", "w", "bias"},
                          [](std::mt19937_64& rng) {
                            const std::size_t H = pick_size(rng, 3, 6), W = pick_size(rng, 3, 6);
                            const std::size_t cin = pick_size(rng, 1, 3), cout = pick_size(rng, 1, 3);
                            const std::size_t k = pick_size(rng, 0, 1) ? 3 : 1;
                            return std::vector<Tensor>{random_tensor(rng, {H, W, cin}),
                                                       random_tensor(rng, {k, k, cin, cout}),
                                                       random_tensor(rng, {cout})};
                          },
                          [](std::span<const Tensor> in) { return conv2d(in[0], in[1], in[2], 1, 1); }});
  registry.add("conv2d_strided", {{"x", "w"},
                                  [](std::mt19937_64& rng) {
                                    return std::vector<Tensor>{random_tensor(rng, {6, 5, 2}),
                                                               random_tensor(rng, {3, 3, 2, 3})};
                                  },
                                  [](std::span<const Tensor> in) { return conv2d(in[0], in[1], Tensor{}, 2, 1); }});
  registry.add("bilinear_sample",
               {{"x", "coord"},
                [](std::mt19937_64& rng) {
                  // Coordinates land in [-1, H] so some trials straddle the border.
                  return std::vector<Tensor>{random_tensor(rng, {3, 4, 2}),
                                             Tensor({2}, {pick_size(rng, 0, 3) - 1.0 + 0.15 +
                                                              0.7 * std::uniform_real_distribution<>(0, 1)(rng),
                                                          pick_size(rng, 0, 4) - 1.0 + 0.15 +
                                                              0.7 * std::uniform_real_distribution<>(0, 1)(rng)})};
                },
                [](std::span<const Tensor> in) { return bilinear_sample(in[0], in[1]); }});
  registry.add("warp", {{"x", "flow"},
                        [](std::mt19937_64& rng) {
                          return std::vector<Tensor>{random_tensor(rng, {4, 5, 2}),
                                                     random_fractional_offsets(rng, {4, 5, 2}, 1)};
                        },
                        [](std::span<const Tensor> in) { return warp(in[0], in[1]); }});
  registry.add("pixel_unshuffle", {{"x"},
                                   [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {4, 6, 2})}; },
                                   [](std::span<const Tensor> in) { return pixel_unshuffle(in[0], 2); }});
  registry.add("pixel_shuffle", {{"x"},
                                 [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 3, 8})}; },
                                 [](std::span<const Tensor> in) { return pixel_shuffle(in[0], 2); }});
  registry.add("avg_pool", {{"x"},
                            [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {4, 8, 3})}; },
                            [](std::span<const Tensor> in) { return avg_pool(in[0], 4); }});
  registry.add("softmax", {{"x"},
                           [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {5}, -3, 3)}; },
                           [](std::span<const Tensor> in) { return softmax(in[0]); }});
  registry.add("log_softmax", {{"x"},
                               [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {6}, -3, 3)}; },
                               [](std::span<const Tensor> in) { return log_softmax(in[0]); }});
  registry.add("softmax_groups",
               {{"x"},
                [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 2, 6}, -2, 2)}; },
                [](std::span<const Tensor> in) { return softmax_groups(in[0], 3); }});
  registry.add("global_avg_pool",
               {{"x"},
                [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {3, 2, 4})}; },
                [](std::span<const Tensor> in) { return global_avg_pool(in[0]); }});
  registry.add("broadcast_add", {{"x", "v"},
                                 [](std::mt19937_64& rng) {
                                   return std::vector<Tensor>{random_tensor(rng, {3, 3, 2}), random_tensor(rng, {2})};
                                 },
                                 [](std::span<const Tensor> in) { return broadcast_add(in[0], in[1]); }});
  registry.add("linear", {{"x", "w", "b"},
                          [](std::mt19937_64& rng) {
                            return std::vector<Tensor>{random_tensor(rng, {4}), random_tensor(rng, {4, 3}),
                                                       random_tensor(rng, {3})};
                          },
                          [](std::span<const Tensor> in) { return linear(in[0], in[1], in[2]); }});
  registry.add("concat_channels", {{"a", "b"},
                                   [](std::mt19937_64& rng) {
                                     return std::vector<Tensor>{random_tensor(rng, {2, 3, 2}),
                                                                random_tensor(rng, {2, 3, 3})};
                                   },
                                   [](std::span<const Tensor> in) { return concat_channels(in); }});
  registry.add("slice_channels",
               {{"x"},
                [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {2, 2, 5})}; },
                [](std::span<const Tensor> in) { return slice_channels(in[0], 1, 4); }});
  registry.add("tile", {{"v"},
                        [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {3})}; },
                        [](std::span<const Tensor> in) { return tile(in[0], 12); }});
  registry.add("select_row", {{"m"},
                              [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {4, 3})}; },
                              [](std::span<const Tensor> in) { return select_row(in[0], 2); }});
  registry.add("pick", {{"v"},
                        [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {4})}; },
                        [](std::span<const Tensor> in) { return pick(in[0], 1); }});
  registry.add("matvec", {{"m", "v"},
                          [](std::mt19937_64& rng) {
                            return std::vector<Tensor>{random_tensor(rng, {5, 3}), random_tensor(rng, {3})};
                          },
                          [](std::span<const Tensor> in) { return matvec(in[0], in[1]); }});
  registry.add("concat", {{"a", "b", "s"},
                          [](std::mt19937_64& rng) {
                            return std::vector<Tensor>{random_tensor(rng, {3}), random_tensor(rng, {2, 2}),
                                                       random_tensor(rng, {1})};
                          },
                          [](std::span<const Tensor> in) { return concat(in); }});
  registry.add("cosine", {{"a", "b"},
                          [](std::mt19937_64& rng) {
                            return std::vector<Tensor>{random_away_from_zero(rng, {5}),
                                                       random_away_from_zero(rng, {5})};
                          },
                          [](std::span<const Tensor> in) { return cosine(in[0], in[1]); }});
  registry.add("l2_normalize",
               {{"v"},
                [](std::mt19937_64& rng) { return std::vector<Tensor>{random_away_from_zero(rng, {4})}; },
                [](std::span<const Tensor> in) { return l2_normalize(in[0]); }});
  registry.add("route_kernel",
               {{"w", "u", "v", "c_in", "c_out", "alpha"},
                [](std::mt19937_64& rng) {
                  const std::size_t P = 3, k = 3, cin = 2, cout = 3;
                  return std::vector<Tensor>{random_tensor(rng, {k, k, cin, cout}), random_tensor(rng, {P, k}, 0.5, 1.5),
                                             random_tensor(rng, {P, k}, 0.5, 1.5),
                                             random_tensor(rng, {P, cin}, 0.5, 1.5),
                                             random_tensor(rng, {P, cout}, 0.5, 1.5), random_simplex(rng, P)};
                },
                [](std::span<const Tensor> in) { return route_kernel(in[0], in[1], in[2], in[3], in[4], in[5]); },
                256});
  registry.add("deformable_attention",
               {{"weights", "offsets", "values"},
                [](std::mt19937_64& rng) {
                  const AttentionLayout l{2, 3, 2};
                  const std::size_t slots = l.heads * l.frames * l.points;
                  return std::vector<Tensor>{random_tensor(rng, {3, 4, slots}, 0.0, 1.0),
                                             random_fractional_offsets(rng, {3, 4, 2 * slots}, 1),
                                             random_tensor(rng, {3, 4, l.frames * 4})};
                },
                [](std::span<const Tensor> in) {
                  return deformable_attention(in[0], in[1], in[2], AttentionLayout{2, 3, 2});
                },
                96});
}

}  // namespace uniwrv::tensorkit
