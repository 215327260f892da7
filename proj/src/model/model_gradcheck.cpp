// SPDX-License-Identifier: Apache-2.0
#include <memory>

#include "uniwrv/model.hpp"
#include "uniwrv/tensorkit/gradcheck.hpp"
#include "uniwrv/tensorkit/ops.hpp"

namespace uniwrv::model {

namespace tk = tensorkit;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.channels = 2;
  cfg.blocks = 1;
  cfg.prior_entries = 4;
  cfg.dma = dra::DmaConfig{2, 3, 2, 1, 3};
  cfg.flow_hidden = 4;
  cfg.crop = 8;
  cfg.tau = 0.5;
  return cfg;
}

// Every zero-initialised head and identity modifier gets random values so
// all branches carry gradient.
void randomize(Model& m, std::mt19937_64& rng) {
  m.conv_out.weight = tk::random_tensor(rng, m.conv_out.weight.shape(), -0.3, 0.3);
  m.flow.weights.back() = tk::random_tensor(rng, m.flow.weights.back().shape(), -0.05, 0.05);
  for (auto& layer : m.fusion) {
    for (dra::RoutedConv* rc : {&layer.attention, &layer.offsets, &layer.values, &layer.output}) {
      for (Tensor* mod : {&rc->mods.u, &rc->mods.v, &rc->mods.c, &rc->mods.o})
        *mod = tk::random_tensor(rng, mod->shape(), 0.5, 1.5);
    }
    layer.offsets.weight = tk::random_tensor(rng, layer.offsets.weight.shape(), -0.05, 0.05);
    layer.output.weight = tk::random_tensor(rng, layer.output.weight.shape(), -0.3, 0.3);
  }
}

}  // namespace

void register_gradchecks() {
  auto model = std::make_shared<Model>(tiny_config());
  {
    std::mt19937_64 rng(99);
    randomize(*model, rng);
  }
  tk::GradcheckCase c;
  c.input_names = {"d_prev", "d_mid", "d_next", "g_prev", "g_mid", "g_next",
                   "enc_bank", "dec_bank", "enc_map_fc1", "controller", "mod_u", "flow_head", "conv_out"};
  c.make_inputs = [model](std::mt19937_64& rng) {
    std::vector<Tensor> in;
    for (int i = 0; i < 6; ++i) in.push_back(tk::random_tensor(rng, {8, 8, 3}, 0.05, 0.95));
    in.push_back(tk::random_tensor(rng, model->encoder[0].bank.vectors.shape(), -0.5, 0.5));
    in.push_back(tk::random_tensor(rng, model->decoder[0].bank.vectors.shape(), -0.5, 0.5));
    in.push_back(model->encoder[2].net.w1.clone());
    in.push_back(tk::random_tensor(rng, model->fusion[0].controller.weight.shape()));
    in.push_back(tk::random_tensor(rng, model->fusion[0].values.mods.u.shape(), 0.5, 1.5));
    in.push_back(tk::random_tensor(rng, model->flow.weights.back().shape(), -0.05, 0.05));
    in.push_back(tk::random_tensor(rng, model->conv_out.weight.shape(), -0.3, 0.3));
    return in;
  };
  c.fn = [model](std::span<const Tensor> in) {
    Model& m = *model;
    m.encoder[0].bank.vectors = in[6];
    m.decoder[0].bank.vectors = in[7];
    m.encoder[2].net.w1 = in[8];
    m.fusion[0].controller.weight = in[9];
    m.fusion[0].values.mods.u = in[10];
    m.flow.weights.back() = in[11];
    m.conv_out.weight = in[12];
    const Triplet d{in[0], in[1], in[2]}, g{in[3], in[4], in[5]};
    return compute_loss(m, d, g).total;
  };
  c.max_coords_per_input = 24;
  tk::GradcheckRegistry::global().add("total_loss", std::move(c));
}

}  // namespace uniwrv::model
