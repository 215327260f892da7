// SPDX-License-Identifier: Apache-2.0
#include "uniwrv/model.hpp"

#include <cmath>

#include "uniwrv/errors.hpp"
#include "uniwrv/tensorkit/ops.hpp"
#include "uniwrv/tensorkit/tape.hpp"

namespace uniwrv::model {

namespace tk = tensorkit;
using nlohmann::json;

json ModelConfig::to_json() const {
  return json{{"channels", channels},
              {"blocks", blocks},
              {"prior_entries", prior_entries},
              {"paths", dma.paths},
              {"layers", dma.layers},
              {"heads", dma.heads},
              {"frames", dma.frames},
              {"points", dma.points},
              {"flow_hidden", flow_hidden},
              {"crop", crop},
              {"beta", beta},
              {"tau", tau},
              {"hard_routing", hard_routing},
              {"gumbel_temperature", gumbel_temperature},
              {"losses",
               {{"l1", losses.l1},
                {"prior_vector", losses.prior_vector},
                {"prior_contrastive", losses.prior_contrastive},
                {"flow", losses.flow}}},
              {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  ModelConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "channels") c.channels = v.get<std::size_t>();
      else if (key == "blocks") c.blocks = v.get<std::size_t>();
      else if (key == "prior_entries") c.prior_entries = v.get<std::size_t>();
      else if (key == "paths") c.dma.paths = v.get<std::size_t>();
      else if (key == "layers") c.dma.layers = v.get<std::size_t>();
      else if (key == "heads") c.dma.heads = v.get<std::size_t>();
      else if (key == "frames") c.dma.frames = v.get<std::size_t>();
      else if (key == "points") c.dma.points = v.get<std::size_t>();
      else if (key == "flow_hidden") c.flow_hidden = v.get<std::size_t>();
      else if (key == "crop") c.crop = v.get<std::size_t>();
      else if (key == "beta") c.beta = v.get<double>();
      else if (key == "tau") c.tau = v.get<double>();
      else if (key == "hard_routing") c.hard_routing = v.get<bool>();
      else if (key == "gumbel_temperature") c.gumbel_temperature = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "losses") {
        if (!v.is_object()) throw ConfigError("model.losses must be an object");
        for (const auto& [lk, lv] : v.items()) {
          if (lk == "l1") c.losses.l1 = lv.get<bool>();
          else if (lk == "prior_vector") c.losses.prior_vector = lv.get<bool>();
          else if (lk == "prior_contrastive") c.losses.prior_contrastive = lv.get<bool>();
          else if (lk == "flow") c.losses.flow = lv.get<bool>();
          else throw ConfigError("unknown model.losses key '" + lk + "'");
        }
      } else {
        throw ConfigError("unknown model key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

void ModelConfig::validate() const {
  if (channels == 0 || blocks == 0) throw ConfigError("channels and blocks must be positive");
  if (prior_entries < 2) throw ConfigError("prior_entries must be at least 2");
  if (flow_hidden == 0) throw ConfigError("flow_hidden must be positive");
  if (crop < 8 || crop % 4 != 0) throw ConfigError("crop must be a multiple of 4, at least 8");
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  if (!(gumbel_temperature > 0.0)) throw ConfigError("gumbel_temperature must be > 0");
  dma.validate(fusion_channels());
}

std::vector<std::string> ModelConfig::diff(const ModelConfig& other) const {
  std::vector<std::string> out;
  const json a = to_json().flatten(), b = other.to_json().flatten();
  for (const auto& [key, value] : a.items()) {
    const auto it = b.find(key);
    if (it == b.end()) out.push_back(key + ": " + value.dump() + " vs (missing)");
    else if (*it != value) out.push_back(key + ": " + value.dump() + " vs " + it->dump());
  }
  return out;
}

std::vector<wpgm::PriorRecord> ForwardResult::all_records() const {
  std::vector<wpgm::PriorRecord> all = encoder_records;
  all.insert(all.end(), decoder_records.begin(), decoder_records.end());
  return all;
}

namespace {

Model::Conv make_conv(std::size_t cin, std::size_t cout, std::mt19937_64& rng, bool zero = false) {
  return {zero ? Tensor({3, 3, cin, cout}, 0.0) : tk::kaiming_uniform(rng, {3, 3, cin, cout}, 9 * cin),
          Tensor({cout}, 0.0)};
}

Tensor apply(const Model::Conv& c, const Tensor& x) { return tk::conv2d(x, c.weight, c.bias, 1, 1); }

Tensor run_scale(std::vector<wpgm::WpgmLayer>& layers, std::size_t scale, std::size_t blocks, Tensor x,
                 std::vector<wpgm::PriorRecord>* records) {
  for (std::size_t i = 0; i < blocks; ++i) {
    auto out = layers[scale * blocks + i].forward(x);
    x = out.features;
    if (records) records->push_back(std::move(out.record));
  }
  return x;
}

void check_triplet(const Triplet& t, const char* what) {
  for (const auto& f : t) {
    if (!f.defined() || f.rank() != 3 || f.dim(2) != 3) throw DimensionError(std::string(what) + ": frames must be [H,W,3]");
    if (f.shape() != t[1].shape()) throw DimensionError(std::string(what) + ": frame sizes differ");
  }
  if (t[1].dim(0) % 4 || t[1].dim(1) % 4) {
    throw DimensionError(std::string(what) + ": frame size " + tk::shape_str(t[1].shape()) + " not divisible by 4");
  }
}

}  // namespace

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const std::size_t C = cfg_.channels, b = cfg_.blocks, Pn = cfg_.prior_entries;
  conv_in = make_conv(3, C, rng);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t i = 0; i < b; ++i)
      encoder.push_back(wpgm::WpgmLayer::make(static_cast<int>(s * b + i), C << s, Pn, rng));
  down1 = make_conv(4 * C, 2 * C, rng);
  down2 = make_conv(8 * C, 4 * C, rng);
  flow = dra::FlowEstimator::make(cfg_.flow_hidden, rng);
  for (std::size_t n = 0; n < cfg_.dma.layers; ++n) fusion.push_back(dra::DraLayerParams::make(4 * C, cfg_.dma, rng));
  // Decoder layers are stored scale-major too: index s * b + i works at width C << s.
  decoder.resize(3 * b);
  for (std::size_t s = 3; s-- > 0;)
    for (std::size_t i = 0; i < b; ++i)
      decoder[s * b + i] = wpgm::WpgmLayer::make(static_cast<int>(3 * b + (2 - s) * b + i), C << s, Pn, rng);
  up2 = make_conv(4 * C, 8 * C, rng);
  up1 = make_conv(2 * C, 4 * C, rng);
  conv_out = make_conv(C, 3, rng, true);
  ParameterList params = parameters();
  tk::mark_trainable(params);
}

Extraction Model::extract(const Triplet& degraded) {
  check_triplet(degraded, "extract");
  const std::size_t b = cfg_.blocks;
  Extraction ex;
  for (std::size_t f = 0; f < 3; ++f) {
    auto* rec = f == 1 ? &ex.records : nullptr;
    Tensor x = run_scale(encoder, 0, b, apply(conv_in, degraded[f]), rec);
    if (f == 1) ex.skips[0] = x;
    x = run_scale(encoder, 1, b, apply(down1, tk::pixel_unshuffle(x, 2)), rec);
    if (f == 1) ex.skips[1] = x;
    x = run_scale(encoder, 2, b, apply(down2, tk::pixel_unshuffle(x, 2)), rec);
    if (f == 1) ex.skips[2] = x;
    ex.features[f] = x;
  }
  return ex;
}

Tensor Model::reconstruct(const Tensor& fused, const Extraction& ex, std::vector<wpgm::PriorRecord>* records) {
  const std::size_t b = cfg_.blocks;
  auto join = [](const Tensor& x, const Tensor& skip, const char* stage) {
    if (x.shape() != skip.shape()) {
      throw DimensionError(std::string("reconstruct: ") + stage + " " + tk::shape_str(x.shape()) + " vs skip " +
                           tk::shape_str(skip.shape()));
    }
    return tk::add(x, skip);
  };
  Tensor x = run_scale(decoder, 2, b, join(fused, ex.skips[2], "quarter scale"), records);
  x = run_scale(decoder, 1, b, join(tk::pixel_shuffle(apply(up2, x), 2), ex.skips[1], "half scale"), records);
  x = run_scale(decoder, 0, b, join(tk::pixel_shuffle(apply(up1, x), 2), ex.skips[0], "full scale"), records);
  return apply(conv_out, x);
}

ForwardResult Model::forward(const Triplet& degraded, std::mt19937_64* rng) {
  ForwardResult out;
  Extraction ex = extract(degraded);
  out.flows = dra::estimate_flow(tk::avg_pool(degraded[0], 4), tk::avg_pool(degraded[1], 4),
                                 tk::avg_pool(degraded[2], 4), flow);
  // The flow estimator learns from the warp loss alone.
  const Tensor prev_w = dra::warp_feature(ex.features[0], tk::stop_gradient(out.flows.prev));
  const Tensor next_w = dra::warp_feature(ex.features[2], tk::stop_gradient(out.flows.next));
  const dra::HardRouting hard{cfg_.hard_routing, cfg_.gumbel_temperature, rng};
  Tensor m = ex.features[1];
  for (const auto& layer : fusion) {
    dra::DraStep step = dra::dra_layer(m, ex.features[0], ex.features[2], prev_w, next_w, ex.records, layer, cfg_.dma,
                                       hard);
    m = step.next;
    out.trace.alphas.emplace_back(step.soft_alpha.data().begin(), step.soft_alpha.data().end());
  }
  out.restored = tk::add(degraded[1], reconstruct(m, ex, &out.decoder_records));
  for (const auto& r : ex.records) out.trace.prior_indices.push_back(r.index);
  out.encoder_records = std::move(ex.records);
  return out;
}

Tensor Model::restore(const Triplet& degraded) {
  tk::NoTapeScope no_tape;
  Tensor r = forward(degraded).restored.clone();
  for (double& v : r.mutable_data()) v = std::min(1.0, std::max(0.0, v));
  return r;
}

ParameterList Model::parameters() const {
  ParameterList out;
  const std::size_t b = cfg_.blocks;
  auto conv = [&out](const Conv& c, const std::string& name) {
    out.emplace_back(name + ".weight", c.weight);
    out.emplace_back(name + ".bias", c.bias);
  };
  auto scale = [&](const std::vector<wpgm::WpgmLayer>& layers, const std::string& side, std::size_t s) {
    for (std::size_t i = 0; i < b; ++i)
      layers[s * b + i].collect(out, side + ".s" + std::to_string(s) + ".wpgm" + std::to_string(i));
  };
  conv(conv_in, "enc.conv_in");
  scale(encoder, "enc", 0);
  conv(down1, "enc.down1");
  scale(encoder, "enc", 1);
  conv(down2, "enc.down2");
  scale(encoder, "enc", 2);
  flow.collect(out, "flow");
  for (std::size_t n = 0; n < fusion.size(); ++n) fusion[n].collect(out, "dra" + std::to_string(n));
  scale(decoder, "dec", 2);
  conv(up2, "dec.up2");
  scale(decoder, "dec", 1);
  conv(up1, "dec.up1");
  scale(decoder, "dec", 0);
  conv(conv_out, "dec.conv_out");
  return out;
}

std::vector<wpgm::PriorBank*> Model::banks() {
  std::vector<wpgm::PriorBank*> out;
  for (auto& l : encoder) out.push_back(&l.bank);
  for (std::size_t s = 3; s-- > 0;)
    for (std::size_t i = 0; i < cfg_.blocks; ++i) out.push_back(&decoder[s * cfg_.blocks + i].bank);
  return out;
}

std::vector<const wpgm::PriorBank*> Model::banks() const {
  auto mut = const_cast<Model*>(this)->banks();
  return {mut.begin(), mut.end()};
}

std::vector<std::string> Model::bank_names() const {
  std::vector<std::string> out;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t i = 0; i < cfg_.blocks; ++i)
      out.push_back("enc.s" + std::to_string(s) + ".wpgm" + std::to_string(i) + ".bank");
  for (std::size_t s = 3; s-- > 0;)
    for (std::size_t i = 0; i < cfg_.blocks; ++i)
      out.push_back("dec.s" + std::to_string(s) + ".wpgm" + std::to_string(i) + ".bank");
  return out;
}

LossBreakdown total_loss(const Tensor& restored, const Tensor& target, std::span<const wpgm::PriorRecord> records,
                         const dra::FlowField& flows, const Triplet* gt, const ModelConfig& cfg) {
  LossBreakdown out;
  const Tensor zero = Tensor::scalar(0.0);
  out.l1 = cfg.losses.l1 ? tk::l1(restored, target) : zero;
  out.prior_vector = cfg.losses.prior_vector && !records.empty() ? wpgm::prior_vector_loss(records, cfg.beta).value : zero;
  out.prior_contrastive =
      cfg.losses.prior_contrastive && !records.empty() ? wpgm::prior_contrastive_loss(records, cfg.tau) : zero;
  out.flow = zero;
  if (cfg.losses.flow && gt) {
    out.flow = dra::warp_loss(tk::avg_pool((*gt)[0], 4), tk::avg_pool((*gt)[1], 4), tk::avg_pool((*gt)[2], 4), flows)
                   .value;
  }
  out.total = tk::add(tk::add(out.l1, out.prior_vector), tk::add(out.prior_contrastive, out.flow));
  return out;
}

LossBreakdown compute_loss(Model& model, const Triplet& degraded, const Triplet& gt, std::mt19937_64* rng) {
  check_triplet(gt, "compute_loss");
  ForwardResult fwd = model.forward(degraded, rng);
  const auto records = fwd.all_records();
  return total_loss(fwd.restored, gt[1], records, fwd.flows, &gt, model.config());
}

}  // namespace uniwrv::model
