// SPDX-License-Identifier: Apache-2.0
#include "uniwrv/wpgm.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "uniwrv/errors.hpp"
#include "uniwrv/tensorkit/ops.hpp"

namespace uniwrv::wpgm {

namespace tk = tensorkit;

PriorBank PriorBank::random(int layer, std::size_t entries, std::size_t width, std::mt19937_64& rng) {
  if (entries < 2) throw ConfigError("prior bank needs at least 2 entries, got " + std::to_string(entries));
  PriorBank bank;
  bank.layer = layer;
  bank.vectors = tk::uniform(rng, {entries, width}, -0.5, 0.5);
  bank.usage.assign(entries, 0);
  return bank;
}

std::uint64_t PriorBank::queries_served() const {
  return std::accumulate(usage.begin(), usage.end(), std::uint64_t{0});
}

MappingNet MappingNet::random(std::size_t width, std::mt19937_64& rng) {
  MappingNet net;
  net.w1 = tk::kaiming_uniform(rng, {width, width}, width);
  net.b1 = Tensor({width}, 0.0);
  net.w2 = tk::kaiming_uniform(rng, {width, width}, width);
  net.b2 = Tensor({width}, 0.0);
  return net;
}

void MappingNet::collect(ParameterList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".fc1.weight", w1);
  out.emplace_back(prefix + ".fc1.bias", b1);
  out.emplace_back(prefix + ".fc2.weight", w2);
  out.emplace_back(prefix + ".fc2.bias", b2);
}

ResidualBlock::ResidualBlock(std::size_t channels, std::mt19937_64& rng)
    : w1_(tk::kaiming_uniform(rng, {3, 3, channels, channels}, 9 * channels)),
      b1_({channels}, 0.0),
      w2_(tk::kaiming_uniform(rng, {3, 3, channels, channels}, 9 * channels, 0.1)),
      b2_({channels}, 0.0) {}

Tensor ResidualBlock::forward(const Tensor& x) const {
  Tensor h = tk::relu(tk::conv2d(x, w1_, b1_, 1, 1));
  return tk::add(x, tk::conv2d(h, w2_, b2_, 1, 1));
}

void ResidualBlock::collect(ParameterList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".conv1.weight", w1_);
  out.emplace_back(prefix + ".conv1.bias", b1_);
  out.emplace_back(prefix + ".conv2.weight", w2_);
  out.emplace_back(prefix + ".conv2.bias", b2_);
}

Tensor embed(const Tensor& features, const MappingNet& net) {
  if (features.rank() != 3 || features.dim(2) != net.width()) {
    throw DimensionError("embed: feature shape " + tk::shape_str(features.shape()) + " vs mapping width " +
                         std::to_string(net.width()));
  }
  Tensor pooled = tk::global_avg_pool(features);
  return tk::linear(tk::relu(tk::linear(pooled, net.w1, net.b1)), net.w2, net.b2);
}

QueryResult query(const Tensor& latent, PriorBank& bank) {
  if (!bank.vectors.defined() || bank.entries() == 0) throw ConfigError("query on an empty prior bank");
  if (latent.numel() != bank.width()) {
    throw DimensionError("query: latent length " + std::to_string(latent.numel()) + " vs bank width " +
                         std::to_string(bank.width()));
  }
  const std::size_t C = bank.width();
  auto g = latent.data();
  auto q = bank.vectors.data();
  std::size_t best = 0;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < bank.entries(); ++i) {
    double d2 = 0.0;
    for (std::size_t c = 0; c < C; ++c) d2 += (g[c] - q[i * C + c]) * (g[c] - q[i * C + c]);
    if (d2 < best_d2) {  // strict: ties keep the lower index
      best_d2 = d2;
      best = i;
    }
  }
  ++bank.usage[best];
  return {tk::select_row(bank.vectors, best), best, std::sqrt(best_d2)};
}

WpgmOutput wpgm_forward(const Tensor& features, PriorBank& bank, const MappingNet& net,
                        const ExtractionBlock& block) {
  if (block.channels() != features.dim(2)) {
    throw DimensionError("wpgm: block expects " + std::to_string(block.channels()) + " channels, feature has " +
                         std::to_string(features.dim(2)));
  }
  // The prior losses train the mapping net and bank only, not the features it reads.
  Tensor latent = embed(tk::stop_gradient(features), net);
  QueryResult hit = query(latent, bank);
  Tensor prompted = tk::broadcast_add(features, hit.prior);
  return {block.forward(prompted), PriorRecord{bank.layer, latent, hit.prior, hit.index, bank.vectors}};
}

WpgmLayer WpgmLayer::make(int layer, std::size_t channels, std::size_t entries, std::mt19937_64& rng) {
  WpgmLayer out;
  out.bank = PriorBank::random(layer, entries, channels, rng);
  out.net = MappingNet::random(channels, rng);
  out.block = std::make_unique<ResidualBlock>(channels, rng);
  return out;
}

void WpgmLayer::collect(ParameterList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".bank", bank.vectors);
  net.collect(out, prefix + ".map");
  block->collect(out, prefix + ".block");
}

namespace {
bool is_zero(const Tensor& t) {
  for (double v : t.data())
    if (v != 0.0) return false;
  return true;
}
}  // namespace

VectorLoss prior_vector_loss(std::span<const PriorRecord> records, double beta) {
  if (records.empty()) throw UsageError("prior_vector_loss: no records");
  VectorLoss out;
  Tensor bank_cos, map_cos;
  for (const auto& rec : records) {
    if (is_zero(rec.latent) || is_zero(rec.prior)) out.degenerate_terms += 2;
    Tensor to_bank = tk::cosine(rec.prior, tk::stop_gradient(rec.latent));
    Tensor to_map = tk::cosine(tk::stop_gradient(rec.prior), rec.latent);
    bank_cos = bank_cos.defined() ? tk::add(bank_cos, to_bank) : to_bank;
    map_cos = map_cos.defined() ? tk::add(map_cos, to_map) : to_map;
  }
  const Tensor count = Tensor::scalar(static_cast<double>(records.size()));
  out.bank_term = tk::sub(count, bank_cos);
  out.mapping_term = tk::sub(count, map_cos);
  out.value = tk::add(out.bank_term, tk::scale(out.mapping_term, beta));
  return out;
}

Tensor prior_contrastive_loss(std::span<const PriorRecord> records, double tau) {
  if (!(tau > 0.0)) throw ConfigError("contrastive temperature must be > 0, got " + std::to_string(tau));
  if (records.empty()) throw UsageError("prior_contrastive_loss: no records");
  Tensor total;
  for (const auto& rec : records) {
    const std::size_t entries = rec.bank.dim(0);
    if (entries < 2) throw ConfigError("contrastive loss needs a bank with at least 2 entries");
    // cos(g, q_i) == normalise(g) . normalise(q_i)
    std::vector<Tensor> logits;
    logits.reserve(entries);
    for (std::size_t i = 0; i < entries; ++i) {
      Tensor row = i == rec.index ? rec.prior : tk::select_row(rec.bank, i);
      logits.push_back(tk::scale(tk::cosine(rec.latent, row), 1.0 / tau));
    }
    Tensor term = tk::scale(tk::pick(tk::log_softmax(tk::concat(logits)), rec.index), -1.0);
    total = total.defined() ? tk::add(total, term) : term;
  }
  return total;
}

std::vector<std::uint64_t> bank_usage(PriorBank& bank, bool reset) {
  auto out = bank.usage;
  if (reset) std::fill(bank.usage.begin(), bank.usage.end(), 0);
  return out;
}

}  // namespace uniwrv::wpgm
