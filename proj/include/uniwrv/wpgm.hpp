// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "uniwrv/tensorkit/parameters.hpp"
#include "uniwrv/tensorkit/tensor.hpp"

// Weather prior guided module: a per-layer bank of learnable prior vectors,
// queried by nearest neighbour from a pooled latent of the incoming feature
// and broadcast-added to it ahead of a pluggable extraction block.
namespace uniwrv::wpgm {

using tensorkit::ParameterList;
using tensorkit::Tensor;

struct PriorBank {
  int layer = 0;
  Tensor vectors;                     // [entries, width]
  std::vector<std::uint64_t> usage;   // one counter per entry

  /// Entries drawn uniformly from [-0.5, 0.5]^width.
  static PriorBank random(int layer, std::size_t entries, std::size_t width, std::mt19937_64& rng);

  std::size_t entries() const { return vectors.dim(0); }
  std::size_t width() const { return vectors.dim(1); }
  std::uint64_t queries_served() const;
};

/// Two fully connected layers with a ReLU between them, width -> width.
struct MappingNet {
  Tensor w1, b1, w2, b2;  // w: [width, width] applied as x * w

  static MappingNet random(std::size_t width, std::mt19937_64& rng);
  std::size_t width() const { return w1.dim(0); }
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct PriorRecord {
  int layer = 0;
  Tensor latent;   // g_l
  Tensor prior;    // q_l, a live row of the bank (gradients reach the bank)
  std::size_t index = 0;
  Tensor bank;     // handle to the bank matrix the prior came from
};

/// Pluggable feature extraction applied after prompt injection.
class ExtractionBlock {
 public:
  virtual ~ExtractionBlock() = default;
  virtual Tensor forward(const Tensor& x) const = 0;
  virtual void collect(ParameterList& out, const std::string& prefix) const = 0;
  virtual std::size_t channels() const = 0;
};

/// conv3x3 -> ReLU -> conv3x3, plus the block input.
class ResidualBlock final : public ExtractionBlock {
 public:
  ResidualBlock(std::size_t channels, std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const override;
  void collect(ParameterList& out, const std::string& prefix) const override;
  std::size_t channels() const override { return w1_.dim(2); }

  Tensor& conv1() { return w1_; }
  Tensor& conv2() { return w2_; }
  Tensor& bias1() { return b1_; }
  Tensor& bias2() { return b2_; }

 private:
  Tensor w1_, b1_, w2_, b2_;
};

/// g_l = FC2(ReLU(FC1(global_average_pool(f_l)))).
Tensor embed(const Tensor& features, const MappingNet& net);

struct QueryResult {
  Tensor prior;
  std::size_t index = 0;
  double distance = 0.0;
};

/// Nearest bank entry in L2, lowest index on ties. Increments the usage
/// counter of the chosen entry. The selection itself carries no gradient.
QueryResult query(const Tensor& latent, PriorBank& bank);

struct WpgmOutput {
  Tensor features;
  PriorRecord record;
};

/// f_{l+1} = block(f_l + broadcast(q_l)). The latent is embedded from sg(f_l).
WpgmOutput wpgm_forward(const Tensor& features, PriorBank& bank, const MappingNet& net,
                        const ExtractionBlock& block);

/// One WPGM layer with its own bank, mapping net and block.
struct WpgmLayer {
  PriorBank bank;
  MappingNet net;
  std::unique_ptr<ExtractionBlock> block;

  static WpgmLayer make(int layer, std::size_t channels, std::size_t entries, std::mt19937_64& rng);
  WpgmOutput forward(const Tensor& features) { return wpgm_forward(features, bank, net, *block); }
  void collect(ParameterList& out, const std::string& prefix) const;
};

struct VectorLoss {
  Tensor value;         // bank_term + beta * mapping_term
  Tensor bank_term;     // sum_l [1 - cos(q_l, sg(g_l))]
  Tensor mapping_term;  // sum_l [1 - cos(sg(q_l), g_l)]
  // Terms where a zero vector forced cos := 0.
  std::size_t degenerate_terms = 0;
};

/// sum_l [1 - cos(q_l, sg(g_l))] + beta * sum_l [1 - cos(sg(q_l), g_l)].
VectorLoss prior_vector_loss(std::span<const PriorRecord> records, double beta);

/// InfoNCE per layer over normalised vectors: the queried entry is the
/// positive, every other entry of the same bank a negative; summed over
/// records. Throws ConfigError for tau <= 0 or banks with fewer than 2 entries.
Tensor prior_contrastive_loss(std::span<const PriorRecord> records, double tau);

/// Copy of the usage histogram; optionally clears the counters.
std::vector<std::uint64_t> bank_usage(PriorBank& bank, bool reset = false);

void register_gradchecks();

}  // namespace uniwrv::wpgm
