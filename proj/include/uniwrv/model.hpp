// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uniwrv/dra.hpp"
#include "uniwrv/tensorkit/parameters.hpp"
#include "uniwrv/weathergen.hpp"
#include "uniwrv/wpgm.hpp"

// The full restoration network: WPGM encoder, DRA fusion, WPGM decoder.
namespace uniwrv::model {

using tensorkit::ParameterList;
using tensorkit::Tensor;
using Triplet = std::array<Tensor, 3>;  // frames t-1, t, t+1, each [H, W, 3]

struct LossFlags {
  bool l1 = true;
  bool prior_vector = true;
  bool prior_contrastive = true;
  bool flow = true;
};

struct ModelConfig {
  std::size_t channels = 8;       // C; scale widths are C, 2C, 4C
  std::size_t blocks = 2;         // WPGM layers per scale
  std::size_t prior_entries = 8;  // P_n
  dra::DmaConfig dma;             // P, N, M, T, K
  std::size_t flow_hidden = 16;
  std::size_t crop = 24;
  double beta = 0.25;  // weight of the mapping term inside the vector loss
  double tau = 0.07;
  bool hard_routing = false;
  double gumbel_temperature = 1.0;
  LossFlags losses;
  std::uint64_t seed = 1;

  std::size_t fusion_channels() const { return 4 * channels; }
  std::size_t extraction_layers() const { return 3 * blocks; }

  nlohmann::json to_json() const;
  /// Rejects unknown keys; missing keys keep their defaults.
  static ModelConfig from_json(const nlohmann::json& j);
  void validate() const;
  /// Human-readable "key: ours vs theirs" lines, empty when equal.
  std::vector<std::string> diff(const ModelConfig& other) const;
};

struct Extraction {
  Triplet features;  // [H/4, W/4, 4C] per frame
  std::vector<wpgm::PriorRecord> records;  // centre frame, one per encoder WPGM layer
  Triplet skips;  // centre-frame features at full, 1/2 and 1/4 resolution
};

struct ForwardResult {
  Tensor restored;  // R_t, unclamped
  std::vector<wpgm::PriorRecord> encoder_records;
  std::vector<wpgm::PriorRecord> decoder_records;
  dra::RouteTrace trace;  // soft routing vectors and encoder prior indices
  dra::FlowField flows;

  std::vector<wpgm::PriorRecord> all_records() const;
};

struct LossBreakdown {
  Tensor total;
  Tensor l1, prior_vector, prior_contrastive, flow;  // zero scalars when disabled
};

class Model {
 public:
  /// Deterministic initialisation from cfg.seed.
  explicit Model(const ModelConfig& cfg);
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }

  /// Shared-weight encoder on each frame; records from the centre frame.
  Extraction extract(const Triplet& degraded);
  /// Decoder; returns the residual added to the centre frame.
  Tensor reconstruct(const Tensor& fused, const Extraction& ex, std::vector<wpgm::PriorRecord>* records = nullptr);
  /// `rng` drives Gumbel noise when hard routing is on; null means argmax.
  ForwardResult forward(const Triplet& degraded, std::mt19937_64* rng = nullptr);
  /// Clamped restoration without gradient recording.
  Tensor restore(const Triplet& degraded);

  ParameterList parameters() const;
  std::vector<wpgm::PriorBank*> banks();
  std::vector<const wpgm::PriorBank*> banks() const;
  std::vector<std::string> bank_names() const;

  // Components, exposed for tests and analysis.
  struct Conv {
    Tensor weight, bias;
  };
  Conv conv_in, down1, down2, up2, up1, conv_out;
  std::vector<wpgm::WpgmLayer> encoder, decoder;  // 3 * blocks each, scale-major
  dra::FlowEstimator flow;
  std::vector<dra::DraLayerParams> fusion;

 private:
  ModelConfig cfg_;
};

/// Unit-weighted objective: L1 + vector prior loss + contrastive prior loss
/// + flow warp loss. `gt` supplies the ground-truth triplet for the flow term.
LossBreakdown total_loss(const Tensor& restored, const Tensor& target, std::span<const wpgm::PriorRecord> records,
                         const dra::FlowField& flows, const Triplet* gt, const ModelConfig& cfg);

/// forward + total_loss on one triplet.
LossBreakdown compute_loss(Model& model, const Triplet& degraded, const Triplet& gt, std::mt19937_64* rng = nullptr);

struct TrainConfig {
  std::size_t iterations = 2000;
  std::size_t batch = 1;
  double lr = 1e-3;
  double lr_min = 1e-5;
  std::uint64_t seed = 1;
  std::size_t checkpoint_interval = 500;  // 0 disables intermediate checkpoints
  std::size_t log_interval = 10;
  bool augment = true;
  bool grad_mode_64bit = false;  // skip float32 rounding of parameters

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  void validate() const;
};

/// lr_min + (lr - lr_min) * (1 + cos(pi * step / (total - 1))) / 2.
double cosine_lr(double lr, double lr_min, std::size_t step, std::size_t total);

class Adam {
 public:
  Adam(ParameterList params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  /// Applies one update from the accumulated gradients, then clears them.
  void step(double lr, bool keep_64bit);
  std::size_t steps() const { return t_; }

 private:
  ParameterList params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct Sample {
  Triplet degraded, gt;
  unsigned condition = 0;
};

/// Triplet centred on frame t of a clip, full resolution.
Sample make_sample(const weathergen::ClipRecord& clip, std::size_t t);
/// Random clip, centre frame, crop and (optionally) flip/transpose.
Sample random_crop_sample(std::span<const weathergen::ClipRecord> clips, std::size_t crop, bool augment,
                          std::mt19937_64& rng);

struct StepStats {
  double total = 0, l1 = 0, prior_vector = 0, prior_contrastive = 0, flow = 0;
};

/// Accumulates gradients over `batch` (each loss scaled by 1/batch) and
/// applies one Adam step. Returned stats are batch means.
StepStats train_step(Model& model, Adam& opt, std::span<const Sample> batch, double lr, bool keep_64bit,
                     std::mt19937_64& rng);

struct TrainResult {
  std::filesystem::path final_checkpoint;
  StepStats last;
  std::size_t iterations = 0;
};

/// Writes config.json, metrics.csv, ckpt_<iter>.uwrv and final.uwrv under out_dir.
TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg, const std::filesystem::path& dataset_dir,
                  const std::filesystem::path& out_dir);

struct Checkpoint {
  ModelConfig config;
  std::size_t iteration = 0;
};

/// 'UWRV', u32 version, u64 manifest length, JSON manifest, float32 payloads.
void save_checkpoint(const Model& model, std::size_t iteration, const std::filesystem::path& path);
/// Reads a checkpoint into a freshly built model.
std::pair<Model, Checkpoint> load_checkpoint(const std::filesystem::path& path);
/// Loads into an existing model; refuses a config that differs, listing the diff.
Checkpoint load_checkpoint_into(Model& model, const std::filesystem::path& path);

void register_gradchecks();

}  // namespace uniwrv::model
