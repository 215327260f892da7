// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uniwrv/model.hpp"
#include "uniwrv/weathergen.hpp"

// Image metrics, routing cost accounting and prior/routing statistics.
namespace uniwrv::analysis {

using tensorkit::Tensor;

constexpr double kPsnrCap = 99.0;

/// Peak 1.0; identical inputs (or anything above the cap) report kPsnrCap.
double psnr(const Tensor& a, const Tensor& b);

/// Mean SSIM over the valid region of the ITU-R 601 luminance, 11-tap
/// Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.
/// Both sides must be at least 11 pixels.
double ssim(const Tensor& a, const Tensor& b);

enum class Scheme { kStatic, kVanillaRouting, kParameterRouting, kModifyWeight };
std::string scheme_name(Scheme s);
std::vector<Scheme> all_schemes();

struct ConvShape {
  std::string name;
  std::size_t k = 3, cin = 0, cout = 0;
  std::size_t height = 0, width = 0;  // output grid
};

struct ComplexityRow {
  std::string scheme;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

/// The routed convolutions of every DRA layer for an input of height x width.
std::vector<ConvShape> dra_convolutions(const model::ModelConfig& cfg, std::size_t height, std::size_t width);

/// Weights only (biases are not routed and are left out of every scheme).
///   static:            params k^2*Cin*Cout, macs HW*k^2*Cin*Cout
///   vanilla:           P x params, P x macs
///   parameter routing: P x params, conv macs + P*k^2*Cin*Cout for mixing
///   modify weight:     params + P*(2k+Cin+Cout), conv macs + (P+1)*k^2*Cin*Cout
ComplexityRow count_complexity(std::span<const ConvShape> convs, std::size_t paths, Scheme scheme);
ComplexityRow count_complexity(const model::ModelConfig& cfg, std::size_t height, std::size_t width, Scheme scheme);

void write_complexity_csv(std::span<const ComplexityRow> rows, const std::filesystem::path& path);

struct EvalRow {
  unsigned condition = 0;
  std::size_t clip = 0, frame = 0;
  double psnr_degraded = 0, ssim_degraded = 0;
  double psnr = 0, ssim = 0;
};

struct EvalMean {
  std::string label;  // condition name or "all"
  unsigned condition = 0;  // 0 for the overall mean
  std::size_t count = 0;
  double psnr_degraded = 0, ssim_degraded = 0, psnr = 0, ssim = 0;
};

struct EvalOptions {
  std::size_t triplets_per_clip = 0;  // 0: every centre frame
  std::optional<std::filesystem::path> image_dir;  // restored PNGs go here when set
};

struct EvalSummary {
  std::vector<EvalRow> rows;
  std::vector<EvalMean> means;  // per condition in ascending id, then "all"
};

/// Restores the centre frame of consecutive triplets (centres 1, 2, ...).
EvalSummary evaluate(model::Model& model, std::span<const weathergen::ClipRecord> clips, const EvalOptions& opts = {});
void write_metrics_csv(const EvalSummary& summary, const std::filesystem::path& path);

/// Fraction of `indices` that fall in their `top` most frequent values
/// (ties between equally frequent values broken toward the lower index).
double dominant_prior_purity(std::span<const std::size_t> indices, std::size_t top = 3);

struct ConditionStats {
  unsigned condition = 0;
  std::size_t samples = 0;
  std::vector<std::vector<double>> mean_alpha;           // per DRA layer, on the P-simplex
  std::vector<std::vector<std::uint64_t>> prior_counts;  // per encoder WPGM layer, P_n bins
  std::vector<double> purity;                            // per encoder WPGM layer
  double deepest_purity = 0;                             // last encoder layer
};

struct SpecializationReport {
  std::vector<ConditionStats> conditions;  // ascending condition id
  std::size_t deepest_layer = 0;
};

/// Frozen inference on the first `samples_per_condition` triplets of each
/// condition (clip order, then centre frame order).
SpecializationReport specialization_report(model::Model& model, std::span<const weathergen::ClipRecord> clips,
                                           std::size_t samples_per_condition);
SpecializationReport specialization_report(const std::filesystem::path& checkpoint,
                                           const std::filesystem::path& dataset_split,
                                           std::size_t samples_per_condition);

/// routing.csv, priors.csv and purity.csv in `dir`.
void write_specialization_csvs(const SpecializationReport& report, const std::filesystem::path& dir);

}  // namespace uniwrv::analysis
