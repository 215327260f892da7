// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uniwrv/tensorkit/tensor.hpp"

// Procedural clean clips and composited weather degradations.
namespace uniwrv::weathergen {

using Image = tensorkit::Tensor;  // [H, W, 3] in [0, 1]

enum Flag : unsigned { kHaze = 1u, kRain = 2u, kSnow = 4u, kNight = 8u };
constexpr unsigned kConditionCount = 15;

struct HazeParams {
  double beta = 1.2;  // scattering per unit depth
  std::array<double, 3> airlight{0.85, 0.85, 0.85};
};

struct RainParams {
  double density = 6.0;  // streaks per 1000 pixels
  double angle_deg = 15.0;
  double length = 8.0;
  double velocity = 6.0;  // px per frame along the streak direction
  double intensity = 0.6;
};

struct SnowParams {
  double density = 8.0;  // flakes per 1000 pixels
  double radius_min = 0.7;
  double radius_max = 1.6;
  double drift = 1.5;    // px per frame, downward
  double flutter = 1.0;  // horizontal sinusoid amplitude, px
};

struct NightParams {
  double gamma = 2.0;
  double scale = 0.6;
  double sigma = 0.03;
};

struct DegradationRecipe {
  unsigned id = 1;  // bit mask over Flag, 1..15
  HazeParams haze;
  RainParams rain;
  SnowParams snow;
  NightParams night;
  std::uint64_t seed = 0;

  bool has(Flag f) const { return (id & f) != 0; }
  /// Defaults with mild per-clip jitter drawn from `seed`.
  static DegradationRecipe sample(unsigned id, std::uint64_t seed);
  static DegradationRecipe defaults(unsigned id, std::uint64_t seed);
  nlohmann::json to_json() const;
  static DegradationRecipe from_json(const nlohmann::json& j);
};

/// "haze", "rain+night", ... for ids 1..15. Throws ConfigError otherwise.
std::string condition_name(unsigned id);
std::vector<unsigned> all_conditions();

struct Clip {
  std::vector<Image> clean;
  std::vector<Image> degraded;  // empty until degrade()
  std::vector<Image> depth;     // [H, W, 1] in (0, 1]
  DegradationRecipe recipe;
  std::uint64_t seed = 0;
};

Clip render_clean_clip(std::uint64_t seed, std::size_t frames, std::size_t height, std::size_t width);

Image apply_haze(const Image& frame, const Image& depth, double beta, const std::array<double, 3>& airlight);
Image apply_rain(const Image& frame, std::size_t t, const RainParams& params, std::uint64_t seed);
Image apply_snow(const Image& frame, std::size_t t, const SnowParams& params, std::uint64_t seed);
Image apply_night(const Image& frame, double gamma, double scale, double sigma, std::uint64_t seed);

/// Per frame: night, haze, snow, rain (only the recipe's active effects).
/// Under night the haze airlight is scaled by the night scale.
Clip degrade(const Clip& clean, const DegradationRecipe& recipe, std::uint64_t seed);

struct DatasetConfig {
  std::vector<unsigned> conditions = all_conditions();
  std::size_t clips_per_condition = 4;
  std::size_t frames = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  std::uint64_t seed = 1;
  double train_fraction = 0.8;

  nlohmann::json to_json() const;
  /// Rejects unknown keys.
  static DatasetConfig from_json(const nlohmann::json& j);
  void validate() const;
};

struct DatasetSummary {
  std::size_t train_clips = 0;
  std::size_t test_clips = 0;
};

std::uint64_t derive_seed(std::uint64_t master, unsigned condition, std::size_t clip);

/// Writes train/ and test/ trees of cond_<id>/clip_<n>/{gt,in}/frame_%04d.png
/// plus recipe.json. Clips are assigned clip-major, so the train split is the
/// first round(train_fraction * total) clips of (clip 0 of every condition,
/// clip 1 of every condition, ...). Refuses a non-empty directory unless forced.
DatasetSummary make_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir, bool force = false);

struct ClipRecord {
  unsigned condition = 0;
  std::size_t clip = 0;
  std::filesystem::path dir;
  std::vector<Image> gt;
  std::vector<Image> in;
  DegradationRecipe recipe;
};

/// Loads every clip of a split directory, ordered clip-major like the
/// generator. Missing or mismatched frames raise IoError naming the file.
std::vector<ClipRecord> load_split(const std::filesystem::path& split_dir);

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

}  // namespace uniwrv::weathergen
