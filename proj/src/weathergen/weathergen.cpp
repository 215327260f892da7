// SPDX-License-Identifier: Apache-2.0
#include "uniwrv/weathergen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "uniwrv/errors.hpp"

namespace uniwrv::weathergen {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

double hash01(std::int64_t ix, std::int64_t iy, std::uint64_t seed) {
  const std::uint64_t h = mix(mix(seed, static_cast<std::uint64_t>(ix)), static_cast<std::uint64_t>(iy));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Smoothly interpolated lattice noise in [0, 1).
double value_noise(double x, double y, std::uint64_t seed) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
  double tx = x - fx, ty = y - fy;
  tx = tx * tx * (3 - 2 * tx);
  ty = ty * ty * (3 - 2 * ty);
  const double a = hash01(ix, iy, seed), b = hash01(ix + 1, iy, seed);
  const double c = hash01(ix, iy + 1, seed), d = hash01(ix + 1, iy + 1, seed);
  return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

struct SceneObject {
  bool disc = false;
  double cy = 0, cx = 0, hy = 0, hx = 0;  // centre and half extents
  std::array<double, 3> color{};
  double stripe_freq = 0, stripe_phase = 0, stripe_angle = 0;
  double depth = 1.0;
};

struct Scene {
  std::uint64_t seed = 0;
  std::array<double, 3> base{};
  std::array<double, 3> tint{};
  std::vector<SceneObject> objects;  // far to near
  double vy = 0, vx = 0;             // camera motion, px per frame
  double height = 0;

  // Colour and depth at world position (y, x).
  void sample(double y, double x, double* rgb, double* depth) const {
    const double n1 = value_noise(y / 9.0, x / 9.0, seed ^ 0x1111);
    const double n2 = value_noise(y / 3.5, x / 3.5, seed ^ 0x2222);
    for (int c = 0; c < 3; ++c) rgb[c] = clamp01(base[c] + tint[c] * (n1 - 0.5) * 0.8 + 0.18 * (n2 - 0.5));
    *depth = 1.0 - 0.45 * clamp01(y / std::max(1.0, height));
    for (const auto& o : objects) {
      const double dy = (y - o.cy) / o.hy, dx = (x - o.cx) / o.hx;
      const bool inside = o.disc ? dy * dy + dx * dx <= 1.0 : std::fabs(dy) <= 1.0 && std::fabs(dx) <= 1.0;
      if (!inside) continue;
      const double u = std::cos(o.stripe_angle) * x + std::sin(o.stripe_angle) * y;
      const double stripe = 0.5 + 0.5 * std::sin(o.stripe_freq * u + o.stripe_phase);
      for (int c = 0; c < 3; ++c) rgb[c] = clamp01(o.color[c] * (0.75 + 0.35 * stripe));
      *depth = o.depth;
    }
  }
};

Scene make_scene(std::uint64_t seed, std::size_t frames, std::size_t H, std::size_t W) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Scene s;
  s.seed = seed;
  s.height = static_cast<double>(H);
  for (int c = 0; c < 3; ++c) {
    s.base[c] = 0.3 + 0.4 * u01(rng);
    s.tint[c] = 0.3 + 0.5 * u01(rng);
  }
  const double speed = 0.5 + 1.5 * u01(rng);
  const double heading = 2 * std::numbers::pi * u01(rng);
  s.vy = speed * std::sin(heading);
  s.vx = speed * std::cos(heading);

  // Objects are scattered over the region the camera sweeps.
  const double span = speed * static_cast<double>(frames);
  const double y0 = std::min(0.0, s.vy * frames) - 4, y1 = H + std::max(0.0, s.vy * frames) + 4;
  const double x0 = std::min(0.0, s.vx * frames) - 4, x1 = W + std::max(0.0, s.vx * frames) + 4;
  const int count = 3 + static_cast<int>(u01(rng) * 6);  // 3..8
  for (int i = 0; i < count; ++i) {
    SceneObject o;
    o.disc = u01(rng) < 0.5;
    o.cy = y0 + (y1 - y0) * u01(rng);
    o.cx = x0 + (x1 - x0) * u01(rng);
    o.hy = 2.5 + 5.0 * u01(rng);
    o.hx = o.disc ? o.hy : 2.5 + 5.0 * u01(rng);
    for (auto& c : o.color) c = 0.1 + 0.85 * u01(rng);
    o.stripe_freq = 0.6 + 1.6 * u01(rng);
    o.stripe_phase = 2 * std::numbers::pi * u01(rng);
    o.stripe_angle = std::numbers::pi * u01(rng);
    o.depth = 0.2 + 0.7 * u01(rng);
    s.objects.push_back(o);
  }
  std::sort(s.objects.begin(), s.objects.end(), [](const auto& a, const auto& b) { return a.depth > b.depth; });
  (void)span;
  return s;
}

Image blank(const Image& like) { return Image(like.shape(), 0.0); }

void require_frame(const Image& f, const char* op) {
  if (f.rank() != 3 || f.dim(2) != 3) throw DimensionError(std::string(op) + ": frame must be [H,W,3]");
}

}  // namespace

std::string condition_name(unsigned id) {
  if (id < 1 || id > kConditionCount) throw ConfigError("condition id must be in 1..15, got " + std::to_string(id));
  std::string out;
  const std::pair<Flag, const char*> names[] = {{kHaze, "haze"}, {kRain, "rain"}, {kSnow, "snow"}, {kNight, "night"}};
  for (const auto& [f, n] : names) {
    if (id & f) out += (out.empty() ? "" : "+") + std::string(n);
  }
  return out;
}

std::vector<unsigned> all_conditions() {
  std::vector<unsigned> ids;
  for (unsigned i = 1; i <= kConditionCount; ++i) ids.push_back(i);
  return ids;
}

DegradationRecipe DegradationRecipe::defaults(unsigned id, std::uint64_t seed) {
  condition_name(id);
  DegradationRecipe r;
  r.id = id;
  r.seed = seed;
  return r;
}

DegradationRecipe DegradationRecipe::sample(unsigned id, std::uint64_t seed) {
  DegradationRecipe r = defaults(id, seed);
  std::mt19937_64 rng(mix(seed, 0xdeca));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  r.haze.beta = 1.2 + 0.25 * u(rng);
  const double air = 0.85 + 0.1 * u(rng);
  for (auto& a : r.haze.airlight) a = std::clamp(air + 0.03 * u(rng), 0.7, 1.0);
  r.rain.angle_deg = 20.0 * u(rng);
  r.rain.intensity = 0.6 + 0.1 * u(rng);
  r.rain.length = 8.0 + 2.0 * u(rng);
  r.rain.velocity = 6.0 + 1.5 * u(rng);
  r.rain.density = 6.0 + 1.5 * u(rng);
  r.snow.density = 8.0 + 2.0 * u(rng);
  r.snow.drift = 1.5 + 0.5 * u(rng);
  r.night.gamma = 2.0 + 0.2 * u(rng);
  r.night.scale = 0.6 + 0.08 * u(rng);
  return r;
}

json DegradationRecipe::to_json() const {
  return json{{"id", id},
              {"name", condition_name(id)},
              {"seed", seed},
              {"flags", {{"haze", has(kHaze)}, {"rain", has(kRain)}, {"snow", has(kSnow)}, {"night", has(kNight)}}},
              {"haze", {{"beta", haze.beta}, {"airlight", haze.airlight}}},
              {"rain",
               {{"density", rain.density},
                {"angle_deg", rain.angle_deg},
                {"length", rain.length},
                {"velocity", rain.velocity},
                {"intensity", rain.intensity}}},
              {"snow",
               {{"density", snow.density},
                {"radius_min", snow.radius_min},
                {"radius_max", snow.radius_max},
                {"drift", snow.drift},
                {"flutter", snow.flutter}}},
              {"night", {{"gamma", night.gamma}, {"scale", night.scale}, {"sigma", night.sigma}}}};
}

DegradationRecipe DegradationRecipe::from_json(const json& j) {
  try {
    DegradationRecipe r = defaults(j.at("id").get<unsigned>(), j.at("seed").get<std::uint64_t>());
    r.haze.beta = j.at("haze").at("beta");
    r.haze.airlight = j.at("haze").at("airlight").get<std::array<double, 3>>();
    const auto& rn = j.at("rain");
    r.rain = {rn.at("density"), rn.at("angle_deg"), rn.at("length"), rn.at("velocity"), rn.at("intensity")};
    const auto& sn = j.at("snow");
    r.snow = {sn.at("density"), sn.at("radius_min"), sn.at("radius_max"), sn.at("drift"), sn.at("flutter")};
    const auto& nt = j.at("night");
    r.night = {nt.at("gamma"), nt.at("scale"), nt.at("sigma")};
    return r;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed recipe: ") + e.what());
  }
}

Clip render_clean_clip(std::uint64_t seed, std::size_t frames, std::size_t H, std::size_t W) {
  if (frames < 3) throw ConfigError("a clip needs at least 3 frames");
  if (H == 0 || W == 0) throw ConfigError("frame size must be positive");
  Scene scene = make_scene(seed, frames, H, W);
  Clip clip;
  clip.seed = seed;
  for (std::size_t t = 0; t < frames; ++t) {
    Image rgb({H, W, 3}, 0.0), depth({H, W, 1}, 0.0);
    auto px = rgb.mutable_data();
    auto dp = depth.mutable_data();
    const double oy = scene.vy * static_cast<double>(t), ox = scene.vx * static_cast<double>(t);
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        // 2x2 supersampling.
        double acc[3] = {0, 0, 0}, dacc = 0;
        for (double sy : {0.25, 0.75})
          for (double sx : {0.25, 0.75}) {
            double s[3], d;
            scene.sample(r + sy + oy, c + sx + ox, s, &d);
            for (int k = 0; k < 3; ++k) acc[k] += 0.25 * s[k];
            dacc += 0.25 * d;
          }
        for (int k = 0; k < 3; ++k) px[(r * W + c) * 3 + k] = acc[k];
        dp[r * W + c] = dacc;
      }
    clip.clean.push_back(std::move(rgb));
    clip.depth.push_back(std::move(depth));
  }
  return clip;
}

Image apply_haze(const Image& frame, const Image& depth, double beta, const std::array<double, 3>& airlight) {
  require_frame(frame, "apply_haze");
  if (depth.numel() * 3 != frame.numel()) throw DimensionError("apply_haze: depth map size");
  Image out = blank(frame);
  auto o = out.mutable_data();
  auto f = frame.data();
  auto d = depth.data();
  for (std::size_t p = 0; p < d.size(); ++p) {
    const double t = std::exp(-beta * d[p]);
    for (int c = 0; c < 3; ++c) o[p * 3 + c] = f[p * 3 + c] * t + airlight[c] * (1.0 - t);
  }
  return out;
}

Image apply_rain(const Image& frame, std::size_t t, const RainParams& params, std::uint64_t seed) {
  require_frame(frame, "apply_rain");
  const double H = static_cast<double>(frame.dim(0)), W = static_cast<double>(frame.dim(1));
  const auto n = static_cast<std::size_t>(std::lround(params.density * H * W / 1000.0));
  Image out = frame.clone();
  if (n == 0 || params.intensity <= 0.0) return out;

  const double th = params.angle_deg * std::numbers::pi / 180.0;
  const double dy = std::cos(th), dx = std::sin(th);
  const double L = params.length;
  const double span_y = H + 2 * L, span_x = W + 2 * L;
  std::mt19937_64 rng(mix(seed, 0x7a1));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<double> streak(frame.dim(0) * frame.dim(1), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double y0 = u01(rng) * span_y, x0 = u01(rng) * span_x;
    const double brightness = 0.7 + 0.3 * u01(rng);
    // Head position advected along the fall direction, wrapped to keep density fixed.
    const double hy = std::fmod(y0 + params.velocity * dy * static_cast<double>(t), span_y) - L;
    const double hx = std::fmod(std::fmod(x0 + params.velocity * dx * static_cast<double>(t), span_x) + span_x, span_x) - L;
    const double ty = hy - L * dy, tx = hx - L * dx;
    for (std::size_t r = 0; r < frame.dim(0); ++r)
      for (std::size_t c = 0; c < frame.dim(1); ++c) {
        const double py = r + 0.5, qx = c + 0.5;
        const double vy = hy - ty, vx = hx - tx;
        double s = ((py - ty) * vy + (qx - tx) * vx) / (vy * vy + vx * vx);
        s = std::clamp(s, 0.0, 1.0);
        const double ey = ty + s * vy - py, ex = tx + s * vx - qx;
        const double cover = std::max(0.0, 1.0 - std::sqrt(ey * ey + ex * ex) / 0.75);
        double& m = streak[r * frame.dim(1) + c];
        m = std::max(m, cover * brightness * (0.4 + 0.6 * s));
      }
  }
  auto o = out.mutable_data();
  for (std::size_t p = 0; p < streak.size(); ++p)
    for (int c = 0; c < 3; ++c) o[p * 3 + c] = clamp01(o[p * 3 + c] + params.intensity * streak[p]);
  return out;
}

Image apply_snow(const Image& frame, std::size_t t, const SnowParams& params, std::uint64_t seed) {
  require_frame(frame, "apply_snow");
  const double H = static_cast<double>(frame.dim(0)), W = static_cast<double>(frame.dim(1));
  const auto n = static_cast<std::size_t>(std::lround(params.density * H * W / 1000.0));
  Image out = frame.clone();
  if (n == 0) return out;
  const double pad = params.radius_max + params.flutter + 1.0;
  const double span_y = H + 2 * pad, span_x = W + 2 * pad;
  std::mt19937_64 rng(mix(seed, 0x5e0));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto o = out.mutable_data();
  const double tt = static_cast<double>(t);
  for (std::size_t i = 0; i < n; ++i) {
    const double radius = params.radius_min + (params.radius_max - params.radius_min) * u01(rng);
    const double y0 = u01(rng) * span_y, x0 = u01(rng) * span_x;
    const double omega = 0.5 + u01(rng), phase = 2 * std::numbers::pi * u01(rng);
    const double speed = params.drift * (0.6 + 0.4 * radius / params.radius_max);
    const double cy = std::fmod(y0 + speed * tt, span_y) - pad;
    const double cx = std::fmod(x0 + params.flutter * std::sin(omega * tt + phase) + span_x, span_x) - pad;
    const double opacity = 0.75 + 0.2 * u01(rng);
    const long r0 = std::max(0L, static_cast<long>(std::floor(cy - radius - 1)));
    const long r1 = std::min(static_cast<long>(H) - 1, static_cast<long>(std::ceil(cy + radius + 1)));
    const long c0 = std::max(0L, static_cast<long>(std::floor(cx - radius - 1)));
    const long c1 = std::min(static_cast<long>(W) - 1, static_cast<long>(std::ceil(cx + radius + 1)));
    for (long r = r0; r <= r1; ++r)
      for (long c = c0; c <= c1; ++c) {
        const double d = std::hypot(r + 0.5 - cy, c + 0.5 - cx) / (radius + 0.5);
        if (d >= 1.0) continue;
        const double a = opacity * (1.0 - d) * (1.0 - d) * (1.0 + 2.0 * d);  // smooth falloff
        for (int k = 0; k < 3; ++k) {
          double& v = o[(r * static_cast<long>(W) + c) * 3 + k];
          v = clamp01(v * (1.0 - a) + 0.95 * a);
        }
      }
  }
  return out;
}

Image apply_night(const Image& frame, double gamma, double scale, double sigma, std::uint64_t seed) {
  require_frame(frame, "apply_night");
  if (gamma < 1.0 || !(scale > 0.0) || scale > 1.0 || sigma < 0.0) {
    throw ConfigError("night needs gamma >= 1, scale in (0,1], sigma >= 0");
  }
  Image out = blank(frame);
  auto o = out.mutable_data();
  auto f = frame.data();
  std::mt19937_64 rng(mix(seed, 0x419));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double n = sigma > 0.0 ? sigma * noise(rng) : 0.0;
    o[i] = clamp01(scale * std::pow(f[i], gamma) + n);
  }
  return out;
}

Clip degrade(const Clip& clean, const DegradationRecipe& recipe, std::uint64_t seed) {
  condition_name(recipe.id);
  Clip out = clean;
  out.recipe = recipe;
  out.degraded.clear();
  for (std::size_t t = 0; t < clean.clean.size(); ++t) {
    Image f = clean.clean[t];
    if (recipe.has(kNight)) f = apply_night(f, recipe.night.gamma, recipe.night.scale, recipe.night.sigma, mix(seed, t));
    if (recipe.has(kHaze)) {
      // At night the ambient airlight is dimmed like the scene itself.
      std::array<double, 3> air = recipe.haze.airlight;
      if (recipe.has(kNight))
        for (double& a : air) a *= recipe.night.scale;
      f = apply_haze(f, clean.depth.at(t), recipe.haze.beta, air);
    }
    if (recipe.has(kSnow)) f = apply_snow(f, t, recipe.snow, seed);
    if (recipe.has(kRain)) f = apply_rain(f, t, recipe.rain, seed);
    out.degraded.push_back(std::move(f));
  }
  return out;
}

json DatasetConfig::to_json() const {
  return json{{"conditions", conditions}, {"clips_per_condition", clips_per_condition},
              {"frames", frames},         {"height", height},
              {"width", width},           {"seed", seed},
              {"train_fraction", train_fraction}};
}

DatasetConfig DatasetConfig::from_json(const json& j) {
  DatasetConfig cfg;
  if (!j.is_object()) throw ConfigError("dataset config must be an object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "conditions") {
        cfg.conditions = value.is_string() && value.get<std::string>() == "all" ? all_conditions()
                                                                                : value.get<std::vector<unsigned>>();
      } else if (key == "clips_per_condition") {
        cfg.clips_per_condition = value.get<std::size_t>();
      } else if (key == "frames") {
        cfg.frames = value.get<std::size_t>();
      } else if (key == "height") {
        cfg.height = value.get<std::size_t>();
      } else if (key == "width") {
        cfg.width = value.get<std::size_t>();
      } else if (key == "seed") {
        cfg.seed = value.get<std::uint64_t>();
      } else if (key == "train_fraction") {
        cfg.train_fraction = value.get<double>();
      } else {
        throw ConfigError("unknown data key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("data config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void DatasetConfig::validate() const {
  if (conditions.empty()) throw ConfigError("no conditions selected");
  std::set<unsigned> seen;
  for (unsigned id : conditions) {
    condition_name(id);
    if (!seen.insert(id).second) throw ConfigError("condition " + std::to_string(id) + " listed twice");
  }
  if (clips_per_condition == 0) throw ConfigError("clips_per_condition must be positive");
  if (frames < 3) throw ConfigError("clips need at least 3 frames");
  if (height == 0 || width == 0 || height % 4 || width % 4) throw ConfigError("frame size must be a positive multiple of 4");
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw ConfigError("train_fraction must be in [0,1]");
}

std::uint64_t derive_seed(std::uint64_t master, unsigned condition, std::size_t clip) {
  return mix(mix(master, condition), clip);
}

namespace {

std::string frame_name(std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04zu.png", t);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace

DatasetSummary make_dataset(const DatasetConfig& cfg, const fs::path& out_dir, bool force) {
  cfg.validate();
  std::error_code ec;
  if (fs::exists(out_dir) && !fs::is_empty(out_dir)) {
    if (!force) throw IoError("output directory " + out_dir.string() + " is not empty (use force)");
    for (const char* sub : {"train", "test"}) fs::remove_all(out_dir / sub, ec);
    fs::remove(out_dir / "dataset.json", ec);
  }
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create " + out_dir.string());

  const std::size_t total = cfg.conditions.size() * cfg.clips_per_condition;
  const auto n_train = static_cast<std::size_t>(std::lround(cfg.train_fraction * static_cast<double>(total)));
  DatasetSummary summary;
  std::size_t order = 0;
  for (std::size_t clip = 0; clip < cfg.clips_per_condition; ++clip) {
    for (unsigned cond : cfg.conditions) {
      const bool train = order++ < n_train;
      const std::uint64_t seed = derive_seed(cfg.seed, cond, clip);
      Clip clean = render_clean_clip(seed, cfg.frames, cfg.height, cfg.width);
      const DegradationRecipe recipe = DegradationRecipe::sample(cond, mix(seed, 1));
      Clip clip_data = degrade(clean, recipe, recipe.seed);

      const fs::path dir = out_dir / (train ? "train" : "test") / ("cond_" + std::to_string(cond)) /
                           ("clip_" + std::to_string(clip));
      fs::create_directories(dir / "gt", ec);
      fs::create_directories(dir / "in", ec);
      if (ec) throw IoError("cannot create " + dir.string());
      for (std::size_t t = 0; t < cfg.frames; ++t) {
        write_png(dir / "gt" / frame_name(t), clip_data.clean[t]);
        write_png(dir / "in" / frame_name(t), clip_data.degraded[t]);
      }
      json meta = recipe.to_json();
      meta["clip_seed"] = seed;
      write_text(dir / "recipe.json", meta.dump(2) + "\n");
      (train ? summary.train_clips : summary.test_clips)++;
    }
  }
  write_text(out_dir / "dataset.json", cfg.to_json().dump(2) + "\n");
  return summary;
}

std::vector<ClipRecord> load_split(const fs::path& split_dir) {
  if (!fs::is_directory(split_dir)) throw IoError("dataset split not found: " + split_dir.string());
  std::vector<ClipRecord> clips;
  for (const auto& cond_entry : fs::directory_iterator(split_dir)) {
    const std::string cname = cond_entry.path().filename().string();
    if (!cond_entry.is_directory() || cname.rfind("cond_", 0) != 0) continue;
    for (const auto& clip_entry : fs::directory_iterator(cond_entry.path())) {
      const std::string kname = clip_entry.path().filename().string();
      if (!clip_entry.is_directory() || kname.rfind("clip_", 0) != 0) continue;
      ClipRecord rec;
      rec.dir = clip_entry.path();
      try {
        rec.condition = static_cast<unsigned>(std::stoul(cname.substr(5)));
        rec.clip = std::stoul(kname.substr(5));
      } catch (const std::exception&) {
        throw IoError("unexpected dataset entry " + rec.dir.string());
      }
      const fs::path recipe_path = rec.dir / "recipe.json";
      std::ifstream rf(recipe_path);
      if (!rf) throw IoError("missing " + recipe_path.string());
      try {
        rec.recipe = DegradationRecipe::from_json(json::parse(rf));
      } catch (const std::exception& e) {
        throw IoError("corrupt " + recipe_path.string() + ": " + e.what());
      }
      for (std::size_t t = 0;; ++t) {
        const fs::path gt = rec.dir / "gt" / frame_name(t), in = rec.dir / "in" / frame_name(t);
        const bool has_gt = fs::exists(gt), has_in = fs::exists(in);
        if (!has_gt && !has_in) break;
        if (!has_gt || !has_in) throw IoError("unpaired frame " + (has_gt ? in : gt).string());
        rec.gt.push_back(read_png(gt));
        rec.in.push_back(read_png(in));
        if (rec.gt.back().shape() != rec.in.back().shape()) throw IoError("frame size mismatch at " + in.string());
      }
      if (rec.gt.size() < 3) throw IoError("clip " + rec.dir.string() + " has fewer than 3 frames");
      clips.push_back(std::move(rec));
    }
  }
  std::sort(clips.begin(), clips.end(), [](const ClipRecord& a, const ClipRecord& b) {
    return a.clip != b.clip ? a.clip < b.clip : a.condition < b.condition;
  });
  return clips;
}

}  // namespace uniwrv::weathergen
