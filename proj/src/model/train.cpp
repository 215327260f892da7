// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "uniwrv/errors.hpp"
#include "uniwrv/model.hpp"
#include "uniwrv/tensorkit/ops.hpp"
#include "uniwrv/tensorkit/tape.hpp"

namespace uniwrv::model {

namespace tk = tensorkit;
namespace fs = std::filesystem;
using nlohmann::json;

json TrainConfig::to_json() const {
  return json{{"iterations", iterations},
              {"batch", batch},
              {"lr", lr},
              {"lr_min", lr_min},
              {"seed", seed},
              {"checkpoint_interval", checkpoint_interval},
              {"log_interval", log_interval},
              {"augment", augment},
              {"grad_mode_64bit", grad_mode_64bit}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train config must be an object");
  TrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "iterations") c.iterations = v.get<std::size_t>();
      else if (key == "batch") c.batch = v.get<std::size_t>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "lr_min") c.lr_min = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "checkpoint_interval") c.checkpoint_interval = v.get<std::size_t>();
      else if (key == "log_interval") c.log_interval = v.get<std::size_t>();
      else if (key == "augment") c.augment = v.get<bool>();
      else if (key == "grad_mode_64bit") c.grad_mode_64bit = v.get<bool>();
      else throw ConfigError("unknown train key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

void TrainConfig::validate() const {
  if (iterations == 0 || batch == 0) throw ConfigError("iterations and batch must be positive");
  if (!(lr > 0.0) || !(lr_min >= 0.0) || lr_min > lr) throw ConfigError("need 0 <= lr_min <= lr, lr > 0");
  if (log_interval == 0) throw ConfigError("log_interval must be positive");
}

double cosine_lr(double lr, double lr_min, std::size_t step, std::size_t total) {
  if (total <= 1 || step + 1 >= total) return lr_min;
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(total - 1);
  return lr_min + 0.5 * (lr - lr_min) * (1.0 + std::cos(phase));
}

Adam::Adam(ParameterList params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [_, t] : params_) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void Adam::step(double lr, bool keep_64bit) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = params_[p].second;
    auto w = t.mutable_data();
    auto& m = m_[p];
    auto& v = v_[p];
    const bool has = t.has_grad();
    std::span<const double> g = has ? t.grad() : std::span<const double>{};
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
    if (!keep_64bit) tk::round_to_float(t);
    t.zero_grad();
  }
}

Sample make_sample(const weathergen::ClipRecord& clip, std::size_t t) {
  if (t == 0 || t + 1 >= clip.in.size()) {
    throw UsageError("triplet centre " + std::to_string(t) + " out of range for " + clip.dir.string());
  }
  return {{clip.in[t - 1], clip.in[t], clip.in[t + 1]}, {clip.gt[t - 1], clip.gt[t], clip.gt[t + 1]}, clip.condition};
}

namespace {

// Crop, then flip and transpose by the same draw for every frame.
Tensor crop_frame(const Tensor& f, std::size_t y0, std::size_t x0, std::size_t n, bool hflip, bool vflip, bool transpose) {
  Tensor out({n, n, 3}, 0.0);
  auto o = out.mutable_data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      std::size_t rr = transpose ? c : r, cc = transpose ? r : c;
      if (vflip) rr = n - 1 - rr;
      if (hflip) cc = n - 1 - cc;
      for (std::size_t k = 0; k < 3; ++k) o[(r * n + c) * 3 + k] = f.at(y0 + rr, x0 + cc, k);
    }
  return out;
}

}  // namespace

Sample random_crop_sample(std::span<const weathergen::ClipRecord> clips, std::size_t crop, bool augment,
                          std::mt19937_64& rng) {
  if (clips.empty()) throw UsageError("no clips to sample from");
  const auto& clip = clips[std::uniform_int_distribution<std::size_t>(0, clips.size() - 1)(rng)];
  if (clip.in.size() < 3) throw IoError("clip " + clip.dir.string() + " has fewer than 3 frames");
  const std::size_t t = std::uniform_int_distribution<std::size_t>(1, clip.in.size() - 2)(rng);
  const std::size_t H = clip.in[t].dim(0), W = clip.in[t].dim(1);
  if (crop > H || crop > W) {
    throw ConfigError("crop " + std::to_string(crop) + " exceeds frame size " + tk::shape_str(clip.in[t].shape()));
  }
  const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, H - crop)(rng);
  const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, W - crop)(rng);
  bool hf = false, vf = false, tr = false;
  if (augment) {
    std::bernoulli_distribution coin(0.5);
    hf = coin(rng);
    vf = coin(rng);
    tr = coin(rng);
  }
  Sample s;
  s.condition = clip.condition;
  for (std::size_t k = 0; k < 3; ++k) {
    s.degraded[k] = crop_frame(clip.in[t - 1 + k], y0, x0, crop, hf, vf, tr);
    s.gt[k] = crop_frame(clip.gt[t - 1 + k], y0, x0, crop, hf, vf, tr);
  }
  return s;
}

StepStats train_step(Model& model, Adam& opt, std::span<const Sample> batch, double lr, bool keep_64bit,
                     std::mt19937_64& rng) {
  if (batch.empty()) throw UsageError("empty batch");
  StepStats stats;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const Sample& s : batch) {
    tk::Tape tape;
    tk::TapeScope scope(tape);
    LossBreakdown loss = compute_loss(model, s.degraded, s.gt, &rng);
    tape.backward(tk::scale(loss.total, inv));
    stats.total += loss.total.item() * inv;
    stats.l1 += loss.l1.item() * inv;
    stats.prior_vector += loss.prior_vector.item() * inv;
    stats.prior_contrastive += loss.prior_contrastive.item() * inv;
    stats.flow += loss.flow.item() * inv;
  }
  opt.step(lr, keep_64bit);
  return stats;
}

namespace {

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

std::string ckpt_name(std::size_t iteration) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%06zu.uwrv", iteration);
  return buf;
}

}  // namespace

TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg, const fs::path& dataset_dir,
                  const fs::path& out_dir) {
  mcfg.validate();
  tcfg.validate();
  const auto clips = weathergen::load_split(dataset_dir / "train");
  if (clips.empty()) throw IoError("no training clips under " + (dataset_dir / "train").string());

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir)) throw IoError("cannot create " + out_dir.string());
  write_json(out_dir / "config.json",
             json{{"model", mcfg.to_json()}, {"train", tcfg.to_json()}, {"data", dataset_dir.string()}});

  std::ofstream csv(out_dir / "metrics.csv");
  if (!csv) throw IoError("cannot write " + (out_dir / "metrics.csv").string());
  csv << "iteration,total,l1,prior_v,prior_c,flow,lr\n";

  Model model(mcfg);
  Adam opt(model.parameters());
  std::mt19937_64 data_rng(tcfg.seed);
  std::mt19937_64 gumbel_rng(tcfg.seed ^ 0x9e3779b97f4a7c15ULL);
  TrainResult result;
  std::vector<Sample> batch(tcfg.batch);
  for (std::size_t it = 0; it < tcfg.iterations; ++it) {
    const double lr = cosine_lr(tcfg.lr, tcfg.lr_min, it, tcfg.iterations);
    for (auto& s : batch) s = random_crop_sample(clips, mcfg.crop, tcfg.augment, data_rng);
    result.last = train_step(model, opt, batch, lr, tcfg.grad_mode_64bit, gumbel_rng);
    if (it % tcfg.log_interval == 0 || it + 1 == tcfg.iterations) {
      char line[256];
      std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", it, result.last.total, result.last.l1,
                    result.last.prior_vector, result.last.prior_contrastive, result.last.flow, lr);
      csv << line << std::flush;
    }
    if (tcfg.checkpoint_interval && (it + 1) % tcfg.checkpoint_interval == 0 && it + 1 < tcfg.iterations) {
      save_checkpoint(model, it + 1, out_dir / ckpt_name(it + 1));
    }
  }
  result.iterations = tcfg.iterations;
  result.final_checkpoint = out_dir / "final.uwrv";
  save_checkpoint(model, tcfg.iterations, result.final_checkpoint);
  return result;
}

}  // namespace uniwrv::model
