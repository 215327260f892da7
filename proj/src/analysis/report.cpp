// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>

#include "uniwrv/analysis.hpp"
#include "uniwrv/errors.hpp"
#include "uniwrv/tensorkit/tape.hpp"

namespace uniwrv::analysis {

namespace fs = std::filesystem;

namespace {

std::ofstream open_csv(const fs::path& path, const char* header) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << header << '\n';
  return f;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::size_t centre_count(const weathergen::ClipRecord& clip, std::size_t limit) {
  const std::size_t available = clip.in.size() >= 3 ? clip.in.size() - 2 : 0;
  return limit == 0 ? available : std::min(limit, available);
}

}  // namespace

EvalSummary evaluate(model::Model& model, std::span<const weathergen::ClipRecord> clips, const EvalOptions& opts) {
  EvalSummary summary;
  std::map<unsigned, EvalMean> per;
  EvalMean all{"all", 0};
  for (const auto& clip : clips) {
    const std::size_t n = centre_count(clip, opts.triplets_per_clip);
    for (std::size_t t = 1; t <= n; ++t) {
      const model::Sample s = model::make_sample(clip, t);
      const Tensor restored = model.restore(s.degraded);
      EvalRow row{clip.condition, clip.clip, t, psnr(s.degraded[1], s.gt[1]), ssim(s.degraded[1], s.gt[1]),
                  psnr(restored, s.gt[1]), ssim(restored, s.gt[1])};
      summary.rows.push_back(row);
      auto& m = per.try_emplace(clip.condition, EvalMean{weathergen::condition_name(clip.condition), clip.condition})
                    .first->second;
      for (EvalMean* acc : {&m, &all}) {
        acc->count++;
        acc->psnr_degraded += row.psnr_degraded;
        acc->ssim_degraded += row.ssim_degraded;
        acc->psnr += row.psnr;
        acc->ssim += row.ssim;
      }
      if (opts.image_dir) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%04zu.png", t);
        const fs::path dir = *opts.image_dir / ("cond_" + std::to_string(clip.condition)) /
                             ("clip_" + std::to_string(clip.clip));
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create " + dir.string());
        weathergen::write_png(dir / name, restored);
      }
    }
  }
  per.emplace(0u, all);  // sorts first; moved to the back below
  for (auto& [id, m] : per) {
    if (m.count == 0) continue;
    const double inv = 1.0 / static_cast<double>(m.count);
    m.psnr_degraded *= inv;
    m.ssim_degraded *= inv;
    m.psnr *= inv;
    m.ssim *= inv;
    if (id != 0) summary.means.push_back(m);
  }
  if (per.at(0).count) summary.means.push_back(per.at(0));
  return summary;
}

void write_metrics_csv(const EvalSummary& summary, const fs::path& path) {
  auto f = open_csv(path, "condition,clip,frame,psnr_degraded,ssim_degraded,psnr,ssim");
  for (const auto& r : summary.rows) {
    f << r.condition << ',' << r.clip << ',' << r.frame << ',' << fmt(r.psnr_degraded) << ',' << fmt(r.ssim_degraded)
      << ',' << fmt(r.psnr) << ',' << fmt(r.ssim) << '\n';
  }
  for (const auto& m : summary.means) {
    f << (m.condition ? std::to_string(m.condition) : std::string("all")) << ",mean,mean," << fmt(m.psnr_degraded) << ','
      << fmt(m.ssim_degraded) << ',' << fmt(m.psnr) << ',' << fmt(m.ssim) << '\n';
  }
  if (!f) throw IoError("write failed: " + path.string());
}

double dominant_prior_purity(std::span<const std::size_t> indices, std::size_t top) {
  if (indices.empty()) return 0.0;
  std::map<std::size_t, std::size_t> counts;
  for (std::size_t i : indices) counts[i]++;
  std::vector<std::pair<std::size_t, std::size_t>> order(counts.begin(), counts.end());
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::size_t hit = 0;
  for (std::size_t i = 0; i < std::min(top, order.size()); ++i) hit += order[i].second;
  return static_cast<double>(hit) / static_cast<double>(indices.size());
}

SpecializationReport specialization_report(model::Model& model, std::span<const weathergen::ClipRecord> clips,
                                           std::size_t samples_per_condition) {
  if (samples_per_condition == 0) throw ConfigError("samples_per_condition must be positive");
  const auto& cfg = model.config();
  const std::size_t layers = cfg.extraction_layers(), paths = cfg.dma.paths, entries = cfg.prior_entries;
  std::map<unsigned, ConditionStats> stats;
  std::map<unsigned, std::vector<std::vector<std::size_t>>> indices;
  tensorkit::NoTapeScope no_tape;
  for (const auto& clip : clips) {
    auto [it, fresh] = stats.try_emplace(clip.condition);
    ConditionStats& s = it->second;
    if (fresh) {
      s.condition = clip.condition;
      s.mean_alpha.assign(cfg.dma.layers, std::vector<double>(paths, 0.0));
      s.prior_counts.assign(layers, std::vector<std::uint64_t>(entries, 0));
      indices[clip.condition].assign(layers, {});
    }
    for (std::size_t t = 1; t + 1 < clip.in.size() && s.samples < samples_per_condition; ++t) {
      const model::Sample sample = model::make_sample(clip, t);
      const auto out = model.forward(sample.degraded);
      for (std::size_t n = 0; n < out.trace.alphas.size(); ++n)
        for (std::size_t p = 0; p < paths; ++p) s.mean_alpha[n][p] += out.trace.alphas[n][p];
      for (std::size_t l = 0; l < layers; ++l) {
        const std::size_t idx = out.trace.prior_indices.at(l);
        s.prior_counts[l].at(idx)++;
        indices[clip.condition][l].push_back(idx);
      }
      s.samples++;
    }
  }
  SpecializationReport report;
  report.deepest_layer = layers - 1;
  for (auto& [id, s] : stats) {
    if (s.samples == 0) continue;
    for (auto& row : s.mean_alpha)
      for (double& v : row) v /= static_cast<double>(s.samples);
    for (std::size_t l = 0; l < layers; ++l) s.purity.push_back(dominant_prior_purity(indices[id][l]));
    s.deepest_purity = s.purity.back();
    report.conditions.push_back(s);
  }
  return report;
}

SpecializationReport specialization_report(const fs::path& checkpoint, const fs::path& dataset_split,
                                           std::size_t samples_per_condition) {
  auto [model, meta] = model::load_checkpoint(checkpoint);
  const auto clips = weathergen::load_split(dataset_split);
  return specialization_report(model, clips, samples_per_condition);
}

void write_specialization_csvs(const SpecializationReport& report, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  auto routing = open_csv(dir / "routing.csv", "condition,layer,path,alpha");
  auto priors = open_csv(dir / "priors.csv", "condition,layer,index,count");
  auto purity = open_csv(dir / "purity.csv", "condition,layer,samples,purity_top3,deepest");
  for (const auto& s : report.conditions) {
    for (std::size_t n = 0; n < s.mean_alpha.size(); ++n)
      for (std::size_t p = 0; p < s.mean_alpha[n].size(); ++p)
        routing << s.condition << ',' << n << ',' << p << ',' << fmt(s.mean_alpha[n][p]) << '\n';
    for (std::size_t l = 0; l < s.prior_counts.size(); ++l) {
      for (std::size_t i = 0; i < s.prior_counts[l].size(); ++i)
        priors << s.condition << ',' << l << ',' << i << ',' << s.prior_counts[l][i] << '\n';
      purity << s.condition << ',' << l << ',' << s.samples << ',' << fmt(s.purity[l]) << ','
             << (l == report.deepest_layer ? 1 : 0) << '\n';
    }
  }
  if (!routing || !priors || !purity) throw IoError("failed writing report CSVs under " + dir.string());
}

}  // namespace uniwrv::analysis
