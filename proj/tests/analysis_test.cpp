// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "uniwrv/analysis.hpp"
#include "uniwrv/errors.hpp"
#include "uniwrv/tensorkit/gradcheck.hpp"

namespace an = uniwrv::analysis;
namespace tk = uniwrv::tensorkit;
namespace md = uniwrv::model;
namespace wg = uniwrv::weathergen;
namespace fs = std::filesystem;
using tk::Tensor;

namespace {

// Brute force: direct 2D window per pixel, no separability, no helpers shared
// with the library.
double ssim_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t H = a.dim(0), W = a.dim(1);
  auto lum = [](const Tensor& t, std::size_t r, std::size_t c) {
    return 0.299 * t.at(r, c, 0) + 0.587 * t.at(r, c, 1) + 0.114 * t.at(r, c, 2);
  };
  double w[11][11], wsum = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / 4.5);
      wsum += w[i][j];
    }
  double total = 0;
  std::size_t count = 0;
  for (std::size_t r = 0; r + 11 <= H; ++r)
    for (std::size_t c = 0; c + 11 <= W; ++c) {
      double mx = 0, my = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          mx += w[i][j] / wsum * lum(a, r + i, c + j);
          my += w[i][j] / wsum * lum(b, r + i, c + j);
        }
      double vx = 0, vy = 0, cov = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double dx = lum(a, r + i, c + j) - mx, dy = lum(b, r + i, c + j) - my;
          vx += w[i][j] / wsum * dx * dx;
          vy += w[i][j] / wsum * dy * dy;
          cov += w[i][j] / wsum * dx * dy;
        }
      const double c1 = 1e-4, c2 = 9e-4;
      total += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

double psnr_oracle(const Tensor& a, const Tensor& b) {
  long double se = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) se += (static_cast<long double>(a[i]) - b[i]) * (a[i] - b[i]);
  return static_cast<double>(-10.0L * std::log10(se / a.numel()));
}

Tensor textured(std::uint64_t seed, std::size_t H, std::size_t W) {
  std::mt19937_64 rng(seed);
  return tk::random_tensor(rng, {H, W, 3}, 0.0, 1.0);
}

}  // namespace

TEST(Psnr, ClosedForms) {
  Tensor a({8, 8, 3}, 0.3);
  EXPECT_EQ(an::psnr(a, a), 99.0);
  Tensor b({8, 8, 3}, 0.4);
  EXPECT_NEAR(an::psnr(a, b), 20.0, 1e-12);
  EXPECT_EQ(an::psnr(Tensor({4, 4, 3}, 0.0), Tensor({4, 4, 3}, 1.0)), 0.0);
  EXPECT_THROW(an::psnr(a, Tensor({8, 4, 3}, 0.0)), uniwrv::DimensionError);
}

TEST(Psnr, MatchesBruteForce) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Tensor a = textured(s, 16, 20), b = textured(100 + s, 16, 20);
    EXPECT_NEAR(an::psnr(a, b), psnr_oracle(a, b), 1e-8);
  }
}

TEST(Ssim, IdenticalIsOne) {
  Tensor a = textured(1, 24, 24);
  EXPECT_DOUBLE_EQ(an::ssim(a, a), 1.0);
}

TEST(Ssim, MatchesBruteForce) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Tensor a = textured(s, 16, 19);
    Tensor b = a.clone();
    std::mt19937_64 rng(50 + s);
    std::normal_distribution<double> n(0.0, 0.1 * (1 + s % 3));
    for (double& v : b.mutable_data()) v = std::min(1.0, std::max(0.0, v + n(rng)));
    EXPECT_NEAR(an::ssim(a, b), ssim_oracle(a, b), 1e-8);
  }
}

TEST(Ssim, SymmetricAndInvertedIsLow) {
  Tensor a = textured(7, 20, 20);
  Tensor inv = a.clone();
  for (double& v : inv.mutable_data()) v = 1.0 - v;
  EXPECT_LT(an::ssim(a, inv), 0.3);
  Tensor b = textured(8, 20, 20);
  EXPECT_NEAR(an::ssim(a, b), an::ssim(b, a), 1e-10);
  EXPECT_THROW(an::ssim(Tensor({10, 20, 3}, 0.0), Tensor({10, 20, 3}, 0.0)), uniwrv::DimensionError);
}

TEST(Complexity, SingleConvExample) {
  const an::ConvShape conv{"c", 3, 4, 4, 16, 16};
  std::span<const an::ConvShape> one(&conv, 1);
  EXPECT_EQ(an::count_complexity(one, 3, an::Scheme::kStatic).params, 144u);
  EXPECT_EQ(an::count_complexity(one, 3, an::Scheme::kVanillaRouting).params, 432u);
  EXPECT_EQ(an::count_complexity(one, 3, an::Scheme::kParameterRouting).params, 432u);
  EXPECT_EQ(an::count_complexity(one, 3, an::Scheme::kModifyWeight).params, 186u);
}

TEST(Complexity, MacRelationsAtSixtyFour) {
  const an::ConvShape conv{"c", 3, 4, 4, 64, 64};
  std::span<const an::ConvShape> one(&conv, 1);
  const auto st = an::count_complexity(one, 3, an::Scheme::kStatic);
  const auto va = an::count_complexity(one, 3, an::Scheme::kVanillaRouting);
  const auto pr = an::count_complexity(one, 3, an::Scheme::kParameterRouting);
  const auto mw = an::count_complexity(one, 3, an::Scheme::kModifyWeight);
  EXPECT_EQ(st.macs, 64u * 64u * 144u);
  EXPECT_EQ(va.macs, 3 * st.macs);
  EXPECT_EQ(pr.macs, st.macs + 3 * 144u);
  EXPECT_EQ(mw.macs - 4 * 144u, st.macs);  // spatial part identical to static
}

TEST(Complexity, DeskConfigOverheadAndOrdering) {
  md::ModelConfig cfg;
  const auto convs = an::dra_convolutions(cfg, 64, 64);
  ASSERT_EQ(convs.size(), 8u);
  std::uint64_t overhead = 0;
  for (const auto& c : convs) overhead += cfg.dma.paths * (2 * c.k + c.cin + c.cout);
  const auto st = an::count_complexity(cfg, 64, 64, an::Scheme::kStatic);
  const auto va = an::count_complexity(cfg, 64, 64, an::Scheme::kVanillaRouting);
  const auto pr = an::count_complexity(cfg, 64, 64, an::Scheme::kParameterRouting);
  const auto mw = an::count_complexity(cfg, 64, 64, an::Scheme::kModifyWeight);
  EXPECT_EQ(mw.params - st.params, overhead);
  EXPECT_EQ(va.params, pr.params);
  EXPECT_LT(2 * mw.params, va.params);
  const double ratio = static_cast<double>(va.macs) / static_cast<double>(pr.macs);
  EXPECT_GE(ratio, 0.9 * 3);
  EXPECT_LE(ratio, 1.1 * 3);
}

TEST(Complexity, DraConvolutionsMatchModelParameters) {
  md::ModelConfig cfg;
  md::Model m(cfg);
  const auto convs = an::dra_convolutions(cfg, 32, 32);
  std::uint64_t weights = 0, mods = 0;
  for (const auto& [name, t] : m.parameters()) {
    if (name.rfind("dra", 0) != 0) continue;
    if (name.size() > 7 && name.substr(name.size() - 7) == ".weight" && name.find("controller") == std::string::npos)
      weights += t.numel();
    if (name.find(".mod_") != std::string::npos) mods += t.numel();
  }
  const auto st = an::count_complexity(convs, cfg.dma.paths, an::Scheme::kStatic);
  const auto mw = an::count_complexity(convs, cfg.dma.paths, an::Scheme::kModifyWeight);
  EXPECT_EQ(st.params, weights);
  EXPECT_EQ(mw.params - st.params, mods);
}

TEST(Purity, ClosedCases) {
  const std::vector<std::size_t> a{1, 1, 1, 2, 2, 3, 4, 5};
  EXPECT_DOUBLE_EQ(an::dominant_prior_purity(a), 6.0 / 8.0);
  const std::vector<std::size_t> b{0, 0, 0};
  EXPECT_DOUBLE_EQ(an::dominant_prior_purity(b), 1.0);
  EXPECT_DOUBLE_EQ(an::dominant_prior_purity(std::span<const std::size_t>{}), 0.0);
}

TEST(Purity, UniformIndicesApproachChance) {
  // iid uniform indices over P_n entries: the empirical top-3 overshoots 3/P_n
  // by a selection bias that shrinks as the sample grows.
  std::mt19937_64 rng(3);
  const std::size_t Pn = 8;
  std::uniform_int_distribution<std::size_t> pick(0, Pn - 1);
  auto mc = [&](std::size_t n, int reps) {
    double mean = 0;
    for (int r = 0; r < reps; ++r) {
      std::vector<std::size_t> idx(n);
      for (auto& i : idx) i = pick(rng);
      mean += an::dominant_prior_purity(idx) / reps;
    }
    return mean;
  };
  const double small = mc(48, 400), large = mc(40000, 20);
  EXPECT_NEAR(large, 3.0 / Pn, 0.01);
  EXPECT_GT(small, large);
  EXPECT_LT(small, 0.6);
}

class ReportFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "uniwrv_analysis_report";
    fs::remove_all(dir_);
    wg::DatasetConfig cfg;
    cfg.conditions = {1, 2, 6};
    cfg.clips_per_condition = 2;
    cfg.frames = 5;
    cfg.height = cfg.width = 16;
    cfg.train_fraction = 0.5;
    wg::make_dataset(cfg, dir_);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static md::ModelConfig tiny() {
    md::ModelConfig c;
    c.channels = 4;
    c.blocks = 1;
    c.prior_entries = 4;
    c.dma = uniwrv::dra::DmaConfig{2, 3, 2, 2, 3};
    c.flow_hidden = 4;
    c.crop = 8;
    return c;
  }
  static fs::path dir_;
};
fs::path ReportFixture::dir_;

TEST_F(ReportFixture, IdentityModelEvaluatesToDegradedScores) {
  md::Model m(tiny());
  const auto clips = wg::load_split(dir_ / "test");
  const auto out = dir_ / "eval_images";
  const auto summary = an::evaluate(m, clips, {0, out});
  ASSERT_EQ(summary.rows.size(), 3u * 3u);
  for (const auto& r : summary.rows) {
    EXPECT_NEAR(r.psnr, r.psnr_degraded, 1e-6);
    EXPECT_NEAR(r.ssim, r.ssim_degraded, 1e-12);
  }
  ASSERT_EQ(summary.means.size(), 4u);
  EXPECT_EQ(summary.means.back().label, "all");
  EXPECT_EQ(summary.means.back().count, 9u);
  EXPECT_TRUE(fs::exists(out / "cond_6" / "clip_1" / "frame_0003.png"));
  an::write_metrics_csv(summary, dir_ / "metrics.csv");
  std::ifstream f(dir_ / "metrics.csv");
  std::string header;
  std::getline(f, header);
  EXPECT_EQ(header, "condition,clip,frame,psnr_degraded,ssim_degraded,psnr,ssim");
}

TEST_F(ReportFixture, SpecializationCoversEveryCondition) {
  md::Model m(tiny());
  const auto clips = wg::load_split(dir_ / "train");
  const auto report = an::specialization_report(m, clips, 3);
  ASSERT_EQ(report.conditions.size(), 3u);
  EXPECT_EQ(report.deepest_layer, 2u);
  for (const auto& s : report.conditions) {
    EXPECT_EQ(s.samples, 3u);
    ASSERT_EQ(s.mean_alpha.size(), 2u);
    for (const auto& row : s.mean_alpha) {
      double sum = 0;
      for (double v : row) sum += v;
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
    for (const auto& counts : s.prior_counts) {
      std::uint64_t n = 0;
      for (auto c : counts) n += c;
      EXPECT_EQ(n, 3u);
    }
    EXPECT_GE(s.deepest_purity, 3.0 / 3.0 - 1e-12);  // 3 samples always fit in a top-3
  }
  an::write_specialization_csvs(report, dir_ / "inspect");
  for (const char* f : {"routing.csv", "priors.csv", "purity.csv"}) EXPECT_TRUE(fs::exists(dir_ / "inspect" / f));
}

TEST_F(ReportFixture, ComplexityCsv) {
  std::vector<an::ComplexityRow> rows;
  for (auto s : an::all_schemes()) rows.push_back(an::count_complexity(tiny(), 64, 64, s));
  an::write_complexity_csv(rows, dir_ / "complexity.csv");
  std::ifstream f(dir_ / "complexity.csv");
  std::string line;
  std::getline(f, line);
  EXPECT_EQ(line, "scheme,params,macs");
  std::getline(f, line);
  EXPECT_EQ(line.substr(0, 7), "static,");
}
