// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "uniwrv/errors.hpp"
#include "uniwrv/tensorkit/gradcheck.hpp"
#include "uniwrv/tensorkit/ops.hpp"
#include "uniwrv/tensorkit/tape.hpp"
#include "uniwrv/wpgm.hpp"

namespace tk = uniwrv::tensorkit;
using namespace uniwrv::wpgm;
using tk::Tensor;

namespace {

Tensor eye(std::size_t n) {
  Tensor t({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) t.mutable_data()[i * n + i] = 1.0;
  return t;
}

PriorBank bank_from(std::vector<double> values, std::size_t width) {
  const std::size_t n = values.size() / width;
  return PriorBank{0, Tensor({n, width}, std::move(values)), std::vector<std::uint64_t>(n, 0)};
}

// Independent oracle: pool, affine, relu, affine with explicit loops.
std::vector<double> embed_oracle(const Tensor& f, const MappingNet& net) {
  const std::size_t H = f.dim(0), W = f.dim(1), C = f.dim(2);
  std::vector<double> pooled(C, 0.0), hidden(C, 0.0), out(C, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) pooled[c] += f.at(y, x, c);
  for (double& p : pooled) p /= static_cast<double>(H * W);
  for (std::size_t j = 0; j < C; ++j) {
    double s = net.b1[j];
    for (std::size_t i = 0; i < C; ++i) s += pooled[i] * net.w1[i * C + j];
    hidden[j] = std::max(0.0, s);
  }
  for (std::size_t j = 0; j < C; ++j) {
    double s = net.b2[j];
    for (std::size_t i = 0; i < C; ++i) s += hidden[i] * net.w2[i * C + j];
    out[j] = s;
  }
  return out;
}

// Residual block oracle via direct 3x3 correlation.
std::vector<double> conv3_oracle(const Tensor& x, const Tensor& w, const Tensor& b) {
  const long H = x.dim(0), W = x.dim(1);
  const std::size_t Ci = x.dim(2), Co = w.dim(3);
  std::vector<double> out(H * W * Co, 0.0);
  for (long y = 0; y < H; ++y)
    for (long xx = 0; xx < W; ++xx)
      for (std::size_t o = 0; o < Co; ++o) {
        double s = b[o];
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx) {
            const long sy = y + dy, sx = xx + dx;
            if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
            for (std::size_t i = 0; i < Ci; ++i)
              s += x.at(sy, sx, i) * w[(((dy + 1) * 3 + (dx + 1)) * Ci + i) * Co + o];
          }
        out[(y * W + xx) * Co + o] = s;
      }
  return out;
}

class IdentityBlock final : public ExtractionBlock {
 public:
  explicit IdentityBlock(std::size_t c) : c_(c) {}
  Tensor forward(const Tensor& x) const override { return x; }
  void collect(ParameterList&, const std::string&) const override {}
  std::size_t channels() const override { return c_; }

 private:
  std::size_t c_;
};

PriorRecord record(std::vector<double> g, std::vector<double> q) {
  PriorRecord r;
  r.latent = Tensor::vector(std::move(g));
  r.prior = Tensor::vector(std::move(q));
  return r;
}

}  // namespace

TEST(Embed, ConstantFeatureThroughIdentityLayers) {
  MappingNet net{eye(3), Tensor({3}, 0.0), eye(3), Tensor({3}, 0.0)};
  Tensor g = embed(Tensor({4, 4, 3}, 0.7), net);
  for (double v : g.data()) EXPECT_DOUBLE_EQ(v, 0.7);
}

TEST(Embed, ZeroSecondLayerGivesItsBias) {
  std::mt19937_64 rng(3);
  MappingNet net = MappingNet::random(4, rng);
  net.w2 = Tensor({4, 4}, 0.0);
  net.b2 = Tensor::vector({0.1, -0.2, 0.3, 0.4});
  Tensor g = embed(tk::random_tensor(rng, {3, 3, 4}), net);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g[i], net.b2[i]);
}

TEST(Embed, MatchesDirectEvaluation) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    MappingNet net{tk::random_tensor(rng, {5, 5}), tk::random_tensor(rng, {5}), tk::random_tensor(rng, {5, 5}),
                   tk::random_tensor(rng, {5})};
    Tensor f = tk::random_tensor(rng, {4, 6, 5});
    Tensor g = embed(f, net);
    auto ref = embed_oracle(f, net);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(g[i], ref[i], 1e-10 * std::max(1.0, std::fabs(ref[i])));
  }
}

TEST(Embed, ChannelMismatch) {
  std::mt19937_64 rng(1);
  MappingNet net = MappingNet::random(4, rng);
  EXPECT_THROW(embed(Tensor({2, 2, 3}, 0.0), net), uniwrv::DimensionError);
}

TEST(Query, NearerEntryInL2) {
  PriorBank bank = bank_from({1, 0, 0, 1}, 2);
  EXPECT_EQ(query(Tensor::vector({0.9, 0.2}), bank).index, 0u);
}

TEST(Query, ExactMatchHasZeroDistance) {
  PriorBank bank = bank_from({1, 0, 0, 1, 0.5, 0.5}, 2);
  auto hit = query(Tensor::vector({0.5, 0.5}), bank);
  EXPECT_EQ(hit.index, 2u);
  EXPECT_EQ(hit.distance, 0.0);
  EXPECT_EQ(hit.prior[0], 0.5);
}

TEST(Query, TieGoesToLowestIndex) {
  // Entries 1 and 3 are both at distance 1 from the origin; 0 and 2 farther.
  PriorBank bank = bank_from({5, 5, 1, 0, -4, 4, 0, -1}, 2);
  EXPECT_EQ(query(Tensor::vector({0, 0}), bank).index, 1u);
}

TEST(Query, EmptyBankAndWidthErrors) {
  PriorBank empty;
  EXPECT_THROW(query(Tensor::vector({0, 0}), empty), uniwrv::ConfigError);
  PriorBank bank = bank_from({1, 0, 0, 1}, 2);
  EXPECT_THROW(query(Tensor::vector({0, 0, 0}), bank), uniwrv::DimensionError);
}

TEST(Query, AgreesWithExhaustiveScan) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::size_t> entries(2, 64), width(1, 16);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = entries(rng), c = width(rng);
    PriorBank bank = PriorBank::random(0, n, c, rng);
    Tensor g = tk::random_tensor(rng, {c});
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t i = 0; i < n; ++i) {
      double d = 0;
      for (std::size_t k = 0; k < c; ++k) d += std::pow(g[k] - bank.vectors[i * c + k], 2);
      if (d < best_d) best_d = d, best = i;
    }
    EXPECT_EQ(query(g, bank).index, best);
  }
}

TEST(BankUsage, CountsQueriesAndResets) {
  PriorBank bank = bank_from({1, 0, 0, 1, 5, 5}, 2);
  EXPECT_EQ(bank_usage(bank), (std::vector<std::uint64_t>{0, 0, 0}));
  for (int i = 0; i < 3; ++i) query(Tensor::vector({4, 4}), bank);
  query(Tensor::vector({1, 0}), bank);
  auto counts = bank_usage(bank, true);
  EXPECT_EQ(counts[2], 3u);
  EXPECT_EQ(counts[0] + counts[1] + counts[2], 4u);
  EXPECT_EQ(bank.queries_served(), 0u);
}

TEST(BankInit, EntriesInRangeAndAtLeastTwo) {
  std::mt19937_64 rng(5);
  PriorBank bank = PriorBank::random(0, 8, 6, rng);
  for (double v : bank.vectors.data()) {
    EXPECT_GE(v, -0.5);
    EXPECT_LE(v, 0.5);
  }
  EXPECT_THROW(PriorBank::random(0, 1, 6, rng), uniwrv::ConfigError);
}

TEST(WpgmForward, ZeroPriorEqualsBareBlock) {
  std::mt19937_64 rng(21);
  MappingNet net = MappingNet::random(3, rng);
  ResidualBlock block(3, rng);
  PriorBank bank = bank_from(std::vector<double>(6, 0.0), 3);
  Tensor f = tk::random_tensor(rng, {5, 5, 3});
  auto out = wpgm_forward(f, bank, net, block);
  Tensor bare = block.forward(f);
  for (std::size_t i = 0; i < bare.numel(); ++i) EXPECT_EQ(out.features[i], bare[i]);
}

TEST(WpgmForward, IdentityBlockAddsPrior) {
  std::mt19937_64 rng(22);
  MappingNet net = MappingNet::random(2, rng);
  IdentityBlock block(2);
  PriorBank bank = bank_from({0.3, -0.2, 0.3, -0.2}, 2);
  Tensor f = tk::random_tensor(rng, {3, 4, 2});
  auto out = wpgm_forward(f, bank, net, block);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_DOUBLE_EQ(out.features[i], f[i] + (i % 2 == 0 ? 0.3 : -0.2));
  EXPECT_EQ(out.record.index, 0u);
}

TEST(WpgmForward, MatchesHandComposition) {
  std::mt19937_64 rng(23);
  MappingNet net = MappingNet::random(3, rng);
  ResidualBlock block(3, rng);
  PriorBank bank = PriorBank::random(0, 4, 3, rng);
  Tensor f = tk::random_tensor(rng, {4, 5, 3});

  auto g = embed_oracle(f, net);
  std::size_t best = 0;
  double best_d = 1e300;
  for (std::size_t i = 0; i < 4; ++i) {
    double d = 0;
    for (std::size_t c = 0; c < 3; ++c) d += std::pow(g[c] - bank.vectors[i * 3 + c], 2);
    if (d < best_d) best_d = d, best = i;
  }
  std::vector<double> prompted(f.numel());
  for (std::size_t i = 0; i < f.numel(); ++i) prompted[i] = f[i] + bank.vectors[best * 3 + i % 3];
  Tensor p({4, 5, 3}, prompted);
  auto h = conv3_oracle(p, block.conv1(), block.bias1());
  for (double& v : h) v = std::max(0.0, v);
  auto y = conv3_oracle(Tensor({4, 5, 3}, h), block.conv2(), block.bias2());

  auto out = wpgm_forward(f, bank, net, block);
  EXPECT_EQ(out.record.index, best);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(out.features[i], prompted[i] + y[i], 1e-10);
}

TEST(WpgmForward, ChannelMismatch) {
  std::mt19937_64 rng(24);
  MappingNet net = MappingNet::random(3, rng);
  ResidualBlock block(4, rng);
  PriorBank bank = PriorBank::random(0, 4, 3, rng);
  EXPECT_THROW(wpgm_forward(Tensor({2, 2, 3}, 0.0), bank, net, block), uniwrv::DimensionError);
}

TEST(VectorLoss, ZeroWhenLatentEqualsPrior) {
  std::vector<PriorRecord> recs{record({0.2, -0.4, 0.9}, {0.2, -0.4, 0.9}), record({1, 2}, {1, 2})};
  EXPECT_NEAR(prior_vector_loss(recs, 0.25).value.item(), 0.0, 1e-15);
}

TEST(VectorLoss, OrthogonalPairClosedForm) {
  std::vector<PriorRecord> recs{record({1, 0}, {0, 1})};
  EXPECT_DOUBLE_EQ(prior_vector_loss(recs, 0.25).value.item(), 1.25);
}

TEST(VectorLoss, ScaleInvariantInPrior) {
  std::vector<PriorRecord> a{record({0.3, 0.8, -0.1}, {0.5, 0.1, 0.2})};
  std::vector<PriorRecord> b{record({0.3, 0.8, -0.1}, {2.5, 0.5, 1.0})};
  EXPECT_NEAR(prior_vector_loss(a, 0.25).value.item(), prior_vector_loss(b, 0.25).value.item(), 1e-14);
}

TEST(VectorLoss, ZeroVectorIsFlaggedNotFatal) {
  std::vector<PriorRecord> recs{record({0, 0}, {1, 0})};
  auto loss = prior_vector_loss(recs, 0.25);
  EXPECT_DOUBLE_EQ(loss.value.item(), 1.25);
  EXPECT_EQ(loss.degenerate_terms, 2u);
}

TEST(VectorLoss, BoundedByTwoPerTerm) {
  std::mt19937_64 rng(31);
  const double beta = 0.25;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<PriorRecord> recs;
    for (int l = 0; l < 6; ++l) {
      PriorRecord r;
      r.latent = tk::random_tensor(rng, {4});
      r.prior = tk::random_tensor(rng, {4});
      recs.push_back(r);
    }
    const double v = prior_vector_loss(recs, beta).value.item();
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, (1 + beta) * 2 * 6);
  }
}

TEST(ContrastiveLoss, SingleOrthogonalNegative) {
  Tensor bank({2, 2}, {1, 0, 0, 1});
  PriorRecord r{0, Tensor::vector({1, 0}), tk::select_row(bank, 0), 0, bank};
  EXPECT_NEAR(prior_contrastive_loss(std::span(&r, 1), 1.0).item(), -std::log(std::exp(1.0) / (std::exp(1.0) + 1)),
              1e-12);
  EXPECT_NEAR(prior_contrastive_loss(std::span(&r, 1), 1.0).item(), 0.3133, 1e-4);
}

TEST(ContrastiveLoss, IdenticalNegativesGiveLogBankSize) {
  Tensor bank({5, 3}, 0.0);
  for (std::size_t i = 0; i < 5; ++i) bank.mutable_data()[i * 3] = 1.0;
  PriorRecord r{0, Tensor::vector({2, 0, 0}), tk::select_row(bank, 3), 3, bank};
  EXPECT_NEAR(prior_contrastive_loss(std::span(&r, 1), 0.07).item(), std::log(5.0), 1e-12);
}

TEST(ContrastiveLoss, SmallTemperatureLimit) {
  Tensor bank({3, 2}, {1, 0, 0, 1, -1, 0});
  PriorRecord r{0, Tensor::vector({1, 0}), tk::select_row(bank, 0), 0, bank};
  EXPECT_LT(prior_contrastive_loss(std::span(&r, 1), 0.01).item(), 1e-3);
}

TEST(ContrastiveLoss, RejectsBadConfig) {
  Tensor bank({2, 2}, {1, 0, 0, 1});
  PriorRecord r{0, Tensor::vector({1, 0}), tk::select_row(bank, 0), 0, bank};
  EXPECT_THROW(prior_contrastive_loss(std::span(&r, 1), 0.0), uniwrv::ConfigError);
  EXPECT_THROW(prior_contrastive_loss(std::span(&r, 1), -1.0), uniwrv::ConfigError);
  Tensor single({1, 2}, {1, 0});
  PriorRecord s{0, Tensor::vector({1, 0}), tk::select_row(single, 0), 0, single};
  EXPECT_THROW(prior_contrastive_loss(std::span(&s, 1), 0.07), uniwrv::ConfigError);
}

TEST(ContrastiveLoss, InvariantToPositiveRescaling) {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> scale(0.1, 10.0);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor bank = tk::random_tensor(rng, {6, 4});
    Tensor g = tk::random_tensor(rng, {4});
    PriorRecord r{0, g, tk::select_row(bank, 2), 2, bank};
    const double base = prior_contrastive_loss(std::span(&r, 1), 0.07).item();

    Tensor bank2 = bank.clone();
    for (std::size_t i = 0; i < 6; ++i) {
      const double s = scale(rng);
      for (std::size_t c = 0; c < 4; ++c) bank2.mutable_data()[i * 4 + c] *= s;
    }
    PriorRecord r2{0, tk::scale(g, scale(rng)), tk::select_row(bank2, 2), 2, bank2};
    EXPECT_NEAR(prior_contrastive_loss(std::span(&r2, 1), 0.07).item(), base, 1e-10 * std::max(1.0, base));
  }
}

TEST(ContrastiveLoss, BoundedPerLayer) {
  std::mt19937_64 rng(42);
  const double tau = 0.07;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor bank = tk::random_tensor(rng, {8, 5});
    PriorRecord r{0, tk::random_tensor(rng, {5}), tk::select_row(bank, 1), 1, bank};
    const double v = prior_contrastive_loss(std::span(&r, 1), tau).item();
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 2 / tau + std::log(8.0));
  }
}

namespace {

struct Pipeline {
  std::mt19937_64 rng{77};
  WpgmLayer layer = WpgmLayer::make(0, 4, 6, rng);
  ParameterList params;
  Pipeline() {
    layer.collect(params, "wpgm");
    tk::mark_trainable(params);
  }
  bool mapping_grads_zero() const {
    for (const auto* t : {&layer.net.w1, &layer.net.b1, &layer.net.w2, &layer.net.b2})
      if (t->has_grad())
        for (double g : t->grad())
          if (g != 0.0) return false;
    return true;
  }
  std::vector<double> bank_grad() const {
    if (!layer.bank.vectors.has_grad()) return std::vector<double>(layer.bank.vectors.numel(), 0.0);
    return {layer.bank.vectors.grad().begin(), layer.bank.vectors.grad().end()};
  }
};

}  // namespace

TEST(GradientRouting, BankTermReachesOnlyBank) {
  Pipeline p;
  tk::Tape tape;
  {
    tk::TapeScope scope(tape);
    Tensor f = tk::random_tensor(p.rng, {4, 4, 4});
    auto out = p.layer.forward(f);
    auto loss = prior_vector_loss(std::span(&out.record, 1), 0.25);
    tape.backward(loss.bank_term);
  }
  EXPECT_TRUE(p.mapping_grads_zero());
  auto g = p.bank_grad();
  double norm = 0;
  for (double v : g) norm += std::fabs(v);
  EXPECT_GT(norm, 0.0);
}

TEST(GradientRouting, MappingTermNeverReachesBank) {
  Pipeline p;
  tk::Tape tape;
  {
    tk::TapeScope scope(tape);
    Tensor f = tk::random_tensor(p.rng, {4, 4, 4});
    auto out = p.layer.forward(f);
    auto loss = prior_vector_loss(std::span(&out.record, 1), 0.25);
    tape.backward(loss.mapping_term);
  }
  for (double v : p.bank_grad()) EXPECT_EQ(v, 0.0);
  EXPECT_FALSE(p.mapping_grads_zero());
}

TEST(GradientRouting, TaskLossReachesOnlySelectedEntry) {
  Pipeline p;
  tk::Tape tape;
  std::size_t selected = 0;
  {
    tk::TapeScope scope(tape);
    Tensor f = tk::random_tensor(p.rng, {4, 4, 4});
    Tensor target = tk::random_tensor(p.rng, {4, 4, 4});
    auto out = p.layer.forward(f);
    selected = out.record.index;
    tape.backward(tk::l1(out.features, target));
  }
  auto g = p.bank_grad();
  for (std::size_t i = 0; i < p.layer.bank.entries(); ++i) {
    double row = 0;
    for (std::size_t c = 0; c < 4; ++c) row += std::fabs(g[i * 4 + c]);
    if (i == selected) {
      EXPECT_GT(row, 0.0);
    } else {
      EXPECT_EQ(row, 0.0) << "entry " << i;
    }
  }
}

TEST(Gradcheck, PriorLossesAndModulePass) {
  register_gradchecks();
  for (const char* name : {"prior_vector_loss", "prior_contrastive_loss", "embed", "wpgm_forward"}) {
    auto report = tk::GradcheckRegistry::global().run(name, {});
    EXPECT_TRUE(report.passed) << name << " max error " << report.max_error;
  }
}
