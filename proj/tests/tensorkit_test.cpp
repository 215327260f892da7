// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <thread>

#include "uniwrv/errors.hpp"
#include "uniwrv/tensorkit/gradcheck.hpp"
#include "uniwrv/tensorkit/ops.hpp"
#include "uniwrv/tensorkit/tape.hpp"

using namespace uniwrv;
using namespace uniwrv::tensorkit;

namespace {

// Direct zero-padded correlation, written independently of ops.cpp.
std::vector<double> conv_oracle(const Tensor& x, const Tensor& w, int stride, int pad) {
  const int H = static_cast<int>(x.dim(0)), W = static_cast<int>(x.dim(1)), Ci = static_cast<int>(x.dim(2));
  const int k = static_cast<int>(w.dim(0)), Co = static_cast<int>(w.dim(3));
  const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  std::vector<double> out;
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox)
      for (int co = 0; co < Co; ++co) {
        double acc = 0.0;
        for (int a = 0; a < k; ++a)
          for (int b = 0; b < k; ++b)
            for (int ci = 0; ci < Ci; ++ci) {
              const int iy = oy * stride - pad + a, ix = ox * stride - pad + b;
              const double xv = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x.at(iy, ix, ci) : 0.0;
              acc += xv * w.data()[((a * k + b) * Ci + ci) * Co + co];
            }
        out.push_back(acc);
      }
  return out;
}

Tensor grid2x2() { return Tensor({2, 2, 1}, {0, 1, 2, 3}); }

}  // namespace

TEST(Conv2d, OneByOneKernelScales) {
  Tensor x({2, 2, 1}, {1, 2, 3, 4});
  Tensor w({1, 1, 1, 1}, {2});
  Tensor y = conv2d(x, w, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{2, 2, 1}));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{2, 4, 6, 8}));
}

TEST(Conv2d, OnesKernelOnConstantImage) {
  Tensor x({3, 3, 1}, 1.0);
  Tensor w({3, 3, 1, 1}, 1.0);
  Tensor y = conv2d(x, w, 1, 1);
  const auto expected = conv_oracle(x, w, 1, 1);
  ASSERT_EQ(expected, (std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4}));
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(y[i], expected[i]);
}

TEST(Conv2d, ZeroKernelGivesZeros) {
  std::mt19937_64 rng(3);
  Tensor y = conv2d(random_tensor(rng, {4, 4, 2}), Tensor({3, 3, 2, 3}, 0.0), 1, 1);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, ChannelMismatchIsDimensionError) {
  EXPECT_THROW(conv2d(Tensor({3, 3, 2}), Tensor({3, 3, 1, 1}), 1, 1), DimensionError);
}

TEST(Conv2d, MatchesNestedLoopOracleOnRandom5x5) {
  std::mt19937_64 rng(11);
  for (int stride : {1, 2}) {
    Tensor x = random_tensor(rng, {5, 5, 3});
    Tensor w = random_tensor(rng, {3, 3, 3, 4});
    Tensor y = conv2d(x, w, stride, 1);
    const auto expected = conv_oracle(x, w, stride, 1);
    ASSERT_EQ(y.numel(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
      EXPECT_LE(std::fabs(y[i] - expected[i]), 1e-10 * std::max(1.0, std::fabs(expected[i])));
    }
  }
}

TEST(Conv2d, OutputSizeLaw) {
  Tensor y = conv2d(Tensor({7, 6, 1}), Tensor({3, 3, 1, 2}), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{4, 3, 2}));
}

TEST(BilinearSample, IntegerCoordinate) {
  EXPECT_EQ(bilinear_sample(grid2x2(), Tensor::vector({0, 0})).item(), 0.0);
}

TEST(BilinearSample, CellCentre) {
  EXPECT_DOUBLE_EQ(bilinear_sample(grid2x2(), Tensor::vector({0.5, 0.5})).item(), 1.5);
}

TEST(BilinearSample, FarOutsideIsZero) {
  EXPECT_EQ(bilinear_sample(grid2x2(), Tensor::vector({-10, -10})).item(), 0.0);
  EXPECT_EQ(bilinear_sample(grid2x2(), Tensor::vector({1e300, 0})).item(), 0.0);
}

TEST(BilinearSample, BorderUsesZeroNeighbours) {
  // Halfway between (1,1)=3 and the off-grid (1,2).
  EXPECT_DOUBLE_EQ(bilinear_sample(grid2x2(), Tensor::vector({1.0, 1.5})).item(), 1.5);
}

TEST(Warp, ZeroFlowIsBitExactIdentity) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor(rng, {4, 5, 3});
  Tensor y = warp(x, Tensor({4, 5, 2}, 0.0));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x[i], y[i]);
}

TEST(Warp, WholePixelShiftFillsZero) {
  Tensor flow({2, 2, 2}, {0, 1, 0, 1, 0, 1, 0, 1});
  Tensor y = warp(grid2x2(), flow);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{1, 0, 3, 0}));
}

TEST(Warp, HalfPixelShift) {
  Tensor flow({2, 2, 2}, {0, 0.5, 0, 0.5, 0, 0.5, 0, 0.5});
  Tensor y = warp(grid2x2(), flow);
  const std::vector<double> expected{0.5, 0.5, 2.5, 1.5};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y[i], expected[i]);
}

TEST(Warp, FlowShapeMismatch) {
  EXPECT_THROW(warp(grid2x2(), Tensor({2, 3, 2})), DimensionError);
}

TEST(PixelShuffle, ShapeLaw) {
  EXPECT_EQ(pixel_unshuffle(Tensor({4, 4, 1}), 2).shape(), (Shape{2, 2, 4}));
  EXPECT_EQ(pixel_shuffle(Tensor({2, 2, 4}), 2).shape(), (Shape{4, 4, 1}));
}

TEST(PixelShuffle, RoundTripIsBitExact) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t r = trial % 2 ? 2 : 3;
    Tensor x = random_tensor(rng, {r * 2, r * 3, 1 + static_cast<std::size_t>(trial % 3)});
    Tensor y = pixel_shuffle(pixel_unshuffle(x, static_cast<int>(r)), static_cast<int>(r));
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(x[i], y[i]);
  }
}

TEST(PixelShuffle, ConstantStaysConstant) {
  Tensor y = pixel_unshuffle(Tensor({4, 4, 2}, 0.25), 2);
  for (double v : y.data()) EXPECT_EQ(v, 0.25);
}

TEST(PixelShuffle, NonDivisibleIsDimensionError) {
  EXPECT_THROW(pixel_unshuffle(Tensor({5, 4, 1}), 2), DimensionError);
  EXPECT_THROW(pixel_shuffle(Tensor({2, 2, 3}), 2), DimensionError);
}

TEST(Softmax, Symmetric) {
  Tensor y = softmax(Tensor::vector({0, 0}));
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  Tensor y = softmax(Tensor::vector({1000, 1000}));
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Softmax, ClosedForm) {
  Tensor y = softmax(Tensor::vector({std::log(1.0), std::log(3.0)}));
  EXPECT_NEAR(y[0], 0.25, 1e-15);
  EXPECT_NEAR(y[1], 0.75, 1e-15);
}

TEST(Softmax, SimplexProperty) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor y = softmax(random_tensor(rng, {1 + static_cast<std::size_t>(trial % 7)}, -50, 50));
    double s = 0.0;
    for (double v : y.data()) {
      EXPECT_GT(v, 0.0 - 1e-300);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Backward, LinearLoss) {
  Tensor x({3}, {1, -2, 5});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(scale(x, 2.0)));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, StopGradientBlocksOneFactor) {
  Tensor x({3}, {1, -2, 5});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor frozen = stop_gradient(x);
    EXPECT_TRUE(frozen.same_storage(x));  // marker, not a copy
    tape.backward(sum(mul(frozen, x)));
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], x[i]);
}

TEST(Backward, NonScalarLossIsUsageError) {
  Tensor x({3}, 1.0);
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), UsageError);
}

TEST(Backward, OnlyMarkedLeavesReceiveGradients) {
  Tensor a({2}, {1, 2});
  Tensor b({2}, {3, 4});
  a.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor mid = mul(a, b);
    tape.backward(sum(mid));
    EXPECT_FALSE(mid.has_grad());
  }
  EXPECT_TRUE(a.has_grad());
  EXPECT_FALSE(b.has_grad());
}

TEST(Tape, NodesAreTopologicallyOrdered) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor(rng, {4, 4, 2});
  Tensor w = random_tensor(rng, {3, 3, 2, 2});
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = relu(conv2d(x, w, 1, 1));
  Tensor z = add(y, conv2d(y, w, 1, 1));
  Tensor loss = mean(pixel_unshuffle(z, 2));
  std::map<const detail::TensorImpl*, std::size_t> produced_at;
  for (std::size_t i = 0; i < tape.nodes().size(); ++i) {
    for (const auto& in : tape.nodes()[i].inputs) {
      auto it = produced_at.find(in.get());
      if (it != produced_at.end()) {
        EXPECT_LT(it->second, i);
      }
    }
    produced_at[tape.nodes()[i].output.get()] = i;
  }
  EXPECT_EQ(tape.size(), 6u);
}

TEST(Tape, NoRecordingWithoutScope) {
  Tensor x({2}, 1.0);
  x.set_requires_grad(true);
  Tensor y = scale(x, 3.0);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tape, NonFiniteForwardIsNumericError) {
  Tensor x({2}, {1.0, 1e308});
  EXPECT_THROW(scale(x, 1e10), NumericError);
}

TEST(Tape, IndependentTapesOnTwoThreads) {
  auto run = [](double factor, double* out) {
    Tensor x({3}, {1, 2, 3});
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(scale(x, factor)));
    *out = x.grad()[0];
  };
  double g1 = 0, g2 = 0;
  std::thread t1(run, 2.0, &g1), t2(run, 5.0, &g2);
  t1.join();
  t2.join();
  EXPECT_EQ(g1, 2.0);
  EXPECT_EQ(g2, 5.0);
}

TEST(Gradcheck, Conv2dPasses) {
  auto report = GradcheckRegistry::global().run("conv2d", {10, 1e-5, 1e-4, 42});
  EXPECT_TRUE(report.passed) << report.max_error;
}

TEST(Gradcheck, BilinearSamplePasses) {
  auto report = GradcheckRegistry::global().run("bilinear_sample", {10, 1e-5, 1e-4, 43});
  EXPECT_TRUE(report.passed) << report.max_error;
}

TEST(Gradcheck, EveryRegisteredPrimitivePasses) {
  const auto& reg = GradcheckRegistry::global();
  for (const auto& name : reg.names()) {
    auto report = reg.run(name, {10, 1e-5, 1e-4, 7});
    EXPECT_TRUE(report.passed) << name << " max error " << report.max_error;
  }
}

TEST(Gradcheck, CorruptedGradientFails) {
  GradcheckCase bad{{"x"},
                    [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, {4})}; },
                    [](std::span<const Tensor> in) {
                      const Tensor x = in[0];
                      std::vector<double> sq(x.numel());
                      for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = x[i] * x[i];
                      Tape* tape = Tape::current();
                      if (!tape) return Tensor(x.shape(), sq);
                      std::vector<Tensor> inputs{x};
                      // d(x^2)/dx is 2x; deliberately report 3x.
                      return tape->record("bad_square", x.shape(), sq, inputs, [x](std::span<const double> g) {
                        double* gx = grad_sink(x);
                        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 3.0 * x[i] * g[i];
                      });
                    }};
  EXPECT_FALSE(run_gradcheck("bad_square", bad, {}).passed);
}

TEST(Gradcheck, UnknownOpIsRejected) {
  EXPECT_THROW(GradcheckRegistry::global().run("no_such_op", {}), UsageError);
}

TEST(RouteKernel, LengthMismatchIsDimensionError) {
  Tensor w({3, 3, 2, 2}, 1.0);
  Tensor ones3({2, 3}, 1.0), ones2({2, 2}, 1.0);
  EXPECT_THROW(route_kernel(w, ones3, ones3, ones3, ones2, Tensor::vector({0.5, 0.5})), DimensionError);
}

TEST(DeformableAttention, HeadSplitMustDivide) {
  EXPECT_THROW(deformable_attention(Tensor({2, 2, 2}), Tensor({2, 2, 4}), Tensor({2, 2, 3}), {2, 1, 1}),
               DimensionError);
}
