// SPDX-License-Identifier: Apache-2.0
#include "uniwrv/tensorkit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "uniwrv/errors.hpp"
#include "uniwrv/tensorkit/tape.hpp"

namespace uniwrv::tensorkit {

namespace {

thread_local std::uint64_t g_conv_macs = 0;
thread_local std::uint64_t g_modifier_macs = 0;

Tensor finish(const char* op, Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
              BackwardFn backward) {
  Tape* tape = Tape::current();
  bool tracked = false;
  if (tape) {
    for (const auto& in : inputs) tracked = tracked || in.requires_grad();
  }
  if (!tracked) {
    check_finite(values, op);
    return make_result(std::move(shape), std::move(values));
  }
  return tape->record(op, std::move(shape), std::move(values), std::span<const Tensor>(inputs.begin(), inputs.size()),
                      std::move(backward));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

std::vector<double> copy_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Bilinear lookup into an H x W grid whose pixels are `stride` doubles apart;
// reads `count` channels starting at `offset`. Neighbours off the grid are zero.
struct BilinearTap {
  long r0, c0;
  double fr, fc;
  bool any;
};

BilinearTap make_tap(double row, double col, long H, long W) {
  BilinearTap tap{};
  // Far outside: every neighbour is off-grid (also guards floor() on huge values).
  if (!(row > -1.0 && row < static_cast<double>(H) && col > -1.0 && col < static_cast<double>(W))) {
    tap.any = false;
    return tap;
  }
  const double rf = std::floor(row);
  const double cf = std::floor(col);
  tap.r0 = static_cast<long>(rf);
  tap.c0 = static_cast<long>(cf);
  tap.fr = row - rf;
  tap.fc = col - cf;
  tap.any = true;
  return tap;
}

inline bool inside(long r, long c, long H, long W) { return r >= 0 && r < H && c >= 0 && c < W; }

void bilinear_gather(const double* grid, long H, long W, std::size_t stride, std::size_t offset, std::size_t count,
                     const BilinearTap& tap, double scale_by, double* out) {
  if (!tap.any) return;
  const long rs[2] = {tap.r0, tap.r0 + 1};
  const long cs[2] = {tap.c0, tap.c0 + 1};
  const double wr[2] = {1.0 - tap.fr, tap.fr};
  const double wc[2] = {1.0 - tap.fc, tap.fc};
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      if (!inside(rs[i], cs[j], H, W)) continue;
      const double w = wr[i] * wc[j] * scale_by;
      const double* src = grid + (static_cast<std::size_t>(rs[i]) * W + cs[j]) * stride + offset;
      for (std::size_t k = 0; k < count; ++k) out[k] += w * src[k];
    }
  }
}

// Scatters gout (length count, pre-scaled) into grid grads and returns
// (d/drow, d/dcol) of sum_k gout[k] * sample[k].
void bilinear_scatter(const double* grid, double* grid_grad, long H, long W, std::size_t stride, std::size_t offset,
                      std::size_t count, const BilinearTap& tap, const double* gout, double* d_row, double* d_col) {
  if (!tap.any) return;
  const long rs[2] = {tap.r0, tap.r0 + 1};
  const long cs[2] = {tap.c0, tap.c0 + 1};
  const double wr[2] = {1.0 - tap.fr, tap.fr};
  const double wc[2] = {1.0 - tap.fc, tap.fc};
  // dot[i][j] = sum_k gout[k] * v_ij[k]
  double dot[2][2] = {{0.0, 0.0}, {0.0, 0.0}};
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      if (!inside(rs[i], cs[j], H, W)) continue;
      const std::size_t base = (static_cast<std::size_t>(rs[i]) * W + cs[j]) * stride + offset;
      const double w = wr[i] * wc[j];
      double acc = 0.0;
      for (std::size_t k = 0; k < count; ++k) {
        acc += gout[k] * grid[base + k];
        if (grid_grad) grid_grad[base + k] += w * gout[k];
      }
      dot[i][j] = acc;
    }
  }
  if (d_row) *d_row += (1.0 - tap.fc) * (dot[1][0] - dot[0][0]) + tap.fc * (dot[1][1] - dot[0][1]);
  if (d_col) *d_col += (1.0 - tap.fr) * (dot[0][1] - dot[0][0]) + tap.fr * (dot[1][1] - dot[1][0]);
}

}  // namespace

void MacCounter::reset() {
  g_conv_macs = 0;
  g_modifier_macs = 0;
}
std::uint64_t MacCounter::conv_macs() { return g_conv_macs; }
std::uint64_t MacCounter::modifier_macs() { return g_modifier_macs; }

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return finish("add", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    if (double* ga = grad_sink(a)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (double* gb = grad_sink(b)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return finish("sub", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    if (double* ga = grad_sink(a)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (double* gb = grad_sink(b)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return finish("mul", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    auto x = a.data(), y = b.data();
    if (double* ga = grad_sink(a)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    if (double* gb = grad_sink(b)) for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return finish("scale", a.shape(), std::move(out), {a}, [a, s](std::span<const double> g) {
    if (double* ga = grad_sink(a)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return finish("relu", a.shape(), std::move(out), {a}, [a](std::span<const double> g) {
    auto x = a.data();
    if (double* ga = grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > 0.0) ga[i] += g[i];
  });
}

Tensor abs(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(x[i]);
  return finish("abs", a.shape(), std::move(out), {a}, [a](std::span<const double> g) {
    auto x = a.data();
    if (double* ga = grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > 0.0 ? g[i] : (x[i] < 0.0 ? -g[i] : 0.0);
  });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(x[i] > 0.0)) throw NumericError("log of non-positive value " + std::to_string(x[i]));
    out[i] = std::log(x[i]);
  }
  return finish("log", a.shape(), std::move(out), {a}, [a](std::span<const double> g) {
    auto x = a.data();
    if (double* ga = grad_sink(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return finish("sum", Shape{1}, {s}, {a}, [a](std::span<const double> g) {
    if (double* ga = grad_sink(a)) for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean of empty tensor");
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double n = static_cast<double>(a.numel());
  return finish("mean", Shape{1}, {s / n}, {a}, [a, n](std::span<const double> g) {
    if (double* ga = grad_sink(a)) for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g[0] / n;
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  auto x = a.data(), y = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  const double n = static_cast<double>(x.size());
  return finish("mse", Shape{1}, {s / n}, {a, b}, [a, b, n](std::span<const double> g) {
    auto x = a.data(), y = b.data();
    double* ga = grad_sink(a);
    double* gb = grad_sink(b);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = 2.0 * (x[i] - y[i]) * g[0] / n;
      if (ga) ga[i] += d;
      if (gb) gb[i] -= d;
    }
  });
}

Tensor l1(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "l1");
  auto x = a.data(), y = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += std::fabs(x[i] - y[i]);
  const double n = static_cast<double>(x.size());
  return finish("l1", Shape{1}, {s / n}, {a, b}, [a, b, n](std::span<const double> g) {
    auto x = a.data(), y = b.data();
    double* ga = grad_sink(a);
    double* gb = grad_sink(b);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double diff = x[i] - y[i];
      const double d = (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) * g[0] / n;
      if (ga) ga[i] += d;
      if (gb) gb[i] -= d;
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return finish("reshape", std::move(shape), copy_of(a), {a}, [a](std::span<const double> g) {
    if (double* ga = grad_sink(a)) for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

namespace {
thread_local FrozenStopGradients* t_frozen = nullptr;
}  // namespace

FrozenStopGradientScope::FrozenStopGradientScope(FrozenStopGradients& frozen) : previous_(t_frozen) {
  frozen.cursor = 0;
  t_frozen = &frozen;
}

FrozenStopGradientScope::~FrozenStopGradientScope() { t_frozen = previous_; }

Tensor stop_gradient(const Tensor& a) {
  if (t_frozen) {
    if (!t_frozen->replay) {
      t_frozen->values.emplace_back(a.data().begin(), a.data().end());
    } else {
      if (t_frozen->cursor >= t_frozen->values.size() || t_frozen->values[t_frozen->cursor].size() != a.numel()) {
        throw UsageError("stop_gradient replay out of step with the captured evaluation");
      }
      return Tensor(a.shape(), t_frozen->values[t_frozen->cursor++]);
    }
  }
  if (Tape* tape = Tape::current(); tape && a.requires_grad()) return tape->record_stop_gradient(a);
  return a.detach();
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d");
  const long H = static_cast<long>(x.dim(0)), W = static_cast<long>(x.dim(1));
  const std::size_t Cin = x.dim(2);
  const long k = static_cast<long>(w.dim(0));
  const std::size_t Cout = w.dim(3);
  if (w.dim(1) != w.dim(0) || k % 2 == 0) throw DimensionError("conv2d: kernel must be square with odd size");
  if (w.dim(2) != Cin) {
    throw DimensionError("conv2d: input has " + std::to_string(Cin) + " channels, kernel expects " +
                         std::to_string(w.dim(2)));
  }
  if (stride < 1 || pad < 0) throw DimensionError("conv2d: stride must be >= 1 and pad >= 0");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) throw DimensionError("conv2d: bias length");
  if (H + 2 * pad < k || W + 2 * pad < k) throw DimensionError("conv2d: input smaller than kernel");
  const long Ho = (H + 2 * pad - k) / stride + 1;
  const long Wo = (W + 2 * pad - k) / stride + 1;

  std::vector<double> out(static_cast<std::size_t>(Ho * Wo) * Cout, 0.0);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  for (long oy = 0; oy < Ho; ++oy) {
    for (long ox = 0; ox < Wo; ++ox) {
      double* o = out.data() + (oy * Wo + ox) * Cout;
      if (bias.defined()) std::copy(bias.data().begin(), bias.data().end(), o);
      for (long a = 0; a < k; ++a) {
        const long iy = oy * stride + a - pad;
        if (iy < 0 || iy >= H) continue;
        for (long b = 0; b < k; ++b) {
          const long ix = ox * stride + b - pad;
          if (ix < 0 || ix >= W) continue;
          const double* xp = xd + (iy * W + ix) * Cin;
          const double* wp = wd + (a * k + b) * Cin * Cout;
          for (std::size_t ci = 0; ci < Cin; ++ci) {
            const double xv = xp[ci];
            const double* wr = wp + ci * Cout;
            for (std::size_t co = 0; co < Cout; ++co) o[co] += xv * wr[co];
          }
        }
      }
    }
  }
  g_conv_macs += static_cast<std::uint64_t>(Ho * Wo) * k * k * Cin * Cout;

  return finish("conv2d", Shape{static_cast<std::size_t>(Ho), static_cast<std::size_t>(Wo), Cout}, std::move(out),
                {x, w, bias}, [=](std::span<const double> g) {
                  double* gx = grad_sink(x);
                  double* gw = grad_sink(w);
                  double* gb = bias.defined() ? grad_sink(bias) : nullptr;
                  const double* xd = x.data().data();
                  const double* wd = w.data().data();
                  for (long oy = 0; oy < Ho; ++oy) {
                    for (long ox = 0; ox < Wo; ++ox) {
                      const double* go = g.data() + (oy * Wo + ox) * Cout;
                      if (gb) for (std::size_t co = 0; co < Cout; ++co) gb[co] += go[co];
                      for (long a = 0; a < k; ++a) {
                        const long iy = oy * stride + a - pad;
                        if (iy < 0 || iy >= H) continue;
                        for (long b = 0; b < k; ++b) {
                          const long ix = ox * stride + b - pad;
                          if (ix < 0 || ix >= W) continue;
                          const std::size_t xoff = (iy * W + ix) * Cin;
                          const std::size_t woff = (a * k + b) * Cin * Cout;
                          for (std::size_t ci = 0; ci < Cin; ++ci) {
                            const double* wr = wd + woff + ci * Cout;
                            if (gx) {
                              double acc = 0.0;
                              for (std::size_t co = 0; co < Cout; ++co) acc += go[co] * wr[co];
                              gx[xoff + ci] += acc;
                            }
                            if (gw) {
                              const double xv = xd[xoff + ci];
                              double* gwr = gw + woff + ci * Cout;
                              for (std::size_t co = 0; co < Cout; ++co) gwr[co] += xv * go[co];
                            }
                          }
                        }
                      }
                    }
                  }
                });
}

Tensor bilinear_sample(const Tensor& x, const Tensor& coord) {
  require_rank(x, 3, "bilinear_sample");
  if (coord.numel() != 2) throw DimensionError("bilinear_sample: coordinate must have 2 entries");
  const long H = static_cast<long>(x.dim(0)), W = static_cast<long>(x.dim(1));
  const std::size_t C = x.dim(2);
  const auto tap = make_tap(coord[0], coord[1], H, W);
  std::vector<double> out(C, 0.0);
  bilinear_gather(x.data().data(), H, W, C, 0, C, tap, 1.0, out.data());
  return finish("bilinear_sample", Shape{C}, std::move(out), {x, coord}, [=](std::span<const double> g) {
    double* gx = grad_sink(x);
    double* gc = grad_sink(coord);
    double dr = 0.0, dc = 0.0;
    bilinear_scatter(x.data().data(), gx, H, W, C, 0, C, tap, g.data(), &dr, &dc);
    if (gc) {
      gc[0] += dr;
      gc[1] += dc;
    }
  });
}

Tensor warp(const Tensor& x, const Tensor& flow) {
  require_rank(x, 3, "warp");
  if (flow.rank() != 3 || flow.dim(0) != x.dim(0) || flow.dim(1) != x.dim(1) || flow.dim(2) != 2) {
    throw DimensionError("warp: flow shape " + shape_str(flow.shape()) + " does not match feature grid " +
                         shape_str(x.shape()));
  }
  const long H = static_cast<long>(x.dim(0)), W = static_cast<long>(x.dim(1));
  const std::size_t C = x.dim(2);
  std::vector<double> out(x.numel(), 0.0);
  const double* fd = flow.data().data();
  for (long r = 0; r < H; ++r) {
    for (long c = 0; c < W; ++c) {
      const std::size_t p = static_cast<std::size_t>(r * W + c);
      const auto tap = make_tap(r + fd[2 * p], c + fd[2 * p + 1], H, W);
      bilinear_gather(x.data().data(), H, W, C, 0, C, tap, 1.0, out.data() + p * C);
    }
  }
  return finish("warp", x.shape(), std::move(out), {x, flow}, [=](std::span<const double> g) {
    double* gx = grad_sink(x);
    double* gf = grad_sink(flow);
    const double* fd = flow.data().data();
    for (long r = 0; r < H; ++r) {
      for (long c = 0; c < W; ++c) {
        const std::size_t p = static_cast<std::size_t>(r * W + c);
        const auto tap = make_tap(r + fd[2 * p], c + fd[2 * p + 1], H, W);
        bilinear_scatter(x.data().data(), gx, H, W, C, 0, C, tap, g.data() + p * C, gf ? gf + 2 * p : nullptr,
                         gf ? gf + 2 * p + 1 : nullptr);
      }
    }
  });
}

Tensor pixel_unshuffle(const Tensor& x, int r) {
  require_rank(x, 3, "pixel_unshuffle");
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2), R = static_cast<std::size_t>(r);
  if (r < 1 || H % R != 0 || W % R != 0) {
    throw DimensionError("pixel_unshuffle: " + shape_str(x.shape()) + " not divisible by " + std::to_string(r));
  }
  const std::size_t Ho = H / R, Wo = W / R, Co = C * R * R;
  // out[y, x, (dy*r + dx)*C + c] = in[y*r + dy, x*r + dx, c]
  auto index = [=](std::size_t y, std::size_t xx, std::size_t dy, std::size_t dx, std::size_t c) {
    return std::pair{((y * Wo + xx) * Co) + (dy * R + dx) * C + c, ((y * R + dy) * W + xx * R + dx) * C + c};
  };
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t y = 0; y < Ho; ++y)
    for (std::size_t xx = 0; xx < Wo; ++xx)
      for (std::size_t dy = 0; dy < R; ++dy)
        for (std::size_t dx = 0; dx < R; ++dx)
          for (std::size_t c = 0; c < C; ++c) {
            auto [o, i] = index(y, xx, dy, dx, c);
            out[o] = xd[i];
          }
  return finish("pixel_unshuffle", Shape{Ho, Wo, Co}, std::move(out), {x}, [=](std::span<const double> g) {
    double* gx = grad_sink(x);
    if (!gx) return;
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t xx = 0; xx < Wo; ++xx)
        for (std::size_t dy = 0; dy < R; ++dy)
          for (std::size_t dx = 0; dx < R; ++dx)
            for (std::size_t c = 0; c < C; ++c) {
              auto [o, i] = index(y, xx, dy, dx, c);
              gx[i] += g[o];
            }
  });
}

Tensor pixel_shuffle(const Tensor& x, int r) {
  require_rank(x, 3, "pixel_shuffle");
  const std::size_t H = x.dim(0), W = x.dim(1), Ci = x.dim(2), R = static_cast<std::size_t>(r);
  if (r < 1 || Ci % (R * R) != 0) {
    throw DimensionError("pixel_shuffle: channels of " + shape_str(x.shape()) + " not divisible by r^2");
  }
  const std::size_t C = Ci / (R * R), Ho = H * R, Wo = W * R;
  auto index = [=](std::size_t y, std::size_t xx, std::size_t dy, std::size_t dx, std::size_t c) {
    return std::pair{((y * R + dy) * Wo + xx * R + dx) * C + c, (y * W + xx) * Ci + (dy * R + dx) * C + c};
  };
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t xx = 0; xx < W; ++xx)
      for (std::size_t dy = 0; dy < R; ++dy)
        for (std::size_t dx = 0; dx < R; ++dx)
          for (std::size_t c = 0; c < C; ++c) {
            auto [o, i] = index(y, xx, dy, dx, c);
            out[o] = xd[i];
          }
  return finish("pixel_shuffle", Shape{Ho, Wo, C}, std::move(out), {x}, [=](std::span<const double> g) {
    double* gx = grad_sink(x);
    if (!gx) return;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        for (std::size_t dy = 0; dy < R; ++dy)
          for (std::size_t dx = 0; dx < R; ++dx)
            for (std::size_t c = 0; c < C; ++c) {
              auto [o, i] = index(y, xx, dy, dx, c);
              gx[i] += g[o];
            }
  });
}

Tensor avg_pool(const Tensor& x, int r) {
  require_rank(x, 3, "avg_pool");
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2), R = static_cast<std::size_t>(r);
  if (r < 1 || H % R != 0 || W % R != 0) {
    throw DimensionError("avg_pool: " + shape_str(x.shape()) + " not divisible by " + std::to_string(r));
  }
  const std::size_t Ho = H / R, Wo = W / R;
  const double inv = 1.0 / static_cast<double>(R * R);
  std::vector<double> out(Ho * Wo * C, 0.0);
  auto xd = x.data();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t xx = 0; xx < W; ++xx)
      for (std::size_t c = 0; c < C; ++c) out[((y / R) * Wo + xx / R) * C + c] += xd[(y * W + xx) * C + c] * inv;
  return finish("avg_pool", Shape{Ho, Wo, C}, std::move(out), {x}, [=](std::span<const double> g) {
    double* gx = grad_sink(x);
    if (!gx) return;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        for (std::size_t c = 0; c < C; ++c) gx[(y * W + xx) * C + c] += g[((y / R) * Wo + xx / R) * C + c] * inv;
  });
}

Tensor softmax_groups(const Tensor& x, std::size_t group) {
  if (group == 0 || x.numel() % group != 0) {
    throw DimensionError("softmax: group size " + std::to_string(group) + " does not divide " +
                         std::to_string(x.numel()));
  }
  auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t s = 0; s < out.size(); s += group) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < group; ++i) mx = std::max(mx, xd[s + i]);
    double z = 0.0;
    for (std::size_t i = 0; i < group; ++i) {
      out[s + i] = std::exp(xd[s + i] - mx);
      z += out[s + i];
    }
    for (std::size_t i = 0; i < group; ++i) out[s + i] /= z;
  }
  auto y = out;
  return finish("softmax", x.shape(), std::move(out), {x}, [x, y = std::move(y), group](std::span<const double> g) {
    double* gx = grad_sink(x);
    if (!gx) return;
    for (std::size_t s = 0; s < y.size(); s += group) {
      double dot = 0.0;
      for (std::size_t i = 0; i < group; ++i) dot += g[s + i] * y[s + i];
      for (std::size_t i = 0; i < group; ++i) gx[s + i] += y[s + i] * (g[s + i] - dot);
    }
  });
}

Tensor softmax(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("softmax of empty tensor");
  return softmax_groups(x, x.numel());
}

Tensor log_softmax(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("log_softmax of empty tensor");
  auto xd = x.data();
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : xd) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : xd) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(xd.size());
  std::vector<double> p(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    out[i] = xd[i] - lse;
    p[i] = std::exp(out[i]);
  }
  return finish("log_softmax", x.shape(), std::move(out), {x}, [x, p = std::move(p)](std::span<const double> g) {
    double* gx = grad_sink(x);
    if (!gx) return;
    double gs = 0.0;
    for (double v : g) gs += v;
    for (std::size_t i = 0; i < p.size(); ++i) gx[i] += g[i] - p[i] * gs;
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 3, "global_avg_pool");
  const std::size_t HW = x.dim(0) * x.dim(1), C = x.dim(2);
  std::vector<double> out(C, 0.0);
  auto xd = x.data();
  for (std::size_t p = 0; p < HW; ++p)
    for (std::size_t c = 0; c < C; ++c) out[c] += xd[p * C + c];
  const double inv = 1.0 / static_cast<double>(HW);
  for (double& v : out) v *= inv;
  return finish("global_avg_pool", Shape{C}, std::move(out), {x}, [=](std::span<const double> g) {
    double* gx = grad_sink(x);
    if (!gx) return;
    for (std::size_t p = 0; p < HW; ++p)
      for (std::size_t c = 0; c < C; ++c) gx[p * C + c] += g[c] * inv;
  });
}

Tensor broadcast_add(const Tensor& x, const Tensor& v) {
  require_rank(x, 3, "broadcast_add");
  const std::size_t HW = x.dim(0) * x.dim(1), C = x.dim(2);
  if (v.numel() != C) {
    throw DimensionError("broadcast_add: vector length " + std::to_string(v.numel()) + " vs " + std::to_string(C) +
                         " channels");
  }
  std::vector<double> out(x.numel());
  auto xd = x.data(), vd = v.data();
  for (std::size_t p = 0; p < HW; ++p)
    for (std::size_t c = 0; c < C; ++c) out[p * C + c] = xd[p * C + c] + vd[c];
  return finish("broadcast_add", x.shape(), std::move(out), {x, v}, [=](std::span<const double> g) {
    if (double* gx = grad_sink(x)) for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    if (double* gv = grad_sink(v))
      for (std::size_t p = 0; p < HW; ++p)
        for (std::size_t c = 0; c < C; ++c) gv[c] += g[p * C + c];
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank(w, 2, "linear");
  const std::size_t n = w.dim(0), m = w.dim(1);
  if (x.numel() != n) {
    throw DimensionError("linear: input length " + std::to_string(x.numel()) + " vs weight rows " +
                         std::to_string(n));
  }
  if (b.defined() && b.numel() != m) throw DimensionError("linear: bias length");
  std::vector<double> out(m, 0.0);
  if (b.defined()) std::copy(b.data().begin(), b.data().end(), out.begin());
  auto xd = x.data(), wd = w.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += xd[i] * wd[i * m + j];
  return finish("linear", Shape{m}, std::move(out), {x, w, b}, [=](std::span<const double> g) {
    auto xd = x.data(), wd = w.data();
    double* gx = grad_sink(x);
    double* gw = grad_sink(w);
    double* gb = b.defined() ? grad_sink(b) : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        acc += g[j] * wd[i * m + j];
        if (gw) gw[i * m + j] += xd[i] * g[j];
      }
      if (gx) gx[i] += acc;
    }
    if (gb) for (std::size_t j = 0; j < m; ++j) gb[j] += g[j];
  });
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  const std::size_t H = parts[0].dim(0), W = parts[0].dim(1);
  std::size_t C = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_rank(p, 3, "concat_channels");
    if (p.dim(0) != H || p.dim(1) != W) throw DimensionError("concat_channels: spatial mismatch");
    offsets.push_back(C);
    C += p.dim(2);
  }
  std::vector<double> out(H * W * C);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto d = parts[k].data();
    const std::size_t Ck = parts[k].dim(2);
    for (std::size_t px = 0; px < H * W; ++px)
      std::copy_n(d.data() + px * Ck, Ck, out.data() + px * C + offsets[k]);
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  Tape* tape = Tape::current();
  bool tracked = false;
  for (const auto& p : parts) tracked = tracked || p.requires_grad();
  if (!tape || !tracked) {
    check_finite(out, "concat_channels");
    return make_result(Shape{H, W, C}, std::move(out));
  }
  return tape->record("concat_channels", Shape{H, W, C}, std::move(out), inputs,
                      [inputs, offsets, H, W, C](std::span<const double> g) {
                        for (std::size_t k = 0; k < inputs.size(); ++k) {
                          double* gk = grad_sink(inputs[k]);
                          if (!gk) continue;
                          const std::size_t Ck = inputs[k].dim(2);
                          for (std::size_t px = 0; px < H * W; ++px)
                            for (std::size_t c = 0; c < Ck; ++c) gk[px * Ck + c] += g[px * C + offsets[k] + c];
                        }
                      });
}

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 3, "slice_channels");
  const std::size_t C = x.dim(2), HW = x.dim(0) * x.dim(1);
  if (begin >= end || end > C) throw DimensionError("slice_channels: bad range");
  const std::size_t n = end - begin;
  std::vector<double> out(HW * n);
  auto xd = x.data();
  for (std::size_t p = 0; p < HW; ++p) std::copy_n(xd.data() + p * C + begin, n, out.data() + p * n);
  return finish("slice_channels", Shape{x.dim(0), x.dim(1), n}, std::move(out), {x}, [=](std::span<const double> g) {
    double* gx = grad_sink(x);
    if (!gx) return;
    for (std::size_t p = 0; p < HW; ++p)
      for (std::size_t c = 0; c < n; ++c) gx[p * C + begin + c] += g[p * n + c];
  });
}

Tensor tile(const Tensor& v, std::size_t length) {
  const std::size_t n = v.numel();
  if (n == 0 || length % n != 0) {
    throw DimensionError("tile: length " + std::to_string(n) + " does not divide " + std::to_string(length));
  }
  std::vector<double> out(length);
  auto vd = v.data();
  for (std::size_t i = 0; i < length; ++i) out[i] = vd[i % n];
  return finish("tile", Shape{length}, std::move(out), {v}, [=](std::span<const double> g) {
    if (double* gv = grad_sink(v)) for (std::size_t i = 0; i < length; ++i) gv[i % n] += g[i];
  });
}

Tensor select_row(const Tensor& m, std::size_t row) {
  require_rank(m, 2, "select_row");
  if (row >= m.dim(0)) throw DimensionError("select_row: row out of range");
  const std::size_t C = m.dim(1);
  std::vector<double> out(m.data().begin() + row * C, m.data().begin() + (row + 1) * C);
  return finish("select_row", Shape{C}, std::move(out), {m}, [=](std::span<const double> g) {
    if (double* gm = grad_sink(m)) for (std::size_t c = 0; c < C; ++c) gm[row * C + c] += g[c];
  });
}

Tensor pick(const Tensor& v, std::size_t index) {
  if (index >= v.numel()) throw DimensionError("pick: index out of range");
  return finish("pick", Shape{1}, {v[index]}, {v}, [=](std::span<const double> g) {
    if (double* gv = grad_sink(v)) gv[index] += g[0];
  });
}

Tensor matvec(const Tensor& m, const Tensor& v) {
  require_rank(m, 2, "matvec");
  const std::size_t P = m.dim(0), C = m.dim(1);
  if (v.numel() != C) throw DimensionError("matvec: vector length mismatch");
  std::vector<double> out(P, 0.0);
  auto md = m.data(), vd = v.data();
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t c = 0; c < C; ++c) out[i] += md[i * C + c] * vd[c];
  return finish("matvec", Shape{P}, std::move(out), {m, v}, [=](std::span<const double> g) {
    auto md = m.data(), vd = v.data();
    double* gm = grad_sink(m);
    double* gv = grad_sink(v);
    for (std::size_t i = 0; i < P; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        if (gm) gm[i * C + c] += g[i] * vd[c];
        if (gv) gv[c] += g[i] * md[i * C + c];
      }
  });
}

Tensor concat(std::span<const Tensor> parts) {
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  bool tracked = false;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
    tracked = tracked || p.requires_grad();
  }
  const std::size_t n = out.size();
  Tape* tape = Tape::current();
  if (!tape || !tracked) {
    check_finite(out, "concat");
    return make_result(Shape{n}, std::move(out));
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return tape->record("concat", Shape{n}, std::move(out), inputs, [inputs, offsets](std::span<const double> g) {
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (double* gk = grad_sink(inputs[k]))
        for (std::size_t i = 0; i < inputs[k].numel(); ++i) gk[i] += g[offsets[k] + i];
    }
  });
}

Tensor cosine(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw DimensionError("cosine: length mismatch");
  auto x = a.data(), y = b.data();
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x[i] * y[i];
    na += x[i] * x[i];
    nb += y[i] * y[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  const bool degenerate = na == 0.0 || nb == 0.0;
  const double cs = degenerate ? 0.0 : dot / (na * nb);
  return finish("cosine", Shape{1}, {cs}, {a, b}, [=](std::span<const double> g) {
    if (degenerate) return;
    auto x = a.data(), y = b.data();
    double* ga = grad_sink(a);
    double* gb = grad_sink(b);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (ga) ga[i] += g[0] * (y[i] / (na * nb) - cs * x[i] / (na * na));
      if (gb) gb[i] += g[0] * (x[i] / (na * nb) - cs * y[i] / (nb * nb));
    }
  });
}

Tensor l2_normalize(const Tensor& v) {
  auto x = v.data();
  double n = 0.0;
  for (double e : x) n += e * e;
  n = std::sqrt(n);
  std::vector<double> out(x.size(), 0.0);
  if (n > 0.0)
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / n;
  auto y = out;
  return finish("l2_normalize", v.shape(), std::move(out), {v}, [v, n, y = std::move(y)](std::span<const double> g) {
    double* gv = grad_sink(v);
    if (!gv || n == 0.0) return;
    double dot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * g[i];
    for (std::size_t i = 0; i < y.size(); ++i) gv[i] += (g[i] - y[i] * dot) / n;
  });
}

Tensor route_kernel(const Tensor& w, const Tensor& u, const Tensor& v, const Tensor& c, const Tensor& o,
                    const Tensor& alpha) {
  require_rank(w, 4, "route_kernel");
  const std::size_t k = w.dim(0), Cin = w.dim(2), Cout = w.dim(3);
  const std::size_t P = alpha.numel();
  auto check = [&](const Tensor& t, std::size_t len, const char* name) {
    if (t.rank() != 2 || t.dim(0) != P || t.dim(1) != len) {
      throw DimensionError(std::string("route_kernel: modify vector ") + name + " has shape " + shape_str(t.shape()) +
                           ", kernel needs (" + std::to_string(P) + "," + std::to_string(len) + ")");
    }
  };
  if (w.dim(1) != k) throw DimensionError("route_kernel: kernel must be square");
  check(u, k, "u");
  check(v, k, "v");
  check(c, Cin, "c_in");
  check(o, Cout, "c_out");

  const std::size_t n = w.numel();
  // modifier S = 1 + sum_i alpha_i * (u_i (x) v_i (x) c_i (x) o_i - 1), which is
  // sum_i alpha_i * outer_i whenever sum(alpha) = 1 and is exactly 1 for
  // all-ones modifiers even when the rounded sum of alpha is not.
  std::vector<double> S(n, 1.0);
  auto ud = u.data(), vd = v.data(), cd = c.data(), od = o.data(), ad = alpha.data();
  for (std::size_t i = 0; i < P; ++i) {
    const double ai = ad[i];
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b) {
        const double uv = ud[i * k + a] * vd[i * k + b];
        for (std::size_t m = 0; m < Cin; ++m) {
          const double uvc = uv * cd[i * Cin + m];
          double* s = S.data() + ((a * k + b) * Cin + m) * Cout;
          const double* oi = od.data() + i * Cout;
          for (std::size_t q = 0; q < Cout; ++q) s[q] += ai * (uvc * oi[q] - 1.0);
        }
      }
  }
  std::vector<double> out(n);
  auto wd = w.data();
  for (std::size_t e = 0; e < n; ++e) out[e] = S[e] * wd[e];
  g_modifier_macs += static_cast<std::uint64_t>(n) * (P + 1);

  return finish("route_kernel", w.shape(), std::move(out), {w, u, v, c, o, alpha},
                [=, S = std::move(S)](std::span<const double> g) {
                  auto wd = w.data(), ud = u.data(), vd = v.data(), cd = c.data(), od = o.data(), ad = alpha.data();
                  if (double* gw = grad_sink(w)) for (std::size_t e = 0; e < n; ++e) gw[e] += g[e] * S[e];
                  double* gu = grad_sink(u);
                  double* gv = grad_sink(v);
                  double* gc = grad_sink(c);
                  double* go = grad_sink(o);
                  double* ga = grad_sink(alpha);
                  if (!gu && !gv && !gc && !go && !ga) return;
                  // gS = g * W; contract against each rank-1 factor.
                  double gs_total = 0.0;
                  if (ga)
                    for (std::size_t e = 0; e < n; ++e) gs_total += g[e] * wd[e];
                  for (std::size_t i = 0; i < P; ++i) {
                    const double ai = ad[i];
                    const double* oi = od.data() + i * Cout;
                    double alpha_acc = 0.0;
                    for (std::size_t a = 0; a < k; ++a)
                      for (std::size_t b = 0; b < k; ++b) {
                        const double ua = ud[i * k + a], vb = vd[i * k + b];
                        double ab_acc = 0.0;  // sum_m c[m] * s_n
                        for (std::size_t m = 0; m < Cin; ++m) {
                          const std::size_t base = ((a * k + b) * Cin + m) * Cout;
                          const double cm = cd[i * Cin + m];
                          double s_n = 0.0;
                          for (std::size_t q = 0; q < Cout; ++q) {
                            const double gs = g[base + q] * wd[base + q];
                            s_n += gs * oi[q];
                            if (go) go[i * Cout + q] += ai * ua * vb * cm * gs;
                          }
                          if (gc) gc[i * Cin + m] += ai * ua * vb * s_n;
                          ab_acc += cm * s_n;
                        }
                        if (gu) gu[i * k + a] += ai * vb * ab_acc;
                        if (gv) gv[i * k + b] += ai * ua * ab_acc;
                        alpha_acc += ua * vb * ab_acc;
                      }
                    if (ga) ga[i] += alpha_acc - gs_total;
                  }
                });
}

Tensor deformable_attention(const Tensor& weights, const Tensor& offsets, const Tensor& values,
                            AttentionLayout layout) {
  require_rank(weights, 3, "deformable_attention");
  require_rank(offsets, 3, "deformable_attention");
  require_rank(values, 3, "deformable_attention");
  const std::size_t M = layout.heads, T = layout.frames, K = layout.points;
  const long H = static_cast<long>(values.dim(0)), W = static_cast<long>(values.dim(1));
  const std::size_t slots = M * T * K;
  if (M == 0 || T == 0 || K == 0) throw DimensionError("deformable_attention: empty layout");
  if (values.dim(2) % T != 0) throw DimensionError("deformable_attention: value channels not divisible by T");
  const std::size_t C = values.dim(2) / T;
  if (C % M != 0) {
    throw DimensionError("deformable_attention: " + std::to_string(C) + " channels do not split over " +
                         std::to_string(M) + " heads");
  }
  const std::size_t Cv = C / M;
  const Shape grid{static_cast<std::size_t>(H), static_cast<std::size_t>(W)};
  if (weights.dim(0) != grid[0] || weights.dim(1) != grid[1] || weights.dim(2) != slots) {
    throw DimensionError("deformable_attention: weights shape " + shape_str(weights.shape()));
  }
  if (offsets.dim(0) != grid[0] || offsets.dim(1) != grid[1] || offsets.dim(2) != 2 * slots) {
    throw DimensionError("deformable_attention: offsets shape " + shape_str(offsets.shape()));
  }
  const std::size_t VC = values.dim(2);
  std::vector<double> out(static_cast<std::size_t>(H * W) * C, 0.0);
  const double* ad = weights.data().data();
  const double* od = offsets.data().data();
  const double* vd = values.data().data();
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y * W + x);
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t j = 0; j < K; ++j) {
            const std::size_t s = (m * T + t) * K + j;
            const auto tap = make_tap(y + od[p * 2 * slots + 2 * s], x + od[p * 2 * slots + 2 * s + 1], H, W);
            bilinear_gather(vd, H, W, VC, t * C + m * Cv, Cv, tap, ad[p * slots + s], out.data() + p * C + m * Cv);
          }
    }
  return finish("deformable_attention", Shape{grid[0], grid[1], C}, std::move(out), {weights, offsets, values},
                [=](std::span<const double> g) {
                  double* ga = grad_sink(weights);
                  double* go = grad_sink(offsets);
                  double* gv = grad_sink(values);
                  const double* ad = weights.data().data();
                  const double* od = offsets.data().data();
                  const double* vd = values.data().data();
                  std::vector<double> scaled(Cv);
                  std::vector<double> sample(Cv);
                  for (long y = 0; y < H; ++y)
                    for (long x = 0; x < W; ++x) {
                      const std::size_t p = static_cast<std::size_t>(y * W + x);
                      for (std::size_t m = 0; m < M; ++m) {
                        const double* gout = g.data() + p * C + m * Cv;
                        for (std::size_t t = 0; t < T; ++t)
                          for (std::size_t j = 0; j < K; ++j) {
                            const std::size_t s = (m * T + t) * K + j;
                            const double a = ad[p * slots + s];
                            const auto tap =
                                make_tap(y + od[p * 2 * slots + 2 * s], x + od[p * 2 * slots + 2 * s + 1], H, W);
                            if (ga) {
                              std::fill(sample.begin(), sample.end(), 0.0);
                              bilinear_gather(vd, H, W, VC, t * C + m * Cv, Cv, tap, 1.0, sample.data());
                              double acc = 0.0;
                              for (std::size_t c = 0; c < Cv; ++c) acc += gout[c] * sample[c];
                              ga[p * slots + s] += acc;
                            }
                            for (std::size_t c = 0; c < Cv; ++c) scaled[c] = a * gout[c];
                            bilinear_scatter(vd, gv, H, W, VC, t * C + m * Cv, Cv, tap, scaled.data(),
                                             go ? go + p * 2 * slots + 2 * s : nullptr,
                                             go ? go + p * 2 * slots + 2 * s + 1 : nullptr);
                          }
                      }
                    }
                });
}

Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  require_same_shape(hard, soft, "straight_through");
  return finish("straight_through", hard.shape(), copy_of(hard), {soft}, [soft](std::span<const double> g) {
    if (double* gs = grad_sink(soft)) for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
  });
}

}  // namespace uniwrv::tensorkit
