// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "uniwrv/tensorkit/tensor.hpp"

// Differentiable primitives. Every op computes its forward eagerly and,
// when a Tape is active and any input requires grad, records a backward
// closure. Feature maps are H x W x C; kernels are k x k x Cin x Cout.
namespace uniwrv::tensorkit {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
// Natural log; non-positive entries raise NumericError.
Tensor log(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// mean((a - b)^2) over all elements.
Tensor mse(const Tensor& a, const Tensor& b);
// mean(|a - b|) over all elements.
Tensor l1(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& a, Shape shape);
// Gradient barrier; the result aliases `a`'s storage.
Tensor stop_gradient(const Tensor& a);

/// Stop-gradient values pinned for finite differencing. While a scope is
/// active in capture mode every stop_gradient result is copied, in call
/// order; in replay mode stop_gradient returns those copies instead, so a
/// perturbed input does not leak through its blocked paths.
struct FrozenStopGradients {
  std::vector<std::vector<double>> values;
  std::size_t cursor = 0;
  bool replay = false;
};

class FrozenStopGradientScope {
 public:
  explicit FrozenStopGradientScope(FrozenStopGradients& frozen);
  ~FrozenStopGradientScope();
  FrozenStopGradientScope(const FrozenStopGradientScope&) = delete;
  FrozenStopGradientScope& operator=(const FrozenStopGradientScope&) = delete;

 private:
  FrozenStopGradients* previous_;
};

/// Zero-padded cross-correlation. `bias` may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1, int pad = 0) {
  return conv2d(x, w, Tensor{}, stride, pad);
}

/// 4-neighbour bilinear interpolation of x[H,W,C] at `coord` = (row, col).
/// Out-of-grid neighbours contribute zero.
Tensor bilinear_sample(const Tensor& x, const Tensor& coord);

/// out[r,c] = bilinear_sample(x, (r,c) + flow[r,c]).
Tensor warp(const Tensor& x, const Tensor& flow);

Tensor pixel_unshuffle(const Tensor& x, int r);
Tensor pixel_shuffle(const Tensor& x, int r);
// r x r box average, H and W divisible by r.
Tensor avg_pool(const Tensor& x, int r);

Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
// Softmax over consecutive runs of `group` elements of the flattened tensor.
Tensor softmax_groups(const Tensor& x, std::size_t group);

Tensor global_avg_pool(const Tensor& x);             // [H,W,C] -> [C]
Tensor broadcast_add(const Tensor& x, const Tensor& v);  // [H,W,C] + [C]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // [n] x [n,m] + [m]
Tensor concat_channels(std::span<const Tensor> parts);
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end);
Tensor tile(const Tensor& v, std::size_t length);    // repeat end-to-end
Tensor select_row(const Tensor& m, std::size_t row);  // [P,C] -> [C]
Tensor pick(const Tensor& v, std::size_t index);      // [n] -> scalar
Tensor matvec(const Tensor& m, const Tensor& v);      // [P,C] x [C] -> [P]
// Flattens and joins end-to-end.
Tensor concat(std::span<const Tensor> parts);

/// Cosine similarity; defined as 0 when either vector is all-zero.
Tensor cosine(const Tensor& a, const Tensor& b);
/// v / |v|; a zero vector maps to zero.
Tensor l2_normalize(const Tensor& v);

/// W'[a,b,m,n] = (sum_i alpha_i u_i[a] v_i[b] c_i[m] o_i[n]) * W[a,b,m,n]
/// for alpha on the simplex. Evaluated as 1 + sum_i alpha_i (outer_i - 1),
/// so all-ones modifiers return W bit-exactly for any alpha.
/// u,v: [P,k]; c: [P,Cin]; o: [P,Cout]; alpha: [P].
Tensor route_kernel(const Tensor& w, const Tensor& u, const Tensor& v, const Tensor& c,
                    const Tensor& o, const Tensor& alpha);

struct AttentionLayout {
  std::size_t heads;   // M
  std::size_t frames;  // T
  std::size_t points;  // K
};

/// Multi-frame deformable attention sampling.
/// weights [h,w,M*T*K] (already normalised), offsets [h,w,M*T*K*2] as
/// (row, col) pairs, values [h,w,T*C] with frame-major channel blocks and
/// head m owning channels [m*C/M, (m+1)*C/M) inside each block.
/// Returns [h,w,C].
Tensor deformable_attention(const Tensor& weights, const Tensor& offsets, const Tensor& values,
                            AttentionLayout layout);

/// Forward value of `hard`, gradient routed to `soft` (straight-through).
Tensor straight_through(const Tensor& hard, const Tensor& soft);

// Multiply-accumulate instrumentation for conv2d and route_kernel, per thread.
struct MacCounter {
  static void reset();
  static std::uint64_t conv_macs();
  static std::uint64_t modifier_macs();
};

}  // namespace uniwrv::tensorkit
