#ifndef ADVRF_CORE_OPS_HPP_
#define ADVRF_CORE_OPS_HPP_

#include <Eigen/Core>
#include <cmath>
#include <utility>
#include <vector>

#include "advrf/core/tensor.hpp"

namespace advrf {

namespace detail {

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using MapRM =
    Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename Scalar>
using CMapRM = Eigen::Map<
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Gathers K*K patches of one sample into a (C*K*K) x (OH*OW) column matrix.
template <typename Scalar>
void im2col(const Scalar* src, int C, int H, int W, int K, int stride, int pad,
            int OH, int OW, MatX<Scalar>& cols) {
  cols.setZero(static_cast<Eigen::Index>(C) * K * K,
               static_cast<Eigen::Index>(OH) * OW);
  for (int oh = 0; oh < OH; ++oh) {
    for (int ow = 0; ow < OW; ++ow) {
      const Eigen::Index col = static_cast<Eigen::Index>(oh) * OW + ow;
      Scalar* out = cols.data() + col * cols.rows();
      for (int c = 0; c < C; ++c) {
        for (int kh = 0; kh < K; ++kh) {
          const int h = oh * stride - pad + kh;
          if (h < 0 || h >= H) { out += K; continue; }
          const Scalar* row = src + (static_cast<std::int64_t>(c) * H + h) * W;
          for (int kw = 0; kw < K; ++kw) {
            const int w = ow * stride - pad + kw;
            *out++ = (w >= 0 && w < W) ? row[w] : Scalar(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back onto the (C,H,W) plane.
template <typename Scalar>
void col2im_add(const MatX<Scalar>& cols, int C, int H, int W, int K, int stride,
                int pad, int OH, int OW, Scalar* dst) {
  for (int oh = 0; oh < OH; ++oh) {
    for (int ow = 0; ow < OW; ++ow) {
      const Eigen::Index col = static_cast<Eigen::Index>(oh) * OW + ow;
      const Scalar* in = cols.data() + col * cols.rows();
      for (int c = 0; c < C; ++c) {
        for (int kh = 0; kh < K; ++kh) {
          const int h = oh * stride - pad + kh;
          if (h < 0 || h >= H) { in += K; continue; }
          Scalar* row = dst + (static_cast<std::int64_t>(c) * H + h) * W;
          for (int kw = 0; kw < K; ++kw) {
            const int w = ow * stride - pad + kw;
            Scalar v = *in++;
            if (w >= 0 && w < W) row[w] += v;
          }
        }
      }
    }
  }
}

}  // namespace detail

// input (N,Ci,H,W), kernel (Co,Ci,K,K). Output spatial size
// floor((H + 2p - K)/stride) + 1. im2col + GEMM per sample.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      int stride, int padding) {
  if (input.rank() != 4 || kernel.rank() != 4)
    throw DimensionError("conv2d: expected rank-4 input and kernel, got " +
                         shape_str(input.shape()) + " and " +
                         shape_str(kernel.shape()));
  if (stride < 1) throw InvalidArgument("conv2d: stride must be >= 1");
  if (padding < 0) throw InvalidArgument("conv2d: padding must be >= 0");
  const int N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Co = kernel.dim(0), Ki = kernel.dim(1), K = kernel.dim(2);
  if (kernel.dim(3) != K)
    throw DimensionError("conv2d: kernel must be square, got " +
                         shape_str(kernel.shape()));
  if (Ki != Ci)
    throw DimensionError("conv2d: input channel axis " + std::to_string(Ci) +
                         " vs kernel input-channel axis " + std::to_string(Ki));
  const int OH = (H + 2 * padding - K) / stride + 1;
  const int OW = (W + 2 * padding - K) / stride + 1;
  if (H + 2 * padding < K || W + 2 * padding < K)
    throw DimensionError("conv2d: kernel " + std::to_string(K) +
                         " exceeds padded input " + shape_str(input.shape()));

  const std::int64_t in_plane = static_cast<std::int64_t>(Ci) * H * W;
  const std::int64_t out_plane = static_cast<std::int64_t>(Co) * OH * OW;
  ArrX<Scalar> out(static_cast<std::int64_t>(N) * out_plane);
  detail::CMapRM<Scalar> Wm(kernel.value().data(), Co,
                            static_cast<Eigen::Index>(Ci) * K * K);
  detail::MatX<Scalar> cols;
  for (int n = 0; n < N; ++n) {
    detail::im2col(input.value().data() + n * in_plane, Ci, H, W, K, stride,
                   padding, OH, OW, cols);
    detail::MapRM<Scalar> out_n(out.data() + n * out_plane, Co,
                                static_cast<Eigen::Index>(OH) * OW);
    out_n.noalias() = Wm * cols;
  }

  auto xn = input.node(); auto kn = kernel.node();
  return detail::make_op<Scalar>(
      Shape{N, Co, OH, OW}, std::move(out), {input, kernel},
      [xn, kn, N, Ci, H, W, Co, K, stride, padding, OH, OW, in_plane,
       out_plane](TensorNode<Scalar>& self) {
        detail::CMapRM<Scalar> Wm(kn->value.data(), Co,
                                  static_cast<Eigen::Index>(Ci) * K * K);
        detail::MatX<Scalar> cols, dcols;
        detail::MatX<Scalar> dW;
        if (kn->requires_grad)
          dW.setZero(Co, static_cast<Eigen::Index>(Ci) * K * K);
        ArrX<Scalar> dx;
        if (xn->requires_grad) dx = ArrX<Scalar>::Zero(xn->value.size());
        for (int n = 0; n < N; ++n) {
          detail::CMapRM<Scalar> g_n(self.grad.data() + n * out_plane, Co,
                                     static_cast<Eigen::Index>(OH) * OW);
          if (kn->requires_grad) {
            detail::im2col(xn->value.data() + n * in_plane, Ci, H, W, K, stride,
                           padding, OH, OW, cols);
            dW.noalias() += g_n * cols.transpose();
          }
          if (xn->requires_grad) {
            dcols.noalias() = Wm.transpose() * g_n;
            detail::col2im_add(dcols, Ci, H, W, K, stride, padding, OH, OW,
                               dx.data() + n * in_plane);
          }
        }
        if (xn->requires_grad) detail::accum_grad(*xn, dx);
        if (kn->requires_grad)
          detail::accum_grad(
              *kn, Eigen::Map<const ArrX<Scalar>>(
                       detail::MatX<Scalar>(dW.transpose()).data(), kn->value.size()));
      });
}

// input (N,Ci,H,W), kernel (Ci,Co,K,K). Output spatial size
// (H-1)*stride - 2p + K. Forward is the adjoint of conv2d with the same
// kernel/stride/padding.
template <typename Scalar>
Tensor<Scalar> conv_transpose2d(const Tensor<Scalar>& input,
                                const Tensor<Scalar>& kernel, int stride,
                                int padding) {
  if (input.rank() != 4 || kernel.rank() != 4)
    throw DimensionError("conv_transpose2d: expected rank-4 input and kernel");
  if (stride < 1) throw InvalidArgument("conv_transpose2d: stride must be >= 1");
  if (padding < 0) throw InvalidArgument("conv_transpose2d: padding must be >= 0");
  const int N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int Kc = kernel.dim(0), Co = kernel.dim(1), K = kernel.dim(2);
  if (kernel.dim(3) != K)
    throw DimensionError("conv_transpose2d: kernel must be square");
  if (Kc != Ci)
    throw DimensionError("conv_transpose2d: input channel axis " +
                         std::to_string(Ci) + " vs kernel leading axis " +
                         std::to_string(Kc));
  const int OH = (H - 1) * stride - 2 * padding + K;
  const int OW = (W - 1) * stride - 2 * padding + K;
  if (OH < 1 || OW < 1)
    throw DimensionError("conv_transpose2d: degenerate output for input " +
                         shape_str(input.shape()));

  const std::int64_t in_plane = static_cast<std::int64_t>(Ci) * H * W;
  const std::int64_t out_plane = static_cast<std::int64_t>(Co) * OH * OW;
  ArrX<Scalar> out = ArrX<Scalar>::Zero(static_cast<std::int64_t>(N) * out_plane);
  detail::CMapRM<Scalar> Wm(kernel.value().data(), Ci,
                            static_cast<Eigen::Index>(Co) * K * K);
  detail::MatX<Scalar> G;
  for (int n = 0; n < N; ++n) {
    detail::CMapRM<Scalar> x_n(input.value().data() + n * in_plane, Ci,
                               static_cast<Eigen::Index>(H) * W);
    G.noalias() = Wm.transpose() * x_n;  // (Co*K*K, H*W)
    detail::col2im_add(G, Co, OH, OW, K, stride, padding, H, W,
                       out.data() + n * out_plane);
  }

  auto xn = input.node(); auto kn = kernel.node();
  return detail::make_op<Scalar>(
      Shape{N, Co, OH, OW}, std::move(out), {input, kernel},
      [xn, kn, N, Ci, H, W, Co, K, stride, padding, OH, OW, in_plane,
       out_plane](TensorNode<Scalar>& self) {
        detail::CMapRM<Scalar> Wm(kn->value.data(), Ci,
                                  static_cast<Eigen::Index>(Co) * K * K);
        detail::MatX<Scalar> gcols, dW;
        if (kn->requires_grad)
          dW.setZero(Ci, static_cast<Eigen::Index>(Co) * K * K);
        ArrX<Scalar> dx;
        if (xn->requires_grad) dx = ArrX<Scalar>::Zero(xn->value.size());
        for (int n = 0; n < N; ++n) {
          detail::im2col(self.grad.data() + n * out_plane, Co, OH, OW, K, stride,
                         padding, H, W, gcols);
          if (xn->requires_grad) {
            detail::MapRM<Scalar> dx_n(dx.data() + n * in_plane, Ci,
                                       static_cast<Eigen::Index>(H) * W);
            dx_n.noalias() = Wm * gcols;
          }
          if (kn->requires_grad) {
            detail::CMapRM<Scalar> x_n(xn->value.data() + n * in_plane, Ci,
                                       static_cast<Eigen::Index>(H) * W);
            dW.noalias() += x_n * gcols.transpose();
          }
        }
        if (xn->requires_grad) detail::accum_grad(*xn, dx);
        if (kn->requires_grad)
          detail::accum_grad(
              *kn, Eigen::Map<const ArrX<Scalar>>(
                       detail::MatX<Scalar>(dW.transpose()).data(), kn->value.size()));
      });
}

// Adds a per-channel bias to an NCHW tensor.
template <typename Scalar>
Tensor<Scalar> bias_add(const Tensor<Scalar>& x, const Tensor<Scalar>& bias) {
  if (x.rank() != 4 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw DimensionError("bias_add: bias " + shape_str(bias.shape()) +
                         " does not match channels of " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  ArrX<Scalar> y = x.value();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      y.segment((static_cast<std::int64_t>(n) * C + c) * plane, plane) += bias.value()[c];
  auto xn = x.node(); auto bn = bias.node();
  return detail::make_op<Scalar>(
      x.shape(), std::move(y), {x, bias},
      [xn, bn, N, C, plane](TensorNode<Scalar>& self) {
        detail::accum_grad(*xn, self.grad);
        if (bn->requires_grad) {
          ArrX<Scalar> db = ArrX<Scalar>::Zero(C);
          for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
              db[c] += self.grad
                           .segment((static_cast<std::int64_t>(n) * C + c) * plane, plane)
                           .sum();
          detail::accum_grad(*bn, db);
        }
      });
}

// (N,C,H,W) -> (N,C): arithmetic mean over each spatial plane.
template <typename Scalar>
Tensor<Scalar> global_average_pool(const Tensor<Scalar>& x) {
  if (x.rank() != 4)
    throw DimensionError("global_average_pool: expected rank-4 input, got " +
                         shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  ArrX<Scalar> y(static_cast<std::int64_t>(N) * C);
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(N) * C; ++i)
    y[i] = x.value().segment(i * plane, plane).mean();
  auto xn = x.node();
  return detail::make_op<Scalar>(
      Shape{N, C}, std::move(y), {x}, [xn, N, C, plane](TensorNode<Scalar>& self) {
        if (!xn->requires_grad) return;
        ArrX<Scalar> dx(xn->value.size());
        const Scalar inv = Scalar(1) / static_cast<Scalar>(plane);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(N) * C; ++i)
          dx.segment(i * plane, plane).setConstant(self.grad[i] * inv);
        detail::accum_grad(*xn, dx);
      });
}

enum class UpsampleMode { kBilinear, kNearest };

namespace detail {

struct AxisTap {
  int i0, i1;
  double w0, w1;
};

inline std::vector<AxisTap> bilinear_taps(int src, int dst) {
  std::vector<AxisTap> taps(static_cast<std::size_t>(dst));
  const double scale = static_cast<double>(src) / dst;
  for (int d = 0; d < dst; ++d) {
    double s = (d + 0.5) * scale - 0.5;
    if (s < 0) s = 0;
    int i0 = static_cast<int>(s);
    if (i0 > src - 1) i0 = src - 1;
    int i1 = i0 + 1 < src ? i0 + 1 : src - 1;
    double w1 = s - i0;
    if (w1 < 0) w1 = 0;
    if (w1 > 1) w1 = 1;
    taps[static_cast<std::size_t>(d)] = {i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

}  // namespace detail

// Upscales the spatial axes of an NCHW tensor. Corner alignment off.
template <typename Scalar>
Tensor<Scalar> upsample(const Tensor<Scalar>& x, int target_h, int target_w,
                        UpsampleMode mode = UpsampleMode::kBilinear) {
  if (x.rank() != 4)
    throw DimensionError("upsample: expected rank-4 input, got " +
                         shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (target_h < H || target_w < W)
    throw InvalidArgument("upsample: target " + std::to_string(target_h) + "x" +
                          std::to_string(target_w) + " smaller than source " +
                          std::to_string(H) + "x" + std::to_string(W));
  std::vector<detail::AxisTap> th = detail::bilinear_taps(H, target_h);
  std::vector<detail::AxisTap> tw = detail::bilinear_taps(W, target_w);
  if (mode == UpsampleMode::kNearest) {
    for (auto& t : th) { t.w0 = t.w1 < 0.5 ? 1.0 : 0.0; t.w1 = 1.0 - t.w0; }
    for (auto& t : tw) { t.w0 = t.w1 < 0.5 ? 1.0 : 0.0; t.w1 = 1.0 - t.w0; }
  }

  const std::int64_t src_plane = static_cast<std::int64_t>(H) * W;
  const std::int64_t dst_plane = static_cast<std::int64_t>(target_h) * target_w;
  ArrX<Scalar> y(static_cast<std::int64_t>(N) * C * dst_plane);
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(N) * C; ++p) {
    const Scalar* src = x.value().data() + p * src_plane;
    Scalar* dst = y.data() + p * dst_plane;
    for (int dh = 0; dh < target_h; ++dh) {
      const auto& a = th[static_cast<std::size_t>(dh)];
      for (int dw = 0; dw < target_w; ++dw) {
        const auto& b = tw[static_cast<std::size_t>(dw)];
        dst[static_cast<std::int64_t>(dh) * target_w + dw] = static_cast<Scalar>(
            a.w0 * (b.w0 * src[a.i0 * W + b.i0] + b.w1 * src[a.i0 * W + b.i1]) +
            a.w1 * (b.w0 * src[a.i1 * W + b.i0] + b.w1 * src[a.i1 * W + b.i1]));
      }
    }
  }
  auto xn = x.node();
  return detail::make_op<Scalar>(
      Shape{N, C, target_h, target_w}, std::move(y), {x},
      [xn, N, C, H, W, target_h, target_w, th, tw, src_plane,
       dst_plane](TensorNode<Scalar>& self) {
        if (!xn->requires_grad) return;
        ArrX<Scalar> dx = ArrX<Scalar>::Zero(xn->value.size());
        for (std::int64_t p = 0; p < static_cast<std::int64_t>(N) * C; ++p) {
          const Scalar* g = self.grad.data() + p * dst_plane;
          Scalar* d = dx.data() + p * src_plane;
          for (int dh = 0; dh < target_h; ++dh) {
            const auto& a = th[static_cast<std::size_t>(dh)];
            for (int dw = 0; dw < target_w; ++dw) {
              const auto& b = tw[static_cast<std::size_t>(dw)];
              const Scalar gv = g[static_cast<std::int64_t>(dh) * target_w + dw];
              d[a.i0 * W + b.i0] += static_cast<Scalar>(a.w0 * b.w0) * gv;
              d[a.i0 * W + b.i1] += static_cast<Scalar>(a.w0 * b.w1) * gv;
              d[a.i1 * W + b.i0] += static_cast<Scalar>(a.w1 * b.w0) * gv;
              d[a.i1 * W + b.i1] += static_cast<Scalar>(a.w1 * b.w1) * gv;
            }
          }
        }
        detail::accum_grad(*xn, dx);
      });
}

template <typename Scalar>
Tensor<Scalar> upsample_bilinear(const Tensor<Scalar>& x, int target_h,
                                 int target_w) {
  return upsample(x, target_h, target_w, UpsampleMode::kBilinear);
}

// sqrt(sum((mask*(A-B))^2)), size-normalized by the element count of A-B
// when `normalize` is set. Mask is either the full shape or (N,1,H,W)
// against (N,C,H,W).
template <typename Scalar>
Tensor<Scalar> masked_frobenius(const Tensor<Scalar>& a, const Tensor<Scalar>& b,
                                const Tensor<Scalar>& mask, bool normalize = true) {
  detail::check_same_shape(a, b, "masked_frobenius");
  const bool broadcast = mask.shape() != a.shape();
  int N = 0, C = 0;
  std::int64_t plane = 0;
  if (broadcast) {
    if (a.rank() != 4 || mask.rank() != 4 || mask.dim(1) != 1 ||
        mask.dim(0) != a.dim(0) || mask.dim(2) != a.dim(2) ||
        mask.dim(3) != a.dim(3))
      throw DimensionError("masked_frobenius: mask " + shape_str(mask.shape()) +
                           " does not broadcast over " + shape_str(a.shape()));
    N = a.dim(0);
    C = a.dim(1);
    plane = static_cast<std::int64_t>(a.dim(2)) * a.dim(3);
  }

  auto masked_at = [&](std::int64_t i) -> Scalar {
    if (!broadcast) return mask.value()[i];
    const std::int64_t n = i / (C * plane);
    const std::int64_t rem = i % plane;
    return mask.value()[n * plane + rem];
  };

  Scalar ssq = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const Scalar t = masked_at(i) * (a.value()[i] - b.value()[i]);
    ssq += t * t;
  }
  const Scalar denom = normalize ? static_cast<Scalar>(a.numel()) : Scalar(1);
  ArrX<Scalar> v(1);
  v[0] = std::sqrt(ssq) / denom;

  auto an = a.node(); auto bn = b.node(); auto mn = mask.node();
  return detail::make_op<Scalar>(
      Shape{1}, std::move(v), {a, b, mask},
      [an, bn, mn, broadcast, N, C, plane, denom, ssq](TensorNode<Scalar>& self) {
        if (ssq <= Scalar(0)) return;  // subgradient 0 at the kink
        const Scalar coef = self.grad[0] / (denom * std::sqrt(ssq));
        const std::int64_t total = an->value.size();
        auto mval = [&](std::int64_t i) -> Scalar {
          if (!broadcast) return mn->value[i];
          const std::int64_t n = i / (C * plane);
          return mn->value[n * plane + i % plane];
        };
        if (an->requires_grad || bn->requires_grad) {
          ArrX<Scalar> d(total);
          for (std::int64_t i = 0; i < total; ++i) {
            const Scalar m = mval(i);
            d[i] = coef * m * m * (an->value[i] - bn->value[i]);
          }
          if (an->requires_grad) detail::accum_grad(*an, d);
          if (bn->requires_grad) detail::accum_grad(*bn, -d);
        }
        if (mn->requires_grad) {
          ArrX<Scalar> dm = ArrX<Scalar>::Zero(mn->value.size());
          for (std::int64_t i = 0; i < total; ++i) {
            const Scalar diff = an->value[i] - bn->value[i];
            const std::int64_t mi =
                broadcast ? (i / (C * plane)) * plane + i % plane : i;
            dm[mi] += coef * mn->value[mi] * diff * diff;
          }
          detail::accum_grad(*mn, dm);
        }
      });
}

// x (N,C) @ weight (K,C)^T + bias (K) -> (N,K)
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1)
    throw DimensionError("linear: expected (N,C) x, (K,C) weight, (K) bias");
  const int N = x.dim(0), C = x.dim(1), K = weight.dim(0);
  if (weight.dim(1) != C || bias.dim(0) != K)
    throw DimensionError("linear: weight " + shape_str(weight.shape()) +
                         " / bias " + shape_str(bias.shape()) +
                         " incompatible with input " + shape_str(x.shape()));
  detail::CMapRM<Scalar> X(x.value().data(), N, C);
  detail::CMapRM<Scalar> Wm(weight.value().data(), K, C);
  ArrX<Scalar> y(static_cast<std::int64_t>(N) * K);
  detail::MapRM<Scalar> Y(y.data(), N, K);
  Y.noalias() = X * Wm.transpose();
  for (int n = 0; n < N; ++n)
    y.segment(static_cast<std::int64_t>(n) * K, K) += bias.value();
  auto xn = x.node(); auto wn = weight.node(); auto bn = bias.node();
  return detail::make_op<Scalar>(
      Shape{N, K}, std::move(y), {x, weight, bias},
      [xn, wn, bn, N, C, K](TensorNode<Scalar>& self) {
        detail::CMapRM<Scalar> G(self.grad.data(), N, K);
        detail::CMapRM<Scalar> X(xn->value.data(), N, C);
        detail::CMapRM<Scalar> Wm(wn->value.data(), K, C);
        if (xn->requires_grad) {
          ArrX<Scalar> dx(xn->value.size());
          detail::MapRM<Scalar> DX(dx.data(), N, C);
          DX.noalias() = G * Wm;
          detail::accum_grad(*xn, dx);
        }
        if (wn->requires_grad) {
          ArrX<Scalar> dw(wn->value.size());
          detail::MapRM<Scalar> DW(dw.data(), K, C);
          DW.noalias() = G.transpose() * X;
          detail::accum_grad(*wn, dw);
        }
        if (bn->requires_grad) {
          ArrX<Scalar> db(K);
          detail::MapRM<Scalar> DB(db.data(), 1, K);
          DB = G.colwise().sum();
          detail::accum_grad(*bn, db);
        }
      });
}

// Mean softmax cross-entropy over the batch with integer class labels.
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits,
                                     const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw DimensionError("softmax_cross_entropy: expected (N,K) logits");
  const int N = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != N)
    throw DimensionError("softmax_cross_entropy: " +
                         std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(N));
  for (int y : labels)
    if (y < 0 || y >= K)
      throw InvalidArgument("softmax_cross_entropy: label " + std::to_string(y) +
                            " outside [0," + std::to_string(K) + ")");
  Scalar total = 0;
  for (int n = 0; n < N; ++n) {
    const auto row = logits.value().segment(static_cast<std::int64_t>(n) * K, K);
    const Scalar m = row.maxCoeff();
    const Scalar lse = m + std::log((row - m).exp().sum());
    total += lse - row[labels[static_cast<std::size_t>(n)]];
  }
  ArrX<Scalar> v(1);
  v[0] = total / static_cast<Scalar>(N);
  auto ln = logits.node();
  return detail::make_op<Scalar>(
      Shape{1}, std::move(v), {logits},
      [ln, labels, N, K](TensorNode<Scalar>& self) {
        if (!ln->requires_grad) return;
        ArrX<Scalar> d(ln->value.size());
        const Scalar g = self.grad[0] / static_cast<Scalar>(N);
        for (int n = 0; n < N; ++n) {
          const auto row = ln->value.segment(static_cast<std::int64_t>(n) * K, K);
          const Scalar m = row.maxCoeff();
          ArrX<Scalar> p = (row - m).exp();
          p /= p.sum();
          p[labels[static_cast<std::size_t>(n)]] -= Scalar(1);
          d.segment(static_cast<std::int64_t>(n) * K, K) = p * g;
        }
        detail::accum_grad(*ln, d);
      });
}

// Concatenates two NCHW tensors along the channel axis.
template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw DimensionError("concat_channels: incompatible shapes " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(a.dim(2)) * a.dim(3);
  ArrX<Scalar> y(static_cast<std::int64_t>(N) * (Ca + Cb) * plane);
  for (int n = 0; n < N; ++n) {
    y.segment(static_cast<std::int64_t>(n) * (Ca + Cb) * plane, Ca * plane) =
        a.value().segment(static_cast<std::int64_t>(n) * Ca * plane, Ca * plane);
    y.segment(static_cast<std::int64_t>(n) * (Ca + Cb) * plane + Ca * plane,
              Cb * plane) =
        b.value().segment(static_cast<std::int64_t>(n) * Cb * plane, Cb * plane);
  }
  auto an = a.node(); auto bn = b.node();
  return detail::make_op<Scalar>(
      Shape{N, Ca + Cb, a.dim(2), a.dim(3)}, std::move(y), {a, b},
      [an, bn, N, Ca, Cb, plane](TensorNode<Scalar>& self) {
        if (an->requires_grad) {
          ArrX<Scalar> da(an->value.size());
          for (int n = 0; n < N; ++n)
            da.segment(static_cast<std::int64_t>(n) * Ca * plane, Ca * plane) =
                self.grad.segment(static_cast<std::int64_t>(n) * (Ca + Cb) * plane,
                                  Ca * plane);
          detail::accum_grad(*an, da);
        }
        if (bn->requires_grad) {
          ArrX<Scalar> db(bn->value.size());
          for (int n = 0; n < N; ++n)
            db.segment(static_cast<std::int64_t>(n) * Cb * plane, Cb * plane) =
                self.grad.segment(
                    static_cast<std::int64_t>(n) * (Ca + Cb) * plane + Ca * plane,
                    Cb * plane);
          detail::accum_grad(*bn, db);
        }
      });
}

// Normalizes each (sample, channel) spatial plane by its own mean/variance.
// Batch-size independent by construction.
template <typename Scalar>
Tensor<Scalar> channel_norm(const Tensor<Scalar>& x, Scalar eps = Scalar(1e-5)) {
  if (x.rank() != 4)
    throw DimensionError("channel_norm: expected rank-4 input");
  const int N = x.dim(0), C = x.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  ArrX<Scalar> y(x.numel());
  ArrX<Scalar> inv_sigma(static_cast<std::int64_t>(N) * C);
  for (std::int64_t p = 0; p < static_cast<std::int64_t>(N) * C; ++p) {
    const auto seg = x.value().segment(p * plane, plane);
    const Scalar mu = seg.mean();
    const Scalar var = (seg - mu).square().mean();
    const Scalar inv = Scalar(1) / std::sqrt(var + eps);
    inv_sigma[p] = inv;
    y.segment(p * plane, plane) = (seg - mu) * inv;
  }
  auto xn = x.node();
  auto yv = std::make_shared<ArrX<Scalar>>(y);
  auto is = std::make_shared<ArrX<Scalar>>(std::move(inv_sigma));
  return detail::make_op<Scalar>(
      x.shape(), std::move(y), {x},
      [xn, yv, is, N, C, plane](TensorNode<Scalar>& self) {
        if (!xn->requires_grad) return;
        ArrX<Scalar> dx(xn->value.size());
        for (std::int64_t p = 0; p < static_cast<std::int64_t>(N) * C; ++p) {
          const auto g = self.grad.segment(p * plane, plane);
          const auto yh = yv->segment(p * plane, plane);
          const Scalar gm = g.mean();
          const Scalar gym = (g * yh).mean();
          dx.segment(p * plane, plane) = ((*is)[p]) * (g - gm - yh * gym);
        }
        detail::accum_grad(*xn, dx);
      });
}

}  // namespace advrf

#endif  // ADVRF_CORE_OPS_HPP_
