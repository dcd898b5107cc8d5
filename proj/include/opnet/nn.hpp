#pragma once

#include "opnet/ops.hpp"

#include <array>
#include <limits>

namespace opnet {

namespace detail {

struct Conv3dGeometry {
  Index cin = 0, t = 0, f = 0, d = 0;
  Index cout = 0;
  std::array<Index, 3> kernel{}, padding{};
  Index to = 0, fo = 0, dout = 0;

  Index patch() const { return cin * kernel[0] * kernel[1] * kernel[2]; }
  Index positions() const { return to * fo * dout; }
  Index in_size() const { return cin * t * f * d; }
};

// Unfolds one sample into a (positions x patch) row-major matrix. Each patch row is
// laid out (c, a, b, e) to match the weight layout; the innermost depth run is contiguous
// in the input, so it is copied as a block.
template <typename Scalar>
void im2row3d(const Scalar* x, const Conv3dGeometry& g, Scalar* rows) {
  const Index K = g.patch(), kd = g.kernel[2];
  for (Index ot = 0; ot < g.to; ++ot) {
    for (Index of = 0; of < g.fo; ++of) {
      for (Index od = 0; od < g.dout; ++od) {
        Scalar* dst = rows + ((ot * g.fo + of) * g.dout + od) * K;
        const Index d0 = od - g.padding[2];
        const Index lo = std::max<Index>(0, -d0), hi = std::min<Index>(kd, g.d - d0);
        for (Index c = 0; c < g.cin; ++c) {
          for (Index a = 0; a < g.kernel[0]; ++a) {
            const Index it = ot + a - g.padding[0];
            for (Index b = 0; b < g.kernel[1]; ++b, dst += kd) {
              const Index jf = of + b - g.padding[1];
              if (it < 0 || it >= g.t || jf < 0 || jf >= g.f || lo >= hi) {
                std::fill(dst, dst + kd, Scalar(0));
                continue;
              }
              const Scalar* src = x + ((c * g.t + it) * g.f + jf) * g.d + d0;
              std::fill(dst, dst + lo, Scalar(0));
              std::copy(src + lo, src + hi, dst + lo);
              std::fill(dst + hi, dst + kd, Scalar(0));
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2row3d: scatter-adds patch gradients back into the input grad.
template <typename Scalar>
void row2im3d(const Scalar* rows, const Conv3dGeometry& g, Scalar* dx) {
  const Index K = g.patch(), kd = g.kernel[2];
  for (Index ot = 0; ot < g.to; ++ot) {
    for (Index of = 0; of < g.fo; ++of) {
      for (Index od = 0; od < g.dout; ++od) {
        const Scalar* src = rows + ((ot * g.fo + of) * g.dout + od) * K;
        const Index d0 = od - g.padding[2];
        const Index lo = std::max<Index>(0, -d0), hi = std::min<Index>(kd, g.d - d0);
        for (Index c = 0; c < g.cin; ++c) {
          for (Index a = 0; a < g.kernel[0]; ++a) {
            const Index it = ot + a - g.padding[0];
            for (Index b = 0; b < g.kernel[1]; ++b, src += kd) {
              const Index jf = of + b - g.padding[1];
              if (it < 0 || it >= g.t || jf < 0 || jf >= g.f) continue;
              Scalar* dst = dx + ((c * g.t + it) * g.f + jf) * g.d + d0;
              for (Index e = lo; e < hi; ++e) dst[e] += src[e];
            }
          }
        }
      }
    }
  }
}

// Planar variant for depth-1 inputs (kd == 1, no depth padding): unfolds into a
// (patch x positions) row-major matrix, copying contiguous frequency runs.
template <typename Scalar>
void im2col_planar(const Scalar* x, const Conv3dGeometry& g, Scalar* cols) {
  const Index P = g.positions();
  Scalar* dst = cols;
  for (Index c = 0; c < g.cin; ++c) {
    for (Index a = 0; a < g.kernel[0]; ++a) {
      for (Index b = 0; b < g.kernel[1]; ++b, dst += P) {
        const Index lo = std::max<Index>(0, g.padding[1] - b);
        const Index hi = std::min<Index>(g.fo, g.f + g.padding[1] - b);
        Scalar* out = dst;
        for (Index ot = 0; ot < g.to; ++ot, out += g.fo) {
          const Index it = ot + a - g.padding[0];
          if (it < 0 || it >= g.t || lo >= hi) {
            std::fill(out, out + g.fo, Scalar(0));
            continue;
          }
          const Scalar* src = x + (c * g.t + it) * g.f + b - g.padding[1];
          std::fill(out, out + lo, Scalar(0));
          std::copy(src + lo, src + hi, out + lo);
          std::fill(out + hi, out + g.fo, Scalar(0));
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_planar(const Scalar* cols, const Conv3dGeometry& g, Scalar* dx) {
  const Index P = g.positions();
  const Scalar* src_row = cols;
  for (Index c = 0; c < g.cin; ++c) {
    for (Index a = 0; a < g.kernel[0]; ++a) {
      for (Index b = 0; b < g.kernel[1]; ++b, src_row += P) {
        const Index lo = std::max<Index>(0, g.padding[1] - b);
        const Index hi = std::min<Index>(g.fo, g.f + g.padding[1] - b);
        const Scalar* in = src_row;
        for (Index ot = 0; ot < g.to; ++ot, in += g.fo) {
          const Index it = ot + a - g.padding[0];
          if (it < 0 || it >= g.t) continue;
          Scalar* dst = dx + (c * g.t + it) * g.f + b - g.padding[1];
          for (Index of = lo; of < hi; ++of) dst[of] += in[of];
        }
      }
    }
  }
}

inline bool is_planar(const Conv3dGeometry& g) {
  return g.d == 1 && g.kernel[2] == 1 && g.padding[2] == 0;
}

inline bool is_depth_spanning(const Conv3dGeometry& g) {
  return g.padding[2] == 0 && g.kernel[2] == g.d && g.d > 1;
}

// Zero-pads time and frequency of one sample: (Cin, T, F, D) -> (Cin, T+2pt, F+2pf, D).
template <typename Scalar>
void pad_planes(const Scalar* x, const Conv3dGeometry& g, Scalar* out) {
  const Index tp = g.t + 2 * g.padding[0], fp = g.f + 2 * g.padding[1];
  std::fill(out, out + g.cin * tp * fp * g.d, Scalar(0));
  for (Index c = 0; c < g.cin; ++c) {
    for (Index t = 0; t < g.t; ++t) {
      const Scalar* src = x + (c * g.t + t) * g.f * g.d;
      std::copy(src, src + g.f * g.d, out + ((c * tp + t + g.padding[0]) * fp + g.padding[1]) * g.d);
    }
  }
}

}  // namespace detail

namespace detail {

// Convolution whose kernel covers the whole (unpadded) depth axis. In the padded
// input, the (kf x D) window under output position (t, f) for time offset a is one
// contiguous span starting at ((t + a) * Fp + f) * D, so rows of consecutive positions
// form an overlapping strided matrix that feeds GEMM directly. Rows whose f falls in the
// padding columns are computed and discarded.
template <typename Scalar>
Tensor<Scalar> conv3d_depth_spanning(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                                     const Tensor<Scalar>& bias, const Conv3dGeometry& g) {
  using Stride = Eigen::OuterStride<>;
  using ConstSpanMap = Eigen::Map<const RowMatrix<Scalar>, 0, Stride>;
  using ColMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const Index B = x.dim(0), K = g.patch(), P = g.positions();
  const Index tp = g.t + 2 * g.padding[0], fp = g.f + 2 * g.padding[1];
  const Index span = g.kernel[1] * g.d;
  const Index rows = (g.to - 1) * fp + g.fo;
  const Index plane = tp * fp * g.d;
  const auto W = weight.matrix(g.cout, K);

  auto block = [&](Index c, Index a) {
    const Index off = (c * g.kernel[0] + a) * span;
    return W.middleCols(off, span);
  };

  Buffer<Scalar> out(B * g.cout * P);
  Buffer<Scalar> padded(g.cin * plane);
  ColMatrix acc(rows, g.cout);
  for (Index b = 0; b < B; ++b) {
    pad_planes(x.data().data() + b * g.in_size(), g, padded.data());
    acc.setZero();
    for (Index c = 0; c < g.cin; ++c) {
      for (Index a = 0; a < g.kernel[0]; ++a) {
        ConstSpanMap lhs(padded.data() + c * plane + a * fp * g.d, rows, span, Stride(g.d));
        acc.noalias() += lhs * block(c, a).transpose();
      }
    }
    Scalar* ob = out.data() + b * g.cout * P;
    for (Index o = 0; o < g.cout; ++o) {
      for (Index t = 0; t < g.to; ++t) {
        for (Index f = 0; f < g.fo; ++f) ob[o * P + t * g.fo + f] = acc(t * fp + f, o) + bias.data()[o];
      }
    }
  }
  return Tensor<Scalar>::from_op(
      {B, g.cout, g.to, g.fo, g.dout}, std::move(out), {x, weight, bias},
      [x, weight, g, B, tp, fp, span, rows, plane](TensorNode<Scalar>& n) {
        const Index K = g.patch(), P = g.positions();
        const auto W = weight.matrix(g.cout, K);
        const bool need_x = parent_needs_grad(n, 0), need_w = parent_needs_grad(n, 1);
        Scalar* gb = parent_needs_grad(n, 2) ? n.parents[2]->ensure_grad().data() : nullptr;
        Scalar* gw = need_w ? n.parents[1]->ensure_grad().data() : nullptr;
        Scalar* gx = need_x ? n.parents[0]->ensure_grad().data() : nullptr;
        Buffer<Scalar> padded(g.cin * plane);
        ColMatrix dy = ColMatrix::Zero(rows, g.cout);
        RowMatrix<Scalar> dspan(rows, span);
        for (Index b = 0; b < B; ++b) {
          const Scalar* gyb = n.grad.data() + b * g.cout * P;
          for (Index o = 0; o < g.cout; ++o) {
            for (Index t = 0; t < g.to; ++t) {
              for (Index f = 0; f < g.fo; ++f) dy(t * fp + f, o) = gyb[o * P + t * g.fo + f];
            }
          }
          if (gb) Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(gb, g.cout) += dy.colwise().sum();
          if (need_w) pad_planes(x.data().data() + b * g.in_size(), g, padded.data());
          for (Index c = 0; c < g.cin; ++c) {
            for (Index a = 0; a < g.kernel[0]; ++a) {
              const Index off = (c * g.kernel[0] + a) * span;
              if (need_w) {
                ConstSpanMap lhs(padded.data() + c * plane + a * fp * g.d, rows, span, Stride(g.d));
                MatrixMap<Scalar>(gw, g.cout, K).middleCols(off, span).noalias() += dy.transpose() * lhs;
              }
              if (need_x) {
                dspan.noalias() = dy * W.middleCols(off, span);
                // scatter overlapping spans back, dropping the padding border
                for (Index r = 0; r < rows; ++r) {
                  const Index base = ((a * fp) + r) * g.d;
                  for (Index k = 0; k < span; ++k) {
                    const Index q = base + k;
                    const Index pt = q / (fp * g.d), rem = q % (fp * g.d);
                    const Index pf = rem / g.d, e = rem % g.d;
                    const Index t = pt - g.padding[0], f = pf - g.padding[1];
                    if (t < 0 || t >= g.t || f < 0 || f >= g.f) continue;
                    gx[b * g.in_size() + ((c * g.t + t) * g.f + f) * g.d + e] += dspan(r, k);
                  }
                }
              }
            }
          }
        }
      });
}

}  // namespace detail

/// 3-D convolution, stride 1. x: (B, Cin, T, F, D), weight: (Cout, Cin, kt, kf, kd), bias: (Cout).
template <typename Scalar>
Tensor<Scalar> conv3d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                      std::array<Index, 3> padding) {
  if (x.rank() != 5) throw ShapeError("conv3d: input must be (B, C, T, F, D), got " + to_string(x.shape()));
  if (weight.rank() != 5) throw ShapeError("conv3d: weight must be rank 5");
  detail::Conv3dGeometry g;
  g.cin = x.dim(1);
  g.t = x.dim(2);
  g.f = x.dim(3);
  g.d = x.dim(4);
  g.cout = weight.dim(0);
  g.kernel = {weight.dim(2), weight.dim(3), weight.dim(4)};
  g.padding = padding;
  if (weight.dim(1) != g.cin) {
    throw ShapeError("conv3d: input channels " + std::to_string(g.cin) + " != weight in_channels " +
                     std::to_string(weight.dim(1)));
  }
  if (bias.rank() != 1 || bias.dim(0) != g.cout) throw ShapeError("conv3d: bias must be (Cout)");
  g.to = g.t + 2 * padding[0] - g.kernel[0] + 1;
  g.fo = g.f + 2 * padding[1] - g.kernel[1] + 1;
  g.dout = g.d + 2 * padding[2] - g.kernel[2] + 1;
  const char* axes[] = {"time", "frequency", "depth"};
  const Index outs[] = {g.to, g.fo, g.dout};
  for (int i = 0; i < 3; ++i) {
    if (outs[i] < 1) {
      throw ShapeError(std::string("conv3d: kernel larger than padded ") + axes[i] + " dimension of input " +
                       to_string(x.shape()));
    }
  }
  const Index B = x.dim(0), K = g.patch(), P = g.positions();
  using ColMatrixMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>;
  using ConstColMatrixMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>;
  if (detail::is_depth_spanning(g)) return conv3d_depth_spanning(x, weight, bias, g);
  const bool planar = detail::is_planar(g);
  Buffer<Scalar> out(B * g.cout * P);
  RowMatrix<Scalar> patches = planar ? RowMatrix<Scalar>(K, P) : RowMatrix<Scalar>(P, K);
  const auto W = weight.matrix(g.cout, K);
  for (Index b = 0; b < B; ++b) {
    const Scalar* xb = x.data().data() + b * g.in_size();
    if (planar) {
      detail::im2col_planar(xb, g, patches.data());
      MatrixMap<Scalar> y(out.data() + b * g.cout * P, g.cout, P);
      y.noalias() = W * patches;
      y.colwise() += bias.data().matrix();
    } else {
      detail::im2row3d(xb, g, patches.data());
      // (Cout, P) row-major output is a (P, Cout) column-major matrix
      ColMatrixMap y(out.data() + b * g.cout * P, P, g.cout);
      y.noalias() = patches * W.transpose();
      y.rowwise() += bias.data().matrix().transpose();
    }
  }
  return Tensor<Scalar>::from_op(
      {B, g.cout, g.to, g.fo, g.dout}, std::move(out), {x, weight, bias},
      [x, weight, g, B, planar](TensorNode<Scalar>& n) {
        const Index K = g.patch(), P = g.positions();
        RowMatrix<Scalar> patches = planar ? RowMatrix<Scalar>(K, P) : RowMatrix<Scalar>(P, K);
        const auto W = weight.matrix(g.cout, K);
        const bool need_x = parent_needs_grad(n, 0), need_w = parent_needs_grad(n, 1);
        Scalar* gx = need_x ? n.parents[0]->ensure_grad().data() : nullptr;
        Scalar* gw = need_w ? n.parents[1]->ensure_grad().data() : nullptr;
        Scalar* gb = parent_needs_grad(n, 2) ? n.parents[2]->ensure_grad().data() : nullptr;
        for (Index b = 0; b < B; ++b) {
          const Scalar* xb = x.data().data() + b * g.in_size();
          const Scalar* dyb = n.grad.data() + b * g.cout * P;
          if (planar) {
            ConstMatrixMap<Scalar> dy(dyb, g.cout, P);
            if (gb) Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(gb, g.cout) += dy.rowwise().sum();
            if (need_w) {
              detail::im2col_planar(xb, g, patches.data());
              MatrixMap<Scalar>(gw, g.cout, K).noalias() += dy * patches.transpose();
            }
            if (need_x) {
              patches.noalias() = W.transpose() * dy;
              detail::col2im_planar(patches.data(), g, gx + b * g.in_size());
            }
          } else {
            ConstColMatrixMap dy(dyb, P, g.cout);
            if (gb) Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(gb, g.cout) += dy.colwise().sum();
            if (need_w) {
              detail::im2row3d(xb, g, patches.data());
              MatrixMap<Scalar>(gw, g.cout, K).noalias() += dy.transpose() * patches;
            }
            if (need_x) {
              patches.noalias() = dy * W;
              detail::row2im3d(patches.data(), g, gx + b * g.in_size());
            }
          }
        }
      });
}

/// 2-D convolution, stride 1. x: (B, Cin, H, W), weight: (Cout, Cin, kh, kw).
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                      std::array<Index, 2> padding) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be (B, C, H, W), got " + to_string(x.shape()));
  if (weight.rank() != 4) throw ShapeError("conv2d: weight must be rank 4");
  const auto& s = x.shape();
  const auto& w = weight.shape();
  auto y = conv3d(reshape(x, {s[0], s[1], s[2], s[3], 1}), reshape(weight, {w[0], w[1], w[2], w[3], 1}), bias,
                  {padding[0], padding[1], 0});
  return reshape(y, {y.dim(0), y.dim(1), y.dim(2), y.dim(3)});
}

/// Non-overlapping 3-D max pooling (stride == kernel, floor semantics). x: (B, C, T, F, D).
template <typename Scalar>
Tensor<Scalar> maxpool3d(const Tensor<Scalar>& x, std::array<Index, 3> kernel) {
  if (x.rank() != 5) throw ShapeError("maxpool3d: input must be (B, C, T, F, D), got " + to_string(x.shape()));
  const Index BC = x.dim(0) * x.dim(1), T = x.dim(2), F = x.dim(3), D = x.dim(4);
  const Index To = T / kernel[0], Fo = F / kernel[1], Do = D / kernel[2];
  if (To < 1 || Fo < 1 || Do < 1) {
    throw ShapeError("maxpool3d: kernel (" + std::to_string(kernel[0]) + ", " + std::to_string(kernel[1]) + ", " +
                     std::to_string(kernel[2]) + ") exceeds input " + to_string(x.shape()));
  }
  Buffer<Scalar> out(BC * To * Fo * Do);
  std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
  const Scalar* src = x.data().data();
  Index k = 0;
  for (Index bc = 0; bc < BC; ++bc) {
    for (Index t = 0; t < To; ++t) {
      for (Index f = 0; f < Fo; ++f) {
        for (Index d = 0; d < Do; ++d, ++k) {
          const Index first = ((bc * T + t * kernel[0]) * F + f * kernel[1]) * D + d * kernel[2];
          Scalar best = src[first];
          Index best_i = first;
          for (Index a = 0; a < kernel[0]; ++a) {
            for (Index b = 0; b < kernel[1]; ++b) {
              const Index row = ((bc * T + t * kernel[0] + a) * F + f * kernel[1] + b) * D + d * kernel[2];
              for (Index e = 0; e < kernel[2]; ++e) {
                // written as selects so random inputs do not cost a mispredicted branch each
                const bool gt = src[row + e] > best;
                best = gt ? src[row + e] : best;
                best_i = gt ? row + e : best_i;
              }
            }
          }
          out[k] = best;
          argmax[static_cast<std::size_t>(k)] = best_i;
        }
      }
    }
  }
  return Tensor<Scalar>::from_op({x.dim(0), x.dim(1), To, Fo, Do}, std::move(out), {x},
                                 [argmax = std::move(argmax)](TensorNode<Scalar>& n) {
                                   auto& p = *n.parents[0];
                                   if (!p.requires_grad) return;
                                   auto& g = p.ensure_grad();
                                   for (std::size_t k = 0; k < argmax.size(); ++k) {
                                     g[argmax[k]] += n.grad[static_cast<Index>(k)];
                                   }
                                 });
}

template <typename Scalar>
Tensor<Scalar> maxpool2d(const Tensor<Scalar>& x, std::array<Index, 2> kernel) {
  if (x.rank() != 4) throw ShapeError("maxpool2d: input must be (B, C, H, W), got " + to_string(x.shape()));
  const auto& s = x.shape();
  auto y = maxpool3d(reshape(x, {s[0], s[1], s[2], s[3], 1}), {kernel[0], kernel[1], 1});
  return reshape(y, {y.dim(0), y.dim(1), y.dim(2), y.dim(3)});
}

/// Per-channel batch normalisation over (B, H, W) of a (B, C, H, W) input.
/// Training mode normalises with batch statistics and updates the running buffers in place.
template <typename Scalar>
Tensor<Scalar> batchnorm2d(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                           Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var, bool training,
                           Scalar momentum = Scalar(0.1), Scalar eps = Scalar(1e-5)) {
  if (x.rank() != 4) throw ShapeError("batchnorm2d: input must be (B, C, H, W), got " + to_string(x.shape()));
  const Index B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.size() != C || beta.size() != C || running_mean.size() != C || running_var.size() != C) {
    throw ShapeError("batchnorm2d: channel count " + std::to_string(C) + " does not match parameters");
  }
  const Index count = B * HW;
  Buffer<Scalar> mu(C), inv_std(C);
  if (training) {
    if (count < 2) throw ShapeError("batchnorm2d: training mode needs more than one value per channel");
    for (Index c = 0; c < C; ++c) {
      Scalar s = 0, s2 = 0;
      for (Index b = 0; b < B; ++b) {
        const auto seg = x.data().segment((b * C + c) * HW, HW);
        s += seg.sum();
      }
      const Scalar m = s / static_cast<Scalar>(count);
      for (Index b = 0; b < B; ++b) s2 += (x.data().segment((b * C + c) * HW, HW) - m).square().sum();
      const Scalar var = s2 / static_cast<Scalar>(count);
      mu[c] = m;
      inv_std[c] = Scalar(1) / std::sqrt(var + eps);
      running_mean.data()[c] = (Scalar(1) - momentum) * running_mean.data()[c] + momentum * m;
      running_var.data()[c] = (Scalar(1) - momentum) * running_var.data()[c] +
                              momentum * s2 / static_cast<Scalar>(count - 1);
    }
  } else {
    mu = running_mean.data();
    inv_std = (running_var.data() + eps).rsqrt();
  }
  Buffer<Scalar> xhat(x.size()), out(x.size());
  for (Index b = 0; b < B; ++b) {
    for (Index c = 0; c < C; ++c) {
      const Index o = (b * C + c) * HW;
      xhat.segment(o, HW) = (x.data().segment(o, HW) - mu[c]) * inv_std[c];
      out.segment(o, HW) = xhat.segment(o, HW) * gamma.data()[c] + beta.data()[c];
    }
  }
  return Tensor<Scalar>::from_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std, gamma, B, C, HW, count, training](TensorNode<Scalar>& n) {
        Buffer<Scalar> dgamma = Buffer<Scalar>::Zero(C), dbeta = Buffer<Scalar>::Zero(C);
        for (Index b = 0; b < B; ++b) {
          for (Index c = 0; c < C; ++c) {
            const Index o = (b * C + c) * HW;
            dbeta[c] += n.grad.segment(o, HW).sum();
            dgamma[c] += (n.grad.segment(o, HW) * xhat.segment(o, HW)).sum();
          }
        }
        if (parent_needs_grad(n, 0)) {
          auto& gx = n.parents[0]->ensure_grad();
          for (Index b = 0; b < B; ++b) {
            for (Index c = 0; c < C; ++c) {
              const Index o = (b * C + c) * HW;
              const Scalar k = gamma.data()[c] * inv_std[c];
              if (training) {
                const Scalar N = static_cast<Scalar>(count);
                gx.segment(o, HW) +=
                    k / N * (N * n.grad.segment(o, HW) - dbeta[c] - xhat.segment(o, HW) * dgamma[c]);
              } else {
                gx.segment(o, HW) += k * n.grad.segment(o, HW);
              }
            }
          }
        }
        accumulate_parent(n, 1, dgamma);
        accumulate_parent(n, 2, dbeta);
      });
}

/// One GRU step (gate order r, z, n). x: (B, in), h: (B, H),
/// w_ih: (3H, in), w_hh: (3H, H), b_ih, b_hh: (3H). Returns h' (B, H).
template <typename Scalar>
Tensor<Scalar> gru_cell(const Tensor<Scalar>& x, const Tensor<Scalar>& h, const Tensor<Scalar>& w_ih,
                        const Tensor<Scalar>& w_hh, const Tensor<Scalar>& b_ih, const Tensor<Scalar>& b_hh) {
  const Index B = x.dim(0), in = x.dim(1), H = h.dim(1);
  if (h.dim(0) != B || w_ih.dim(0) != 3 * H || w_ih.dim(1) != in || w_hh.dim(0) != 3 * H || w_hh.dim(1) != H ||
      b_ih.size() != 3 * H || b_hh.size() != 3 * H) {
    throw ShapeError("gru_cell: input " + to_string(x.shape()) + " / hidden " + to_string(h.shape()) +
                     " inconsistent with weights " + to_string(w_ih.shape()));
  }
  RowMatrix<Scalar> gi = x.matrix(B, in) * w_ih.matrix(3 * H, in).transpose();
  gi.rowwise() += b_ih.data().matrix().transpose();
  RowMatrix<Scalar> gh = h.matrix(B, H) * w_hh.matrix(3 * H, H).transpose();
  gh.rowwise() += b_hh.data().matrix().transpose();

  using Arr = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Arr r = (Scalar(1) + (-(gi.leftCols(H) + gh.leftCols(H)).array()).exp()).inverse();
  Arr z = (Scalar(1) + (-(gi.middleCols(H, H) + gh.middleCols(H, H)).array()).exp()).inverse();
  Arr ghn = gh.rightCols(H).array();
  Arr nn = (gi.rightCols(H).array() + r * ghn).tanh();
  const auto hprev = h.matrix(B, H).array();
  Buffer<Scalar> out(B * H);
  Eigen::Map<Arr>(out.data(), B, H) = (Scalar(1) - z) * nn + z * hprev;

  return Tensor<Scalar>::from_op(
      {B, H}, std::move(out), {x, h, w_ih, w_hh, b_ih, b_hh},
      [x, h, w_ih, w_hh, r, z, nn, ghn, B, in, H](TensorNode<Scalar>& node) {
        const auto dh = Eigen::Map<const Arr>(node.grad.data(), B, H);
        const auto hprev = h.matrix(B, H).array();
        Arr dn = dh * (Scalar(1) - z) * (Scalar(1) - nn.square());
        Arr dz = dh * (hprev - nn) * z * (Scalar(1) - z);
        Arr dr = dn * ghn * r * (Scalar(1) - r);
        RowMatrix<Scalar> dgi(B, 3 * H), dgh(B, 3 * H);
        dgi.leftCols(H) = dr.matrix();
        dgi.middleCols(H, H) = dz.matrix();
        dgi.rightCols(H) = dn.matrix();
        dgh.leftCols(H) = dr.matrix();
        dgh.middleCols(H, H) = dz.matrix();
        dgh.rightCols(H) = (dn * r).matrix();
        if (parent_needs_grad(node, 0)) {
          MatrixMap<Scalar>(node.parents[0]->ensure_grad().data(), B, in).noalias() +=
              dgi * w_ih.matrix(3 * H, in);
        }
        if (parent_needs_grad(node, 1)) {
          MatrixMap<Scalar> gh(node.parents[1]->ensure_grad().data(), B, H);
          gh.noalias() += dgh * w_hh.matrix(3 * H, H);
          gh.array() += dh * z;
        }
        if (parent_needs_grad(node, 2)) {
          MatrixMap<Scalar>(node.parents[2]->ensure_grad().data(), 3 * H, in).noalias() +=
              dgi.transpose() * x.matrix(B, in);
        }
        if (parent_needs_grad(node, 3)) {
          MatrixMap<Scalar>(node.parents[3]->ensure_grad().data(), 3 * H, H).noalias() +=
              dgh.transpose() * h.matrix(B, H);
        }
        accumulate_parent(node, 4, dgi.colwise().sum().transpose().array());
        accumulate_parent(node, 5, dgh.colwise().sum().transpose().array());
      });
}

/// One LSTM step (gate order i, f, g, o). x: (B, in), h, c: (B, H),
/// w_ih: (4H, in), w_hh: (4H, H), b_ih, b_hh: (4H). Returns [h' | c'] as (B, 2H).
template <typename Scalar>
Tensor<Scalar> lstm_cell(const Tensor<Scalar>& x, const Tensor<Scalar>& h, const Tensor<Scalar>& c,
                         const Tensor<Scalar>& w_ih, const Tensor<Scalar>& w_hh, const Tensor<Scalar>& b_ih,
                         const Tensor<Scalar>& b_hh) {
  const Index B = x.dim(0), in = x.dim(1), H = h.dim(1);
  if (h.dim(0) != B || c.shape() != h.shape() || w_ih.dim(0) != 4 * H || w_ih.dim(1) != in ||
      w_hh.dim(0) != 4 * H || w_hh.dim(1) != H || b_ih.size() != 4 * H || b_hh.size() != 4 * H) {
    throw ShapeError("lstm_cell: input " + to_string(x.shape()) + " / hidden " + to_string(h.shape()) +
                     " inconsistent with weights " + to_string(w_ih.shape()));
  }
  RowMatrix<Scalar> gates = x.matrix(B, in) * w_ih.matrix(4 * H, in).transpose();
  gates.noalias() += h.matrix(B, H) * w_hh.matrix(4 * H, H).transpose();
  gates.rowwise() += (b_ih.data() + b_hh.data()).matrix().transpose();

  using Arr = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  auto sig = [](const auto& v) -> Arr { return (Scalar(1) + (-v.array()).exp()).inverse(); };
  Arr ig = sig(gates.leftCols(H));
  Arr fg = sig(gates.middleCols(H, H));
  Arr gg = gates.middleCols(2 * H, H).array().tanh();
  Arr og = sig(gates.rightCols(H));
  Arr cprev = c.matrix(B, H).array();
  Arr cn = fg * cprev + ig * gg;
  Arr tc = cn.tanh();
  Buffer<Scalar> out(B * 2 * H);
  Eigen::Map<Arr> o(out.data(), B, 2 * H);
  o.leftCols(H) = og * tc;
  o.rightCols(H) = cn;

  return Tensor<Scalar>::from_op(
      {B, 2 * H}, std::move(out), {x, h, c, w_ih, w_hh, b_ih, b_hh},
      [x, h, w_ih, w_hh, ig, fg, gg, og, cprev, tc, B, in, H](TensorNode<Scalar>& node) {
        const auto g = Eigen::Map<const Arr>(node.grad.data(), B, 2 * H);
        const Arr dh = g.leftCols(H);
        const Arr dc = g.rightCols(H) + dh * og * (Scalar(1) - tc.square());
        RowMatrix<Scalar> dgates(B, 4 * H);
        dgates.leftCols(H) = (dc * gg * ig * (Scalar(1) - ig)).matrix();
        dgates.middleCols(H, H) = (dc * cprev * fg * (Scalar(1) - fg)).matrix();
        dgates.middleCols(2 * H, H) = (dc * ig * (Scalar(1) - gg.square())).matrix();
        dgates.rightCols(H) = (dh * tc * og * (Scalar(1) - og)).matrix();
        if (parent_needs_grad(node, 0)) {
          MatrixMap<Scalar>(node.parents[0]->ensure_grad().data(), B, in).noalias() +=
              dgates * w_ih.matrix(4 * H, in);
        }
        if (parent_needs_grad(node, 1)) {
          MatrixMap<Scalar>(node.parents[1]->ensure_grad().data(), B, H).noalias() +=
              dgates * w_hh.matrix(4 * H, H);
        }
        if (parent_needs_grad(node, 2)) {
          Eigen::Map<Arr>(node.parents[2]->ensure_grad().data(), B, H) += dc * fg;
        }
        if (parent_needs_grad(node, 3)) {
          MatrixMap<Scalar>(node.parents[3]->ensure_grad().data(), 4 * H, in).noalias() +=
              dgates.transpose() * x.matrix(B, in);
        }
        if (parent_needs_grad(node, 4)) {
          MatrixMap<Scalar>(node.parents[4]->ensure_grad().data(), 4 * H, H).noalias() +=
              dgates.transpose() * h.matrix(B, H);
        }
        const Buffer<Scalar> db = dgates.colwise().sum().transpose().array();
        accumulate_parent(node, 5, db);
        accumulate_parent(node, 6, db);
      });
}

}  // namespace opnet
