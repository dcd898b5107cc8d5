#pragma once

#include "opnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace opnet {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
}

inline std::size_t normalize_axis(long axis, std::size_t rank, const char* op) {
  const long r = static_cast<long>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(axis);
}

// (outer, axis, inner) factorisation of a shape around one axis.
struct AxisSplit {
  Index outer = 1, length = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  return Tensor<Scalar>::from_op(a.shape(), a.data() + b.data(), {a, b}, [](TensorNode<Scalar>& n) {
    accumulate_parent(n, 0, n.grad);
    accumulate_parent(n, 1, n.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  return Tensor<Scalar>::from_op(a.shape(), a.data() - b.data(), {a, b}, [](TensorNode<Scalar>& n) {
    accumulate_parent(n, 0, n.grad);
    accumulate_parent(n, 1, -n.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  return Tensor<Scalar>::from_op(a.shape(), a.data() * b.data(), {a, b},
                                 [a = a.data(), b = b.data()](TensorNode<Scalar>& n) {
                                   accumulate_parent(n, 0, n.grad * b);
                                   accumulate_parent(n, 1, n.grad * a);
                                 });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  return Tensor<Scalar>::from_op(a.shape(), a.data() * s, {a},
                                 [s](TensorNode<Scalar>& n) { accumulate_parent(n, 0, n.grad * s); });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  Buffer<Scalar> out = a.data().max(Scalar(0));
  return Tensor<Scalar>::from_op(a.shape(), std::move(out), {a}, [](TensorNode<Scalar>& n) {
    accumulate_parent(n, 0, (n.data > Scalar(0)).select(n.grad, Scalar(0)));
  });
}

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& a) {
  Buffer<Scalar> out = a.data().tanh();
  return Tensor<Scalar>::from_op(a.shape(), std::move(out), {a}, [](TensorNode<Scalar>& n) {
    accumulate_parent(n, 0, n.grad * (Scalar(1) - n.data.square()));
  });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& a) {
  Buffer<Scalar> out = (Scalar(1) + (-a.data()).exp()).inverse();
  return Tensor<Scalar>::from_op(a.shape(), std::move(out), {a}, [](TensorNode<Scalar>& n) {
    accumulate_parent(n, 0, n.grad * n.data * (Scalar(1) - n.data));
  });
}

// ---- reductions & losses -----------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  Buffer<Scalar> out(1);
  out[0] = a.data().sum();
  return Tensor<Scalar>::from_op({1}, out, {a}, [](TensorNode<Scalar>& n) {
    auto& p = *n.parents[0];
    if (p.requires_grad) p.ensure_grad() += n.grad[0];
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.size()));
}

/// Mean of squared elementwise differences.
template <typename Scalar>
Tensor<Scalar> mse_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target) {
  detail::require_same_shape(pred.shape(), target.shape(), "mse_loss");
  Buffer<Scalar> diff = pred.data() - target.data();
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(diff.size());
  Buffer<Scalar> out(1);
  out[0] = diff.square().sum() * inv_n;
  return Tensor<Scalar>::from_op({1}, out, {pred, target}, [diff, inv_n](TensorNode<Scalar>& n) {
    const Scalar g = n.grad[0] * Scalar(2) * inv_n;
    accumulate_parent(n, 0, diff * g);
    accumulate_parent(n, 1, -diff * g);
  });
}

// ---- shape manipulation ------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  return Tensor<Scalar>::from_op(std::move(shape), a.data(), {a},
                                 [](TensorNode<Scalar>& n) { accumulate_parent(n, 0, n.grad); });
}

/// General axis permutation: out.shape[i] = in.shape[perm[i]].
template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch");
  Shape out_shape(r);
  std::vector<Index> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.shape()[i];
  std::vector<Index> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = a.shape().at(perm[i]);
    strides[i] = in_strides[perm[i]];
  }
  // source offset for each output element
  std::vector<Index> gather(static_cast<std::size_t>(a.size()));
  std::vector<Index> idx(r, 0);
  for (Index k = 0; k < a.size(); ++k) {
    Index off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * strides[i];
    gather[static_cast<std::size_t>(k)] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  Buffer<Scalar> out(a.size());
  for (Index k = 0; k < a.size(); ++k) out[k] = a.data()[gather[static_cast<std::size_t>(k)]];
  return Tensor<Scalar>::from_op(out_shape, std::move(out), {a},
                                 [gather = std::move(gather)](TensorNode<Scalar>& n) {
                                   auto& p = *n.parents[0];
                                   if (!p.requires_grad) return;
                                   auto& g = p.ensure_grad();
                                   for (std::size_t k = 0; k < gather.size(); ++k) {
                                     g[gather[k]] += n.grad[static_cast<Index>(k)];
                                   }
                                 });
}

/// Concatenation along `axis`; all other dimensions must agree.
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, long axis = -1) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = detail::normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    out_shape[ax] += s[ax];
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != parts[0].shape()[i]) {
        throw ShapeError("concat: dimension " + std::to_string(i) + " mismatch " +
                         to_string(p.shape()) + " vs " + to_string(parts[0].shape()));
      }
    }
  }
  const auto split = detail::split_at(out_shape, ax);
  Buffer<Scalar> out(numel(out_shape));
  std::vector<Index> widths;
  Index offset = 0;
  for (const auto& p : parts) {
    const Index w = p.shape()[ax] * split.inner;
    for (Index o = 0; o < split.outer; ++o) {
      out.segment(o * split.length * split.inner + offset, w) = p.data().segment(o * w, w);
    }
    widths.push_back(w);
    offset += w;
  }
  const Index row = split.length * split.inner;
  return Tensor<Scalar>::from_op(out_shape, std::move(out), parts,
                                 [widths, row, outer = split.outer](TensorNode<Scalar>& n) {
                                   Index off = 0;
                                   for (std::size_t i = 0; i < widths.size(); ++i) {
                                     auto& p = *n.parents[i];
                                     const Index w = widths[i];
                                     if (p.requires_grad) {
                                       auto& g = p.ensure_grad();
                                       for (Index o = 0; o < outer; ++o) {
                                         g.segment(o * w, w) += n.grad.segment(o * row + off, w);
                                       }
                                     }
                                     off += w;
                                   }
                                 });
}

/// Contiguous slice [start, start+length) along `axis`.
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& a, long axis, Index start, Index length) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank(), "slice");
  if (start < 0 || length <= 0 || start + length > a.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") outside axis of size " + std::to_string(a.shape()[ax]));
  }
  const auto split = detail::split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = length;
  const Index w = length * split.inner;
  const Index row = split.length * split.inner;
  const Index off = start * split.inner;
  Buffer<Scalar> out(split.outer * w);
  for (Index o = 0; o < split.outer; ++o) out.segment(o * w, w) = a.data().segment(o * row + off, w);
  return Tensor<Scalar>::from_op(out_shape, std::move(out), {a},
                                 [w, row, off, outer = split.outer](TensorNode<Scalar>& n) {
                                   auto& p = *n.parents[0];
                                   if (!p.requires_grad) return;
                                   auto& g = p.ensure_grad();
                                   for (Index o = 0; o < outer; ++o) {
                                     g.segment(o * row + off, w) += n.grad.segment(o * w, w);
                                   }
                                 });
}

/// Picks index `i` along `axis`, dropping that axis.
template <typename Scalar>
Tensor<Scalar> select(const Tensor<Scalar>& a, long axis, Index i) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank(), "select");
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  if (out_shape.empty()) out_shape.push_back(1);
  return reshape(slice(a, static_cast<long>(ax), i, 1), out_shape);
}

/// Stacks equally shaped tensors along a new axis.
template <typename Scalar>
Tensor<Scalar> stack(const std::vector<Tensor<Scalar>>& parts, long axis) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  Shape unit = parts[0].shape();
  const std::size_t ax = detail::normalize_axis(axis, unit.size() + 1, "stack");
  unit.insert(unit.begin() + static_cast<long>(ax), 1);
  std::vector<Tensor<Scalar>> expanded;
  expanded.reserve(parts.size());
  for (const auto& p : parts) {
    detail::require_same_shape(p.shape(), parts[0].shape(), "stack");
    expanded.push_back(reshape(p, unit));
  }
  return concat(expanded, static_cast<long>(ax));
}

// ---- affine ------------------------------------------------------------------

/// y = x Wᵀ + b over the last axis. x: (..., in), W: (out, in), b: (out).
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  if (weight.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
    throw ShapeError("linear: weight " + to_string(weight.shape()) + " / bias " + to_string(bias.shape()) +
                     " inconsistent");
  }
  const Index in = weight.dim(1), out_f = weight.dim(0);
  if (x.shape().back() != in) {
    throw ShapeError("linear: input feature dimension " + std::to_string(x.shape().back()) +
                     " does not match weight in_features " + std::to_string(in));
  }
  const Index rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Buffer<Scalar> out(rows * out_f);
  MatrixMap<Scalar> y(out.data(), rows, out_f);
  y.noalias() = x.matrix(rows, in) * weight.matrix(out_f, in).transpose();
  y.rowwise() += bias.data().matrix().transpose();
  return Tensor<Scalar>::from_op(
      out_shape, std::move(out), {x, weight, bias}, [x, weight, rows, in, out_f](TensorNode<Scalar>& n) {
        ConstMatrixMap<Scalar> dy(n.grad.data(), rows, out_f);
        if (parent_needs_grad(n, 0)) {
          auto& g = n.parents[0]->ensure_grad();
          MatrixMap<Scalar>(g.data(), rows, in).noalias() += dy * weight.matrix(out_f, in);
        }
        if (parent_needs_grad(n, 1)) {
          auto& g = n.parents[1]->ensure_grad();
          MatrixMap<Scalar>(g.data(), out_f, in).noalias() += dy.transpose() * x.matrix(rows, in);
        }
        if (parent_needs_grad(n, 2)) {
          n.parents[2]->ensure_grad() += dy.colwise().sum().transpose().array();
        }
      });
}

// ---- pooling -----------------------------------------------------------------

/// Adaptive average pooling along `axis` to exactly `target` steps.
/// Window i covers [floor(i*L/target), ceil((i+1)*L/target)).
template <typename Scalar>
Tensor<Scalar> adaptive_avgpool(const Tensor<Scalar>& a, long axis, Index target) {
  const std::size_t ax = detail::normalize_axis(axis, a.rank(), "adaptive_avgpool");
  if (target < 1) throw ShapeError("adaptive_avgpool: target length must be >= 1");
  const auto split = detail::split_at(a.shape(), ax);
  const Index len = split.length;
  if (len == target) return a;
  std::vector<std::pair<Index, Index>> windows(static_cast<std::size_t>(target));
  for (Index i = 0; i < target; ++i) {
    const Index lo = (i * len) / target;
    const Index hi = ((i + 1) * len + target - 1) / target;
    windows[static_cast<std::size_t>(i)] = {lo, hi};
  }
  Shape out_shape = a.shape();
  out_shape[ax] = target;
  const Index inner = split.inner;
  Buffer<Scalar> out = Buffer<Scalar>::Zero(split.outer * target * inner);
  for (Index o = 0; o < split.outer; ++o) {
    for (Index i = 0; i < target; ++i) {
      const auto [lo, hi] = windows[static_cast<std::size_t>(i)];
      auto dst = out.segment((o * target + i) * inner, inner);
      for (Index t = lo; t < hi; ++t) dst += a.data().segment((o * len + t) * inner, inner);
      dst /= static_cast<Scalar>(hi - lo);
    }
  }
  return Tensor<Scalar>::from_op(
      out_shape, std::move(out), {a},
      [windows, len, target, inner, outer = split.outer](TensorNode<Scalar>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (Index o = 0; o < outer; ++o) {
          for (Index i = 0; i < target; ++i) {
            const auto [lo, hi] = windows[static_cast<std::size_t>(i)];
            const auto src = n.grad.segment((o * target + i) * inner, inner) / static_cast<Scalar>(hi - lo);
            for (Index t = lo; t < hi; ++t) g.segment((o * len + t) * inner, inner) += src;
          }
        }
      });
}

}  // namespace opnet
