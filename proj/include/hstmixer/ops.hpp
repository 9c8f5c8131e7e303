#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "hstmixer/tensor.hpp"

// Differentiable operations as free functions. Every op computes eagerly and,
// when a tape is active and an input requires grad, records a backward
// closure. There is no implicit broadcasting: elementwise ops demand equal
// shapes, matmul broadcasts leading batch axes only, and broadcast_to is the
// one explicit replication primitive.

namespace hstmixer {

namespace detail {

template <typename S>
using EigenMat =
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
bool grad_wanted(const Tensor<S>& a) {
  return Tape<S>::active() != nullptr && a.requires_grad();
}

template <typename S>
void mark_tracked(Tensor<S>& out) {
  out.set_requires_grad(true);
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) +
                     " vs " + shape_str(b));
}

// Axis fibers: positions along `axis` at fixed (outer, inner) coordinates.
struct FiberDims {
  Index outer, len, inner;
};

inline FiberDims fiber_dims(const Shape& s, Index axis) {
  if (axis < 0) axis += static_cast<Index>(s.size());
  if (axis < 0 || axis >= static_cast<Index>(s.size()))
    throw ShapeError("axis " + std::to_string(axis) +
                     " out of bounds for shape " + shape_str(s));
  FiberDims f{1, s[axis], 1};
  for (Index i = 0; i < axis; ++i) f.outer *= s[i];
  for (Index i = axis + 1; i < static_cast<Index>(s.size()); ++i)
    f.inner *= s[i];
  return f;
}

}  // namespace detail

// ------------------------------------------------------------------------
// Elementwise binary ops (exact same shape).
// ------------------------------------------------------------------------

template <typename S, typename Fwd, typename DA, typename DB>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, const char* name,
                    Fwd fwd, DA da, DB db) {
  detail::check_same_shape(a.shape(), b.shape(), name);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  const Index n = out.size();
  for (Index i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  if (auto* tape = Tape<S>::active();
      tape && (a.requires_grad() || b.requires_grad())) {
    detail::mark_tracked(out);
    tape->record([a, b, out, da, db]() {
      if (!out.has_grad()) return;
      const S* g = out.grad_data();
      const Index n = out.size();
      if (a.requires_grad()) {
        auto& ga = a.ensure_grad();
        for (Index i = 0; i < n; ++i)
          ga[i] += g[i] * da(a.data()[i], b.data()[i], out.data()[i]);
      }
      if (b.requires_grad()) {
        auto& gb = b.ensure_grad();
        for (Index i = 0; i < n; ++i)
          gb[i] += g[i] * db(a.data()[i], b.data()[i], out.data()[i]);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(
      a, b, "add", [](S x, S y) { return x + y; },
      [](S, S, S) { return S(1); }, [](S, S, S) { return S(1); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(
      a, b, "sub", [](S x, S y) { return x - y; },
      [](S, S, S) { return S(1); }, [](S, S, S) { return S(-1); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(
      a, b, "mul", [](S x, S y) { return x * y; },
      [](S, S y, S) { return y; }, [](S x, S, S) { return x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(
      a, b, "div", [](S x, S y) { return x / y; },
      [](S, S y, S) { return S(1) / y; },
      [](S, S y, S o) { return -o / y; });
}

// ------------------------------------------------------------------------
// Elementwise unary ops.
// ------------------------------------------------------------------------

template <typename S, typename Fwd, typename Bwd>
Tensor<S> unary_op(const Tensor<S>& a, Fwd fwd, Bwd dydx) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  const Index n = out.size();
  for (Index i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  if (auto* tape = Tape<S>::active(); tape && a.requires_grad()) {
    detail::mark_tracked(out);
    tape->record([a, out, dydx]() {
      if (!out.has_grad()) return;
      const S* g = out.grad_data();
      auto& ga = a.ensure_grad();
      const Index n = out.size();
      for (Index i = 0; i < n; ++i)
        ga[i] += g[i] * dydx(a.data()[i], out.data()[i]);
    });
  }
  return out;
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& a) {
  return unary_op(
      a, [](S x) { return std::tanh(x); },
      [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return unary_op(
      a, [](S x) { return S(1) / (S(1) + std::exp(-x)); },
      [](S, S y) { return y * (S(1) - y); });
}

// Exact (erf-based) GELU.
template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return unary_op(
      a,
      [](S x) {
        return static_cast<S>(0.5 * double(x) *
                              (1.0 + std::erf(double(x) * kInvSqrt2)));
      },
      [](S x, S) {
        const double cdf = 0.5 * (1.0 + std::erf(double(x) * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * double(x) * double(x));
        return static_cast<S>(cdf + double(x) * pdf);
      });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
  return unary_op(
      a, [](S x) { return std::fabs(x); },
      [](S x, S) { return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0)); });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& a) {
  return unary_op(
      a, [](S x) { return std::sqrt(x); },
      [](S, S y) { return S(0.5) / y; });
}

template <typename S>
Tensor<S> clamp_min(const Tensor<S>& a, S floor) {
  return unary_op(
      a, [floor](S x) { return x > floor ? x : floor; },
      [floor](S x, S) { return x > floor ? S(1) : S(0); });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  return unary_op(
      a, [c](S x) { return x * c; }, [c](S, S) { return c; });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  return unary_op(
      a, [c](S x) { return x + c; }, [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return scale(a, S(-1));
}

// ------------------------------------------------------------------------
// Shape ops: reshape, permute, broadcast_to, slice, concat.
// ------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  Tensor<S> out = Tensor<S>::from_vector(std::move(shape), a.vec());
  if (auto* tape = Tape<S>::active(); tape && a.requires_grad()) {
    detail::mark_tracked(out);
    tape->record([a, out]() {
      if (!out.has_grad()) return;
      a.accumulate_grad(out.grad_data());
    });
  }
  return out;
}

namespace detail {

// out[i0,..,ik] = in[i_{perm[0]},..] materialized via an odometer walk over
// the output with input strides pre-permuted.
template <typename S>
void permute_copy(const S* in, const Shape& in_shape, S* out,
                  const std::vector<Index>& perm, bool accumulate) {
  const Index rank = static_cast<Index>(in_shape.size());
  Shape out_shape(rank);
  for (Index k = 0; k < rank; ++k) out_shape[k] = in_shape[perm[k]];
  auto istrides = row_major_strides(in_shape);
  std::vector<Index> estride(rank);
  for (Index k = 0; k < rank; ++k) estride[k] = istrides[perm[k]];
  const Index n = shape_numel(in_shape);
  std::vector<Index> idx(rank, 0);
  Index ioff = 0;
  for (Index o = 0; o < n; ++o) {
    if (accumulate)
      out[o] += in[ioff];
    else
      out[o] = in[ioff];
    for (Index k = rank - 1; k >= 0; --k) {
      ++idx[k];
      ioff += estride[k];
      if (idx[k] < out_shape[k]) break;
      ioff -= estride[k] * out_shape[k];
      idx[k] = 0;
    }
  }
}

}  // namespace detail

template <typename S>
Tensor<S> permute(const Tensor<S>& a, std::vector<Index> perm) {
  const Index rank = a.rank();
  if (static_cast<Index>(perm.size()) != rank)
    throw ShapeError("permute: " + std::to_string(perm.size()) +
                     " axes given for shape " + shape_str(a.shape()));
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (Index k = 0; k < rank; ++k) {
    if (perm[k] < 0 || perm[k] >= rank || seen[perm[k]])
      throw ShapeError("permute: invalid permutation for shape " +
                       shape_str(a.shape()));
    seen[perm[k]] = true;
    out_shape[k] = a.shape()[perm[k]];
  }
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  detail::permute_copy(a.data(), a.shape(), out.data(), perm, false);
  if (auto* tape = Tape<S>::active(); tape && a.requires_grad()) {
    detail::mark_tracked(out);
    std::vector<Index> inv(rank);
    for (Index k = 0; k < rank; ++k) inv[perm[k]] = k;
    tape->record([a, out, inv]() {
      if (!out.has_grad()) return;
      a.ensure_grad();
      detail::permute_copy(out.grad_data(), out.shape(), a.grad_data(), inv,
                           true);
    });
  }
  return out;
}

// Swap the last two axes.
template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  const Index rank = a.rank();
  if (rank < 2) throw ShapeError("transpose: rank < 2");
  std::vector<Index> perm(rank);
  for (Index k = 0; k < rank; ++k) perm[k] = k;
  std::swap(perm[rank - 2], perm[rank - 1]);
  return permute(a, perm);
}

// Replicates axes of size 1 (and prepended leading axes) to match `target`.
template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& a, Shape target) {
  const Index arank = a.rank();
  const Index trank = static_cast<Index>(target.size());
  if (arank > trank)
    throw ShapeError("broadcast_to: cannot broadcast " +
                     shape_str(a.shape()) + " to " + shape_str(target));
  const Index pad = trank - arank;
  auto istrides = row_major_strides(a.shape());
  std::vector<Index> estride(trank, 0);
  for (Index k = 0; k < trank; ++k) {
    if (k < pad) continue;
    const Index adim = a.shape()[k - pad];
    if (adim == target[k])
      estride[k] = istrides[k - pad];
    else if (adim == 1)
      estride[k] = 0;
    else
      throw ShapeError("broadcast_to: cannot broadcast " +
                       shape_str(a.shape()) + " to " + shape_str(target));
  }
  Tensor<S> out = Tensor<S>::zeros(target);
  const S* in = a.data();
  S* po = out.data();
  const Index n = out.size();
  std::vector<Index> idx(trank, 0);
  Index ioff = 0;
  for (Index o = 0; o < n; ++o) {
    po[o] = in[ioff];
    for (Index k = trank - 1; k >= 0; --k) {
      ++idx[k];
      ioff += estride[k];
      if (idx[k] < target[k]) break;
      ioff -= estride[k] * target[k];
      idx[k] = 0;
    }
  }
  if (auto* tape = Tape<S>::active(); tape && a.requires_grad()) {
    detail::mark_tracked(out);
    tape->record([a, out, estride]() {
      if (!out.has_grad()) return;
      auto& ga = a.ensure_grad();
      const S* g = out.grad_data();
      const Shape& tgt = out.shape();
      const Index trank = static_cast<Index>(tgt.size());
      std::vector<Index> idx(trank, 0);
      Index ioff = 0;
      const Index n = out.size();
      for (Index o = 0; o < n; ++o) {
        ga[ioff] += g[o];
        for (Index k = trank - 1; k >= 0; --k) {
          ++idx[k];
          ioff += estride[k];
          if (idx[k] < tgt[k]) break;
          ioff -= estride[k] * tgt[k];
          idx[k] = 0;
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, Index axis, Index start, Index len) {
  auto f = detail::fiber_dims(a.shape(), axis);
  if (axis < 0) axis += a.rank();
  if (start < 0 || len < 0 || start + len > f.len)
    throw ShapeError("slice: [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of bounds for axis " +
                     std::to_string(axis) + " of " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const S* in = a.data();
  S* po = out.data();
  for (Index o = 0; o < f.outer; ++o)
    std::memcpy(po + o * len * f.inner, in + (o * f.len + start) * f.inner,
                sizeof(S) * static_cast<std::size_t>(len * f.inner));
  if (auto* tape = Tape<S>::active(); tape && a.requires_grad()) {
    detail::mark_tracked(out);
    tape->record([a, out, f, start, len]() {
      if (!out.has_grad()) return;
      auto& ga = a.ensure_grad();
      const S* g = out.grad_data();
      for (Index o = 0; o < f.outer; ++o) {
        S* dst = ga.data() + (o * f.len + start) * f.inner;
        const S* src = g + o * len * f.inner;
        for (Index i = 0; i < len * f.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis < 0) axis += static_cast<Index>(out_shape.size());
  Index total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (axis < 0 || axis >= static_cast<Index>(s.size()))
      throw ShapeError("concat: axis out of bounds");
    s[axis] = out_shape[axis];
    detail::check_same_shape(s, out_shape, "concat");
    total += p.shape()[axis];
  }
  out_shape[axis] = total;
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  auto f = detail::fiber_dims(out_shape, axis);
  S* po = out.data();
  Index pos = 0;
  bool any_grad = false;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    const Index plen = p.shape()[axis];
    const S* in = p.data();
    for (Index o = 0; o < f.outer; ++o)
      std::memcpy(po + (o * f.len + pos) * f.inner, in + o * plen * f.inner,
                  sizeof(S) * static_cast<std::size_t>(plen * f.inner));
    offsets.push_back(pos);
    pos += plen;
    any_grad = any_grad || p.requires_grad();
  }
  if (auto* tape = Tape<S>::active(); tape && any_grad) {
    detail::mark_tracked(out);
    const Index norm_axis = axis;
    tape->record([parts, out, f, offsets, norm_axis]() {
      if (!out.has_grad()) return;
      const S* g = out.grad_data();
      for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const auto& p = parts[pi];
        if (!p.requires_grad()) continue;
        auto& gp = p.ensure_grad();
        const Index plen = p.shape()[norm_axis];
        for (Index o = 0; o < f.outer; ++o) {
          const S* src = g + (o * f.len + offsets[pi]) * f.inner;
          S* dst = gp.data() + o * plen * f.inner;
          for (Index i = 0; i < plen * f.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

// ------------------------------------------------------------------------
// Reductions.
// ------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  double acc = 0.0;
  const S* pa = a.data();
  for (Index i = 0; i < a.size(); ++i) acc += double(pa[i]);
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc));
  if (auto* tape = Tape<S>::active(); tape && a.requires_grad()) {
    detail::mark_tracked(out);
    tape->record([a, out]() {
      if (!out.has_grad()) return;
      const S g = out.grad_data()[0];
      auto& ga = a.ensure_grad();
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  return scale(sum(a), S(1) / S(a.size()));
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a, Index axis, bool keepdim = false) {
  auto f = detail::fiber_dims(a.shape(), axis);
  if (axis < 0) axis += a.rank();
  Shape out_shape = a.shape();
  if (keepdim)
    out_shape[axis] = 1;
  else
    out_shape.erase(out_shape.begin() + axis);
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const S* in = a.data();
  S* po = out.data();
  for (Index o = 0; o < f.outer; ++o)
    for (Index j = 0; j < f.len; ++j) {
      const S* src = in + (o * f.len + j) * f.inner;
      S* dst = po + o * f.inner;
      for (Index i = 0; i < f.inner; ++i) dst[i] += src[i];
    }
  if (auto* tape = Tape<S>::active(); tape && a.requires_grad()) {
    detail::mark_tracked(out);
    tape->record([a, out, f]() {
      if (!out.has_grad()) return;
      auto& ga = a.ensure_grad();
      const S* g = out.grad_data();
      for (Index o = 0; o < f.outer; ++o)
        for (Index j = 0; j < f.len; ++j) {
          S* dst = ga.data() + (o * f.len + j) * f.inner;
          const S* src = g + o * f.inner;
          for (Index i = 0; i < f.inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a, Index axis, bool keepdim = false) {
  auto f = detail::fiber_dims(a.shape(), axis);
  return scale(sum(a, axis, keepdim), S(1) / S(f.len));
}

// ------------------------------------------------------------------------
// matmul: [batch..., m, k] x [batch..., k, n] -> [batch..., m, n]; leading
// batch axes broadcast (equal, 1, or absent). Gradients dA = g Bt, dB = At g.
// ------------------------------------------------------------------------

namespace detail {

struct MatmulPlan {
  Shape out_shape;
  Index m, k, n, batch;
  std::vector<Index> a_off, b_off;  // per-batch element offsets
};

template <typename S>
MatmulPlan matmul_plan(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  MatmulPlan p;
  p.m = a.shape()[a.rank() - 2];
  p.k = a.shape()[a.rank() - 1];
  const Index kb = b.shape()[b.rank() - 2];
  p.n = b.shape()[b.rank() - 1];
  if (p.k != kb)
    throw ShapeError("matmul: inner axes differ, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const Index abatch_rank = a.rank() - 2;
  const Index bbatch_rank = b.rank() - 2;
  const Index batch_rank = std::max(abatch_rank, bbatch_rank);
  Shape batch(batch_rank, 1);
  for (Index i = 0; i < batch_rank; ++i) {
    const Index ad =
        i >= batch_rank - abatch_rank ? a.shape()[i - (batch_rank - abatch_rank)] : 1;
    const Index bd =
        i >= batch_rank - bbatch_rank ? b.shape()[i - (batch_rank - bbatch_rank)] : 1;
    if (ad != bd && ad != 1 && bd != 1)
      throw ShapeError("matmul: batch axes not broadcastable, " +
                       shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    batch[i] = std::max(ad, bd);
  }
  p.out_shape = batch;
  p.out_shape.push_back(p.m);
  p.out_shape.push_back(p.n);
  p.batch = shape_numel(batch);
  // Per-batch data offsets with zero stride on broadcast axes.
  std::vector<Index> astride(batch_rank, 0), bstride(batch_rank, 0);
  Index arun = p.m * p.k, brun = kb * p.n;
  for (Index i = batch_rank - 1; i >= 0; --i) {
    const Index ad =
        i >= batch_rank - abatch_rank ? a.shape()[i - (batch_rank - abatch_rank)] : 1;
    const Index bd =
        i >= batch_rank - bbatch_rank ? b.shape()[i - (batch_rank - bbatch_rank)] : 1;
    astride[i] = ad == 1 ? 0 : arun;
    bstride[i] = bd == 1 ? 0 : brun;
    arun *= ad;
    brun *= bd;
  }
  p.a_off.resize(p.batch);
  p.b_off.resize(p.batch);
  std::vector<Index> idx(batch_rank, 0);
  Index ao = 0, bo = 0;
  for (Index e = 0; e < p.batch; ++e) {
    p.a_off[e] = ao;
    p.b_off[e] = bo;
    for (Index i = batch_rank - 1; i >= 0; --i) {
      ++idx[i];
      ao += astride[i];
      bo += bstride[i];
      if (idx[i] < batch[i]) break;
      ao -= astride[i] * batch[i];
      bo -= bstride[i] * batch[i];
      idx[i] = 0;
    }
  }
  return p;
}

}  // namespace detail

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  using Mat = detail::EigenMat<S>;
  auto plan = detail::matmul_plan(a, b);
  Tensor<S> out = Tensor<S>::zeros(plan.out_shape);
  const Index mn = plan.m * plan.n;
  for (Index e = 0; e < plan.batch; ++e) {
    Eigen::Map<const Mat> A(a.data() + plan.a_off[e], plan.m, plan.k);
    Eigen::Map<const Mat> B(b.data() + plan.b_off[e], plan.k, plan.n);
    Eigen::Map<Mat> C(out.data() + e * mn, plan.m, plan.n);
    C.noalias() = A * B;
  }
  if (auto* tape = Tape<S>::active();
      tape && (a.requires_grad() || b.requires_grad())) {
    detail::mark_tracked(out);
    tape->record([a, b, out, plan, mn]() {
      if (!out.has_grad()) return;
      for (Index e = 0; e < plan.batch; ++e) {
        Eigen::Map<const Mat> G(out.grad_data() + e * mn, plan.m, plan.n);
        if (a.requires_grad()) {
          a.ensure_grad();
          Eigen::Map<const Mat> B(b.data() + plan.b_off[e], plan.k, plan.n);
          Eigen::Map<Mat> dA(a.grad_data() + plan.a_off[e], plan.m, plan.k);
          dA.noalias() += G * B.transpose();
        }
        if (b.requires_grad()) {
          b.ensure_grad();
          Eigen::Map<const Mat> A(a.data() + plan.a_off[e], plan.m, plan.k);
          Eigen::Map<Mat> dB(b.grad_data() + plan.b_off[e], plan.k, plan.n);
          dB.noalias() += A.transpose() * G;
        }
      }
    });
  }
  return out;
}

// ------------------------------------------------------------------------
// softmax along an axis, with max subtraction.
// ------------------------------------------------------------------------

template <typename S>
Tensor<S> softmax(const Tensor<S>& a, Index axis) {
  auto f = detail::fiber_dims(a.shape(), axis);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* in = a.data();
  S* po = out.data();
  for (Index o = 0; o < f.outer; ++o)
    for (Index i = 0; i < f.inner; ++i) {
      const Index base = o * f.len * f.inner + i;
      S mx = in[base];
      for (Index j = 1; j < f.len; ++j)
        mx = std::max(mx, in[base + j * f.inner]);
      double denom = 0.0;
      for (Index j = 0; j < f.len; ++j) {
        const double e = std::exp(double(in[base + j * f.inner] - mx));
        po[base + j * f.inner] = static_cast<S>(e);
        denom += e;
      }
      const double inv = 1.0 / denom;
      for (Index j = 0; j < f.len; ++j)
        po[base + j * f.inner] = static_cast<S>(po[base + j * f.inner] * inv);
    }
  if (auto* tape = Tape<S>::active(); tape && a.requires_grad()) {
    detail::mark_tracked(out);
    tape->record([a, out, f]() {
      if (!out.has_grad()) return;
      const S* y = out.data();
      const S* g = out.grad_data();
      auto& ga = a.ensure_grad();
      for (Index o = 0; o < f.outer; ++o)
        for (Index i = 0; i < f.inner; ++i) {
          const Index base = o * f.len * f.inner + i;
          double dot = 0.0;
          for (Index j = 0; j < f.len; ++j) {
            const Index off = base + j * f.inner;
            dot += double(g[off]) * double(y[off]);
          }
          for (Index j = 0; j < f.len; ++j) {
            const Index off = base + j * f.inner;
            ga[off] += static_cast<S>(double(y[off]) *
                                      (double(g[off]) - dot));
          }
        }
    });
  }
  return out;
}

// ------------------------------------------------------------------------
// layernorm along an axis (population variance, epsilon 1e-5), with affine
// gamma/beta of shape [axis length].
// ------------------------------------------------------------------------

template <typename S>
Tensor<S> layernorm(const Tensor<S>& a, Index axis, const Tensor<S>& gamma,
                    const Tensor<S>& beta, double eps = 1e-5) {
  auto f = detail::fiber_dims(a.shape(), axis);
  if (gamma.size() != f.len || beta.size() != f.len)
    throw ShapeError("layernorm: gamma/beta of sizes " +
                     std::to_string(gamma.size()) + "/" +
                     std::to_string(beta.size()) + " do not match axis length " +
                     std::to_string(f.len));
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  // xhat and invstd are needed by the backward pass.
  auto xhat = std::make_shared<std::vector<S>>(a.size());
  auto invstd = std::make_shared<std::vector<S>>(f.outer * f.inner);
  const S* in = a.data();
  const S* pg = gamma.data();
  const S* pb = beta.data();
  S* po = out.data();
  for (Index o = 0; o < f.outer; ++o)
    for (Index i = 0; i < f.inner; ++i) {
      const Index base = o * f.len * f.inner + i;
      double mu = 0.0;
      for (Index j = 0; j < f.len; ++j) mu += double(in[base + j * f.inner]);
      mu /= double(f.len);
      double var = 0.0;
      for (Index j = 0; j < f.len; ++j) {
        const double d = double(in[base + j * f.inner]) - mu;
        var += d * d;
      }
      var /= double(f.len);
      const double inv = 1.0 / std::sqrt(var + eps);
      (*invstd)[o * f.inner + i] = static_cast<S>(inv);
      for (Index j = 0; j < f.len; ++j) {
        const Index off = base + j * f.inner;
        const S xh = static_cast<S>((double(in[off]) - mu) * inv);
        (*xhat)[off] = xh;
        po[off] = pg[j] * xh + pb[j];
      }
    }
  if (auto* tape = Tape<S>::active();
      tape &&
      (a.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
    detail::mark_tracked(out);
    tape->record([a, gamma, beta, out, f, xhat, invstd]() {
      if (!out.has_grad()) return;
      const S* g = out.grad_data();
      const S* pg = gamma.data();
      if (beta.requires_grad()) {
        auto& gb = beta.ensure_grad();
        for (Index o = 0; o < f.outer; ++o)
          for (Index i = 0; i < f.inner; ++i)
            for (Index j = 0; j < f.len; ++j)
              gb[j] += g[(o * f.len + j) * f.inner + i];
      }
      if (gamma.requires_grad()) {
        auto& gg = gamma.ensure_grad();
        for (Index o = 0; o < f.outer; ++o)
          for (Index i = 0; i < f.inner; ++i)
            for (Index j = 0; j < f.len; ++j) {
              const Index off = (o * f.len + j) * f.inner + i;
              gg[j] += g[off] * (*xhat)[off];
            }
      }
      if (a.requires_grad()) {
        auto& ga = a.ensure_grad();
        for (Index o = 0; o < f.outer; ++o)
          for (Index i = 0; i < f.inner; ++i) {
            const Index base = o * f.len * f.inner + i;
            double mean_gy = 0.0, mean_gyx = 0.0;
            for (Index j = 0; j < f.len; ++j) {
              const Index off = base + j * f.inner;
              const double gy = double(g[off]) * double(pg[j]);
              mean_gy += gy;
              mean_gyx += gy * double((*xhat)[off]);
            }
            mean_gy /= double(f.len);
            mean_gyx /= double(f.len);
            const double inv = double((*invstd)[o * f.inner + i]);
            for (Index j = 0; j < f.len; ++j) {
              const Index off = base + j * f.inner;
              const double gy = double(g[off]) * double(pg[j]);
              ga[off] += static_cast<S>(
                  inv * (gy - mean_gy - double((*xhat)[off]) * mean_gyx));
            }
          }
      }
    });
  }
  return out;
}

// ------------------------------------------------------------------------
// gather_rows: out[l, :] = table[indices[l], :], with scatter-add backward.
// ------------------------------------------------------------------------

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& table, const std::vector<Index>& idx) {
  if (table.rank() != 2)
    throw ShapeError("gather_rows: table must be rank 2, got " +
                     shape_str(table.shape()));
  const Index rows = table.dim(0), cols = table.dim(1);
  for (Index i : idx)
    if (i < 0 || i >= rows)
      throw ShapeError("gather_rows: index " + std::to_string(i) +
                       " out of range [0, " + std::to_string(rows) + ")");
  Tensor<S> out = Tensor<S>::zeros({static_cast<Index>(idx.size()), cols});
  for (std::size_t l = 0; l < idx.size(); ++l)
    std::memcpy(out.data() + l * cols, table.data() + idx[l] * cols,
                sizeof(S) * static_cast<std::size_t>(cols));
  if (auto* tape = Tape<S>::active(); tape && table.requires_grad()) {
    detail::mark_tracked(out);
    tape->record([table, out, idx, cols]() {
      if (!out.has_grad()) return;
      auto& gt = table.ensure_grad();
      const S* g = out.grad_data();
      for (std::size_t l = 0; l < idx.size(); ++l)
        for (Index c = 0; c < cols; ++c)
          gt[idx[l] * cols + c] += g[l * cols + c];
    });
  }
  return out;
}

// ------------------------------------------------------------------------
// Composed helpers.
// ------------------------------------------------------------------------

// tanh(a) .* sigmoid(b); output in (-1, 1).
template <typename S>
Tensor<S> gated_fuse(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "gated_fuse");
  return mul(tanh(a), sigmoid(b));
}

template <typename S>
Tensor<S> mean_absolute_error(const Tensor<S>& pred, const Tensor<S>& target) {
  return mean(abs(sub(pred, target)));
}

// cos(a, b) over flattened contents; zero-norm inputs yield 0 via the
// guarded denominator.
template <typename S>
Tensor<S> cosine_similarity(const Tensor<S>& a, const Tensor<S>& b,
                            S eps = S(1e-12)) {
  if (a.size() != b.size())
    throw ShapeError("cosine_similarity: sizes differ, " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<S> fa = reshape(a, {a.size()});
  Tensor<S> fb = reshape(b, {b.size()});
  Tensor<S> dot = sum(mul(fa, fb));
  Tensor<S> na = sqrt(sum(mul(fa, fa)));
  Tensor<S> nb = sqrt(sum(mul(fb, fb)));
  return div(dot, clamp_min(mul(na, nb), eps));
}

// y = x W + b along the last axis; W is [in, out], b is [out].
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  Tensor<S> y = matmul(x, w);
  return add(y, broadcast_to(b, y.shape()));
}

}  // namespace hstmixer
