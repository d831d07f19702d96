#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "satmark/ndiff/tape.hpp"

// Differentiable operators. Every function records one node on the tape of its
// first argument and returns a handle to it. Image-like tensors are [C, H, W].
namespace satmark::ndiff {

namespace detail {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MapRowMat = Eigen::Map<RowMat<Scalar>>;
template <typename Scalar>
using MapConstRowMat = Eigen::Map<const RowMat<Scalar>>;

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

template <typename Scalar>
void same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

inline void require_rank(const Shape& s, int rank, const char* op) {
  if (static_cast<int>(s.size()) != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
}

// Broadcast layout of a binary op: the smaller operand is tiled `reps` times.
struct Broadcast {
  Shape out;
  bool a_small = false;
  bool b_small = false;
  Eigen::Index inner = 0;
  Eigen::Index reps = 1;
};

inline Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.inner = numel(a);
    return bc;
  }
  if (is_suffix(b, a)) {
    bc.out = a;
    bc.b_small = true;
    bc.inner = numel(b);
    bc.reps = numel(a) / bc.inner;
    return bc;
  }
  if (is_suffix(a, b)) {
    bc.out = b;
    bc.a_small = true;
    bc.inner = numel(a);
    bc.reps = numel(b) / bc.inner;
    return bc;
  }
  throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " do not broadcast (trailing extents must match)");
}

template <typename Scalar>
ArrayX<Scalar> tile(const ArrayX<Scalar>& x, Eigen::Index reps) {
  return x.replicate(reps, 1);
}

template <typename Scalar>
ArrayX<Scalar> untile(const ArrayX<Scalar>& g, Eigen::Index inner, Eigen::Index reps) {
  return g.reshaped(inner, reps).rowwise().sum();
}

template <typename Scalar, typename Fwd, typename Dfdx>
Var<Scalar> unary(const Var<Scalar>& x, Fwd fwd, Dfdx dfdx) {
  ArrayX<Scalar> y = fwd(x.value());
  const int xid = x.id();
  auto& tape = x.tape();
  return tape.push(x.shape(), std::move(y), x.requires_grad(),
                   [xid, dfdx](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
                     t.accumulate(xid, g * dfdx(t.node(xid).value));
                   });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with trailing-shape broadcasting.

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape(a, b);
  auto bc = detail::broadcast(a.shape(), b.shape(), "add");
  ArrayX<Scalar> y = bc.a_small   ? ArrayX<Scalar>(detail::tile(a.value(), bc.reps) + b.value())
                     : bc.b_small ? ArrayX<Scalar>(a.value() + detail::tile(b.value(), bc.reps))
                                  : ArrayX<Scalar>(a.value() + b.value());
  const int ia = a.id(), ib = b.id();
  return a.tape().push(bc.out, std::move(y), a.requires_grad() || b.requires_grad(),
                       [ia, ib, bc](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
                         if (bc.a_small)
                           t.accumulate(ia, detail::untile(g, bc.inner, bc.reps));
                         else
                           t.accumulate(ia, g);
                         if (bc.b_small)
                           t.accumulate(ib, detail::untile(g, bc.inner, bc.reps));
                         else
                           t.accumulate(ib, g);
                       });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape(a, b);
  auto bc = detail::broadcast(a.shape(), b.shape(), "sub");
  ArrayX<Scalar> y = bc.a_small   ? ArrayX<Scalar>(detail::tile(a.value(), bc.reps) - b.value())
                     : bc.b_small ? ArrayX<Scalar>(a.value() - detail::tile(b.value(), bc.reps))
                                  : ArrayX<Scalar>(a.value() - b.value());
  const int ia = a.id(), ib = b.id();
  return a.tape().push(bc.out, std::move(y), a.requires_grad() || b.requires_grad(),
                       [ia, ib, bc](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
                         if (bc.a_small)
                           t.accumulate(ia, detail::untile(g, bc.inner, bc.reps));
                         else
                           t.accumulate(ia, g);
                         if (bc.b_small)
                           t.accumulate(ib, -detail::untile(g, bc.inner, bc.reps));
                         else
                           t.accumulate(ib, -g);
                       });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape(a, b);
  auto bc = detail::broadcast(a.shape(), b.shape(), "mul");
  ArrayX<Scalar> av = bc.a_small ? detail::tile(a.value(), bc.reps) : a.value();
  ArrayX<Scalar> bv = bc.b_small ? detail::tile(b.value(), bc.reps) : b.value();
  ArrayX<Scalar> y = av * bv;
  const int ia = a.id(), ib = b.id();
  const bool need_a = a.requires_grad(), need_b = b.requires_grad();
  return a.tape().push(bc.out, std::move(y), need_a || need_b,
                       [ia, ib, bc, av, bv, need_a, need_b](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
                         if (need_a) {
                           ArrayX<Scalar> ga = g * bv;
                           t.accumulate(ia, bc.a_small ? detail::untile(ga, bc.inner, bc.reps) : ga);
                         }
                         if (need_b) {
                           ArrayX<Scalar> gb = g * av;
                           t.accumulate(ib, bc.b_small ? detail::untile(gb, bc.inner, bc.reps) : gb);
                         }
                       });
}

template <typename Scalar>
Var<Scalar> div(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape(a, b);
  auto bc = detail::broadcast(a.shape(), b.shape(), "div");
  ArrayX<Scalar> av = bc.a_small ? detail::tile(a.value(), bc.reps) : a.value();
  ArrayX<Scalar> bv = bc.b_small ? detail::tile(b.value(), bc.reps) : b.value();
  if ((bv == Scalar(0)).any()) throw NumericError("div: division by zero");
  ArrayX<Scalar> y = av / bv;
  const int ia = a.id(), ib = b.id();
  const bool need_a = a.requires_grad(), need_b = b.requires_grad();
  return a.tape().push(bc.out, y, need_a || need_b,
                       [ia, ib, bc, y, bv, need_a, need_b](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
                         if (need_a) {
                           ArrayX<Scalar> ga = g / bv;
                           t.accumulate(ia, bc.a_small ? detail::untile(ga, bc.inner, bc.reps) : ga);
                         }
                         if (need_b) {
                           ArrayX<Scalar> gb = -g * y / bv;
                           t.accumulate(ib, bc.b_small ? detail::untile(gb, bc.inner, bc.reps) : gb);
                         }
                       });
}

// ---------------------------------------------------------------------------
// Scalar and unary ops.

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& x, Scalar s) {
  return detail::unary(
      x, [s](const ArrayX<Scalar>& v) { return ArrayX<Scalar>(v + s); },
      [](const ArrayX<Scalar>& v) { return ArrayX<Scalar>::Ones(v.size()); });
}

template <typename Scalar>
Var<Scalar> mul_scalar(const Var<Scalar>& x, Scalar s) {
  return detail::unary(
      x, [s](const ArrayX<Scalar>& v) { return ArrayX<Scalar>(v * s); },
      [s](const ArrayX<Scalar>& v) { return ArrayX<Scalar>::Constant(v.size(), s); });
}

template <typename Scalar>
Var<Scalar> neg(const Var<Scalar>& x) {
  return mul_scalar(x, Scalar(-1));
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  return detail::unary(
      x, [](const ArrayX<Scalar>& v) { return ArrayX<Scalar>(v.max(Scalar(0))); },
      [](const ArrayX<Scalar>& v) { return ArrayX<Scalar>((v > Scalar(0)).template cast<Scalar>()); });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& x, Scalar slope = Scalar(0.2)) {
  return detail::unary(
      x, [slope](const ArrayX<Scalar>& v) { return ArrayX<Scalar>((v > Scalar(0)).select(v, slope * v)); },
      [slope](const ArrayX<Scalar>& v) {
        return ArrayX<Scalar>((v > Scalar(0)).select(ArrayX<Scalar>::Ones(v.size()),
                                                     ArrayX<Scalar>::Constant(v.size(), slope)));
      });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  auto f = [](const ArrayX<Scalar>& v) {
    // Split by sign so exp never overflows.
    ArrayX<Scalar> e = (-v.abs()).exp();
    return ArrayX<Scalar>((v >= Scalar(0)).select(Scalar(1) / (Scalar(1) + e), e / (Scalar(1) + e)));
  };
  return detail::unary(x, f, [f](const ArrayX<Scalar>& v) {
    ArrayX<Scalar> s = f(v);
    return ArrayX<Scalar>(s * (Scalar(1) - s));
  });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& x) {
  return detail::unary(
      x, [](const ArrayX<Scalar>& v) { return ArrayX<Scalar>(v.tanh()); },
      [](const ArrayX<Scalar>& v) { return ArrayX<Scalar>(Scalar(1) - v.tanh().square()); });
}

// Clamp to [0, 1] with a straight-through gradient inside the interval.
template <typename Scalar>
Var<Scalar> clamp01(const Var<Scalar>& x) {
  return detail::unary(
      x, [](const ArrayX<Scalar>& v) { return ArrayX<Scalar>(v.max(Scalar(0)).min(Scalar(1))); },
      [](const ArrayX<Scalar>& v) {
        return ArrayX<Scalar>(((v >= Scalar(0)) && (v <= Scalar(1))).template cast<Scalar>());
      });
}

// Round half away from zero; gradient passes straight through.
template <typename Scalar>
Var<Scalar> round_ste(const Var<Scalar>& x) {
  return detail::unary(
      x, [](const ArrayX<Scalar>& v) { return ArrayX<Scalar>(v.round()); },
      [](const ArrayX<Scalar>& v) { return ArrayX<Scalar>::Ones(v.size()); });
}

template <typename Scalar>
Var<Scalar> abs(const Var<Scalar>& x) {
  return detail::unary(
      x, [](const ArrayX<Scalar>& v) { return ArrayX<Scalar>(v.abs()); },
      [](const ArrayX<Scalar>& v) {
        return ArrayX<Scalar>((v > Scalar(0)).template cast<Scalar>() - (v < Scalar(0)).template cast<Scalar>());
      });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& x) {
  return detail::unary(
      x, [](const ArrayX<Scalar>& v) { return ArrayX<Scalar>(v.square()); },
      [](const ArrayX<Scalar>& v) { return ArrayX<Scalar>(Scalar(2) * v); });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  const int xid = x.id();
  const Eigen::Index n = x.numel();
  ArrayX<Scalar> y = ArrayX<Scalar>::Constant(1, x.value().sum());
  return x.tape().push(Shape{}, std::move(y), x.requires_grad(),
                       [xid, n](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
                         t.accumulate(xid, ArrayX<Scalar>::Constant(n, g[0]));
                       });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  const int xid = x.id();
  const Eigen::Index n = x.numel();
  ArrayX<Scalar> y = ArrayX<Scalar>::Constant(1, x.value().mean());
  return x.tape().push(Shape{}, std::move(y), x.requires_grad(),
                       [xid, n](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
                         t.accumulate(xid, ArrayX<Scalar>::Constant(n, g[0] / static_cast<Scalar>(n)));
                       });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  check_shape(shape);
  if (numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  const int xid = x.id();
  return x.tape().push(std::move(shape), x.value(), x.requires_grad(),
                       [xid](Tape<Scalar>& t, const ArrayX<Scalar>& g) { t.accumulate(xid, g); });
}

// Concatenation along the leading dimension.
template <typename Scalar>
Var<Scalar> concat0(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.empty() || sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1))
    throw DimensionError("concat0: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  Shape out = sa;
  out[0] += sb[0];
  const Eigen::Index na = a.numel(), nb = b.numel();
  ArrayX<Scalar> y(na + nb);
  y.head(na) = a.value();
  y.tail(nb) = b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), std::move(y), a.requires_grad() || b.requires_grad(),
                       [ia, ib, na, nb](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
                         t.accumulate(ia, g.head(na));
                         t.accumulate(ib, g.tail(nb));
                       });
}

// y[i] = x[index[i]]; gradients scatter-add back. Used for padding and crops.
template <typename Scalar>
Var<Scalar> gather(const Var<Scalar>& x, Shape shape, std::vector<Eigen::Index> index) {
  check_shape(shape);
  if (static_cast<Eigen::Index>(index.size()) != numel(shape))
    throw DimensionError("gather: index count does not match output shape " + shape_str(shape));
  const Eigen::Index n = x.numel();
  ArrayX<Scalar> y(static_cast<Eigen::Index>(index.size()));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= n) throw DimensionError("gather: index out of range");
    y[static_cast<Eigen::Index>(i)] = x.value()[index[i]];
  }
  const int xid = x.id();
  return x.tape().push(std::move(shape), std::move(y), x.requires_grad(),
                       [xid, n, index = std::move(index)](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
                         ArrayX<Scalar> gx = ArrayX<Scalar>::Zero(n);
                         for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += g[static_cast<Eigen::Index>(i)];
                         t.accumulate(xid, gx);
                       });
}

// ---------------------------------------------------------------------------
// Linear algebra.

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::same_tape(a, b);
  detail::require_rank(a.shape(), 2, "matmul");
  detail::require_rank(b.shape(), 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  ArrayX<Scalar> y(static_cast<Eigen::Index>(m) * n);
  detail::MapRowMat<Scalar>(y.data(), m, n).noalias() =
      detail::MapConstRowMat<Scalar>(a.value().data(), m, k) * detail::MapConstRowMat<Scalar>(b.value().data(), k, n);
  const int ia = a.id(), ib = b.id();
  const bool need_a = a.requires_grad(), need_b = b.requires_grad();
  return a.tape().push(Shape{m, n}, std::move(y), need_a || need_b,
                       [ia, ib, m, k, n, need_a, need_b](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
                         detail::MapConstRowMat<Scalar> G(g.data(), m, n);
                         if (need_a) {
                           ArrayX<Scalar> ga(static_cast<Eigen::Index>(m) * k);
                           detail::MapRowMat<Scalar>(ga.data(), m, k).noalias() =
                               G * detail::MapConstRowMat<Scalar>(t.node(ib).value.data(), k, n).transpose();
                           t.accumulate(ia, ga);
                         }
                         if (need_b) {
                           ArrayX<Scalar> gb(static_cast<Eigen::Index>(k) * n);
                           detail::MapRowMat<Scalar>(gb.data(), k, n).noalias() =
                               detail::MapConstRowMat<Scalar>(t.node(ia).value.data(), m, k).transpose() * G;
                           t.accumulate(ib, gb);
                         }
                       });
}

// y = W x + b for x [n], W [out, n], b [out].
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  detail::require_rank(weight.shape(), 2, "linear");
  const int out = weight.dim(0), in = weight.dim(1);
  if (x.numel() != in)
    throw DimensionError("linear: input has " + std::to_string(x.numel()) + " elements, weight expects " +
                         std::to_string(in));
  if (bias.numel() != out) throw DimensionError("linear: bias length mismatch");
  auto xcol = reshape(x, Shape{in, 1});
  auto y = matmul(weight, xcol);
  return add(reshape(y, Shape{out}), bias);
}

// ---------------------------------------------------------------------------
// Convolutions (cross-correlation semantics).

struct ConvGeometry {
  int channels, height, width, kernel, stride, padding, out_h, out_w;
};

inline ConvGeometry conv_geometry(const Shape& input, int kernel, int stride, int padding) {
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (padding < 0) throw ContractError("conv2d: padding must be >= 0");
  ConvGeometry g{input[0], input[1], input[2], kernel, stride, padding, 0, 0};
  const int num_h = input[1] + 2 * padding - kernel;
  const int num_w = input[2] + 2 * padding - kernel;
  if (num_h < 0 || num_w < 0)
    throw DimensionError("conv2d: non-positive output extent for input " + shape_str(input) + " and kernel " +
                         std::to_string(kernel));
  g.out_h = num_h / stride + 1;
  g.out_w = num_w / stride + 1;
  return g;
}

namespace detail {

// Column matrix [C*k*k, out_h*out_w] (row-major).
template <typename Scalar>
RowMat<Scalar> im2col(const Scalar* x, const ConvGeometry& g) {
  const int k = g.kernel;
  const int P = g.out_h * g.out_w;
  RowMat<Scalar> col(static_cast<Eigen::Index>(g.channels) * k * k, P);
  for (int c = 0; c < g.channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        Scalar* row = col.row((static_cast<Eigen::Index>(c) * k + ky) * k + kx).data();
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride + ky - g.padding;
          Scalar* dst = row + static_cast<Eigen::Index>(oy) * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, Scalar(0));
            continue;
          }
          const Scalar* src = x + (static_cast<Eigen::Index>(c) * g.height + iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride + kx - g.padding;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : Scalar(0);
          }
        }
      }
  return col;
}

template <typename Scalar>
void col2im(const RowMat<Scalar>& col, const ConvGeometry& g, Scalar* dx) {
  const int k = g.kernel;
  for (int c = 0; c < g.channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const Scalar* row = col.row((static_cast<Eigen::Index>(c) * k + ky) * k + kx).data();
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride + ky - g.padding;
          if (iy < 0 || iy >= g.height) continue;
          const Scalar* src = row + static_cast<Eigen::Index>(oy) * g.out_w;
          Scalar* dst = dx + (static_cast<Eigen::Index>(c) * g.height + iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride + kx - g.padding;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

// input [C_in, H, W], kernel [C_out, C_in, k, k], optional bias [C_out].
namespace detail {

template <typename Scalar>
Var<Scalar> conv2d_impl(const Var<Scalar>& input, const Var<Scalar>& kernel, const Var<Scalar>* bias, int stride,
                        int padding) {
  detail::same_tape(input, kernel);
  detail::require_rank(input.shape(), 3, "conv2d input");
  detail::require_rank(kernel.shape(), 4, "conv2d kernel");
  const int c_out = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != input.dim(0))
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, got " +
                         std::to_string(input.dim(0)));
  if (kernel.dim(3) != k) throw DimensionError("conv2d: kernel must be square");
  if (bias && bias->numel() != c_out) throw DimensionError("conv2d: bias length mismatch");
  const ConvGeometry g = conv_geometry(input.shape(), k, stride, padding);
  const int P = g.out_h * g.out_w;
  const Eigen::Index K = static_cast<Eigen::Index>(g.channels) * k * k;

  auto col = std::make_shared<detail::RowMat<Scalar>>(detail::im2col(input.value().data(), g));
  detail::MapConstRowMat<Scalar> W(kernel.value().data(), c_out, K);
  ArrayX<Scalar> y(static_cast<Eigen::Index>(c_out) * P);
  detail::MapRowMat<Scalar> Y(y.data(), c_out, P);
  Y.noalias() = W * (*col);
  if (bias) Y.colwise() += bias->value().matrix();

  const int ix = input.id(), iw = kernel.id();
  const int ib = bias ? bias->id() : -1;
  const bool need_x = input.requires_grad(), need_w = kernel.requires_grad();
  const bool need_b = bias && bias->requires_grad();
  if (!need_w) col.reset();
  return input.tape().push(
      Shape{c_out, g.out_h, g.out_w}, std::move(y), need_x || need_w || need_b,
      [=](Tape<Scalar>& t, const ArrayX<Scalar>& grad) {
        detail::MapConstRowMat<Scalar> G(grad.data(), c_out, P);
        if (need_w) {
          ArrayX<Scalar> gw(static_cast<Eigen::Index>(c_out) * K);
          detail::MapRowMat<Scalar>(gw.data(), c_out, K).noalias() = G * col->transpose();
          t.accumulate(iw, gw);
        }
        if (need_b) t.accumulate(ib, ArrayX<Scalar>(G.rowwise().sum().array()));
        if (need_x) {
          detail::MapConstRowMat<Scalar> Wt(t.node(iw).value.data(), c_out, K);
          detail::RowMat<Scalar> dcol = Wt.transpose() * G;
          ArrayX<Scalar>& gx = t.grad_buffer(ix);
          detail::col2im(dcol, g, gx.data());
        }
      });
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, const Var<Scalar>& bias, int stride = 1,
                   int padding = 0) {
  detail::same_tape(input, bias);
  return detail::conv2d_impl(input, kernel, &bias, stride, padding);
}

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, int stride = 1, int padding = 0) {
  return detail::conv2d_impl<Scalar>(input, kernel, nullptr, stride, padding);
}

// Per-channel convolution: input [C, H, W], kernel [C, k, k].
template <typename Scalar>
Var<Scalar> depthwise_conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, int padding) {
  detail::same_tape(input, kernel);
  detail::require_rank(input.shape(), 3, "depthwise_conv2d input");
  detail::require_rank(kernel.shape(), 3, "depthwise_conv2d kernel");
  const int C = input.dim(0), k = kernel.dim(1);
  if (kernel.dim(0) != C || kernel.dim(2) != k) throw DimensionError("depthwise_conv2d: kernel shape mismatch");
  const ConvGeometry g = conv_geometry(input.shape(), k, 1, padding);
  const int H = g.height, W = g.width, Ho = g.out_h, Wo = g.out_w;
  const auto& x = input.value();
  const auto& w = kernel.value();
  ArrayX<Scalar> y = ArrayX<Scalar>::Zero(static_cast<Eigen::Index>(C) * Ho * Wo);
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        Scalar acc = 0;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy + ky - padding;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ixx = ox + kx - padding;
            if (ixx < 0 || ixx >= W) continue;
            acc += w[(c * k + ky) * k + kx] * x[(static_cast<Eigen::Index>(c) * H + iy) * W + ixx];
          }
        }
        y[(static_cast<Eigen::Index>(c) * Ho + oy) * Wo + ox] = acc;
      }
  const int ixd = input.id(), iwd = kernel.id();
  const bool need_x = input.requires_grad(), need_w = kernel.requires_grad();
  return input.tape().push(
      Shape{C, Ho, Wo}, std::move(y), need_x || need_w, [=](Tape<Scalar>& t, const ArrayX<Scalar>& grad) {
        const auto& xv = t.node(ixd).value;
        const auto& wv = t.node(iwd).value;
        ArrayX<Scalar> gx = ArrayX<Scalar>::Zero(xv.size());
        ArrayX<Scalar> gw = ArrayX<Scalar>::Zero(wv.size());
        for (int c = 0; c < C; ++c)
          for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
              const Scalar go = grad[(static_cast<Eigen::Index>(c) * Ho + oy) * Wo + ox];
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy + ky - padding;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const int ixx = ox + kx - padding;
                  if (ixx < 0 || ixx >= W) continue;
                  const Eigen::Index xi = (static_cast<Eigen::Index>(c) * H + iy) * W + ixx;
                  const Eigen::Index wi = (c * k + ky) * k + kx;
                  gx[xi] += wv[wi] * go;
                  gw[wi] += xv[xi] * go;
                }
              }
            }
        if (need_x) t.accumulate(ixd, gx);
        if (need_w) t.accumulate(iwd, gw);
      });
}

// ---------------------------------------------------------------------------
// Resampling.

template <typename Scalar>
Var<Scalar> upsample_nearest2(const Var<Scalar>& x) {
  detail::require_rank(x.shape(), 3, "upsample_nearest2");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const auto& v = x.value();
  ArrayX<Scalar> y(static_cast<Eigen::Index>(C) * 4 * H * W);
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < 2 * H; ++oy)
      for (int ox = 0; ox < 2 * W; ++ox)
        y[(static_cast<Eigen::Index>(c) * 2 * H + oy) * 2 * W + ox] =
            v[(static_cast<Eigen::Index>(c) * H + oy / 2) * W + ox / 2];
  const int xid = x.id();
  return x.tape().push(Shape{C, 2 * H, 2 * W}, std::move(y), x.requires_grad(),
                       [xid, C, H, W](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
                         ArrayX<Scalar> gx = ArrayX<Scalar>::Zero(static_cast<Eigen::Index>(C) * H * W);
                         for (int c = 0; c < C; ++c)
                           for (int oy = 0; oy < 2 * H; ++oy)
                             for (int ox = 0; ox < 2 * W; ++ox)
                               gx[(static_cast<Eigen::Index>(c) * H + oy / 2) * W + ox / 2] +=
                                   g[(static_cast<Eigen::Index>(c) * 2 * H + oy) * 2 * W + ox];
                         t.accumulate(xid, gx);
                       });
}

// [C, H, W] -> [C]
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  detail::require_rank(x.shape(), 3, "global_avg_pool");
  const int C = x.dim(0);
  const Eigen::Index P = static_cast<Eigen::Index>(x.dim(1)) * x.dim(2);
  ArrayX<Scalar> y = x.value().reshaped(P, C).colwise().mean().transpose();
  const int xid = x.id();
  return x.tape().push(Shape{C}, std::move(y), x.requires_grad(),
                       [xid, C, P](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
                         ArrayX<Scalar> gx(static_cast<Eigen::Index>(C) * P);
                         for (int c = 0; c < C; ++c) gx.segment(c * P, P).setConstant(g[c] / static_cast<Scalar>(P));
                         t.accumulate(xid, gx);
                       });
}

// Divides each spatial position's channel vector by its Euclidean norm.
template <typename Scalar>
Var<Scalar> channel_normalize(const Var<Scalar>& x, Scalar eps = Scalar(1e-10)) {
  detail::require_rank(x.shape(), 3, "channel_normalize");
  const int C = x.dim(0);
  const Eigen::Index P = static_cast<Eigen::Index>(x.dim(1)) * x.dim(2);
  auto X = x.value().reshaped(P, C);  // column c holds channel c
  ArrayX<Scalar> norm = (X.square().rowwise().sum() + eps).sqrt();
  ArrayX<Scalar> y(X.size());
  y.reshaped(P, C) = X.colwise() / norm;
  const int xid = x.id();
  return x.tape().push(x.shape(), y, x.requires_grad(),
                       [xid, C, P, norm, y](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
                         auto G = g.reshaped(P, C);
                         auto Y = y.reshaped(P, C);
                         ArrayX<Scalar> dot = (G * Y).rowwise().sum();
                         ArrayX<Scalar> gx(g.size());
                         gx.reshaped(P, C) = (G - Y.colwise() * dot).colwise() / norm;
                         t.accumulate(xid, gx);
                       });
}

// Bilinear sampling with zero padding. grid [H', W', 2] holds normalized
// (x, y) coordinates; -1 and +1 are the outer edges of the border pixels.
template <typename Scalar>
Var<Scalar> grid_sample(const Var<Scalar>& input, const Var<Scalar>& grid) {
  detail::same_tape(input, grid);
  detail::require_rank(input.shape(), 3, "grid_sample input");
  detail::require_rank(grid.shape(), 3, "grid_sample grid");
  if (grid.dim(2) != 2) throw DimensionError("grid_sample: grid last extent must be 2, got " + shape_str(grid.shape()));
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int Ho = grid.dim(0), Wo = grid.dim(1);
  const auto& x = input.value();
  const auto& gr = grid.value();
  ArrayX<Scalar> y(static_cast<Eigen::Index>(C) * Ho * Wo);
  auto pixel = [&](const ArrayX<Scalar>& v, int c, int yy, int xx) -> Scalar {
    if (yy < 0 || yy >= H || xx < 0 || xx >= W) return Scalar(0);
    return v[(static_cast<Eigen::Index>(c) * H + yy) * W + xx];
  };
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox) {
      const Eigen::Index gi = (static_cast<Eigen::Index>(oy) * Wo + ox) * 2;
      const Scalar fx = ((gr[gi] + Scalar(1)) * W - Scalar(1)) / Scalar(2);
      const Scalar fy = ((gr[gi + 1] + Scalar(1)) * H - Scalar(1)) / Scalar(2);
      const Scalar x0f = std::floor(fx), y0f = std::floor(fy);
      const int x0 = static_cast<int>(std::clamp<Scalar>(x0f, -2, W + 1));
      const int y0 = static_cast<int>(std::clamp<Scalar>(y0f, -2, H + 1));
      const Scalar wx1 = fx - x0f, wy1 = fy - y0f;
      const Scalar wx0 = Scalar(1) - wx1, wy0 = Scalar(1) - wy1;
      for (int c = 0; c < C; ++c)
        y[(static_cast<Eigen::Index>(c) * Ho + oy) * Wo + ox] =
            wy0 * (wx0 * pixel(x, c, y0, x0) + wx1 * pixel(x, c, y0, x0 + 1)) +
            wy1 * (wx0 * pixel(x, c, y0 + 1, x0) + wx1 * pixel(x, c, y0 + 1, x0 + 1));
    }
  const int ii = input.id(), ig = grid.id();
  const bool need_x = input.requires_grad(), need_g = grid.requires_grad();
  return input.tape().push(
      Shape{C, Ho, Wo}, std::move(y), need_x || need_g, [=](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
        const auto& xv = t.node(ii).value;
        const auto& gv = t.node(ig).value;
        ArrayX<Scalar> gx = ArrayX<Scalar>::Zero(need_x ? xv.size() : 0);
        ArrayX<Scalar> ggrid = ArrayX<Scalar>::Zero(need_g ? gv.size() : 0);
        auto pix = [&](int c, int yy, int xx) -> Scalar {
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) return Scalar(0);
          return xv[(static_cast<Eigen::Index>(c) * H + yy) * W + xx];
        };
        auto scatter = [&](int c, int yy, int xx, Scalar v) {
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) return;
          gx[(static_cast<Eigen::Index>(c) * H + yy) * W + xx] += v;
        };
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            const Eigen::Index gi = (static_cast<Eigen::Index>(oy) * Wo + ox) * 2;
            const Scalar fx = ((gv[gi] + Scalar(1)) * W - Scalar(1)) / Scalar(2);
            const Scalar fy = ((gv[gi + 1] + Scalar(1)) * H - Scalar(1)) / Scalar(2);
            const Scalar x0f = std::floor(fx), y0f = std::floor(fy);
            const int x0 = static_cast<int>(std::clamp<Scalar>(x0f, -2, W + 1));
            const int y0 = static_cast<int>(std::clamp<Scalar>(y0f, -2, H + 1));
            const Scalar wx1 = fx - x0f, wy1 = fy - y0f;
            const Scalar wx0 = Scalar(1) - wx1, wy0 = Scalar(1) - wy1;
            Scalar dfx = 0, dfy = 0;
            for (int c = 0; c < C; ++c) {
              const Scalar go = g[(static_cast<Eigen::Index>(c) * Ho + oy) * Wo + ox];
              if (go == Scalar(0)) continue;
              if (need_x) {
                scatter(c, y0, x0, go * wy0 * wx0);
                scatter(c, y0, x0 + 1, go * wy0 * wx1);
                scatter(c, y0 + 1, x0, go * wy1 * wx0);
                scatter(c, y0 + 1, x0 + 1, go * wy1 * wx1);
              }
              if (need_g) {
                const Scalar v00 = pix(c, y0, x0), v01 = pix(c, y0, x0 + 1);
                const Scalar v10 = pix(c, y0 + 1, x0), v11 = pix(c, y0 + 1, x0 + 1);
                dfx += go * (wy0 * (v01 - v00) + wy1 * (v11 - v10));
                dfy += go * (wx0 * (v10 - v00) + wx1 * (v11 - v01));
              }
            }
            if (need_g) {
              ggrid[gi] = dfx * Scalar(W) / Scalar(2);
              ggrid[gi + 1] = dfy * Scalar(H) / Scalar(2);
            }
          }
        if (need_x) t.accumulate(ii, gx);
        if (need_g) t.accumulate(ig, ggrid);
      });
}

// Normalized pixel-center grid [H, W, 2]: sampling with it reproduces the input.
template <typename Scalar>
Tensor<Scalar> identity_grid(int H, int W) {
  Tensor<Scalar> g(Shape{H, W, 2});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      g.data[(static_cast<Eigen::Index>(y) * W + x) * 2] = (Scalar(2) * x + Scalar(1)) / W - Scalar(1);
      g.data[(static_cast<Eigen::Index>(y) * W + x) * 2 + 1] = (Scalar(2) * y + Scalar(1)) / H - Scalar(1);
    }
  return g;
}

}  // namespace satmark::ndiff
