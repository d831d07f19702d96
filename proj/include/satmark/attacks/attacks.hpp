#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "satmark/errors.hpp"
#include "satmark/ndiff/homography.hpp"
#include "satmark/ndiff/ops.hpp"
#include "satmark/rng.hpp"

namespace satmark::attacks {

using ndiff::Tape;
using ndiff::Tensor;
using ndiff::Var;

enum class AttackKind { blur, noise, brightness, contrast, desaturate, perspective, jpeg, identity };

inline constexpr int kNumAttacks = 7;
inline constexpr std::array<AttackKind, kNumAttacks> kAllAttacks{
    AttackKind::blur,     AttackKind::noise,       AttackKind::brightness, AttackKind::contrast,
    AttackKind::desaturate, AttackKind::perspective, AttackKind::jpeg};

// CLI-visible names: blur, noise, brightness, contrast, desat, perspective, jpeg, identity.
const char* kind_name(AttackKind k);
// Unit of the intensity value: sigma, std, shift, factor, alpha, strength, qf.
const char* intensity_unit(AttackKind k);
AttackKind parse_kind(const std::string& name);  // throws ContractError

struct Range {
  double min = 0.0;
  double max = 0.0;
  double neutral = 0.0;
};

struct AttackRanges {
  Range blur{0.0, 1.5, 0.0};
  Range noise{0.0, 0.08, 0.0};
  Range brightness{0.0, 0.3, 0.0};
  Range contrast{0.5, 1.5, 1.0};
  Range desaturate{0.0, 1.0, 0.0};
  Range perspective{0.0, 0.1, 0.0};
  Range jpeg{0.0, 50.0, 50.0};

  const Range& operator[](AttackKind k) const;
  Range& operator[](AttackKind k);
  void validate() const;
};

struct AttackSpec {
  AttackKind kind = AttackKind::identity;
  double intensity = 0.0;
  double gamma = 0.0;
  // Seeds the attack's own randomness (noise field, brightness sign,
  // perspective corners), so a spec fully determines its output.
  std::uint64_t seed = 0;
};

// Kind uniform over the seven; raw intensity uniform in range; effective
// intensity = neutral + gamma * (raw - neutral).
AttackSpec sample_attack(Rng& rng, double gamma, const AttackRanges& ranges = {});
// Same draw with the kind fixed by the caller.
AttackSpec sample_attack_of(AttackKind kind, Rng& rng, double gamma, const AttackRanges& ranges = {});

// Linear ramp min(1, 2 step / total).
double schedule_gamma(long step, long total);

// Normalized 7x7 Gaussian kernel (row-major). sigma = 0 gives a centered delta.
std::array<double, 49> gaussian_kernel7(double sigma);

// Integer JPEG quality used for a QF intensity: rounded, 0 mapped to 1, capped at 100.
int effective_quality(double qf);
// Annex-K tables scaled by the libjpeg quality rule, entries clamped to [1, 255].
std::array<double, 64> quant_table(int quality, bool chroma);

// Perspective corner offsets (normalized units, corner order of kCorners) realized by a spec.
std::array<double, 8> perspective_offsets(const AttackSpec& spec, int H, int W);

// Signed brightness shift realized by a spec.
double brightness_shift(const AttackSpec& spec);

// Orthonormal 8x8 type-II DCT basis: coefficient block = D * block * D^T.
const Eigen::Matrix<double, 8, 8>& dct_matrix();
Eigen::Matrix<double, 8, 8> dct8(const Eigen::Matrix<double, 8, 8>& block);
Eigen::Matrix<double, 8, 8> idct8(const Eigen::Matrix<double, 8, 8>& coeffs);

// Blockwise 8x8 DCT (or its inverse) over every channel of a [C, H, W] value
// with H, W multiples of 8. Linear; the adjoint of the orthonormal transform is
// its inverse.
template <typename Scalar>
Var<Scalar> block_dct(const Var<Scalar>& x, bool inverse) {
  ndiff::detail::require_rank(x.shape(), 3, "block_dct");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H % 8 || W % 8) throw DimensionError("block_dct: extents must be multiples of 8, got " + ndiff::shape_str(x.shape()));
  using Mat8 = Eigen::Matrix<Scalar, 8, 8>;
  const Mat8 D = dct_matrix().cast<Scalar>();
  auto transform = [C, H, W, D](const ndiff::ArrayX<Scalar>& in, bool inv) {
    ndiff::ArrayX<Scalar> out(in.size());
    Mat8 b;
    for (int c = 0; c < C; ++c)
      for (int by = 0; by < H; by += 8)
        for (int bx = 0; bx < W; bx += 8) {
          const Eigen::Index base = (static_cast<Eigen::Index>(c) * H + by) * W + bx;
          for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) b(i, j) = in[base + i * W + j];
          const Mat8 r = inv ? Mat8(D.transpose() * b * D) : Mat8(D * b * D.transpose());
          for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) out[base + i * W + j] = r(i, j);
        }
    return out;
  };
  const int xid = x.id();
  return x.tape().push(x.shape(), transform(x.value(), inverse), x.requires_grad(),
                       [xid, inverse, transform](Tape<Scalar>& t, const ndiff::ArrayX<Scalar>& g) {
                         t.accumulate(xid, transform(g, !inverse));
                       });
}

namespace detail {

template <typename Scalar>
Var<Scalar> constant_like(Tape<Scalar>& tape, const ndiff::Shape& shape, const ndiff::ArrayX<double>& v) {
  return tape.constant(shape, v.cast<Scalar>());
}

// Per-channel affine colour map on a [3, H, W] value: out_c = sum_k M(c,k) x_k + b_c.
template <typename Scalar>
Var<Scalar> color_affine(const Var<Scalar>& x, const Eigen::Matrix3d& M, const Eigen::Vector3d& b) {
  auto& tape = x.tape();
  const int H = x.dim(1), W = x.dim(2);
  const Eigen::Index P = static_cast<Eigen::Index>(H) * W;
  ndiff::ArrayX<double> m(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m[i * 3 + j] = M(i, j);
  ndiff::ArrayX<double> bias(3 * P);
  for (int c = 0; c < 3; ++c) bias.segment(c * P, P).setConstant(b[c]);
  auto flat = ndiff::reshape(x, ndiff::Shape{3, static_cast<int>(P)});
  auto y = ndiff::matmul(constant_like(tape, {3, 3}, m), flat);
  y = ndiff::add(y, constant_like(tape, {3, static_cast<int>(P)}, bias));
  return ndiff::reshape(y, ndiff::Shape{3, H, W});
}

// Reflect-pads (without edge repetition) a [C, H, W] value to extents that are multiples of 8.
template <typename Scalar>
Var<Scalar> pad_reflect8(const Var<Scalar>& x, int& H, int& W) {
  const int C = x.dim(0);
  H = x.dim(1);
  W = x.dim(2);
  const int Hp = (H + 7) / 8 * 8, Wp = (W + 7) / 8 * 8;
  if (Hp == H && Wp == W) return x;
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<std::size_t>(C) * Hp * Wp);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < Hp; ++y)
      for (int xx = 0; xx < Wp; ++xx)
        idx.push_back((static_cast<Eigen::Index>(c) * H + reflect(y, H)) * W + reflect(xx, W));
  return ndiff::gather(x, ndiff::Shape{C, Hp, Wp}, std::move(idx));
}

template <typename Scalar>
Var<Scalar> crop(const Var<Scalar>& x, int H, int W) {
  const int C = x.dim(0), Hp = x.dim(1), Wp = x.dim(2);
  if (Hp == H && Wp == W) return x;
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<std::size_t>(C) * H * W);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) idx.push_back((static_cast<Eigen::Index>(c) * Hp + y) * Wp + xx);
  return ndiff::gather(x, ndiff::Shape{C, H, W}, std::move(idx));
}

}  // namespace detail

// Lossy JPEG round trip without entropy coding: BT.601 full-range YCbCr,
// level shift, 8x8 DCT, quantization with straight-through rounding,
// dequantization, inverse transform, clamp. No chroma subsampling.
template <typename Scalar>
Var<Scalar> jpeg_sim(const Var<Scalar>& image, int quality) {
  ndiff::detail::require_rank(image.shape(), 3, "jpeg_sim");
  if (image.dim(0) != 3) throw DimensionError("jpeg_sim expects a 3-channel image");
  if (quality < 1 || quality > 100) throw ContractError("jpeg quality must be in [1, 100]");
  auto& tape = image.tape();
  int H = 0, W = 0;
  Var<Scalar> x = detail::pad_reflect8(image, H, W);
  const int Hp = x.dim(1), Wp = x.dim(2);
  Eigen::Matrix3d to_ycc;
  to_ycc << 0.299, 0.587, 0.114, -0.168736, -0.331264, 0.5, 0.5, -0.418688, -0.081312;
  // 255 * ycc(x) + 128 offset on chroma, then the -128 level shift on every channel.
  x = detail::color_affine(x, 255.0 * to_ycc, Eigen::Vector3d(-128.0, 0.0, 0.0));
  x = block_dct(x, false);
  const auto ql = quant_table(quality, false), qc = quant_table(quality, true);
  const Eigen::Index P = static_cast<Eigen::Index>(Hp) * Wp;
  ndiff::ArrayX<double> q(3 * P);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < Hp; ++y)
      for (int xx = 0; xx < Wp; ++xx) q[c * P + y * Wp + xx] = (c == 0 ? ql : qc)[(y % 8) * 8 + (xx % 8)];
  const ndiff::Shape s = x.shape();
  x = ndiff::mul(x, detail::constant_like(tape, s, ndiff::ArrayX<double>(1.0 / q)));
  x = ndiff::round_ste(x);
  x = ndiff::mul(x, detail::constant_like(tape, s, q));
  x = block_dct(x, true);
  Eigen::Matrix3d to_rgb;
  to_rgb << 1.0, 0.0, 1.402, 1.0, -0.344136, -0.714136, 1.0, 1.772, 0.0;
  // rgb = to_rgb * (ycc + (128, 0, 0)) / 255
  x = detail::color_affine(x, to_rgb / 255.0, to_rgb.col(0) * (128.0 / 255.0));
  return ndiff::clamp01(detail::crop(x, H, W));
}

template <typename Scalar>
Var<Scalar> gaussian_blur(const Var<Scalar>& image, double sigma) {
  const auto k = gaussian_kernel7(sigma);
  const int C = image.dim(0);
  ndiff::ArrayX<double> kern(C * 49);
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < 49; ++i) kern[c * 49 + i] = k[static_cast<std::size_t>(i)];
  return ndiff::depthwise_conv2d(image, detail::constant_like(image.tape(), {C, 7, 7}, kern), 3);
}

// Throws ContractError when the intensity lies outside the kind's range.
void check_intensity(const AttackSpec& spec, const AttackRanges& ranges);

// Differentiable attack phi(image) for a [3, H, W] image in [0, 1].
template <typename Scalar>
Var<Scalar> apply(const Var<Scalar>& image, const AttackSpec& spec, const AttackRanges& ranges = {}) {
  ndiff::detail::require_rank(image.shape(), 3, "attack");
  if (image.dim(0) != 3) throw DimensionError("attacks expect a 3-channel image");
  check_intensity(spec, ranges);
  auto& tape = image.tape();
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  const double a = spec.intensity;
  switch (spec.kind) {
    case AttackKind::identity: return image;
    case AttackKind::blur: return gaussian_blur(image, a);
    case AttackKind::noise: {
      Rng rng(Rng::derive_seed(spec.seed, {tag("noise")}));
      ndiff::ArrayX<double> n(image.numel());
      for (Eigen::Index i = 0; i < n.size(); ++i) n[i] = a * rng.normal();
      return ndiff::clamp01(ndiff::add(image, detail::constant_like(tape, image.shape(), n)));
    }
    case AttackKind::brightness:
      return ndiff::clamp01(ndiff::add_scalar(image, static_cast<Scalar>(brightness_shift(spec))));
    case AttackKind::contrast:
      return ndiff::clamp01(ndiff::add_scalar(
          ndiff::mul_scalar(ndiff::add_scalar(image, Scalar(-0.5)), static_cast<Scalar>(a)), Scalar(0.5)));
    case AttackKind::desaturate: {
      const Eigen::Index P = static_cast<Eigen::Index>(H) * W;
      auto flat = ndiff::reshape(image, ndiff::Shape{C, static_cast<int>(P)});
      ndiff::ArrayX<double> wl(3);
      wl << 0.299, 0.587, 0.114;
      auto luma = ndiff::reshape(ndiff::matmul(detail::constant_like(tape, {1, 3}, wl), flat),
                                 ndiff::Shape{static_cast<int>(P)});
      auto out = ndiff::add(ndiff::mul_scalar(flat, static_cast<Scalar>(1.0 - a)),
                            ndiff::mul_scalar(luma, static_cast<Scalar>(a)));
      return ndiff::reshape(out, image.shape());
    }
    case AttackKind::perspective: {
      const auto off = perspective_offsets(spec, H, W);
      // Output pixel p samples the input at H^{-1}(p), where H sends the unit
      // corners to the displaced ones; a rectifier using the same offsets undoes it.
      const Eigen::Matrix3d Hinv = ndiff::homography_from_points(ndiff::displaced_corners(off), ndiff::unit_corners());
      auto grid = tape.constant(ndiff::grid_from_homography<Scalar>(Hinv, H, W));
      return ndiff::grid_sample(image, grid);
    }
    case AttackKind::jpeg: return jpeg_sim(image, effective_quality(a));
  }
  throw ContractError("unknown attack kind");
}

// Convenience: non-differentiable evaluation on a plain tensor.
Tensor<float> apply_tensor(const Tensor<float>& image, const AttackSpec& spec, const AttackRanges& ranges = {});

}  // namespace satmark::attacks
