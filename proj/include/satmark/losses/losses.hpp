#pragma once

#include <cstdint>
#include <vector>

#include "satmark/errors.hpp"
#include "satmark/ndiff/layers.hpp"
#include "satmark/ndiff/ops.hpp"

namespace satmark::losses {

using ndiff::Tape;
using ndiff::Var;

struct LossWeights {
  double mse = 1000.0;
  double perceptual = 0.1;
  double bal = 1.0;
  double message = 10.0;

  void validate() const;
};

template <typename Scalar>
Var<Scalar> mse(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mse: shapes " + ndiff::shape_str(a.shape()) + " and " + ndiff::shape_str(b.shape()));
  return ndiff::mean(ndiff::square(ndiff::sub(a, b)));
}

// mean |I - I'| / (I + 1); the denominator uses the original image I.
template <typename Scalar>
Var<Scalar> bal(const Var<Scalar>& original, const Var<Scalar>& other) {
  if (original.shape() != other.shape())
    throw DimensionError("bal: shapes " + ndiff::shape_str(original.shape()) + " and " +
                         ndiff::shape_str(other.shape()));
  if ((original.value() < Scalar(0)).any()) throw ContractError("bal: original image has negative pixels");
  return ndiff::mean(ndiff::div(ndiff::abs(ndiff::sub(original, other)), ndiff::add_scalar(original, Scalar(1))));
}

// Frozen seeded feature extractor: three stride-2 conv stages with tanh
// (smooth, so the loss has no kinks).
// The distance averages squared differences of channel-normalized stage
// features; global-average-pooled stage features serve as image descriptors.
class PerceptualProxy {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0x5eedfea7u;

  explicit PerceptualProxy(std::uint64_t seed = kDefaultSeed);

  template <typename Scalar>
  std::vector<Var<Scalar>> stages(const Var<Scalar>& image) const {
    std::vector<Var<Scalar>> out;
    Var<Scalar> h = ndiff::add_scalar(image, Scalar(-0.5));
    for (const auto& conv : convs_) {
      h = ndiff::tanh(conv(h));
      out.push_back(h);
    }
    return out;
  }

  template <typename Scalar>
  Var<Scalar> distance(const Var<Scalar>& a, const Var<Scalar>& b) const {
    if (a.shape() != b.shape())
      throw DimensionError("perceptual_proxy: shapes " + ndiff::shape_str(a.shape()) + " and " +
                           ndiff::shape_str(b.shape()));
    auto fa = stages(a), fb = stages(b);
    Var<Scalar> total;
    for (std::size_t s = 0; s < fa.size(); ++s) {
      auto d = mse(ndiff::channel_normalize(fa[s]), ndiff::channel_normalize(fb[s]));
      total = s == 0 ? d : ndiff::add(total, d);
    }
    return ndiff::mul_scalar(total, Scalar(1.0 / static_cast<double>(fa.size())));
  }

  // Concatenated global-average-pooled stage features (descriptor length feature_dim()).
  Eigen::VectorXd features(const ndiff::TensorF& image) const;
  int feature_dim() const;

  const std::vector<ndiff::Conv2d>& convs() const { return convs_; }

 private:
  std::vector<ndiff::Conv2d> convs_;
};

// Shared default instance.
const PerceptualProxy& default_proxy();

template <typename Scalar>
Var<Scalar> perceptual_proxy(const Var<Scalar>& a, const Var<Scalar>& b) {
  return default_proxy().distance(a, b);
}

template <typename Scalar>
struct LossTerms {
  Var<Scalar> total;
  Var<Scalar> image;
  Var<Scalar> message;
};

template <typename Scalar>
Var<Scalar> image_loss(const Var<Scalar>& original, const Var<Scalar>& watermarked, const LossWeights& w) {
  auto& tape = original.tape();
  Var<Scalar> acc = tape.constant(ndiff::Shape{}, ndiff::ArrayX<Scalar>::Zero(1));
  if (w.mse != 0) acc = ndiff::add(acc, ndiff::mul_scalar(mse(original, watermarked), static_cast<Scalar>(w.mse)));
  if (w.perceptual != 0)
    acc = ndiff::add(acc, ndiff::mul_scalar(perceptual_proxy(original, watermarked), static_cast<Scalar>(w.perceptual)));
  if (w.bal != 0) acc = ndiff::add(acc, ndiff::mul_scalar(bal(original, watermarked), static_cast<Scalar>(w.bal)));
  return acc;
}

// message weight * MSE(m, sigmoid(logits)); bits holds the target message as 0/1 values.
template <typename Scalar>
Var<Scalar> message_loss(const Var<Scalar>& bits, const Var<Scalar>& logits, const LossWeights& w) {
  if (bits.numel() != logits.numel()) throw DimensionError("message_loss: bit count differs from logit count");
  return ndiff::mul_scalar(mse(ndiff::sigmoid(logits), bits), static_cast<Scalar>(w.message));
}

template <typename Scalar>
LossTerms<Scalar> total_loss(const Var<Scalar>& original, const Var<Scalar>& watermarked, const Var<Scalar>& bits,
                             const Var<Scalar>& logits, const LossWeights& w) {
  LossTerms<Scalar> t;
  t.image = image_loss(original, watermarked, w);
  t.message = message_loss(bits, logits, w);
  t.total = ndiff::add(t.message, t.image);
  return t;
}

}  // namespace satmark::losses
