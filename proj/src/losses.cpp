#include "satmark/losses/losses.hpp"

#include "satmark/rng.hpp"

namespace satmark::losses {

void LossWeights::validate() const {
  if (mse < 0 || perceptual < 0 || bal < 0 || message < 0) throw ContractError("loss weights must be >= 0");
  if (mse == 0 && perceptual == 0 && bal == 0 && message == 0)
    throw ContractError("at least one loss weight must be positive");
}

PerceptualProxy::PerceptualProxy(std::uint64_t seed) {
  Rng rng(seed);
  convs_.emplace_back(3, 8, 3, 2, rng);
  convs_.emplace_back(8, 16, 3, 2, rng);
  convs_.emplace_back(16, 32, 3, 2, rng);
}

int PerceptualProxy::feature_dim() const {
  int d = 0;
  for (const auto& c : convs_) d += c.weight.dim(0);
  return d;
}

Eigen::VectorXd PerceptualProxy::features(const ndiff::TensorF& image) const {
  ndiff::Tape<float> tape;
  tape.set_grad_enabled(false);
  auto st = stages(tape.constant(image));
  Eigen::VectorXd f(feature_dim());
  Eigen::Index k = 0;
  for (const auto& s : st) {
    auto pooled = ndiff::global_avg_pool(s);
    for (Eigen::Index i = 0; i < pooled.numel(); ++i) f[k++] = pooled.value()[i];
  }
  return f;
}

const PerceptualProxy& default_proxy() {
  static const PerceptualProxy proxy;
  return proxy;
}

}  // namespace satmark::losses
