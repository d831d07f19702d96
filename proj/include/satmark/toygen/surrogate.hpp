#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "satmark/ndiff/layers.hpp"
#include "satmark/ndiff/ops.hpp"
#include "satmark/rng.hpp"

namespace satmark::toygen {

using ndiff::TensorF;
using ndiff::Var;

struct GeneratorConfig {
  int latent_channels = 4;
  int latent_size = 8;
  int image_channels = 3;
  int image_size = 32;
  int prompt_count = 16;
  int prompt_dim = 32;
  int steps = 30;
  double guidance = 7.5;
  double step_size = 0.1;
  std::uint64_t seed = 20240917;

  ndiff::Shape latent_shape() const { return {latent_channels, latent_size, latent_size}; }
  ndiff::Shape image_shape() const { return {image_channels, image_size, image_size}; }
  // Throws ContractError on invalid settings.
  void validate() const;
};

enum class Provenance { free, conditional, encoded };

const char* provenance_name(Provenance p);

struct LatentSample {
  TensorF z;
  Provenance provenance = Provenance::free;
  int prompt = -1;        // conditional only
  double guidance = 0.0;  // conditional only
};

enum class DistKind { free, conditional, external };

// Seeded prompt embeddings. Prompt ids are 0..size()-1; the empty prompt is
// not part of the bank and embeds to the zero vector.
class PromptBank {
 public:
  PromptBank() = default;
  PromptBank(int count, int dim, Rng& rng);

  int size() const { return static_cast<int>(embeddings_.size()); }
  int dim() const { return dim_; }
  const TensorF& embedding(int id) const;
  const TensorF& empty() const { return empty_; }

 private:
  std::vector<TensorF> embeddings_;
  TensorF empty_;
  int dim_ = 0;
};

// Decoder stage ids at which residuals may be injected into the activations:
// after the input conv, after each residual block, after each upsampling conv.
inline constexpr int kDecoderStages = 5;

template <typename Scalar>
using StageHook = std::function<Var<Scalar>(int stage, const Var<Scalar>& activation)>;

struct DecoderWidths {
  int base = 32;
  int mid = 32;
  int top = 16;
};

struct Decoder {
  DecoderWidths widths;
  ndiff::Conv2d in_conv;
  ndiff::Conv2d block1_a, block1_b, block2_a, block2_b;
  ndiff::Conv2d up1, up2;
  ndiff::Conv2d out_conv;

  Decoder() = default;
  Decoder(const GeneratorConfig& cfg, Rng& rng);

  // Channel count of the activation at each stage.
  int stage_channels(int stage) const;

  template <typename Scalar>
  Var<Scalar> forward(const Var<Scalar>& z, const StageHook<Scalar>* hook = nullptr) const {
    auto inject = [&](int stage, Var<Scalar> h) { return hook ? (*hook)(stage, h) : h; };
    auto act = [](const Var<Scalar>& v) { return ndiff::leaky_relu(v); };
    Var<Scalar> h = inject(0, act(in_conv(z)));
    h = inject(1, ndiff::add(h, ndiff::mul_scalar(block1_b(act(block1_a(h))), Scalar(0.5))));
    h = inject(2, ndiff::add(h, ndiff::mul_scalar(block2_b(act(block2_a(h))), Scalar(0.5))));
    h = inject(3, act(up1(ndiff::upsample_nearest2(h))));
    h = inject(4, act(up2(ndiff::upsample_nearest2(h))));
    return ndiff::sigmoid(out_conv(h));
  }

  void collect(const std::string& prefix, ndiff::ConstNamedParams& out) const;
};

struct Encoder {
  ndiff::Conv2d in_conv, down1, down2, block_a, block_b, out_conv;

  Encoder() = default;
  Encoder(const GeneratorConfig& cfg, Rng& rng);

  template <typename Scalar>
  Var<Scalar> forward(const Var<Scalar>& image) const {
    auto act = [](const Var<Scalar>& v) { return ndiff::leaky_relu(v); };
    Var<Scalar> h = act(in_conv(ndiff::add_scalar(image, Scalar(-0.5))));
    h = act(down1(h));
    h = act(down2(h));
    h = ndiff::add(h, ndiff::mul_scalar(block_b(act(block_a(h))), Scalar(0.5)));
    return out_conv(h);
  }

  void collect(const std::string& prefix, ndiff::ConstNamedParams& out) const;
};

// Noise predictor f(z, t, p) = kappa * z + g(z, t, p).
struct Denoiser {
  int hidden = 32;
  double kappa = 0.3;
  ndiff::Conv2d conv_in, conv_out;
  ndiff::Linear time_proj, prompt_proj;

  Denoiser() = default;
  Denoiser(const GeneratorConfig& cfg, Rng& rng);

  ndiff::ArrayX<float> predict(const TensorF& z, int t, int total_steps, const TensorF& prompt) const;

  void collect(const std::string& prefix, ndiff::ConstNamedParams& out) const;
};

// Guidance combination f_u + w (f_c - f_u); w = 1 returns f_c itself.
ndiff::ArrayX<float> guided_combine(const ndiff::ArrayX<float>& f_uncond, const ndiff::ArrayX<float>& f_cond,
                                    double w);

// Frozen seeded surrogate of a latent diffusion model. Immutable after
// construction apart from the call counters, which are atomic.
class SurrogateModel {
 public:
  struct Counters {
    std::atomic<std::int64_t> encode_calls{0};
    std::atomic<std::int64_t> prompt_lookups{0};
    std::atomic<std::int64_t> denoise_calls{0};
    std::atomic<std::int64_t> decode_calls{0};
  };

  explicit SurrogateModel(const GeneratorConfig& cfg);
  SurrogateModel(const SurrogateModel&) = delete;
  SurrogateModel& operator=(const SurrogateModel&) = delete;

  const GeneratorConfig& config() const { return cfg_; }
  const PromptBank& prompts() const { return prompts_; }
  const Decoder& decoder() const { return decoder_; }
  const Encoder& encoder() const { return encoder_; }
  const Denoiser& denoiser() const { return denoiser_; }

  TensorF draw_noise(Rng& rng) const;

  // Guided noise prediction at step t. No prompt means free generation: a
  // single unconditional evaluation.
  ndiff::ArrayX<float> guided_prediction(const TensorF& z, int t, std::optional<int> prompt, double w) const;
  ndiff::ArrayX<float> guided_prediction(const TensorF& z, int t, std::optional<int> prompt, double w,
                                         int total_steps) const;

  LatentSample denoise(std::optional<int> prompt, const TensorF& eps, int steps, double w) const;
  LatentSample denoise(std::optional<int> prompt, const TensorF& eps) const {
    return denoise(prompt, eps, cfg_.steps, cfg_.guidance);
  }

  TensorF decode(const TensorF& z) const;
  LatentSample encode(const TensorF& image) const;

  TensorF sample_external_image(Rng& rng) const;
  std::vector<LatentSample> sample_distribution(DistKind kind, int n, Rng& rng) const {
    return sample_distribution(kind, n, rng, cfg_.guidance);
  }
  std::vector<LatentSample> sample_distribution(DistKind kind, int n, Rng& rng, double w) const;

  ndiff::ConstNamedParams parameters() const;
  ndiff::ConstNamedParams decoder_parameters() const;

  Counters& counters() const { return counters_; }
  void reset_counters() const;

 private:
  const TensorF& prompt_embedding(int id) const;

  GeneratorConfig cfg_;
  PromptBank prompts_;
  Denoiser denoiser_;
  Decoder decoder_;
  Encoder encoder_;
  mutable Counters counters_;
};

}  // namespace satmark::toygen
