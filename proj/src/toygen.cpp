#include "satmark/toygen/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "satmark/errors.hpp"

namespace satmark::toygen {

using ndiff::ArrayX;
using ndiff::Tape;

void GeneratorConfig::validate() const {
  if (latent_channels <= 0 || latent_size <= 0 || image_channels <= 0 || image_size <= 0 || prompt_count <= 0 ||
      prompt_dim <= 0)
    throw ContractError("generator extents must be positive");
  if (image_channels != 3) throw ContractError("generator images must have 3 channels");
  if (image_size != 4 * latent_size) throw ContractError("image_size must equal 4 * latent_size");
  if (steps < 1) throw ContractError("denoise steps must be >= 1");
  if (!(guidance >= 0.0)) throw ContractError("guidance scale must be >= 0");
  if (!(step_size > 0.0)) throw ContractError("denoise step size must be > 0");
}

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::free: return "free";
    case Provenance::conditional: return "conditional";
    case Provenance::encoded: return "encoded";
  }
  return "unknown";
}

PromptBank::PromptBank(int count, int dim, Rng& rng) : empty_(TensorF::zeros({dim})), dim_(dim) {
  embeddings_.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) embeddings_.push_back(TensorF::normal({dim}, rng));
}

const TensorF& PromptBank::embedding(int id) const {
  if (id < 0 || id >= size())
    throw ContractError("unknown prompt id " + std::to_string(id) + " (bank has " + std::to_string(size()) + ")");
  return embeddings_[static_cast<std::size_t>(id)];
}

Decoder::Decoder(const GeneratorConfig& cfg, Rng& rng) {
  const int b = widths.base, m = widths.mid, t = widths.top;
  in_conv = ndiff::Conv2d(cfg.latent_channels, b, 3, 1, rng);
  block1_a = ndiff::Conv2d(b, b, 3, 1, rng);
  block1_b = ndiff::Conv2d(b, b, 3, 1, rng, 0.7);
  block2_a = ndiff::Conv2d(b, b, 3, 1, rng);
  block2_b = ndiff::Conv2d(b, b, 3, 1, rng, 0.7);
  up1 = ndiff::Conv2d(b, m, 3, 1, rng);
  up2 = ndiff::Conv2d(m, t, 3, 1, rng);
  out_conv = ndiff::Conv2d(t, cfg.image_channels, 3, 1, rng, 0.5);
  for (int c = 0; c < cfg.image_channels; ++c) out_conv.bias[c] = static_cast<float>(rng.uniform(-0.3, 0.3));
}

int Decoder::stage_channels(int stage) const {
  switch (stage) {
    case 0:
    case 1:
    case 2: return widths.base;
    case 3: return widths.mid;
    case 4: return widths.top;
  }
  throw ContractError("decoder stage out of range: " + std::to_string(stage));
}

void Decoder::collect(const std::string& prefix, ndiff::ConstNamedParams& out) const {
  in_conv.collect(prefix + ".in_conv", out);
  block1_a.collect(prefix + ".block1_a", out);
  block1_b.collect(prefix + ".block1_b", out);
  block2_a.collect(prefix + ".block2_a", out);
  block2_b.collect(prefix + ".block2_b", out);
  up1.collect(prefix + ".up1", out);
  up2.collect(prefix + ".up2", out);
  out_conv.collect(prefix + ".out_conv", out);
}

Encoder::Encoder(const GeneratorConfig& cfg, Rng& rng) {
  in_conv = ndiff::Conv2d(cfg.image_channels, 16, 3, 1, rng);
  down1 = ndiff::Conv2d(16, 32, 3, 2, rng);
  down2 = ndiff::Conv2d(32, 32, 3, 2, rng);
  block_a = ndiff::Conv2d(32, 32, 3, 1, rng);
  block_b = ndiff::Conv2d(32, 32, 3, 1, rng, 0.7);
  out_conv = ndiff::Conv2d(32, cfg.latent_channels, 3, 1, rng, 3.0);
}

void Encoder::collect(const std::string& prefix, ndiff::ConstNamedParams& out) const {
  in_conv.collect(prefix + ".in_conv", out);
  down1.collect(prefix + ".down1", out);
  down2.collect(prefix + ".down2", out);
  block_a.collect(prefix + ".block_a", out);
  block_b.collect(prefix + ".block_b", out);
  out_conv.collect(prefix + ".out_conv", out);
}

namespace {

constexpr int kTimeFeatures = 8;

ArrayX<float> time_features(int t, int total) {
  ArrayX<float> f(kTimeFeatures);
  const double s = static_cast<double>(t) / total;
  for (int k = 0; k < kTimeFeatures / 2; ++k) {
    const double a = std::numbers::pi * (k + 1) * s;
    f[2 * k] = static_cast<float>(std::sin(a));
    f[2 * k + 1] = static_cast<float>(std::cos(a));
  }
  return f;
}

}  // namespace

Denoiser::Denoiser(const GeneratorConfig& cfg, Rng& rng) {
  conv_in = ndiff::Conv2d(cfg.latent_channels, hidden, 3, 1, rng);
  conv_out = ndiff::Conv2d(hidden, cfg.latent_channels, 3, 1, rng, 0.4);
  for (int c = 0; c < cfg.latent_channels; ++c) conv_out.bias[c] = static_cast<float>(0.1 * rng.normal());
  time_proj = ndiff::Linear(kTimeFeatures, hidden, rng, 0.3);
  prompt_proj = ndiff::Linear(cfg.prompt_dim, hidden, rng, 0.08);
}

ArrayX<float> Denoiser::predict(const TensorF& z, int t, int total_steps, const TensorF& prompt) const {
  Tape<float> tape;
  tape.set_grad_enabled(false);
  auto zv = tape.constant(z);
  auto tf = tape.constant({kTimeFeatures}, time_features(t, total_steps));
  auto bias = ndiff::add(ndiff::add(ndiff::bind(tape, conv_in.bias), time_proj(tf)), prompt_proj(tape.constant(prompt)));
  auto h = ndiff::tanh(ndiff::conv2d(zv, ndiff::bind(tape, conv_in.weight), bias, 1, conv_in.padding));
  auto g = conv_out(h);
  return static_cast<float>(kappa) * z.data + g.value();
}

void Denoiser::collect(const std::string& prefix, ndiff::ConstNamedParams& out) const {
  conv_in.collect(prefix + ".conv_in", out);
  conv_out.collect(prefix + ".conv_out", out);
  time_proj.collect(prefix + ".time_proj", out);
  prompt_proj.collect(prefix + ".prompt_proj", out);
}

ArrayX<float> guided_combine(const ArrayX<float>& f_uncond, const ArrayX<float>& f_cond, double w) {
  if (w == 1.0) return f_cond;
  return f_uncond + static_cast<float>(w) * (f_cond - f_uncond);
}

SurrogateModel::SurrogateModel(const GeneratorConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const Rng root(cfg_.seed);
  Rng prompt_rng = root.derive({tag("prompts")});
  Rng denoiser_rng = root.derive({tag("denoiser")});
  Rng decoder_rng = root.derive({tag("decoder")});
  Rng encoder_rng = root.derive({tag("encoder")});
  prompts_ = PromptBank(cfg_.prompt_count, cfg_.prompt_dim, prompt_rng);
  denoiser_ = Denoiser(cfg_, denoiser_rng);
  decoder_ = Decoder(cfg_, decoder_rng);
  encoder_ = Encoder(cfg_, encoder_rng);
}

TensorF SurrogateModel::draw_noise(Rng& rng) const { return TensorF::normal(cfg_.latent_shape(), rng); }

const TensorF& SurrogateModel::prompt_embedding(int id) const {
  counters_.prompt_lookups.fetch_add(1, std::memory_order_relaxed);
  return prompts_.embedding(id);
}

ArrayX<float> SurrogateModel::guided_prediction(const TensorF& z, int t, std::optional<int> prompt, double w) const {
  return guided_prediction(z, t, prompt, w, cfg_.steps);
}

ArrayX<float> SurrogateModel::guided_prediction(const TensorF& z, int t, std::optional<int> prompt, double w,
                                                int total_steps) const {
  ArrayX<float> f_uncond = denoiser_.predict(z, t, total_steps, prompts_.empty());
  if (!prompt) return f_uncond;
  ArrayX<float> f_cond = denoiser_.predict(z, t, total_steps, prompt_embedding(*prompt));
  return guided_combine(f_uncond, f_cond, w);
}

LatentSample SurrogateModel::denoise(std::optional<int> prompt, const TensorF& eps, int steps, double w) const {
  if (steps < 1) throw ContractError("denoise steps must be >= 1");
  if (!(w >= 0.0)) throw ContractError("guidance scale must be >= 0");
  if (eps.shape != cfg_.latent_shape())
    throw DimensionError("denoise: noise shape " + ndiff::shape_str(eps.shape) + " != latent shape " +
                         ndiff::shape_str(cfg_.latent_shape()));
  if (prompt) prompts_.embedding(*prompt);  // validate id before any work
  counters_.denoise_calls.fetch_add(1, std::memory_order_relaxed);
  const float eta = static_cast<float>(cfg_.step_size);
  TensorF z = eps;
  for (int t = steps; t >= 1; --t) z.data -= eta * guided_prediction(z, t, prompt, w, steps);
  if (!z.all_finite()) throw NumericError("denoise produced non-finite latent");
  LatentSample s;
  s.z = std::move(z);
  if (prompt) {
    s.provenance = Provenance::conditional;
    s.prompt = *prompt;
    s.guidance = w;
  }
  return s;
}

TensorF SurrogateModel::decode(const TensorF& z) const {
  if (z.shape != cfg_.latent_shape())
    throw DimensionError("decode: latent shape " + ndiff::shape_str(z.shape) + " != " +
                         ndiff::shape_str(cfg_.latent_shape()));
  counters_.decode_calls.fetch_add(1, std::memory_order_relaxed);
  Tape<float> tape;
  tape.set_grad_enabled(false);
  return decoder_.forward(tape.constant(z)).tensor();
}

LatentSample SurrogateModel::encode(const TensorF& image) const {
  if (image.shape != cfg_.image_shape())
    throw DimensionError("encode: image shape " + ndiff::shape_str(image.shape) + " != " +
                         ndiff::shape_str(cfg_.image_shape()));
  counters_.encode_calls.fetch_add(1, std::memory_order_relaxed);
  Tape<float> tape;
  tape.set_grad_enabled(false);
  LatentSample s;
  s.z = encoder_.forward(tape.constant(image)).tensor();
  s.provenance = Provenance::encoded;
  return s;
}

TensorF SurrogateModel::sample_external_image(Rng& rng) const {
  const int C = cfg_.image_channels, S = cfg_.image_size;
  TensorF img(cfg_.image_shape());
  // Smooth background: linear blend between two colors along a random direction.
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform(0.1, 0.9);
    c1[c] = rng.uniform(0.1, 0.9);
  }
  const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double dx = std::cos(ang), dy = std::sin(ang);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double u = ((x + 0.5) / S - 0.5) * dx + ((y + 0.5) / S - 0.5) * dy;
      const double s = std::clamp(u / std::numbers::sqrt2 + 0.5, 0.0, 1.0);
      for (int c = 0; c < C; ++c) img.at(c, y, x) = static_cast<float>((1 - s) * c0[c] + s * c1[c]);
    }
  const int shapes = 1 + static_cast<int>(rng.below(4));
  for (int k = 0; k < shapes; ++k) {
    const bool ellipse = rng.uniform() < 0.5;
    const double cx = rng.uniform(0, S), cy = rng.uniform(0, S);
    const double rx = rng.uniform(2, S / 3.0), ry = rng.uniform(2, S / 3.0);
    double col[3];
    for (double& v : col) v = rng.uniform(0.0, 1.0);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const double ux = (x + 0.5 - cx) / rx, uy = (y + 0.5 - cy) / ry;
        const bool inside = ellipse ? ux * ux + uy * uy <= 1.0 : std::abs(ux) <= 1.0 && std::abs(uy) <= 1.0;
        if (inside)
          for (int c = 0; c < C; ++c) img.at(c, y, x) = static_cast<float>(col[c]);
      }
  }
  for (Eigen::Index i = 0; i < img.numel(); ++i)
    img[i] = std::clamp(img[i] + static_cast<float>(0.02 * rng.normal()), 0.0f, 1.0f);
  return img;
}

std::vector<LatentSample> SurrogateModel::sample_distribution(DistKind kind, int n, Rng& rng, double w) const {
  if (n < 1) throw ContractError("sample_distribution requires n >= 1");
  std::vector<LatentSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    switch (kind) {
      case DistKind::free: out.push_back(denoise(std::nullopt, draw_noise(rng))); break;
      case DistKind::conditional: {
        const int p = static_cast<int>(rng.below(static_cast<std::uint64_t>(prompts_.size())));
        out.push_back(denoise(p, draw_noise(rng), cfg_.steps, w));
        break;
      }
      case DistKind::external: out.push_back(encode(sample_external_image(rng))); break;
    }
  }
  return out;
}

ndiff::ConstNamedParams SurrogateModel::parameters() const {
  ndiff::ConstNamedParams out;
  denoiser_.collect("denoiser", out);
  decoder_.collect("decoder", out);
  encoder_.collect("encoder", out);
  return out;
}

ndiff::ConstNamedParams SurrogateModel::decoder_parameters() const {
  ndiff::ConstNamedParams out;
  decoder_.collect("decoder", out);
  return out;
}

void SurrogateModel::reset_counters() const {
  counters_.encode_calls = 0;
  counters_.prompt_lookups = 0;
  counters_.denoise_calls = 0;
  counters_.decode_calls = 0;
}

}  // namespace satmark::toygen
