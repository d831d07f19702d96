#include "satmark/wmnet/wmnet.hpp"

#include <cctype>

#include "satmark/errors.hpp"

namespace satmark::wmnet {

Message::Message(std::vector<std::uint8_t> b) : bits(std::move(b)) {
  for (auto v : bits)
    if (v > 1) throw ContractError("message bits must be 0 or 1");
}

Message Message::random(int l, Rng& rng) {
  if (l < 1) throw ContractError("message length must be >= 1");
  Message m;
  m.bits.resize(static_cast<std::size_t>(l));
  for (auto& b : m.bits) b = static_cast<std::uint8_t>(rng.next_u64() >> 63);
  return m;
}

Message Message::from_hex(const std::string& hex, int l) {
  if (l < 1) throw ContractError("message length must be >= 1");
  const std::size_t digits = static_cast<std::size_t>((l + 3) / 4);
  if (hex.size() != digits)
    throw ContractError("message hex must have " + std::to_string(digits) + " digits for " + std::to_string(l) +
                        " bits, got " + std::to_string(hex.size()));
  Message m;
  m.bits.assign(static_cast<std::size_t>(l), 0);
  for (std::size_t d = 0; d < digits; ++d) {
    const int c = std::tolower(static_cast<unsigned char>(hex[d]));
    int v;
    if (c >= '0' && c <= '9')
      v = c - '0';
    else if (c >= 'a' && c <= 'f')
      v = c - 'a' + 10;
    else
      throw ContractError(std::string("invalid hex digit '") + hex[d] + "'");
    for (int k = 0; k < 4; ++k) {
      const std::size_t bit = d * 4 + static_cast<std::size_t>(k);
      const int value = (v >> (3 - k)) & 1;
      if (bit < m.bits.size())
        m.bits[bit] = static_cast<std::uint8_t>(value);
      else if (value)
        throw ContractError("message hex has bits set beyond length " + std::to_string(l));
    }
  }
  return m;
}

Message Message::complement() const {
  Message c = *this;
  for (auto& b : c.bits) b ^= 1u;
  return c;
}

std::string Message::to_hex() const {
  static const char* kDigits = "0123456789abcdef";
  std::string out;
  for (std::size_t d = 0; d < (bits.size() + 3) / 4; ++d) {
    int v = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t bit = d * 4 + k;
      v = (v << 1) | (bit < bits.size() ? bits[bit] : 0);
    }
    out += kDigits[v];
  }
  return out;
}

void WmConfig::validate() const {
  if (bits < 1 || bits > 4096) throw ContractError("message bits must be in [1, 4096]");
  if (message_channels < 1 || stn_width < 1 || classifier_width < 1)
    throw ContractError("watermark network widths must be positive");
  if (!(stn_range > 0.0 && stn_range < 1.0)) throw ContractError("stn_range must be in (0, 1)");
}

MessageProcessor::MessageProcessor(const WmConfig& cfg, const toygen::Decoder& decoder,
                                   const toygen::GeneratorConfig& gen, Rng& rng)
    : message_channels(cfg.message_channels), latent_size(gen.latent_size) {
  const int plane = cfg.message_channels * gen.latent_size * gen.latent_size;
  msg_proj = ndiff::Linear(cfg.bits, plane, rng);
  // Input conv: decoder weights for the latent channels, fresh weights for the message channels.
  const auto& dw = decoder.in_conv.weight;
  const int out = dw.dim(0), zc = dw.dim(1), k = dw.dim(2);
  const int in = zc + cfg.message_channels;
  in_conv = ndiff::Conv2d(in, out, k, 1, rng);
  for (int o = 0; o < out; ++o)
    for (int c = 0; c < zc; ++c)
      for (int i = 0; i < k * k; ++i)
        in_conv.weight.data[(o * in + c) * k * k + i] = dw.data[(o * zc + c) * k * k + i];
  in_conv.bias = decoder.in_conv.bias;
  block1_a = decoder.block1_a;
  block1_b = decoder.block1_b;
  block2_a = decoder.block2_a;
  block2_b = decoder.block2_b;
  up1 = decoder.up1;
  up2 = decoder.up2;
  for (int s = 0; s < toygen::kDecoderStages; ++s) {
    const int c = decoder.stage_channels(s);
    gates.push_back(ndiff::Conv2d::zeros(c, c, 1));
  }
}

namespace {

template <typename Params, typename Self>
void collect_processor(Self& p, const std::string& prefix, Params& out) {
  p.msg_proj.collect(prefix + ".msg_proj", out);
  p.in_conv.collect(prefix + ".in_conv", out);
  p.block1_a.collect(prefix + ".block1_a", out);
  p.block1_b.collect(prefix + ".block1_b", out);
  p.block2_a.collect(prefix + ".block2_a", out);
  p.block2_b.collect(prefix + ".block2_b", out);
  p.up1.collect(prefix + ".up1", out);
  p.up2.collect(prefix + ".up2", out);
  for (std::size_t s = 0; s < p.gates.size(); ++s) p.gates[s].collect(prefix + ".gate" + std::to_string(s), out);
}

template <typename Params, typename Self>
void collect_extractor(Self& e, const std::string& prefix, Params& out) {
  e.stn_conv1.collect(prefix + ".stn_conv1", out);
  e.stn_conv2.collect(prefix + ".stn_conv2", out);
  e.stn_head.collect(prefix + ".stn_head", out);
  for (std::size_t i = 0; i < e.blocks.size(); ++i) e.blocks[i].collect(prefix + ".block" + std::to_string(i), out);
  e.head.collect(prefix + ".head", out);
}

}  // namespace

void MessageProcessor::collect(const std::string& prefix, ndiff::NamedParams& out) {
  collect_processor(*this, prefix, out);
}
void MessageProcessor::collect(const std::string& prefix, ndiff::ConstNamedParams& out) const {
  collect_processor(*this, prefix, out);
}

Extractor::Extractor(const WmConfig& cfg, Rng& rng) : stn_range(cfg.stn_range) {
  const int s = cfg.stn_width;
  stn_conv1 = ndiff::Conv2d(3, s, 3, 2, rng);
  stn_conv2 = ndiff::Conv2d(s, 2 * s, 3, 2, rng);
  stn_head = ndiff::Linear::zeros(2 * s, 8);
  const int w = cfg.classifier_width;
  blocks.emplace_back(3, w, 3, 2, rng);
  blocks.emplace_back(w, 2 * w, 3, 2, rng);
  blocks.emplace_back(2 * w, 2 * w, 3, 2, rng);
  blocks.emplace_back(2 * w, 2 * w, 3, 2, rng);
  head = ndiff::Linear(2 * w, cfg.bits, rng);
}

void Extractor::collect(const std::string& prefix, ndiff::NamedParams& out) { collect_extractor(*this, prefix, out); }
void Extractor::collect(const std::string& prefix, ndiff::ConstNamedParams& out) const {
  collect_extractor(*this, prefix, out);
}

Message decode_bits(const ndiff::ArrayX<float>& logits) {
  Message m;
  m.bits.resize(static_cast<std::size_t>(logits.size()));
  for (Eigen::Index i = 0; i < logits.size(); ++i) m.bits[static_cast<std::size_t>(i)] = logits[i] > 0.0f ? 1 : 0;
  return m;
}

double bit_accuracy(const Message& a, const Message& b) {
  if (a.size() != b.size() || a.size() == 0) throw ContractError("bit_accuracy: message lengths differ");
  int same = 0;
  for (int i = 0; i < a.size(); ++i) same += a.bits[static_cast<std::size_t>(i)] == b.bits[static_cast<std::size_t>(i)];
  return static_cast<double>(same) / a.size();
}

WatermarkModel::WatermarkModel(const WmConfig& cfg, const toygen::SurrogateModel& surrogate) : cfg_(cfg) {
  cfg_.validate();
  const Rng root(cfg_.seed);
  Rng prng = root.derive({tag("processor")});
  Rng erng = root.derive({tag("extractor")});
  processor_ = MessageProcessor(cfg_, surrogate.decoder(), surrogate.config(), prng);
  extractor_ = Extractor(cfg_, erng);
}

ndiff::NamedParams WatermarkModel::parameters() {
  ndiff::NamedParams out;
  processor_.collect("processor", out);
  extractor_.collect("extractor", out);
  return out;
}

ndiff::ConstNamedParams WatermarkModel::parameters() const {
  ndiff::ConstNamedParams out;
  processor_.collect("processor", out);
  extractor_.collect("extractor", out);
  return out;
}

TensorF WatermarkModel::embed(const toygen::SurrogateModel& surrogate, const TensorF& z, const Message& m) const {
  if (m.size() != cfg_.bits)
    throw DimensionError("embed: message has " + std::to_string(m.size()) + " bits, model expects " +
                         std::to_string(cfg_.bits));
  if (z.shape != surrogate.config().latent_shape()) throw DimensionError("embed: latent shape mismatch");
  Tape<float> tape;
  tape.set_grad_enabled(false);
  return processor_.embed(surrogate.decoder(), tape.constant(z), tape.constant(m.as_signed<float>())).tensor();
}

ndiff::ArrayX<float> WatermarkModel::extract(const TensorF& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("extract: expected a [3, H, W] image");
  Tape<float> tape;
  tape.set_grad_enabled(false);
  return extractor_.logits(tape.constant(image)).value();
}

TensorF WatermarkModel::rectify(const TensorF& image) const {
  Tape<float> tape;
  tape.set_grad_enabled(false);
  auto img = tape.constant(image);
  return stn_warp(img, extractor_.stn_offsets(img)).tensor();
}

}  // namespace satmark::wmnet
