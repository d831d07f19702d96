#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "satmark/ndiff/homography.hpp"
#include "satmark/ndiff/layers.hpp"
#include "satmark/ndiff/ops.hpp"
#include "satmark/rng.hpp"
#include "satmark/toygen/surrogate.hpp"

namespace satmark::wmnet {

using ndiff::Tape;
using ndiff::TensorF;
using ndiff::Var;

struct Message {
  std::vector<std::uint8_t> bits;

  Message() = default;
  explicit Message(std::vector<std::uint8_t> b);  // throws ContractError on non-binary entries

  static Message random(int l, Rng& rng);
  static Message from_hex(const std::string& hex, int l);  // bit 0 is the most significant bit

  int size() const { return static_cast<int>(bits.size()); }
  Message complement() const;
  std::string to_hex() const;
  // 0/1 values as a tensor, and the +-1 encoding fed to the processor.
  template <typename Scalar>
  ndiff::Tensor<Scalar> as_tensor() const {
    ndiff::Tensor<Scalar> t(ndiff::Shape{size()});
    for (int i = 0; i < size(); ++i) t.data[i] = static_cast<Scalar>(bits[static_cast<std::size_t>(i)]);
    return t;
  }
  template <typename Scalar>
  ndiff::Tensor<Scalar> as_signed() const {
    ndiff::Tensor<Scalar> t(ndiff::Shape{size()});
    for (int i = 0; i < size(); ++i) t.data[i] = bits[static_cast<std::size_t>(i)] ? Scalar(1) : Scalar(-1);
    return t;
  }

  bool operator==(const Message&) const = default;
};

struct WmConfig {
  int bits = 100;
  int message_channels = 4;
  int stn_width = 8;
  int classifier_width = 32;
  double stn_range = 0.5;  // max |offset| in normalized units, i.e. 0.25 of the image extent
  std::uint64_t seed = 7;

  void validate() const;
};

// Residual message branch over the frozen decoder. Branch layers are clones of
// the decoder's input conv, residual blocks and upsampling convs; the message
// enters once, as extra channels at the branch input. Each stage feeds a
// zero-initialized 1x1 gate whose output is added to the decoder activation.
class MessageProcessor {
 public:
  MessageProcessor() = default;
  MessageProcessor(const WmConfig& cfg, const toygen::Decoder& decoder, const toygen::GeneratorConfig& gen, Rng& rng);

  // I_w = D(z) with gate residuals injected at every decoder stage.
  template <typename Scalar>
  Var<Scalar> embed(const toygen::Decoder& decoder, const Var<Scalar>& z, const Var<Scalar>& signed_bits) {
    return embed_impl<Scalar>(*this, decoder, z, signed_bits);
  }
  template <typename Scalar>
  Var<Scalar> embed(const toygen::Decoder& decoder, const Var<Scalar>& z, const Var<Scalar>& signed_bits) const {
    return embed_impl<Scalar>(*this, decoder, z, signed_bits);
  }

  void collect(const std::string& prefix, ndiff::NamedParams& out);
  void collect(const std::string& prefix, ndiff::ConstNamedParams& out) const;

  ndiff::Linear msg_proj;
  ndiff::Conv2d in_conv, block1_a, block1_b, block2_a, block2_b, up1, up2;
  std::vector<ndiff::Conv2d> gates;
  int message_channels = 4;
  int latent_size = 8;

 private:
  template <typename Scalar, typename Self>
  static Var<Scalar> embed_impl(Self& self, const toygen::Decoder& decoder, const Var<Scalar>& z,
                                const Var<Scalar>& signed_bits) {
    auto act = [](const Var<Scalar>& v) { return ndiff::leaky_relu(v); };
    const int mc = self.message_channels, s = self.latent_size;
    auto m = ndiff::reshape(self.msg_proj(signed_bits), ndiff::Shape{mc, s, s});
    std::vector<Var<Scalar>> branch;
    Var<Scalar> b = act(self.in_conv(ndiff::concat0(z, m)));
    branch.push_back(b);
    b = ndiff::add(b, ndiff::mul_scalar(self.block1_b(act(self.block1_a(b))), Scalar(0.5)));
    branch.push_back(b);
    b = ndiff::add(b, ndiff::mul_scalar(self.block2_b(act(self.block2_a(b))), Scalar(0.5)));
    branch.push_back(b);
    b = act(self.up1(ndiff::upsample_nearest2(b)));
    branch.push_back(b);
    b = act(self.up2(ndiff::upsample_nearest2(b)));
    branch.push_back(b);
    toygen::StageHook<Scalar> hook = [&](int stage, const Var<Scalar>& h) {
      return ndiff::add(h, self.gates[static_cast<std::size_t>(stage)](branch[static_cast<std::size_t>(stage)]));
    };
    return decoder.forward(z, &hook);
  }
};

// Spatial transformer front end followed by a strided conv classifier.
class Extractor {
 public:
  Extractor() = default;
  Extractor(const WmConfig& cfg, Rng& rng);

  // Corner offsets predicted for an image, each in (-stn_range, stn_range).
  template <typename Scalar>
  Var<Scalar> stn_offsets(const Var<Scalar>& image) {
    return stn_offsets_impl<Scalar>(*this, image);
  }
  template <typename Scalar>
  Var<Scalar> stn_offsets(const Var<Scalar>& image) const {
    return stn_offsets_impl<Scalar>(*this, image);
  }

  template <typename Scalar>
  Var<Scalar> logits(const Var<Scalar>& image) {
    return logits_impl<Scalar>(*this, image);
  }
  template <typename Scalar>
  Var<Scalar> logits(const Var<Scalar>& image) const {
    return logits_impl<Scalar>(*this, image);
  }

  void collect(const std::string& prefix, ndiff::NamedParams& out);
  void collect(const std::string& prefix, ndiff::ConstNamedParams& out) const;

  ndiff::Conv2d stn_conv1, stn_conv2;
  ndiff::Linear stn_head;
  std::vector<ndiff::Conv2d> blocks;
  ndiff::Linear head;
  double stn_range = 0.5;

 private:
  template <typename Scalar, typename Self>
  static Var<Scalar> stn_offsets_impl(Self& self, const Var<Scalar>& image) {
    auto h = ndiff::leaky_relu(self.stn_conv1(ndiff::add_scalar(image, Scalar(-0.5))));
    h = ndiff::leaky_relu(self.stn_conv2(h));
    auto raw = self.stn_head(ndiff::global_avg_pool(h));
    return ndiff::mul_scalar(ndiff::tanh(raw), static_cast<Scalar>(self.stn_range));
  }

  template <typename Scalar, typename Self>
  static Var<Scalar> logits_impl(Self& self, const Var<Scalar>& image) {
    auto offsets = stn_offsets_impl<Scalar>(self, image);
    auto grid = ndiff::homography_grid(offsets, image.dim(1), image.dim(2));
    Var<Scalar> h = ndiff::add_scalar(ndiff::grid_sample(image, grid), Scalar(-0.5));
    for (auto& conv : self.blocks) h = ndiff::leaky_relu(conv(h));
    return self.head(ndiff::global_avg_pool(h));
  }
};

// Rectifies an image with a homography given by 8 corner offsets.
template <typename Scalar>
Var<Scalar> stn_warp(const Var<Scalar>& image, const Var<Scalar>& offsets) {
  return ndiff::grid_sample(image, ndiff::homography_grid(offsets, image.dim(1), image.dim(2)));
}

Message decode_bits(const ndiff::ArrayX<float>& logits);
double bit_accuracy(const Message& a, const Message& b);

// Trainable watermark model: message processor + extractor.
class WatermarkModel {
 public:
  WatermarkModel(const WmConfig& cfg, const toygen::SurrogateModel& surrogate);

  const WmConfig& config() const { return cfg_; }
  MessageProcessor& processor() { return processor_; }
  const MessageProcessor& processor() const { return processor_; }
  Extractor& extractor() { return extractor_; }
  const Extractor& extractor() const { return extractor_; }

  ndiff::NamedParams parameters();
  ndiff::ConstNamedParams parameters() const;

  // Plain evaluation helpers (no gradients).
  TensorF embed(const toygen::SurrogateModel& surrogate, const TensorF& z, const Message& m) const;
  ndiff::ArrayX<float> extract(const TensorF& image) const;
  TensorF rectify(const TensorF& image) const;

 private:
  WmConfig cfg_;
  MessageProcessor processor_;
  Extractor extractor_;
};

}  // namespace satmark::wmnet
