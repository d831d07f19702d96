#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "satmark/attacks/attacks.hpp"
#include "satmark/losses/losses.hpp"
#include "satmark/ndiff/adamw.hpp"
#include "satmark/toygen/surrogate.hpp"
#include "satmark/wmnet/wmnet.hpp"

namespace satmark::train {

enum class TrainMode { sat, external, prompted };

const char* mode_name(TrainMode m);
TrainMode parse_mode(const std::string& s);  // throws ContractError

// How the image-loss weights are brought in: constant, or scaled by
// gamma(step)^2 so the message pathway forms before fidelity dominates.
enum class ImageWarmup { none, gamma_squared };

const char* warmup_name(ImageWarmup w);
ImageWarmup parse_warmup(const std::string& s);

struct TrainConfig {
  TrainMode mode = TrainMode::sat;
  long steps = 2000;
  int batch = 4;
  long budget = 2000;
  bool fresh_draws = false;
  std::uint64_t seed = 1;
  long checkpoint_every = 0;  // 0: final checkpoint only
  long probe_every = 50;
  int probe_size = 16;
  ImageWarmup warmup = ImageWarmup::gamma_squared;
  int threads = 1;  // affects speed only

  wmnet::WmConfig model;
  losses::LossWeights loss;
  ndiff::AdamWConfig adamw;
  attacks::AttackRanges attacks;

  void validate() const;
};

struct LogRecord {
  long step = 0;  // 1-based index of the completed step
  double total = 0;
  double message = 0;
  double image = 0;
  double gamma = 0;
  double image_scale = 1;
  std::vector<attacks::AttackKind> attacks;
  std::optional<double> clean_accuracy;
};

struct Sink {
  std::function<void(const LogRecord&)> log;
  // Called every checkpoint_every steps with the trainer state.
  std::function<void(long step)> checkpoint;
  // Called before a numeric failure propagates.
  std::function<void(long step, const std::string& what)> diagnostic;
};

using NamedTensors = std::vector<std::pair<std::string, ndiff::TensorF>>;

// Training loop. The latent for global sample k, the message and the
// attack of (step, slot) come from counter-based substreams of the seed, so a
// resumed run reproduces an uninterrupted one exactly.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const toygen::SurrogateModel& surrogate);

  const TrainConfig& config() const { return cfg_; }
  long step() const { return step_; }
  wmnet::WatermarkModel& model() { return model_; }
  const wmnet::WatermarkModel& model() const { return model_; }

  // Runs until `until` steps are complete (no-op when already there).
  void run(long until, const Sink& sink = {});
  void run(const Sink& sink = {}) { run(cfg_.steps, sink); }

  // Model parameters, AdamW moments and the step counter.
  NamedTensors state() const;
  void load_state(const NamedTensors& tensors);

  // Latent used for global sample index k (pool or fresh draw per config).
  ndiff::TensorF latent_for(long k) const;
  // Number of distinct latents drawn so far.
  std::size_t distinct_latents() const {
    return cfg_.fresh_draws ? static_cast<std::size_t>(step_ * cfg_.batch) : pool_.size();
  }
  double clean_probe_accuracy() const;

 private:
  struct SampleResult {
    std::vector<ndiff::ArrayX<float>> grads;
    double total = 0, message = 0, image = 0;
    attacks::AttackKind attack = attacks::AttackKind::identity;
  };

  ndiff::TensorF draw_latent(std::uint64_t index) const;
  const ndiff::TensorF& pooled(std::uint64_t index);
  SampleResult sample_gradient(wmnet::WatermarkModel& worker, long step, int slot, const ndiff::TensorF& z,
                               double gamma, const losses::LossWeights& w) const;
  void train_step(const Sink& sink);

  TrainConfig cfg_;
  const toygen::SurrogateModel& surrogate_;
  wmnet::WatermarkModel model_;
  std::vector<ndiff::TensorF*> params_;
  ndiff::AdamW opt_;
  long step_ = 0;
  std::vector<ndiff::TensorF> pool_;
  std::vector<std::uint32_t> perm_;
  long perm_epoch_ = -1;
};

}  // namespace satmark::train
