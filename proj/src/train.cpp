#include "satmark/train/train.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

#include "satmark/errors.hpp"

namespace satmark::train {

using ndiff::ArrayX;
using ndiff::Tape;
using ndiff::TensorF;

const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::sat: return "sat";
    case TrainMode::external: return "external";
    case TrainMode::prompted: return "prompted";
  }
  return "unknown";
}

TrainMode parse_mode(const std::string& s) {
  if (s == "sat") return TrainMode::sat;
  if (s == "external") return TrainMode::external;
  if (s == "prompted") return TrainMode::prompted;
  throw ContractError("unknown training mode '" + s + "' (expected sat, external or prompted)");
}

const char* warmup_name(ImageWarmup w) { return w == ImageWarmup::none ? "none" : "gamma_squared"; }

ImageWarmup parse_warmup(const std::string& s) {
  if (s == "none") return ImageWarmup::none;
  if (s == "gamma_squared") return ImageWarmup::gamma_squared;
  throw ContractError("unknown image warmup '" + s + "' (expected none or gamma_squared)");
}

void TrainConfig::validate() const {
  if (steps < 1) throw ContractError("train steps must be >= 1");
  if (batch < 1) throw ContractError("batch must be >= 1");
  if (budget < 1) throw ContractError("latent budget must be >= 1");
  if (budget > (1L << 31)) throw ContractError("latent budget too large");
  if (checkpoint_every < 0) throw ContractError("checkpoint_every must be >= 0");
  if (probe_every < 1 || probe_size < 1) throw ContractError("probe settings must be >= 1");
  if (threads < 1) throw ContractError("threads must be >= 1");
  if (!(adamw.lr > 0) || !(adamw.beta1 >= 0 && adamw.beta1 < 1) || !(adamw.beta2 >= 0 && adamw.beta2 < 1) ||
      !(adamw.eps > 0) || !(adamw.weight_decay >= 0))
    throw ContractError("invalid AdamW hyperparameters");
  model.validate();
  loss.validate();
  attacks.validate();
}

namespace {

enum Stream : std::uint64_t { kPool = 1, kPerm, kMessage, kAttack, kProbe, kFresh };

std::vector<TensorF*> pointers(const ndiff::NamedParams& named) {
  std::vector<TensorF*> out;
  for (const auto& [name, p] : named) out.push_back(p);
  return out;
}

}  // namespace

Trainer::Trainer(const TrainConfig& cfg, const toygen::SurrogateModel& surrogate)
    : cfg_(cfg), surrogate_(surrogate), model_((cfg.validate(), cfg.model), surrogate) {
  auto named = model_.parameters();
  ndiff::set_requires_grad(named, true);
  params_ = pointers(named);
  opt_ = ndiff::AdamW(params_, cfg_.adamw);
}

TensorF Trainer::draw_latent(std::uint64_t index) const {
  const auto stream = cfg_.fresh_draws ? kFresh : kPool;
  Rng rng(Rng::derive_seed(cfg_.seed, {stream, index}));
  switch (cfg_.mode) {
    case TrainMode::sat: return surrogate_.denoise(std::nullopt, surrogate_.draw_noise(rng)).z;
    case TrainMode::external: return surrogate_.encode(surrogate_.sample_external_image(rng)).z;
    case TrainMode::prompted: {
      const int p = static_cast<int>(rng.below(static_cast<std::uint64_t>(surrogate_.prompts().size())));
      return surrogate_.denoise(p, surrogate_.draw_noise(rng)).z;
    }
  }
  throw ContractError("unknown training mode");
}

const TensorF& Trainer::pooled(std::uint64_t index) {
  if (pool_.empty()) pool_.reserve(static_cast<std::size_t>(std::min<long>(cfg_.budget, 1 << 16)));
  // Pool entries are drawn in index order, so the first `budget` draws fill it.
  while (pool_.size() <= index) pool_.push_back(draw_latent(pool_.size()));
  return pool_[index];
}

TensorF Trainer::latent_for(long k) const {
  if (cfg_.fresh_draws) return draw_latent(static_cast<std::uint64_t>(k));
  const long budget = cfg_.budget;
  const long epoch = k / budget, pos = k % budget;
  std::vector<std::uint32_t> perm(static_cast<std::size_t>(budget));
  std::iota(perm.begin(), perm.end(), 0u);
  Rng rng(Rng::derive_seed(cfg_.seed, {kPerm, static_cast<std::uint64_t>(epoch)}));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  return draw_latent(perm[static_cast<std::size_t>(pos)]);
}

Trainer::SampleResult Trainer::sample_gradient(wmnet::WatermarkModel& worker, long step, int slot, const TensorF& z,
                                               double gamma, const losses::LossWeights& w) const {
  const auto s = static_cast<std::uint64_t>(step), b = static_cast<std::uint64_t>(slot);
  Rng msg_rng(Rng::derive_seed(cfg_.seed, {kMessage, s, b}));
  Rng attack_rng(Rng::derive_seed(cfg_.seed, {kAttack, s, b}));
  const wmnet::Message m = wmnet::Message::random(cfg_.model.bits, msg_rng);
  const attacks::AttackSpec spec = attacks::sample_attack(attack_rng, gamma, cfg_.attacks);

  auto named = worker.parameters();
  for (auto& [name, p] : named) p->grad.reset();

  Tape<float> tape;
  auto zv = tape.constant(z);
  auto original = tape.constant(surrogate_.decode(z));
  auto watermarked = worker.processor().embed(surrogate_.decoder(), zv, tape.constant(m.as_signed<float>()));
  auto attacked = attacks::apply(watermarked, spec, cfg_.attacks);
  auto logits = worker.extractor().logits(attacked);
  auto terms = losses::total_loss(original, watermarked, tape.constant(m.as_tensor<float>()), logits, w);
  tape.backward(ndiff::mul_scalar(terms.total, 1.0f / static_cast<float>(cfg_.batch)));

  SampleResult r;
  r.total = terms.total.item();
  r.message = terms.message.item();
  r.image = terms.image.item();
  r.attack = spec.kind;
  r.grads.reserve(named.size());
  for (auto& [name, p] : named) r.grads.push_back(p->grad ? *p->grad : ArrayX<float>::Zero(p->numel()));
  return r;
}

void Trainer::train_step(const Sink& sink) {
  const long step = step_;
  const double gamma = attacks::schedule_gamma(step, cfg_.steps);
  const double scale = cfg_.warmup == ImageWarmup::gamma_squared ? gamma * gamma : 1.0;
  losses::LossWeights w = cfg_.loss;
  w.mse *= scale;
  w.perceptual *= scale;
  w.bal *= scale;

  const int B = cfg_.batch;
  std::vector<TensorF> latents;
  latents.reserve(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    const long k = step * B + b;
    if (cfg_.fresh_draws) {
      latents.push_back(draw_latent(static_cast<std::uint64_t>(k)));
      continue;
    }
    const long epoch = k / cfg_.budget, pos = k % cfg_.budget;
    if (epoch != perm_epoch_) {
      perm_.resize(static_cast<std::size_t>(cfg_.budget));
      std::iota(perm_.begin(), perm_.end(), 0u);
      Rng rng(Rng::derive_seed(cfg_.seed, {kPerm, static_cast<std::uint64_t>(epoch)}));
      for (std::size_t i = perm_.size(); i > 1; --i) std::swap(perm_[i - 1], perm_[rng.below(i)]);
      perm_epoch_ = epoch;
    }
    latents.push_back(pooled(perm_[static_cast<std::size_t>(pos)]));
  }

  std::vector<SampleResult> results(static_cast<std::size_t>(B));
  const int T = std::min(cfg_.threads, B);
  std::vector<wmnet::WatermarkModel> workers(static_cast<std::size_t>(T), model_);
  auto work = [&](int t) {
    for (int b = t; b < B; b += T)
      results[static_cast<std::size_t>(b)] =
          sample_gradient(workers[static_cast<std::size_t>(t)], step, b, latents[static_cast<std::size_t>(b)], gamma, w);
  };
  if (T == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t)
      pool.emplace_back([&, t] {
        try {
          work(t);
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  // Ordered reduction: identical for any thread count.
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ArrayX<float> g = results[0].grads[i];
    for (int b = 1; b < B; ++b) g += results[static_cast<std::size_t>(b)].grads[i];
    params_[i]->grad = std::move(g);
  }
  LogRecord rec;
  for (const auto& r : results) {
    rec.total += r.total / B;
    rec.message += r.message / B;
    rec.image += r.image / B;
    rec.attacks.push_back(r.attack);
  }
  if (!std::isfinite(rec.total)) throw NumericError("non-finite training loss at step " + std::to_string(step + 1));
  opt_.step();
  opt_.zero_grad();
  ++step_;

  rec.step = step_;
  rec.gamma = gamma;
  rec.image_scale = scale;
  if (step_ % cfg_.probe_every == 0) rec.clean_accuracy = clean_probe_accuracy();
  if (sink.log) sink.log(rec);
  if (sink.checkpoint && cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0 && step_ < cfg_.steps)
    sink.checkpoint(step_);
}

void Trainer::run(long until, const Sink& sink) {
  if (until > cfg_.steps) throw ContractError("cannot train beyond the configured step count");
  while (step_ < until) {
    try {
      train_step(sink);
    } catch (const NumericError& e) {
      if (sink.diagnostic) sink.diagnostic(step_, e.what());
      throw;
    }
  }
}

double Trainer::clean_probe_accuracy() const {
  double acc = 0;
  for (int i = 0; i < cfg_.probe_size; ++i) {
    Rng rng(Rng::derive_seed(cfg_.seed, {kProbe, static_cast<std::uint64_t>(i)}));
    const TensorF z = i < static_cast<int>(pool_.size()) ? pool_[static_cast<std::size_t>(i)]
                                                         : draw_latent(static_cast<std::uint64_t>(i));
    const wmnet::Message m = wmnet::Message::random(cfg_.model.bits, rng);
    acc += wmnet::bit_accuracy(wmnet::decode_bits(model_.extract(model_.embed(surrogate_, z, m))), m);
  }
  return acc / cfg_.probe_size;
}

NamedTensors Trainer::state() const {
  NamedTensors out;
  const auto named = model_.parameters();
  for (const auto& [name, p] : named) {
    TensorF t(p->shape, p->data);
    out.emplace_back(name, std::move(t));
  }
  const auto& m1 = opt_.first_moments();
  const auto& m2 = opt_.second_moments();
  for (std::size_t i = 0; i < named.size(); ++i) out.emplace_back("adamw.m/" + named[i].first, TensorF(named[i].second->shape, m1[i]));
  for (std::size_t i = 0; i < named.size(); ++i) out.emplace_back("adamw.v/" + named[i].first, TensorF(named[i].second->shape, m2[i]));
  TensorF st({1});
  st.data[0] = static_cast<float>(step_);
  out.emplace_back("train.step", std::move(st));
  return out;
}

void Trainer::load_state(const NamedTensors& tensors) {
  auto find = [&](const std::string& name) -> const TensorF& {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw ContractError("checkpoint is missing tensor '" + name + "'");
  };
  auto named = model_.parameters();
  auto& m1 = opt_.first_moments();
  auto& m2 = opt_.second_moments();
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [name, p] = named[i];
    const TensorF& v = find(name);
    const TensorF& a = find("adamw.m/" + name);
    const TensorF& b = find("adamw.v/" + name);
    if (v.shape != p->shape || a.shape != p->shape || b.shape != p->shape)
      throw ContractError("checkpoint tensor '" + name + "' has shape " + ndiff::shape_str(v.shape) + ", expected " +
                          ndiff::shape_str(p->shape));
    p->data = v.data;
    m1[i] = a.data;
    m2[i] = b.data;
  }
  const TensorF& st = find("train.step");
  const long s = static_cast<long>(st.data[0]);
  if (s < 0 || s > cfg_.steps) throw ContractError("checkpoint step " + std::to_string(s) + " outside the configured run");
  step_ = s;
  opt_.set_step_count(s);
  perm_epoch_ = -1;
}

}  // namespace satmark::train
