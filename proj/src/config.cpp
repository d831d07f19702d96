#include "satmark/io/config.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <set>

#include "satmark/errors.hpp"

namespace satmark::io {

RunConfig::RunConfig() {
  train.model.bits = 16;  // smoke profile
}

void RunConfig::validate() const {
  generator.validate();
  train.validate();
  if (eval_n < 1) throw ContractError("eval.n must be >= 1");
}

Json canonical(const Json& j) {
  if (j.is_number_float()) {
    const double v = j.get<double>();
    if (!std::isfinite(v)) return nullptr;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::strtod(buf, nullptr);
  }
  if (j.is_object()) {
    Json out = Json::object();
    for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = canonical(it.value());
    return out;
  }
  if (j.is_array()) {
    Json out = Json::array();
    for (const auto& v : j) out.push_back(canonical(v));
    return out;
  }
  return j;
}

std::string dump(const Json& j) { return canonical(j).dump(2) + "\n"; }
std::string dump_line(const Json& j) { return canonical(j).dump(); }

namespace {

Json range_json(const attacks::Range& r) { return Json{{"min", r.min}, {"max", r.max}, {"neutral", r.neutral}}; }

Json train_sections(const RunConfig& c, bool with_threads) {
  const auto& t = c.train;
  Json j;
  const auto& g = c.generator;
  j["generator"] = {{"latent_channels", g.latent_channels}, {"latent_size", g.latent_size},
                    {"image_channels", g.image_channels},   {"image_size", g.image_size},
                    {"prompt_count", g.prompt_count},       {"prompt_dim", g.prompt_dim},
                    {"steps", g.steps},                     {"guidance", g.guidance},
                    {"step_size", g.step_size},             {"seed", g.seed}};
  const auto& m = t.model;
  j["model"] = {{"bits", m.bits},
                {"message_channels", m.message_channels},
                {"stn_width", m.stn_width},
                {"classifier_width", m.classifier_width},
                {"stn_range", m.stn_range},
                {"seed", m.seed}};
  j["loss"] = {{"mse", t.loss.mse}, {"perceptual", t.loss.perceptual}, {"bal", t.loss.bal}, {"message", t.loss.message}};
  j["optimizer"] = {{"lr", t.adamw.lr},
                    {"beta1", t.adamw.beta1},
                    {"beta2", t.adamw.beta2},
                    {"eps", t.adamw.eps},
                    {"weight_decay", t.adamw.weight_decay}};
  Json a = Json::object();
  for (auto k : attacks::kAllAttacks) a[attacks::kind_name(k)] = range_json(t.attacks[k]);
  j["attacks"] = a;
  j["train"] = {{"mode", train::mode_name(t.mode)},
                {"steps", t.steps},
                {"batch", t.batch},
                {"budget", t.budget},
                {"fresh_draws", t.fresh_draws},
                {"seed", t.seed},
                {"checkpoint_every", t.checkpoint_every},
                {"probe_every", t.probe_every},
                {"probe_size", t.probe_size},
                {"warmup", train::warmup_name(t.warmup)}};
  if (with_threads) j["train"]["threads"] = t.threads;
  return j;
}

// Reads known keys out of one JSON object and rejects whatever is left.
class Section {
 public:
  Section(const Json& root, const std::string& name) : name_(name) {
    if (!root.contains(name)) return;
    obj_ = &root.at(name);
    if (!obj_->is_object()) throw ParseError("config section '" + name + "' must be an object");
  }
  void finish() const {
    if (!obj_) return;
    for (auto it = obj_->begin(); it != obj_->end(); ++it)
      if (!seen_.count(it.key())) throw ParseError("unknown config key '" + name_ + "." + it.key() + "'");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    const Json& v = obj_->at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ParseError("");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ParseError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned()) throw ParseError("");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ParseError("");
      } else {
        if (!v.is_string()) throw ParseError("");
      }
      out = v.get<T>();
    } catch (const std::exception&) {
      throw ParseError("config key '" + name_ + "." + key + "' has the wrong type");
    }
  }

  void range(const char* key, attacks::Range& r) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) return;
    const Json& v = obj_->at(key);
    if (!v.is_object()) throw ParseError("config key '" + name_ + "." + key + "' must be an object");
    Json wrap = Json::object();
    wrap[key] = v;
    Section s(wrap, key);
    s.name_ = name_ + "." + key;
    s.get("min", r.min);
    s.get("max", r.max);
    s.get("neutral", r.neutral);
    s.finish();
  }

 private:
  std::string name_;
  const Json* obj_ = nullptr;
  std::set<std::string> seen_;
};

}  // namespace

Json to_json(const RunConfig& c) {
  Json j = train_sections(c, true);
  j["eval"] = {{"n", c.eval_n}, {"seed", c.eval_seed}};
  j["outputs"] = {{"log", c.log_path}};
  return j;
}

RunConfig run_config_from_json(const Json& raw) {
  // Values are rounded exactly as they will be written back, so a config and its dump train identically.
  const Json j = canonical(raw);
  if (!j.is_object()) throw ParseError("config must be a JSON object");
  static const std::set<std::string> kSections{"generator", "model", "loss",  "optimizer",
                                               "attacks",   "train", "eval", "outputs"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!kSections.count(it.key())) throw ParseError("unknown config section '" + it.key() + "'");

  RunConfig c;
  auto& t = c.train;
  {
    Section s(j, "generator");
    auto& g = c.generator;
    s.get("latent_channels", g.latent_channels);
    s.get("latent_size", g.latent_size);
    s.get("image_channels", g.image_channels);
    s.get("image_size", g.image_size);
    s.get("prompt_count", g.prompt_count);
    s.get("prompt_dim", g.prompt_dim);
    s.get("steps", g.steps);
    s.get("guidance", g.guidance);
    s.get("step_size", g.step_size);
    s.get("seed", g.seed);
    s.finish();
  }
  {
    Section s(j, "model");
    s.get("bits", t.model.bits);
    s.get("message_channels", t.model.message_channels);
    s.get("stn_width", t.model.stn_width);
    s.get("classifier_width", t.model.classifier_width);
    s.get("stn_range", t.model.stn_range);
    s.get("seed", t.model.seed);
    s.finish();
  }
  {
    Section s(j, "loss");
    s.get("mse", t.loss.mse);
    s.get("perceptual", t.loss.perceptual);
    s.get("bal", t.loss.bal);
    s.get("message", t.loss.message);
    s.finish();
  }
  {
    Section s(j, "optimizer");
    s.get("lr", t.adamw.lr);
    s.get("beta1", t.adamw.beta1);
    s.get("beta2", t.adamw.beta2);
    s.get("eps", t.adamw.eps);
    s.get("weight_decay", t.adamw.weight_decay);
    s.finish();
  }
  {
    Section s(j, "attacks");
    for (auto k : attacks::kAllAttacks) s.range(attacks::kind_name(k), t.attacks[k]);
    s.finish();
  }
  {
    Section s(j, "train");
    std::string mode = train::mode_name(t.mode), warmup = train::warmup_name(t.warmup);
    s.get("mode", mode);
    s.get("steps", t.steps);
    s.get("batch", t.batch);
    s.get("budget", t.budget);
    s.get("fresh_draws", t.fresh_draws);
    s.get("seed", t.seed);
    s.get("checkpoint_every", t.checkpoint_every);
    s.get("probe_every", t.probe_every);
    s.get("probe_size", t.probe_size);
    s.get("warmup", warmup);
    s.get("threads", t.threads);
    t.mode = train::parse_mode(mode);
    t.warmup = train::parse_warmup(warmup);
    s.finish();
  }
  {
    Section s(j, "eval");
    s.get("n", c.eval_n);
    s.get("seed", c.eval_seed);
    s.finish();
  }
  {
    Section s(j, "outputs");
    s.get("log", c.log_path);
    s.finish();
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  Json j;
  const std::string text = read_file(path);
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ParseError(path + ": invalid JSON: " + e.what(), static_cast<long long>(e.byte));
  }
  try {
    return run_config_from_json(j);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  } catch (const ContractError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

std::string hashed_text(const RunConfig& c) { return canonical(train_sections(c, false)).dump(); }

Digest config_hash(const RunConfig& c) { return sha256(hashed_text(c)); }

}  // namespace satmark::io
