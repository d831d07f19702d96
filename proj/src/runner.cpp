#include "satmark/io/runner.hpp"

#include <fstream>

#include "satmark/errors.hpp"

namespace satmark::io {

std::string sidecar_path(const std::string& checkpoint) { return checkpoint + ".config.json"; }

namespace {

Digest params_digest(const ndiff::ConstNamedParams& params) {
  NamedTensors copy;
  for (const auto& [name, p] : params) copy.emplace_back(name, *p);
  return tensors_digest(copy);
}

}  // namespace

Digest decoder_digest(const toygen::SurrogateModel& s) { return params_digest(s.decoder_parameters()); }
Digest surrogate_digest(const toygen::SurrogateModel& s) { return params_digest(s.parameters()); }

LoadedModel load_model(const std::string& checkpoint, const std::optional<std::string>& config_path) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const std::string cfg_path = config_path ? *config_path : sidecar_path(checkpoint);
  LoadedModel out;
  out.config = load_run_config(cfg_path);
  if (config_hash(out.config) != ck.config_hash)
    throw ParseError("config '" + cfg_path + "' does not match checkpoint '" + checkpoint + "' (hash " +
                     hex(config_hash(out.config)) + " vs " + hex(ck.config_hash) + ")");
  out.surrogate = std::make_unique<toygen::SurrogateModel>(out.config.generator);
  out.model = std::make_unique<wmnet::WatermarkModel>(out.config.train.model, *out.surrogate);
  for (auto& [name, p] : out.model->parameters()) {
    const TensorF& t = ck.get(name);
    if (t.shape != p->shape) throw ParseError("checkpoint tensor '" + name + "' has the wrong shape");
    p->data = t.data;
  }
  out.step = static_cast<long>(ck.get("train.step").data[0]);
  return out;
}

namespace {

void save_state(const train::Trainer& t, const Digest& hash, const std::string& path) {
  Checkpoint ck;
  ck.config_hash = hash;
  ck.tensors = t.state();
  save_checkpoint(path, ck);
}

}  // namespace

TrainOutcome run_training(const TrainRequest& req) {
  const RunConfig& cfg = req.config;
  cfg.validate();
  const Digest hash = config_hash(cfg);
  toygen::SurrogateModel surrogate(cfg.generator);
  train::Trainer trainer(cfg.train, surrogate);

  TrainOutcome out;
  if (req.resume) {
    const Checkpoint ck = load_checkpoint(*req.resume);
    if (ck.config_hash != hash)
      throw ParseError("checkpoint '" + *req.resume + "' was trained with a different config (hash " +
                       hex(ck.config_hash) + ", current " + hex(hash) + ")");
    try {
      trainer.load_state(ck.tensors);
    } catch (const ContractError& e) {
      throw ParseError(*req.resume + ": " + e.what());
    }
  }
  out.start_step = trainer.step();
  const long until = req.until ? *req.until : cfg.train.steps;
  if (until < 0 || until > cfg.train.steps)
    throw ContractError("--until must lie in [0, " + std::to_string(cfg.train.steps) + "]");

  write_file(sidecar_path(req.out), dump(to_json(cfg)));

  std::ofstream log;
  if (!req.log_path.empty()) {
    log.open(req.log_path, req.resume ? std::ios::app : std::ios::trunc);
    if (!log) throw ParseError("cannot write log '" + req.log_path + "'");
  }

  train::Sink sink;
  sink.log = [&](const train::LogRecord& r) {
    if (!out.first_total) out.first_total = r.total;
    out.last_total = r.total;
    if (r.clean_accuracy) out.last_clean_accuracy = r.clean_accuracy;
    if (log.is_open()) log << dump_line(to_json(r)) << '\n';
  };
  sink.checkpoint = [&](long) { save_state(trainer, hash, req.out); };
  sink.diagnostic = [&](long step, const std::string& what) {
    if (log.is_open())
      log << dump_line(Json{{"step", step}, {"error", "numeric"}, {"message", what}}) << '\n' << std::flush;
    save_state(trainer, hash, req.out + ".diag");
  };
  trainer.run(until, sink);
  save_state(trainer, hash, req.out);
  out.final_step = trainer.step();
  return out;
}

Json to_json(const train::LogRecord& r) {
  Json attacks = Json::array();
  for (auto k : r.attacks) attacks.push_back(attacks::kind_name(k));
  Json j{{"step", r.step},   {"total", r.total},       {"message", r.message}, {"image", r.image},
         {"gamma", r.gamma}, {"image_scale", r.image_scale}, {"attacks", attacks}};
  j["clean_accuracy"] = r.clean_accuracy ? Json(*r.clean_accuracy) : Json(nullptr);
  return j;
}

Json to_json(const evalkit::MetricsReport& r) {
  Json j;
  j["psnr_db"] = r.psnr_db;  // +inf (identical images) serializes as null
  j["ssim"] = r.ssim;
  j["ffd"] = r.ffd ? Json(*r.ffd) : Json(nullptr);
  j["acc_none"] = r.acc_none;
  for (std::size_t i = 0; i < r.acc_attack.size(); ++i)
    j[std::string("acc_") + evalkit::kReportAccuracies[i + 1]] = r.acc_attack[i];
  j["acc_adv"] = r.acc_adv;
  j["n"] = r.n;
  return j;
}

Json to_json(const evalkit::DetectReport& r) {
  return Json{{"auc", r.auc},           {"tpr", r.tpr}, {"threshold", r.threshold},
              {"target_fpr", r.target_fpr}, {"bits", r.bits}, {"n", r.n}};
}

Json to_json(const evalkit::IdentifyReport& r) {
  return Json{{"accuracy", r.accuracy}, {"bit_accuracy", r.bit_accuracy}, {"pool", r.pool},
              {"users", r.users},       {"per_user", r.per_user},         {"bits", r.bits}};
}

Json to_json(const otbound::BoundReport& r) {
  return Json{{"risk", r.risk}, {"deviation", r.deviation}, {"k_est", r.k_est},
              {"w1", r.w1},     {"bound", r.bound},         {"test_loss_mean", r.test_loss_mean},
              {"g_est", r.g_est}, {"delta", r.delta},       {"n", r.n},
              {"solver", r.solver}};
}

toygen::DistKind train_distribution(train::TrainMode m) {
  switch (m) {
    case train::TrainMode::sat: return toygen::DistKind::free;
    case train::TrainMode::external: return toygen::DistKind::external;
    case train::TrainMode::prompted: return toygen::DistKind::conditional;
  }
  return toygen::DistKind::free;
}

}  // namespace satmark::io
