#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "satmark/attacks/attacks.hpp"
#include "satmark/errors.hpp"
#include "satmark/evalkit/evalkit.hpp"
#include "satmark/io/config.hpp"
#include "satmark/io/io.hpp"
#include "satmark/io/runner.hpp"
#include "satmark/otbound/otbound.hpp"
#include "satmark/train/train.hpp"

using namespace satmark;
using io::Json;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

int fail(int code, const std::string& message) {
  std::cerr << io::dump_line(Json{{"code", code}, {"message", message}}) << std::endl;
  return code;
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty() || out == "-")
    std::cout << text << std::flush;
  else
    io::write_file(out, text);
}

io::RunConfig config_or_default(const std::string& path) {
  return path.empty() ? io::RunConfig{} : io::load_run_config(path);
}

std::optional<std::string> opt(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return s;
}

std::string index_name(long i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06ld", i);
  return buf;
}

toygen::DistKind parse_dist(const std::string& s) {
  if (s == "free") return toygen::DistKind::free;
  if (s == "cond" || s == "conditional") return toygen::DistKind::conditional;
  if (s == "external") return toygen::DistKind::external;
  throw ContractError("unknown distribution '" + s + "' (free, cond, external)");
}

// Parses a comma-separated list of numbers.
std::vector<double> parse_values(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw ContractError("bad sweep value '" + item + "'");
    }
    if (used != item.size()) throw ContractError("bad sweep value '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ContractError("--values is empty");
  return out;
}

std::string csv_number(double v) {
  if (!std::isfinite(v)) return v > 0 ? "inf" : "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string metrics_csv_header() {
  std::string h = "psnr_db,ssim,ffd";
  for (const char* a : evalkit::kReportAccuracies) h += std::string(",acc_") + a;
  return h;
}

std::string metrics_csv_row(const evalkit::MetricsReport& r) {
  std::string s = csv_number(r.psnr_db) + "," + csv_number(r.ssim) + "," + (r.ffd ? csv_number(*r.ffd) : "");
  s += "," + csv_number(r.acc_none);
  for (double a : r.acc_attack) s += "," + csv_number(a);
  s += "," + csv_number(r.acc_adv);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"satmark: watermarking latent generative models by training on the model's own distribution"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "satmark 0.1");

  int threads = 1;
  auto add_threads = [&](CLI::App* sub) {
    sub->add_option("--threads", threads, "worker threads (outputs do not depend on it)")->check(CLI::Range(1, 256));
  };

  // gen-config
  std::string out;
  auto* gen_config = app.add_subcommand("gen-config", "write the fully defaulted run config");
  gen_config->add_option("--out", out, "output path (stdout when omitted)");

  // init
  std::string config_path, ckpt;
  auto* init = app.add_subcommand("init", "write an untrained (identity-at-init) checkpoint");
  init->add_option("--config", config_path, "run config");
  init->add_option("--out", out, "checkpoint path")->required();

  // train
  std::string mode, resume, log_path;
  long until = -1;
  auto* train = app.add_subcommand("train", "train the message processor and extractor");
  train->add_option("--mode", mode, "sat, external or prompted (overrides the config)")
      ->check(CLI::IsMember({"sat", "external", "prompted"}));
  train->add_option("--config", config_path, "run config (defaults when omitted)");
  train->add_option("--out", out, "checkpoint path")->required();
  train->add_option("--resume", resume, "continue from this checkpoint");
  train->add_option("--until", until, "stop after this many completed steps");
  train->add_option("--log", log_path, "line-delimited JSON training log");
  add_threads(train);

  // sample
  std::string dist = "free";
  double guidance = -1;
  long n = -1;
  std::uint64_t seed = 1;
  auto* sample = app.add_subcommand("sample", "draw latents and decode them to images");
  sample->add_option("--dist", dist, "free, cond or external")->check(CLI::IsMember({"free", "cond", "external"}));
  sample->add_option("--guidance", guidance, "guidance scale (config value when omitted)");
  sample->add_option("--n", n, "number of samples")->required()->check(CLI::Range(1L, 1000000L));
  sample->add_option("--out", out, "output directory")->required();
  sample->add_option("--seed", seed, "sampling seed");
  sample->add_option("--config", config_path, "run config");

  // embed
  std::string message_hex, in;
  long index = 0;
  auto* embed = app.add_subcommand("embed", "decode a latent into a watermarked image");
  embed->add_option("--ckpt", ckpt, "checkpoint")->required();
  embed->add_option("--config", config_path, "config (checkpoint sidecar when omitted)");
  embed->add_option("--message-hex", message_hex, "message, bit 0 = most significant bit")->required();
  embed->add_option("--in", in, "latent file written by sample")->required();
  embed->add_option("--index", index, "latent index within the file")->check(CLI::NonNegativeNumber);
  embed->add_option("--out", out, "output PPM")->required();

  // extract
  auto* extract = app.add_subcommand("extract", "decode the message bits from an image");
  extract->add_option("--ckpt", ckpt, "checkpoint")->required();
  extract->add_option("--config", config_path, "config (checkpoint sidecar when omitted)");
  extract->add_option("--in", in, "input PPM")->required();
  extract->add_option("--out", out, "output JSON (stdout when omitted)");

  // attack
  std::string kind;
  double intensity = 0;
  auto* attack = app.add_subcommand("attack", "apply one attack to an image");
  attack->add_option("--kind", kind, "blur, noise, brightness, contrast, desat, perspective, jpeg, identity")
      ->required();
  attack->add_option("--intensity", intensity, "attack intensity in the kind's unit")->required();
  attack->add_option("--in", in, "input PPM")->required();
  attack->add_option("--out", out, "output PPM")->required();
  attack->add_option("--seed", seed, "seed of the attack's own randomness");

  // eval
  auto* eval = app.add_subcommand("eval", "fidelity and robustness report");
  eval->add_option("--ckpt", ckpt, "checkpoint")->required();
  eval->add_option("--config", config_path, "config (checkpoint sidecar when omitted)");
  eval->add_option("--n", n, "images (config eval.n when omitted)")->check(CLI::Range(1L, 100000000L));
  eval->add_option("--seed", seed, "evaluation seed");
  eval->add_option("--out", out, "report JSON (stdout when omitted)");
  add_threads(eval);

  // detect
  double fpr = 1e-5;
  auto* detect = app.add_subcommand("detect", "watermarked vs clean detection");
  detect->add_option("--ckpt", ckpt, "checkpoint")->required();
  detect->add_option("--config", config_path, "config (checkpoint sidecar when omitted)");
  detect->add_option("--n", n, "images per class (default 1000)")->check(CLI::Range(1L, 100000000L));
  detect->add_option("--fpr", fpr, "target false positive rate")->check(CLI::Range(0.0, 1.0));
  detect->add_option("--seed", seed, "seed");
  detect->add_option("--out", out, "report JSON (stdout when omitted)");
  add_threads(detect);

  // identify
  std::int64_t pool = 1000000;
  long users = 1000, per_user = 5;
  auto* identify = app.add_subcommand("identify", "trace images back to users in a key pool");
  identify->add_option("--ckpt", ckpt, "checkpoint")->required();
  identify->add_option("--config", config_path, "config (checkpoint sidecar when omitted)");
  identify->add_option("--pool", pool, "pool size")->check(CLI::Range(std::int64_t{1}, std::int64_t{100000000}));
  identify->add_option("--users", users, "probed users")->check(CLI::PositiveNumber);
  identify->add_option("--per-user", per_user, "images per user")->check(CLI::PositiveNumber);
  identify->add_option("--seed", seed, "seed");
  identify->add_option("--out", out, "report JSON (stdout when omitted)");
  add_threads(identify);

  // distshift
  std::string train_dist = "free", report_path;
  double test_guidance = 7.5;
  auto* distshift = app.add_subcommand("distshift", "W1 between a training and a test latent distribution");
  distshift->add_option("--train", train_dist, "free or external")->check(CLI::IsMember({"free", "external"}));
  distshift->add_option("--test-guidance", test_guidance, "guidance of the conditional test mixture");
  distshift->add_option("--n", n, "atoms per cloud (default 512)")->check(CLI::Range(2L, 100000L));
  distshift->add_option("--seed", seed, "seed");
  distshift->add_option("--config", config_path, "run config");
  distshift->add_option("--out", out, "PCA projection CSV")->required();
  distshift->add_option("--report", report_path, "W1 JSON (stdout when omitted)");

  // bound
  double delta = 0.05;
  long pairs = 2048;
  std::string bound_train;
  auto* bound = app.add_subcommand("bound", "generalization bound report");
  bound->add_option("--ckpt", ckpt, "checkpoint")->required();
  bound->add_option("--config", config_path, "config (checkpoint sidecar when omitted)");
  bound->add_option("--delta", delta, "confidence parameter")->check(CLI::Range(1e-300, 1.0));
  bound->add_option("--n", n, "samples per cloud (default 512)")->check(CLI::Range(64L, 100000L));
  bound->add_option("--pairs", pairs, "Lipschitz pairs")->check(CLI::PositiveNumber);
  bound->add_option("--train", bound_train, "training distribution (follows the training mode when omitted)")
      ->check(CLI::IsMember({"free", "cond", "external"}));
  bound->add_option("--seed", seed, "seed");
  bound->add_option("--out", out, "report JSON (stdout when omitted)");

  // sweep
  std::string axis, values, work = "sweep_work";
  long steps = -1, eval_n = 200;
  auto* sweep = app.add_subcommand("sweep", "ablation sweep: one row per value");
  sweep->add_option("--axis", axis, "bits, guidance, steps or samples")
      ->required()
      ->check(CLI::IsMember({"bits", "guidance", "steps", "samples"}));
  sweep->add_option("--values", values, "comma-separated values")->required();
  sweep->add_option("--config", config_path, "base run config");
  sweep->add_option("--ckpt", ckpt, "trained checkpoint for the guidance and steps axes");
  sweep->add_option("--train-steps", steps, "override train.steps for retrained axes");
  sweep->add_option("--eval-n", eval_n, "images per evaluation")->check(CLI::PositiveNumber);
  sweep->add_option("--seed", seed, "evaluation seed");
  sweep->add_option("--work", work, "directory for per-value checkpoints");
  sweep->add_option("--out", out, "CSV (stdout when omitted)");
  add_threads(sweep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kUsage, e.what());
  }

  try {
    if (*gen_config) {
      emit(io::dump(io::to_json(io::RunConfig{})), out);
    } else if (*init) {
      io::RunConfig cfg = config_or_default(config_path);
      toygen::SurrogateModel surrogate(cfg.generator);
      train::Trainer t(cfg.train, surrogate);
      io::Checkpoint ck;
      ck.config_hash = io::config_hash(cfg);
      ck.tensors = t.state();
      io::write_file(io::sidecar_path(out), io::dump(io::to_json(cfg)));
      io::save_checkpoint(out, ck);
    } else if (*train) {
      io::TrainRequest req;
      if (config_path.empty() && !resume.empty() && std::filesystem::exists(io::sidecar_path(resume)))
        config_path = io::sidecar_path(resume);
      req.config = config_or_default(config_path);
      if (!mode.empty()) req.config.train.mode = train::parse_mode(mode);
      if (train->count("--threads")) req.config.train.threads = threads;
      req.out = out;
      req.resume = opt(resume);
      if (until >= 0) req.until = until;
      req.log_path = log_path.empty() ? req.config.log_path : log_path;
      const auto r = io::run_training(req);
      Json j{{"start_step", r.start_step}, {"final_step", r.final_step}};
      j["first_total"] = r.first_total ? Json(*r.first_total) : Json(nullptr);
      j["last_total"] = r.last_total ? Json(*r.last_total) : Json(nullptr);
      j["clean_accuracy"] = r.last_clean_accuracy ? Json(*r.last_clean_accuracy) : Json(nullptr);
      std::cout << io::dump(j);
    } else if (*sample) {
      io::RunConfig cfg = config_or_default(config_path);
      toygen::SurrogateModel surrogate(cfg.generator);
      const double w = guidance >= 0 ? guidance : cfg.generator.guidance;
      Rng rng(Rng::derive_seed(seed, {tag("cli-sample")}));
      const auto samples = surrogate.sample_distribution(parse_dist(dist), static_cast<int>(n), rng, w);
      std::filesystem::create_directories(out);
      io::Checkpoint dump;
      dump.config_hash = io::config_hash(cfg);
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::string name = index_name(static_cast<long>(i));
        io::write_ppm((std::filesystem::path(out) / (name + ".ppm")).string(), surrogate.decode(samples[i].z));
        dump.tensors.emplace_back("z/" + name, samples[i].z);
      }
      io::save_checkpoint((std::filesystem::path(out) / "latents.satw").string(), dump);
    } else if (*embed) {
      auto lm = io::load_model(ckpt, opt(config_path));
      const io::Checkpoint latents = io::load_checkpoint(in);
      if (index >= static_cast<long>(latents.tensors.size()))
        throw ContractError("--index " + std::to_string(index) + " beyond the " +
                            std::to_string(latents.tensors.size()) + " latents in " + in);
      const auto& z = latents.tensors[static_cast<std::size_t>(index)].second;
      if (z.shape != lm.config.generator.latent_shape())
        throw ParseError(in + ": latent shape " + ndiff::shape_str(z.shape) + " does not match the generator");
      const auto m = wmnet::Message::from_hex(message_hex, lm.config.train.model.bits);
      io::write_ppm(out, lm.model->embed(*lm.surrogate, z, m));
    } else if (*extract) {
      auto lm = io::load_model(ckpt, opt(config_path));
      const auto img = io::read_ppm(in);
      if (img.shape != lm.config.generator.image_shape())
        throw ParseError(in + ": image shape " + ndiff::shape_str(img.shape) + " does not match the generator");
      const auto logits = lm.model->extract(img);
      Json l = Json::array();
      for (Eigen::Index i = 0; i < logits.size(); ++i) l.push_back(static_cast<double>(logits[i]));
      emit(io::dump(Json{{"bits_hex", wmnet::decode_bits(logits).to_hex()}, {"logits", l}}), out);
    } else if (*attack) {
      const auto img = io::read_ppm(in);
      attacks::AttackSpec spec{attacks::parse_kind(kind), intensity, 1.0, seed};
      io::write_ppm(out, attacks::apply_tensor(img, spec));
    } else if (*eval) {
      auto lm = io::load_model(ckpt, opt(config_path));
      evalkit::EvalConfig ec;
      ec.n = n > 0 ? n : lm.config.eval_n;
      ec.seed = eval->count("--seed") ? seed : lm.config.eval_seed;
      ec.threads = threads;
      ec.ranges = lm.config.train.attacks;
      emit(io::dump(io::to_json(evalkit::evaluate(*lm.model, *lm.surrogate, ec))), out);
    } else if (*detect) {
      auto lm = io::load_model(ckpt, opt(config_path));
      emit(io::dump(io::to_json(evalkit::detect(*lm.model, *lm.surrogate, n > 0 ? n : 1000, fpr, seed, threads))),
           out);
    } else if (*identify) {
      auto lm = io::load_model(ckpt, opt(config_path));
      emit(io::dump(io::to_json(
               evalkit::identify_users(*lm.model, *lm.surrogate, pool, users, per_user, seed, threads))),
           out);
    } else if (*distshift) {
      io::RunConfig cfg = config_or_default(config_path);
      toygen::SurrogateModel surrogate(cfg.generator);
      const int atoms = static_cast<int>(n > 0 ? n : 512);
      Rng train_rng(Rng::derive_seed(seed, {tag("distshift-train")}));
      Rng test_rng(Rng::derive_seed(seed, {tag("distshift-test")}));
      const auto a = otbound::latent_cloud(surrogate.sample_distribution(parse_dist(train_dist), atoms, train_rng),
                                           train_dist);
      const auto b = otbound::latent_cloud(
          surrogate.sample_distribution(toygen::DistKind::conditional, atoms, test_rng, test_guidance), "test");
      const auto w = otbound::w1(a, b);
      const auto proj = otbound::pca2({&a, &b});
      std::string csv = "set,x,y\n";
      const char* names[2] = {train_dist.c_str(), "test"};
      for (int s = 0; s < 2; ++s)
        for (Eigen::Index i = 0; i < proj[s].rows(); ++i)
          csv += std::string(names[s]) + "," + csv_number(proj[s](i, 0)) + "," + csv_number(proj[s](i, 1)) + "\n";
      io::write_file(out, csv);
      emit(io::dump(Json{{"train", train_dist},
                         {"test_guidance", test_guidance},
                         {"n", atoms},
                         {"w1", w.w1},
                         {"solver", w.solver},
                         {"approximate", w.approximate}}),
           report_path);
    } else if (*bound) {
      auto lm = io::load_model(ckpt, opt(config_path));
      otbound::BoundConfig bc;
      bc.train = bound_train.empty() ? io::train_distribution(lm.config.train.mode) : parse_dist(bound_train);
      bc.test_guidance = lm.config.generator.guidance;
      bc.delta = delta;
      bc.n = n > 0 ? n : 512;
      bc.pairs = pairs;
      bc.seed = seed;
      bc.loss = lm.config.train.loss;
      emit(io::dump(io::to_json(otbound::generalization_bound(*lm.model, *lm.surrogate, bc))), out);
    } else if (*sweep) {
      const auto vals = parse_values(values);
      io::RunConfig base = config_or_default(config_path);
      if (steps > 0) base.train.steps = steps;
      base.train.threads = threads;
      std::string csv = "axis,value," + metrics_csv_header() + "\n";
      auto evaluate = [&](const wmnet::WatermarkModel& model, const toygen::SurrogateModel& s) {
        evalkit::EvalConfig ec;
        ec.n = eval_n;
        ec.seed = seed;
        ec.threads = threads;
        ec.ranges = base.train.attacks;
        return evalkit::evaluate(model, s, ec);
      };
      if (axis == "bits" || axis == "samples") {
        std::filesystem::create_directories(work);
        for (double v : vals) {
          if (v != std::floor(v) || v < 1) throw ContractError("sweep value " + csv_number(v) + " must be a positive integer");
          io::TrainRequest req;
          req.config = base;
          if (axis == "bits")
            req.config.train.model.bits = static_cast<int>(v);
          else
            req.config.train.budget = static_cast<long>(v);
          req.out = (std::filesystem::path(work) / (axis + "_" + csv_number(v) + ".satw")).string();
          io::run_training(req);
          auto lm = io::load_model(req.out);
          csv += axis + "," + csv_number(v) + "," + metrics_csv_row(evaluate(*lm.model, *lm.surrogate)) + "\n";
        }
      } else {
        if (ckpt.empty()) throw ContractError("--axis " + axis + " needs --ckpt (a trained checkpoint)");
        auto lm = io::load_model(ckpt, opt(config_path));
        for (double v : vals) {
          toygen::GeneratorConfig g = lm.config.generator;
          if (axis == "guidance") {
            g.guidance = v;
          } else {
            if (v != std::floor(v) || v < 1) throw ContractError("sweep value " + csv_number(v) + " must be a positive integer");
            g.steps = static_cast<int>(v);
          }
          // Sampling settings only; the networks are unchanged.
          toygen::SurrogateModel s(g);
          csv += axis + "," + csv_number(v) + "," + metrics_csv_row(evaluate(*lm.model, s)) + "\n";
        }
      }
      emit(csv, out);
    }
  } catch (const NumericError& e) {
    return fail(kNumeric, e.what());
  } catch (const ParseError& e) {
    return fail(kData, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(kData, e.what());
  } catch (const ContractError& e) {
    return fail(kUsage, e.what());
  } catch (const DimensionError& e) {
    return fail(kUsage, e.what());
  } catch (const std::exception& e) {
    return fail(kData, e.what());
  }
  return kOk;
}
