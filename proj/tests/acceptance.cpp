// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// usage: acceptance <path to satmark binary> <work dir>

#include <bit>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "oracles.hpp"
#include "satmark/attacks/attacks.hpp"
#include "satmark/errors.hpp"
#include "satmark/evalkit/evalkit.hpp"
#include "satmark/io/config.hpp"
#include "satmark/io/io.hpp"
#include "satmark/io/runner.hpp"
#include "satmark/losses/losses.hpp"
#include "satmark/ndiff/grad_check.hpp"
#include "satmark/ndiff/homography.hpp"
#include "satmark/ndiff/ops.hpp"
#include "satmark/otbound/otbound.hpp"
#include "satmark/train/train.hpp"

using namespace satmark;
using io::Json;
using ndiff::Shape;
using ndiff::TensorD;
using ndiff::TensorF;
namespace fs = std::filesystem;

namespace {

std::string g_cli;
fs::path g_work;
int g_failures = 0;

std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string path(const std::string& name) { return (g_work / name).string(); }

// Runs the CLI; throws on a nonzero exit.
void cli(const std::string& args) {
  const std::string cmd = "\"" + g_cli + "\" " + args + " > \"" + path("cli_stdout.txt") + "\" 2> \"" +
                          path("cli_stderr.txt") + "\"";
  const int rc = std::system(cmd.c_str());
  if (rc != 0)
    throw std::runtime_error("satmark " + args + " failed (" + std::to_string(rc) + "): " +
                             io::read_file(path("cli_stderr.txt")));
}

Json read_json(const std::string& name) { return Json::parse(io::read_file(path(name))); }

struct Outcome {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("FAILED ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

void criterion(const std::string& name, const std::function<void(Outcome&)>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail += std::string("; exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++g_failures;
  std::cout << (o.pass ? "PASS " : "FAIL ") << name << " [" << fmt(secs, 3) << " s] " << o.detail << std::endl;
}

// ---------------------------------------------------------------- autodiff

TensorD normal_tensor(const Shape& s, Rng& rng, double lo_gap = 0.0, std::vector<double> kinks = {}) {
  TensorD t(s);
  for (auto& v : t.data) {
    for (;;) {
      v = rng.normal();
      bool near = false;
      for (double k : kinks) near |= std::abs(v - k) < lo_gap;
      if (!near) break;
    }
  }
  return t;
}

TensorD uniform_tensor(const Shape& s, Rng& rng, double lo, double hi) {
  TensorD t(s);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// Grid of normalized coordinates whose pixel positions stay 0.05 away from integer lines.
TensorD safe_grid(int Ho, int Wo, int H, int W, Rng& rng) {
  TensorD g({Ho, Wo, 2});
  for (Eigen::Index i = 0; i < g.data.size(); ++i) {
    const int extent = i % 2 == 0 ? W : H;
    const double f = static_cast<double>(rng.below(static_cast<std::uint64_t>(extent + 1))) - 1.0 + rng.uniform(0.05, 0.95);
    g.data[i] = (2.0 * f + 1.0) / extent - 1.0;
  }
  return g;
}

struct GradCase {
  std::string name;
  ndiff::TapeFunction<double> f;
  std::function<std::vector<TensorD>(Rng&)> inputs;
};

using V = std::vector<ndiff::Var<double>>;
using T = ndiff::Tape<double>;

std::vector<GradCase> grad_cases() {
  using namespace ndiff;
  auto normals = [](std::vector<Shape> shapes) {
    return [shapes](Rng& r) {
      std::vector<TensorD> out;
      for (const auto& s : shapes) out.push_back(normal_tensor(s, r));
      return out;
    };
  };
  auto image = [](Shape s) { return [s](Rng& r) { return std::vector<TensorD>{uniform_tensor(s, r, 0.35, 0.65)}; }; };
  // Fixed random weights turn a tensor-valued op into a scalar.
  auto dotw = [](const Var<double>& y, std::uint64_t seed) {
    Rng r(seed);
    TensorD w(y.shape());
    for (auto& v : w.data) v = r.uniform(-1, 1);
    return sum(mul(y, y.tape().constant(w)));
  };
  std::vector<GradCase> c;
  c.push_back({"add", [=](T&, const V& v) { return dotw(add(v[0], v[1]), 1); }, normals({{5}, {5}})});
  c.push_back({"sub", [=](T&, const V& v) { return dotw(sub(v[0], v[1]), 2); }, normals({{5}, {5}})});
  c.push_back({"mul", [=](T&, const V& v) { return dotw(mul(v[0], v[1]), 3); }, normals({{2, 3}, {2, 3}})});
  c.push_back({"div", [=](T&, const V& v) { return dotw(div(v[0], v[1]), 4); },
               [](Rng& r) {
                 TensorD d = uniform_tensor({6}, r, 0.5, 2.0);
                 for (auto& x : d.data) x *= r.below(2) ? 1 : -1;
                 return std::vector<TensorD>{normal_tensor({6}, r), d};
               }});
  c.push_back({"add_scalar", [=](T&, const V& v) { return dotw(add_scalar(v[0], 0.7), 5); }, normals({{4}})});
  c.push_back({"mul_scalar", [=](T&, const V& v) { return dotw(mul_scalar(v[0], -1.3), 6); }, normals({{4}})});
  c.push_back({"neg", [=](T&, const V& v) { return dotw(neg(v[0]), 7); }, normals({{4}})});
  c.push_back({"relu", [=](T&, const V& v) { return dotw(relu(v[0]), 8); },
               [](Rng& r) { return std::vector<TensorD>{normal_tensor({8}, r, 0.01, {0.0})}; }});
  c.push_back({"leaky_relu", [=](T&, const V& v) { return dotw(leaky_relu(v[0]), 9); },
               [](Rng& r) { return std::vector<TensorD>{normal_tensor({8}, r, 0.01, {0.0})}; }});
  c.push_back({"abs", [=](T&, const V& v) { return dotw(abs(v[0]), 10); },
               [](Rng& r) { return std::vector<TensorD>{normal_tensor({8}, r, 0.01, {0.0})}; }});
  c.push_back({"clamp01", [=](T&, const V& v) { return dotw(clamp01(v[0]), 11); },
               [](Rng& r) { return std::vector<TensorD>{normal_tensor({8}, r, 0.01, {0.0, 1.0})}; }});
  c.push_back({"sigmoid", [=](T&, const V& v) { return dotw(sigmoid(v[0]), 12); }, normals({{6}})});
  c.push_back({"tanh", [=](T&, const V& v) { return dotw(tanh(v[0]), 13); }, normals({{6}})});
  c.push_back({"square", [=](T&, const V& v) { return dotw(square(v[0]), 14); }, normals({{6}})});
  c.push_back({"sum", [=](T&, const V& v) { return square(sum(v[0])); }, normals({{2, 3}})});
  c.push_back({"mean", [=](T&, const V& v) { return square(mean(v[0])); }, normals({{2, 3}})});
  c.push_back({"reshape", [=](T&, const V& v) { return dotw(reshape(v[0], Shape{3, 2}), 15); }, normals({{2, 3}})});
  c.push_back({"concat0", [=](T&, const V& v) { return dotw(concat0(v[0], v[1]), 16); }, normals({{2, 3}, {1, 3}})});
  c.push_back({"gather", [=](T&, const V& v) { return dotw(gather(v[0], Shape{4}, {5, 0, 5, 2}), 17); },
               normals({{6}})});
  c.push_back({"matmul", [=](T&, const V& v) { return dotw(matmul(v[0], v[1]), 18); }, normals({{3, 4}, {4, 2}})});
  c.push_back({"linear", [=](T&, const V& v) { return dotw(linear(v[0], v[1], v[2]), 19); },
               normals({{5}, {3, 5}, {3}})});
  c.push_back({"conv2d", [=](T&, const V& v) { return dotw(conv2d(v[0], v[1], v[2], 1, 1), 20); },
               normals({{2, 5, 5}, {3, 2, 3, 3}, {3}})});
  c.push_back({"conv2d stride 2", [=](T&, const V& v) { return dotw(conv2d(v[0], v[1], 2, 1), 21); },
               normals({{2, 6, 6}, {2, 2, 3, 3}})});
  c.push_back({"depthwise_conv2d", [=](T&, const V& v) { return dotw(depthwise_conv2d(v[0], v[1], 1), 22); },
               normals({{2, 4, 4}, {2, 3, 3}})});
  c.push_back({"upsample_nearest2", [=](T&, const V& v) { return dotw(upsample_nearest2(v[0]), 23); },
               normals({{2, 3, 3}})});
  c.push_back({"global_avg_pool", [=](T&, const V& v) { return dotw(global_avg_pool(v[0]), 24); },
               normals({{3, 3, 3}})});
  c.push_back({"channel_normalize", [=](T&, const V& v) { return dotw(channel_normalize(v[0]), 25); },
               normals({{3, 2, 2}})});
  c.push_back({"grid_sample", [=](T&, const V& v) { return dotw(grid_sample(v[0], v[1]), 26); },
               [](Rng& r) { return std::vector<TensorD>{normal_tensor({2, 4, 4}, r), safe_grid(3, 3, 4, 4, r)}; }});
  c.push_back({"homography_grid", [=](T&, const V& v) { return dotw(homography_grid(mul_scalar(v[0], 0.1), 3, 4), 27); },
               normals({{8}})});
  c.push_back({"block_dct", [=](T&, const V& v) { return dotw(attacks::block_dct(v[0], false), 28); },
               normals({{1, 8, 8}})});
  c.push_back({"block_dct inverse", [=](T&, const V& v) { return dotw(attacks::block_dct(v[0], true), 29); },
               normals({{1, 8, 8}})});
  const attacks::AttackRanges ranges;
  for (auto k : {attacks::AttackKind::blur, attacks::AttackKind::noise, attacks::AttackKind::brightness,
                 attacks::AttackKind::contrast, attacks::AttackKind::desaturate, attacks::AttackKind::perspective}) {
    const double a = k == attacks::AttackKind::noise      ? 0.02
                     : k == attacks::AttackKind::contrast ? 1.2
                                                          : 0.5 * (ranges[k].min + ranges[k].max);
    const attacks::AttackSpec spec{k, a, 1.0, 77};
    c.push_back({std::string("attack ") + attacks::kind_name(k),
                 [=](T&, const V& v) { return dotw(attacks::apply(v[0], spec), 30); }, image({3, 8, 8})});
  }
  c.push_back({"mse", [](T&, const V& v) { return losses::mse(v[0], v[1]); }, normals({{3, 4}, {3, 4}})});
  c.push_back({"bal", [](T&, const V& v) { return losses::bal(v[0], v[1]); },
               [](Rng& r) {
                 TensorD a = uniform_tensor({3, 4, 4}, r, 0.1, 0.9), b = a;
                 for (auto& x : b.data) x += (r.below(2) ? 1 : -1) * r.uniform(0.02, 0.2);
                 return std::vector<TensorD>{a, b};
               }});
  c.push_back({"perceptual_proxy", [](T&, const V& v) { return losses::perceptual_proxy(v[0], v[1]); },
               [](Rng& r) {
                 return std::vector<TensorD>{uniform_tensor({3, 16, 16}, r, 0.2, 0.8), uniform_tensor({3, 16, 16}, r, 0.2, 0.8)};
               }});
  c.push_back({"message_loss", [](T& t, const V& v) {
                 Rng r(31);
                 TensorD bits({6});
                 for (auto& x : bits.data) x = static_cast<double>(r.below(2));
                 return losses::message_loss(t.constant(bits), v[0], losses::LossWeights{});
               },
               normals({{6}})});
  return c;
}

void autodiff(Outcome& o) {
  int checked = 0;
  double worst = 0;
  std::string worst_name;
  for (const auto& gc : grad_cases()) {
    for (int s = 0; s < 20; ++s) {
      Rng rng(Rng::derive_seed(2024, {tag(gc.name.c_str()), static_cast<std::uint64_t>(s)}));
      const auto rep = ndiff::grad_check<double>(gc.f, gc.inputs(rng), 1e-3, 1e-3);
      ++checked;
      if (rep.max_rel_error > worst) {
        worst = rep.max_rel_error;
        worst_name = gc.name;
      }
      o.require(rep.passed, gc.name + " seed " + std::to_string(s) + " rel " + fmt(rep.max_rel_error));
    }
  }
  o.note(std::to_string(grad_cases().size()) + " ops x 20 inputs = " + std::to_string(checked) +
         " checks, worst rel error " + fmt(worst) + " (" + worst_name + ")");
}

// ---------------------------------------------------------------- replaceability + smoke training artifacts

io::RunConfig smoke_config() { return io::RunConfig{}; }

void replaceability(Outcome& o) {
  const io::RunConfig cfg = smoke_config();
  io::write_file(path("smoke.json"), io::dump(io::to_json(cfg)));
  toygen::SurrogateModel surrogate(cfg.generator);
  const io::Digest dec0 = io::decoder_digest(surrogate), all0 = io::surrogate_digest(surrogate);

  train::Trainer trainer(cfg.train, surrogate);
  Rng rng(Rng::derive_seed(cfg.train.seed, {tag("acceptance-identity")}));
  int exact = 0;
  for (int i = 0; i < 100; ++i) {
    const TensorF z = surrogate.denoise(std::nullopt, surrogate.draw_noise(rng)).z;
    const auto m = wmnet::Message::random(cfg.train.model.bits, rng);
    const TensorF a = trainer.model().embed(surrogate, z, m), b = surrogate.decode(z);
    exact += a.shape == b.shape && std::memcmp(a.data.data(), b.data.data(), sizeof(float) * a.data.size()) == 0;
  }
  o.require(exact == 100, "identity at init");
  o.note("D_m(z, m) == D(z) bit-exact on " + std::to_string(exact) + "/100 pairs");

  // 500 steps in process; the log and checkpoint continue through the CLI later.
  std::ofstream log(path("sat_resumed.jsonl"), std::ios::trunc);
  train::Sink sink;
  sink.log = [&](const train::LogRecord& r) { log << io::dump_line(io::to_json(r)) << '\n'; };
  trainer.run(500, sink);
  log.close();
  io::Checkpoint ck;
  ck.config_hash = io::config_hash(cfg);
  ck.tensors = trainer.state();
  io::save_checkpoint(path("sat500.satw"), ck);
  io::write_file(io::sidecar_path(path("sat500.satw")), io::dump(io::to_json(cfg)));

  o.require(io::decoder_digest(surrogate) == dec0, "decoder hash unchanged");
  o.require(io::surrogate_digest(surrogate) == all0, "surrogate hash unchanged");
  o.note("decoder sha256 " + io::hex(dec0).substr(0, 16) + "... unchanged after " + std::to_string(trainer.step()) +
         " steps");
}

// Trains the smoke checkpoints through the CLI (resume from 500, direct, external).
void train_artifacts() {
  const auto t0 = std::chrono::steady_clock::now();
  cli("train --config " + path("smoke.json") + " --resume " + path("sat500.satw") + " --out " + path("sat.satw") +
      " --log " + path("sat_resumed.jsonl"));
  cli("train --mode sat --config " + path("smoke.json") + " --out " + path("sat_direct.satw") + " --log " +
      path("sat_direct.jsonl"));
  cli("train --mode external --config " + path("smoke.json") + " --out " + path("ext.satw") + " --log " +
      path("ext.jsonl"));
  cli("eval --ckpt " + path("sat.satw") + " --n 1000 --out " + path("sat_eval.json"));
  cli("eval --ckpt " + path("ext.satw") + " --n 1000 --out " + path("ext_eval.json"));
  cli("distshift --train free --test-guidance 7.5 --n 512 --seed 1 --config " + path("smoke.json") + " --out " +
      path("distshift_free.csv") + " --report " + path("distshift_free.json"));
  cli("distshift --train external --test-guidance 7.5 --n 512 --seed 1 --config " + path("smoke.json") + " --out " +
      path("distshift_external.csv") + " --report " + path("distshift_external.json"));
  cli("bound --ckpt " + path("sat.satw") + " --delta 0.05 --n 512 --out " + path("sat_bound.json"));
  std::cout << "(artifacts: three 2000-step trainings, two evaluations, two W1 runs and a bound in "
            << fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 4) << " s)"
            << std::endl;
}

double first_total(const std::string& log) {
  return Json::parse(log.substr(0, log.find('\n')))["total"].get<double>();
}
double last_total(const std::string& log) {
  const std::string body = log.substr(0, log.size() - 1);
  return Json::parse(body.substr(body.rfind('\n') + 1))["total"].get<double>();
}

void smoke_training(Outcome& o) {
  const Json e = read_json("sat_eval.json");
  const double clean = e["acc_none"], adv = e["acc_adv"], psnr = e["psnr_db"];
  o.require(clean >= 0.99, "clean bit accuracy >= 0.99");
  o.require(adv >= 0.85, "adversarial mean >= 0.85");
  o.require(psnr >= 30.0, "PSNR >= 30 dB");
  const std::string log = io::read_file(path("sat_resumed.jsonl"));
  const long lines = std::count(log.begin(), log.end(), '\n');
  const double l0 = first_total(log), l1 = last_total(log);
  o.require(lines == 2000, "2000 log records");
  o.require(l1 < l0, "final total loss below initial");
  o.note("sat, l=16, 3x32x32, 2000 steps; eval n=1000: clean " + fmt(clean) + ", adv " + fmt(adv) + ", PSNR " +
         fmt(psnr) + " dB; total loss " + fmt(l0) + " -> " + fmt(l1));
}

void distribution_ordering(Outcome& o) {
  const double wf = read_json("distshift_free.json")["w1"], we = read_json("distshift_external.json")["w1"];
  const double ps = read_json("sat_eval.json")["psnr_db"], pe = read_json("ext_eval.json")["psnr_db"];
  o.require(wf < we, "W1(free) < W1(external)");
  o.require(ps >= pe - 0.5, "PSNR(sat) >= PSNR(external) - 0.5");
  o.note("W1 to guided mixture (n=512): free " + fmt(wf) + " vs external " + fmt(we) + "; PSNR sat " + fmt(ps) +
         " vs external " + fmt(pe) + " dB");
}

void bound_check(Outcome& o) {
  const Json b = read_json("sat_bound.json");
  const double risk = b["risk"], dev = b["deviation"], k = b["k_est"], w = b["w1"], bound = b["bound"];
  const double test = b["test_loss_mean"];
  // Identity on the exact values (the JSON carries 9 digits).
  const auto w1e = otbound::W1Estimate{w, "exact", false};
  const auto rep = otbound::assemble_bound(risk, b["g_est"].get<double>(), b["delta"].get<double>(),
                                           b["n"].get<long>(), k, w1e, test);
  o.require(rep.bound == rep.risk + rep.deviation + rep.k_est * rep.w1, "bound identity (exact)");
  o.require(std::abs(bound - (risk + dev + k * w)) <= 1e-7 * std::max(1.0, bound), "reported bound identity");
  const double h = otbound::hoeffding_term(1.0, std::exp(-1.0), 50);
  o.require(std::abs(h - 0.1) <= 1e-12, "hoeffding_term(1, e^-1, 50) = 0.1");
  o.require(test <= bound, "mean test loss <= bound");
  o.note("risk " + fmt(risk) + " + dev " + fmt(dev) + " + K " + fmt(k) + " * W1 " + fmt(w) + " = " + fmt(bound) +
         " >= test " + fmt(test) + " (solver " + b["solver"].get<std::string>() + "); hoeffding " + fmt(h, 15));
}

// ---------------------------------------------------------------- optimal transport

Eigen::MatrixXd gaussian_cloud(Eigen::Index n, Eigen::Index d, Rng& rng, double shift = 0.0) {
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = rng.normal() + shift;
  return m;
}

std::vector<std::vector<double>> rows(const Eigen::MatrixXd& m) {
  std::vector<std::vector<double>> r(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[i][j] = m(i, j);
  return r;
}

void product_identity(Outcome& o) {
  Rng rng(Rng::derive_seed(1, {tag("acceptance-product")}));
  double worst_gap = 0, worst_lp = 0;
  for (int t = 0; t < 50; ++t) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.below(6)), m = 1 + static_cast<Eigen::Index>(rng.below(6));
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng.below(6));
    const otbound::EmpiricalDist zt(gaussian_cloud(n, 3, rng)), zz(gaussian_cloud(m, 3, rng, 0.4));
    Eigen::MatrixXd bits(k, 8);
    for (Eigen::Index i = 0; i < k; ++i)
      for (int j = 0; j < 8; ++j) bits(i, j) = static_cast<double>(rng.below(2));
    const otbound::EmpiricalDist M(bits);
    const auto r = otbound::product_identity_check(zt, zz, M, M);
    worst_gap = std::max(worst_gap, r.gap);
    o.require(r.gap <= 1e-9, "gap instance " + std::to_string(t));
    // Brute-force LPs on both sides.
    Eigen::MatrixXd cz(n, m), cp(n * k, m * k);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < m; ++j) cz(i, j) = (zt.points.row(i) - zz.points.row(j)).norm();
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index a = 0; a < k; ++a)
        for (Eigen::Index j = 0; j < m; ++j)
          for (Eigen::Index b = 0; b < k; ++b)
            cp(i * k + a, j * k + b) = cz(i, j) + (bits.row(a) - bits.row(b)).cwiseAbs().sum();
    const double lp_l = oracle::transport_lp(rows(cp)), lp_r = oracle::transport_lp(rows(cz));
    worst_lp = std::max({worst_lp, std::abs(lp_l - r.lhs), std::abs(lp_r - r.rhs)});
    o.require(std::abs(lp_l - r.lhs) <= 1e-9 && std::abs(lp_r - r.rhs) <= 1e-9, "LP agreement instance " + std::to_string(t));
  }
  o.note("50 instances, sizes <= 6: max |W1(product) - W1(Z)| = " + fmt(worst_gap) + ", max |solver - LP| = " +
         fmt(worst_lp));
}

void transport(Outcome& o) {
  Rng rng(Rng::derive_seed(1, {tag("acceptance-transport")}));
  double worst1d = 0;
  for (int n : {1, 2, 7, 64, 255, 512, 1024}) {
    std::vector<double> a(n), b(n);
    Eigen::MatrixXd ma(n, 1), mb(n, 1);
    for (int i = 0; i < n; ++i) {
      ma(i, 0) = a[i] = rng.normal();
      mb(i, 0) = b[i] = 2.0 * rng.uniform() - 0.3;
    }
    const double ex = otbound::w1_exact(otbound::EmpiricalDist(ma), otbound::EmpiricalDist(mb)).cost;
    const double d = std::abs(ex - oracle::w1_sorted(a, b));
    worst1d = std::max(worst1d, d);
    o.require(d <= 1e-9, "1-d n=" + std::to_string(n));
  }
  double worst_h = 0;
  for (int t = 0; t < 25; ++t) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.below(8));
    const Eigen::MatrixXd a = gaussian_cloud(n, 4, rng), b = gaussian_cloud(n, 4, rng, 0.5);
    const double ex = otbound::w1_exact(otbound::EmpiricalDist(a), otbound::EmpiricalDist(b)).cost;
    const double h = oracle::assignment_hungarian(rows(otbound::euclidean_costs(a, b))) / static_cast<double>(n);
    worst_h = std::max(worst_h, std::abs(ex - h));
    o.require(std::abs(ex - h) <= 1e-9, "Hungarian instance " + std::to_string(t));
  }
  const otbound::EmpiricalDist a(gaussian_cloud(256, 16, rng)), b(gaussian_cloud(256, 16, rng, 0.3));
  const double ex = otbound::w1_exact(a, b).cost;
  const auto sk = otbound::w1_sinkhorn(a, b, 0.005 * otbound::median_pairwise_distance(a, b));
  const double rel = std::abs(sk.cost - ex) / ex;
  o.require(rel <= 0.03, "Sinkhorn within 3%");
  o.note("1-d max err " + fmt(worst1d) + " (n <= 1024); Hungarian max err " + fmt(worst_h) +
         " (25 instances, n <= 8); Sinkhorn n=256 rel err " + fmt(rel) + " (" + std::to_string(sk.iterations) +
         " iterations)");
}

// ---------------------------------------------------------------- attacks

void attack_layer(Outcome& o) {
  using namespace attacks;
  const AttackRanges r;
  Rng rng(Rng::derive_seed(1, {tag("acceptance-attacks")}));
  double lo = 1, hi = 0;
  for (int t = 0; t < 20; ++t) {
    const TensorF img = TensorF::uniform({3, 32, 32}, rng, 0, 1);
    for (AttackKind k : kAllAttacks)
      for (double a : {r[k].min, r[k].max, rng.uniform(r[k].min, r[k].max)}) {
        const TensorF out = apply_tensor(img, AttackSpec{k, a, 1.0, rng.next_u64()});
        lo = std::min(lo, static_cast<double>(out.data.minCoeff()));
        hi = std::max(hi, static_cast<double>(out.data.maxCoeff()));
      }
  }
  o.require(lo >= 0 && hi <= 1, "outputs in [0,1]");
  double ksum = 0;
  for (int i = 0; i <= 100; ++i) {
    double s = 0;
    for (double v : gaussian_kernel7(r.blur.max * i / 100.0)) s += v;
    ksum = std::max(ksum, std::abs(s - 1.0));
  }
  o.require(ksum <= 1e-6, "blur kernels sum to 1");
  double neutral = 0;
  for (int t = 0; t < 20; ++t) {
    const TensorF img = TensorF::uniform({3, 32, 32}, rng, 0, 1);
    for (AttackKind k : {AttackKind::perspective, AttackKind::contrast, AttackKind::desaturate}) {
      const TensorF out = apply_tensor(img, AttackSpec{k, r[k].neutral, 1.0, rng.next_u64()});
      neutral = std::max(neutral, static_cast<double>((out.data - img.data).abs().maxCoeff()));
    }
  }
  o.require(neutral <= 1e-6, "neutral points are identities");
  double dct = 0;
  for (int t = 0; t < 100; ++t) {
    Eigen::Matrix<double, 8, 8> x;
    for (int i = 0; i < 64; ++i) x.data()[i] = rng.uniform(-128, 128);
    dct = std::max(dct, (idct8(dct8(x)) - x).cwiseAbs().maxCoeff());
  }
  o.require(dct <= 1e-5, "idct8(dct8(x)) = x");
  bool monotone = true;
  for (int t = 0; t < 20; ++t) {
    const TensorF img = TensorF::uniform({3, 32, 32}, rng, 0, 1);
    double prev = -1;
    for (double qf = 50; qf >= 1; qf -= 7) {
      const double e = (apply_tensor(img, AttackSpec{AttackKind::jpeg, qf, 1.0, 0}).data - img.data).abs().mean();
      monotone &= e >= prev;
      prev = e;
    }
  }
  o.require(monotone, "JPEG error non-decreasing as QF drops");
  o.note("range [" + fmt(lo) + ", " + fmt(hi) + "]; kernel sum err " + fmt(ksum) + "; neutral err " + fmt(neutral) +
         "; dct round trip err " + fmt(dct) + "; JPEG monotone on 20 images over QF 50..1");
}

// ---------------------------------------------------------------- detection statistics

void detection(Outcome& o) {
  const double f16 = evalkit::binomial_fpr(16, 16);
  o.require(f16 == std::ldexp(1.0, -16), "binomial_fpr(16, 16) == 2^-16");
  const int tau = evalkit::threshold_for_fpr(100, 1e-5);
  const double p = evalkit::binomial_fpr(tau, 100);
  o.require(p <= 1e-5 && evalkit::binomial_fpr(tau - 1, 100) > 1e-5, "threshold is the smallest admissible");
  o.require(std::abs(p - static_cast<double>(oracle::binomial_tail(tau, 100))) <= 1e-12 * p, "tail matches direct sum");
  // Monte Carlo: 10^7 null scores (matched bits of two independent 100-bit words).
  Rng rng(Rng::derive_seed(1, {tag("acceptance-mc")}));
  const long draws = 10000000;
  long hits = 0;
  const std::uint64_t mask = (std::uint64_t{1} << 36) - 1;
  for (long i = 0; i < draws; ++i) {
    const int ones = std::popcount(rng.next_u64()) + std::popcount(rng.next_u64() & mask);
    hits += ones >= tau;
  }
  const double phat = static_cast<double>(hits) / draws, sigma = std::sqrt(p * (1 - p) / draws);
  o.require(std::abs(phat - p) <= 3 * sigma, "Monte Carlo within 3 sigma");
  Rng r2(Rng::derive_seed(1, {tag("acceptance-auc")}));
  double worst = 0;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> pos(1 + r2.below(30)), neg(1 + r2.below(30));
    for (auto& v : pos) v = static_cast<double>(r2.below(12));
    for (auto& v : neg) v = static_cast<double>(r2.below(10));
    worst = std::max(worst, std::abs(evalkit::roc_auc(pos, neg) - oracle::auc_pairs(pos, neg)));
  }
  o.require(worst <= 1e-12, "AUC equals pair counting");
  o.note("tau(100, 1e-5) = " + std::to_string(tau) + ", analytic " + fmt(p) + ", MC " + fmt(phat) + " (" +
         std::to_string(hits) + "/10^7, sigma " + fmt(sigma) + "); AUC max err " + fmt(worst) + " on 50 tied sets");
}

// ---------------------------------------------------------------- identification

void identification(Outcome& o) {
  const int bits = 100;
  const std::int64_t size = 1000000;
  const evalkit::KeyPool pool(size, bits, 20240917);
  Rng rng(Rng::derive_seed(1, {tag("acceptance-identify")}));
  const int queries = 5000;
  int correct = 0;
  double max_query = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (int q = 0; q < queries; ++q) {
    const std::int64_t user = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(size)));
    wmnet::Message m = pool.key(user);
    const int errors = static_cast<int>(rng.below(11));
    for (int e = 0; e < errors; ++e) {
      const auto b = rng.below(bits);
      m.bits[b] ^= 1;  // may flip a bit twice; still <= 10 errors
    }
    const auto tq = std::chrono::steady_clock::now();
    correct += evalkit::identify(m, pool) == user;
    max_query = std::max(max_query, std::chrono::duration<double>(std::chrono::steady_clock::now() - tq).count());
  }
  const double per_query = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / queries;
  o.require(correct == queries, "accuracy 1.0");
  o.require(max_query < 0.5, "scan < 0.5 s/query");
  // Packed scan against unpacked bits on a 1000-key sub-pool.
  std::vector<wmnet::Message> sub;
  std::vector<std::vector<std::uint8_t>> raw;
  for (int i = 0; i < 1000; ++i) {
    sub.push_back(pool.key(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(size)))));
    raw.push_back(sub.back().bits);
  }
  const evalkit::KeyPool small(sub);
  int agree = 0;
  for (int q = 0; q < 1000; ++q) {
    const auto m = wmnet::Message::random(bits, rng);
    agree += static_cast<std::size_t>(evalkit::identify(m, small)) == oracle::nearest_naive(raw, m.bits);
  }
  o.require(agree == 1000, "packed scan equals naive scan");
  o.note("pool 10^6, l=100: " + std::to_string(correct) + "/5000 traced with <= 10 bit errors; mean " +
         fmt(per_query * 1e3, 4) + " ms/query, max " + fmt(max_query * 1e3, 4) + " ms; naive agreement " +
         std::to_string(agree) + "/1000");
}

// ---------------------------------------------------------------- determinism

void determinism(Outcome& o) {
  auto same = [&](const std::string& a, const std::string& b, const std::string& what) {
    o.require(io::read_file(path(a)) == io::read_file(path(b)), what);
  };
  same("sat.satw", "sat_direct.satw", "resumed 500+1500 checkpoint == direct 2000 checkpoint");
  same("sat_resumed.jsonl", "sat_direct.jsonl", "training logs identical");
  // Re-running the direct training from scratch must reproduce it byte for byte.
  cli("train --mode sat --config " + path("smoke.json") + " --out " + path("sat_again.satw"));
  same("sat_direct.satw", "sat_again.satw", "retrained checkpoint identical");
  const std::string ck = path("sat.satw");
  const std::vector<std::pair<std::string, std::string>> reports = {
      {"eval --ckpt " + ck + " --n 200", "json"},
      {"detect --ckpt " + ck + " --n 200 --fpr 1e-5", "json"},
      {"identify --ckpt " + ck + " --pool 20000 --users 40 --per-user 2", "json"},
      {"bound --ckpt " + ck + " --n 64 --pairs 256", "json"},
      {"sweep --axis guidance --values 1,4,7.5 --ckpt " + ck + " --eval-n 10", "csv"},
  };
  int k = 0;
  for (const auto& [args, ext] : reports) {
    const std::string a = "rep" + std::to_string(k) + "_a." + ext, b = "rep" + std::to_string(k) + "_b." + ext;
    cli(args + " --out " + path(a));
    cli(args + " --out " + path(b));
    same(a, b, args.substr(0, args.find(' ')) + " output identical");
    ++k;
  }
  cli("distshift --train external --n 128 --config " + path("smoke.json") + " --out " + path("ds1.csv") +
      " --report " + path("ds1.json"));
  cli("distshift --train external --n 128 --config " + path("smoke.json") + " --out " + path("ds2.csv") +
      " --report " + path("ds2.json"));
  same("ds1.csv", "ds2.csv", "distshift CSV identical");
  same("ds1.json", "ds2.json", "distshift JSON identical");
  // Thread count does not change outputs.
  cli("eval --ckpt " + ck + " --n 200 --threads 3 --out " + path("rep0_threads.json"));
  same("rep0_a.json", "rep0_threads.json", "eval output independent of --threads");
  // Image round trip through the CLI.
  cli("sample --n 2 --out " + path("samples_a") + " --config " + path("smoke.json"));
  cli("sample --n 2 --out " + path("samples_b") + " --config " + path("smoke.json"));
  same("samples_a/latents.satw", "samples_b/latents.satw", "sampled latents identical");
  same("samples_a/000001.ppm", "samples_b/000001.ppm", "sampled images identical");
  for (const char* tagname : {"a", "b"}) {
    const std::string t = tagname;
    cli("embed --ckpt " + ck + " --message-hex 9f3c --in " + path("samples_" + t + "/latents.satw") + " --index 1 --out " +
        path("wm_" + t + ".ppm"));
    cli("attack --kind jpeg --intensity 30 --in " + path("wm_" + t + ".ppm") + " --out " + path("att_" + t + ".ppm"));
    cli("extract --ckpt " + ck + " --in " + path("att_" + t + ".ppm") + " --out " + path("ext_" + t + ".json"));
  }
  same("wm_a.ppm", "wm_b.ppm", "embed identical");
  same("att_a.ppm", "att_b.ppm", "attack identical");
  same("ext_a.json", "ext_b.json", "extract identical");
  const std::string decoded = read_json("ext_a.json")["bits_hex"];
  o.note("checkpoints, logs and " + std::to_string(reports.size() + 6) +
         " report/image outputs byte-identical across reruns; embed 9f3c -> jpeg 30 -> extract " + decoded);
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 3) {
    std::cerr << "usage: acceptance <satmark binary> <work dir>\n";
    return 2;
  }
  g_cli = argv[1];
  g_work = argv[2];
  fs::create_directories(g_work);

  criterion("autodiff-soundness", autodiff);
  criterion("replaceability-identity", replaceability);
  criterion("product-measure-identity", product_identity);
  criterion("transport-correctness", transport);
  criterion("attack-layer", attack_layer);
  criterion("detection-statistics", detection);
  criterion("identification-protocol", identification);

  bool artifacts = true;
  try {
    train_artifacts();
  } catch (const std::exception& e) {
    std::cout << "artifact stage failed: " << e.what() << std::endl;
    artifacts = false;
  }
  auto needs_artifacts = [&](const std::string& name, const std::function<void(Outcome&)>& body) {
    criterion(name, [&](Outcome& o) {
      if (!artifacts) throw std::runtime_error("training artifacts missing");
      body(o);
    });
  };
  needs_artifacts("bound-validity", bound_check);
  needs_artifacts("distribution-ordering", distribution_ordering);
  needs_artifacts("smoke-training", smoke_training);
  needs_artifacts("determinism", determinism);

  std::cout << (g_failures == 0 ? "ALL PASS" : std::to_string(g_failures) + " FAILED") << std::endl;
  return g_failures == 0 ? 0 : 1;
}
