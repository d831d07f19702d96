#include "satmark/otbound/otbound.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "satmark/errors.hpp"

namespace satmark::otbound {

using ndiff::TensorF;

EmpiricalDist::EmpiricalDist(Eigen::MatrixXd p, std::string l) : points(std::move(p)), label(std::move(l)) {
  if (points.rows() < 1 || points.cols() < 1) throw ContractError("empirical distribution needs atoms of dimension >= 1");
  if (!points.allFinite()) throw NumericError("empirical distribution '" + label + "' has non-finite entries");
}

EmpiricalDist latent_cloud(const std::vector<toygen::LatentSample>& samples, std::string label) {
  if (samples.empty()) throw ContractError("latent_cloud: no samples");
  const Eigen::Index d = samples.front().z.numel();
  Eigen::MatrixXd p(static_cast<Eigen::Index>(samples.size()), d);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].z.numel() != d) throw DimensionError("latent_cloud: latent sizes differ");
    p.row(static_cast<Eigen::Index>(i)) = samples[i].z.data.cast<double>().matrix().transpose();
  }
  return EmpiricalDist(std::move(p), std::move(label));
}

Eigen::MatrixXd euclidean_costs(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) throw DimensionError("cost matrix: point dimensions differ");
  Eigen::MatrixXd c(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j)
    for (Eigen::Index i = 0; i < a.rows(); ++i) c(i, j) = (a.row(i) - b.row(j)).norm();
  return c;
}

TransportPlan transport_exact(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows()), m = static_cast<int>(cost.cols());
  if (n < 1 || m < 1) throw ContractError("transport: empty marginal");
  if (!cost.allFinite()) throw NumericError("transport: non-finite costs");
  const int g = std::gcd(n, m);
  const int supply = m / g, demand = n / g;
  const int V = n + m;  // rows 0..n-1, columns n..n+m-1
  constexpr double inf = std::numeric_limits<double>::infinity();

  std::vector<int> flow(static_cast<std::size_t>(n) * m, 0);
  std::vector<std::vector<int>> col_rows(static_cast<std::size_t>(m));  // rows with positive flow into column j
  std::vector<int> left(static_cast<std::size_t>(n), supply), need(static_cast<std::size_t>(m), demand);
  std::vector<double> pot(static_cast<std::size_t>(V), 0.0), dist(static_cast<std::size_t>(V));
  std::vector<int> parent(static_cast<std::size_t>(V));
  std::vector<char> done(static_cast<std::size_t>(V));
  long remaining = static_cast<long>(n) * supply;

  auto F = [&](int i, int j) -> int& { return flow[static_cast<std::size_t>(i) * m + j]; };

  while (remaining > 0) {
    std::fill(dist.begin(), dist.end(), inf);
    std::fill(done.begin(), done.end(), 0);
    std::fill(parent.begin(), parent.end(), -1);
    for (int i = 0; i < n; ++i)
      if (left[static_cast<std::size_t>(i)] > 0) dist[static_cast<std::size_t>(i)] = 0.0;
    int target = -1;
    double reach = inf;
    for (;;) {
      int u = -1;
      double best = inf;
      for (int v = 0; v < V; ++v)
        if (!done[static_cast<std::size_t>(v)] && dist[static_cast<std::size_t>(v)] < best)
          best = dist[static_cast<std::size_t>(v)], u = v;
      if (u < 0) throw NumericError("transport: no augmenting path");
      done[static_cast<std::size_t>(u)] = 1;
      if (u >= n && need[static_cast<std::size_t>(u - n)] > 0) {
        target = u;
        reach = best;
        break;
      }
      if (u < n) {
        const double base = best + pot[static_cast<std::size_t>(u)];
        for (int j = 0; j < m; ++j) {
          const int v = n + j;
          if (done[static_cast<std::size_t>(v)]) continue;
          const double nd = base + cost(u, j) - pot[static_cast<std::size_t>(v)];
          if (nd < dist[static_cast<std::size_t>(v)]) dist[static_cast<std::size_t>(v)] = nd, parent[static_cast<std::size_t>(v)] = u;
        }
      } else {
        const int j = u - n;
        const double base = best + pot[static_cast<std::size_t>(u)];
        for (int i : col_rows[static_cast<std::size_t>(j)]) {
          if (done[static_cast<std::size_t>(i)]) continue;
          const double nd = base - cost(i, j) - pot[static_cast<std::size_t>(i)];
          if (nd < dist[static_cast<std::size_t>(i)]) dist[static_cast<std::size_t>(i)] = nd, parent[static_cast<std::size_t>(i)] = u;
        }
      }
    }
    for (int v = 0; v < V; ++v) pot[static_cast<std::size_t>(v)] += std::min(dist[static_cast<std::size_t>(v)], reach);

    // Bottleneck along the path.
    int delta = need[static_cast<std::size_t>(target - n)];
    int v = target;
    while (parent[static_cast<std::size_t>(v)] >= 0) {
      const int p = parent[static_cast<std::size_t>(v)];
      if (p >= n) delta = std::min(delta, F(v, p - n));  // reverse edge column p -> row v
      v = p;
    }
    delta = std::min(delta, left[static_cast<std::size_t>(v)]);
    left[static_cast<std::size_t>(v)] -= delta;
    need[static_cast<std::size_t>(target - n)] -= delta;
    remaining -= delta;
    v = target;
    while (parent[static_cast<std::size_t>(v)] >= 0) {
      const int p = parent[static_cast<std::size_t>(v)];
      if (p < n) {
        const int j = v - n;
        if (F(p, j) == 0) col_rows[static_cast<std::size_t>(j)].push_back(p);
        F(p, j) += delta;
      } else {
        const int j = p - n;
        F(v, j) -= delta;
        if (F(v, j) == 0) {
          auto& rows = col_rows[static_cast<std::size_t>(j)];
          rows.erase(std::find(rows.begin(), rows.end(), v));
        }
      }
      v = p;
    }
  }

  TransportPlan out;
  out.plan.resize(n, m);
  const double unit = static_cast<double>(g) / (static_cast<double>(n) * m);
  double total = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      out.plan(i, j) = F(i, j) * unit;
      total += F(i, j) * cost(i, j);
    }
  out.cost = total * unit;
  return out;
}

TransportPlan w1_exact(const EmpiricalDist& a, const EmpiricalDist& b) {
  if (a.size() > kExactCap || b.size() > kExactCap)
    throw ContractError("w1_exact supports at most " + std::to_string(kExactCap) +
                        " atoms per side; use w1_sinkhorn for larger clouds");
  return transport_exact(euclidean_costs(a.points, b.points));
}

SinkhornResult w1_sinkhorn(const EmpiricalDist& a, const EmpiricalDist& b, double eps, int max_iters, double tol) {
  if (!(eps > 0)) throw ContractError("sinkhorn: eps must be > 0");
  if (max_iters < 1) throw ContractError("sinkhorn: max_iters must be >= 1");
  const Eigen::MatrixXd C = euclidean_costs(a.points, b.points);
  const Eigen::Index n = C.rows(), m = C.cols();
  const Eigen::VectorXd mu = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  const Eigen::VectorXd nu = Eigen::VectorXd::Constant(m, 1.0 / static_cast<double>(m));

  // Scaling iterations on a kernel stabilized by the log-domain potentials f, g;
  // large scalings are absorbed back into f, g.
  Eigen::VectorXd f = Eigen::VectorXd::Zero(n), g = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd u = Eigen::VectorXd::Ones(n), v = Eigen::VectorXd::Ones(m);
  Eigen::MatrixXd K(n, m);
  double e = std::max(eps, C.maxCoeff());
  auto rebuild = [&] {
    K = ((-C).colwise() + f).rowwise() + g.transpose();
    K = (K / e).array().exp().matrix();
  };
  auto absorb = [&] {
    f += e * u.array().log().matrix();
    g += e * v.array().log().matrix();
    u.setOnes();
    v.setOnes();
  };
  rebuild();

  SinkhornResult res;
  double err = std::numeric_limits<double>::infinity();
  for (;;) {
    const bool last = e <= eps;
    const int cap = last ? max_iters : 500;
    const double stage_tol = last ? tol : 1e-4;
    for (int it = 0; it < cap; ++it) {
      u = mu.cwiseQuotient(K * v);
      v = nu.cwiseQuotient(K.transpose() * u);
      ++res.iterations;
      const bool big = u.maxCoeff() > 1e50 || v.maxCoeff() > 1e50 || u.minCoeff() < 1e-50 || v.minCoeff() < 1e-50;
      if (big || !u.allFinite() || !v.allFinite()) {
        if (!u.allFinite() || !v.allFinite()) throw NumericError("sinkhorn: scaling overflow");
        absorb();
        rebuild();
      }
      if (it % 10 == 9 || it + 1 == cap) {
        // Columns are exact after the v update; measure the rows.
        err = (u.cwiseProduct(K * v) - mu).cwiseAbs().sum();
        if (err < stage_tol) break;
      }
    }
    if (last) break;
    absorb();
    e = std::max(eps, 0.5 * e);
    rebuild();
  }
  const Eigen::MatrixXd P = u.asDiagonal() * K * v.asDiagonal();
  res.cost = P.cwiseProduct(C).sum();
  res.marginal_error = err;
  res.converged = err < tol;
  return res;
}

double median_pairwise_distance(const EmpiricalDist& a, const EmpiricalDist& b) {
  const Eigen::MatrixXd C = euclidean_costs(a.points, b.points);
  std::vector<double> v(C.data(), C.data() + C.size());
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

W1Estimate w1(const EmpiricalDist& a, const EmpiricalDist& b) {
  W1Estimate out;
  if (a.size() <= kExactCap && b.size() <= kExactCap) {
    out.w1 = w1_exact(a, b).cost;
    out.solver = "exact";
    return out;
  }
  const auto s = w1_sinkhorn(a, b, 0.005 * median_pairwise_distance(a, b));
  out.w1 = s.cost;
  out.solver = "sinkhorn";
  out.approximate = !s.converged;
  return out;
}

double w1_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || a.size() != b.size()) throw ContractError("w1_1d requires equal, nonzero sample counts");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

ProductCheck product_identity_check(const EmpiricalDist& zt, const EmpiricalDist& zz, const EmpiricalDist& mt,
                                 const EmpiricalDist& mz) {
  if (mt.points.rows() != mz.points.rows() || mt.points.cols() != mz.points.cols() || mt.points != mz.points)
    throw ContractError("product_identity_check: both sides must share the same message atoms");
  if (zt.dim() != zz.dim()) throw DimensionError("product_identity_check: latent dimensions differ");
  const Eigen::Index n = zt.size(), m = zz.size(), k = mt.size();
  if (n * k > kExactCap || m * k > kExactCap) throw ContractError("product_identity_check: product space too large");
  const Eigen::MatrixXd cz = euclidean_costs(zt.points, zz.points);
  Eigen::MatrixXd cm(k, k);
  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index b = 0; b < k; ++b) cm(a, b) = (mt.points.row(a) - mz.points.row(b)).cwiseAbs().sum();
  Eigen::MatrixXd cp(n * k, m * k);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index a = 0; a < k; ++a)
      for (Eigen::Index j = 0; j < m; ++j)
        for (Eigen::Index b = 0; b < k; ++b) cp(i * k + a, j * k + b) = cz(i, j) + cm(a, b);
  ProductCheck out;
  out.lhs = transport_exact(cp).cost;
  out.rhs = transport_exact(cz).cost;
  out.gap = std::abs(out.lhs - out.rhs);
  return out;
}

double hoeffding_term(double G, double delta, long n) {
  if (!(G > 0)) throw ContractError("hoeffding_term: G must be > 0");
  if (!(delta > 0 && delta < 1)) throw ContractError("hoeffding_term: delta must lie in (0, 1)");
  if (n < 1) throw ContractError("hoeffding_term: n must be >= 1");
  return std::sqrt(G * G * std::log(1.0 / delta) / (2.0 * static_cast<double>(n)));
}

LipschitzEstimate lipschitz_estimate(const LossFn& loss, const std::vector<LossPoint>& points, long pairs, Rng& rng,
                                     const LossGradNormFn& grad_norm) {
  if (points.size() < 2) throw ContractError("lipschitz_estimate needs at least two points");
  if (pairs < 1) throw ContractError("lipschitz_estimate needs at least one pair");
  std::vector<double> values(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) values[i] = loss(points[i]);
  LipschitzEstimate est;
  for (long p = 0; p < pairs; ++p) {
    const auto i = static_cast<std::size_t>(rng.below(points.size()));
    const auto j = static_cast<std::size_t>(rng.below(points.size()));
    const double d = (points[i].z - points[j].z).norm() + (points[i].m - points[j].m).cwiseAbs().sum();
    if (d == 0.0) {
      ++est.skipped;
      continue;
    }
    ++est.pairs;
    est.pair_max = std::max(est.pair_max, std::abs(values[i] - values[j]) / d);
  }
  if (grad_norm)
    for (const auto& pt : points) est.grad_max = std::max(est.grad_max, grad_norm(pt));
  est.k = std::max(est.pair_max, est.grad_max);
  return est;
}

BoundReport assemble_bound(double risk, double g, double delta, long n, double k, const W1Estimate& w,
                           double test_loss_mean) {
  BoundReport r;
  r.risk = risk;
  r.g_est = g;
  r.delta = delta;
  r.n = n;
  r.deviation = hoeffding_term(g, delta, n);
  r.k_est = k;
  r.w1 = w.w1;
  r.solver = w.solver;
  r.bound = r.risk + r.deviation + r.k_est * r.w1;
  r.test_loss_mean = test_loss_mean;
  return r;
}

namespace {

TensorF latent_tensor(const toygen::SurrogateModel& s, const Eigen::VectorXd& z) {
  const auto shape = s.config().latent_shape();
  TensorF t(shape);
  if (t.numel() != z.size()) throw DimensionError("loss point latent has the wrong size");
  t.data = z.cast<float>().array();
  return t;
}

wmnet::Message message_of(const Eigen::VectorXd& m) {
  wmnet::Message msg;
  msg.bits.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) msg.bits[static_cast<std::size_t>(i)] = m[i] > 0.5 ? 1 : 0;
  return msg;
}

template <typename ZVar>
ndiff::Var<float> loss_on_tape(ndiff::Tape<float>& tape, const wmnet::WatermarkModel& model,
                               const toygen::SurrogateModel& surrogate, const ZVar& z, const TensorF& zt,
                               const wmnet::Message& msg, const losses::LossWeights& w) {
  if (msg.size() != model.config().bits) throw DimensionError("loss point message has the wrong length");
  auto original = tape.constant(surrogate.decode(zt));
  auto wm = model.processor().embed(surrogate.decoder(), z, tape.constant(msg.as_signed<float>()));
  auto logits = model.extractor().logits(wm);
  return losses::total_loss(original, wm, tape.constant(msg.as_tensor<float>()), logits, w).total;
}

}  // namespace

double sample_loss(const wmnet::WatermarkModel& model, const toygen::SurrogateModel& surrogate, const LossPoint& p,
                   const losses::LossWeights& w) {
  const TensorF zt = latent_tensor(surrogate, p.z);
  ndiff::Tape<float> tape;
  tape.set_grad_enabled(false);
  return loss_on_tape(tape, model, surrogate, tape.constant(zt), zt, message_of(p.m), w).item();
}

double sample_loss_grad_norm(const wmnet::WatermarkModel& model, const toygen::SurrogateModel& surrogate,
                             const LossPoint& p, const losses::LossWeights& w) {
  TensorF zt = latent_tensor(surrogate, p.z);
  zt.requires_grad = true;
  ndiff::Tape<float> tape;
  // The original image D(z) also depends on z.
  auto zv = tape.leaf(zt);
  auto original = surrogate.decoder().forward<float>(zv, nullptr);
  const wmnet::Message msg = message_of(p.m);
  auto wm = model.processor().embed(surrogate.decoder(), zv, tape.constant(msg.as_signed<float>()));
  auto logits = model.extractor().logits(wm);
  tape.backward(losses::total_loss(original, wm, tape.constant(msg.as_tensor<float>()), logits, w).total);
  return zt.grad ? static_cast<double>(zt.grad->matrix().norm()) : 0.0;
}

BoundReport generalization_bound(const wmnet::WatermarkModel& model, const toygen::SurrogateModel& surrogate,
                                 const BoundConfig& cfg) {
  if (cfg.n < 64) throw ContractError("generalization_bound needs n >= 64 samples per distribution");
  if (cfg.probe < 2 || cfg.pairs < 1) throw ContractError("generalization_bound: probe >= 2 and pairs >= 1 required");
  if (!(cfg.delta > 0 && cfg.delta < 1)) throw ContractError("delta must lie in (0, 1)");
  cfg.loss.validate();
  const int bits = model.config().bits;
  const int n = static_cast<int>(cfg.n);

  Rng train_rng(Rng::derive_seed(cfg.seed, {tag("bound-train")}));
  Rng test_rng(Rng::derive_seed(cfg.seed, {tag("bound-test")}));
  Rng probe_rng(Rng::derive_seed(cfg.seed, {tag("bound-probe")}));
  Rng msg_rng(Rng::derive_seed(cfg.seed, {tag("bound-msg")}));
  Rng pair_rng(Rng::derive_seed(cfg.seed, {tag("bound-pairs")}));

  const auto train = latent_cloud(surrogate.sample_distribution(cfg.train, n, train_rng), "train");
  const auto test = latent_cloud(
      surrogate.sample_distribution(toygen::DistKind::conditional, n, test_rng, cfg.test_guidance), "test");
  const auto probe =
      latent_cloud(surrogate.sample_distribution(cfg.train, static_cast<int>(cfg.probe), probe_rng), "probe");

  auto points_of = [&](const EmpiricalDist& d) {
    std::vector<LossPoint> pts;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      const auto m = wmnet::Message::random(bits, msg_rng);
      Eigen::VectorXd mv(bits);
      for (int b = 0; b < bits; ++b) mv[b] = m.bits[static_cast<std::size_t>(b)];
      pts.push_back({d.points.row(i).transpose(), mv});
    }
    return pts;
  };
  const auto train_pts = points_of(train), test_pts = points_of(test), probe_pts = points_of(probe);
  auto loss = [&](const LossPoint& p) { return sample_loss(model, surrogate, p, cfg.loss); };
  auto mean_loss = [&](const std::vector<LossPoint>& pts) {
    double s = 0;
    for (const auto& p : pts) s += loss(p);
    return s / static_cast<double>(pts.size());
  };
  const double risk = mean_loss(train_pts);
  const double test_mean = mean_loss(test_pts);
  double g = 0;
  for (const auto& p : probe_pts) g = std::max(g, loss(p));  // losses are >= 0, so the range is [0, max]
  if (!(g > 0)) g = std::numeric_limits<double>::min();

  std::vector<LossPoint> all = train_pts;
  all.insert(all.end(), test_pts.begin(), test_pts.end());
  auto est = lipschitz_estimate(loss, all, cfg.pairs, pair_rng);
  const long gp = std::min<long>(cfg.grad_points, static_cast<long>(all.size()));
  for (long i = 0; i < gp; ++i) {
    // Alternate between the two clouds.
    const std::size_t idx = static_cast<std::size_t>(i % 2 == 0 ? i / 2 : n + i / 2);
    est.grad_max = std::max(est.grad_max, sample_loss_grad_norm(model, surrogate, all[idx], cfg.loss));
  }
  est.k = std::max(est.pair_max, est.grad_max);

  return assemble_bound(risk, g, cfg.delta, cfg.n, est.k, w1(train, test), test_mean);
}

std::vector<Eigen::MatrixXd> pca2(const std::vector<const EmpiricalDist*>& clouds) {
  if (clouds.empty()) throw ContractError("pca2: no clouds");
  const Eigen::Index d = clouds.front()->dim();
  Eigen::Index total = 0;
  for (const auto* c : clouds) {
    if (c->dim() != d) throw DimensionError("pca2: cloud dimensions differ");
    total += c->size();
  }
  if (d < 2 || total < 2) throw ContractError("pca2 needs two dimensions and two points");
  Eigen::MatrixXd all(total, d);
  Eigen::Index r = 0;
  for (const auto* c : clouds) {
    all.middleRows(r, c->size()) = c->points;
    r += c->size();
  }
  const Eigen::RowVectorXd mu = all.colwise().mean();
  const Eigen::MatrixXd centered = all.rowwise() - mu;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(total - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  Eigen::MatrixXd axes(d, 2);
  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - k);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;  // fixed sign
    axes.col(k) = v;
  }
  std::vector<Eigen::MatrixXd> out;
  for (const auto* c : clouds) out.push_back((c->points.rowwise() - mu) * axes);
  return out;
}

}  // namespace satmark::otbound
