#include "satmark/evalkit/evalkit.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <bit>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

#include "satmark/errors.hpp"
#include "satmark/losses/losses.hpp"

namespace satmark::evalkit {

namespace {

void check_same(const TensorF& a, const TensorF& b, const char* what) {
  if (a.shape != b.shape)
    throw DimensionError(std::string(what) + ": shapes " + ndiff::shape_str(a.shape) + " and " +
                         ndiff::shape_str(b.shape));
}

// Symmetric PSD square root; negative eigenvalues (round-off) clamp to zero.
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::RowVectorXd& mu) {
  const Eigen::MatrixXd c = x.rowwise() - mu;
  return (c.transpose() * c) / static_cast<double>(x.rows() - 1);
}

// log2 C(l, k) - l
double log2_term(int k, int l) {
  return (std::lgamma(l + 1.0) - std::lgamma(k + 1.0) - std::lgamma(l - k + 1.0)) / std::log(2.0) - l;
}

}  // namespace

double psnr(const TensorF& a, const TensorF& b) {
  check_same(a, b, "psnr");
  const double mse = (a.data.cast<double>() - b.data.cast<double>()).square().mean();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

double ssim(const TensorF& a, const TensorF& b) {
  check_same(a, b, "ssim");
  if (a.rank() != 3) throw DimensionError("ssim: expected [C, H, W] images");
  const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
  constexpr int k = 7;
  if (H < k || W < k) throw ContractError("ssim: image smaller than the 7x7 window");
  std::array<double, k> g{};
  double gs = 0;
  for (int i = 0; i < k; ++i) gs += g[static_cast<std::size_t>(i)] = std::exp(-(i - 3) * (i - 3) / (2 * 1.5 * 1.5));
  for (auto& v : g) v /= gs;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const int Ho = H - k + 1, Wo = W - k + 1;

  // Separable valid filtering of a plane.
  auto filter = [&](const Eigen::ArrayXXd& x) {
    Eigen::ArrayXXd rows = Eigen::ArrayXXd::Zero(H, Wo), out = Eigen::ArrayXXd::Zero(Ho, Wo);
    for (int i = 0; i < k; ++i) rows += g[static_cast<std::size_t>(i)] * x.middleCols(i, Wo);
    for (int i = 0; i < k; ++i) out += g[static_cast<std::size_t>(i)] * rows.middleRows(i, Ho);
    return out;
  };
  double total = 0;
  for (int c = 0; c < C; ++c) {
    Eigen::ArrayXXd x(H, W), y(H, W);
    for (int r = 0; r < H; ++r)
      for (int q = 0; q < W; ++q) {
        x(r, q) = a.data[(c * H + r) * W + q];
        y(r, q) = b.data[(c * H + r) * W + q];
      }
    const Eigen::ArrayXXd mx = filter(x), my = filter(y);
    const Eigen::ArrayXXd sxx = filter(x * x) - mx * mx, syy = filter(y * y) - my * my, sxy = filter(x * y) - mx * my;
    const Eigen::ArrayXXd map =
        ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    total += map.mean();
  }
  return total / C;
}

double frechet_feature_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() == 0 || b.cols() == 0) throw ContractError("ffd: feature dimension is zero");
  if (a.cols() != b.cols()) throw DimensionError("ffd: feature dimensions differ");
  if (a.rows() < 2 || b.rows() < 2) throw ContractError("ffd: need at least two samples per set");
  const Eigen::RowVectorXd ma = a.colwise().mean(), mb = b.colwise().mean();
  const Eigen::MatrixXd sa = covariance(a, ma), sb = covariance(b, mb);
  const Eigen::MatrixXd ra = sqrt_psd(sa);
  const Eigen::MatrixXd inner = ra * sb * ra;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_cross;
  return std::max(0.0, d);
}

double roc_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) throw ContractError("roc_auc: both score sets must be nonempty");
  std::vector<double> n = neg;
  std::sort(n.begin(), n.end());
  double u = 0;
  for (double p : pos) {
    const auto lo = std::lower_bound(n.begin(), n.end(), p), hi = std::upper_bound(n.begin(), n.end(), p);
    u += static_cast<double>(lo - n.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return u / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

double binomial_fpr(int tau, int l) {
  if (l < 1) throw ContractError("binomial_fpr: l must be >= 1");
  if (tau < 0 || tau > l + 1) throw ContractError("binomial_fpr: tau outside [0, l + 1]");
  if (tau == 0) return 1.0;
  if (tau == l + 1) return 0.0;
  // log2-sum-exp2 over k = tau..l
  double mx = -std::numeric_limits<double>::infinity();
  for (int k = tau; k <= l; ++k) mx = std::max(mx, log2_term(k, l));
  double s = 0;
  for (int k = tau; k <= l; ++k) s += std::exp2(log2_term(k, l) - mx);
  return std::min(1.0, std::exp2(mx + std::log2(s)));
}

int threshold_for_fpr(int l, double target) {
  if (!(target >= 0.0 && target <= 1.0)) throw ContractError("threshold_for_fpr: target outside [0, 1]");
  for (int tau = 0; tau <= l; ++tau)
    if (binomial_fpr(tau, l) <= target) return tau;
  return l + 1;
}

double tpr_at_fpr(const std::vector<int>& matched, int l, double target) {
  if (matched.empty()) throw ContractError("tpr_at_fpr: no positive scores");
  const int tau = threshold_for_fpr(l, target);
  const auto hits = std::count_if(matched.begin(), matched.end(), [&](int m) { return m >= tau; });
  return static_cast<double>(hits) / static_cast<double>(matched.size());
}

int matched_bits(const Message& a, const Message& b) {
  if (a.size() != b.size()) throw ContractError("matched_bits: message lengths differ");
  int s = 0;
  for (int i = 0; i < a.size(); ++i) s += a.bits[static_cast<std::size_t>(i)] == b.bits[static_cast<std::size_t>(i)];
  return s;
}

std::vector<std::uint64_t> KeyPool::pack(const Message& m) {
  std::vector<std::uint64_t> w(static_cast<std::size_t>((m.size() + 63) / 64), 0);
  for (int i = 0; i < m.size(); ++i)
    if (m.bits[static_cast<std::size_t>(i)]) w[static_cast<std::size_t>(i / 64)] |= std::uint64_t{1} << (63 - i % 64);
  return w;
}

KeyPool::KeyPool(std::int64_t size, int bits, std::uint64_t seed) : size_(size), bits_(bits), words_((bits + 63) / 64) {
  if (size < 1) throw ContractError("key pool size must be >= 1");
  if (bits < 1) throw ContractError("key length must be >= 1");
  if (bits < 63 && size > (std::int64_t{1} << bits))
    throw ContractError("key pool of " + std::to_string(size) + " distinct keys impossible with " +
                        std::to_string(bits) + " bits");
  keys_.resize(static_cast<std::size_t>(size * words_));
  const int tail = bits % 64;
  const std::uint64_t last_mask = tail == 0 ? ~std::uint64_t{0} : ~std::uint64_t{0} << (64 - tail);
  auto draw = [&](std::int64_t i, std::uint64_t round) {
    Rng rng(Rng::derive_seed(seed, {tag("key"), static_cast<std::uint64_t>(i), round}));
    for (int w = 0; w < words_; ++w) keys_[static_cast<std::size_t>(i * words_ + w)] = rng.next_u64();
    keys_[static_cast<std::size_t>(i * words_ + words_ - 1)] &= last_mask;
  };
  for (std::int64_t i = 0; i < size; ++i) draw(i, 0);
  // Resample later duplicates until all keys differ.
  std::vector<std::int64_t> order(static_cast<std::size_t>(size));
  for (std::uint64_t round = 1;; ++round) {
    std::iota(order.begin(), order.end(), 0);
    auto less = [&](std::int64_t x, std::int64_t y) {
      const auto* a = key_words(x);
      const auto* b = key_words(y);
      for (int w = 0; w < words_; ++w)
        if (a[w] != b[w]) return a[w] < b[w];
      return x < y;
    };
    std::sort(order.begin(), order.end(), less);
    bool dup = false;
    for (std::size_t j = 1; j < order.size(); ++j)
      if (std::equal(key_words(order[j]), key_words(order[j]) + words_, key_words(order[j - 1]))) {
        draw(order[j], round);
        dup = true;
      }
    if (!dup) break;
  }
}

KeyPool::KeyPool(const std::vector<Message>& keys)
    : size_(static_cast<std::int64_t>(keys.size())), bits_(keys.empty() ? 0 : keys.front().size()), words_((bits_ + 63) / 64) {
  if (keys.empty() || bits_ < 1) throw ContractError("key pool needs at least one nonempty key");
  for (const auto& k : keys) {
    if (k.size() != bits_) throw ContractError("key pool keys differ in length");
    const auto w = pack(k);
    keys_.insert(keys_.end(), w.begin(), w.end());
  }
}

Message KeyPool::key(std::int64_t i) const {
  if (i < 0 || i >= size_) throw ContractError("key index out of range");
  Message m;
  m.bits.resize(static_cast<std::size_t>(bits_));
  const auto* w = key_words(i);
  for (int b = 0; b < bits_; ++b) m.bits[static_cast<std::size_t>(b)] = (w[b / 64] >> (63 - b % 64)) & 1u;
  return m;
}

std::int64_t identify(const Message& decoded, const KeyPool& pool) {
  if (decoded.size() != pool.bits())
    throw ContractError("identify: message has " + std::to_string(decoded.size()) + " bits, pool keys have " +
                        std::to_string(pool.bits()));
  const auto q = KeyPool::pack(decoded);
  const int W = pool.words();
  std::int64_t best = 0;
  int best_d = pool.bits() + 1;
  const std::uint64_t* k = pool.key_words(0);
  if (W == 2) {
    for (std::int64_t i = 0; i < pool.size(); ++i, k += 2) {
      const int d = std::popcount(k[0] ^ q[0]) + std::popcount(k[1] ^ q[1]);
      if (d < best_d) best_d = d, best = i;
    }
    return best;
  }
  for (std::int64_t i = 0; i < pool.size(); ++i, k += W) {
    int d = 0;
    for (int w = 0; w < W; ++w) d += std::popcount(k[w] ^ q[static_cast<std::size_t>(w)]);
    if (d < best_d) best_d = d, best = i;
  }
  return best;
}

void parallel_for(long n, int threads, const std::function<void(long)>& f) {
  const int T = static_cast<int>(std::max<long>(1, std::min<long>(threads, n)));
  if (T == 1) {
    for (long i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(T));
  std::vector<std::thread> pool;
  for (int t = 0; t < T; ++t)
    pool.emplace_back([&, t] {
      try {
        for (long i = t; i < n; i += T) f(i);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

// Prompt-mixture latent (uniform prompt, generator guidance) and a random message.
std::pair<TensorF, Message> draw_pair(const toygen::SurrogateModel& surrogate, int bits, Rng& rng) {
  const int p = static_cast<int>(rng.below(static_cast<std::uint64_t>(surrogate.prompts().size())));
  TensorF z = surrogate.denoise(p, surrogate.draw_noise(rng)).z;
  return {std::move(z), Message::random(bits, rng)};
}

}  // namespace

MetricsReport evaluate(const wmnet::WatermarkModel& model, const toygen::SurrogateModel& surrogate,
                       const EvalConfig& cfg) {
  if (cfg.n < 1) throw ContractError("evaluate: n must be >= 1");
  cfg.ranges.validate();
  const long n = cfg.n;
  const int bits = model.config().bits;
  struct Row {
    double psnr = 0, ssim = 0, none = 0;
    std::array<double, attacks::kNumAttacks> acc{};
    Eigen::VectorXd fo, fw;
  };
  std::vector<Row> rows(static_cast<std::size_t>(n));
  const auto& proxy = losses::default_proxy();
  parallel_for(n, cfg.threads, [&](long i) {
    Rng rng(Rng::derive_seed(cfg.seed, {tag("eval"), static_cast<std::uint64_t>(i)}));
    auto [z, m] = draw_pair(surrogate, bits, rng);
    const TensorF io = surrogate.decode(z);
    const TensorF iw = model.embed(surrogate, z, m);
    Row& r = rows[static_cast<std::size_t>(i)];
    r.psnr = psnr(io, iw);
    r.ssim = ssim(io, iw);
    r.none = wmnet::bit_accuracy(wmnet::decode_bits(model.extract(iw)), m);
    for (int k = 0; k < attacks::kNumAttacks; ++k) {
      const auto spec = attacks::sample_attack_of(attacks::kAllAttacks[static_cast<std::size_t>(k)], rng, 1.0, cfg.ranges);
      const TensorF attacked = attacks::apply_tensor(iw, spec, cfg.ranges);
      r.acc[static_cast<std::size_t>(k)] = wmnet::bit_accuracy(wmnet::decode_bits(model.extract(attacked)), m);
    }
    r.fo = proxy.features(io);
    r.fw = proxy.features(iw);
  });

  MetricsReport rep;
  rep.n = n;
  for (const auto& r : rows) {
    rep.psnr_db += r.psnr;
    rep.ssim += r.ssim;
    rep.acc_none += r.none;
    for (std::size_t k = 0; k < r.acc.size(); ++k) rep.acc_attack[k] += r.acc[k];
  }
  rep.psnr_db /= n;
  rep.ssim /= n;
  rep.acc_none /= n;
  for (auto& a : rep.acc_attack) a /= n;
  rep.acc_adv = std::accumulate(rep.acc_attack.begin(), rep.acc_attack.end(), 0.0) / attacks::kNumAttacks;
  if (n >= 2) {
    const int d = proxy.feature_dim();
    Eigen::MatrixXd fo(n, d), fw(n, d);
    for (long i = 0; i < n; ++i) {
      fo.row(i) = rows[static_cast<std::size_t>(i)].fo.transpose();
      fw.row(i) = rows[static_cast<std::size_t>(i)].fw.transpose();
    }
    rep.ffd = frechet_feature_distance(fo, fw);
  }
  return rep;
}

DetectReport detect(const wmnet::WatermarkModel& model, const toygen::SurrogateModel& surrogate, long n,
                    double target_fpr, std::uint64_t seed, int threads) {
  if (n < 1) throw ContractError("detect: n must be >= 1");
  const int bits = model.config().bits;
  std::vector<int> pos(static_cast<std::size_t>(n)), neg(static_cast<std::size_t>(n));
  parallel_for(n, threads, [&](long i) {
    Rng rng(Rng::derive_seed(seed, {tag("detect"), static_cast<std::uint64_t>(i)}));
    auto [z, m] = draw_pair(surrogate, bits, rng);
    auto [z2, unused] = draw_pair(surrogate, bits, rng);
    pos[static_cast<std::size_t>(i)] = matched_bits(wmnet::decode_bits(model.extract(model.embed(surrogate, z, m))), m);
    neg[static_cast<std::size_t>(i)] = matched_bits(wmnet::decode_bits(model.extract(surrogate.decode(z2))), m);
  });
  DetectReport r;
  r.auc = roc_auc(std::vector<double>(pos.begin(), pos.end()), std::vector<double>(neg.begin(), neg.end()));
  r.threshold = threshold_for_fpr(bits, target_fpr);
  r.tpr = tpr_at_fpr(pos, bits, target_fpr);
  r.target_fpr = target_fpr;
  r.bits = bits;
  r.n = n;
  return r;
}

IdentifyReport identify_users(const wmnet::WatermarkModel& model, const toygen::SurrogateModel& surrogate,
                              std::int64_t pool_size, long users, long per_user, std::uint64_t seed, int threads) {
  if (users < 1 || per_user < 1) throw ContractError("identify: users and per_user must be >= 1");
  const int bits = model.config().bits;
  const KeyPool pool(pool_size, bits, Rng::derive_seed(seed, {tag("pool")}));
  const long total = users * per_user;
  std::vector<int> correct(static_cast<std::size_t>(total));
  std::vector<double> acc(static_cast<std::size_t>(total));
  parallel_for(total, threads, [&](long j) {
    const long u = j / per_user;
    Rng urng(Rng::derive_seed(seed, {tag("user"), static_cast<std::uint64_t>(u)}));
    const std::int64_t who = static_cast<std::int64_t>(urng.below(static_cast<std::uint64_t>(pool_size)));
    Rng rng(Rng::derive_seed(seed, {tag("image"), static_cast<std::uint64_t>(j)}));
    auto [z, unused] = draw_pair(surrogate, bits, rng);
    const Message key = pool.key(who);
    const Message got = wmnet::decode_bits(model.extract(model.embed(surrogate, z, key)));
    correct[static_cast<std::size_t>(j)] = identify(got, pool) == who;
    acc[static_cast<std::size_t>(j)] = wmnet::bit_accuracy(got, key);
  });
  IdentifyReport r;
  r.accuracy = static_cast<double>(std::accumulate(correct.begin(), correct.end(), 0L)) / static_cast<double>(total);
  r.bit_accuracy = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(total);
  r.pool = pool_size;
  r.users = users;
  r.per_user = per_user;
  r.bits = bits;
  return r;
}

}  // namespace satmark::evalkit
