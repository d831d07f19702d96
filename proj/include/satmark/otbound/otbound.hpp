#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "satmark/losses/losses.hpp"
#include "satmark/rng.hpp"
#include "satmark/toygen/surrogate.hpp"
#include "satmark/wmnet/wmnet.hpp"

namespace satmark::otbound {

// Uniformly weighted point cloud; rows are atoms.
struct EmpiricalDist {
  Eigen::MatrixXd points;
  std::string label;

  EmpiricalDist() = default;
  EmpiricalDist(Eigen::MatrixXd p, std::string l = {});

  Eigen::Index size() const { return points.rows(); }
  Eigen::Index dim() const { return points.cols(); }
};

// Flattened latents of a sample set.
EmpiricalDist latent_cloud(const std::vector<toygen::LatentSample>& samples, std::string label);

inline constexpr Eigen::Index kExactCap = 4096;

struct TransportPlan {
  Eigen::MatrixXd plan;  // n x m; rows sum to 1/n, columns to 1/m
  double cost = 0;
};

// Pairwise Euclidean distances.
Eigen::MatrixXd euclidean_costs(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// Exact optimal transport between uniform marginals for an arbitrary n x m
// cost matrix. Supplies are scaled to integers (m/g per row, n/g per column,
// g = gcd(n, m)) and solved by successive shortest augmenting paths.
TransportPlan transport_exact(const Eigen::MatrixXd& cost);

// Exact W1 with the Euclidean ground metric. Throws ContractError above kExactCap atoms.
TransportPlan w1_exact(const EmpiricalDist& a, const EmpiricalDist& b);

struct SinkhornResult {
  double cost = 0;
  double marginal_error = 0;  // L1 violation of the column marginal
  int iterations = 0;
  bool converged = false;     // false: result is approximate
};

// Log-domain Sinkhorn with epsilon scaling; returns the transport cost of the regularized plan.
SinkhornResult w1_sinkhorn(const EmpiricalDist& a, const EmpiricalDist& b, double eps, int max_iters = 20000,
                           double tol = 1e-6);

double median_pairwise_distance(const EmpiricalDist& a, const EmpiricalDist& b);

struct W1Estimate {
  double w1 = 0;
  std::string solver;  // "exact" or "sinkhorn"
  bool approximate = false;
};

// Exact up to kExactCap atoms per side, Sinkhorn with eps = 0.005 * median distance beyond.
W1Estimate w1(const EmpiricalDist& a, const EmpiricalDist& b);

// Mean absolute difference of sorted samples.
double w1_1d(std::vector<double> a, std::vector<double> b);

struct ProductCheck {
  double lhs = 0;  // W1 on Z x M with metric rho_Z + rho_M
  double rhs = 0;  // W1 on Z alone
  double gap = 0;
};

// Both product measures are built as full Cartesian products with the same
// message atoms; rho_M is the L1 (Hamming on bits) distance.
ProductCheck product_identity_check(const EmpiricalDist& zt, const EmpiricalDist& zz, const EmpiricalDist& mt,
                                 const EmpiricalDist& mz);

// sqrt(G^2 log(1/delta) / (2 n))
double hoeffding_term(double G, double delta, long n);

struct LossPoint {
  Eigen::VectorXd z;
  Eigen::VectorXd m;
};

struct LipschitzEstimate {
  double k = 0;              // max of the pair ratio and the gradient norm
  double pair_max = 0;
  double grad_max = 0;
  long pairs = 0;            // pairs used (zero-distance pairs are skipped)
  long skipped = 0;
};

using LossFn = std::function<double(const LossPoint&)>;
// Euclidean norm of d loss / d z.
using LossGradNormFn = std::function<double(const LossPoint&)>;

// Sampled lower bound on K under the metric ||z - z'|| + |m - m'|_1.
LipschitzEstimate lipschitz_estimate(const LossFn& loss, const std::vector<LossPoint>& points, long pairs, Rng& rng,
                                     const LossGradNormFn& grad_norm = {});

struct BoundReport {
  double risk = 0;
  double deviation = 0;
  double k_est = 0;
  double w1 = 0;
  double bound = 0;
  double test_loss_mean = 0;
  double g_est = 0;
  double delta = 0;
  long n = 0;
  std::string solver;
};

// bound = risk + deviation + k * w1
BoundReport assemble_bound(double risk, double g, double delta, long n, double k, const W1Estimate& w,
                           double test_loss_mean);

struct BoundConfig {
  toygen::DistKind train = toygen::DistKind::free;
  double test_guidance = 7.5;
  double delta = 0.05;
  long n = 512;
  long probe = 128;    // held-out training draws for G
  long pairs = 2048;   // Lipschitz pairs
  long grad_points = 32;
  std::uint64_t seed = 1;
  losses::LossWeights loss;
};

// Per-sample unified loss on the clean path: image loss against D(z) plus message loss.
double sample_loss(const wmnet::WatermarkModel& model, const toygen::SurrogateModel& surrogate, const LossPoint& p,
                   const losses::LossWeights& w);
double sample_loss_grad_norm(const wmnet::WatermarkModel& model, const toygen::SurrogateModel& surrogate,
                             const LossPoint& p, const losses::LossWeights& w);

BoundReport generalization_bound(const wmnet::WatermarkModel& model, const toygen::SurrogateModel& surrogate,
                                 const BoundConfig& cfg);

// Projection of the rows of several clouds onto the top two principal axes of their union.
std::vector<Eigen::MatrixXd> pca2(const std::vector<const EmpiricalDist*>& clouds);

}  // namespace satmark::otbound
