#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "satmark/attacks/attacks.hpp"
#include "satmark/ndiff/tensor.hpp"
#include "satmark/toygen/surrogate.hpp"
#include "satmark/wmnet/wmnet.hpp"

namespace satmark::evalkit {

using ndiff::TensorF;
using wmnet::Message;

// -10 log10(MSE); identical images give +infinity.
double psnr(const TensorF& a, const TensorF& b);

// Per-channel SSIM with a 7x7 Gaussian window (sigma 1.5) over valid
// positions, averaged over channels and positions.
double ssim(const TensorF& a, const TensorF& b);

// Frechet distance between Gaussian fits of two feature sets (rows are samples).
double frechet_feature_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// Mann-Whitney AUC, ties counted as one half.
double roc_auc(const std::vector<double>& pos, const std::vector<double>& neg);

// P[X >= tau] for X ~ Binomial(l, 1/2).
double binomial_fpr(int tau, int l);
// Smallest tau in [0, l + 1] with binomial_fpr(tau, l) <= target (l + 1 has rate 0).
int threshold_for_fpr(int l, double target);
// Fraction of matched-bit counts at or above threshold_for_fpr(l, target).
double tpr_at_fpr(const std::vector<int>& matched, int l, double target);

int matched_bits(const Message& a, const Message& b);

// Random l-bit user keys packed into 64-bit words, all distinct.
class KeyPool {
 public:
  KeyPool(std::int64_t size, int bits, std::uint64_t seed);
  // Caller-supplied keys, kept as given (no duplicate check).
  explicit KeyPool(const std::vector<Message>& keys);

  std::int64_t size() const { return size_; }
  int bits() const { return bits_; }
  int words() const { return words_; }
  const std::uint64_t* key_words(std::int64_t i) const { return keys_.data() + i * words_; }
  Message key(std::int64_t i) const;

  // Bit i of the message lands in word i / 64, bit position 63 - i % 64.
  static std::vector<std::uint64_t> pack(const Message& m);

 private:
  std::int64_t size_;
  int bits_, words_;
  std::vector<std::uint64_t> keys_;
};

// Index of the nearest key in Hamming distance; ties go to the lowest index.
std::int64_t identify(const Message& decoded, const KeyPool& pool);

inline constexpr std::array<const char*, 9> kReportAccuracies{"none",  "blur",        "noise", "brightness", "contrast",
                                                              "desat", "perspective", "jpeg",  "adv"};

struct MetricsReport {
  double psnr_db = 0;  // mean of per-image PSNR; +inf when every pair is identical
  double ssim = 0;
  std::optional<double> ffd;  // needs n >= 2
  double acc_none = 0;
  std::array<double, attacks::kNumAttacks> acc_attack{};  // order of kAllAttacks
  double acc_adv = 0;
  long n = 0;
};

struct EvalConfig {
  long n = 1000;
  std::uint64_t seed = 1;
  int threads = 1;
  attacks::AttackRanges ranges;
};

// Prompt-mixture latents with random messages; every attack applied at
// gamma = 1 with seeded intensities.
MetricsReport evaluate(const wmnet::WatermarkModel& model, const toygen::SurrogateModel& surrogate,
                       const EvalConfig& cfg);

struct DetectReport {
  double auc = 0;
  double tpr = 0;
  int threshold = 0;
  double target_fpr = 0;
  int bits = 0;
  long n = 0;
};

// n watermarked and n clean images, each scored by matched bits against its claimed key.
DetectReport detect(const wmnet::WatermarkModel& model, const toygen::SurrogateModel& surrogate, long n,
                    double target_fpr, std::uint64_t seed, int threads = 1);

struct IdentifyReport {
  double accuracy = 0;
  double bit_accuracy = 0;
  std::int64_t pool = 0;
  long users = 0;
  long per_user = 0;
  int bits = 0;
};

IdentifyReport identify_users(const wmnet::WatermarkModel& model, const toygen::SurrogateModel& surrogate,
                              std::int64_t pool_size, long users, long per_user, std::uint64_t seed,
                              int threads = 1);

// Runs f(i) for i in [0, n) on up to `threads` workers; the first exception is rethrown.
void parallel_for(long n, int threads, const std::function<void(long)>& f);

}  // namespace satmark::evalkit
