#include "satmark/attacks/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace satmark::attacks {

const char* kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::blur: return "blur";
    case AttackKind::noise: return "noise";
    case AttackKind::brightness: return "brightness";
    case AttackKind::contrast: return "contrast";
    case AttackKind::desaturate: return "desat";
    case AttackKind::perspective: return "perspective";
    case AttackKind::jpeg: return "jpeg";
    case AttackKind::identity: return "identity";
  }
  return "unknown";
}

const char* intensity_unit(AttackKind k) {
  switch (k) {
    case AttackKind::blur: return "sigma";
    case AttackKind::noise: return "std";
    case AttackKind::brightness: return "shift";
    case AttackKind::contrast: return "factor";
    case AttackKind::desaturate: return "alpha";
    case AttackKind::perspective: return "strength";
    case AttackKind::jpeg: return "qf";
    case AttackKind::identity: return "none";
  }
  return "unknown";
}

AttackKind parse_kind(const std::string& name) {
  for (AttackKind k : kAllAttacks)
    if (name == kind_name(k)) return k;
  if (name == "identity") return AttackKind::identity;
  throw ContractError("unknown attack kind '" + name + "'");
}

const Range& AttackRanges::operator[](AttackKind k) const { return const_cast<AttackRanges&>(*this)[k]; }

Range& AttackRanges::operator[](AttackKind k) {
  switch (k) {
    case AttackKind::blur: return blur;
    case AttackKind::noise: return noise;
    case AttackKind::brightness: return brightness;
    case AttackKind::contrast: return contrast;
    case AttackKind::desaturate: return desaturate;
    case AttackKind::perspective: return perspective;
    case AttackKind::jpeg: return jpeg;
    case AttackKind::identity: break;
  }
  throw ContractError("identity attack has no intensity range");
}

void AttackRanges::validate() const {
  for (AttackKind k : kAllAttacks) {
    const Range& r = (*this)[k];
    if (!(r.min <= r.max) || r.neutral < r.min || r.neutral > r.max)
      throw ContractError(std::string("invalid range for attack ") + kind_name(k));
  }
  if (blur.min < 0 || noise.min < 0 || brightness.min < 0 || contrast.min < 0 || desaturate.min < 0 ||
      desaturate.max > 1 || perspective.min < 0 || perspective.max >= 0.25 || jpeg.min < 0 || jpeg.max > 100)
    throw ContractError("attack range outside the attack's domain");
}

AttackSpec sample_attack(Rng& rng, double gamma, const AttackRanges& ranges) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ContractError("gamma must lie in [0, 1]");
  return sample_attack_of(kAllAttacks[rng.below(kNumAttacks)], rng, gamma, ranges);
}

AttackSpec sample_attack_of(AttackKind kind, Rng& rng, double gamma, const AttackRanges& ranges) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ContractError("gamma must lie in [0, 1]");
  if (kind == AttackKind::identity) return AttackSpec{kind, 0.0, gamma, rng.next_u64()};
  AttackSpec s;
  s.kind = kind;
  const Range& r = ranges[s.kind];
  const double raw = rng.uniform(r.min, r.max);
  s.intensity = r.neutral + gamma * (raw - r.neutral);
  s.gamma = gamma;
  s.seed = rng.next_u64();
  return s;
}

double schedule_gamma(long step, long total) {
  if (total < 1 || step < 0) throw ContractError("schedule_gamma requires total >= 1 and step >= 0");
  return std::min(1.0, 2.0 * static_cast<double>(step) / static_cast<double>(total));
}

std::array<double, 49> gaussian_kernel7(double sigma) {
  std::array<double, 49> k{};
  if (sigma <= 0.0) {
    k[24] = 1.0;
    return k;
  }
  double total = 0.0;
  for (int y = -3; y <= 3; ++y)
    for (int x = -3; x <= 3; ++x) {
      const double v = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma));
      k[static_cast<std::size_t>((y + 3) * 7 + (x + 3))] = v;
      total += v;
    }
  for (double& v : k) v /= total;
  return k;
}

int effective_quality(double qf) {
  const int q = static_cast<int>(std::lround(qf));
  return std::clamp(q, 1, 100);
}

std::array<double, 64> quant_table(int quality, bool chroma) {
  static constexpr int kLuma[64] = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                                    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                                    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                                    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
  static constexpr int kChroma[64] = {17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
                                      24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
                                      99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
                                      99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};
  if (quality < 1 || quality > 100) throw ContractError("jpeg quality must be in [1, 100]");
  const long scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::array<double, 64> t{};
  const int* base = chroma ? kChroma : kLuma;
  for (int i = 0; i < 64; ++i) {
    const long v = (base[i] * scale + 50) / 100;
    t[static_cast<std::size_t>(i)] = static_cast<double>(std::clamp(v, 1L, 255L));
  }
  return t;
}

std::array<double, 8> perspective_offsets(const AttackSpec& spec, int H, int W) {
  Rng rng(Rng::derive_seed(spec.seed, {tag("perspective")}));
  const double d = spec.intensity * std::min(H, W);  // pixels
  std::array<double, 8> off{};
  for (int i = 0; i < 4; ++i) {
    off[2 * i] = rng.uniform(-d, d) * 2.0 / W;
    off[2 * i + 1] = rng.uniform(-d, d) * 2.0 / H;
  }
  return off;
}

double brightness_shift(const AttackSpec& spec) {
  Rng rng(Rng::derive_seed(spec.seed, {tag("brightness")}));
  return spec.intensity * rng.uniform(-1.0, 1.0);
}

const Eigen::Matrix<double, 8, 8>& dct_matrix() {
  static const Eigen::Matrix<double, 8, 8> D = [] {
    Eigen::Matrix<double, 8, 8> m;
    for (int k = 0; k < 8; ++k)
      for (int n = 0; n < 8; ++n) {
        const double a = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
        m(k, n) = a * std::cos(std::numbers::pi * (2 * n + 1) * k / 16.0);
      }
    return m;
  }();
  return D;
}

Eigen::Matrix<double, 8, 8> dct8(const Eigen::Matrix<double, 8, 8>& block) {
  return dct_matrix() * block * dct_matrix().transpose();
}

Eigen::Matrix<double, 8, 8> idct8(const Eigen::Matrix<double, 8, 8>& coeffs) {
  return dct_matrix().transpose() * coeffs * dct_matrix();
}

void check_intensity(const AttackSpec& spec, const AttackRanges& ranges) {
  if (spec.kind == AttackKind::identity) return;
  const Range& r = ranges[spec.kind];
  if (!(spec.intensity >= r.min && spec.intensity <= r.max))
    throw ContractError(std::string(kind_name(spec.kind)) + " intensity " + std::to_string(spec.intensity) +
                        " outside [" + std::to_string(r.min) + ", " + std::to_string(r.max) + "]");
}

Tensor<float> apply_tensor(const Tensor<float>& image, const AttackSpec& spec, const AttackRanges& ranges) {
  Tape<float> tape;
  tape.set_grad_enabled(false);
  return apply(tape.constant(image), spec, ranges).tensor();
}

}  // namespace satmark::attacks
