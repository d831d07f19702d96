#pragma once

// Independent reference implementations used only by tests. None of these
// share code paths with the library routines they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace oracle {

// Naive triple loop: a [m x k], b [k x n], row-major.
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

// Direct six-loop cross-correlation.
inline std::vector<double> conv2d(const std::vector<double>& x, int C, int H, int W, const std::vector<double>& w,
                                  int Co, int k, int stride, int pad, int& Ho, int& Wo) {
  Ho = (H + 2 * pad - k) / stride + 1;
  Wo = (W + 2 * pad - k) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(Co) * Ho * Wo, 0.0);
  for (int o = 0; o < Co; ++o)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox)
        for (int c = 0; c < C; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              y[(o * Ho + oy) * Wo + ox] += w[((o * C + c) * k + ky) * k + kx] * x[(c * H + iy) * W + ix];
            }
  return y;
}

// Minimum-cost perfect matching by enumerating all permutations (n <= 9).
inline double assignment_bruteforce(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0;
    for (int i = 0; i < n; ++i) c += cost[i][perm[i]];
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Hungarian algorithm (shortest augmenting path with potentials), O(n^3).
inline double assignment_hungarian(const std::vector<std::vector<double>>& a) {
  const int n = static_cast<int>(a.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(n + 1, 0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j)
        if (!used[j]) {
          const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
          if (cur < minv[j]) {
            minv[j] = cur;
            way[j] = j0;
          }
          if (minv[j] < delta) {
            delta = minv[j];
            j1 = j;
          }
        }
      for (int j = 0; j <= n; ++j)
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  double total = 0;
  for (int j = 1; j <= n; ++j) total += a[p[j] - 1][j - 1];
  return total;
}

// AUC by counting every (positive, negative) pair; ties count one half.
inline double auc_pairs(const std::vector<double>& pos, const std::vector<double>& neg) {
  double s = 0;
  for (double p : pos)
    for (double q : neg) s += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
  return s / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

// Binomial upper tail P[X >= tau], X ~ Bin(l, 1/2), by direct summation in long double.
inline long double binomial_tail(int tau, int l) {
  long double total = 0, c = 1;  // c = C(l, k)
  for (int k = 0; k <= l; ++k) {
    if (k > 0) c = c * (l - k + 1) / k;
    if (k >= tau) total += c;
  }
  return std::ldexp(total, -l);
}

// SSIM by direct windowed sums at every valid position of each channel.
inline double ssim_direct(const std::vector<double>& a, const std::vector<double>& b, int C, int H, int W) {
  double g[7][7], gs = 0;
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x) gs += g[y][x] = std::exp(-((y - 3) * (y - 3) + (x - 3) * (x - 3)) / 4.5);
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  int count = 0;
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy + 7 <= H; ++oy)
      for (int ox = 0; ox + 7 <= W; ++ox) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int y = 0; y < 7; ++y)
          for (int x = 0; x < 7; ++x) {
            const double w = g[y][x] / gs;
            const double va = a[(c * H + oy + y) * W + ox + x], vb = b[(c * H + oy + y) * W + ox + x];
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        saa -= ma * ma;
        sbb -= mb * mb;
        sab -= ma * mb;
        total += (2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
        ++count;
      }
  return total / count;
}

// Hamming distance by comparing unpacked bits one at a time.
inline int hamming(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  int d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

// Index of the nearest key by unpacked Hamming distance; first minimum wins.
inline std::size_t nearest_naive(const std::vector<std::vector<std::uint8_t>>& keys, const std::vector<std::uint8_t>& q) {
  std::size_t best = 0;
  int best_d = std::numeric_limits<int>::max();
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const int d = hamming(keys[i], q);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

// 1-d W1 between equal-size samples: sort both, average |a_i - b_i|.
inline double w1_sorted(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

// min c.x subject to A x = b, x >= 0, b >= 0. Dense two-phase tableau
// simplex with Bland's rule, so it terminates on degenerate problems.
inline double lp_min(const std::vector<std::vector<double>>& A, const std::vector<double>& b,
                     const std::vector<double>& c) {
  const int m = static_cast<int>(A.size()), n = static_cast<int>(c.size());
  const int cols = n + m + 1, rhs = n + m;
  const double eps = 1e-12;
  std::vector<std::vector<double>> t(m + 1, std::vector<double>(cols, 0.0));
  std::vector<int> basis(m);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) t[i][j] = A[i][j];
    t[i][n + i] = 1;
    t[i][rhs] = b[i];
    basis[i] = n + i;
  }
  auto pivot = [&](int r, int col) {
    const double p = t[r][col];
    for (double& v : t[r]) v /= p;
    for (int i = 0; i <= m; ++i) {
      if (i == r || t[i][col] == 0) continue;
      const double f = t[i][col];
      for (int j = 0; j < cols; ++j) t[i][j] -= f * t[r][j];
    }
    basis[r] = col;
  };
  auto solve = [&](int allowed) {
    for (;;) {
      int enter = -1;
      for (int j = 0; j < allowed; ++j)
        if (t[m][j] < -eps) {
          enter = j;
          break;
        }
      if (enter < 0) return;
      int leave = -1;
      double best = 0;
      for (int i = 0; i < m; ++i) {
        if (t[i][enter] <= eps) continue;
        const double ratio = t[i][rhs] / t[i][enter];
        if (leave < 0 || ratio < best - eps || (ratio <= best + eps && basis[i] < basis[leave])) {
          leave = i;
          best = ratio;
        }
      }
      if (leave < 0) throw std::runtime_error("lp_min: unbounded");
      pivot(leave, enter);
    }
  };
  // phase 1: minimize the sum of artificials
  for (int j = 0; j < cols; ++j) t[m][j] = 0;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) t[m][j] -= t[i][j];
  for (int i = 0; i < m; ++i) t[m][rhs] -= t[i][rhs];
  solve(n + m);
  if (-t[m][rhs] > 1e-9) throw std::runtime_error("lp_min: infeasible");
  for (int i = 0; i < m; ++i) {
    if (basis[i] < n) continue;
    for (int j = 0; j < n; ++j)
      if (std::abs(t[i][j]) > eps) {
        pivot(i, j);
        break;
      }
  }
  // phase 2 over the original columns only
  for (int j = 0; j < cols; ++j) t[m][j] = j < n ? c[j] : 0.0;
  for (int i = 0; i < m; ++i) {
    const double cb = basis[i] < n ? c[basis[i]] : 0.0;
    if (cb == 0) continue;
    for (int j = 0; j < cols; ++j) t[m][j] -= cb * t[i][j];
  }
  solve(n);
  return -t[m][rhs];
}

// Exact transport cost between uniform marginals (rows 1/na, columns 1/nb) as an LP.
inline double transport_lp(const std::vector<std::vector<double>>& cost) {
  const int na = static_cast<int>(cost.size()), nb = static_cast<int>(cost[0].size());
  std::vector<std::vector<double>> A(na + nb, std::vector<double>(static_cast<std::size_t>(na) * nb, 0.0));
  std::vector<double> b(na + nb), c(static_cast<std::size_t>(na) * nb);
  for (int i = 0; i < na; ++i)
    for (int j = 0; j < nb; ++j) {
      A[i][i * nb + j] = 1;
      A[na + j][i * nb + j] = 1;
      c[i * nb + j] = cost[i][j];
    }
  for (int i = 0; i < na; ++i) b[i] = 1.0 / na;
  for (int j = 0; j < nb; ++j) b[na + j] = 1.0 / nb;
  return lp_min(A, b, c);
}

}  // namespace oracle
