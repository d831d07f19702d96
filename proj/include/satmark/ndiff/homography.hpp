#pragma once

#include <Eigen/Dense>

#include <array>

#include "satmark/ndiff/ops.hpp"

namespace satmark::ndiff {

// Corner order shared by every 8-offset parameterization:
// top-left, top-right, bottom-right, bottom-left in normalized coordinates.
inline constexpr std::array<std::array<double, 2>, 4> kCorners{{{-1.0, -1.0}, {1.0, -1.0}, {1.0, 1.0}, {-1.0, 1.0}}};

// Homography H (h22 = 1) with H(src_i) = dst_i for four point pairs.
inline Eigen::Matrix3d homography_from_points(const std::array<Eigen::Vector2d, 4>& src,
                                              const std::array<Eigen::Vector2d, 4>& dst) {
  Eigen::Matrix<double, 8, 8> A;
  Eigen::Matrix<double, 8, 1> b;
  for (int i = 0; i < 4; ++i) {
    const double u = src[i].x(), v = src[i].y(), x = dst[i].x(), y = dst[i].y();
    A.row(2 * i) << u, v, 1, 0, 0, 0, -u * x, -v * x;
    A.row(2 * i + 1) << 0, 0, 0, u, v, 1, -u * y, -v * y;
    b(2 * i) = x;
    b(2 * i + 1) = y;
  }
  Eigen::FullPivLU<Eigen::Matrix<double, 8, 8>> lu(A);
  if (!lu.isInvertible()) throw NumericError("degenerate corner layout: homography is singular");
  Eigen::Matrix<double, 8, 1> h = lu.solve(b);
  Eigen::Matrix3d H;
  H << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
  return H;
}

inline std::array<Eigen::Vector2d, 4> displaced_corners(const std::array<double, 8>& offsets) {
  std::array<Eigen::Vector2d, 4> out;
  for (int i = 0; i < 4; ++i) out[i] = {kCorners[i][0] + offsets[2 * i], kCorners[i][1] + offsets[2 * i + 1]};
  return out;
}

inline std::array<Eigen::Vector2d, 4> unit_corners() {
  std::array<Eigen::Vector2d, 4> out;
  for (int i = 0; i < 4; ++i) out[i] = {kCorners[i][0], kCorners[i][1]};
  return out;
}

// Sampling grid [H, W, 2] with grid(p) = H(p) at every output pixel center p.
template <typename Scalar>
Tensor<Scalar> grid_from_homography(const Eigen::Matrix3d& Hm, int H, int W) {
  Tensor<Scalar> g(Shape{H, W, 2});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double u = (2.0 * x + 1.0) / W - 1.0, v = (2.0 * y + 1.0) / H - 1.0;
      const Eigen::Vector3d p = Hm * Eigen::Vector3d(u, v, 1.0);
      const Eigen::Index i = (static_cast<Eigen::Index>(y) * W + x) * 2;
      g.data[i] = static_cast<Scalar>(p.x() / p.z());
      g.data[i + 1] = static_cast<Scalar>(p.y() / p.z());
    }
  return g;
}

// Differentiable grid from 8 corner offsets: the homography sends each unit
// corner (+-1, +-1) to corner + offset, and every output pixel center samples
// the input at its image under that homography. Zero offsets give the identity grid.
template <typename Scalar>
Var<Scalar> homography_grid(const Var<Scalar>& offsets, int H, int W) {
  if (offsets.numel() != 8) throw DimensionError("homography_grid: expected 8 offsets, got " + shape_str(offsets.shape()));
  const auto& ov = offsets.value();
  Eigen::Matrix<double, 8, 8> A;
  Eigen::Matrix<double, 8, 1> b;
  for (int i = 0; i < 4; ++i) {
    const double u = kCorners[i][0], v = kCorners[i][1];
    const double x = u + static_cast<double>(ov[2 * i]), y = v + static_cast<double>(ov[2 * i + 1]);
    A.row(2 * i) << u, v, 1, 0, 0, 0, -u * x, -v * x;
    A.row(2 * i + 1) << 0, 0, 0, u, v, 1, -u * y, -v * y;
    b(2 * i) = x;
    b(2 * i + 1) = y;
  }
  Eigen::FullPivLU<Eigen::Matrix<double, 8, 8>> lu(A);
  if (!lu.isInvertible()) throw NumericError("degenerate corner layout: homography is singular");
  const Eigen::Matrix<double, 8, 1> h = lu.solve(b);

  ArrayX<Scalar> grid(static_cast<Eigen::Index>(H) * W * 2);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double u = (2.0 * x + 1.0) / W - 1.0, v = (2.0 * y + 1.0) / H - 1.0;
      const double den = h(6) * u + h(7) * v + 1.0;
      const Eigen::Index i = (static_cast<Eigen::Index>(y) * W + x) * 2;
      grid[i] = static_cast<Scalar>((h(0) * u + h(1) * v + h(2)) / den);
      grid[i + 1] = static_cast<Scalar>((h(3) * u + h(4) * v + h(5)) / den);
    }
  const int oid = offsets.id();
  return offsets.tape().push(
      Shape{H, W, 2}, std::move(grid), offsets.requires_grad(), [=](Tape<Scalar>& t, const ArrayX<Scalar>& g) {
        // Pull back to h, then through h = A^{-1} b with A, b linear in the corners.
        Eigen::Matrix<double, 8, 1> gh = Eigen::Matrix<double, 8, 1>::Zero();
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            const double u = (2.0 * x + 1.0) / W - 1.0, v = (2.0 * y + 1.0) / H - 1.0;
            const double den = h(6) * u + h(7) * v + 1.0;
            const double px = (h(0) * u + h(1) * v + h(2)) / den;
            const double py = (h(3) * u + h(4) * v + h(5)) / den;
            const Eigen::Index i = (static_cast<Eigen::Index>(y) * W + x) * 2;
            const double gx = static_cast<double>(g[i]) / den, gy = static_cast<double>(g[i + 1]) / den;
            gh(0) += gx * u;
            gh(1) += gx * v;
            gh(2) += gx;
            gh(3) += gy * u;
            gh(4) += gy * v;
            gh(5) += gy;
            gh(6) -= (gx * px + gy * py) * u;
            gh(7) -= (gx * px + gy * py) * v;
          }
        const Eigen::Matrix<double, 8, 1> lambda = A.transpose().fullPivLu().solve(gh);
        ArrayX<Scalar> go(8);
        for (int i = 0; i < 4; ++i) {
          const double u = kCorners[i][0], v = kCorners[i][1];
          // dL/dA_{r,c} = -lambda_r * h_c; only columns 6, 7 and b depend on the corner.
          const double gA_x6 = -lambda(2 * i) * h(6), gA_x7 = -lambda(2 * i) * h(7);
          const double gA_y6 = -lambda(2 * i + 1) * h(6), gA_y7 = -lambda(2 * i + 1) * h(7);
          go[2 * i] = static_cast<Scalar>(lambda(2 * i) - u * gA_x6 - v * gA_x7);
          go[2 * i + 1] = static_cast<Scalar>(lambda(2 * i + 1) - u * gA_y6 - v * gA_y7);
        }
        t.accumulate(oid, go);
      });
}

}  // namespace satmark::ndiff
