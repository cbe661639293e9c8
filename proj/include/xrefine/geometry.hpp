#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>

#include <vector>

#include "xrefine/tensor.hpp"

// Two-view epipolar geometry: residuals (with derivatives, templated on the
// scalar so the training loss can run in float while finite-difference checks
// run in double), the normalized eight-point solver, RANSAC, pose recovery,
// pose-error metrics, AUC and multi-view DLT triangulation.
//
// Conventions. A 3D point X_a in camera A coordinates maps to camera B as
// X_b = R * X_a + t, so the essential matrix is E = [t]x R and the constraint
// reads x_b^T E x_a = 0 for normalized image points x = ((u-cx)/fx, (v-cy)/fy, 1).

namespace xrefine {

struct CameraIntrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;

  Eigen::Matrix3d matrix() const {
    Eigen::Matrix3d k = Eigen::Matrix3d::Identity();
    k(0, 0) = fx;
    k(1, 1) = fy;
    k(0, 2) = cx;
    k(1, 2) = cy;
    return k;
  }
  Eigen::Vector2d normalize(const Eigen::Vector2d& px) const {
    return {(px.x() - cx) / fx, (px.y() - cy) / fy};
  }
  Eigen::Vector2d denormalize(const Eigen::Vector2d& n) const {
    return {n.x() * fx + cx, n.y() * fy + cy};
  }
  /// Scale used to express normalized-coordinate residuals in pixels.
  double fmean() const { return 0.5 * (fx + fy); }
};

struct RelativePose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

template <class S>
Eigen::Matrix<S, 3, 3> skew(const Eigen::Matrix<S, 3, 1>& v) {
  Eigen::Matrix<S, 3, 3> m;
  m << S(0), -v.z(), v.y(), v.z(), S(0), -v.x(), -v.y(), v.x(), S(0);
  return m;
}

inline Eigen::Matrix3d essential_from_pose(const RelativePose& pose) {
  return skew<double>(pose.translation) * pose.rotation;
}

// ---------------------------------------------------------------------------
// Epipolar residuals on normalized coordinates. Both variants return a
// squared distance; multiply by fmean^2 for squared pixels.

enum class EpipolarKind { Sampson, Symmetric };

template <class S>
struct EpipolarGrad {
  S dax = 0, day = 0, dbx = 0, dby = 0;
};

template <class S>
S epipolar_residual(const Eigen::Matrix<S, 3, 3>& e, S ax, S ay, S bx, S by, EpipolarKind kind,
                    EpipolarGrad<S>* grad = nullptr) {
  const Eigen::Matrix<S, 3, 1> a(ax, ay, S(1));
  const Eigen::Matrix<S, 3, 1> b(bx, by, S(1));
  const Eigen::Matrix<S, 3, 1> fa = e * a;        // epipolar line of a in image B
  const Eigen::Matrix<S, 3, 1> fb = e.transpose() * b;
  const S r = b.dot(fa);

  if (kind == EpipolarKind::Sampson) {
    const S d = fa(0) * fa(0) + fa(1) * fa(1) + fb(0) * fb(0) + fb(1) * fb(1);
    if (!(d > S(0))) throw NumericalError("epipolar residual: degenerate line (zero denominator)");
    const S s = r * r / d;
    if (grad) {
      const S inv_d = S(1) / d;
      const S two_r = S(2) * r;
      // d r / d a_j = fb_j,  d r / d b_j = fa_j
      // d D / d a_j = 2 (fa0 e0j + fa1 e1j),  d D / d b_j = 2 (fb0 ej0 + fb1 ej1)
      for (int j = 0; j < 2; ++j) {
        const S dd_da = S(2) * (fa(0) * e(0, j) + fa(1) * e(1, j));
        const S dd_db = S(2) * (fb(0) * e(j, 0) + fb(1) * e(j, 1));
        const S ga = (two_r * fb(j) - s * dd_da) * inv_d;
        const S gb = (two_r * fa(j) - s * dd_db) * inv_d;
        if (j == 0) {
          grad->dax = ga;
          grad->dbx = gb;
        } else {
          grad->day = ga;
          grad->dby = gb;
        }
      }
    }
    return s;
  }

  const S da = fa(0) * fa(0) + fa(1) * fa(1);
  const S db = fb(0) * fb(0) + fb(1) * fb(1);
  if (!(da > S(0)) || !(db > S(0)))
    throw NumericalError("epipolar residual: degenerate line (zero denominator)");
  const S inv_da = S(1) / da, inv_db = S(1) / db;
  const S s = r * r * (inv_da + inv_db);
  if (grad) {
    const S two_r = S(2) * r;
    for (int j = 0; j < 2; ++j) {
      const S dda = S(2) * (fa(0) * e(0, j) + fa(1) * e(1, j));
      const S ddb = S(2) * (fb(0) * e(j, 0) + fb(1) * e(j, 1));
      const S ga = two_r * fb(j) * (inv_da + inv_db) - r * r * inv_da * inv_da * dda;
      const S gb = two_r * fa(j) * (inv_da + inv_db) - r * r * inv_db * inv_db * ddb;
      if (j == 0) {
        grad->dax = ga;
        grad->dbx = gb;
      } else {
        grad->day = ga;
        grad->dby = gb;
      }
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Estimation (double precision, normalized coordinates throughout).

/// Normalized eight-point: Hartley-conditioned DLT followed by projection to
/// the essential manifold (singular values (s,s,0) with s the mean of the two
/// largest). The result has Frobenius norm sqrt(2) and a deterministic sign.
Eigen::Matrix3d eight_point(const std::vector<Eigen::Vector2d>& pts_a,
                            const std::vector<Eigen::Vector2d>& pts_b);

struct RansacParams {
  int iterations = 1000;
  double threshold_px = 1.0;  // Sampson distance threshold, in pixels
  double fmean = 1.0;         // converts normalized residuals to pixels
  uint64_t seed = 0;
};

struct RansacResult {
  Eigen::Matrix3d essential = Eigen::Matrix3d::Zero();
  std::vector<char> inlier_mask;
  int num_inliers = 0;
};

/// Plain RANSAC over eight-point minimal-ish samples, followed by one
/// refit on the winning inlier set. Throws NumericalError when no model
/// reaches eight inliers.
RansacResult ransac_essential(const std::vector<Eigen::Vector2d>& pts_a,
                              const std::vector<Eigen::Vector2d>& pts_b,
                              const RansacParams& params);

/// Chooses among the four (R, t) factorizations of E by triangulating the
/// given correspondences and counting points in front of both cameras.
/// The returned translation has unit norm.
RelativePose recover_pose(const Eigen::Matrix3d& essential,
                          const std::vector<Eigen::Vector2d>& pts_a,
                          const std::vector<Eigen::Vector2d>& pts_b,
                          const std::vector<char>* mask = nullptr);

struct PoseError {
  double rot_deg = 0;
  double trans_deg = 0;
  double max_deg = 0;
};

/// Rotation angle of R_est * R_gt^T and the angle between translation
/// directions, both via atan2 so exact agreement reports exactly zero.
PoseError pose_error(const RelativePose& estimated, const RelativePose& ground_truth);

/// Pose-estimation AUC at each threshold: 100 * mean_i max(0, 1 - err_i/tau).
/// Non-finite errors count as failures (zero contribution).
std::vector<double> auc(const std::vector<double>& errors_deg,
                        const std::vector<double>& thresholds_deg);

/// Multi-view DLT triangulation. `cameras` are 3x4 matrices [R|t] acting on
/// world points, `points` are normalized image observations. Throws
/// NumericalError for degenerate configurations or points at infinity.
Eigen::Vector3d triangulate_dlt(const std::vector<Eigen::Matrix<double, 3, 4>>& cameras,
                                const std::vector<Eigen::Vector2d>& points);

}  // namespace xrefine
