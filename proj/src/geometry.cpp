#include "xrefine/geometry.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>

namespace xrefine {
namespace {

constexpr double kPi = 3.14159265358979323846;

struct Conditioning {
  Eigen::Matrix3d transform;
  std::vector<Eigen::Vector2d> points;
};

// Hartley normalization: zero centroid, mean distance sqrt(2).
Conditioning condition_points(const std::vector<Eigen::Vector2d>& pts) {
  Eigen::Vector2d centroid = Eigen::Vector2d::Zero();
  for (const auto& p : pts) centroid += p;
  centroid /= static_cast<double>(pts.size());
  double mean_dist = 0;
  for (const auto& p : pts) mean_dist += (p - centroid).norm();
  mean_dist /= static_cast<double>(pts.size());
  if (mean_dist < 1e-12) throw NumericalError("eight_point: coincident points");
  const double s = std::sqrt(2.0) / mean_dist;

  Conditioning c;
  c.transform << s, 0, -s * centroid.x(), 0, s, -s * centroid.y(), 0, 0, 1;
  c.points.reserve(pts.size());
  for (const auto& p : pts) c.points.emplace_back(s * (p - centroid));
  return c;
}

// Deterministic representative: Frobenius norm sqrt(2), largest-magnitude
// entry positive.
void fix_scale_and_sign(Eigen::Matrix3d& e) {
  const double n = e.norm();
  if (n < 1e-15) throw NumericalError("eight_point: zero essential matrix");
  e *= std::sqrt(2.0) / n;
  int r = 0, c = 0;
  e.cwiseAbs().maxCoeff(&r, &c);
  if (e(r, c) < 0) e = -e;
}

Eigen::Vector3d triangulate_two_view(const Eigen::Matrix<double, 3, 4>& pa,
                                     const Eigen::Matrix<double, 3, 4>& pb,
                                     const Eigen::Vector2d& xa, const Eigen::Vector2d& xb) {
  Eigen::Matrix4d a;
  a.row(0) = xa.x() * pa.row(2) - pa.row(0);
  a.row(1) = xa.y() * pa.row(2) - pa.row(1);
  a.row(2) = xb.x() * pb.row(2) - pb.row(0);
  a.row(3) = xb.y() * pb.row(2) - pb.row(1);
  Eigen::JacobiSVD<Eigen::Matrix4d> svd(a, Eigen::ComputeFullV);
  Eigen::Vector4d x = svd.matrixV().col(3);
  if (std::abs(x(3)) < 1e-12) return Eigen::Vector3d::Constant(std::numeric_limits<double>::quiet_NaN());
  return x.head<3>() / x(3);
}

}  // namespace

Eigen::Matrix3d eight_point(const std::vector<Eigen::Vector2d>& pts_a,
                            const std::vector<Eigen::Vector2d>& pts_b) {
  if (pts_a.size() != pts_b.size()) throw ShapeError("eight_point: point count mismatch");
  const size_t n = pts_a.size();
  if (n < 8) throw ShapeError("eight_point: need at least 8 correspondences");

  const Conditioning ca = condition_points(pts_a);
  const Conditioning cb = condition_points(pts_b);

  // Row i encodes x_b^T E x_a = 0 with E flattened row-major.
  Eigen::MatrixXd m(n, 9);
  for (size_t i = 0; i < n; ++i) {
    const double ax = ca.points[i].x(), ay = ca.points[i].y();
    const double bx = cb.points[i].x(), by = cb.points[i].y();
    m.row(static_cast<Eigen::Index>(i)) << bx * ax, bx * ay, bx, by * ax, by * ay, by, ax, ay, 1.0;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeFullV);
  if (n > 8 && svd.singularValues()(7) < 1e-12 * svd.singularValues()(0))
    throw NumericalError("eight_point: degenerate configuration");
  const Eigen::Matrix<double, 9, 1> e_vec = svd.matrixV().col(8);
  Eigen::Matrix3d e_cond;
  e_cond << e_vec(0), e_vec(1), e_vec(2), e_vec(3), e_vec(4), e_vec(5), e_vec(6), e_vec(7), e_vec(8);

  Eigen::Matrix3d e = cb.transform.transpose() * e_cond * ca.transform;

  // Project to the essential manifold: singular values (s, s, 0).
  Eigen::JacobiSVD<Eigen::Matrix3d> esvd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = esvd.singularValues();
  if (sv(1) < 1e-12 * std::max(sv(0), 1e-300))
    throw NumericalError("eight_point: rank-deficient solution");
  const double s = 0.5 * (sv(0) + sv(1));
  e = esvd.matrixU() * Eigen::Vector3d(s, s, 0).asDiagonal() * esvd.matrixV().transpose();
  fix_scale_and_sign(e);
  return e;
}

RansacResult ransac_essential(const std::vector<Eigen::Vector2d>& pts_a,
                              const std::vector<Eigen::Vector2d>& pts_b,
                              const RansacParams& params) {
  if (pts_a.size() != pts_b.size()) throw ShapeError("ransac_essential: point count mismatch");
  const int n = static_cast<int>(pts_a.size());
  if (n < 8) throw NumericalError("ransac_essential: need at least 8 correspondences");
  if (params.iterations < 1) throw ShapeError("ransac_essential: iterations must be >= 1");

  const double thr_norm_sq =
      (params.threshold_px * params.threshold_px) / (params.fmean * params.fmean);

  Rng rng(params.seed);
  std::vector<Eigen::Vector2d> sample_a(8), sample_b(8);
  std::vector<int> idx(8);

  Eigen::Matrix3d best_e = Eigen::Matrix3d::Zero();
  int best_count = -1;

  auto count_inliers = [&](const Eigen::Matrix3d& e, std::vector<char>* mask) {
    int count = 0;
    if (mask) mask->assign(static_cast<size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
      double s;
      try {
        s = epipolar_residual<double>(e, pts_a[i].x(), pts_a[i].y(), pts_b[i].x(), pts_b[i].y(),
                                      EpipolarKind::Sampson);
      } catch (const NumericalError&) {
        continue;
      }
      if (s <= thr_norm_sq) {
        ++count;
        if (mask) (*mask)[static_cast<size_t>(i)] = 1;
      }
    }
    return count;
  };

  for (int it = 0; it < params.iterations; ++it) {
    // Sample 8 distinct indices.
    for (int k = 0; k < 8; ++k) {
      int candidate;
      bool fresh;
      do {
        candidate = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
        fresh = true;
        for (int j = 0; j < k; ++j)
          if (idx[j] == candidate) fresh = false;
      } while (!fresh);
      idx[k] = candidate;
      sample_a[k] = pts_a[candidate];
      sample_b[k] = pts_b[candidate];
    }
    Eigen::Matrix3d e;
    try {
      e = eight_point(sample_a, sample_b);
    } catch (const NumericalError&) {
      continue;
    }
    const int count = count_inliers(e, nullptr);
    if (count > best_count) {
      best_count = count;
      best_e = e;
    }
  }
  if (best_count < 8)
    throw NumericalError("ransac_essential: no model with at least 8 inliers");

  // Refit on the winning inlier set, then rescore.
  RansacResult result;
  count_inliers(best_e, &result.inlier_mask);
  std::vector<Eigen::Vector2d> in_a, in_b;
  for (int i = 0; i < n; ++i)
    if (result.inlier_mask[static_cast<size_t>(i)]) {
      in_a.push_back(pts_a[i]);
      in_b.push_back(pts_b[i]);
    }
  try {
    result.essential = eight_point(in_a, in_b);
  } catch (const NumericalError&) {
    result.essential = best_e;  // keep the consensus model if the refit degenerates
  }
  result.num_inliers = count_inliers(result.essential, &result.inlier_mask);
  if (result.num_inliers < 8)
    throw NumericalError("ransac_essential: refit lost the consensus set");
  return result;
}

RelativePose recover_pose(const Eigen::Matrix3d& essential,
                          const std::vector<Eigen::Vector2d>& pts_a,
                          const std::vector<Eigen::Vector2d>& pts_b,
                          const std::vector<char>* mask) {
  if (pts_a.size() != pts_b.size()) throw ShapeError("recover_pose: point count mismatch");
  if (pts_a.empty()) throw ShapeError("recover_pose: no correspondences");
  if (mask && mask->size() != pts_a.size())
    throw ShapeError("recover_pose: mask size mismatch");

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(essential, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  Eigen::Matrix3d v = svd.matrixV();
  if (u.determinant() < 0) u = -u;
  if (v.determinant() < 0) v = -v;
  Eigen::Matrix3d w;
  w << 0, -1, 0, 1, 0, 0, 0, 0, 1;

  const Eigen::Matrix3d r1 = u * w * v.transpose();
  const Eigen::Matrix3d r2 = u * w.transpose() * v.transpose();
  const Eigen::Vector3d t = u.col(2);

  const std::array<RelativePose, 4> candidates = {
      RelativePose{r1, t}, RelativePose{r1, -t}, RelativePose{r2, t}, RelativePose{r2, -t}};

  const Eigen::Matrix<double, 3, 4> pa = Eigen::Matrix<double, 3, 4>::Identity();
  int best = 0, best_votes = -1;
  for (int c = 0; c < 4; ++c) {
    Eigen::Matrix<double, 3, 4> pb;
    pb.leftCols<3>() = candidates[c].rotation;
    pb.col(3) = candidates[c].translation;
    int votes = 0;
    for (size_t i = 0; i < pts_a.size(); ++i) {
      if (mask && !(*mask)[i]) continue;
      const Eigen::Vector3d x = triangulate_two_view(pa, pb, pts_a[i], pts_b[i]);
      if (!x.allFinite()) continue;
      const double za = x.z();
      const double zb = (candidates[c].rotation * x + candidates[c].translation).z();
      if (za > 0 && zb > 0) ++votes;
    }
    if (votes > best_votes) {
      best_votes = votes;
      best = c;
    }
  }
  if (best_votes <= 0) throw NumericalError("recover_pose: cheirality test failed for all candidates");
  RelativePose pose = candidates[best];
  pose.translation.normalize();
  return pose;
}

PoseError pose_error(const RelativePose& estimated, const RelativePose& ground_truth) {
  const Eigen::Matrix3d q = estimated.rotation * ground_truth.rotation.transpose();
  // angle from both sine (axial part) and cosine (trace) for full-range accuracy
  const Eigen::Vector3d axial(q(2, 1) - q(1, 2), q(0, 2) - q(2, 0), q(1, 0) - q(0, 1));
  const double sin_r = 0.5 * axial.norm();
  const double cos_r = 0.5 * (q.trace() - 1.0);
  PoseError err;
  err.rot_deg = std::atan2(sin_r, cos_r) * 180.0 / kPi;

  const double na = estimated.translation.norm();
  const double nb = ground_truth.translation.norm();
  if (nb < 1e-15)
    throw NumericalError("pose_error: ground-truth translation is zero, direction undefined");
  if (na < 1e-15)
    throw NumericalError("pose_error: estimated translation is zero, direction undefined");
  const Eigen::Vector3d ta = estimated.translation / na;
  const Eigen::Vector3d tb = ground_truth.translation / nb;
  err.trans_deg = std::atan2(ta.cross(tb).norm(), ta.dot(tb)) * 180.0 / kPi;
  err.max_deg = std::max(err.rot_deg, err.trans_deg);
  return err;
}

std::vector<double> auc(const std::vector<double>& errors_deg,
                        const std::vector<double>& thresholds_deg) {
  if (errors_deg.empty()) throw ShapeError("auc: no errors given");
  std::vector<double> out;
  out.reserve(thresholds_deg.size());
  for (const double tau : thresholds_deg) {
    if (!(tau > 0)) throw ShapeError("auc: thresholds must be positive");
    double acc = 0;
    for (const double e : errors_deg)
      if (std::isfinite(e)) acc += std::max(0.0, 1.0 - e / tau);
    out.push_back(100.0 * acc / static_cast<double>(errors_deg.size()));
  }
  return out;
}

Eigen::Vector3d triangulate_dlt(const std::vector<Eigen::Matrix<double, 3, 4>>& cameras,
                                const std::vector<Eigen::Vector2d>& points) {
  if (cameras.size() != points.size()) throw ShapeError("triangulate_dlt: size mismatch");
  if (cameras.size() < 2) throw ShapeError("triangulate_dlt: need at least two views");

  Eigen::MatrixXd a(2 * cameras.size(), 4);
  for (size_t i = 0; i < cameras.size(); ++i) {
    const auto& p = cameras[i];
    a.row(static_cast<Eigen::Index>(2 * i)) = points[i].x() * p.row(2) - p.row(0);
    a.row(static_cast<Eigen::Index>(2 * i + 1)) = points[i].y() * p.row(2) - p.row(1);
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(2) < 1e-12 * sv(0))
    throw NumericalError("triangulate_dlt: degenerate configuration");
  const Eigen::Vector4d x = svd.matrixV().col(3);
  if (std::abs(x(3)) < 1e-12 * x.head<3>().norm())
    throw NumericalError("triangulate_dlt: point at infinity");
  return x.head<3>() / x(3);
}

}  // namespace xrefine
