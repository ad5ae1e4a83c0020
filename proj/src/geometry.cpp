#include "llha/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

namespace llha {

namespace {

constexpr double kOrthoTol = 1e-9;
constexpr double kPi = 3.14159265358979323846;

inline double deg(double rad) { return rad * 180.0 / kPi; }

}  // namespace

void CameraPose::validate() const {
  if (!rotation.allFinite() || !translation.allFinite())
    throw ValidationError("pose contains non-finite entries");
  const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).norm();
  if (ortho > kOrthoTol) throw ValidationError("rotation is not orthonormal");
  if (std::abs(rotation.determinant() - 1.0) > kOrthoTol)
    throw ValidationError("rotation determinant is not +1");
  if (translation.norm() == 0.0) throw DegenerateError("translation is the zero vector");
}

void EssentialMatrix::validate() const {
  if (!m.allFinite()) throw ValidationError("essential matrix contains non-finite entries");
  if (std::abs(m.norm() - 1.0) > 1e-9)
    throw ValidationError("essential matrix is not unit Frobenius norm");
  if (projected) {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m);
    const Eigen::Vector3d s = svd.singularValues();
    const double scale = s(0);
    if (std::abs(s(1) - scale) > 1e-6 * std::max(1.0, scale) || std::abs(s(2)) > 1e-6)
      throw ValidationError("projected essential matrix has singular values away from (1,1,0)");
  }
}

void CorrespondenceSet::validate(bool for_solver) const {
  if (coords.cols() != 4) throw ValidationError("correspondence coords must be N x 4");
  if (!coords.allFinite()) throw ValidationError("correspondence coords contain non-finite values");
  if (coords.array().abs().maxCoeff() > 10.0)
    throw ValidationError("correspondence coordinate exceeds the normalized-plane bound of 10");
  if (for_solver && coords.rows() < 8)
    throw ValidationError("solver needs at least 8 correspondences");
  if (labels && labels->size() != coords.rows())
    throw ValidationError("label vector length does not match correspondence count");
}

Eigen::Matrix3d cross_product_matrix(const Eigen::Vector3d& t) {
  Eigen::Matrix3d m;
  m << 0, -t.z(), t.y(), t.z(), 0, -t.x(), -t.y(), t.x(), 0;
  return m;
}

EssentialMatrix essential_from_pose(const CameraPose& pose) {
  pose.validate();
  Eigen::Matrix3d e = cross_product_matrix(pose.translation) * pose.rotation;
  const double norm = e.norm();
  if (norm == 0.0) throw DegenerateError("degenerate pose: zero translation");
  // [t]x R has singular values (|t|, |t|, 0), so the result is projected by
  // construction.
  return EssentialMatrix{e / norm, true};
}

Vector symmetric_epipolar_distance_mixed(const EssentialMatrix& numerator,
                                         const EssentialMatrix& denominator,
                                         const CorrespondenceSet& corr) {
  corr.validate();
  if (!numerator.m.allFinite() || !denominator.m.allFinite())
    throw ValidationError("essential matrix contains non-finite entries");
  const Eigen::Index n = corr.size();
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d v1(corr.coords(i, 0), corr.coords(i, 1), 1.0);
    const Eigen::Vector3d v2(corr.coords(i, 2), corr.coords(i, 3), 1.0);
    const double a = v2.dot(numerator.m * v1);
    const Eigen::Vector3d ev1 = denominator.m * v1;
    const Eigen::Vector3d etv2 = denominator.m.transpose() * v2;
    const double d =
        ev1(0) * ev1(0) + ev1(1) * ev1(1) + etv2(0) * etv2(0) + etv2(1) * etv2(1);
    out(i) = a * a / std::max(d, kEpipolarDenomClamp);
  }
  return out;
}

Vector symmetric_epipolar_distance(const EssentialMatrix& e, const CorrespondenceSet& corr) {
  return symmetric_epipolar_distance_mixed(e, e, corr);
}

Matrix epipolar_constraint_matrix(const CorrespondenceSet& corr) {
  const Eigen::Index n = corr.size();
  Matrix x(n, 9);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x1 = corr.coords(i, 0), y1 = corr.coords(i, 1);
    const double x2 = corr.coords(i, 2), y2 = corr.coords(i, 3);
    x.row(i) << x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, 1.0;
  }
  return x;
}

EightPointSystem solve_weighted_eight_point_system(const Matrix& constraint, const Vector& w) {
  Eigen::Matrix<double, 9, 9> gram = Eigen::Matrix<double, 9, 9>::Zero();
  // X' diag(w) X accumulated as rank-1 updates; weights enter once, not
  // squared.
  for (Eigen::Index i = 0; i < constraint.rows(); ++i) {
    if (w(i) == 0.0) continue;
    gram.noalias() += w(i) * constraint.row(i).transpose() * constraint.row(i);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 9, 9>> eig(gram);
  EightPointSystem sys;
  sys.eigenvectors = eig.eigenvectors();
  sys.eigenvalues = eig.eigenvalues();
  sys.eigen_gap = sys.eigenvalues(1) - sys.eigenvalues(0);
  sys.solution = sys.eigenvectors.col(0);
  // Fix the eigenvector's sign so runs are reproducible bit-for-bit.
  Eigen::Index imax = 0;
  sys.solution.cwiseAbs().maxCoeff(&imax);
  if (sys.solution(imax) < 0.0) sys.solution = -sys.solution;
  return sys;
}

EssentialMatrix weighted_eight_point(const CorrespondenceSet& corr, const WeightVector& w,
                                     GeometryDiagnostics* diag) {
  corr.validate(true);
  if (w.size() != corr.size()) throw ValidationError("weight vector length mismatch");
  if (!w.allFinite() || w.minCoeff() < 0.0 || w.maxCoeff() >= 1.0)
    throw ValidationError("weights must be finite and in [0, 1)");
  const Eigen::Index usable = (w.array() > kSolverWeightFloor).count();
  if (usable < 8) {
    if (diag) ++diag->weight_floor_fallbacks;
    throw ValidationError("fewer than 8 weights above the solver floor");
  }
  const Matrix x = epipolar_constraint_matrix(corr);
  const EightPointSystem sys = solve_weighted_eight_point_system(x, w);
  if (sys.eigen_gap < kSolverDegenerateGap) {
    if (diag) ++diag->rank_deficient_fallbacks;
    throw DegenerateError("rank-deficient weighted eight-point system");
  }
  EssentialMatrix e;
  e.m = Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(sys.solution.data());
  e.m /= e.m.norm();
  e.projected = false;
  return e;
}

EssentialMatrix project_to_essential(const EssentialMatrix& e, GeometryDiagnostics* diag) {
  if (!e.m.allFinite()) throw ValidationError("essential matrix contains non-finite entries");
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(e.m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  if (diag && svd.singularValues()(1) < 1e-9) ++diag->rank1_projections;
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  Eigen::Vector3d s(inv_sqrt2, inv_sqrt2, 0.0);
  EssentialMatrix out;
  out.m = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
  out.projected = true;
  return out;
}

Eigen::Vector3d triangulate(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation,
                            double x1, double y1, double x2, double y2) {
  // Rows of A are the cross-product constraints x_i ^ (P_i X) = 0 for the
  // cameras [I|0] and [R|t].
  Eigen::Matrix4d a;
  a.row(0) << 1, 0, -x1, 0;
  a.row(1) << 0, 1, -y1, 0;
  Eigen::Matrix<double, 3, 4> p2;
  p2.leftCols<3>() = rotation;
  p2.col(3) = translation;
  a.row(2) = p2.row(0) - x2 * p2.row(2);
  a.row(3) = p2.row(1) - y2 * p2.row(2);
  Eigen::JacobiSVD<Eigen::Matrix4d> svd(a, Eigen::ComputeFullV);
  Eigen::Vector4d h = svd.matrixV().col(3);
  if (std::abs(h(3)) < 1e-300) return Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  return h.head<3>() / h(3);
}

CameraPose recover_pose(const EssentialMatrix& e, const CorrespondenceSet& corr,
                        const WeightVector& w) {
  if (!e.projected) throw ValidationError("recover_pose needs a projected essential matrix");
  corr.validate(true);
  if (w.size() != corr.size()) throw ValidationError("weight vector length mismatch");

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(e.m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  Eigen::Matrix3d v = svd.matrixV();
  if (u.determinant() < 0) u = -u;
  if (v.determinant() < 0) v = -v;
  Eigen::Matrix3d wz;
  wz << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Eigen::Matrix3d r1 = u * wz * v.transpose();
  const Eigen::Matrix3d r2 = u * wz.transpose() * v.transpose();
  const Eigen::Vector3d t = u.col(2);

  const std::array<CameraPose, 4> candidates = {
      CameraPose{r1, t}, CameraPose{r1, -t}, CameraPose{r2, t}, CameraPose{r2, -t}};

  double best_score = 0.0;
  int best = -1;
  for (int c = 0; c < 4; ++c) {
    double score = 0.0;
    for (Eigen::Index i = 0; i < corr.size(); ++i) {
      if (w(i) <= 0.0) continue;
      const Eigen::Vector3d p = triangulate(candidates[c].rotation, candidates[c].translation,
                                            corr.coords(i, 0), corr.coords(i, 1),
                                            corr.coords(i, 2), corr.coords(i, 3));
      if (!p.allFinite()) continue;
      const double depth1 = p.z();
      const double depth2 = (candidates[c].rotation * p + candidates[c].translation).z();
      if (depth1 > 0.0 && depth2 > 0.0) score += w(i);
    }
    if (score > best_score) {
      best_score = score;
      best = c;
    }
  }
  if (best < 0) throw DegenerateError("unrecoverable pose: no candidate passes cheirality");

  CameraPose pose = candidates[best];
  pose.translation.normalize();
  return pose;
}

PoseError pose_error(const CameraPose& estimated, const CameraPose& truth) {
  estimated.validate();
  truth.validate();
  PoseError err;
  const double cos_rot =
      ((estimated.rotation.transpose() * truth.rotation).trace() - 1.0) / 2.0;
  err.rotation_deg = deg(std::acos(std::clamp(cos_rot, -1.0, 1.0)));
  const double cos_trans = estimated.translation.normalized().dot(truth.translation.normalized());
  err.translation_deg = deg(std::acos(std::clamp(cos_trans, -1.0, 1.0)));
  return err;
}

Eigen::VectorXi label_inliers(const CorrespondenceSet& corr, const EssentialMatrix& e,
                              double threshold) {
  const Vector residuals = symmetric_epipolar_distance(e, corr);
  Eigen::VectorXi labels(residuals.size());
  for (Eigen::Index i = 0; i < residuals.size(); ++i)
    labels(i) = residuals(i) < threshold ? 1 : 0;
  return labels;
}

}  // namespace llha
