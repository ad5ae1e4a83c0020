#ifndef LLHA_GEOMETRY_HPP
#define LLHA_GEOMETRY_HPP

#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "llha/common.hpp"

namespace llha {

// Relative pose between two calibrated views. `rotation` is orthonormal with
// determinant +1, `translation` is nonzero (scale is arbitrary for an
// essential matrix; recover_pose returns it unit-norm).
struct CameraPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::UnitZ();

  void validate() const;
};

// 3x3 essential matrix, kept at unit Frobenius norm. `projected` marks
// matrices whose singular values are (1,1,0)/sqrt(2).
struct EssentialMatrix {
  Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
  bool projected = false;

  void validate() const;
};

// N putative correspondences in normalized (calibrated) image coordinates.
// Each row of `coords` is (x, y, x', y'). Labels, pose and the ground-truth
// essential matrix are present for generated/annotated data only.
struct CorrespondenceSet {
  Matrix coords;  // N x 4
  std::optional<Eigen::VectorXi> labels;
  std::optional<CameraPose> pose;
  std::optional<EssentialMatrix> gt_essential;

  Eigen::Index size() const { return coords.rows(); }
  void validate(bool for_solver = false) const;
};

// Per-correspondence inlier weights, each in [0, 1).
using WeightVector = Vector;

constexpr double kEpipolarDenomClamp = 1e-15;
constexpr double kDefaultInlierThreshold = 1e-4;
constexpr double kSolverWeightFloor = 1e-6;
constexpr double kSolverEigenGapClamp = 1e-6;
constexpr double kSolverDegenerateGap = 1e-12;

// The canonical "weight one": binary and unit weights handed to the solver
// must stay inside the half-open weight contract.
constexpr double kWeightCap = 1.0 - 1e-12;

// Optional out-channel for numerically noteworthy events inside the solver
// and projection routines. All fields start at zero.
struct GeometryDiagnostics {
  long rank_deficient_fallbacks = 0;  // eight-point eigen-gap below 1e-12
  long weight_floor_fallbacks = 0;    // fewer than 8 usable weights
  long rank1_projections = 0;         // project_to_essential saw a rank-1 input
};

// E = [t]x R, normalized to unit Frobenius norm. Throws DegenerateError for a
// zero translation.
EssentialMatrix essential_from_pose(const CameraPose& pose);

Eigen::Matrix3d cross_product_matrix(const Eigen::Vector3d& t);

// Squared epipolar residual of Eq-16 form for every correspondence:
//   (v2' E v1)^2 / ((E v1)_1^2 + (E v1)_2^2 + (E' v2)_1^2 + (E' v2)_2^2)
// with the denominator clamped below at kEpipolarDenomClamp so the 0/0 case
// (point at both principal points under forward motion) evaluates to 0.
Vector symmetric_epipolar_distance(const EssentialMatrix& e, const CorrespondenceSet& corr);

// Variant with distinct numerator/denominator matrices. The single-matrix
// overload is the default everywhere; this form exists to reproduce a mixed
// convention some formulations use (estimated matrix in the numerator,
// reference matrix in the denominator).
Vector symmetric_epipolar_distance_mixed(const EssentialMatrix& numerator,
                                         const EssentialMatrix& denominator,
                                         const CorrespondenceSet& corr);

// N x 9 epipolar constraint matrix; row i is flatten(v2 v1') so that
// X * vec(E) stacks v2' E v1 over all correspondences.
Matrix epipolar_constraint_matrix(const CorrespondenceSet& corr);

// Full eigensystem of X' diag(w) X, needed both for the solve and for the
// solver's weight gradients. Eigenvalues ascending; columns of
// `eigenvectors` are unit length. `solution` is the smallest eigenvector
// with its sign fixed so the largest-magnitude entry is positive.
struct EightPointSystem {
  Eigen::Matrix<double, 9, 9> eigenvectors;
  Eigen::Matrix<double, 9, 1> eigenvalues;
  Eigen::Matrix<double, 9, 1> solution;
  double eigen_gap = 0.0;  // lambda_1 - lambda_0
};

EightPointSystem solve_weighted_eight_point_system(const Matrix& constraint, const Vector& w);

// Weighted eight-point solve: smallest eigenvector of X' diag(w) X reshaped
// row-major to 3x3 (already unit Frobenius norm). Throws ValidationError if
// fewer than 8 weights exceed kSolverWeightFloor and DegenerateError if the
// eigen-gap falls below kSolverDegenerateGap. Training-time fallbacks live in
// the autodiff op, not here.
EssentialMatrix weighted_eight_point(const CorrespondenceSet& corr, const WeightVector& w,
                                     GeometryDiagnostics* diag = nullptr);

// SVD-project onto the essential manifold: singular values replaced by
// (1,1,0)/sqrt(2). Idempotent on already-projected inputs.
EssentialMatrix project_to_essential(const EssentialMatrix& e, GeometryDiagnostics* diag = nullptr);

// Cheirality-based disambiguation of the four (R, +-t) decompositions. The
// weighted count of triangulated points with positive depth in both cameras
// selects the candidate; ties break toward the first. Throws DegenerateError
// when every candidate scores zero.
CameraPose recover_pose(const EssentialMatrix& e, const CorrespondenceSet& corr,
                        const WeightVector& w);

// Angular pose error in degrees: rotation angle of R_est' R_true and the
// (direction-sensitive, 0..180) angle between translation directions.
struct PoseError {
  double rotation_deg = 0.0;
  double translation_deg = 0.0;
  double max_deg() const { return rotation_deg > translation_deg ? rotation_deg : translation_deg; }
};

PoseError pose_error(const CameraPose& estimated, const CameraPose& truth);

// 1 iff the Eq-16 residual under `e` is below `threshold`.
Eigen::VectorXi label_inliers(const CorrespondenceSet& corr, const EssentialMatrix& e,
                              double threshold = kDefaultInlierThreshold);

// Linear (DLT) triangulation of one correspondence under cameras [I|0] and
// [R|t]; returns the point in the first camera frame.
Eigen::Vector3d triangulate(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation,
                            double x1, double y1, double x2, double y2);

}  // namespace llha

#endif  // LLHA_GEOMETRY_HPP
