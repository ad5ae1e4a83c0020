#ifndef LLHA_RANSAC_HPP
#define LLHA_RANSAC_HPP

#include <cstdint>
#include <vector>

#include "llha/geometry.hpp"

namespace llha {

struct RansacConfig {
  int iterations = 1000;
  double inlier_threshold = kDefaultInlierThreshold;
  std::uint64_t seed = 0;
};

struct RansacResult {
  EssentialMatrix essential;  // projected model of the best sample
  Eigen::VectorXi inliers;    // residual < threshold under the best model
  int inlier_count = 0;
  bool has_model = false;       // at least one sample produced a solvable model
  bool low_confidence = false;  // best model supports fewer than 8 inliers
};

// Vanilla hypothesize-and-verify: eight-point minimal samples scored by the
// symmetric epipolar residual. Best model by inlier count, first winner kept
// on ties, no refit. Deterministic given cfg.seed.
RansacResult ransac_essential(const CorrespondenceSet& corr, const RansacConfig& cfg);

// Row subset (coords and labels; pose and ground-truth essential carry over).
CorrespondenceSet subset_rows(const CorrespondenceSet& corr,
                              const std::vector<Eigen::Index>& rows);

}  // namespace llha

#endif  // LLHA_RANSAC_HPP
