#include "llha/ransac.hpp"

#include <numeric>
#include <utility>

#include "llha/common.hpp"

namespace llha {

CorrespondenceSet subset_rows(const CorrespondenceSet& corr,
                              const std::vector<Eigen::Index>& rows) {
  CorrespondenceSet out;
  out.coords.resize(static_cast<Eigen::Index>(rows.size()), 4);
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.coords.row(static_cast<Eigen::Index>(i)) = corr.coords.row(rows[i]);
  if (corr.labels) {
    Eigen::VectorXi lab(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
      lab(static_cast<Eigen::Index>(i)) = (*corr.labels)(rows[i]);
    out.labels = lab;
  }
  out.pose = corr.pose;
  out.gt_essential = corr.gt_essential;
  return out;
}

RansacResult ransac_essential(const CorrespondenceSet& corr, const RansacConfig& cfg) {
  corr.validate(true);
  if (cfg.iterations < 1) throw ConfigError("ransac: iterations must be >= 1");
  if (cfg.inlier_threshold <= 0.0) throw ConfigError("ransac: inlier threshold must be positive");

  const Eigen::Index n = corr.size();
  Rng rng(cfg.seed);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  // Solver weights live in [0, 1); any common positive value leaves the
  // minimal solve unchanged.
  const Vector unit_weights = Vector::Constant(8, kWeightCap);

  RansacResult best;
  best.inliers = Eigen::VectorXi::Zero(n);
  int best_count = -1;

  for (int it = 0; it < cfg.iterations; ++it) {
    for (Eigen::Index k = 0; k < 8; ++k) {
      const Eigen::Index j = k + static_cast<Eigen::Index>(rng.uniform_int(n - k));
      std::swap(idx[static_cast<std::size_t>(k)], idx[static_cast<std::size_t>(j)]);
    }
    CorrespondenceSet sample;
    sample.coords.resize(8, 4);
    for (Eigen::Index k = 0; k < 8; ++k)
      sample.coords.row(k) = corr.coords.row(idx[static_cast<std::size_t>(k)]);

    EssentialMatrix model;
    try {
      model = project_to_essential(weighted_eight_point(sample, unit_weights));
    } catch (const Error&) {
      continue;  // degenerate minimal sample; draw again
    }
    const Vector res = symmetric_epipolar_distance(model, corr);
    const Eigen::VectorXi in = (res.array() < cfg.inlier_threshold).cast<int>();
    const int count = in.sum();
    if (count > best_count) {
      best_count = count;
      best.essential = model;
      best.inliers = in;
    }
  }

  best.has_model = best_count >= 0;
  best.inlier_count = best_count > 0 ? best_count : 0;
  best.low_confidence = best_count < 8;
  return best;
}

}  // namespace llha
