#ifndef LLHA_SCENE_HPP
#define LLHA_SCENE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "llha/geometry.hpp"

namespace llha {

// Parameters of one synthetic two-view scene. The seed fully determines the
// scene; everything else bounds the sampling.
struct SceneConfig {
  int n_correspondences = 512;
  double outlier_ratio = 0.0;        // in [0, 1)
  double pixel_noise_sigma = 0.0;    // normalized-coordinate units
  double max_rotation_deg = 30.0;    // in (0, 90]
  double depth_min = 1.0;
  double depth_max = 4.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// A generated scene: correspondences with authoritative labels (recomputed
// from the ground-truth geometry after outlier injection), the injection
// mask, and the provenance config.
struct ScenePair {
  CorrespondenceSet corr;
  Eigen::VectorXi injected_outlier_mask;  // 1 where the second point was replaced
  SceneConfig config;
};

// In-memory dataset handle. Imported data may carry no mask (size 0) and no
// labels/pose, depending on the source format.
struct Dataset {
  std::vector<ScenePair> scenes;
  SceneConfig header_config;  // template config recorded in the container header

  std::size_t size() const { return scenes.size(); }
};

// Samples a pose, projects frustum points into both views, perturbs inlier
// points with isotropic Gaussian noise, replaces floor(outlier_ratio * N)
// second-image points with uniform draws over [-1,1]^2, and relabels every
// correspondence against the ground-truth essential matrix. A point that
// lands behind (or unusably far outside) either view is resampled; 1000
// rejections for one slot raise DegenerateError.
ScenePair generate_scene(const SceneConfig& config);

// n_scenes independent scenes; scene i uses split_seed(seed, i) so order and
// parallelism cannot change the result.
Dataset generate_dataset(int n_scenes, const SceneConfig& config_template, std::uint64_t seed);

// Container format "llha-v1": an 8-byte length + JSON header, then per scene
// six little-endian f64 arrays in fixed order (coords, labels, rotation,
// translation, essential, mask), each preceded by an 8-byte element count.
// Absent fields are written as zero-length arrays.
void write_dataset(const std::string& path, const Dataset& dataset);
Dataset read_dataset(const std::string& path);

// Dispatch on format_id: "llha-v1" (native container) or "csv-corr" (one
// scene per file; header names the columns, x1,y1,x2,y2 required and label
// optional). Imported sets are validated; sets without labels load with
// labels absent.
Dataset import_external(const std::string& path, const std::string& format_id);

}  // namespace llha

#endif  // LLHA_SCENE_HPP
