#ifndef LLHA_NETWORK_HPP
#define LLHA_NETWORK_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "llha/blocks.hpp"
#include "llha/geometry.hpp"
#include "llha/ransac.hpp"
#include "llha/tape.hpp"

namespace llha {

// Feature-block kind occupying the backbone slots. The full model uses PIHA;
// the reduced kinds exist for the module-combination ablation grid.
enum class BackboneBlock { ConvBlock, LLF, HA, PIHA };

struct NetworkConfig {
  Eigen::Index channels = 128;
  int piha_per_extraction = 7;
  int extraction_stages = 3;
  Eigen::Index clusters = 32;
  int integration_piha = 3;
  int h = 4;
  PoolKind pool = PoolKind::GAP;
  BackboneBlock block = BackboneBlock::PIHA;
  EndBlockKind ha_front = EndBlockKind::LLF;
  EndBlockKind ha_back = EndBlockKind::LLF;
  bool gated_attention = false;
  bool use_pool = true;

  void validate() const;
  static NetworkConfig desk();   // C=64, m=16: test-scale defaults
  static NetworkConfig paper();  // C=128, m=500: full-scale reference preset

  // Key-sorted JSON over the full field set; the checkpoint hash is FNV-1a of
  // this string, so field changes intentionally invalidate old checkpoints.
  std::string canonical_json() const;
  std::uint64_t hash() const;
  static NetworkConfig from_json_text(const std::string& text);
};

// One backbone slot; exactly one member is active per `kind`.
struct FeatureBlock {
  BackboneBlock kind = BackboneBlock::PIHA;
  PIHA piha;
  LLF llf;
  HA ha;
  PointCN cn;

  void init(const NetworkConfig& cfg, Rng& rng);
  void register_params(ParamRegistry& reg, const std::string& path);
  ad::Var forward(ad::Tape& tape, ad::Var x, Eigen::Index n_per, bool training);
};

struct ExtractionStage {
  Conv1x1 embed;  // 4 -> C (stage 1) or 5 -> C (later stages)
  std::vector<FeatureBlock> blocks;
  PoolOAUnpool pool;
  Conv1x1 logits_conv;  // C -> 1
};

// Tape handles produced by one forward pass; values remain readable until
// backward() frees them.
struct ForwardVars {
  std::vector<ad::Var> stage_inputs;    // N x 4, then N x 5
  std::vector<ad::Var> stage_features;  // N x C each
  std::vector<ad::Var> stage_logits;    // N x 1 per extraction stage
  std::vector<ad::Var> stage_weights;   // mapped weights per extraction stage
  ad::Var final_logits;                 // N x 1
  ad::Var final_weights;                // N x 1
};

struct NetworkOutput {
  Vector logits;
  Vector p;  // equals w by the weight mapping
  Vector w;
  EssentialMatrix essential;  // weighted solve on w (unprojected)
  Vector solver_weights;      // the weights actually handed to the solver
  bool solver_fallback = false;  // fewer than 8 usable weights: top-8 fallback
  std::vector<Matrix> stage_features;
  std::vector<Vector> stage_logits;
};

struct Prediction {
  Eigen::VectorXi decisions;  // logit > 0
  CameraPose pose;
  EssentialMatrix essential;  // projected model behind the pose
  Vector weights;
  bool low_confidence = false;
};

struct WeightMapping {
  Vector p;
  Vector w;
  Eigen::VectorXi decisions;
};

// w_i = tanh(max(logit_i, 0)) with the logit capped at 1e4 and the result
// capped strictly below 1; p = w; decision = (logit > 0). Throws
// ValidationError on non-finite logits.
WeightMapping logits_to_weights(const Vector& logits);

// The weight-mapping chain on the tape, gradient-correct against the plain
// function above.
ad::Var weight_map(ad::Tape& tape, ad::Var logits);

// Pose path shared by network prediction and the oracle evaluation double.
// Without RANSAC: weighted solve over w (top-8-by-weight fallback when fewer
// than 8 weights clear the solver floor), projection, weighted cheirality.
// With RANSAC: vanilla RANSAC over the decision-positive subset (again top-8
// fallback when the subset is short); if no sample ever solves, falls back to
// the weighted path. `low_confidence` reports any fallback.
Prediction pose_from_weights(const CorrespondenceSet& corr, const Vector& w,
                             const Eigen::VectorXi& decisions, bool with_ransac,
                             const RansacConfig& ransac = {});

struct LlhaNet {
  NetworkConfig config;
  std::vector<ExtractionStage> stages;
  Conv1x1 reduce;  // stages*C -> C
  std::vector<FeatureBlock> integration;
  Conv1x1 final_conv;  // C -> 1

  void init(const NetworkConfig& cfg, std::uint64_t seed);

  // Rebuilt on demand; pointers remain valid while the net is alive and not
  // re-initialized.
  ParamRegistry registry();
  std::int64_t parameter_count();

  // coords is (B*N) x 4 with uniform instance length n_per >= 8.
  ForwardVars forward(ad::Tape& tape, const Matrix& coords, Eigen::Index n_per, bool training);

  NetworkOutput infer(const CorrespondenceSet& corr);
  Prediction predict(const CorrespondenceSet& corr, bool with_ransac,
                     const RansacConfig& ransac = {});

  // Named-tensor archive at `path` plus a JSON config sidecar at
  // `path`.json; loading refuses config-hash mismatches.
  void save(const std::string& path);
  static LlhaNet load(const std::string& path);
};

}  // namespace llha

#endif  // LLHA_NETWORK_HPP
