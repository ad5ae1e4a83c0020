#ifndef LLHA_EVALUATION_HPP
#define LLHA_EVALUATION_HPP

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "llha/geometry.hpp"
#include "llha/network.hpp"
#include "llha/ransac.hpp"
#include "llha/scene.hpp"
#include "llha/training.hpp"

namespace llha {

// Classification metrics in percent. An empty denominator (no positive
// decisions, or no positive labels) yields 0 with the matching flag set.
struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f_score = 0.0;
  long true_positives = 0;
  long false_positives = 0;
  long false_negatives = 0;
  bool no_positive_decisions = false;
  bool no_positive_labels = false;
};

PRF prf(const Eigen::VectorXi& decisions, const Eigen::VectorXi& labels);

// mAP@t over pose errors: mean over sub-thresholds {5, 10, ..., t} degrees
// of the fraction of pairs whose max(rotation, translation) error is below
// the sub-threshold, in percent. threshold_deg must be a positive multiple
// of 5; an empty list has no defined value (callers report it absent).
double map_metric(const std::vector<PoseError>& errors, double threshold_deg);

struct BaselineResult {
  Eigen::VectorXi decisions;  // residual < threshold under the best model
  CameraPose pose;
  EssentialMatrix essential;    // projected best model
  bool low_confidence = false;  // no model, or fewer than 8 supporting inliers
};

// Pure RANSAC over all correspondences: the comparison row that uses no
// learned weights at all.
BaselineResult ransac_baseline(const CorrespondenceSet& corr, const RansacConfig& cfg = {});

// Per-scene prediction interface so the evaluation harness can run the
// network and the label-oracle test double through identical plumbing.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual Prediction predict(const CorrespondenceSet& corr, bool with_ransac,
                             const RansacConfig& ransac) = 0;
};

class NetworkPredictor final : public Predictor {
 public:
  explicit NetworkPredictor(LlhaNet& net) : net_(&net) {}
  Prediction predict(const CorrespondenceSet& corr, bool with_ransac,
                     const RansacConfig& ransac) override;

 private:
  LlhaNet* net_;
};

// Upper-bound harness check: weights := labels (scaled into the solver's
// half-open range), decisions := labels, pose through the shared path.
class OraclePredictor final : public Predictor {
 public:
  Prediction predict(const CorrespondenceSet& corr, bool with_ransac,
                     const RansacConfig& ransac) override;
};

struct EvalOptions {
  std::vector<int> map_thresholds = {5, 10, 20};  // degrees
  RansacConfig ransac;
};

struct EvalReport {
  PRF classification;  // pooled over all scenes
  std::map<int, double> map_no_ransac;    // threshold deg -> percent
  std::map<int, double> map_with_ransac;  // absent keys when poses are missing
  bool map_absent = false;
  std::string notice;
  std::vector<PoseError> errors_no_ransac;  // per scene, in dataset order
  std::vector<PoseError> errors_with_ransac;
  int scenes = 0;
  int scenes_with_pose = 0;
  int low_confidence_no_ransac = 0;
  int low_confidence_with_ransac = 0;
  double wall_clock_s = 0.0;
};

// Runs `predictor` over every scene, with and without RANSAC
// post-processing, and aggregates pooled P/R/F plus mAP at the requested
// thresholds. Scenes without ground-truth pose contribute to P/R/F only;
// if none carries a pose, mAP is reported absent with a notice.
EvalReport evaluate(const Dataset& dataset, Predictor& predictor, const EvalOptions& options = {});

// Loads the checkpoint (config-hash refusal propagates) and evaluates it.
EvalReport evaluate_checkpoint(const Dataset& dataset, const std::string& checkpoint_path,
                               const EvalOptions& options = {});

// Versioned JSON round trip and a fixed-width human-readable table.
std::string eval_report_json(const EvalReport& report);
EvalReport eval_report_from_json(const std::string& text);
std::string eval_report_table(const EvalReport& report);

enum class AblationAxis { Modules, Placement, Pooling };

struct AblationCell {
  std::string name;
  NetworkConfig config;
  bool ok = false;
  std::string error;
  double val_f = 0.0;   // best validation F over the shared budget, percent
  double map5 = 0.0;    // no-RANSAC mAP@5 on the validation scenes
  std::int64_t parameters = 0;
  double train_seconds = 0.0;
};

struct AblationSpec {
  std::vector<AblationAxis> axes = {AblationAxis::Modules};
  NetworkConfig base;       // template for every cell
  TrainConfig budget;       // shared seed and iteration budget
  SceneConfig scene;        // dataset template
  int n_scenes = 10;
  std::uint64_t data_seed = 0;
  std::string work_dir = "ablation_runs";
};

// Trains every selected configuration under identical data, seed and budget
// and reports comparable scores. Per-cell failures are recorded in the cell
// and the grid continues.
std::vector<AblationCell> ablation_grid(const AblationSpec& spec);
std::string ablation_table(const std::vector<AblationCell>& cells);

// Static-image plot writers (standalone SVG documents).
std::string prf_bars_svg(const std::vector<std::pair<std::string, PRF>>& rows);
std::string map_table_svg(const EvalReport& report);

}  // namespace llha

#endif  // LLHA_EVALUATION_HPP
