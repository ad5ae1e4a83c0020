#ifndef LLHA_TRAINING_HPP
#define LLHA_TRAINING_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "llha/network.hpp"
#include "llha/scene.hpp"

namespace llha {

struct TrainConfig {
  int batch_size = 32;
  double learning_rate = 1e-4;
  int alpha_warmup_iters = 2000;
  double alpha = 0.1;
  int total_iters = 0;
  std::uint64_t seed = 0;
  bool balance = true;  // inverse-class-frequency BCE reweighting per instance
  int log_every = 50;   // metrics-trace and validation cadence

  void validate() const;
};

// Decomposition of one hybrid-loss evaluation. `stage_classification` holds
// one BCE term per supervised head (each extraction stage, then the final
// integration head); total = sum of those + alpha_used * essential.
struct LossReport {
  double total = 0.0;
  double classification = 0.0;
  double essential = 0.0;
  double alpha_used = 0.0;
  std::vector<double> stage_classification;
  long essential_skips = 0;  // zero-inlier instances whose term was skipped
};

// Mean BCE on the sigmoid of logits. With balance, positive and negative
// terms are reweighted by inverse class frequency within the instance
// (count floored at 1); an absent class contributes weight 0.
double classification_loss(const Vector& logits, const Eigen::VectorXi& labels, bool balance);

// Mean squared symmetric epipolar residual of e_hat over ground-truth
// inliers only, each term capped at 0.25. Zero inliers: returns 0 and bumps
// *skips when given.
double essential_loss(const EssentialMatrix& e_hat, const CorrespondenceSet& corr,
                      const Eigen::VectorXi& labels, long* skips = nullptr);

// Plain-value hybrid loss of one inference output. alpha_used is exactly 0
// strictly before the warmup boundary and exactly cfg.alpha from it onward.
LossReport hybrid_loss(const NetworkOutput& output, const CorrespondenceSet& corr, int iter,
                       const TrainConfig& cfg);

struct HybridLossVars {
  ad::Var total;
  std::vector<ad::Var> stage_terms;
  ad::Var essential;
  LossReport report;
};

// Batched hybrid loss on the tape. `heads` are the supervised logit columns
// ((B*N) x 1 each); `final_weights` is the mapped weight column feeding the
// per-instance eight-point solves of the essential term. `batch` carries
// (B*N) x 4 coords plus labels; instances are consecutive n_per-row groups.
// The essential subgraph is always built (its value is traced through the
// warmup) but joins `total` only when alpha_used > 0.
HybridLossVars hybrid_loss_graph(ad::Tape& tape, const std::vector<ad::Var>& heads,
                                 ad::Var final_weights, const CorrespondenceSet& batch,
                                 Eigen::Index n_per, int iter, const TrainConfig& cfg);

using NamedTensors = std::vector<std::pair<std::string, ad::Tensor*>>;

// Adam with bias correction; one moment slot per registry tensor, in order.
struct Adam {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long t = 0;
  std::vector<Matrix> m, v;

  void init(const NamedTensors& params);
  void step(const NamedTensors& params);
};

constexpr double kGradClipNorm = 10.0;

// Scales every gradient so the global L2 norm is at most max_norm; returns
// the pre-clip norm.
double clip_gradients(const NamedTensors& params, double max_norm);

// Shared split rule: the last val-count scenes by index are validation.
// val = max(1, n/5) for n >= 2, else 0; returns (train_count, val_count).
std::pair<int, int> train_val_split(int n_scenes);

struct TrainResult {
  int iters_run = 0;
  double best_val_f = -1.0;
  int best_iter = -1;
  std::string best_checkpoint_path;
  std::string last_checkpoint_path;
  std::string trace_path;
  long essential_skips = 0;
  long weight_floor_fallbacks = 0;
  long stop_grad_fallbacks = 0;
};

// Deterministic single-threaded training loop. The last 20% of scenes by
// index form the validation split; batches sample the rest uniformly with
// replacement under batch seed split_seed(cfg.seed, iter). Writes
// trace.jsonl plus best.ckpt / last.ckpt into out_dir (best by pooled
// validation F). `final_net` receives the end-of-run parameters;
// `warm_start` must match net_config's hash and replaces fresh
// initialization. A non-finite loss aborts with the batch seed recorded in
// the trace and the DegenerateError message.
TrainResult train(const Dataset& dataset, const NetworkConfig& net_config,
                  const TrainConfig& train_config, const std::string& out_dir,
                  LlhaNet* final_net = nullptr, const LlhaNet* warm_start = nullptr);

}  // namespace llha

#endif  // LLHA_TRAINING_HPP
