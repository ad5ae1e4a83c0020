#ifndef LLHA_TAPE_HPP
#define LLHA_TAPE_HPP

#include <functional>
#include <vector>

#include "llha/common.hpp"
#include "llha/geometry.hpp"

// Minimal reverse-mode autodiff over Eigen matrices. One Tape per forward
// pass; nodes are appended in topological order, so the backward sweep is a
// reverse iteration. Activation memory is released as soon as a node's
// backward has run (nothing with a lower index can reference it).
namespace llha::ad {

// A learnable parameter (or its gradient accumulator). Lives outside the
// tape; leaves reference it, backward accumulates into `grad`.
struct Tensor {
  Matrix value;
  Matrix grad;

  void zero_grad() { grad = Matrix::Zero(value.rows(), value.cols()); }
  Eigen::Index count() const { return value.size(); }
};

// Batch-norm channel state: affine parameters are learnable, running moments
// are buffers updated by the forward pass in training mode (biased variance,
// torch-style momentum update).
struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Matrix running_mean;
  Matrix running_var;
  double momentum = 0.1;

  void init(Eigen::Index channels);
};

struct Var {
  int id = -1;
};

constexpr double kNormVarianceFloor = 1e-5;

class Tape {
 public:
  // Fallback events inside the eight-point op (training mode only).
  struct Counters {
    long weight_floor_fallbacks = 0;  // fewer than 8 usable weights
    long stop_grad_fallbacks = 0;     // eigen-gap below the degenerate bound
  };

  Var leaf(Tensor& t);
  Var constant(Matrix v);

  // x (RxCin) * w' (CinxCout) + b broadcast; the 1x1 convolution.
  Var linear(Var x, Var w, Var b);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);          // elementwise, equal shapes
  Var scale_by(Var x, Var s);     // s is 1x1 (attention scalars)
  Var relu(Var x);
  Var tanh_op(Var x);
  Var sigmoid_op(Var x);
  Var clamp_max(Var x, double cap);
  Var concat_cols(Var a, Var b);
  Var slice_rows(Var x, Eigen::Index r0, Eigen::Index n);

  // Zero-mean unit-variance over each instance's n-row block, per channel.
  // Variance is clamped below at `floor`; n == 1 requires allow_single
  // (cluster-axis blocks opt in, point blocks must not see N=1).
  Var context_norm(Var x, Eigen::Index n, bool allow_single = false,
                   double floor = kNormVarianceFloor);
  Var batch_norm(Var x, BatchNormState& bn, bool training, double floor = kNormVarianceFloor);

  // Per-instance reductions/broadcasts over n-row blocks.
  Var mean_over_points(Var x, Eigen::Index n);
  Var max_over_points(Var x, Eigen::Index n);
  Var repeat_rows(Var x, Eigen::Index n);  // inverse shape of the reductions

  Var softmax_rows(Var x);

  // Soft-assignment pooling: per instance, assign (n x m) and feat (n x C)
  // yield assign' * feat (m x C), instances stacked.
  Var pool_clusters(Var assign, Var feat, Eigen::Index n);
  // Per instance, assign (n x m) times clusters (m x C) -> n x C.
  Var unpool_clusters(Var assign, Var clusters, Eigen::Index m);
  // 1x1 convolution along the cluster axis: per instance (m x C) block X,
  // out = W X + b broadcast across channels. W is m x m, b is m x 1.
  Var mix_clusters(Var x, Var w, Var b, Eigen::Index m);

  Var scale_const(Var x, double c);
  Var sum_all(Var x);                    // 1x1
  Var weighted_sum(Var x, Matrix coeff); // sum(coeff .* x), coeff constant
  // sum_i coeff_i * bce(logits_i, labels_i), numerically stable form.
  Var bce_with_logits(Var logits, Matrix labels, Matrix coeff);

  // Weighted eight-point solve of one instance: w (N x 1), constraint the
  // N x 9 epipolar matrix. Output is the smallest eigenvector as 1 x 9,
  // sign-canonicalized. Backward is the eigenvector-perturbation formula
  // with eigen-gap denominators clamped at kSolverEigenGapClamp. With
  // training_fallbacks, degenerate instances (fewer than 8 usable weights,
  // or eigen-gap < kSolverDegenerateGap) produce a stop-gradient result and
  // bump a counter instead of throwing.
  Var eight_point(Var w, const Matrix& constraint, bool training_fallbacks);

  // Squared symmetric epipolar residuals (N x 1) of the 1 x 9 row-major
  // essential vector against constant coords; differentiable in e.
  Var epipolar_residuals(Var e_row, const Matrix& coords);

  const Matrix& value(Var v) const;
  // Keep a node's value alive through backward(free_memory=true).
  void retain(Var v);

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse, accumulating
  // into every reachable leaf's Tensor::grad. With free_memory, each node's
  // value and grad are released right after its backward runs.
  void backward(Var loss, bool free_memory = true);

  std::size_t size() const { return nodes_.size(); }
  Counters counters;

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;  // leaves alias the parameter value
    Tensor* param = nullptr;
    Matrix grad;
    bool requires_grad = false;
    bool retained = false;
    std::function<void(Tape&, int)> backprop;
  };

  int push_(Node n);
  const Matrix& val_(int i) const;
  bool requires_(int i) const { return nodes_[static_cast<std::size_t>(i)].requires_grad; }
  // Accumulate g into node i's gradient (no-op when the node needs none).
  void add_grad_(int i, const Matrix& g);
  Matrix& grad_(int i);

  std::vector<Node> nodes_;
};

}  // namespace llha::ad

#endif  // LLHA_TAPE_HPP
