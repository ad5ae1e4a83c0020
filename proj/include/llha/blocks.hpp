#ifndef LLHA_BLOCKS_HPP
#define LLHA_BLOCKS_HPP

#include <string>
#include <utility>
#include <vector>

#include "llha/tape.hpp"

// Learnable building blocks over N x C feature maps. Every block is pure
// given (input, parameters, mode); batch-norm running buffers mutate only in
// training mode. All blocks are permutation-equivariant across the N axis.
namespace llha {

enum class PoolKind { GAP, GMP };
enum class EndBlockKind { PointCN, LLF };

// Flat, ordered view of every learnable tensor (and running-stat buffer) in
// a model; the order is the construction order, which seeds initialization
// and fixes the checkpoint layout.
class ParamRegistry {
 public:
  void add(std::string name, ad::Tensor* t) { tensors_.emplace_back(std::move(name), t); }
  void add_buffer(std::string name, Matrix* m) { buffers_.emplace_back(std::move(name), m); }

  const std::vector<std::pair<std::string, ad::Tensor*>>& tensors() const { return tensors_; }
  const std::vector<std::pair<std::string, Matrix*>>& buffers() const { return buffers_; }

  Eigen::Index parameter_count() const;
  void zero_grads();

 private:
  std::vector<std::pair<std::string, ad::Tensor*>> tensors_;
  std::vector<std::pair<std::string, Matrix*>> buffers_;
};

// 1x1 convolution over the correspondence axis: a dense map applied to every
// row. Kernels are fan-in-scaled normal, biases zero.
struct Conv1x1 {
  ad::Tensor weight;  // out x in
  ad::Tensor bias;    // 1 x out

  void init(Eigen::Index in, Eigen::Index out, Rng& rng);
  void register_params(ParamRegistry& reg, const std::string& path);
  ad::Var forward(ad::Tape& tape, ad::Var x);
};

// Conv -> context norm (across the instance axis) -> batch norm -> ReLU.
// Also serves as the §3.4 ConvBlock: instance normalization across N is the
// same operation as context normalization.
struct PointCN {
  Conv1x1 conv;
  ad::BatchNormState bn;
  bool allow_single = false;  // cluster-axis blocks normalize across m >= 1

  void init(Eigen::Index in, Eigen::Index out, Rng& rng);
  void register_params(ParamRegistry& reg, const std::string& path);
  ad::Var forward(ad::Tape& tape, ad::Var x, Eigen::Index n_per, bool training);
};

// Layer-by-layer channel fusion. h == 1 degenerates to a single PointCN
// C -> C. Otherwise: one downsampling block C -> C/h, then log2(h)+1 ladder
// stages; stage i concatenates its predecessor's input and output (doubling
// the width) and applies a width-preserving PointCN, ending exactly at C.
struct LLF {
  int h = 4;
  Eigen::Index channels = 0;
  std::vector<PointCN> blocks;  // [down, stage1, ..., stageK] or [single]

  void init(Eigen::Index c, int h_ratio, Rng& rng);
  void register_params(ParamRegistry& reg, const std::string& path);
  ad::Var forward(ad::Tape& tape, ad::Var x, Eigen::Index n_per, bool training);
  // Ladder output widths (C/h, 2C/h, ..., C), exposed for shape tests.
  std::vector<Eigen::Index> stage_widths() const;
};

// Hierarchical attention. Front/back feature blocks default to LLF but can
// be PointCN for the placement ablation. att1/att2 start at exactly 1.
struct HA {
  EndBlockKind front_kind = EndBlockKind::LLF;
  EndBlockKind back_kind = EndBlockKind::LLF;
  LLF front_llf, back_llf;
  PointCN front_cn, back_cn;
  Conv1x1 global_conv;
  ad::BatchNormState global_bn;
  Conv1x1 struct_conv;
  ad::BatchNormState struct_bn;
  ad::Tensor att1, att2;  // 1 x 1
  PoolKind pool = PoolKind::GAP;
  bool gated = false;  // optional squash on F_att; the literal equations omit it

  void init(Eigen::Index c, int h_ratio, PoolKind pool_kind, EndBlockKind front,
            EndBlockKind back, bool gated_att, Rng& rng);
  void register_params(ParamRegistry& reg, const std::string& path);
  ad::Var forward(ad::Tape& tape, ad::Var x, Eigen::Index n_per, bool training);
};

// ConvBlock -> HA -> ConvBlock with a residual skip.
struct PIHA {
  PointCN pre, post;
  HA ha;

  void init(Eigen::Index c, int h_ratio, PoolKind pool_kind, EndBlockKind front,
            EndBlockKind back, bool gated_att, Rng& rng);
  void register_params(ParamRegistry& reg, const std::string& path);
  ad::Var forward(ad::Tape& tape, ad::Var x, Eigen::Index n_per, bool training);
};

// Differentiable pool to m clusters, order-aware filtering across clusters,
// differentiable unpool, residual add. m = 1 is the degenerate single-summary
// configuration; m > N is rejected at forward time.
struct PoolOAUnpool {
  Eigen::Index m = 0;
  Conv1x1 assign_conv;  // C -> m, softmax over clusters
  Conv1x1 unpool_conv;  // C -> m, attention from the original map
  PointCN cluster1, cluster2;
  ad::Tensor mix_weight;  // m x m, the cluster-axis 1x1 convolution
  ad::Tensor mix_bias;    // m x 1

  void init(Eigen::Index c, Eigen::Index clusters, Rng& rng);
  void register_params(ParamRegistry& reg, const std::string& path);
  ad::Var forward(ad::Tape& tape, ad::Var x, Eigen::Index n_per, bool training);
};

}  // namespace llha

#endif  // LLHA_BLOCKS_HPP
