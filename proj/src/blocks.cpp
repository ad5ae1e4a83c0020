#include "llha/blocks.hpp"

#include <cmath>

namespace llha {
namespace {

bool power_of_two(Eigen::Index v) { return v > 0 && (v & (v - 1)) == 0; }

Matrix fan_in_normal(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = stddev * rng.normal();
  return m;
}

}  // namespace

Eigen::Index ParamRegistry::parameter_count() const {
  Eigen::Index total = 0;
  for (const auto& [name, t] : tensors_) total += t->count();
  return total;
}

void ParamRegistry::zero_grads() {
  for (const auto& [name, t] : tensors_) t->zero_grad();
}

void Conv1x1::init(Eigen::Index in, Eigen::Index out, Rng& rng) {
  weight.value = fan_in_normal(out, in, in, rng);
  weight.zero_grad();
  bias.value = Matrix::Zero(1, out);
  bias.zero_grad();
}

void Conv1x1::register_params(ParamRegistry& reg, const std::string& path) {
  reg.add(path + ".weight", &weight);
  reg.add(path + ".bias", &bias);
}

ad::Var Conv1x1::forward(ad::Tape& tape, ad::Var x) {
  return tape.linear(x, tape.leaf(weight), tape.leaf(bias));
}

void PointCN::init(Eigen::Index in, Eigen::Index out, Rng& rng) {
  conv.init(in, out, rng);
  bn.init(out);
}

void PointCN::register_params(ParamRegistry& reg, const std::string& path) {
  conv.register_params(reg, path + ".conv");
  reg.add(path + ".bn.gamma", &bn.gamma);
  reg.add(path + ".bn.beta", &bn.beta);
  reg.add_buffer(path + ".bn.running_mean", &bn.running_mean);
  reg.add_buffer(path + ".bn.running_var", &bn.running_var);
}

ad::Var PointCN::forward(ad::Tape& tape, ad::Var x, Eigen::Index n_per, bool training) {
  ad::Var y = conv.forward(tape, x);
  y = tape.context_norm(y, n_per, allow_single);
  y = tape.batch_norm(y, bn, training);
  return tape.relu(y);
}

void LLF::init(Eigen::Index c, int h_ratio, Rng& rng) {
  if (!power_of_two(h_ratio)) throw ConfigError("llf: h must be a power of two");
  if (h_ratio > 1 && c % h_ratio != 0) throw ConfigError("llf: channels not divisible by h");
  h = h_ratio;
  channels = c;
  blocks.clear();
  if (h == 1) {
    blocks.emplace_back();
    blocks.back().init(c, c, rng);
    return;
  }
  // Downsample to C/h, then widths C/h, 2C/h, ..., C.
  blocks.emplace_back();
  blocks.back().init(c, c / h, rng);
  for (Eigen::Index width = c / h; width <= c; width *= 2) {
    blocks.emplace_back();
    blocks.back().init(width, width, rng);
  }
  if (stage_widths().back() != c) throw ConfigError("llf: width ladder does not end at C");
}

std::vector<Eigen::Index> LLF::stage_widths() const {
  std::vector<Eigen::Index> widths;
  if (h == 1) {
    widths.push_back(channels);
    return widths;
  }
  for (Eigen::Index w = channels / h; w <= channels; w *= 2) widths.push_back(w);
  return widths;
}

ad::Var LLF::forward(ad::Tape& tape, ad::Var x, Eigen::Index n_per, bool training) {
  if (h == 1) return blocks[0].forward(tape, x, n_per, training);
  ad::Var in = blocks[0].forward(tape, x, n_per, training);  // C -> C/h
  ad::Var out = blocks[1].forward(tape, in, n_per, training);
  for (std::size_t s = 2; s < blocks.size(); ++s) {
    in = tape.concat_cols(in, out);  // width doubles
    out = blocks[s].forward(tape, in, n_per, training);
  }
  return out;
}

void LLF::register_params(ParamRegistry& reg, const std::string& path) {
  if (h == 1) {
    blocks[0].register_params(reg, path + ".single");
    return;
  }
  blocks[0].register_params(reg, path + ".down");
  for (std::size_t s = 1; s < blocks.size(); ++s)
    blocks[s].register_params(reg, path + ".stage" + std::to_string(s));
}

void HA::init(Eigen::Index c, int h_ratio, PoolKind pool_kind, EndBlockKind front,
              EndBlockKind back, bool gated_att, Rng& rng) {
  front_kind = front;
  back_kind = back;
  pool = pool_kind;
  gated = gated_att;
  if (front == EndBlockKind::LLF)
    front_llf.init(c, h_ratio, rng);
  else
    front_cn.init(c, c, rng);
  global_conv.init(c, c, rng);
  global_bn.init(c);
  struct_conv.init(c, c, rng);
  struct_bn.init(c);
  att1.value = Matrix::Constant(1, 1, 1.0);
  att1.zero_grad();
  att2.value = Matrix::Constant(1, 1, 1.0);
  att2.zero_grad();
  if (back == EndBlockKind::LLF)
    back_llf.init(c, h_ratio, rng);
  else
    back_cn.init(c, c, rng);
}

void HA::register_params(ParamRegistry& reg, const std::string& path) {
  if (front_kind == EndBlockKind::LLF)
    front_llf.register_params(reg, path + ".front");
  else
    front_cn.register_params(reg, path + ".front");
  global_conv.register_params(reg, path + ".global_conv");
  reg.add(path + ".global_bn.gamma", &global_bn.gamma);
  reg.add(path + ".global_bn.beta", &global_bn.beta);
  reg.add_buffer(path + ".global_bn.running_mean", &global_bn.running_mean);
  reg.add_buffer(path + ".global_bn.running_var", &global_bn.running_var);
  struct_conv.register_params(reg, path + ".struct_conv");
  reg.add(path + ".struct_bn.gamma", &struct_bn.gamma);
  reg.add(path + ".struct_bn.beta", &struct_bn.beta);
  reg.add_buffer(path + ".struct_bn.running_mean", &struct_bn.running_mean);
  reg.add_buffer(path + ".struct_bn.running_var", &struct_bn.running_var);
  reg.add(path + ".att1", &att1);
  reg.add(path + ".att2", &att2);
  if (back_kind == EndBlockKind::LLF)
    back_llf.register_params(reg, path + ".back");
  else
    back_cn.register_params(reg, path + ".back");
}

ad::Var HA::forward(ad::Tape& tape, ad::Var x, Eigen::Index n_per, bool training) {
  ad::Var f_l1 = front_kind == EndBlockKind::LLF ? front_llf.forward(tape, x, n_per, training)
                                                 : front_cn.forward(tape, x, n_per, training);
  ad::Var pooled = pool == PoolKind::GAP ? tape.mean_over_points(f_l1, n_per)
                                         : tape.max_over_points(f_l1, n_per);
  ad::Var f_global = tape.batch_norm(global_conv.forward(tape, pooled), global_bn, training);
  ad::Var f_struct = tape.batch_norm(struct_conv.forward(tape, f_l1), struct_bn, training);
  ad::Var f_att = tape.add(tape.scale_by(f_struct, tape.leaf(att1)),
                           tape.scale_by(tape.repeat_rows(f_global, n_per), tape.leaf(att2)));
  if (gated) f_att = tape.sigmoid_op(f_att);
  ad::Var f_m = tape.mul(f_l1, f_att);
  return back_kind == EndBlockKind::LLF ? back_llf.forward(tape, f_m, n_per, training)
                                        : back_cn.forward(tape, f_m, n_per, training);
}

void PIHA::init(Eigen::Index c, int h_ratio, PoolKind pool_kind, EndBlockKind front,
                EndBlockKind back, bool gated_att, Rng& rng) {
  pre.init(c, c, rng);
  ha.init(c, h_ratio, pool_kind, front, back, gated_att, rng);
  post.init(c, c, rng);
}

void PIHA::register_params(ParamRegistry& reg, const std::string& path) {
  pre.register_params(reg, path + ".pre");
  ha.register_params(reg, path + ".ha");
  post.register_params(reg, path + ".post");
}

ad::Var PIHA::forward(ad::Tape& tape, ad::Var x, Eigen::Index n_per, bool training) {
  ad::Var y = pre.forward(tape, x, n_per, training);
  y = ha.forward(tape, y, n_per, training);
  y = post.forward(tape, y, n_per, training);
  return tape.add(y, x);
}

void PoolOAUnpool::init(Eigen::Index c, Eigen::Index clusters, Rng& rng) {
  if (clusters < 1) throw ConfigError("pool_oa_unpool: m must be at least 1");
  m = clusters;
  assign_conv.init(c, m, rng);
  unpool_conv.init(c, m, rng);
  cluster1.allow_single = true;
  cluster2.allow_single = true;
  cluster1.init(c, c, rng);
  cluster2.init(c, c, rng);
  mix_weight.value = fan_in_normal(m, m, m, rng);
  mix_weight.zero_grad();
  mix_bias.value = Matrix::Zero(m, 1);
  mix_bias.zero_grad();
}

void PoolOAUnpool::register_params(ParamRegistry& reg, const std::string& path) {
  assign_conv.register_params(reg, path + ".assign");
  unpool_conv.register_params(reg, path + ".unpool");
  cluster1.register_params(reg, path + ".cluster1");
  cluster2.register_params(reg, path + ".cluster2");
  reg.add(path + ".mix.weight", &mix_weight);
  reg.add(path + ".mix.bias", &mix_bias);
}

ad::Var PoolOAUnpool::forward(ad::Tape& tape, ad::Var x, Eigen::Index n_per, bool training) {
  if (m > n_per) throw ConfigError("pool_oa_unpool: more clusters than correspondences");
  ad::Var assign = tape.softmax_rows(assign_conv.forward(tape, x));
  ad::Var pooled = tape.pool_clusters(assign, x, n_per);
  ad::Var filtered = cluster1.forward(tape, pooled, m, training);
  filtered = cluster2.forward(tape, filtered, m, training);
  filtered = tape.mix_clusters(filtered, tape.leaf(mix_weight), tape.leaf(mix_bias), m);
  ad::Var attention = tape.softmax_rows(unpool_conv.forward(tape, x));
  ad::Var unpooled = tape.unpool_clusters(attention, filtered, m);
  return tape.add(unpooled, x);
}

}  // namespace llha
