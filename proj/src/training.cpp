#include "llha/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "llha/evaluation.hpp"

namespace llha {
namespace {

using json = nlohmann::json;

// Per-element BCE coefficients of one instance, already scaled by the
// overall 1/instances factor. Balanced weighting splits the mass evenly
// between the classes present; an absent class gets no mass at all.
Matrix bce_coefficients(const Eigen::VectorXi& labels, bool balance, double instance_scale) {
  const Eigen::Index n = labels.size();
  Matrix coeff(n, 1);
  if (!balance) {
    coeff.setConstant(instance_scale / static_cast<double>(n));
    return coeff;
  }
  Eigen::Index n_pos = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    if (labels(i) == 1) ++n_pos;
  const Eigen::Index n_neg = n - n_pos;
  const double w_pos = 0.5 / static_cast<double>(std::max<Eigen::Index>(n_pos, 1));
  const double w_neg = 0.5 / static_cast<double>(std::max<Eigen::Index>(n_neg, 1));
  for (Eigen::Index i = 0; i < n; ++i)
    coeff(i, 0) = instance_scale * (labels(i) == 1 ? w_pos : w_neg);
  return coeff;
}

Matrix labels_as_matrix(const Eigen::VectorXi& labels) {
  Matrix out(labels.size(), 1);
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    if (labels(i) != 0 && labels(i) != 1) throw ValidationError("labels must be binary");
    out(i, 0) = static_cast<double>(labels(i));
  }
  return out;
}

double alpha_for_iter(int iter, const TrainConfig& cfg) {
  return iter < cfg.alpha_warmup_iters ? 0.0 : cfg.alpha;
}

double stable_bce(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate must be finite and non-negative");
  if (alpha_warmup_iters < 0) throw ConfigError("alpha_warmup_iters must be non-negative");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be non-negative");
  if (total_iters < 1) throw ConfigError("total_iters must be positive");
  if (log_every < 1) throw ConfigError("log_every must be positive");
}

double classification_loss(const Vector& logits, const Eigen::VectorXi& labels, bool balance) {
  if (logits.size() != labels.size()) throw ValidationError("classification_loss: length mismatch");
  if (logits.size() == 0) throw ValidationError("classification_loss: empty instance");
  const Matrix coeff = bce_coefficients(labels, balance, 1.0);
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    total += coeff(i, 0) * stable_bce(logits(i), static_cast<double>(labels(i)));
  return total;
}

double essential_loss(const EssentialMatrix& e_hat, const CorrespondenceSet& corr,
                      const Eigen::VectorXi& labels, long* skips) {
  if (labels.size() != corr.size()) throw ValidationError("essential_loss: length mismatch");
  const Vector res = symmetric_epipolar_distance(e_hat, corr);
  double sum = 0.0;
  Eigen::Index n_in = 0;
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    if (labels(i) != 1) continue;
    sum += std::min(res(i), 0.25);
    ++n_in;
  }
  if (n_in == 0) {
    if (skips != nullptr) ++*skips;
    return 0.0;
  }
  return sum / static_cast<double>(n_in);
}

LossReport hybrid_loss(const NetworkOutput& output, const CorrespondenceSet& corr, int iter,
                       const TrainConfig& cfg) {
  if (!corr.labels) throw ValidationError("hybrid_loss: labels required");
  LossReport rep;
  rep.alpha_used = alpha_for_iter(iter, cfg);
  for (const Vector& sl : output.stage_logits)
    rep.stage_classification.push_back(classification_loss(sl, *corr.labels, cfg.balance));
  rep.stage_classification.push_back(classification_loss(output.logits, *corr.labels, cfg.balance));
  for (double term : rep.stage_classification) rep.classification += term;
  rep.essential = essential_loss(output.essential, corr, *corr.labels, &rep.essential_skips);
  rep.total = rep.classification + rep.alpha_used * rep.essential;
  return rep;
}

HybridLossVars hybrid_loss_graph(ad::Tape& tape, const std::vector<ad::Var>& heads,
                                 ad::Var final_weights, const CorrespondenceSet& batch,
                                 Eigen::Index n_per, int iter, const TrainConfig& cfg) {
  if (!batch.labels) throw ValidationError("hybrid_loss_graph: labels required");
  if (heads.empty()) throw ValidationError("hybrid_loss_graph: no supervised heads");
  const Eigen::Index rows = batch.coords.rows();
  if (n_per < 1 || rows % n_per != 0) throw ValidationError("hybrid_loss_graph: ragged batch");
  const Eigen::Index instances = rows / n_per;

  HybridLossVars out;
  out.report.alpha_used = alpha_for_iter(iter, cfg);

  Matrix labels(rows, 1);
  Matrix coeff(rows, 1);
  {
    const Matrix all = labels_as_matrix(*batch.labels);
    labels = all;
    const double instance_scale = 1.0 / static_cast<double>(instances);
    for (Eigen::Index b = 0; b < instances; ++b)
      coeff.middleRows(b * n_per, n_per) =
          bce_coefficients(batch.labels->segment(b * n_per, n_per), cfg.balance, instance_scale);
  }

  ad::Var class_sum{};
  bool have_class = false;
  for (ad::Var head : heads) {
    ad::Var term = tape.bce_with_logits(head, labels, coeff);
    out.stage_terms.push_back(term);
    out.report.stage_classification.push_back(tape.value(term)(0, 0));
    class_sum = have_class ? tape.add(class_sum, term) : term;
    have_class = true;
  }
  out.report.classification = tape.value(class_sum)(0, 0);

  // Per-instance eight-point solve on the mapped weights, residuals against
  // the instance coords, capped inlier mean. Built through the warmup too so
  // the trace shows the term before it joins the objective.
  ad::Var ess_sum{};
  Eigen::Index used = 0;
  for (Eigen::Index b = 0; b < instances; ++b) {
    const Eigen::VectorXi inst_labels = batch.labels->segment(b * n_per, n_per);
    const Eigen::Index n_in = inst_labels.sum();
    if (n_in == 0) {
      ++out.report.essential_skips;
      continue;
    }
    CorrespondenceSet inst;
    inst.coords = batch.coords.middleRows(b * n_per, n_per);
    const Matrix constraint = epipolar_constraint_matrix(inst);
    ad::Var w_b = tape.slice_rows(final_weights, b * n_per, n_per);
    ad::Var e = tape.eight_point(w_b, constraint, true);
    ad::Var capped = tape.clamp_max(tape.epipolar_residuals(e, inst.coords), 0.25);
    Matrix inlier_coeff(n_per, 1);
    for (Eigen::Index i = 0; i < n_per; ++i)
      inlier_coeff(i, 0) = inst_labels(i) == 1 ? 1.0 / static_cast<double>(n_in) : 0.0;
    ad::Var term = tape.weighted_sum(capped, inlier_coeff);
    ess_sum = used > 0 ? tape.add(ess_sum, term) : term;
    ++used;
  }
  out.essential = used > 0 ? tape.scale_const(ess_sum, 1.0 / static_cast<double>(used))
                           : tape.constant(Matrix::Zero(1, 1));
  out.report.essential = tape.value(out.essential)(0, 0);

  out.total = out.report.alpha_used > 0.0
                  ? tape.add(class_sum, tape.scale_const(out.essential, out.report.alpha_used))
                  : class_sum;
  out.report.total = tape.value(out.total)(0, 0);
  return out;
}

void Adam::init(const NamedTensors& params) {
  t = 0;
  m.clear();
  v.clear();
  m.reserve(params.size());
  v.reserve(params.size());
  for (const auto& [name, tensor] : params) {
    m.push_back(Matrix::Zero(tensor->value.rows(), tensor->value.cols()));
    v.push_back(Matrix::Zero(tensor->value.rows(), tensor->value.cols()));
  }
}

void Adam::step(const NamedTensors& params) {
  if (m.size() != params.size()) throw ConfigError("Adam: not initialized for these parameters");
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor* tensor = params[i].second;
    const Matrix& g = tensor->grad;
    if (g.size() != tensor->value.size())
      throw ConfigError("Adam: gradient shape mismatch for " + params[i].first);
    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
    v[i] = beta2 * v[i] + (1.0 - beta2) * g.cwiseProduct(g);
    const Matrix m_hat = m[i] / bc1;
    const Matrix v_hat = v[i] / bc2;
    tensor->value -= lr * (m_hat.array() / (v_hat.array().sqrt() + eps)).matrix();
  }
}

double clip_gradients(const NamedTensors& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, tensor] : params) sq += tensor->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (const auto& [name, tensor] : params) tensor->grad *= scale;
  }
  return norm;
}

namespace {

// Mean att1/att2 over every HA module in the net; (0, 0) when the backbone
// has no attention (reduced ablation kinds).
std::pair<double, double> attention_means(const LlhaNet& net) {
  double s1 = 0.0, s2 = 0.0;
  long count = 0;
  auto visit = [&](const FeatureBlock& b) {
    const HA* ha = nullptr;
    if (b.kind == BackboneBlock::PIHA) ha = &b.piha.ha;
    if (b.kind == BackboneBlock::HA) ha = &b.ha;
    if (ha == nullptr) return;
    s1 += ha->att1.value(0, 0);
    s2 += ha->att2.value(0, 0);
    ++count;
  };
  for (const ExtractionStage& stage : net.stages)
    for (const FeatureBlock& b : stage.blocks) visit(b);
  for (const FeatureBlock& b : net.integration) visit(b);
  if (count == 0) return {0.0, 0.0};
  return {s1 / static_cast<double>(count), s2 / static_cast<double>(count)};
}

// Pooled decisions vs labels over the validation scenes, from a pure
// inference forward (no solver involvement).
PRF validation_prf(LlhaNet& net, const Dataset& ds, const std::vector<int>& val_indices) {
  Eigen::Index total = 0;
  for (int idx : val_indices) total += ds.scenes[static_cast<std::size_t>(idx)].corr.size();
  Eigen::VectorXi decisions(total), labels(total);
  Eigen::Index at = 0;
  for (int idx : val_indices) {
    const CorrespondenceSet& corr = ds.scenes[static_cast<std::size_t>(idx)].corr;
    ad::Tape tape;
    ForwardVars f = net.forward(tape, corr.coords, corr.size(), false);
    const Matrix& logits = tape.value(f.final_logits);
    for (Eigen::Index i = 0; i < corr.size(); ++i) {
      decisions(at + i) = logits(i, 0) > 0.0 ? 1 : 0;
      labels(at + i) = (*corr.labels)(i);
    }
    at += corr.size();
  }
  return prf(decisions, labels);
}

}  // namespace

std::pair<int, int> train_val_split(int n_scenes) {
  const int val_count = n_scenes >= 2 ? std::max(1, n_scenes / 5) : 0;
  return {n_scenes - val_count, val_count};
}

TrainResult train(const Dataset& dataset, const NetworkConfig& net_config,
                  const TrainConfig& train_config, const std::string& out_dir,
                  LlhaNet* final_net, const LlhaNet* warm_start) {
  net_config.validate();
  train_config.validate();
  if (dataset.scenes.empty()) throw ValidationError("train: empty dataset");
  const Eigen::Index n_per = dataset.scenes.front().corr.size();
  for (const ScenePair& s : dataset.scenes) {
    if (!s.corr.labels) throw ValidationError("train: dataset scene without labels");
    if (s.corr.size() != n_per) throw ValidationError("train: batching needs uniform scene size");
  }

  const int n_scenes = static_cast<int>(dataset.scenes.size());
  const auto [train_count, val_count] = train_val_split(n_scenes);
  if (train_count < 1) throw ValidationError("train: no training scenes after the split");
  std::vector<int> val_indices;
  for (int i = train_count; i < n_scenes; ++i) val_indices.push_back(i);

  std::filesystem::create_directories(out_dir);
  TrainResult result;
  result.trace_path = out_dir + "/trace.jsonl";
  result.best_checkpoint_path = out_dir + "/best.ckpt";
  result.last_checkpoint_path = out_dir + "/last.ckpt";
  std::ofstream trace(result.trace_path, std::ios::trunc);
  if (!trace) throw IoError("train: cannot open " + result.trace_path);

  LlhaNet net;
  if (warm_start != nullptr) {
    if (warm_start->config.hash() != net_config.hash())
      throw ValidationError("train: warm start config mismatch");
    net = *warm_start;
  } else {
    net.init(net_config, train_config.seed);
  }
  ParamRegistry reg = net.registry();
  Adam opt;
  opt.lr = train_config.learning_rate;
  opt.init(reg.tensors());

  const auto t0 = std::chrono::steady_clock::now();
  bool wrote_best = false;
  for (int iter = 0; iter < train_config.total_iters; ++iter) {
    const std::uint64_t batch_seed = split_seed(train_config.seed, static_cast<std::uint64_t>(iter));
    Rng brng(batch_seed);
    const Eigen::Index b = train_config.batch_size;
    CorrespondenceSet batch;
    batch.coords.resize(b * n_per, 4);
    Eigen::VectorXi batch_labels(b * n_per);
    for (Eigen::Index k = 0; k < b; ++k) {
      const auto& scene = dataset.scenes[brng.uniform_int(train_count)];
      batch.coords.middleRows(k * n_per, n_per) = scene.corr.coords;
      batch_labels.segment(k * n_per, n_per) = *scene.corr.labels;
    }
    batch.labels = batch_labels;

    reg.zero_grads();
    ad::Tape tape;
    ForwardVars f = net.forward(tape, batch.coords, n_per, true);
    std::vector<ad::Var> heads = f.stage_logits;
    heads.push_back(f.final_logits);
    HybridLossVars hl =
        hybrid_loss_graph(tape, heads, f.final_weights, batch, n_per, iter, train_config);
    result.essential_skips += hl.report.essential_skips;

    if (!std::isfinite(hl.report.total)) {
      json line = {{"iter", iter}, {"event", "non_finite_loss"}, {"batch_seed", batch_seed}};
      trace << line.dump() << "\n";
      trace.flush();
      throw DegenerateError("train: non-finite loss at iter " + std::to_string(iter) +
                            ", batch seed " + std::to_string(batch_seed));
    }

    tape.backward(hl.total);
    result.weight_floor_fallbacks += tape.counters.weight_floor_fallbacks;
    result.stop_grad_fallbacks += tape.counters.stop_grad_fallbacks;
    clip_gradients(reg.tensors(), kGradClipNorm);
    opt.step(reg.tensors());
    ++result.iters_run;

    const bool last_iter = iter == train_config.total_iters - 1;
    if (iter % train_config.log_every == 0 || last_iter) {
      PRF val;
      if (!val_indices.empty()) val = validation_prf(net, dataset, val_indices);
      const auto [att1, att2] = attention_means(net);
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      json line = {{"iter", iter},
                   {"total", hl.report.total},
                   {"classification", hl.report.classification},
                   {"stage_classification", hl.report.stage_classification},
                   {"essential", hl.report.essential},
                   {"alpha_used", hl.report.alpha_used},
                   {"val_precision", val.precision},
                   {"val_recall", val.recall},
                   {"val_f", val.f_score},
                   {"att1", att1},
                   {"att2", att2},
                   {"wall_clock_s", wall},
                   {"essential_skips", result.essential_skips},
                   {"weight_floor_fallbacks", result.weight_floor_fallbacks},
                   {"stop_grad_fallbacks", result.stop_grad_fallbacks}};
      trace << line.dump() << "\n";
      trace.flush();
      if (!val_indices.empty() && val.f_score > result.best_val_f) {
        result.best_val_f = val.f_score;
        result.best_iter = iter;
        net.save(result.best_checkpoint_path);
        wrote_best = true;
      }
    }
  }

  net.save(result.last_checkpoint_path);
  if (!wrote_best) result.best_checkpoint_path.clear();
  if (final_net != nullptr) *final_net = net;
  return result;
}

}  // namespace llha
