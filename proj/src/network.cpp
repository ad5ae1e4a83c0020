#include "llha/network.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <utility>

#include <nlohmann/json.hpp>

namespace llha {

namespace {

using nlohmann::json;

constexpr char kCheckpointFormat[] = "llha-ckpt-v1";
constexpr double kLogitCap = 1e4;

std::string pool_name(PoolKind p) { return p == PoolKind::GAP ? "gap" : "gmp"; }

PoolKind pool_from(const std::string& s) {
  if (s == "gap") return PoolKind::GAP;
  if (s == "gmp") return PoolKind::GMP;
  throw ParseError("unknown pool kind: " + s);
}

std::string block_name(BackboneBlock b) {
  switch (b) {
    case BackboneBlock::ConvBlock: return "convblock";
    case BackboneBlock::LLF: return "llf";
    case BackboneBlock::HA: return "ha";
    case BackboneBlock::PIHA: return "piha";
  }
  throw ConfigError("invalid backbone block");
}

BackboneBlock block_from(const std::string& s) {
  if (s == "convblock") return BackboneBlock::ConvBlock;
  if (s == "llf") return BackboneBlock::LLF;
  if (s == "ha") return BackboneBlock::HA;
  if (s == "piha") return BackboneBlock::PIHA;
  throw ParseError("unknown backbone block: " + s);
}

std::string end_name(EndBlockKind k) { return k == EndBlockKind::LLF ? "llf" : "pointcn"; }

EndBlockKind end_from(const std::string& s) {
  if (s == "llf") return EndBlockKind::LLF;
  if (s == "pointcn") return EndBlockKind::PointCN;
  throw ParseError("unknown HA end block: " + s);
}

json config_to_json(const NetworkConfig& c) {
  return json{{"channels", c.channels},
              {"piha_per_extraction", c.piha_per_extraction},
              {"extraction_stages", c.extraction_stages},
              {"clusters", c.clusters},
              {"integration_piha", c.integration_piha},
              {"h", c.h},
              {"pool", pool_name(c.pool)},
              {"block", block_name(c.block)},
              {"ha_front", end_name(c.ha_front)},
              {"ha_back", end_name(c.ha_back)},
              {"gated_attention", c.gated_attention},
              {"use_pool", c.use_pool}};
}

NetworkConfig config_from_json(const json& j) {
  static const char* known[] = {"channels",  "piha_per_extraction", "extraction_stages",
                                "clusters",  "integration_piha",    "h",
                                "pool",      "block",               "ha_front",
                                "ha_back",   "gated_attention",     "use_pool"};
  if (!j.is_object()) throw ParseError("network config must be a JSON object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    if (!ok) throw ParseError("unknown network config key: " + item.key());
  }
  NetworkConfig c;
  try {
    c.channels = j.at("channels").get<Eigen::Index>();
    c.piha_per_extraction = j.at("piha_per_extraction").get<int>();
    c.extraction_stages = j.at("extraction_stages").get<int>();
    c.clusters = j.at("clusters").get<Eigen::Index>();
    c.integration_piha = j.at("integration_piha").get<int>();
    c.h = j.at("h").get<int>();
    c.pool = pool_from(j.at("pool").get<std::string>());
    c.block = block_from(j.at("block").get<std::string>());
    c.ha_front = end_from(j.at("ha_front").get<std::string>());
    c.ha_back = end_from(j.at("ha_back").get<std::string>());
    c.gated_attention = j.at("gated_attention").get<bool>();
    c.use_pool = j.at("use_pool").get<bool>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed network config: ") + e.what());
  }
  return c;
}

std::string to_hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

[[noreturn]] void rethrow_in_stage(const std::string& where) {
  try {
    throw;
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(where + ": " + e.what());
  } catch (const DegenerateError& e) {
    throw DegenerateError(where + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(where + ": " + e.what());
  }
  // Other exception types propagate from the rethrow above untouched.
}

std::vector<Eigen::Index> top_k_by_weight(const Vector& w, Eigen::Index k) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(w.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return w(a) > w(b); });
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct SolveOutcome {
  EssentialMatrix essential;
  Vector used_weights;
  bool fallback = false;
};

SolveOutcome solve_or_fallback(const CorrespondenceSet& corr, const Vector& w) {
  const Eigen::Index usable = (w.array() > kSolverWeightFloor).count();
  if (usable >= 8) return {weighted_eight_point(corr, w), w, false};
  Vector fw = Vector::Zero(w.size());
  for (Eigen::Index i : top_k_by_weight(w, 8)) fw(i) = kWeightCap;
  return {weighted_eight_point(corr, fw), fw, true};
}

}  // namespace

void NetworkConfig::validate() const {
  if (channels < 1 || (channels & (channels - 1)) != 0)
    throw ConfigError("network config: channels must be a positive power of two");
  if (piha_per_extraction < 1)
    throw ConfigError("network config: piha_per_extraction must be >= 1");
  if (extraction_stages < 1) throw ConfigError("network config: extraction_stages must be >= 1");
  if (clusters < 1) throw ConfigError("network config: clusters must be >= 1");
  if (integration_piha < 1) throw ConfigError("network config: integration_piha must be >= 1");
  if (h < 1 || (h & (h - 1)) != 0)
    throw ConfigError("network config: h must be a positive power of two");
  if (channels % h != 0) throw ConfigError("network config: h must divide channels");
}

NetworkConfig NetworkConfig::desk() {
  NetworkConfig c;
  c.channels = 64;
  c.clusters = 16;
  return c;
}

NetworkConfig NetworkConfig::paper() {
  NetworkConfig c;
  c.channels = 128;
  c.clusters = 500;
  return c;
}

std::string NetworkConfig::canonical_json() const { return config_to_json(*this).dump(); }

std::uint64_t NetworkConfig::hash() const { return fnv1a(canonical_json()); }

NetworkConfig NetworkConfig::from_json_text(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ParseError("network config is not valid JSON");
  NetworkConfig c = config_from_json(j);
  c.validate();
  return c;
}

WeightMapping logits_to_weights(const Vector& logits) {
  if (!logits.allFinite()) throw ValidationError("logits_to_weights: non-finite logits");
  WeightMapping out;
  out.w.resize(logits.size());
  out.decisions.resize(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double gated = std::min(std::max(logits(i), 0.0), kLogitCap);
    out.w(i) = std::min(std::tanh(gated), kWeightCap);
    out.decisions(i) = logits(i) > 0.0 ? 1 : 0;
  }
  out.p = out.w;
  return out;
}

ad::Var weight_map(ad::Tape& tape, ad::Var logits) {
  return tape.clamp_max(tape.tanh_op(tape.clamp_max(tape.relu(logits), kLogitCap)), kWeightCap);
}

void FeatureBlock::init(const NetworkConfig& cfg, Rng& rng) {
  kind = cfg.block;
  switch (kind) {
    case BackboneBlock::ConvBlock:
      cn.init(cfg.channels, cfg.channels, rng);
      break;
    case BackboneBlock::LLF:
      llf.init(cfg.channels, cfg.h, rng);
      break;
    case BackboneBlock::HA:
      ha.init(cfg.channels, cfg.h, cfg.pool, cfg.ha_front, cfg.ha_back, cfg.gated_attention, rng);
      break;
    case BackboneBlock::PIHA:
      piha.init(cfg.channels, cfg.h, cfg.pool, cfg.ha_front, cfg.ha_back, cfg.gated_attention,
                rng);
      break;
  }
}

void FeatureBlock::register_params(ParamRegistry& reg, const std::string& path) {
  switch (kind) {
    case BackboneBlock::ConvBlock: cn.register_params(reg, path); break;
    case BackboneBlock::LLF: llf.register_params(reg, path); break;
    case BackboneBlock::HA: ha.register_params(reg, path); break;
    case BackboneBlock::PIHA: piha.register_params(reg, path); break;
  }
}

ad::Var FeatureBlock::forward(ad::Tape& tape, ad::Var x, Eigen::Index n_per, bool training) {
  switch (kind) {
    case BackboneBlock::ConvBlock: return cn.forward(tape, x, n_per, training);
    case BackboneBlock::LLF: return llf.forward(tape, x, n_per, training);
    case BackboneBlock::HA: return ha.forward(tape, x, n_per, training);
    case BackboneBlock::PIHA: return piha.forward(tape, x, n_per, training);
  }
  throw ConfigError("invalid backbone block");
}

void LlhaNet::init(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  config = cfg;
  Rng rng(seed);
  stages.assign(static_cast<std::size_t>(cfg.extraction_stages), ExtractionStage{});
  for (std::size_t s = 0; s < stages.size(); ++s) {
    ExtractionStage& st = stages[s];
    st.embed.init(s == 0 ? 4 : 5, cfg.channels, rng);
    st.blocks.assign(static_cast<std::size_t>(cfg.piha_per_extraction), FeatureBlock{});
    for (FeatureBlock& b : st.blocks) b.init(cfg, rng);
    if (cfg.use_pool) st.pool.init(cfg.channels, cfg.clusters, rng);
    st.logits_conv.init(cfg.channels, 1, rng);
  }
  reduce.init(cfg.channels * cfg.extraction_stages, cfg.channels, rng);
  integration.assign(static_cast<std::size_t>(cfg.integration_piha), FeatureBlock{});
  for (FeatureBlock& b : integration) b.init(cfg, rng);
  final_conv.init(cfg.channels, 1, rng);
}

ParamRegistry LlhaNet::registry() {
  ParamRegistry reg;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::string prefix = "stage" + std::to_string(s + 1);
    stages[s].embed.register_params(reg, prefix + ".embed");
    for (std::size_t i = 0; i < stages[s].blocks.size(); ++i)
      stages[s].blocks[i].register_params(reg, prefix + ".block" + std::to_string(i + 1));
    if (config.use_pool) stages[s].pool.register_params(reg, prefix + ".pool");
    stages[s].logits_conv.register_params(reg, prefix + ".logits");
  }
  reduce.register_params(reg, "integration.reduce");
  for (std::size_t i = 0; i < integration.size(); ++i)
    integration[i].register_params(reg, "integration.block" + std::to_string(i + 1));
  final_conv.register_params(reg, "integration.logits");
  return reg;
}

std::int64_t LlhaNet::parameter_count() { return registry().parameter_count(); }

ForwardVars LlhaNet::forward(ad::Tape& tape, const Matrix& coords, Eigen::Index n_per,
                             bool training) {
  if (coords.cols() != 4) throw ValidationError("network forward: coords must be N x 4");
  if (n_per < 8) throw ValidationError("network forward: at least 8 correspondences required");
  if (coords.rows() % n_per != 0)
    throw ValidationError("network forward: rows must be a multiple of the instance length");
  if (!coords.allFinite()) throw ValidationError("network forward: non-finite coords");

  ForwardVars out;
  ad::Var coord_var = tape.constant(coords);
  ad::Var prev_w;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    try {
      ad::Var input = s == 0 ? coord_var : tape.concat_cols(coord_var, prev_w);
      out.stage_inputs.push_back(input);
      ad::Var x = stages[s].embed.forward(tape, input);
      for (FeatureBlock& b : stages[s].blocks) x = b.forward(tape, x, n_per, training);
      if (config.use_pool) x = stages[s].pool.forward(tape, x, n_per, training);
      out.stage_features.push_back(x);
      ad::Var lg = stages[s].logits_conv.forward(tape, x);
      out.stage_logits.push_back(lg);
      prev_w = weight_map(tape, lg);
      out.stage_weights.push_back(prev_w);
    } catch (...) {
      rethrow_in_stage("stage " + std::to_string(s + 1));
    }
  }
  try {
    ad::Var merged = out.stage_features[0];
    for (std::size_t s = 1; s < stages.size(); ++s)
      merged = tape.concat_cols(merged, out.stage_features[s]);
    ad::Var x = reduce.forward(tape, merged);
    for (FeatureBlock& b : integration) x = b.forward(tape, x, n_per, training);
    out.final_logits = final_conv.forward(tape, x);
    out.final_weights = weight_map(tape, out.final_logits);
  } catch (...) {
    rethrow_in_stage("integration stage");
  }
  return out;
}

NetworkOutput LlhaNet::infer(const CorrespondenceSet& corr) {
  corr.validate(true);
  ad::Tape tape;
  ForwardVars f = forward(tape, corr.coords, corr.size(), false);
  NetworkOutput out;
  out.logits = tape.value(f.final_logits).col(0);
  WeightMapping mapping = logits_to_weights(out.logits);
  out.p = mapping.p;
  out.w = mapping.w;
  for (std::size_t s = 0; s < f.stage_features.size(); ++s) {
    out.stage_features.push_back(tape.value(f.stage_features[s]));
    out.stage_logits.push_back(tape.value(f.stage_logits[s]).col(0));
  }
  SolveOutcome solved = solve_or_fallback(corr, out.w);
  out.essential = solved.essential;
  out.solver_weights = solved.used_weights;
  out.solver_fallback = solved.fallback;
  return out;
}

Prediction pose_from_weights(const CorrespondenceSet& corr, const Vector& w,
                             const Eigen::VectorXi& decisions, bool with_ransac,
                             const RansacConfig& ransac) {
  if (w.size() != corr.size() || decisions.size() != corr.size())
    throw ValidationError("pose_from_weights: weight/decision length mismatch");
  Prediction pred;
  pred.decisions = decisions;
  pred.weights = w;

  if (with_ransac) {
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < decisions.size(); ++i)
      if (decisions(i) != 0) keep.push_back(i);
    if (keep.size() < 8) {
      keep = top_k_by_weight(w, 8);
      pred.low_confidence = true;
    }
    const CorrespondenceSet sub = subset_rows(corr, keep);
    const RansacResult rr = ransac_essential(sub, ransac);
    if (rr.has_model) {
      pred.low_confidence = pred.low_confidence || rr.low_confidence;
      Vector wsub = rr.inliers.cast<double>() * kWeightCap;
      if (rr.inlier_count == 0) wsub.setConstant(kWeightCap);
      pred.essential = rr.essential;
      pred.pose = recover_pose(rr.essential, sub, wsub);
      return pred;
    }
    pred.low_confidence = true;  // no solvable sample: weighted path below
  }

  const SolveOutcome solved = solve_or_fallback(corr, w);
  pred.low_confidence = pred.low_confidence || solved.fallback;
  pred.essential = project_to_essential(solved.essential);
  pred.pose = recover_pose(pred.essential, corr, solved.used_weights);
  return pred;
}

Prediction LlhaNet::predict(const CorrespondenceSet& corr, bool with_ransac,
                            const RansacConfig& ransac) {
  const NetworkOutput out = infer(corr);
  Eigen::VectorXi decisions(out.logits.size());
  for (Eigen::Index i = 0; i < out.logits.size(); ++i)
    decisions(i) = out.logits(i) > 0.0 ? 1 : 0;
  return pose_from_weights(corr, out.w, decisions, with_ransac, ransac);
}

void LlhaNet::save(const std::string& path) {
  ParamRegistry reg = registry();
  const std::string hash_hex = to_hex(config.hash());

  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["config_hash"] = hash_hex;
  manifest["tensors"] = json::array();
  for (const auto& [name, t] : reg.tensors())
    manifest["tensors"].push_back(
        {{"name", name}, {"rows", t->value.rows()}, {"cols", t->value.cols()}});
  manifest["buffers"] = json::array();
  for (const auto& [name, m] : reg.buffers())
    manifest["buffers"].push_back({{"name", name}, {"rows", m->rows()}, {"cols", m->cols()}});

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  const std::string text = manifest.dump();
  io::write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : reg.tensors())
    for (Eigen::Index r = 0; r < t->value.rows(); ++r)
      for (Eigen::Index c = 0; c < t->value.cols(); ++c) io::write_f64(os, t->value(r, c));
  for (const auto& [name, m] : reg.buffers())
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      for (Eigen::Index c = 0; c < m->cols(); ++c) io::write_f64(os, (*m)(r, c));
  os.flush();
  if (!os) throw IoError("failed writing checkpoint: " + path);

  json sidecar;
  sidecar["format"] = kCheckpointFormat;
  sidecar["config"] = config_to_json(config);
  sidecar["config_hash"] = hash_hex;
  std::ofstream side(path + ".json");
  if (!side) throw IoError("cannot open checkpoint sidecar for writing: " + path + ".json");
  side << sidecar.dump(2) << "\n";
  side.flush();
  if (!side) throw IoError("failed writing checkpoint sidecar: " + path + ".json");
}

LlhaNet LlhaNet::load(const std::string& path) {
  std::ifstream side(path + ".json");
  if (!side) throw IoError("cannot open checkpoint sidecar: " + path + ".json");
  std::stringstream buf;
  buf << side.rdbuf();
  json sidecar = json::parse(buf.str(), nullptr, false);
  if (sidecar.is_discarded() || !sidecar.is_object())
    throw ParseError("checkpoint sidecar is not valid JSON: " + path + ".json");
  if (sidecar.value("format", "") != kCheckpointFormat)
    throw ParseError("unknown checkpoint format in sidecar: " + path + ".json");
  if (!sidecar.contains("config") || !sidecar.contains("config_hash"))
    throw ParseError("checkpoint sidecar missing config or config_hash");

  NetworkConfig cfg = config_from_json(sidecar["config"]);
  cfg.validate();
  const std::string expect_hash = to_hex(cfg.hash());
  if (sidecar["config_hash"].get<std::string>() != expect_hash)
    throw ValidationError("checkpoint config hash mismatch in sidecar; refusing to load");

  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  const std::uint64_t len = io::read_u64(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw ParseError("truncated checkpoint manifest: " + path);
  json manifest = json::parse(text, nullptr, false);
  if (manifest.is_discarded() || !manifest.is_object())
    throw ParseError("checkpoint manifest is not valid JSON: " + path);
  if (manifest.value("format", "") != kCheckpointFormat)
    throw ParseError("unknown checkpoint format: " + path);
  if (manifest.value("config_hash", "") != expect_hash)
    throw ValidationError("checkpoint config hash mismatch; refusing to load");

  LlhaNet net;
  net.init(cfg, 0);
  ParamRegistry reg = net.registry();
  std::unordered_map<std::string, ad::Tensor*> tensors;
  for (const auto& [name, t] : reg.tensors()) tensors[name] = t;
  std::unordered_map<std::string, Matrix*> buffers;
  for (const auto& [name, m] : reg.buffers()) buffers[name] = m;

  const auto read_into = [&](Matrix& m, const json& entry) {
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    if (rows != m.rows() || cols != m.cols())
      throw ValidationError("checkpoint tensor shape mismatch for " +
                            entry.at("name").get<std::string>());
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = io::read_f64(is);
  };

  try {
    if (manifest.at("tensors").size() != tensors.size() ||
        manifest.at("buffers").size() != buffers.size())
      throw ValidationError("checkpoint tensor inventory does not match the config");
    for (const json& entry : manifest.at("tensors")) {
      const auto it = tensors.find(entry.at("name").get<std::string>());
      if (it == tensors.end())
        throw ParseError("checkpoint names unknown tensor " +
                         entry.at("name").get<std::string>());
      read_into(it->second->value, entry);
    }
    for (const json& entry : manifest.at("buffers")) {
      const auto it = buffers.find(entry.at("name").get<std::string>());
      if (it == buffers.end())
        throw ParseError("checkpoint names unknown buffer " +
                         entry.at("name").get<std::string>());
      read_into(*it->second, entry);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed checkpoint manifest: ") + e.what());
  } catch (const IoError&) {
    throw ParseError("truncated checkpoint data: " + path);
  }
  return net;
}

}  // namespace llha
