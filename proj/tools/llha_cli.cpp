// Command-line surface: synthetic data generation, training, evaluation,
// the RANSAC baseline, the ablation grid, and report rendering.
//
// Exit codes: 0 ok, 2 validation/configuration/parse error, 3 degenerate
// data (always for DegenerateError; with --strict-degenerate also for runs
// that merely recorded degeneracy warnings).
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "llha/evaluation.hpp"
#include "llha/network.hpp"
#include "llha/scene.hpp"
#include "llha/training.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitDegenerate = 3;

std::optional<std::uint64_t> env_seed_override() {
  const char* raw = std::getenv("LLHA_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(raw, &used);
    if (used != std::string(raw).size())
      throw llha::ValidationError("LLHA_SEED must be a non-negative integer");
    return static_cast<std::uint64_t>(v);
  } catch (const std::invalid_argument&) {
    throw llha::ValidationError("LLHA_SEED must be a non-negative integer");
  } catch (const std::out_of_range&) {
    throw llha::ValidationError("LLHA_SEED does not fit in 64 bits");
  }
}

std::uint64_t apply_seed_override(std::uint64_t flag_value) {
  const auto env = env_seed_override();
  return env ? *env : flag_value;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw llha::IoError("cannot open " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw llha::IoError("cannot open " + path + " for writing");
  out << text;
}

// Network-shape flags shared by train and ablate. The JSON config file, when
// given, wins over individual flags.
struct NetFlags {
  std::string config_path;
  std::string preset = "desk";
  std::optional<std::int64_t> channels, clusters;
  std::optional<int> stages, blocks, integration, h;
  std::optional<std::string> pool, block_kind, ha_front, ha_back;
  bool gated = false;
  bool no_pool = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--net-config", config_path, "network config JSON file (overrides flags)");
    cmd->add_option("--preset", preset, "base preset: desk or paper")
        ->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option("--channels", channels, "feature channels C");
    cmd->add_option("--clusters", clusters, "pooled cluster count m");
    cmd->add_option("--stages", stages, "extraction stages");
    cmd->add_option("--blocks-per-stage", blocks, "feature blocks per extraction stage");
    cmd->add_option("--integration-blocks", integration, "integration feature blocks");
    cmd->add_option("--down-ratio", h, "channel fusion down-ratio");
    cmd->add_option("--pool", pool, "global pooling: gap or gmp")
        ->check(CLI::IsMember({"gap", "gmp"}));
    cmd->add_option("--block", block_kind, "backbone block: convblock, llf, ha or piha")
        ->check(CLI::IsMember({"convblock", "llf", "ha", "piha"}));
    cmd->add_option("--ha-front", ha_front, "attention front block: llf or pointcn")
        ->check(CLI::IsMember({"llf", "pointcn"}));
    cmd->add_option("--ha-back", ha_back, "attention back block: llf or pointcn")
        ->check(CLI::IsMember({"llf", "pointcn"}));
    cmd->add_flag("--gated-attention", gated, "squash the attention branch with a sigmoid");
    cmd->add_flag("--no-pool", no_pool, "drop the pool/order-aware/unpool stage");
  }

  llha::NetworkConfig build() const {
    if (!config_path.empty())
      return llha::NetworkConfig::from_json_text(read_text_file(config_path));
    llha::NetworkConfig cfg =
        preset == "paper" ? llha::NetworkConfig::paper() : llha::NetworkConfig::desk();
    if (channels) cfg.channels = *channels;
    if (clusters) cfg.clusters = *clusters;
    if (stages) cfg.extraction_stages = *stages;
    if (blocks) cfg.piha_per_extraction = *blocks;
    if (integration) cfg.integration_piha = *integration;
    if (h) cfg.h = *h;
    if (pool) cfg.pool = *pool == "gmp" ? llha::PoolKind::GMP : llha::PoolKind::GAP;
    if (block_kind) {
      if (*block_kind == "convblock") cfg.block = llha::BackboneBlock::ConvBlock;
      if (*block_kind == "llf") cfg.block = llha::BackboneBlock::LLF;
      if (*block_kind == "ha") cfg.block = llha::BackboneBlock::HA;
      if (*block_kind == "piha") cfg.block = llha::BackboneBlock::PIHA;
    }
    if (ha_front)
      cfg.ha_front = *ha_front == "llf" ? llha::EndBlockKind::LLF : llha::EndBlockKind::PointCN;
    if (ha_back)
      cfg.ha_back = *ha_back == "llf" ? llha::EndBlockKind::LLF : llha::EndBlockKind::PointCN;
    if (gated) cfg.gated_attention = true;
    if (no_pool) cfg.use_pool = false;
    cfg.validate();
    return cfg;
  }
};

struct SceneFlags {
  int scenes = 100;
  llha::SceneConfig config;

  void attach(CLI::App* cmd) {
    cmd->add_option("--scenes", scenes, "number of scenes");
    cmd->add_option("--n", config.n_correspondences, "correspondences per scene");
    cmd->add_option("--outlier-ratio", config.outlier_ratio, "injected outlier fraction [0,1)");
    cmd->add_option("--noise", config.pixel_noise_sigma, "inlier noise sigma");
    cmd->add_option("--max-rotation", config.max_rotation_deg, "max relative rotation (deg)");
    cmd->add_option("--depth-min", config.depth_min, "near frustum depth");
    cmd->add_option("--depth-max", config.depth_max, "far frustum depth");
  }
};

int run_gen_data(const std::string& out, const SceneFlags& scene, std::uint64_t seed) {
  const llha::Dataset ds = llha::generate_dataset(scene.scenes, scene.config, seed);
  llha::write_dataset(out, ds);
  std::cout << "wrote " << ds.scenes.size() << " scenes to " << out << "\n";
  return kExitOk;
}

int run_train(const std::string& data, const std::string& out_dir, const NetFlags& net_flags,
              llha::TrainConfig tcfg, bool strict) {
  const llha::Dataset ds = llha::read_dataset(data);
  const llha::NetworkConfig ncfg = net_flags.build();
  const llha::TrainResult result = llha::train(ds, ncfg, tcfg, out_dir);
  std::cout << "iterations      " << result.iters_run << "\n"
            << "best val F      " << result.best_val_f << " (iter " << result.best_iter << ")\n"
            << "best checkpoint " << result.best_checkpoint_path << "\n"
            << "last checkpoint " << result.last_checkpoint_path << "\n"
            << "metrics trace   " << result.trace_path << "\n";
  const long warnings =
      result.essential_skips + result.weight_floor_fallbacks + result.stop_grad_fallbacks;
  if (warnings > 0) {
    std::cout << "degeneracy warnings: " << result.essential_skips << " essential skips, "
              << result.weight_floor_fallbacks << " weight-floor fallbacks, "
              << result.stop_grad_fallbacks << " stop-gradient fallbacks\n";
    if (strict) return kExitDegenerate;
  }
  return kExitOk;
}

int finish_eval(const llha::EvalReport& report, const std::string& out, bool strict) {
  if (!out.empty()) write_text_file(out, llha::eval_report_json(report));
  std::cout << llha::eval_report_table(report);
  if (strict && (report.low_confidence_no_ransac > 0 || report.low_confidence_with_ransac > 0))
    return kExitDegenerate;
  return kExitOk;
}

// The baseline through the shared evaluation plumbing: both report columns
// are the same RANSAC estimate.
class BaselinePredictor final : public llha::Predictor {
 public:
  llha::Prediction predict(const llha::CorrespondenceSet& corr, bool,
                           const llha::RansacConfig& ransac) override {
    const llha::BaselineResult base = llha::ransac_baseline(corr, ransac);
    llha::Prediction pred;
    pred.decisions = base.decisions;
    pred.pose = base.pose;
    pred.essential = base.essential;
    pred.weights = base.decisions.cast<double>() * llha::kWeightCap;
    pred.low_confidence = base.low_confidence;
    return pred;
  }
};

int run_ablate(const llha::AblationSpec& spec, const std::string& out_dir) {
  const std::vector<llha::AblationCell> cells = llha::ablation_grid(spec);
  const std::string table = llha::ablation_table(cells);
  std::cout << table;
  std::filesystem::create_directories(out_dir);
  write_text_file(out_dir + "/ablation.txt", table);
  nlohmann::json rows = nlohmann::json::array();
  for (const llha::AblationCell& c : cells)
    rows.push_back({{"name", c.name},
                    {"ok", c.ok},
                    {"val_f", c.val_f},
                    {"map5", c.map5},
                    {"parameters", c.parameters},
                    {"train_seconds", c.train_seconds},
                    {"error", c.error}});
  write_text_file(out_dir + "/ablation.json", rows.dump(2));
  for (const llha::AblationCell& c : cells)
    if (!c.ok) return kExitDegenerate;
  return kExitOk;
}

int run_report(const std::string& in, const std::string& out_dir) {
  const llha::EvalReport report = llha::eval_report_from_json(read_text_file(in));
  std::filesystem::create_directories(out_dir);
  write_text_file(out_dir + "/prf.svg", llha::prf_bars_svg({{"model", report.classification}}));
  write_text_file(out_dir + "/map.svg", llha::map_table_svg(report));
  write_text_file(out_dir + "/table.txt", llha::eval_report_table(report));
  std::cout << "wrote prf.svg, map.svg and table.txt to " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-view correspondence pruning: data, training, evaluation"};
  app.require_subcommand(1);
  bool strict = false;
  app.add_flag("--strict-degenerate", strict,
               "treat degeneracy warnings (fallbacks, skips, low confidence) as exit code 3");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  SceneFlags scene_flags;
  std::string gen_out = "data.bin";
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output dataset path")->required();
  scene_flags.attach(gen);
  gen->add_option("--seed", gen_seed, "dataset seed");

  // train
  auto* tr = app.add_subcommand("train", "train a network on a dataset");
  std::string tr_data, tr_out = "run";
  NetFlags tr_net;
  llha::TrainConfig tcfg;
  tcfg.total_iters = 1000;
  bool no_balance = false;
  tr->add_option("--data", tr_data, "dataset path")->required();
  tr->add_option("--out", tr_out, "output directory (trace + checkpoints)");
  tr_net.attach(tr);
  tr->add_option("--iters", tcfg.total_iters, "total iterations");
  tr->add_option("--batch-size", tcfg.batch_size, "instances per batch");
  tr->add_option("--lr", tcfg.learning_rate, "Adam learning rate");
  tr->add_option("--alpha", tcfg.alpha, "essential-loss weight after warmup");
  tr->add_option("--alpha-warmup", tcfg.alpha_warmup_iters, "iterations with alpha forced to 0");
  tr->add_option("--log-every", tcfg.log_every, "trace/validation cadence");
  tr->add_option("--seed", tcfg.seed, "training seed");
  tr->add_flag("--no-balance", no_balance, "disable class-balanced BCE");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ev_data, ev_ckpt, ev_out;
  llha::EvalOptions ev_opts;
  ev->add_option("--data", ev_data, "dataset path")->required();
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--out", ev_out, "report JSON output path");
  ev->add_option("--thresholds", ev_opts.map_thresholds, "mAP thresholds (deg)");
  ev->add_option("--ransac-iters", ev_opts.ransac.iterations, "post-processing RANSAC iterations");
  ev->add_option("--ransac-threshold", ev_opts.ransac.inlier_threshold,
                 "post-processing RANSAC inlier threshold");
  std::uint64_t ev_seed = 0;
  ev->add_option("--seed", ev_seed, "RANSAC seed");

  // baseline
  auto* bl = app.add_subcommand("baseline", "pure RANSAC comparison row");
  std::string bl_data, bl_out;
  llha::EvalOptions bl_opts;
  std::uint64_t bl_seed = 0;
  bl->add_option("--data", bl_data, "dataset path")->required();
  bl->add_option("--out", bl_out, "report JSON output path");
  bl->add_option("--iterations", bl_opts.ransac.iterations, "RANSAC iterations");
  bl->add_option("--threshold", bl_opts.ransac.inlier_threshold, "inlier threshold");
  bl->add_option("--thresholds", bl_opts.map_thresholds, "mAP thresholds (deg)");
  bl->add_option("--seed", bl_seed, "RANSAC seed");

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and score the ablation grid");
  llha::AblationSpec spec;
  SceneFlags ab_scene;
  ab_scene.scenes = 10;
  NetFlags ab_net;
  std::string ab_out = "ablation";
  std::vector<std::string> ab_axes = {"modules"};
  spec.budget.total_iters = 500;
  ab->add_option("--out", ab_out, "output directory");
  ab->add_option("--axes", ab_axes, "grid axes: modules, placement, pooling")
      ->check(CLI::IsMember({"modules", "placement", "pooling"}));
  ab_scene.attach(ab);
  ab_net.attach(ab);
  ab->add_option("--data-seed", spec.data_seed, "dataset seed");
  ab->add_option("--iters", spec.budget.total_iters, "training budget per cell");
  ab->add_option("--batch-size", spec.budget.batch_size, "instances per batch");
  ab->add_option("--lr", spec.budget.learning_rate, "Adam learning rate");
  ab->add_option("--alpha-warmup", spec.budget.alpha_warmup_iters, "alpha warmup iterations");
  ab->add_option("--log-every", spec.budget.log_every, "trace/validation cadence");
  ab->add_option("--seed", spec.budget.seed, "shared training seed");

  // report
  auto* rp = app.add_subcommand("report", "render plots and a table from a report JSON");
  std::string rp_in, rp_out = "plots";
  rp->add_option("--in", rp_in, "report JSON path")->required();
  rp->add_option("--out-dir", rp_out, "output directory for svg/txt");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      scene_flags.config.seed = apply_seed_override(gen_seed);
      return run_gen_data(gen_out, scene_flags, scene_flags.config.seed);
    }
    if (tr->parsed()) {
      tcfg.seed = apply_seed_override(tcfg.seed);
      tcfg.balance = !no_balance;
      return run_train(tr_data, tr_out, tr_net, tcfg, strict);
    }
    if (ev->parsed()) {
      ev_opts.ransac.seed = apply_seed_override(ev_seed);
      const llha::Dataset ds = llha::read_dataset(ev_data);
      return finish_eval(llha::evaluate_checkpoint(ds, ev_ckpt, ev_opts), ev_out, strict);
    }
    if (bl->parsed()) {
      bl_opts.ransac.seed = apply_seed_override(bl_seed);
      const llha::Dataset ds = llha::read_dataset(bl_data);
      BaselinePredictor predictor;
      return finish_eval(llha::evaluate(ds, predictor, bl_opts), bl_out, strict);
    }
    if (ab->parsed()) {
      spec.base = ab_net.build();
      spec.scene = ab_scene.config;
      spec.n_scenes = ab_scene.scenes;
      spec.budget.seed = apply_seed_override(spec.budget.seed);
      spec.data_seed = apply_seed_override(spec.data_seed);
      spec.work_dir = ab_out + "/runs";
      spec.axes.clear();
      for (const std::string& a : ab_axes) {
        if (a == "modules") spec.axes.push_back(llha::AblationAxis::Modules);
        if (a == "placement") spec.axes.push_back(llha::AblationAxis::Placement);
        if (a == "pooling") spec.axes.push_back(llha::AblationAxis::Pooling);
      }
      return run_ablate(spec, ab_out);
    }
    if (rp->parsed()) return run_report(rp_in, rp_out);
  } catch (const llha::DegenerateError& e) {
    std::cerr << "degenerate data: " << e.what() << "\n";
    return kExitDegenerate;
  } catch (const llha::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitOk;
}
