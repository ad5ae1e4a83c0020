#include "llha/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <nlohmann/json.hpp>

#include "llha/common.hpp"

namespace llha {

using json = nlohmann::json;

PRF prf(const Eigen::VectorXi& decisions, const Eigen::VectorXi& labels) {
  if (decisions.size() != labels.size()) throw ValidationError("prf: length mismatch");
  PRF out;
  for (Eigen::Index i = 0; i < decisions.size(); ++i) {
    const int d = decisions(i);
    const int y = labels(i);
    if (d != 0 && d != 1) throw ValidationError("prf: decisions must be binary");
    if (y != 0 && y != 1) throw ValidationError("prf: labels must be binary");
    if (d == 1 && y == 1) ++out.true_positives;
    if (d == 1 && y == 0) ++out.false_positives;
    if (d == 0 && y == 1) ++out.false_negatives;
  }
  const double tp = static_cast<double>(out.true_positives);
  const long pred_pos = out.true_positives + out.false_positives;
  const long label_pos = out.true_positives + out.false_negatives;
  out.no_positive_decisions = pred_pos == 0;
  out.no_positive_labels = label_pos == 0;
  out.precision = pred_pos == 0 ? 0.0 : 100.0 * tp / static_cast<double>(pred_pos);
  out.recall = label_pos == 0 ? 0.0 : 100.0 * tp / static_cast<double>(label_pos);
  const double pr = out.precision + out.recall;
  out.f_score = pr > 0.0 ? 2.0 * out.precision * out.recall / pr : 0.0;
  return out;
}

double map_metric(const std::vector<PoseError>& errors, double threshold_deg) {
  const double steps = threshold_deg / 5.0;
  if (threshold_deg <= 0.0 || std::abs(steps - std::round(steps)) > 1e-9)
    throw ValidationError("map_metric: threshold must be a positive multiple of 5 degrees");
  if (errors.empty()) throw ValidationError("map_metric: empty error list has no defined value");
  const int n_steps = static_cast<int>(std::llround(steps));
  double acc = 0.0;
  for (int s = 1; s <= n_steps; ++s) {
    const double sub = 5.0 * s;
    long below = 0;
    for (const PoseError& e : errors)
      if (e.max_deg() < sub) ++below;
    acc += static_cast<double>(below) / static_cast<double>(errors.size());
  }
  return 100.0 * acc / n_steps;
}

BaselineResult ransac_baseline(const CorrespondenceSet& corr, const RansacConfig& cfg) {
  const RansacResult rr = ransac_essential(corr, cfg);
  BaselineResult out;
  out.low_confidence = rr.low_confidence || !rr.has_model;
  if (!rr.has_model) {
    out.decisions = Eigen::VectorXi::Zero(corr.size());
    return out;
  }
  out.decisions = rr.inliers;
  out.essential = rr.essential;
  Vector w = rr.inliers.cast<double>() * kWeightCap;
  if (rr.inlier_count == 0) w.setConstant(kWeightCap);
  try {
    out.pose = recover_pose(rr.essential, corr, w);
  } catch (const DegenerateError&) {
    // Every candidate scored zero cheirality support; keep the identity pose
    // and report low confidence rather than failing the whole run.
    out.low_confidence = true;
  }
  return out;
}

Prediction NetworkPredictor::predict(const CorrespondenceSet& corr, bool with_ransac,
                                     const RansacConfig& ransac) {
  return net_->predict(corr, with_ransac, ransac);
}

Prediction OraclePredictor::predict(const CorrespondenceSet& corr, bool with_ransac,
                                    const RansacConfig& ransac) {
  if (!corr.labels) throw ValidationError("oracle predictor: labels required");
  const Vector w = corr.labels->cast<double>() * kWeightCap;
  return pose_from_weights(corr, w, *corr.labels, with_ransac, ransac);
}

EvalReport evaluate(const Dataset& dataset, Predictor& predictor, const EvalOptions& options) {
  if (dataset.scenes.empty()) throw ValidationError("evaluate: empty dataset");
  for (int t : options.map_thresholds)
    if (t <= 0 || t % 5 != 0)
      throw ValidationError("evaluate: mAP thresholds must be positive multiples of 5");

  const auto t0 = std::chrono::steady_clock::now();
  EvalReport report;
  report.scenes = static_cast<int>(dataset.scenes.size());

  Eigen::Index total = 0;
  for (const ScenePair& s : dataset.scenes) {
    if (!s.corr.labels) throw ValidationError("evaluate: dataset scene without labels");
    total += s.corr.size();
  }
  Eigen::VectorXi decisions(total), labels(total);
  Eigen::Index at = 0;

  for (const ScenePair& scene : dataset.scenes) {
    const CorrespondenceSet& corr = scene.corr;
    const Prediction plain = predictor.predict(corr, false, options.ransac);
    const Prediction post = predictor.predict(corr, true, options.ransac);
    decisions.segment(at, corr.size()) = plain.decisions;
    labels.segment(at, corr.size()) = *corr.labels;
    at += corr.size();
    if (plain.low_confidence) ++report.low_confidence_no_ransac;
    if (post.low_confidence) ++report.low_confidence_with_ransac;
    if (corr.pose) {
      ++report.scenes_with_pose;
      report.errors_no_ransac.push_back(pose_error(plain.pose, *corr.pose));
      report.errors_with_ransac.push_back(pose_error(post.pose, *corr.pose));
    }
  }

  report.classification = prf(decisions, labels);
  if (report.scenes_with_pose == 0) {
    report.map_absent = true;
    report.notice = "no ground-truth poses in the dataset; mAP omitted";
  } else {
    for (int t : options.map_thresholds) {
      report.map_no_ransac[t] = map_metric(report.errors_no_ransac, t);
      report.map_with_ransac[t] = map_metric(report.errors_with_ransac, t);
    }
    if (report.scenes_with_pose < report.scenes)
      report.notice = "mAP covers only the scenes that carry a ground-truth pose";
  }
  report.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

EvalReport evaluate_checkpoint(const Dataset& dataset, const std::string& checkpoint_path,
                               const EvalOptions& options) {
  LlhaNet net = LlhaNet::load(checkpoint_path);
  NetworkPredictor predictor(net);
  return evaluate(dataset, predictor, options);
}

namespace {

json map_to_json(const std::map<int, double>& m) {
  json out = json::object();
  for (const auto& [t, v] : m) out[std::to_string(t)] = v;
  return out;
}

std::map<int, double> map_from_json(const json& j) {
  std::map<int, double> out;
  for (auto it = j.begin(); it != j.end(); ++it)
    out[std::stoi(it.key())] = it.value().get<double>();
  return out;
}

json errors_to_json(const std::vector<PoseError>& errors) {
  json out = json::array();
  for (const PoseError& e : errors) out.push_back({e.rotation_deg, e.translation_deg});
  return out;
}

std::vector<PoseError> errors_from_json(const json& j) {
  std::vector<PoseError> out;
  for (const auto& pair : j) {
    PoseError e;
    e.rotation_deg = pair.at(0).get<double>();
    e.translation_deg = pair.at(1).get<double>();
    out.push_back(e);
  }
  return out;
}

constexpr const char* kEvalFormat = "llha-eval-v1";

}  // namespace

std::string eval_report_json(const EvalReport& r) {
  json j = {{"format", kEvalFormat},
            {"precision", r.classification.precision},
            {"recall", r.classification.recall},
            {"f_score", r.classification.f_score},
            {"true_positives", r.classification.true_positives},
            {"false_positives", r.classification.false_positives},
            {"false_negatives", r.classification.false_negatives},
            {"no_positive_decisions", r.classification.no_positive_decisions},
            {"no_positive_labels", r.classification.no_positive_labels},
            {"map_no_ransac", map_to_json(r.map_no_ransac)},
            {"map_with_ransac", map_to_json(r.map_with_ransac)},
            {"map_absent", r.map_absent},
            {"notice", r.notice},
            {"errors_no_ransac", errors_to_json(r.errors_no_ransac)},
            {"errors_with_ransac", errors_to_json(r.errors_with_ransac)},
            {"scenes", r.scenes},
            {"scenes_with_pose", r.scenes_with_pose},
            {"low_confidence_no_ransac", r.low_confidence_no_ransac},
            {"low_confidence_with_ransac", r.low_confidence_with_ransac},
            {"wall_clock_s", r.wall_clock_s}};
  return j.dump(2);
}

EvalReport eval_report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("eval report: ") + e.what());
  }
  try {
    if (!j.contains("format") || j.at("format").get<std::string>() != kEvalFormat)
      throw ParseError("eval report: unknown format");
    EvalReport r;
    r.classification.precision = j.at("precision").get<double>();
    r.classification.recall = j.at("recall").get<double>();
    r.classification.f_score = j.at("f_score").get<double>();
    r.classification.true_positives = j.at("true_positives").get<long>();
    r.classification.false_positives = j.at("false_positives").get<long>();
    r.classification.false_negatives = j.at("false_negatives").get<long>();
    r.classification.no_positive_decisions = j.at("no_positive_decisions").get<bool>();
    r.classification.no_positive_labels = j.at("no_positive_labels").get<bool>();
    r.map_no_ransac = map_from_json(j.at("map_no_ransac"));
    r.map_with_ransac = map_from_json(j.at("map_with_ransac"));
    r.map_absent = j.at("map_absent").get<bool>();
    r.notice = j.at("notice").get<std::string>();
    r.errors_no_ransac = errors_from_json(j.at("errors_no_ransac"));
    r.errors_with_ransac = errors_from_json(j.at("errors_with_ransac"));
    r.scenes = j.at("scenes").get<int>();
    r.scenes_with_pose = j.at("scenes_with_pose").get<int>();
    r.low_confidence_no_ransac = j.at("low_confidence_no_ransac").get<int>();
    r.low_confidence_with_ransac = j.at("low_confidence_with_ransac").get<int>();
    r.wall_clock_s = j.at("wall_clock_s").get<double>();
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("eval report: ") + e.what());
  }
}

std::string eval_report_table(const EvalReport& r) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "scenes            %6d  (%d with pose)\n", r.scenes,
                r.scenes_with_pose);
  out << line;
  std::snprintf(line, sizeof line, "precision         %8.2f %%\n", r.classification.precision);
  out << line;
  std::snprintf(line, sizeof line, "recall            %8.2f %%\n", r.classification.recall);
  out << line;
  std::snprintf(line, sizeof line, "f_score           %8.2f %%\n", r.classification.f_score);
  out << line;
  if (r.map_absent) {
    out << "mAP               absent\n";
  } else {
    out << "mAP (deg)         no-RANSAC   with-RANSAC\n";
    for (const auto& [t, v] : r.map_no_ransac) {
      const auto it = r.map_with_ransac.find(t);
      const double with_v = it == r.map_with_ransac.end() ? 0.0 : it->second;
      std::snprintf(line, sizeof line, "  @%-3d            %8.2f      %8.2f\n", t, v, with_v);
      out << line;
    }
  }
  std::snprintf(line, sizeof line, "low confidence    %d plain / %d ransac\n",
                r.low_confidence_no_ransac, r.low_confidence_with_ransac);
  out << line;
  std::snprintf(line, sizeof line, "wall clock        %8.2f s\n", r.wall_clock_s);
  out << line;
  if (!r.notice.empty()) out << "notice            " << r.notice << "\n";
  return out.str();
}

namespace {

std::string sanitize_name(const std::string& name) {
  std::string out;
  for (char c : name)
    out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
  return out;
}

std::vector<std::pair<std::string, NetworkConfig>> grid_configs(const AblationSpec& spec) {
  std::vector<std::pair<std::string, NetworkConfig>> cells;
  for (AblationAxis axis : spec.axes) {
    switch (axis) {
      case AblationAxis::Modules: {
        NetworkConfig c = spec.base;
        c.block = BackboneBlock::ConvBlock;
        c.use_pool = false;
        c.extraction_stages = 1;
        cells.emplace_back("baseline", c);
        c.use_pool = true;
        cells.emplace_back("+pool", c);
        c.extraction_stages = spec.base.extraction_stages;
        cells.emplace_back("+iter", c);
        c.block = BackboneBlock::LLF;
        cells.emplace_back("+llf", c);
        c.block = BackboneBlock::HA;
        cells.emplace_back("+ha", c);
        c.block = BackboneBlock::PIHA;
        cells.emplace_back("full", c);
        break;
      }
      case AblationAxis::Placement: {
        const std::pair<const char*, EndBlockKind> kinds[] = {
            {"cn", EndBlockKind::PointCN}, {"llf", EndBlockKind::LLF}};
        for (const auto& [fn, fk] : kinds)
          for (const auto& [bn, bk] : kinds) {
            NetworkConfig c = spec.base;
            c.ha_front = fk;
            c.ha_back = bk;
            cells.emplace_back(std::string(fn) + "+" + bn, c);
          }
        break;
      }
      case AblationAxis::Pooling: {
        NetworkConfig c = spec.base;
        c.pool = PoolKind::GAP;
        cells.emplace_back("gap", c);
        c.pool = PoolKind::GMP;
        cells.emplace_back("gmp", c);
        break;
      }
    }
  }
  return cells;
}

}  // namespace

std::vector<AblationCell> ablation_grid(const AblationSpec& spec) {
  const Dataset dataset = generate_dataset(spec.n_scenes, spec.scene, spec.data_seed);
  const auto [train_count, val_count] = train_val_split(static_cast<int>(dataset.scenes.size()));
  Dataset val;
  val.header_config = dataset.header_config;
  for (int i = train_count; i < train_count + val_count; ++i)
    val.scenes.push_back(dataset.scenes[static_cast<std::size_t>(i)]);

  std::vector<AblationCell> cells;
  for (auto& [name, config] : grid_configs(spec)) {
    AblationCell cell;
    cell.name = name;
    cell.config = config;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      LlhaNet net;
      const TrainResult r =
          train(dataset, config, spec.budget, spec.work_dir + "/" + sanitize_name(name), &net);
      cell.val_f = r.best_val_f;
      cell.parameters = net.parameter_count();
      if (!val.scenes.empty()) {
        NetworkPredictor predictor(net);
        EvalOptions opts;
        opts.map_thresholds = {5};
        opts.ransac.seed = spec.budget.seed;
        const EvalReport rep = evaluate(val, predictor, opts);
        if (!rep.map_absent) cell.map5 = rep.map_no_ransac.at(5);
      }
      cell.ok = true;
    } catch (const std::exception& e) {
      cell.ok = false;
      cell.error = e.what();
    }
    cell.train_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    cells.push_back(std::move(cell));
  }
  return cells;
}

std::string ablation_table(const std::vector<AblationCell>& cells) {
  std::ostringstream out;
  out << "config      val F     mAP@5    params      time(s)  status\n";
  char line[200];
  for (const AblationCell& c : cells) {
    if (c.ok) {
      std::snprintf(line, sizeof line, "%-10s %7.2f  %7.2f  %9lld  %9.1f  ok\n", c.name.c_str(),
                    c.val_f, c.map5, static_cast<long long>(c.parameters), c.train_seconds);
      out << line;
    } else {
      std::snprintf(line, sizeof line, "%-10s       -        -          -  %9.1f  error: %s\n",
                    c.name.c_str(), c.train_seconds, c.error.c_str());
      out << line;
    }
  }
  return out.str();
}

namespace {

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&') out += "&amp;";
    else if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else out.push_back(c);
  }
  return out;
}

}  // namespace

std::string prf_bars_svg(const std::vector<std::pair<std::string, PRF>>& rows) {
  const int group_w = 130, bar_w = 30, chart_h = 220, base_y = 250, left = 50;
  const int width = left + group_w * std::max<int>(1, static_cast<int>(rows.size())) + 20;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"300\" font-family=\"monospace\" font-size=\"11\">\n";
  out << "<line x1=\"" << left - 10 << "\" y1=\"" << base_y << "\" x2=\"" << width - 10
      << "\" y2=\"" << base_y << "\" stroke=\"black\"/>\n";
  for (int pct : {0, 50, 100}) {
    const int y = base_y - chart_h * pct / 100;
    out << "<text x=\"5\" y=\"" << y + 4 << "\">" << pct << "</text>\n";
    out << "<line x1=\"" << left - 10 << "\" y1=\"" << y << "\" x2=\"" << width - 10 << "\" y2=\""
        << y << "\" stroke=\"#dddddd\"/>\n";
  }
  const char* fills[3] = {"#4878a8", "#e0a030", "#50a060"};
  const char* metric[3] = {"P", "R", "F"};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double vals[3] = {rows[i].second.precision, rows[i].second.recall,
                            rows[i].second.f_score};
    const int gx = left + static_cast<int>(i) * group_w;
    for (int k = 0; k < 3; ++k) {
      const int h = static_cast<int>(std::lround(chart_h * std::clamp(vals[k], 0.0, 100.0) / 100.0));
      const int x = gx + k * (bar_w + 4);
      out << "<rect x=\"" << x << "\" y=\"" << base_y - h << "\" width=\"" << bar_w
          << "\" height=\"" << h << "\" fill=\"" << fills[k] << "\"/>\n";
      out << "<text x=\"" << x + 8 << "\" y=\"" << base_y + 14 << "\">" << metric[k]
          << "</text>\n";
      char v[32];
      std::snprintf(v, sizeof v, "%.1f", vals[k]);
      out << "<text x=\"" << x << "\" y=\"" << base_y - h - 4 << "\">" << v << "</text>\n";
    }
    out << "<text x=\"" << gx << "\" y=\"" << base_y + 30 << "\">" << svg_escape(rows[i].first)
        << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

std::string map_table_svg(const EvalReport& report) {
  std::ostringstream out;
  const int row_h = 22;
  const int rows = static_cast<int>(report.map_no_ransac.size());
  const int height = 70 + row_h * std::max(rows, 1);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"360\" height=\"" << height
      << "\" font-family=\"monospace\" font-size=\"12\">\n";
  out << "<text x=\"10\" y=\"20\" font-weight=\"bold\">mAP (percent)</text>\n";
  out << "<text x=\"10\" y=\"44\">threshold</text><text x=\"120\" y=\"44\">no-RANSAC</text>"
      << "<text x=\"240\" y=\"44\">with-RANSAC</text>\n";
  if (report.map_absent) {
    out << "<text x=\"10\" y=\"" << 44 + row_h << "\">absent: " << svg_escape(report.notice)
        << "</text>\n";
  } else {
    int y = 44;
    for (const auto& [t, v] : report.map_no_ransac) {
      y += row_h;
      const auto it = report.map_with_ransac.find(t);
      char a[32], b[32];
      std::snprintf(a, sizeof a, "%.2f", v);
      std::snprintf(b, sizeof b, "%.2f", it == report.map_with_ransac.end() ? 0.0 : it->second);
      out << "<text x=\"10\" y=\"" << y << "\">@" << t << "</text><text x=\"120\" y=\"" << y
          << "\">" << a << "</text><text x=\"240\" y=\"" << y << "\">" << b << "</text>\n";
    }
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace llha
