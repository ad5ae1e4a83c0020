#include "llha/scene.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

namespace llha {
namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

// Scene points must stay representable; the set validator bounds normalized
// coordinates at 10, so projections beyond that are treated as unusable and
// resampled like behind-camera points.
constexpr double kMaxAbsCoord = 10.0;
constexpr int kMaxRejections = 1000;

nlohmann::json config_to_json(const SceneConfig& c) {
  return nlohmann::json{{"n_correspondences", c.n_correspondences},
                        {"outlier_ratio", c.outlier_ratio},
                        {"pixel_noise_sigma", c.pixel_noise_sigma},
                        {"max_rotation_deg", c.max_rotation_deg},
                        {"depth_min", c.depth_min},
                        {"depth_max", c.depth_max},
                        {"seed", c.seed}};
}

SceneConfig config_from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.n_correspondences = j.at("n_correspondences").get<int>();
  c.outlier_ratio = j.at("outlier_ratio").get<double>();
  c.pixel_noise_sigma = j.at("pixel_noise_sigma").get<double>();
  c.max_rotation_deg = j.at("max_rotation_deg").get<double>();
  c.depth_min = j.at("depth_min").get<double>();
  c.depth_max = j.at("depth_max").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

Eigen::Matrix3d rotation_from_axis_angle(const Eigen::Vector3d& axis, double angle) {
  const Eigen::Matrix3d k = cross_product_matrix(axis);
  return Eigen::Matrix3d::Identity() + std::sin(angle) * k + (1.0 - std::cos(angle)) * k * k;
}

void write_array(std::ostream& os, const double* data, std::uint64_t n) {
  io::write_u64(os, n);
  for (std::uint64_t i = 0; i < n; ++i) io::write_f64(os, data[i]);
}

std::vector<double> read_array(std::istream& is) {
  const std::uint64_t n = io::read_u64(is);
  std::vector<double> out(n);
  for (std::uint64_t i = 0; i < n; ++i) out[i] = io::read_f64(is);
  return out;
}

}  // namespace

void SceneConfig::validate() const {
  if (n_correspondences < 16)
    throw ValidationError("n_correspondences must be at least 16, got " +
                          std::to_string(n_correspondences));
  if (!(outlier_ratio >= 0.0 && outlier_ratio < 1.0))
    throw ValidationError("outlier_ratio must lie in [0, 1)");
  if (!(pixel_noise_sigma >= 0.0) || !std::isfinite(pixel_noise_sigma))
    throw ValidationError("pixel_noise_sigma must be finite and non-negative");
  if (!(max_rotation_deg > 0.0 && max_rotation_deg <= 90.0))
    throw ValidationError("max_rotation_deg must lie in (0, 90]");
  if (!(depth_min > 0.0 && depth_max > depth_min))
    throw ValidationError("depth range requires 0 < depth_min < depth_max");
}

ScenePair generate_scene(const SceneConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const int n = config.n_correspondences;

  CameraPose pose;
  {
    const Eigen::Vector3d axis = rng.unit_vector3();
    const double angle = rng.uniform(0.0, config.max_rotation_deg * kPi / 180.0);
    pose.rotation = rotation_from_axis_angle(axis, angle);
    pose.translation = rng.unit_vector3();
  }
  const EssentialMatrix gt = essential_from_pose(pose);

  Matrix coords(n, 4);
  for (int i = 0; i < n; ++i) {
    int rejections = 0;
    for (;;) {
      const double z = rng.uniform(config.depth_min, config.depth_max);
      const double u = rng.uniform(-1.0, 1.0);
      const double v = rng.uniform(-1.0, 1.0);
      const Eigen::Vector3d p1(u * z, v * z, z);
      const Eigen::Vector3d p2 = pose.rotation * p1 + pose.translation;
      if (p2.z() > 1e-6) {
        const double u2 = p2.x() / p2.z();
        const double v2 = p2.y() / p2.z();
        if (std::abs(u2) <= kMaxAbsCoord && std::abs(v2) <= kMaxAbsCoord) {
          coords.row(i) << u, v, u2, v2;
          break;
        }
      }
      if (++rejections >= kMaxRejections)
        throw DegenerateError("scene generation failed: point " + std::to_string(i) +
                              " rejected " + std::to_string(kMaxRejections) +
                              " times (pose leaves the frustum unobservable)");
    }
  }

  // Outlier slots: partial Fisher-Yates over the index set, then injection in
  // index order so the consumed random stream is independent of the draw
  // order above.
  const int n_outliers = static_cast<int>(std::floor(config.outlier_ratio * n));
  Eigen::VectorXi mask = Eigen::VectorXi::Zero(n);
  {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    for (int i = 0; i < n_outliers; ++i) {
      const int j = i + static_cast<int>(rng.uniform_int(n - i));
      std::swap(idx[i], idx[j]);
      mask(idx[i]) = 1;
    }
  }

  if (config.pixel_noise_sigma > 0.0) {
    for (int i = 0; i < n; ++i) {
      if (mask(i)) continue;
      for (int c = 0; c < 4; ++c) {
        double v = coords(i, c) + config.pixel_noise_sigma * rng.normal();
        coords(i, c) = std::clamp(v, -kMaxAbsCoord, kMaxAbsCoord);
      }
    }
  }

  for (int i = 0; i < n; ++i) {
    if (!mask(i)) continue;
    coords(i, 2) = rng.uniform(-1.0, 1.0);
    coords(i, 3) = rng.uniform(-1.0, 1.0);
  }

  ScenePair scene;
  scene.corr.coords = std::move(coords);
  scene.corr.pose = pose;
  scene.corr.gt_essential = gt;
  // Labels come from the geometry, not the injection mask: an injected point
  // may still land near the epipolar line, and noise may push a clean point
  // past the threshold.
  scene.corr.labels = label_inliers(scene.corr, gt);
  scene.injected_outlier_mask = std::move(mask);
  scene.config = config;
  scene.corr.validate(true);
  return scene;
}

Dataset generate_dataset(int n_scenes, const SceneConfig& config_template, std::uint64_t seed) {
  if (n_scenes <= 0) throw ValidationError("n_scenes must be positive");
  config_template.validate();
  Dataset ds;
  ds.header_config = config_template;
  ds.header_config.seed = seed;
  ds.scenes.reserve(static_cast<std::size_t>(n_scenes));
  for (int i = 0; i < n_scenes; ++i) {
    SceneConfig c = config_template;
    c.seed = split_seed(seed, static_cast<std::uint64_t>(i));
    ds.scenes.push_back(generate_scene(c));
  }
  return ds;
}

void write_dataset(const std::string& path, const Dataset& dataset) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");

  nlohmann::json header{{"format", "llha-v1"},
                        {"n_scenes", dataset.scenes.size()},
                        {"config", config_to_json(dataset.header_config)}};
  const std::string header_str = header.dump();
  io::write_u64(os, header_str.size());
  os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

  for (const ScenePair& scene : dataset.scenes) {
    const auto& corr = scene.corr;
    const auto n = corr.size();

    // coords row-major: x1 y1 x2 y2 per correspondence
    io::write_u64(os, static_cast<std::uint64_t>(n * 4));
    for (Eigen::Index i = 0; i < n; ++i)
      for (int c = 0; c < 4; ++c) io::write_f64(os, corr.coords(i, c));

    if (corr.labels) {
      io::write_u64(os, static_cast<std::uint64_t>(n));
      for (Eigen::Index i = 0; i < n; ++i) io::write_f64(os, static_cast<double>((*corr.labels)(i)));
    } else {
      io::write_u64(os, 0);
    }

    if (corr.pose) {
      Eigen::Matrix<double, 3, 3, Eigen::RowMajor> r = corr.pose->rotation;
      write_array(os, r.data(), 9);
      write_array(os, corr.pose->translation.data(), 3);
    } else {
      io::write_u64(os, 0);
      io::write_u64(os, 0);
    }

    if (corr.gt_essential) {
      Eigen::Matrix<double, 3, 3, Eigen::RowMajor> e = corr.gt_essential->m;
      write_array(os, e.data(), 9);
    } else {
      io::write_u64(os, 0);
    }

    if (scene.injected_outlier_mask.size() > 0) {
      io::write_u64(os, static_cast<std::uint64_t>(n));
      for (Eigen::Index i = 0; i < n; ++i)
        io::write_f64(os, static_cast<double>(scene.injected_outlier_mask(i)));
    } else {
      io::write_u64(os, 0);
    }
  }
  if (!os) throw IoError("write failed for " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);

  std::uint64_t header_len = 0;
  try {
    header_len = io::read_u64(is);
  } catch (const IoError&) {
    throw ParseError("missing llha-v1 header in " + path);
  }
  if (header_len > (1ull << 20)) throw ParseError("implausible header length in " + path);
  std::string header_str(header_len, '\0');
  is.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw ParseError("truncated llha-v1 header in " + path);

  nlohmann::json header = nlohmann::json::parse(header_str, nullptr, false);
  if (header.is_discarded() || !header.is_object())
    throw ParseError("llha-v1 header is not valid JSON in " + path);
  if (header.value("format", "") != "llha-v1")
    throw ParseError("unsupported dataset format '" + header.value("format", "") + "'");

  Dataset ds;
  std::uint64_t n_scenes = 0;
  try {
    n_scenes = header.at("n_scenes").get<std::uint64_t>();
    ds.header_config = config_from_json(header.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed llha-v1 header: ") + e.what());
  }

  ds.scenes.reserve(n_scenes);
  for (std::uint64_t k = 0; k < n_scenes; ++k) {
    std::vector<double> coords, labels, rotation, translation, essential, mask;
    try {
      coords = read_array(is);
      labels = read_array(is);
      rotation = read_array(is);
      translation = read_array(is);
      essential = read_array(is);
      mask = read_array(is);
    } catch (const IoError&) {
      throw ParseError("truncated scene record", static_cast<std::int64_t>(k));
    }

    if (coords.size() % 4 != 0 || coords.empty())
      throw ParseError("coords array length must be a positive multiple of 4",
                       static_cast<std::int64_t>(k));
    const auto n = static_cast<Eigen::Index>(coords.size() / 4);

    ScenePair scene;
    scene.config = ds.header_config;
    scene.corr.coords.resize(n, 4);
    for (Eigen::Index i = 0; i < n; ++i)
      for (int c = 0; c < 4; ++c) scene.corr.coords(i, c) = coords[static_cast<std::size_t>(i * 4 + c)];

    if (!labels.empty()) {
      if (labels.size() != static_cast<std::size_t>(n))
        throw ParseError("labels array length disagrees with coords", static_cast<std::int64_t>(k));
      Eigen::VectorXi l(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double v = labels[static_cast<std::size_t>(i)];
        if (v != 0.0 && v != 1.0)
          throw ParseError("labels must be 0 or 1", static_cast<std::int64_t>(k));
        l(i) = static_cast<int>(v);
      }
      scene.corr.labels = std::move(l);
    }

    if ((rotation.size() == 9) != (translation.size() == 3)) {
      throw ParseError("rotation and translation must be present together",
                       static_cast<std::int64_t>(k));
    }
    if (rotation.size() == 9) {
      CameraPose pose;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) pose.rotation(r, c) = rotation[static_cast<std::size_t>(r * 3 + c)];
      pose.translation << translation[0], translation[1], translation[2];
      pose.validate();
      scene.corr.pose = pose;
    } else if (!rotation.empty() || !translation.empty()) {
      throw ParseError("rotation/translation arrays must have 9/3 or 0 elements",
                       static_cast<std::int64_t>(k));
    }

    if (essential.size() == 9) {
      EssentialMatrix e;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) e.m(r, c) = essential[static_cast<std::size_t>(r * 3 + c)];
      e.projected = true;  // generated matrices are [t]x R, already on the manifold
      e.validate();
      scene.corr.gt_essential = e;
    } else if (!essential.empty()) {
      throw ParseError("essential array must have 9 or 0 elements", static_cast<std::int64_t>(k));
    }

    if (!mask.empty()) {
      if (mask.size() != static_cast<std::size_t>(n))
        throw ParseError("mask array length disagrees with coords", static_cast<std::int64_t>(k));
      scene.injected_outlier_mask.resize(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double v = mask[static_cast<std::size_t>(i)];
        if (v != 0.0 && v != 1.0)
          throw ParseError("mask entries must be 0 or 1", static_cast<std::int64_t>(k));
        scene.injected_outlier_mask(i) = static_cast<int>(v);
      }
    }

    scene.corr.validate(true);
    ds.scenes.push_back(std::move(scene));
  }
  return ds;
}

namespace {

Dataset import_csv_corr(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);

  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty csv-corr file " + path);

  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(s);
    while (std::getline(ss, cell, ',')) {
      const auto b = cell.find_first_not_of(" \t\r");
      const auto e = cell.find_last_not_of(" \t\r");
      out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    return out;
  };

  const std::vector<std::string> names = split(line);
  int col[5] = {-1, -1, -1, -1, -1};  // x1 y1 x2 y2 label
  static const char* wanted[5] = {"x1", "y1", "x2", "y2", "label"};
  for (std::size_t c = 0; c < names.size(); ++c)
    for (int w = 0; w < 5; ++w)
      if (names[c] == wanted[w]) col[w] = static_cast<int>(c);
  for (int w = 0; w < 4; ++w)
    if (col[w] < 0)
      throw ParseError(std::string("csv-corr header missing required column '") + wanted[w] + "'");
  const bool has_labels = col[4] >= 0;

  std::vector<std::array<double, 5>> rows;
  std::int64_t record = 0;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      ++record;
      continue;  // blank line
    }
    const std::vector<std::string> cells = split(line);
    std::array<double, 5> row{0, 0, 0, 0, 1};
    for (int w = 0; w < (has_labels ? 5 : 4); ++w) {
      if (static_cast<std::size_t>(col[w]) >= cells.size())
        throw ParseError("csv-corr row has too few columns", record);
      try {
        std::size_t pos = 0;
        row[static_cast<std::size_t>(w)] = std::stod(cells[static_cast<std::size_t>(col[w])], &pos);
        if (pos != cells[static_cast<std::size_t>(col[w])].size()) throw std::invalid_argument("");
      } catch (const std::exception&) {
        throw ParseError(std::string("csv-corr column '") + wanted[w] + "' is not a number", record);
      }
    }
    rows.push_back(row);
    ++record;
  }

  ScenePair scene;
  const auto n = static_cast<Eigen::Index>(rows.size());
  scene.corr.coords.resize(n, 4);
  Eigen::VectorXi labels(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    scene.corr.coords.row(i) << r[0], r[1], r[2], r[3];
    if (has_labels) {
      if (r[4] != 0.0 && r[4] != 1.0) throw ParseError("label must be 0 or 1", i);
      labels(i) = static_cast<int>(r[4]);
    }
  }
  if (has_labels) scene.corr.labels = std::move(labels);
  scene.corr.validate(true);

  Dataset ds;
  ds.scenes.push_back(std::move(scene));
  return ds;
}

}  // namespace

Dataset import_external(const std::string& path, const std::string& format_id) {
  if (format_id == "llha-v1") return read_dataset(path);
  if (format_id == "csv-corr") return import_csv_corr(path);
  throw ValidationError("unknown dataset format '" + format_id + "'");
}

}  // namespace llha
