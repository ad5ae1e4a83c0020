#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "llha/scene.hpp"
#include "test_utils.hpp"

using namespace llha;

namespace {

// Unique-ish temp path per test; the build tree is the working directory.
std::string temp_path(const std::string& tag) {
  return "scene_test_" + tag + ".bin";
}

double median_inlier_residual(const ScenePair& scene) {
  const Vector r = symmetric_epipolar_distance(*scene.corr.gt_essential, scene.corr);
  std::vector<double> vals;
  for (Eigen::Index i = 0; i < scene.corr.size(); ++i)
    if (scene.injected_outlier_mask(i) == 0) vals.push_back(r(i));
  REQUIRE(!vals.empty());
  std::sort(vals.begin(), vals.end());
  return vals[vals.size() / 2];
}

bool scenes_identical(const ScenePair& a, const ScenePair& b) {
  if (a.corr.coords.rows() != b.corr.coords.rows()) return false;
  if ((a.corr.coords.array() != b.corr.coords.array()).any()) return false;
  if ((a.corr.labels->array() != b.corr.labels->array()).any()) return false;
  if ((a.injected_outlier_mask.array() != b.injected_outlier_mask.array()).any()) return false;
  if ((a.corr.pose->rotation.array() != b.corr.pose->rotation.array()).any()) return false;
  if ((a.corr.pose->translation.array() != b.corr.pose->translation.array()).any()) return false;
  if ((a.corr.gt_essential->m.array() != b.corr.gt_essential->m.array()).any()) return false;
  return true;
}

}  // namespace

TEST_SUITE("scene") {

TEST_CASE("config validation rejects out-of-range parameters") {
  SceneConfig c;
  CHECK_NOTHROW(c.validate());

  SceneConfig bad = c;
  bad.n_correspondences = 15;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad.n_correspondences = 16;
  CHECK_NOTHROW(bad.validate());

  bad = c;
  bad.outlier_ratio = 1.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad.outlier_ratio = -0.1;
  CHECK_THROWS_AS(bad.validate(), ValidationError);

  bad = c;
  bad.pixel_noise_sigma = -1e-3;
  CHECK_THROWS_AS(bad.validate(), ValidationError);

  bad = c;
  bad.max_rotation_deg = 0.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad.max_rotation_deg = 90.5;
  CHECK_THROWS_AS(bad.validate(), ValidationError);

  bad = c;
  bad.depth_min = 0.0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = c;
  bad.depth_max = bad.depth_min;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("same seed gives a bit-identical scene, different seed does not") {
  SceneConfig c;
  c.n_correspondences = 128;
  c.outlier_ratio = 0.4;
  c.pixel_noise_sigma = 1e-3;
  c.seed = 1234;

  const ScenePair a = generate_scene(c);
  const ScenePair b = generate_scene(c);
  CHECK(scenes_identical(a, b));

  SceneConfig c2 = c;
  c2.seed = 1235;
  const ScenePair d = generate_scene(c2);
  CHECK_FALSE((a.corr.coords.array() == d.corr.coords.array()).all());
}

TEST_CASE("noiseless scenes: every non-injected correspondence is an exact inlier") {
  for (std::uint64_t seed : {7ull, 8ull, 9ull}) {
    SceneConfig c;
    c.n_correspondences = 200;
    c.outlier_ratio = 0.3;
    c.pixel_noise_sigma = 0.0;
    c.seed = seed;
    const ScenePair s = generate_scene(c);

    const Vector r = symmetric_epipolar_distance(*s.corr.gt_essential, s.corr);
    for (Eigen::Index i = 0; i < s.corr.size(); ++i) {
      if (s.injected_outlier_mask(i) == 0) {
        CHECK(r(i) < 1e-12);
        CHECK((*s.corr.labels)(i) == 1);
      }
    }
  }
}

TEST_CASE("outlier count is exactly floor(ratio * N) and labels are recomputed") {
  SceneConfig c;
  c.n_correspondences = 100;
  c.outlier_ratio = 0.37;
  c.seed = 5;
  const ScenePair s = generate_scene(c);
  CHECK(s.injected_outlier_mask.sum() == 37);

  // Labels must be exactly what label_inliers reports for the stored data;
  // they are allowed to disagree with the injection mask.
  const Eigen::VectorXi relabeled = label_inliers(s.corr, *s.corr.gt_essential);
  CHECK((relabeled.array() == s.corr.labels->array()).all());
}

TEST_CASE("90 percent outliers on N=1000 leaves 880-920 zero labels across seeds") {
  // Injection replaces exactly 900 second points; a handful of them land
  // near an epipolar line by accident and relabel as inliers.
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    SceneConfig c;
    c.n_correspondences = 1000;
    c.outlier_ratio = 0.9;
    c.seed = seed;
    const ScenePair s = generate_scene(c);
    const int zeros = static_cast<int>(s.corr.size()) - s.corr.labels->sum();
    CHECK(zeros >= 880);
    CHECK(zeros <= 920);
    CHECK(s.injected_outlier_mask.sum() == 900);
  }
}

TEST_CASE("median inlier residual grows monotonically with noise") {
  for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
    double prev = -1.0;
    for (double sigma : {0.0, 1e-3, 3e-3}) {
      SceneConfig c;
      c.n_correspondences = 500;
      c.outlier_ratio = 0.2;
      c.pixel_noise_sigma = sigma;
      c.seed = seed;
      const double med = median_inlier_residual(generate_scene(c));
      CHECK(med > prev);
      prev = med;
    }
  }
}

TEST_CASE("generated ground truth satisfies the essential-matrix invariants") {
  SceneConfig c;
  c.seed = 99;
  const ScenePair s = generate_scene(c);
  CHECK_NOTHROW(s.corr.gt_essential->validate());
  CHECK_NOTHROW(s.corr.pose->validate());
  CHECK(s.corr.gt_essential->m.norm() == doctest::Approx(1.0).epsilon(1e-12));

  // E must equal [t]x R up to the stored normalization.
  const Eigen::Matrix3d expected = llha::testing::oracle_essential(*s.corr.pose);
  CHECK((s.corr.gt_essential->m - expected).norm() < 1e-12);
}

TEST_CASE("an unobservable pose raises a generation error within the rejection budget") {
  // Backward-dominant translations with a thin, close depth range put every
  // scene point behind the second camera. Sweep seeds until one such pose is
  // drawn; each failing draw must throw rather than loop forever.
  bool saw_error = false;
  for (std::uint64_t seed = 0; seed < 300 && !saw_error; ++seed) {
    SceneConfig c;
    c.n_correspondences = 16;
    c.depth_min = 0.05;
    c.depth_max = 0.2;
    c.max_rotation_deg = 1.0;
    c.seed = seed;
    try {
      (void)generate_scene(c);
    } catch (const DegenerateError&) {
      saw_error = true;
    }
  }
  CHECK(saw_error);
}

TEST_CASE("dataset generation is per-scene seeded and order independent") {
  SceneConfig tpl;
  tpl.n_correspondences = 64;
  tpl.outlier_ratio = 0.25;
  tpl.pixel_noise_sigma = 1e-3;

  const Dataset ds = generate_dataset(6, tpl, 42);
  REQUIRE(ds.size() == 6);

  // Scene k is reproducible in isolation from the split seed.
  SceneConfig c3 = tpl;
  c3.seed = split_seed(42, 3);
  CHECK(scenes_identical(ds.scenes[3], generate_scene(c3)));

  // Distinct scenes differ.
  CHECK_FALSE((ds.scenes[0].corr.coords.array() == ds.scenes[1].corr.coords.array()).all());

  CHECK_THROWS_AS(generate_dataset(0, tpl, 42), ValidationError);
}

TEST_CASE("write/read round trip is bit-exact over 100 scenes") {
  SceneConfig tpl;
  tpl.n_correspondences = 32;
  tpl.outlier_ratio = 0.5;
  tpl.pixel_noise_sigma = 2e-3;
  const Dataset ds = generate_dataset(100, tpl, 7);

  const std::string path = temp_path("roundtrip");
  write_dataset(path, ds);
  const Dataset back = read_dataset(path);
  std::remove(path.c_str());

  REQUIRE(back.size() == ds.size());
  for (std::size_t k = 0; k < ds.size(); ++k) CHECK(scenes_identical(ds.scenes[k], back.scenes[k]));
  CHECK(back.header_config.seed == 7);
  CHECK(back.header_config.n_correspondences == 32);
}

TEST_CASE("import_external llha-v1 equals read_dataset") {
  SceneConfig tpl;
  tpl.n_correspondences = 16;
  const Dataset ds = generate_dataset(2, tpl, 3);
  const std::string path = temp_path("import");
  write_dataset(path, ds);
  const Dataset back = import_external(path, "llha-v1");
  std::remove(path.c_str());
  REQUIRE(back.size() == 2);
  CHECK(scenes_identical(back.scenes[1], ds.scenes[1]));

  CHECK_THROWS_AS(import_external("nope.bin", "weird-fmt"), ValidationError);
}

TEST_CASE("truncated container reports the offending record index") {
  SceneConfig tpl;
  tpl.n_correspondences = 16;
  const Dataset ds = generate_dataset(3, tpl, 9);
  const std::string path = temp_path("trunc");
  write_dataset(path, ds);

  // Chop the file inside the last scene record.
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 40));
  out.close();

  bool threw = false;
  try {
    (void)read_dataset(path);
  } catch (const ParseError& e) {
    threw = true;
    CHECK(e.record == 2);
  }
  CHECK(threw);
  std::remove(path.c_str());
}

TEST_CASE("scene record with 7 correspondences fails solver-minimum validation") {
  // Hand-build a file whose single scene holds 7 rows.
  const std::string path = temp_path("n7");
  {
    Dataset ds = generate_dataset(1, SceneConfig{}, 1);
    ds.scenes[0].corr.coords = ds.scenes[0].corr.coords.topRows(7).eval();
    Eigen::VectorXi l = ds.scenes[0].corr.labels->head(7).eval();
    ds.scenes[0].corr.labels = l;
    Eigen::VectorXi m = ds.scenes[0].injected_outlier_mask.head(7).eval();
    ds.scenes[0].injected_outlier_mask = m;
    write_dataset(path, ds);
  }
  CHECK_THROWS_AS((void)read_dataset(path), ValidationError);
  std::remove(path.c_str());
}

TEST_CASE("csv-corr import honors header order, labels optional") {
  const std::string path = temp_path("csv");
  {
    std::ofstream os(path);
    os << "label, x2, y2, x1, y1\n";
    for (int i = 0; i < 9; ++i)
      os << (i % 2) << ", " << 0.1 * i << ", " << -0.2 * i << ", " << 0.01 * i << ", "
         << 0.02 * i << "\n";
  }
  const Dataset ds = import_external(path, "csv-corr");
  std::remove(path.c_str());
  REQUIRE(ds.size() == 1);
  const auto& corr = ds.scenes[0].corr;
  REQUIRE(corr.size() == 9);
  CHECK(corr.coords(3, 0) == doctest::Approx(0.03));  // x1 column
  CHECK(corr.coords(3, 2) == doctest::Approx(0.3));   // x2 column
  REQUIRE(corr.labels.has_value());
  CHECK((*corr.labels)(4) == 0);
  CHECK((*corr.labels)(5) == 1);
  CHECK(ds.scenes[0].injected_outlier_mask.size() == 0);
  CHECK_FALSE(corr.pose.has_value());

  // Without a label column the set loads unlabeled.
  {
    std::ofstream os(path);
    os << "x1,y1,x2,y2\n";
    for (int i = 0; i < 8; ++i) os << "0.1,0.2,0.3,0.4\n";
  }
  const Dataset unlabeled = import_external(path, "csv-corr");
  std::remove(path.c_str());
  CHECK_FALSE(unlabeled.scenes[0].corr.labels.has_value());
}

TEST_CASE("csv-corr rejects malformed rows with the record index") {
  const std::string path = temp_path("csvbad");
  {
    std::ofstream os(path);
    os << "x1,y1,x2,y2\n";
    for (int i = 0; i < 8; ++i) os << "0.1,0.2,0.3,0.4\n";
    os << "0.1,oops,0.3,0.4\n";
  }
  bool threw = false;
  try {
    (void)import_external(path, "csv-corr");
  } catch (const ParseError& e) {
    threw = true;
    CHECK(e.record == 8);
  }
  CHECK(threw);
  std::remove(path.c_str());

  {
    std::ofstream os(path);
    os << "x1,y1,x2\n0.1,0.2,0.3\n";
  }
  CHECK_THROWS_AS((void)import_external(path, "csv-corr"), ParseError);
  std::remove(path.c_str());

  // 7 rows: parses, then fails the solver-minimum validation.
  {
    std::ofstream os(path);
    os << "x1,y1,x2,y2\n";
    for (int i = 0; i < 7; ++i) os << "0.1,0.2,0.3,0.4\n";
  }
  CHECK_THROWS_AS((void)import_external(path, "csv-corr"), ValidationError);
  std::remove(path.c_str());
}

TEST_CASE("round trip preserves absent labels and mask as absent") {
  const std::string csv = temp_path("absent_csv");
  {
    std::ofstream os(csv);
    os << "x1,y1,x2,y2\n";
    for (int i = 0; i < 8; ++i) os << "0.1,0.2,0.3,0.4\n";
  }
  Dataset ds = import_external(csv, "csv-corr");
  std::remove(csv.c_str());

  const std::string bin = temp_path("absent_bin");
  write_dataset(bin, ds);
  const Dataset back = read_dataset(bin);
  std::remove(bin.c_str());
  CHECK_FALSE(back.scenes[0].corr.labels.has_value());
  CHECK_FALSE(back.scenes[0].corr.pose.has_value());
  CHECK_FALSE(back.scenes[0].corr.gt_essential.has_value());
  CHECK(back.scenes[0].injected_outlier_mask.size() == 0);
}

}  // TEST_SUITE
