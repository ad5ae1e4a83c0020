#include <doctest.h>

#include <functional>
#include <vector>

#include "llha/scene.hpp"
#include "llha/tape.hpp"
#include "test_utils.hpp"

using namespace llha;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

// Runs the graph builder once with backward to populate analytic grads, then
// finite-differences every parameter entry.
testing::GradCheck run_gradcheck(const std::vector<Tensor*>& params,
                                 const std::function<Var(Tape&)>& build, double step) {
  auto run = [&](bool with_backward) {
    for (Tensor* t : params) t->zero_grad();
    Tape tape;
    Var loss = build(tape);
    const double v = tape.value(loss)(0, 0);
    if (with_backward) tape.backward(loss);
    return v;
  };
  run(true);
  return testing::check_gradients([&] { return run(false); }, params, step);
}

}  // namespace

TEST_SUITE("tape") {

TEST_CASE("linear forward value and gradients") {
  Rng rng(1);
  Tensor x{random_matrix(5, 3, rng), {}};
  Tensor w{random_matrix(4, 3, rng), {}};
  Tensor b{random_matrix(1, 4, rng), {}};

  {
    Tape tape;
    Var out = tape.linear(tape.leaf(x), tape.leaf(w), tape.leaf(b));
    const Matrix expect = (x.value * w.value.transpose()).rowwise() + b.value.row(0);
    CHECK((tape.value(out) - expect).cwiseAbs().maxCoeff() < 1e-14);
  }

  auto gc = run_gradcheck({&x, &w, &b},
                          [&](Tape& t) {
                            Var out = t.linear(t.leaf(x), t.leaf(w), t.leaf(b));
                            return t.sum_all(t.mul(out, out));
                          },
                          1e-6);
  CHECK(gc.max_rel < 1e-6);
}

TEST_CASE("elementwise ops: add, mul, scale_by, relu, tanh, clamp_max") {
  Rng rng(2);
  Tensor a{random_matrix(4, 3, rng), {}};
  Tensor b{random_matrix(4, 3, rng), {}};
  Tensor s{Matrix::Constant(1, 1, 0.7), {}};

  auto gc = run_gradcheck({&a, &b, &s},
                          [&](Tape& t) {
                            Var av = t.leaf(a);
                            Var bv = t.leaf(b);
                            Var mixed = t.add(t.mul(av, bv), t.scale_by(av, t.leaf(s)));
                            Var nl = t.tanh_op(t.relu(mixed));
                            return t.sum_all(t.clamp_max(nl, 0.5));
                          },
                          1e-6);
  CHECK(gc.max_rel < 1e-5);

  Tape tape;
  Var c = tape.clamp_max(tape.constant(Matrix::Constant(2, 2, 3.0)), 1.5);
  CHECK(tape.value(c)(0, 0) == 1.5);
}

TEST_CASE("concat_cols and slice_rows round trip gradients") {
  Rng rng(3);
  Tensor a{random_matrix(6, 2, rng), {}};
  Tensor b{random_matrix(6, 3, rng), {}};

  auto gc = run_gradcheck({&a, &b},
                          [&](Tape& t) {
                            Var cat = t.concat_cols(t.leaf(a), t.leaf(b));
                            Var top = t.slice_rows(cat, 0, 2);
                            Var bottom = t.slice_rows(cat, 2, 4);
                            return t.add(t.sum_all(t.mul(top, top)), t.sum_all(bottom));
                          },
                          1e-6);
  CHECK(gc.max_rel < 1e-6);

  Tape tape;
  Var cat = tape.concat_cols(tape.constant(a.value), tape.constant(b.value));
  CHECK(tape.value(cat).cols() == 5);
  CHECK(tape.value(cat)(1, 3) == b.value(1, 1));
}

TEST_CASE("context_norm normalizes per instance and per channel") {
  Rng rng(4);
  Tensor x{random_matrix(8, 3, rng), {}};

  {
    Tape tape;
    Var y = tape.context_norm(tape.leaf(x), 4);
    const Matrix& yv = tape.value(y);
    for (int b = 0; b < 2; ++b) {
      auto block = yv.middleRows(4 * b, 4);
      for (int c = 0; c < 3; ++c) {
        CHECK(std::abs(block.col(c).mean()) < 1e-12);
        const double var = (block.col(c).array() - block.col(c).mean()).square().mean();
        CHECK(var == doctest::Approx(1.0).epsilon(1e-9));
      }
    }
  }

  // Constant input takes the variance-floor path and emits zeros.
  {
    Tape tape;
    Tensor cst{Matrix::Constant(5, 2, 3.2), {}};
    Var y = tape.context_norm(tape.leaf(cst), 5);
    CHECK(tape.value(y).cwiseAbs().maxCoeff() == 0.0);
  }

  // Single-row instances are an error unless explicitly allowed.
  {
    Tape tape;
    Tensor one{Matrix::Constant(1, 2, 1.0), {}};
    CHECK_THROWS_AS(tape.context_norm(tape.leaf(one), 1), ValidationError);
    Var y = tape.context_norm(tape.leaf(one), 1, true);
    CHECK(tape.value(y).cwiseAbs().maxCoeff() == 0.0);
  }

  const Matrix probe = random_matrix(8, 3, rng);
  auto gc = run_gradcheck({&x},
                          [&](Tape& t) {
                            Var y = t.context_norm(t.leaf(x), 4);
                            return t.sum_all(t.mul(y, t.constant(probe)));
                          },
                          1e-6);
  CHECK(gc.max_rel < 1e-5);
}

TEST_CASE("batch_norm: training stats, running update, eval path, gradients") {
  Rng rng(5);
  Tensor x{random_matrix(10, 4, rng), {}};
  ad::BatchNormState bn;
  bn.init(4);
  bn.gamma.value = random_matrix(1, 4, rng, 0.5).array() + 1.0;
  bn.beta.value = random_matrix(1, 4, rng, 0.2);

  {
    ad::BatchNormState fresh;
    fresh.init(4);
    Tape tape;
    Var y = tape.batch_norm(tape.leaf(x), fresh, true);
    const Matrix& yv = tape.value(y);
    for (int c = 0; c < 4; ++c) {
      CHECK(std::abs(yv.col(c).mean()) < 1e-12);
      CHECK((yv.col(c).array() - yv.col(c).mean()).square().mean() ==
            doctest::Approx(1.0).epsilon(1e-9));
    }
    // running = 0.9 * init + 0.1 * batch
    const double mu0 = x.value.col(0).mean();
    CHECK(fresh.running_mean(0, 0) == doctest::Approx(0.1 * mu0).epsilon(1e-12));
  }

  // The probe must weight elements unevenly: symmetric losses like sum(y^2)
  // are exactly constant in x under normalization, which makes FD pure noise.
  const Matrix probe = random_matrix(10, 4, rng);
  auto bn_probe = [&](bool training) {
    return run_gradcheck({&x, &bn.gamma, &bn.beta},
                         [&, training](Tape& t) {
                           Var y = t.batch_norm(t.leaf(x), bn, training);
                           return t.sum_all(t.mul(y, t.constant(probe)));
                         },
                         1e-6);
  };
  CHECK(bn_probe(true).max_rel < 1e-5);
  CHECK(bn_probe(false).max_rel < 1e-5);
}

TEST_CASE("reductions and broadcast: mean, max, repeat, softmax") {
  Rng rng(6);
  Tensor x{random_matrix(6, 3, rng), {}};

  {
    Tape tape;
    Var m = tape.mean_over_points(tape.leaf(x), 3);
    CHECK(tape.value(m).rows() == 2);
    CHECK(tape.value(m)(0, 1) == doctest::Approx(x.value.col(1).head(3).mean()));
    Var mx = tape.max_over_points(tape.leaf(x), 3);
    CHECK(tape.value(mx)(1, 2) == doctest::Approx(x.value.col(2).tail(3).maxCoeff()));
    Var r = tape.repeat_rows(tape.mean_over_points(tape.leaf(x), 3), 3);
    CHECK(tape.value(r).rows() == 6);
    Var sm = tape.softmax_rows(tape.leaf(x));
    CHECK(tape.value(sm).rowwise().sum().isApproxToConstant(1.0, 1e-12));
  }

  const Matrix probe_m = random_matrix(2, 3, rng);
  const Matrix probe_n = random_matrix(6, 3, rng);
  auto gc = run_gradcheck({&x},
                          [&](Tape& t) {
                            Var xv = t.leaf(x);
                            Var a = t.mul(t.mean_over_points(xv, 3), t.constant(probe_m));
                            Var b = t.mul(t.max_over_points(xv, 3), t.constant(probe_m));
                            Var c = t.mul(t.repeat_rows(t.mean_over_points(xv, 3), 3),
                                          t.constant(probe_n));
                            Var d = t.mul(t.softmax_rows(xv), t.constant(probe_n));
                            return t.add(t.add(t.sum_all(a), t.sum_all(b)),
                                         t.add(t.sum_all(c), t.sum_all(d)));
                          },
                          1e-6);
  CHECK(gc.max_rel < 1e-5);
}

TEST_CASE("cluster pooling, unpooling and cluster-axis mixing") {
  Rng rng(7);
  const Eigen::Index n = 5, m = 2, c = 3, batches = 2;
  Tensor assign{random_matrix(batches * n, m, rng), {}};
  Tensor feat{random_matrix(batches * n, c, rng), {}};
  Tensor mixw{random_matrix(m, m, rng), {}};
  Tensor mixb{random_matrix(m, 1, rng), {}};

  {
    Tape tape;
    Var pooled = tape.pool_clusters(tape.leaf(assign), tape.leaf(feat), n);
    CHECK(tape.value(pooled).rows() == batches * m);
    const Matrix expect0 =
        assign.value.topRows(n).transpose() * feat.value.topRows(n);
    CHECK((tape.value(pooled).topRows(m) - expect0).cwiseAbs().maxCoeff() < 1e-13);

    Var unpooled = tape.unpool_clusters(tape.leaf(assign), pooled, m);
    CHECK(tape.value(unpooled).rows() == batches * n);
    const Matrix expect_un0 = assign.value.topRows(n) * expect0;
    CHECK((tape.value(unpooled).topRows(n) - expect_un0).cwiseAbs().maxCoeff() < 1e-13);
  }

  const Matrix probe = random_matrix(batches * n, c, rng);
  auto gc = run_gradcheck(
      {&assign, &feat, &mixw, &mixb},
      [&](Tape& t) {
        Var a = t.leaf(assign);
        Var pooled = t.pool_clusters(a, t.leaf(feat), n);
        Var mixed = t.mix_clusters(pooled, t.leaf(mixw), t.leaf(mixb), m);
        Var un = t.unpool_clusters(a, mixed, m);
        return t.sum_all(t.mul(un, t.constant(probe)));
      },
      1e-6);
  CHECK(gc.max_rel < 1e-5);
}

TEST_CASE("bce_with_logits value and gradient") {
  // ln 2 at the maximum-entropy point, tiny when saturated correct.
  {
    Tape tape;
    Matrix z = Matrix::Zero(4, 1);
    Matrix y(4, 1);
    y << 1, 0, 1, 0;
    Var loss = tape.bce_with_logits(tape.constant(z), y, Matrix::Constant(4, 1, 0.25));
    CHECK(tape.value(loss)(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }

  Rng rng(8);
  Tensor z{random_matrix(6, 1, rng, 2.0), {}};
  Matrix labels(6, 1);
  for (int i = 0; i < 6; ++i) labels(i, 0) = (i % 2 == 0) ? 1.0 : 0.0;
  const Matrix coeff = Matrix::Constant(6, 1, 1.0 / 6.0);
  auto gc = run_gradcheck({&z},
                          [&](Tape& t) { return t.bce_with_logits(t.leaf(z), labels, coeff); },
                          1e-6);
  CHECK(gc.max_rel < 1e-6);
}

TEST_CASE("eight_point op matches the plain solver and passes the w gradient check") {
  Rng rng(9);
  const CameraPose pose = testing::random_pose(rng);
  CorrespondenceSet corr = testing::noiseless_correspondences(pose, 20, rng);
  // On noiseless data the solution is an exact null vector for any weights,
  // so the true w-gradient is identically zero and FD only measures rounding
  // noise. Perturb so the solve genuinely depends on the weights.
  for (Eigen::Index i = 0; i < corr.size(); ++i) {
    corr.coords(i, 2) += 0.01 * rng.normal();
    corr.coords(i, 3) += 0.01 * rng.normal();
  }
  const Matrix constraint = epipolar_constraint_matrix(corr);

  Tensor w{Matrix(20, 1), {}};
  for (int i = 0; i < 20; ++i) w.value(i, 0) = rng.uniform(0.5, 0.95);

  {
    Tape tape;
    Var e = tape.eight_point(tape.leaf(w), constraint, false);
    const EssentialMatrix direct = weighted_eight_point(corr, w.value.col(0));
    Matrix flat(1, 9);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) flat(0, r * 3 + c) = direct.m(r, c);
    CHECK((tape.value(e) - flat).cwiseAbs().maxCoeff() < 1e-12);
  }

  // Well-conditioned per the gradient contract.
  const auto sys = solve_weighted_eight_point_system(constraint, w.value.col(0));
  REQUIRE(sys.eigen_gap > 1e-3);

  const Matrix probe = random_matrix(1, 9, rng);
  auto gc = run_gradcheck({&w},
                          [&](Tape& t) {
                            Var e = t.eight_point(t.leaf(w), constraint, false);
                            return t.weighted_sum(e, probe);
                          },
                          1e-5);
  CHECK(gc.max_rel < 1e-3);
}

TEST_CASE("eight_point training fallbacks: weight floor and degenerate gap") {
  Rng rng(10);
  const CameraPose pose = testing::random_pose(rng);
  CorrespondenceSet corr = testing::noiseless_correspondences(pose, 12, rng);
  const Matrix constraint = epipolar_constraint_matrix(corr);

  // Fewer than 8 usable weights: plain op refuses, training op falls back
  // with zero gradient and a counter bump.
  Tensor w{Matrix::Zero(12, 1), {}};
  w.value.topRows(5).setConstant(0.9);
  {
    Tape tape;
    CHECK_THROWS_AS(tape.eight_point(tape.leaf(w), constraint, false), ValidationError);
  }
  {
    w.zero_grad();
    Tape tape;
    Var e = tape.eight_point(tape.leaf(w), constraint, true);
    CHECK(tape.counters.weight_floor_fallbacks == 1);
    CHECK(tape.value(e).allFinite());
    Var loss = tape.weighted_sum(e, Matrix::Constant(1, 9, 1.0));
    tape.backward(loss);
    CHECK(w.grad.cwiseAbs().maxCoeff() == 0.0);
  }

  // Rank-deficient system (one repeated row): degenerate in the plain op,
  // stop-gradient in training mode.
  Matrix degenerate = constraint;
  for (Eigen::Index i = 0; i < degenerate.rows(); ++i) degenerate.row(i) = constraint.row(0);
  Tensor wd{Matrix::Constant(12, 1, 0.9), {}};
  {
    Tape tape;
    CHECK_THROWS_AS(tape.eight_point(tape.leaf(wd), degenerate, false), DegenerateError);
  }
  {
    wd.zero_grad();
    Tape tape;
    Var e = tape.eight_point(tape.leaf(wd), degenerate, true);
    CHECK(tape.counters.stop_grad_fallbacks == 1);
    Var loss = tape.weighted_sum(e, Matrix::Constant(1, 9, 1.0));
    tape.backward(loss);
    CHECK(wd.grad.cwiseAbs().maxCoeff() == 0.0);
    CHECK(tape.value(e).allFinite());
  }
}

TEST_CASE("epipolar_residuals matches the geometry forward and is differentiable in E") {
  Rng rng(11);
  const CameraPose pose = testing::random_pose(rng);
  CorrespondenceSet corr = testing::noiseless_correspondences(pose, 10, rng);
  // Perturb so residuals are nonzero and generic.
  Matrix coords = corr.coords;
  for (Eigen::Index i = 0; i < coords.rows(); ++i) coords(i, 2) += 0.01 * rng.normal();

  const EssentialMatrix gt = essential_from_pose(pose);
  Tensor e{Matrix(1, 9), {}};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) e.value(0, r * 3 + c) = gt.m(r, c);

  {
    Tape tape;
    Var res = tape.epipolar_residuals(tape.leaf(e), coords);
    CorrespondenceSet perturbed;
    perturbed.coords = coords;
    const Vector expect = symmetric_epipolar_distance(gt, perturbed);
    CHECK((tape.value(res).col(0) - expect).cwiseAbs().maxCoeff() < 1e-15);
  }

  const Matrix probe = random_matrix(10, 1, rng);
  auto gc = run_gradcheck({&e},
                          [&](Tape& t) {
                            Var res = t.epipolar_residuals(t.leaf(e), coords);
                            return t.weighted_sum(t.clamp_max(res, 0.25), probe);
                          },
                          1e-7);
  CHECK(gc.max_rel < 1e-5);
}

TEST_CASE("full weight-to-loss chain gradient: logits through solver to capped residual mean") {
  Rng rng(12);
  const CameraPose pose = testing::random_pose(rng);
  CorrespondenceSet corr = testing::noiseless_correspondences(pose, 16, rng);
  for (Eigen::Index i = 0; i < corr.size(); ++i) {
    corr.coords(i, 2) += 0.01 * rng.normal();
    corr.coords(i, 3) += 0.01 * rng.normal();
  }
  const Matrix constraint = epipolar_constraint_matrix(corr);

  Tensor logits{random_matrix(16, 1, rng), {}};
  logits.value.array() += 1.0;  // keep most weights usable and off the relu kink

  auto build = [&](Tape& t) {
    Var z = t.leaf(logits);
    Var wv = t.clamp_max(t.tanh_op(t.clamp_max(t.relu(z), 1e4)), 1.0 - 1e-12);
    Var e = t.eight_point(wv, constraint, false);
    Var res = t.clamp_max(t.epipolar_residuals(e, corr.coords), 0.25);
    Var ess = t.weighted_sum(res, Matrix::Constant(16, 1, 1.0 / 16.0));
    Matrix labels = Matrix::Constant(16, 1, 1.0);
    Var bce = t.bce_with_logits(z, labels, Matrix::Constant(16, 1, 1.0 / 16.0));
    return t.add(bce, t.scale_const(ess, 0.1));
  };
  auto gc = run_gradcheck({&logits}, build, 1e-5);
  CHECK(gc.max_rel < 1e-3);
}

TEST_CASE("backward frees activations unless retained") {
  Rng rng(13);
  Tensor x{random_matrix(4, 4, rng), {}};
  Tape tape;
  Var a = tape.relu(tape.leaf(x));
  Var b = tape.tanh_op(a);
  tape.retain(b);
  Var loss = tape.sum_all(b);
  tape.backward(loss);
  CHECK(tape.value(a).size() == 0);
  CHECK(tape.value(b).size() == 16);
  CHECK(x.grad.cwiseAbs().sum() > 0.0);
}

}  // TEST_SUITE
