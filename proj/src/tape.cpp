#include "llha/tape.hpp"

#include <cmath>
#include <utility>

namespace llha::ad {
namespace {

// Stable sigmoid for the BCE backward.
double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Eigen::Index instances(Eigen::Index rows, Eigen::Index n, const char* op) {
  if (n <= 0 || rows % n != 0)
    throw ConfigError(std::string(op) + ": rows " + std::to_string(rows) +
                      " not divisible by per-instance count " + std::to_string(n));
  return rows / n;
}

}  // namespace

void BatchNormState::init(Eigen::Index channels) {
  gamma.value = Matrix::Ones(1, channels);
  beta.value = Matrix::Zero(1, channels);
  gamma.zero_grad();
  beta.zero_grad();
  running_mean = Matrix::Zero(1, channels);
  running_var = Matrix::Ones(1, channels);
}

int Tape::push_(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

const Matrix& Tape::val_(int i) const {
  const Node& n = nodes_[static_cast<std::size_t>(i)];
  return n.external ? *n.external : n.value;
}

const Matrix& Tape::value(Var v) const { return val_(v.id); }

void Tape::retain(Var v) { nodes_[static_cast<std::size_t>(v.id)].retained = true; }

Matrix& Tape::grad_(int i) {
  Node& n = nodes_[static_cast<std::size_t>(i)];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(val_(i).rows(), val_(i).cols());
  return n.grad;
}

void Tape::add_grad_(int i, const Matrix& g) {
  if (!requires_(i)) return;
  grad_(i) += g;
}

Var Tape::leaf(Tensor& t) {
  Node n;
  n.external = &t.value;
  n.param = &t;
  n.requires_grad = true;
  n.backprop = [](Tape& tape, int self) {
    Node& me = tape.nodes_[static_cast<std::size_t>(self)];
    if (me.param->grad.size() != me.param->value.size()) me.param->zero_grad();
    me.param->grad += me.grad;
  };
  return {push_(std::move(n))};
}

Var Tape::constant(Matrix v) {
  Node n;
  n.value = std::move(v);
  n.requires_grad = false;
  return {push_(std::move(n))};
}

Var Tape::linear(Var x, Var w, Var b) {
  const Matrix& xv = val_(x.id);
  const Matrix& wv = val_(w.id);
  const Matrix& bv = val_(b.id);
  if (xv.cols() != wv.cols() || bv.rows() != 1 || bv.cols() != wv.rows())
    throw ConfigError("linear: shape mismatch");
  Node n;
  n.value = (xv * wv.transpose()).rowwise() + bv.row(0);
  n.requires_grad = requires_(x.id) || requires_(w.id) || requires_(b.id);
  if (n.requires_grad) {
    const int xi = x.id, wi = w.id, bi = b.id;
    n.backprop = [xi, wi, bi](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      if (t.requires_(xi)) t.add_grad_(xi, g * t.val_(wi));
      if (t.requires_(wi)) t.add_grad_(wi, g.transpose() * t.val_(xi));
      if (t.requires_(bi)) t.add_grad_(bi, g.colwise().sum());
    };
  }
  return {push_(std::move(n))};
}

Var Tape::add(Var a, Var b) {
  const Matrix& av = val_(a.id);
  const Matrix& bv = val_(b.id);
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) throw ConfigError("add: shape mismatch");
  Node n;
  n.value = av + bv;
  n.requires_grad = requires_(a.id) || requires_(b.id);
  if (n.requires_grad) {
    const int ai = a.id, bi = b.id;
    n.backprop = [ai, bi](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      t.add_grad_(ai, g);
      t.add_grad_(bi, g);
    };
  }
  return {push_(std::move(n))};
}

Var Tape::mul(Var a, Var b) {
  const Matrix& av = val_(a.id);
  const Matrix& bv = val_(b.id);
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) throw ConfigError("mul: shape mismatch");
  Node n;
  n.value = av.cwiseProduct(bv);
  n.requires_grad = requires_(a.id) || requires_(b.id);
  if (n.requires_grad) {
    const int ai = a.id, bi = b.id;
    n.backprop = [ai, bi](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      if (t.requires_(ai)) t.add_grad_(ai, g.cwiseProduct(t.val_(bi)));
      if (t.requires_(bi)) t.add_grad_(bi, g.cwiseProduct(t.val_(ai)));
    };
  }
  return {push_(std::move(n))};
}

Var Tape::scale_by(Var x, Var s) {
  const Matrix& sv = val_(s.id);
  if (sv.size() != 1) throw ConfigError("scale_by: scale must be 1x1");
  Node n;
  n.value = sv(0, 0) * val_(x.id);
  n.requires_grad = requires_(x.id) || requires_(s.id);
  if (n.requires_grad) {
    const int xi = x.id, si = s.id;
    n.backprop = [xi, si](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      if (t.requires_(xi)) t.add_grad_(xi, t.val_(si)(0, 0) * g);
      if (t.requires_(si)) {
        Matrix ds(1, 1);
        ds(0, 0) = g.cwiseProduct(t.val_(xi)).sum();
        t.add_grad_(si, ds);
      }
    };
  }
  return {push_(std::move(n))};
}

Var Tape::relu(Var x) {
  Node n;
  n.value = val_(x.id).cwiseMax(0.0);
  n.requires_grad = requires_(x.id);
  if (n.requires_grad) {
    const int xi = x.id;
    n.backprop = [xi](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      t.add_grad_(xi, ((t.val_(xi).array() > 0.0).cast<double>() * g.array()).matrix());
    };
  }
  return {push_(std::move(n))};
}

Var Tape::tanh_op(Var x) {
  Node n;
  n.value = val_(x.id).array().tanh();
  n.requires_grad = requires_(x.id);
  if (n.requires_grad) {
    const int xi = x.id;
    n.backprop = [xi](Tape& t, int self) {
      const Node& me = t.nodes_[static_cast<std::size_t>(self)];
      t.add_grad_(xi, (me.grad.array() * (1.0 - me.value.array().square())).matrix());
    };
  }
  return {push_(std::move(n))};
}

Var Tape::sigmoid_op(Var x) {
  const Matrix& xv = val_(x.id);
  Node n;
  n.value.resize(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r)
    for (Eigen::Index c = 0; c < xv.cols(); ++c) n.value(r, c) = sigmoid(xv(r, c));
  n.requires_grad = requires_(x.id);
  if (n.requires_grad) {
    const int xi = x.id;
    n.backprop = [xi](Tape& t, int self) {
      const Node& me = t.nodes_[static_cast<std::size_t>(self)];
      t.add_grad_(xi, (me.grad.array() * me.value.array() * (1.0 - me.value.array())).matrix());
    };
  }
  return {push_(std::move(n))};
}

Var Tape::clamp_max(Var x, double cap) {
  Node n;
  n.value = val_(x.id).cwiseMin(cap);
  n.requires_grad = requires_(x.id);
  if (n.requires_grad) {
    const int xi = x.id;
    n.backprop = [xi, cap](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      t.add_grad_(xi, ((t.val_(xi).array() < cap).cast<double>() * g.array()).matrix());
    };
  }
  return {push_(std::move(n))};
}

Var Tape::concat_cols(Var a, Var b) {
  const Matrix& av = val_(a.id);
  const Matrix& bv = val_(b.id);
  if (av.rows() != bv.rows()) throw ConfigError("concat_cols: row mismatch");
  Node n;
  n.value.resize(av.rows(), av.cols() + bv.cols());
  n.value << av, bv;
  n.requires_grad = requires_(a.id) || requires_(b.id);
  if (n.requires_grad) {
    const int ai = a.id, bi = b.id;
    const Eigen::Index ca = av.cols(), cb = bv.cols();
    n.backprop = [ai, bi, ca, cb](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      t.add_grad_(ai, g.leftCols(ca));
      t.add_grad_(bi, g.rightCols(cb));
    };
  }
  return {push_(std::move(n))};
}

Var Tape::slice_rows(Var x, Eigen::Index r0, Eigen::Index nrows) {
  const Matrix& xv = val_(x.id);
  if (r0 < 0 || nrows <= 0 || r0 + nrows > xv.rows()) throw ConfigError("slice_rows: out of range");
  Node n;
  n.value = xv.middleRows(r0, nrows);
  n.requires_grad = requires_(x.id);
  if (n.requires_grad) {
    const int xi = x.id;
    const Eigen::Index rows = xv.rows();
    n.backprop = [xi, r0, nrows, rows](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      Matrix full = Matrix::Zero(rows, g.cols());
      full.middleRows(r0, nrows) = g;
      t.add_grad_(xi, full);
    };
  }
  return {push_(std::move(n))};
}

Var Tape::context_norm(Var x, Eigen::Index n_per, bool allow_single, double floor) {
  const Matrix& xv = val_(x.id);
  const Eigen::Index b_count = instances(xv.rows(), n_per, "context_norm");
  if (n_per == 1 && !allow_single)
    throw ValidationError("context_norm: single-point instance has undefined variance");

  Matrix denom(b_count, xv.cols());
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> clamped(b_count, xv.cols());
  Node n;
  n.value.resize(xv.rows(), xv.cols());
  for (Eigen::Index b = 0; b < b_count; ++b) {
    auto block = xv.middleRows(b * n_per, n_per);
    const Eigen::RowVectorXd mu = block.colwise().mean();
    const Matrix centered = block.rowwise() - mu;
    const Eigen::RowVectorXd var = centered.array().square().colwise().mean();
    for (Eigen::Index c = 0; c < xv.cols(); ++c) {
      clamped(b, c) = var(c) < floor;
      denom(b, c) = std::sqrt(clamped(b, c) ? floor : var(c));
    }
    n.value.middleRows(b * n_per, n_per) =
        (centered.array().rowwise() / denom.row(b).array()).matrix();
  }

  n.requires_grad = requires_(x.id);
  if (n.requires_grad) {
    const int xi = x.id;
    n.backprop = [xi, n_per, b_count, denom = std::move(denom),
                  clamped = std::move(clamped)](Tape& t, int self) {
      const Node& me = t.nodes_[static_cast<std::size_t>(self)];
      Matrix dx(me.value.rows(), me.value.cols());
      for (Eigen::Index b = 0; b < b_count; ++b) {
        auto g = me.grad.middleRows(b * n_per, n_per);
        auto y = me.value.middleRows(b * n_per, n_per);
        Eigen::RowVectorXd mg = g.colwise().mean();
        Eigen::RowVectorXd mgy = (g.array() * y.array()).colwise().mean();
        for (Eigen::Index c = 0; c < mgy.size(); ++c)
          if (clamped(b, c)) mgy(c) = 0.0;  // variance held at the floor: no y-term
        dx.middleRows(b * n_per, n_per) =
            (((g.rowwise() - mg) - (y.array().rowwise() * mgy.array()).matrix())
                 .array()
                 .rowwise() /
             denom.row(b).array())
                .matrix();
      }
      t.add_grad_(xi, dx);
    };
  }
  return {push_(std::move(n))};
}

Var Tape::batch_norm(Var x, BatchNormState& bn, bool training, double floor) {
  const Matrix& xv = val_(x.id);
  const Eigen::Index c_count = xv.cols();
  if (bn.gamma.value.cols() != c_count) throw ConfigError("batch_norm: channel mismatch");

  Node n;
  BatchNormState* state = &bn;
  if (training) {
    const Eigen::RowVectorXd mu = xv.colwise().mean();
    Matrix centered = xv.rowwise() - mu;
    const Eigen::RowVectorXd var = centered.array().square().colwise().mean();
    Eigen::RowVectorXd denom(c_count);
    Eigen::Matrix<bool, 1, Eigen::Dynamic> clamped(c_count);
    for (Eigen::Index c = 0; c < c_count; ++c) {
      clamped(c) = var(c) < floor;
      denom(c) = std::sqrt(clamped(c) ? floor : var(c));
    }
    Matrix xhat = (centered.array().rowwise() / denom.array()).matrix();
    n.value = (xhat.array().rowwise() * bn.gamma.value.row(0).array()).matrix().rowwise() +
              bn.beta.value.row(0);
    bn.running_mean = (1.0 - bn.momentum) * bn.running_mean + bn.momentum * mu;
    bn.running_var = (1.0 - bn.momentum) * bn.running_var + bn.momentum * var;

    n.requires_grad = true;  // affine parameters always learn
    const int xi = x.id;
    n.backprop = [xi, state, denom = std::move(denom), clamped = std::move(clamped),
                  xhat = std::move(xhat)](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      if (state->beta.grad.size() != state->beta.value.size()) state->beta.zero_grad();
      if (state->gamma.grad.size() != state->gamma.value.size()) state->gamma.zero_grad();
      state->beta.grad += g.colwise().sum();
      state->gamma.grad += (g.array() * xhat.array()).colwise().sum().matrix();
      if (!t.requires_(xi)) return;
      const Matrix dxhat = g.array().rowwise() * state->gamma.value.row(0).array();
      Eigen::RowVectorXd m1 = dxhat.colwise().mean();
      Eigen::RowVectorXd m2 = (dxhat.array() * xhat.array()).colwise().mean();
      for (Eigen::Index c = 0; c < m2.size(); ++c)
        if (clamped(c)) m2(c) = 0.0;
      const Matrix dx =
          (((dxhat.rowwise() - m1) - (xhat.array().rowwise() * m2.array()).matrix())
               .array()
               .rowwise() /
           denom.array())
              .matrix();
      t.add_grad_(xi, dx);
    };
  } else {
    Eigen::RowVectorXd denom(c_count);
    for (Eigen::Index c = 0; c < c_count; ++c)
      denom(c) = std::sqrt(std::max(bn.running_var(0, c), floor));
    Matrix xhat =
        ((xv.rowwise() - bn.running_mean.row(0)).array().rowwise() / denom.array()).matrix();
    n.value = (xhat.array().rowwise() * bn.gamma.value.row(0).array()).matrix().rowwise() +
              bn.beta.value.row(0);
    n.requires_grad = true;
    const int xi = x.id;
    n.backprop = [xi, state, denom = std::move(denom), xhat = std::move(xhat)](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      if (state->beta.grad.size() != state->beta.value.size()) state->beta.zero_grad();
      if (state->gamma.grad.size() != state->gamma.value.size()) state->gamma.zero_grad();
      state->beta.grad += g.colwise().sum();
      state->gamma.grad += (g.array() * xhat.array()).colwise().sum().matrix();
      if (t.requires_(xi))
        t.add_grad_(xi, (g.array().rowwise() * (state->gamma.value.row(0).array() / denom.array()))
                            .matrix());
    };
  }
  return {push_(std::move(n))};
}

Var Tape::mean_over_points(Var x, Eigen::Index n_per) {
  const Matrix& xv = val_(x.id);
  const Eigen::Index b_count = instances(xv.rows(), n_per, "mean_over_points");
  Node n;
  n.value.resize(b_count, xv.cols());
  for (Eigen::Index b = 0; b < b_count; ++b)
    n.value.row(b) = xv.middleRows(b * n_per, n_per).colwise().mean();
  n.requires_grad = requires_(x.id);
  if (n.requires_grad) {
    const int xi = x.id;
    n.backprop = [xi, n_per, b_count](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      Matrix dx(b_count * n_per, g.cols());
      for (Eigen::Index b = 0; b < b_count; ++b)
        dx.middleRows(b * n_per, n_per) =
            (g.row(b) / static_cast<double>(n_per)).replicate(n_per, 1);
      t.add_grad_(xi, dx);
    };
  }
  return {push_(std::move(n))};
}

Var Tape::max_over_points(Var x, Eigen::Index n_per) {
  const Matrix& xv = val_(x.id);
  const Eigen::Index b_count = instances(xv.rows(), n_per, "max_over_points");
  Eigen::MatrixXi argmax(b_count, xv.cols());
  Node n;
  n.value.resize(b_count, xv.cols());
  for (Eigen::Index b = 0; b < b_count; ++b) {
    for (Eigen::Index c = 0; c < xv.cols(); ++c) {
      Eigen::Index r = 0;
      n.value(b, c) = xv.col(c).segment(b * n_per, n_per).maxCoeff(&r);
      argmax(b, c) = static_cast<int>(b * n_per + r);
    }
  }
  n.requires_grad = requires_(x.id);
  if (n.requires_grad) {
    const int xi = x.id;
    const Eigen::Index rows = xv.rows();
    n.backprop = [xi, rows, argmax = std::move(argmax)](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      Matrix dx = Matrix::Zero(rows, g.cols());
      for (Eigen::Index b = 0; b < g.rows(); ++b)
        for (Eigen::Index c = 0; c < g.cols(); ++c) dx(argmax(b, c), c) += g(b, c);
      t.add_grad_(xi, dx);
    };
  }
  return {push_(std::move(n))};
}

Var Tape::repeat_rows(Var x, Eigen::Index n_per) {
  const Matrix& xv = val_(x.id);
  Node n;
  n.value.resize(xv.rows() * n_per, xv.cols());
  for (Eigen::Index b = 0; b < xv.rows(); ++b)
    n.value.middleRows(b * n_per, n_per) = xv.row(b).replicate(n_per, 1);
  n.requires_grad = requires_(x.id);
  if (n.requires_grad) {
    const int xi = x.id;
    const Eigen::Index b_count = xv.rows();
    n.backprop = [xi, n_per, b_count](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      Matrix dx(b_count, g.cols());
      for (Eigen::Index b = 0; b < b_count; ++b)
        dx.row(b) = g.middleRows(b * n_per, n_per).colwise().sum();
      t.add_grad_(xi, dx);
    };
  }
  return {push_(std::move(n))};
}

Var Tape::softmax_rows(Var x) {
  const Matrix& xv = val_(x.id);
  Node n;
  n.value.resize(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double m = xv.row(r).maxCoeff();
    Eigen::RowVectorXd e = (xv.row(r).array() - m).exp();
    n.value.row(r) = e / e.sum();
  }
  n.requires_grad = requires_(x.id);
  if (n.requires_grad) {
    const int xi = x.id;
    n.backprop = [xi](Tape& t, int self) {
      const Node& me = t.nodes_[static_cast<std::size_t>(self)];
      const Vector dot = (me.grad.array() * me.value.array()).rowwise().sum();
      t.add_grad_(xi, (me.value.array() * (me.grad.colwise() - dot).array()).matrix());
    };
  }
  return {push_(std::move(n))};
}

Var Tape::pool_clusters(Var assign, Var feat, Eigen::Index n_per) {
  const Matrix& av = val_(assign.id);
  const Matrix& fv = val_(feat.id);
  if (av.rows() != fv.rows()) throw ConfigError("pool_clusters: row mismatch");
  const Eigen::Index b_count = instances(av.rows(), n_per, "pool_clusters");
  const Eigen::Index m = av.cols();
  Node n;
  n.value.resize(b_count * m, fv.cols());
  for (Eigen::Index b = 0; b < b_count; ++b)
    n.value.middleRows(b * m, m).noalias() =
        av.middleRows(b * n_per, n_per).transpose() * fv.middleRows(b * n_per, n_per);
  n.requires_grad = requires_(assign.id) || requires_(feat.id);
  if (n.requires_grad) {
    const int ai = assign.id, fi = feat.id;
    n.backprop = [ai, fi, n_per, b_count, m](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      const Matrix& av2 = t.val_(ai);
      const Matrix& fv2 = t.val_(fi);
      if (t.requires_(ai)) {
        Matrix da(av2.rows(), av2.cols());
        for (Eigen::Index b = 0; b < b_count; ++b)
          da.middleRows(b * n_per, n_per).noalias() =
              fv2.middleRows(b * n_per, n_per) * g.middleRows(b * m, m).transpose();
        t.add_grad_(ai, da);
      }
      if (t.requires_(fi)) {
        Matrix df(fv2.rows(), fv2.cols());
        for (Eigen::Index b = 0; b < b_count; ++b)
          df.middleRows(b * n_per, n_per).noalias() =
              av2.middleRows(b * n_per, n_per) * g.middleRows(b * m, m);
        t.add_grad_(fi, df);
      }
    };
  }
  return {push_(std::move(n))};
}

Var Tape::unpool_clusters(Var assign, Var clusters, Eigen::Index m) {
  const Matrix& av = val_(assign.id);
  const Matrix& cv = val_(clusters.id);
  const Eigen::Index b_count = instances(cv.rows(), m, "unpool_clusters");
  if (av.cols() != m || av.rows() % b_count != 0)
    throw ConfigError("unpool_clusters: shape mismatch");
  const Eigen::Index n_per = av.rows() / b_count;
  Node n;
  n.value.resize(av.rows(), cv.cols());
  for (Eigen::Index b = 0; b < b_count; ++b)
    n.value.middleRows(b * n_per, n_per).noalias() =
        av.middleRows(b * n_per, n_per) * cv.middleRows(b * m, m);
  n.requires_grad = requires_(assign.id) || requires_(clusters.id);
  if (n.requires_grad) {
    const int ai = assign.id, ci = clusters.id;
    n.backprop = [ai, ci, n_per, b_count, m](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      const Matrix& av2 = t.val_(ai);
      const Matrix& cv2 = t.val_(ci);
      if (t.requires_(ai)) {
        Matrix da(av2.rows(), av2.cols());
        for (Eigen::Index b = 0; b < b_count; ++b)
          da.middleRows(b * n_per, n_per).noalias() =
              g.middleRows(b * n_per, n_per) * cv2.middleRows(b * m, m).transpose();
        t.add_grad_(ai, da);
      }
      if (t.requires_(ci)) {
        Matrix dc(cv2.rows(), cv2.cols());
        for (Eigen::Index b = 0; b < b_count; ++b)
          dc.middleRows(b * m, m).noalias() =
              av2.middleRows(b * n_per, n_per).transpose() * g.middleRows(b * n_per, n_per);
        t.add_grad_(ci, dc);
      }
    };
  }
  return {push_(std::move(n))};
}

Var Tape::mix_clusters(Var x, Var w, Var b, Eigen::Index m) {
  const Matrix& xv = val_(x.id);
  const Matrix& wv = val_(w.id);
  const Matrix& bv = val_(b.id);
  const Eigen::Index b_count = instances(xv.rows(), m, "mix_clusters");
  if (wv.rows() != m || wv.cols() != m || bv.rows() != m || bv.cols() != 1)
    throw ConfigError("mix_clusters: shape mismatch");
  Node n;
  n.value.resize(xv.rows(), xv.cols());
  for (Eigen::Index k = 0; k < b_count; ++k)
    n.value.middleRows(k * m, m).noalias() =
        (wv * xv.middleRows(k * m, m)).colwise() + bv.col(0);
  n.requires_grad = requires_(x.id) || requires_(w.id) || requires_(b.id);
  if (n.requires_grad) {
    const int xi = x.id, wi = w.id, bi = b.id;
    n.backprop = [xi, wi, bi, m, b_count](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      const Matrix& xv2 = t.val_(xi);
      const Matrix& wv2 = t.val_(wi);
      if (t.requires_(xi)) {
        Matrix dx(xv2.rows(), xv2.cols());
        for (Eigen::Index k = 0; k < b_count; ++k)
          dx.middleRows(k * m, m).noalias() = wv2.transpose() * g.middleRows(k * m, m);
        t.add_grad_(xi, dx);
      }
      if (t.requires_(wi)) {
        Matrix dw = Matrix::Zero(m, m);
        for (Eigen::Index k = 0; k < b_count; ++k)
          dw.noalias() += g.middleRows(k * m, m) * xv2.middleRows(k * m, m).transpose();
        t.add_grad_(wi, dw);
      }
      if (t.requires_(bi)) {
        Matrix db = Matrix::Zero(m, 1);
        for (Eigen::Index k = 0; k < b_count; ++k) db.col(0) += g.middleRows(k * m, m).rowwise().sum();
        t.add_grad_(bi, db);
      }
    };
  }
  return {push_(std::move(n))};
}

Var Tape::scale_const(Var x, double c) {
  Node n;
  n.value = c * val_(x.id);
  n.requires_grad = requires_(x.id);
  if (n.requires_grad) {
    const int xi = x.id;
    n.backprop = [xi, c](Tape& t, int self) {
      t.add_grad_(xi, c * t.nodes_[static_cast<std::size_t>(self)].grad);
    };
  }
  return {push_(std::move(n))};
}

Var Tape::sum_all(Var x) {
  Node n;
  n.value = Matrix::Constant(1, 1, val_(x.id).sum());
  n.requires_grad = requires_(x.id);
  if (n.requires_grad) {
    const int xi = x.id;
    n.backprop = [xi](Tape& t, int self) {
      const Matrix& xv = t.val_(xi);
      t.add_grad_(xi, Matrix::Constant(xv.rows(), xv.cols(),
                                       t.nodes_[static_cast<std::size_t>(self)].grad(0, 0)));
    };
  }
  return {push_(std::move(n))};
}

Var Tape::weighted_sum(Var x, Matrix coeff) {
  const Matrix& xv = val_(x.id);
  if (coeff.rows() != xv.rows() || coeff.cols() != xv.cols())
    throw ConfigError("weighted_sum: shape mismatch");
  Node n;
  n.value = Matrix::Constant(1, 1, xv.cwiseProduct(coeff).sum());
  n.requires_grad = requires_(x.id);
  if (n.requires_grad) {
    const int xi = x.id;
    n.backprop = [xi, coeff = std::move(coeff)](Tape& t, int self) {
      t.add_grad_(xi, t.nodes_[static_cast<std::size_t>(self)].grad(0, 0) * coeff);
    };
  }
  return {push_(std::move(n))};
}

Var Tape::bce_with_logits(Var logits, Matrix labels, Matrix coeff) {
  const Matrix& zv = val_(logits.id);
  if (labels.rows() != zv.rows() || labels.cols() != zv.cols() || coeff.rows() != zv.rows() ||
      coeff.cols() != zv.cols())
    throw ConfigError("bce_with_logits: shape mismatch");
  double total = 0.0;
  for (Eigen::Index r = 0; r < zv.rows(); ++r)
    for (Eigen::Index c = 0; c < zv.cols(); ++c) {
      const double z = zv(r, c);
      const double y = labels(r, c);
      total += coeff(r, c) * (std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))));
    }
  Node n;
  n.value = Matrix::Constant(1, 1, total);
  n.requires_grad = requires_(logits.id);
  if (n.requires_grad) {
    const int zi = logits.id;
    n.backprop = [zi, labels = std::move(labels), coeff = std::move(coeff)](Tape& t, int self) {
      const double g = t.nodes_[static_cast<std::size_t>(self)].grad(0, 0);
      const Matrix& zv2 = t.val_(zi);
      Matrix dz(zv2.rows(), zv2.cols());
      for (Eigen::Index r = 0; r < zv2.rows(); ++r)
        for (Eigen::Index c = 0; c < zv2.cols(); ++c)
          dz(r, c) = g * coeff(r, c) * (sigmoid(zv2(r, c)) - labels(r, c));
      t.add_grad_(zi, dz);
    };
  }
  return {push_(std::move(n))};
}

Var Tape::eight_point(Var w, const Matrix& constraint, bool training_fallbacks) {
  const Matrix& wv = val_(w.id);
  if (wv.cols() != 1 || wv.rows() != constraint.rows() || constraint.cols() != 9)
    throw ConfigError("eight_point: expected N x 1 weights against N x 9 constraint");
  const Eigen::Index n_rows = wv.rows();

  Eigen::Index usable = 0;
  for (Eigen::Index i = 0; i < n_rows; ++i)
    if (wv(i, 0) > kSolverWeightFloor) ++usable;

  bool stop_grad = false;
  Vector w_used = wv.col(0);
  if (usable < 8) {
    if (!training_fallbacks)
      throw ValidationError("eight_point: fewer than 8 weights above the usable floor");
    ++counters.weight_floor_fallbacks;
    stop_grad = true;
    w_used = Vector::Constant(n_rows, 1.0 / static_cast<double>(n_rows));
  }

  EightPointSystem sys = solve_weighted_eight_point_system(constraint, w_used);
  if (sys.eigen_gap < kSolverDegenerateGap) {
    if (!training_fallbacks)
      throw DegenerateError("eight_point: eigen-gap below the degenerate bound");
    ++counters.stop_grad_fallbacks;
    stop_grad = true;
  }

  Node n;
  n.value = sys.solution.transpose();
  n.requires_grad = requires_(w.id) && !stop_grad;
  if (n.requires_grad) {
    const int wi = w.id;
    n.backprop = [wi, sys = std::move(sys), x = constraint](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;  // 1 x 9
      const Eigen::Matrix<double, 9, 1> ebar = g.transpose();
      // q = sum_{j>=1} [(V_j . ebar) / clamp(l0 - l_j)] V_j ; then
      // dL/dw_i = (x_i . q)(x_i . e), the rank-1 perturbation of the Gram
      // matrix by dA/dw_i = x_i x_i'.
      Eigen::Matrix<double, 9, 1> q = Eigen::Matrix<double, 9, 1>::Zero();
      for (int j = 1; j < 9; ++j) {
        const double gap = std::min(sys.eigenvalues(0) - sys.eigenvalues(j), -kSolverEigenGapClamp);
        q += (sys.eigenvectors.col(j).dot(ebar) / gap) * sys.eigenvectors.col(j);
      }
      const Vector xq = x * q;
      const Vector xe = x * sys.solution;
      t.add_grad_(wi, (xq.array() * xe.array()).matrix());
    };
  }
  return {push_(std::move(n))};
}

Var Tape::epipolar_residuals(Var e_row, const Matrix& coords) {
  const Matrix& ev = val_(e_row.id);
  if (ev.rows() != 1 || ev.cols() != 9) throw ConfigError("epipolar_residuals: expected 1 x 9");
  if (coords.cols() != 4) throw ConfigError("epipolar_residuals: expected N x 4 coords");
  Eigen::Matrix3d e;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) e(r, c) = ev(0, r * 3 + c);

  const Eigen::Index n_rows = coords.rows();
  Node n;
  n.value.resize(n_rows, 1);
  for (Eigen::Index i = 0; i < n_rows; ++i) {
    const Eigen::Vector3d v1(coords(i, 0), coords(i, 1), 1.0);
    const Eigen::Vector3d v2(coords(i, 2), coords(i, 3), 1.0);
    const double num = v2.dot(e * v1);
    const Eigen::Vector3d ev1 = e * v1;
    const Eigen::Vector3d etv2 = e.transpose() * v2;
    const double d = ev1(0) * ev1(0) + ev1(1) * ev1(1) + etv2(0) * etv2(0) + etv2(1) * etv2(1);
    n.value(i, 0) = num * num / std::max(d, kEpipolarDenomClamp);
  }

  n.requires_grad = requires_(e_row.id);
  if (n.requires_grad) {
    const int ei = e_row.id;
    n.backprop = [ei, e, coords = coords](Tape& t, int self) {
      const Matrix& g = t.nodes_[static_cast<std::size_t>(self)].grad;
      Eigen::Matrix3d de = Eigen::Matrix3d::Zero();
      for (Eigen::Index i = 0; i < coords.rows(); ++i) {
        const Eigen::Vector3d v1(coords(i, 0), coords(i, 1), 1.0);
        const Eigen::Vector3d v2(coords(i, 2), coords(i, 3), 1.0);
        const double num = v2.dot(e * v1);
        const Eigen::Vector3d ev1 = e * v1;
        const Eigen::Vector3d etv2 = e.transpose() * v2;
        const double d_raw =
            ev1(0) * ev1(0) + ev1(1) * ev1(1) + etv2(0) * etv2(0) + etv2(1) * etv2(1);
        const bool clamped = d_raw < kEpipolarDenomClamp;
        const double d = clamped ? kEpipolarDenomClamp : d_raw;
        const Eigen::Matrix3d dnum = v2 * v1.transpose();
        Eigen::Matrix3d dr = (2.0 * num / d) * dnum;
        if (!clamped) {
          Eigen::Matrix3d dd = Eigen::Matrix3d::Zero();
          dd.row(0) += 2.0 * ev1(0) * v1.transpose();
          dd.row(1) += 2.0 * ev1(1) * v1.transpose();
          dd.col(0) += 2.0 * etv2(0) * v2;
          dd.col(1) += 2.0 * etv2(1) * v2;
          dr -= (num * num / (d * d)) * dd;
        }
        de += g(i, 0) * dr;
      }
      Matrix dev(1, 9);
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) dev(0, r * 3 + c) = de(r, c);
      t.add_grad_(ei, dev);
    };
  }
  return {push_(std::move(n))};
}

void Tape::backward(Var loss, bool free_memory) {
  if (loss.id < 0 || loss.id >= static_cast<int>(nodes_.size()))
    throw ConfigError("backward: invalid loss node");
  if (val_(loss.id).size() != 1) throw ConfigError("backward: loss must be 1x1");
  grad_(loss.id).setConstant(1.0);

  for (int i = loss.id; i >= 0; --i) {
    Node& node = nodes_[static_cast<std::size_t>(i)];
    if (node.backprop && node.requires_grad && node.grad.size() != 0) node.backprop(*this, i);
    node.backprop = nullptr;  // releases captured memos
    if (free_memory && !node.retained) {
      node.value = Matrix();
      node.grad = Matrix();
    }
  }
}

}  // namespace llha::ad
