// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mogen/common.hpp"

// Reverse-mode automatic differentiation on a tape of Eigen matrices.
// Graphs are built per step (define by run) and discarded after backward().

namespace mogen::ad {

struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

class Tape {
 public:
  Tape() { nodes_.reserve(1024); }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  Var leaf(Mat v) {
    nodes_.push_back(Node{std::move(v), Mat(), nullptr, false});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& val(Var x) const { return node(x).value; }

  // Gradient of the last backward() root w.r.t. x; zeros if x was unused.
  Mat grad_of(Var x) const {
    const Node& n = node(x);
    if (n.has_grad) return n.grad;
    return Mat::Zero(n.value.rows(), n.value.cols());
  }

  void backward(Var root) {
    Node& r = node(root);
    check(r.value.rows() == 1 && r.value.cols() == 1,
          "backward: root must be a 1x1 scalar");
    r.grad = Mat::Ones(1, 1);
    r.has_grad = true;
    for (int i = root.idx; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.has_grad && n.back) n.back(*this);
    }
  }

  // ---- elementwise and scalar ops ----

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    return make(val(a) + val(b), [a, b](Tape& t, const Mat& g) {
      t.accum(a, g);
      t.accum(b, g);
    });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    return make(val(a) - val(b), [a, b](Tape& t, const Mat& g) {
      t.accum(a, g);
      t.accum(b, -g);
    });
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    return make(val(a).cwiseProduct(val(b)), [a, b](Tape& t, const Mat& g) {
      t.accum(a, g.cwiseProduct(t.val(b)));
      t.accum(b, g.cwiseProduct(t.val(a)));
    });
  }

  Var div(Var a, Var b) {
    same_shape(a, b, "div");
    return make(val(a).cwiseQuotient(val(b)), [a, b](Tape& t, const Mat& g) {
      const Mat& vb = t.val(b);
      t.accum(a, g.cwiseQuotient(vb));
      t.accum(b, -g.cwiseProduct(t.val(a)).cwiseQuotient(vb.cwiseProduct(vb)));
    });
  }

  Var scale(Var a, double s) {
    return make(val(a) * s, [a, s](Tape& t, const Mat& g) { t.accum(a, g * s); });
  }

  Var add_scalar(Var a, double s) {
    return make(val(a).array() + s, [a](Tape& t, const Mat& g) { t.accum(a, g); });
  }

  Var mul_const(Var a, const Mat& m) {
    check(val(a).rows() == m.rows() && val(a).cols() == m.cols(),
          "mul_const: shape mismatch");
    return make(val(a).cwiseProduct(m),
                [a, m](Tape& t, const Mat& g) { t.accum(a, g.cwiseProduct(m)); });
  }

  Var add_const(Var a, const Mat& m) {
    check(val(a).rows() == m.rows() && val(a).cols() == m.cols(),
          "add_const: shape mismatch");
    return make(val(a) + m, [a](Tape& t, const Mat& g) { t.accum(a, g); });
  }

  Var square(Var a) {
    return make(val(a).cwiseProduct(val(a)), [a](Tape& t, const Mat& g) {
      t.accum(a, 2.0 * g.cwiseProduct(t.val(a)));
    });
  }

  Var expv(Var a) {
    return make(val(a).array().exp(), [a](Tape& t, const Mat& g) {
      t.accum(a, g.cwiseProduct(t.val(a).array().exp().matrix()));
    });
  }

  Var logv(Var a) {
    check((val(a).array() > 0.0).all(), "log: non-positive input");
    return make(val(a).array().log(), [a](Tape& t, const Mat& g) {
      t.accum(a, g.cwiseQuotient(t.val(a)));
    });
  }

  Var tanhv(Var a) {
    return make(val(a).array().tanh(), [a](Tape& t, const Mat& g) {
      Mat th = t.val(a).array().tanh();
      t.accum(a, g.cwiseProduct((1.0 - th.array().square()).matrix()));
    });
  }

  // Exact GELU, x * Phi(x).
  Var gelu(Var a) {
    Mat y = val(a).unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); });
    return make(std::move(y), [a](Tape& t, const Mat& g) {
      Mat d = t.val(a).unaryExpr([](double x) {
        const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
      });
      t.accum(a, g.cwiseProduct(d));
    });
  }

  // ---- matrix products ----

  Var matmul(Var a, Var b) {
    check(val(a).cols() == val(b).rows(), "matmul: inner dimension mismatch");
    return make(val(a) * val(b), [a, b](Tape& t, const Mat& g) {
      t.accum(a, g * t.val(b).transpose());
      t.accum(b, t.val(a).transpose() * g);
    });
  }

  // a * b^T
  Var matmul_nt(Var a, Var b) {
    check(val(a).cols() == val(b).cols(), "matmul_nt: inner dimension mismatch");
    return make(val(a) * val(b).transpose(), [a, b](Tape& t, const Mat& g) {
      t.accum(a, g * t.val(b));
      t.accum(b, g.transpose() * t.val(a));
    });
  }

  // x*W + b with x NxI, W IxO, b 1xO.
  Var linear(Var x, Var W, Var b) {
    check(val(x).cols() == val(W).rows(), "linear: weight shape mismatch");
    check(val(b).rows() == 1 && val(b).cols() == val(W).cols(),
          "linear: bias shape mismatch");
    Mat y = (val(x) * val(W)).rowwise() + val(b).row(0);
    return make(std::move(y), [x, W, b](Tape& t, const Mat& g) {
      t.accum(x, g * t.val(W).transpose());
      t.accum(W, t.val(x).transpose() * g);
      t.accum(b, g.colwise().sum());
    });
  }

  // ---- slicing and assembly ----

  Var rows(Var a, Eigen::Index r0, Eigen::Index n) {
    check(r0 >= 0 && n >= 0 && r0 + n <= val(a).rows(), "rows: out of range");
    const Eigen::Index c = val(a).cols();
    return make(val(a).middleRows(r0, n), [a, r0, n, c](Tape& t, const Mat& g) {
      t.gref(a).middleRows(r0, n) += g;
      (void)c;
    });
  }

  Var cols(Var a, Eigen::Index c0, Eigen::Index n) {
    check(c0 >= 0 && n >= 0 && c0 + n <= val(a).cols(), "cols: out of range");
    return make(val(a).middleCols(c0, n), [a, c0, n](Tape& t, const Mat& g) {
      t.gref(a).middleCols(c0, n) += g;
    });
  }

  Var vstack(const std::vector<Var>& parts) {
    check(!parts.empty(), "vstack: empty");
    Eigen::Index rows = 0;
    const Eigen::Index cols = val(parts[0]).cols();
    for (Var p : parts) {
      check(val(p).cols() == cols, "vstack: column mismatch");
      rows += val(p).rows();
    }
    Mat y(rows, cols);
    Eigen::Index r = 0;
    for (Var p : parts) {
      y.middleRows(r, val(p).rows()) = val(p);
      r += val(p).rows();
    }
    return make(std::move(y), [parts](Tape& t, const Mat& g) {
      Eigen::Index r = 0;
      for (Var p : parts) {
        const Eigen::Index n = t.val(p).rows();
        t.gref(p).noalias() += g.middleRows(r, n);
        r += n;
      }
    });
  }

  Var hstack(const std::vector<Var>& parts) {
    check(!parts.empty(), "hstack: empty");
    Eigen::Index cols = 0;
    const Eigen::Index rows = val(parts[0]).rows();
    for (Var p : parts) {
      check(val(p).rows() == rows, "hstack: row mismatch");
      cols += val(p).cols();
    }
    Mat y(rows, cols);
    Eigen::Index c = 0;
    for (Var p : parts) {
      y.middleCols(c, val(p).cols()) = val(p);
      c += val(p).cols();
    }
    return make(std::move(y), [parts](Tape& t, const Mat& g) {
      Eigen::Index c = 0;
      for (Var p : parts) {
        const Eigen::Index n = t.val(p).cols();
        t.gref(p).noalias() += g.middleCols(c, n);
        c += n;
      }
    });
  }

  Var tile_rows(Var a, Eigen::Index times) {
    check(times > 0, "tile_rows: times must be positive");
    const Eigen::Index n = val(a).rows();
    Mat y(n * times, val(a).cols());
    for (Eigen::Index k = 0; k < times; ++k) y.middleRows(k * n, n) = val(a);
    return make(std::move(y), [a, times, n](Tape& t, const Mat& g) {
      for (Eigen::Index k = 0; k < times; ++k) {
        t.gref(a).noalias() += g.middleRows(k * n, n);
      }
    });
  }

  Var gather_rows(Var table, std::vector<Eigen::Index> idx) {
    for (Eigen::Index i : idx) {
      check(i >= 0 && i < val(table).rows(), "gather_rows: index out of range");
    }
    Mat y(static_cast<Eigen::Index>(idx.size()), val(table).cols());
    for (std::size_t k = 0; k < idx.size(); ++k) y.row(static_cast<Eigen::Index>(k)) = val(table).row(idx[k]);
    return make(std::move(y), [table, idx = std::move(idx)](Tape& t, const Mat& g) {
      Mat& gt = t.gref(table);
      for (std::size_t k = 0; k < idx.size(); ++k) {
        gt.row(idx[k]) += g.row(static_cast<Eigen::Index>(k));
      }
    });
  }

  // Row k of the output is the mean of table rows listed in bags[k].
  Var bag_mean_rows(Var table, std::vector<std::vector<Eigen::Index>> bags) {
    Mat y = Mat::Zero(static_cast<Eigen::Index>(bags.size()), val(table).cols());
    for (std::size_t k = 0; k < bags.size(); ++k) {
      check(!bags[k].empty(), "bag_mean_rows: empty bag");
      for (Eigen::Index i : bags[k]) {
        check(i >= 0 && i < val(table).rows(), "bag_mean_rows: index out of range");
        y.row(static_cast<Eigen::Index>(k)) += val(table).row(i);
      }
      y.row(static_cast<Eigen::Index>(k)) /= static_cast<double>(bags[k].size());
    }
    return make(std::move(y), [table, bags = std::move(bags)](Tape& t, const Mat& g) {
      Mat& gt = t.gref(table);
      for (std::size_t k = 0; k < bags.size(); ++k) {
        const double w = 1.0 / static_cast<double>(bags[k].size());
        for (Eigen::Index i : bags[k]) {
          gt.row(i) += w * g.row(static_cast<Eigen::Index>(k));
        }
      }
    });
  }

  // ---- reductions and row ops ----

  Var sum(Var a) {
    Mat y(1, 1);
    y(0, 0) = val(a).sum();
    return make(std::move(y), [a](Tape& t, const Mat& g) {
      t.accum(a, Mat::Constant(t.val(a).rows(), t.val(a).cols(), g(0, 0)));
    });
  }

  Var mean(Var a) {
    const double n = static_cast<double>(val(a).size());
    Mat y(1, 1);
    y(0, 0) = val(a).sum() / n;
    return make(std::move(y), [a, n](Tape& t, const Mat& g) {
      t.accum(a, Mat::Constant(t.val(a).rows(), t.val(a).cols(), g(0, 0) / n));
    });
  }

  Var rowwise_sum(Var a) {
    return make(val(a).rowwise().sum(), [a](Tape& t, const Mat& g) {
      t.accum(a, g * Eigen::RowVectorXd::Ones(t.val(a).cols()));
    });
  }

  Var colwise_sum(Var a) {
    return make(val(a).colwise().sum(), [a](Tape& t, const Mat& g) {
      t.accum(a, Eigen::VectorXd::Ones(t.val(a).rows()) * g);
    });
  }

  // Scales row i of a by s(i, 0).
  Var rowwise_mul(Var a, Var s) {
    check(val(s).cols() == 1 && val(s).rows() == val(a).rows(),
          "rowwise_mul: scale must be Nx1");
    return make((val(a).array().colwise() * val(s).col(0).array()).matrix(),
                [a, s](Tape& t, const Mat& g) {
                  t.accum(a, (g.array().colwise() * t.val(s).col(0).array()).matrix());
                  t.accum(s, g.cwiseProduct(t.val(a)).rowwise().sum());
                });
  }

  // Adds the 1xC row r to every row of a.
  Var add_rowvec(Var a, Var r) {
    check(val(r).rows() == 1 && val(r).cols() == val(a).cols(),
          "add_rowvec: shape mismatch");
    Mat y = val(a).rowwise() + val(r).row(0);
    return make(std::move(y), [a, r](Tape& t, const Mat& g) {
      t.accum(a, g);
      t.accum(r, g.colwise().sum());
    });
  }

  Var softmax_rows(Var a) {
    Mat y = val(a);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      Eigen::RowVectorXd row = y.row(i);
      const double m = row.maxCoeff();
      row = (row.array() - m).exp();
      y.row(i) = row / row.sum();
    }
    return make(std::move(y), [a, out = next_index()](Tape& t, const Mat& g) {
      const Mat& y = t.nodes_[static_cast<std::size_t>(out)].value;
      Mat dx = g.cwiseProduct(y);
      const Vec dot = dx.rowwise().sum();
      dx -= (y.array().colwise() * dot.array()).matrix();
      t.accum(a, dx);
    });
  }

  // Euclidean norm of each row as an Nx1 column. Zero rows get zero gradient.
  Var row_norms(Var a) {
    Mat y = val(a).rowwise().norm();
    return make(std::move(y), [a](Tape& t, const Mat& g) {
      const Mat& x = t.val(a);
      Mat dx(x.rows(), x.cols());
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double n = x.row(i).norm();
        if (n > 0.0) {
          dx.row(i) = (g(i, 0) / n) * x.row(i);
        } else {
          dx.row(i).setZero();
        }
      }
      t.accum(a, dx);
    });
  }

  // Rows scaled to unit norm. Zero rows stay zero with zero gradient.
  Var normalize_rows(Var a) {
    const Mat& x = val(a);
    Mat y(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double n = x.row(i).norm();
      y.row(i) = n > 0.0 ? (x.row(i) / n).eval() : Eigen::RowVectorXd::Zero(x.cols()).eval();
    }
    return make(std::move(y), [a](Tape& t, const Mat& g) {
      const Mat& x = t.val(a);
      Mat dx(x.rows(), x.cols());
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double n = x.row(i).norm();
        if (n > 0.0) {
          const Eigen::RowVectorXd u = x.row(i) / n;
          dx.row(i) = (g.row(i) - g.row(i).dot(u) * u) / n;
        } else {
          dx.row(i).setZero();
        }
      }
      t.accum(a, dx);
    });
  }

  Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5) {
    const Mat& v = val(x);
    check(val(gamma).rows() == 1 && val(gamma).cols() == v.cols(),
          "layer_norm_rows: gamma shape mismatch");
    check(val(beta).rows() == 1 && val(beta).cols() == v.cols(),
          "layer_norm_rows: beta shape mismatch");
    const double c = static_cast<double>(v.cols());
    Vec mu = v.rowwise().mean();
    Mat centered = v.colwise() - mu;
    Vec inv_s = ((centered.array().square().rowwise().sum() / c) + eps)
                    .sqrt()
                    .inverse();
    Mat xhat = centered.array().colwise() * inv_s.array();
    Mat y = (xhat.array().rowwise() * val(gamma).row(0).array()).rowwise() +
            val(beta).row(0).array();
    return make(std::move(y), [x, gamma, beta, eps, c](Tape& t, const Mat& g) {
      const Mat& v = t.val(x);
      Vec mu = v.rowwise().mean();
      Mat centered = v.colwise() - mu;
      Vec inv_s = ((centered.array().square().rowwise().sum() / c) + eps)
                      .sqrt()
                      .inverse();
      Mat xhat = centered.array().colwise() * inv_s.array();
      t.accum(beta, g.colwise().sum());
      t.accum(gamma, g.cwiseProduct(xhat).colwise().sum());
      Mat dxhat = g.array().rowwise() * t.val(gamma).row(0).array();
      Vec m1 = dxhat.rowwise().mean();
      Vec m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
      Mat dx = dxhat;
      dx.colwise() -= m1;
      dx -= (xhat.array().colwise() * m2.array()).matrix();
      dx = dx.array().colwise() * inv_s.array();
      t.accum(x, dx);
    });
  }

  // ---- small 3D helpers over row-packed data ----

  // Rows of a and b are 3-vectors; output rows are a_i x b_i.
  Var cross3_rows(Var a, Var b) {
    check(val(a).cols() == 3 && val(b).cols() == 3 && val(a).rows() == val(b).rows(),
          "cross3_rows: inputs must be Nx3");
    const Mat& va = val(a);
    const Mat& vb = val(b);
    Mat y(va.rows(), 3);
    for (Eigen::Index i = 0; i < va.rows(); ++i) {
      y.row(i) = Vec3(va.row(i)).cross(Vec3(vb.row(i))).transpose();
    }
    return make(std::move(y), [a, b](Tape& t, const Mat& g) {
      const Mat& va = t.val(a);
      const Mat& vb = t.val(b);
      Mat da(va.rows(), 3), db(va.rows(), 3);
      for (Eigen::Index i = 0; i < va.rows(); ++i) {
        const Vec3 gi(g.row(i));
        da.row(i) = Vec3(vb.row(i)).cross(gi).transpose();
        db.row(i) = gi.cross(Vec3(va.row(i))).transpose();
      }
      t.accum(a, da);
      t.accum(b, db);
    });
  }

  // Rows of a and b are row-major 3x3 matrices; output rows are a_i * b_i.
  Var matmul3_rows(Var a, Var b) {
    check(val(a).cols() == 9 && val(b).cols() == 9 && val(a).rows() == val(b).rows(),
          "matmul3_rows: inputs must be Nx9");
    const Mat& va = val(a);
    const Mat& vb = val(b);
    Mat y(va.rows(), 9);
    for (Eigen::Index i = 0; i < va.rows(); ++i) {
      pack3x3(y, i, unpack3x3(va, i) * unpack3x3(vb, i));
    }
    return make(std::move(y), [a, b](Tape& t, const Mat& g) {
      const Mat& va = t.val(a);
      const Mat& vb = t.val(b);
      Mat da(va.rows(), 9), db(va.rows(), 9);
      for (Eigen::Index i = 0; i < va.rows(); ++i) {
        const Mat3 A = unpack3x3(va, i);
        const Mat3 B = unpack3x3(vb, i);
        const Mat3 G = unpack3x3(g, i);
        pack3x3(da, i, G * B.transpose());
        pack3x3(db, i, A.transpose() * G);
      }
      t.accum(a, da);
      t.accum(b, db);
    });
  }

  // Rows of R are row-major 3x3 matrices; output rows are R_i * c.
  Var rot3_apply_const(Var R, const Vec3& c) {
    check(val(R).cols() == 9, "rot3_apply_const: input must be Nx9");
    const Mat& vr = val(R);
    Mat y(vr.rows(), 3);
    for (Eigen::Index i = 0; i < vr.rows(); ++i) {
      y.row(i) = (unpack3x3(vr, i) * c).transpose();
    }
    return make(std::move(y), [R, c](Tape& t, const Mat& g) {
      Mat dr(t.val(R).rows(), 9);
      for (Eigen::Index i = 0; i < dr.rows(); ++i) {
        const Vec3 gi(g.row(i));
        pack3x3(dr, i, gi * c.transpose());
      }
      t.accum(R, dr);
    });
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void(Tape&)> back;
    bool has_grad = false;
  };

  const Node& node(Var x) const {
    check(x.valid() && x.idx < static_cast<int>(nodes_.size()), "invalid Var");
    return nodes_[static_cast<std::size_t>(x.idx)];
  }

  Node& node(Var x) {
    check(x.valid() && x.idx < static_cast<int>(nodes_.size()), "invalid Var");
    return nodes_[static_cast<std::size_t>(x.idx)];
  }

  int next_index() const { return static_cast<int>(nodes_.size()); }

  Mat& gref(Var x) {
    Node& n = node(x);
    if (!n.has_grad) {
      n.grad = Mat::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  Mat& gref(int i) { return gref(Var{i}); }

  template <class Expr>
  void accum(Var x, const Expr& e) {
    gref(x) += e;
  }

  void same_shape(Var a, Var b, const char* op) {
    check(val(a).rows() == val(b).rows() && val(a).cols() == val(b).cols(),
          std::string(op) + ": shape mismatch");
  }

  // Wraps a forward value and a backward body receiving this node's gradient.
  template <class Back>
  Var make(Mat value, Back&& back) {
    const int out = next_index();
    Node n;
    n.value = std::move(value);
    n.back = [out, back = std::forward<Back>(back)](Tape& t) {
      back(t, t.nodes_[static_cast<std::size_t>(out)].grad);
    };
    nodes_.push_back(std::move(n));
    return Var{out};
  }

  std::vector<Node> nodes_;
};

// ---- finite difference checking ----

struct GradCheck {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
};

// build receives a fresh tape plus one leaf per input and returns a scalar Var.
// Central differences with step h are compared against tape gradients.
template <class Build>
GradCheck finite_diff_check(Build&& build, std::vector<Mat> inputs,
                            double h = 1e-6) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Mat& m : inputs) vars.push_back(tape.leaf(m));
  Var root = build(tape, vars);
  tape.backward(root);
  std::vector<Mat> analytic;
  analytic.reserve(vars.size());
  for (Var v : vars) analytic.push_back(tape.grad_of(v));

  auto eval = [&](const std::vector<Mat>& xs) {
    Tape t;
    std::vector<Var> vs;
    vs.reserve(xs.size());
    for (const Mat& m : xs) vs.push_back(t.leaf(m));
    return t.val(build(t, vs))(0, 0);
  };

  GradCheck res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index c = 0; c < inputs[k].cols(); ++c) {
      for (Eigen::Index r = 0; r < inputs[k].rows(); ++r) {
        std::vector<Mat> xs = inputs;
        xs[k](r, c) += h;
        const double fp = eval(xs);
        xs[k](r, c) -= 2.0 * h;
        const double fm = eval(xs);
        const double fd = (fp - fm) / (2.0 * h);
        const double an = analytic[k](r, c);
        const double abs_err = std::abs(fd - an);
        const double rel_err = abs_err / std::max({1.0, std::abs(fd), std::abs(an)});
        res.max_abs_err = std::max(res.max_abs_err, abs_err);
        res.max_rel_err = std::max(res.max_rel_err, rel_err);
      }
    }
  }
  return res;
}

}  // namespace mogen::ad
