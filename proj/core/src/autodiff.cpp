// SPDX-License-Identifier: Apache-2.0
#include "csdlab/autodiff.hpp"

#include <string>

#include "csdlab/error.hpp"

namespace csdlab::ad {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw Error(ErrorKind::shape_mismatch, what);
}

}  // namespace

Var Tape::push(Mat value, bool tracks) {
  Node node;
  node.value = std::move(value);
  node.tracks = tracks;
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Mat& Tape::grad_ref(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::constant(Mat value) { return push(std::move(value), false); }

Var Tape::leaf(Mat value) { return push(std::move(value), true); }

Mat Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::matmul(Var a, Var b) {
  require(value(a).cols() == value(b).rows(), "matmul: inner dimensions differ");
  Var out = push(value(a) * value(b), tracks(a) || tracks(b));
  if (tracks(out)) {
    nodes_[out.id].back = [this, a, b, out] {
      const Mat& g = out_grad(out.id);
      if (tracks(a)) grad_ref(a.id).noalias() += g * value(b).transpose();
      if (tracks(b)) grad_ref(b.id).noalias() += value(a).transpose() * g;
    };
  }
  return out;
}

namespace {

// Adds `g` into `target`, summing over rows when `target` is a broadcast row.
void accumulate_broadcast(Mat& target, const Mat& g, double sign) {
  if (target.rows() == g.rows()) {
    target += sign * g;
  } else {
    target += sign * g.colwise().sum();
  }
}

}  // namespace

Var Tape::add(Var a, Var b) {
  const Mat& va = value(a);
  const Mat& vb = value(b);
  require(va.cols() == vb.cols(), "add: column counts differ");
  Mat sum;
  if (va.rows() == vb.rows()) {
    sum = va + vb;
  } else if (vb.rows() == 1) {
    sum = va.rowwise() + vb.row(0);
  } else if (va.rows() == 1) {
    sum = vb.rowwise() + va.row(0);
  } else {
    require(false, "add: row counts differ and neither operand is a single row");
  }
  Var out = push(std::move(sum), tracks(a) || tracks(b));
  if (tracks(out)) {
    nodes_[out.id].back = [this, a, b, out] {
      const Mat& g = out_grad(out.id);
      if (tracks(a)) accumulate_broadcast(grad_ref(a.id), g, 1.0);
      if (tracks(b)) accumulate_broadcast(grad_ref(b.id), g, 1.0);
    };
  }
  return out;
}

Var Tape::sub(Var a, Var b) {
  const Mat& va = value(a);
  const Mat& vb = value(b);
  require(va.cols() == vb.cols(), "sub: column counts differ");
  Mat diff;
  if (va.rows() == vb.rows()) {
    diff = va - vb;
  } else if (vb.rows() == 1) {
    diff = va.rowwise() - vb.row(0);
  } else if (va.rows() == 1) {
    diff = (-vb).rowwise() + va.row(0);
  } else {
    require(false, "sub: row counts differ and neither operand is a single row");
  }
  Var out = push(std::move(diff), tracks(a) || tracks(b));
  if (tracks(out)) {
    nodes_[out.id].back = [this, a, b, out] {
      const Mat& g = out_grad(out.id);
      if (tracks(a)) accumulate_broadcast(grad_ref(a.id), g, 1.0);
      if (tracks(b)) accumulate_broadcast(grad_ref(b.id), g, -1.0);
    };
  }
  return out;
}

Var Tape::mul(Var a, Var b) {
  require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "mul: shapes differ");
  Var out = push(value(a).cwiseProduct(value(b)), tracks(a) || tracks(b));
  if (tracks(out)) {
    nodes_[out.id].back = [this, a, b, out] {
      const Mat& g = out_grad(out.id);
      if (tracks(a)) grad_ref(a.id) += g.cwiseProduct(value(b));
      if (tracks(b)) grad_ref(b.id) += g.cwiseProduct(value(a));
    };
  }
  return out;
}

Var Tape::scale(Var a, double s) {
  Var out = push(s * value(a), tracks(a));
  if (tracks(out)) {
    nodes_[out.id].back = [this, a, s, out] { grad_ref(a.id) += s * out_grad(out.id); };
  }
  return out;
}

Var Tape::scale_rows(Var a, const Col& s) {
  require(value(a).rows() == s.size(), "scale_rows: factor count differs from rows");
  Var out = push(s.asDiagonal() * value(a), tracks(a));
  if (tracks(out)) {
    nodes_[out.id].back = [this, a, s, out] { grad_ref(a.id) += s.asDiagonal() * out_grad(out.id); };
  }
  return out;
}

Var Tape::mul_col(Var a, Var col) {
  require(value(col).cols() == 1 && value(col).rows() == value(a).rows(), "mul_col: need a matching single column");
  Var out = push(value(col).col(0).asDiagonal() * value(a), tracks(a) || tracks(col));
  if (tracks(out)) {
    nodes_[out.id].back = [this, a, col, out] {
      const Mat& g = out_grad(out.id);
      if (tracks(a)) grad_ref(a.id) += value(col).col(0).asDiagonal() * g;
      if (tracks(col)) grad_ref(col.id).col(0) += g.cwiseProduct(value(a)).rowwise().sum();
    };
  }
  return out;
}

Var Tape::tanh(Var a) {
  Var out = push(value(a).array().tanh().matrix(), tracks(a));
  if (tracks(out)) {
    nodes_[out.id].back = [this, a, out] {
      const Mat& y = value(out);
      grad_ref(a.id).array() += out_grad(out.id).array() * (1.0 - y.array().square());
    };
  }
  return out;
}

Var Tape::concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: nothing to concatenate");
  const Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  bool any = false;
  for (Var p : parts) {
    require(value(p).rows() == rows, "concat_cols: row counts differ");
    cols += value(p).cols();
    any = any || tracks(p);
  }
  Mat joined(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    joined.middleCols(at, value(p).cols()) = value(p);
    at += value(p).cols();
  }
  Var out = push(std::move(joined), any);
  if (tracks(out)) {
    std::vector<Var> saved(parts.begin(), parts.end());
    nodes_[out.id].back = [this, saved = std::move(saved), out] {
      const Mat& g = out_grad(out.id);
      Eigen::Index off = 0;
      for (Var p : saved) {
        const Eigen::Index w = value(p).cols();
        if (tracks(p)) grad_ref(p.id) += g.middleCols(off, w);
        off += w;
      }
    };
  }
  return out;
}

Var Tape::slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= value(a).cols(), "slice_cols: range out of bounds");
  Var out = push(value(a).middleCols(start, count), tracks(a));
  if (tracks(out)) {
    nodes_[out.id].back = [this, a, start, count, out] {
      grad_ref(a.id).middleCols(start, count) += out_grad(out.id);
    };
  }
  return out;
}

Var Tape::row(Var a, Eigen::Index r) {
  require(r >= 0 && r < value(a).rows(), "row: index out of bounds");
  Var out = push(value(a).row(r), tracks(a));
  if (tracks(out)) {
    nodes_[out.id].back = [this, a, r, out] { grad_ref(a.id).row(r) += out_grad(out.id).row(0); };
  }
  return out;
}

Var Tape::broadcast_rows(Var a, Eigen::Index rows) {
  require(value(a).rows() == 1, "broadcast_rows: operand must be a single row");
  Var out = push(value(a).replicate(rows, 1), tracks(a));
  if (tracks(out)) {
    nodes_[out.id].back = [this, a, out] { grad_ref(a.id) += out_grad(out.id).colwise().sum(); };
  }
  return out;
}

Var Tape::softmax_rows(Var a) {
  Mat y = value(a);
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  Var out = push(std::move(y), tracks(a));
  if (tracks(out)) {
    nodes_[out.id].back = [this, a, out] {
      const Mat& g = out_grad(out.id);
      const Mat& s = value(out);
      const Col inner = g.cwiseProduct(s).rowwise().sum();
      grad_ref(a.id).array() += s.array() * (g.colwise() - inner).array();
    };
  }
  return out;
}

Var Tape::row_dot(Var a, Var b) {
  require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "row_dot: shapes differ");
  Mat d = value(a).cwiseProduct(value(b)).rowwise().sum();
  Var out = push(std::move(d), tracks(a) || tracks(b));
  if (tracks(out)) {
    nodes_[out.id].back = [this, a, b, out] {
      const auto g = out_grad(out.id).col(0);
      if (tracks(a)) grad_ref(a.id) += g.asDiagonal() * value(b);
      if (tracks(b)) grad_ref(b.id) += g.asDiagonal() * value(a);
    };
  }
  return out;
}

Var Tape::sum(Var a) {
  Mat s(1, 1);
  s(0, 0) = value(a).sum();
  Var out = push(std::move(s), tracks(a));
  if (tracks(out)) {
    nodes_[out.id].back = [this, a, out] { grad_ref(a.id).array() += out_grad(out.id)(0, 0); };
  }
  return out;
}

Var Tape::stop_grad(Var a) { return push(value(a), false); }

Var Tape::row_map(Var x, Mat y, Mat jacobians) {
  const Eigen::Index rows = value(x).rows();
  const Eigen::Index in = value(x).cols();
  require(y.rows() == rows, "row_map: output rows differ from input rows");
  require(jacobians.rows() == rows && jacobians.cols() == y.cols() * in, "row_map: Jacobian shape mismatch");
  Var out = push(std::move(y), tracks(x));
  if (tracks(out)) {
    nodes_[out.id].back = [this, x, out, jac = std::move(jacobians), in] {
      const Mat& g = out_grad(out.id);
      Mat& gx = grad_ref(x.id);
      const Eigen::Index outs = g.cols();
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        for (Eigen::Index o = 0; o < outs; ++o) {
          const double go = g(r, o);
          if (go == 0.0) continue;
          for (Eigen::Index i = 0; i < in; ++i) gx(r, i) += jac(r, o * in + i) * go;
        }
      }
    };
  }
  return out;
}

void Tape::backward(Var root) {
  if (!tracks(root)) return;
  Node& r = nodes_[root.id];
  r.grad = Mat::Ones(r.value.rows(), r.value.cols());
  for (std::int64_t id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.back && n.grad.size() != 0) n.back();
  }
}

}  // namespace csdlab::ad
