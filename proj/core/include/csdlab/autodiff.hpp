// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense matrices.
// Batches are stored as rows; every op records a closure that pushes its
// output gradient back to the inputs that require gradients.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace csdlab::ad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Col = Eigen::VectorXd;

struct Var {
  std::uint32_t id = 0;
};

class Tape {
 public:
  Tape() { nodes_.reserve(256); }

  /// Value with no gradient.
  Var constant(Mat value);
  /// Differentiable input; read its gradient with grad() after backward().
  Var leaf(Mat value);

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  /// Accumulated gradient, zeros when nothing reached the node.
  Mat grad(Var v) const;
  bool tracks(Var v) const { return nodes_[v.id].tracks; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var matmul(Var a, Var b);
  /// Elementwise sum; a single-row operand is broadcast over the other's rows.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  /// Elementwise product of equal shapes.
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  /// Row r multiplied by the constant s[r].
  Var scale_rows(Var a, const Col& s);
  /// Row r of `a` multiplied by the r-th entry of the single column `col`.
  Var mul_col(Var a, Var col);
  Var tanh(Var a);
  Var concat_cols(std::span<const Var> parts);
  Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
  Var row(Var a, Eigen::Index r);
  Var broadcast_rows(Var a, Eigen::Index rows);
  Var softmax_rows(Var a);
  /// Row-wise inner products, one column.
  Var row_dot(Var a, Var b);
  /// Sum of all entries, 1 x 1.
  Var sum(Var a);
  /// Same value, gradient blocked.
  Var stop_grad(Var a);
  /// Externally evaluated row-wise map y_r = f(x_r) with known Jacobians.
  /// `jacobians` row r holds the out x in Jacobian of row r, row-major.
  Var row_map(Var x, Mat value, Mat jacobians);

  /// Seeds the root with ones and propagates gradients to every tracked node.
  void backward(Var root);

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool tracks = false;
    std::function<void()> back;
  };

  Var push(Mat value, bool tracks);
  Mat& grad_ref(std::uint32_t id);
  const Mat& out_grad(std::uint32_t id) const { return nodes_[id].grad; }

  std::vector<Node> nodes_;
};

}  // namespace csdlab::ad
