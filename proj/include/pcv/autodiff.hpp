#pragma once

// Minimal reverse-mode automatic differentiation over row-major double
// matrices. Every value is rank-2; higher-rank tensors are flattened into
// rows with the grouping documented at each op.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <vector>

namespace pcv::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix& g);
  void accumulate(Matrix&& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  static Var from_node(std::shared_ptr<Node> node);

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_ && node_->grad.size() > 0; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  bool defined() const { return static_cast<bool>(node_); }
  double item() const;

  // Seeds d(self)/d(self) = 1; self must be 1x1.
  void backward() const;
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph recording for its lifetime (inference paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Builds a result node; records inputs and the backward closure only when
// recording is on and some input requires a gradient.
Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

Var constant(Matrix value);

// Elementwise and shape ops.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var square(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);

Var matmul(const Var& a, const Var& b);
// x [R x in] * w [in x out] + b [1 x out]
Var linear(const Var& x, const Var& w, const Var& b);

Var concat_cols(const Var& a, const Var& b);
Var slice_cols(const Var& a, Index start, Index count);

// out.row(i) = a.row(index[i]); gradient scatter-adds.
Var gather_rows(const Var& a, std::vector<Index> index);

// Rows are grouped consecutively in blocks of `group`; returns one row per
// block holding the elementwise max (resp. mean).
Var segment_max(const Var& a, Index group);
Var segment_mean(const Var& a, Index group);

// out.row(i * times + r) = a.row(i)
Var repeat_rows(const Var& a, Index times);
// out.row(b * a.rows() + i) = a.row(i) for b in [0, copies)
Var tile_rows(const Var& a, Index copies);

// Per-column batch statistics over all rows. Running estimates are updated
// in place when training.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Matrix& running_mean,
               Matrix& running_var, bool training, double momentum = 0.1, double eps = 1e-5);
// Per-row statistics over the channel axis.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// Inverted dropout; identity when !training or p == 0.
Var dropout(const Var& x, double p, bool training, std::mt19937_64& rng);

// Multi-head scaled dot-product attention over `batch` independent samples.
// q is [batch*nq x d], k and v are [batch*nk x d]; heads split the d axis.
// Scores are scaled by 1/sqrt(d / heads).
Var attention(const Var& q, const Var& k, const Var& v, Index batch, Index heads);

// Mean softmax cross-entropy over rows, label per row.
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels);

// L2-normalizes each row; rows with zero norm pass through unchanged.
Var normalize_rows(const Var& a, double eps = 1e-12);

}  // namespace pcv::ad
