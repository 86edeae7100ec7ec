#include "pcv/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>
#include <utility>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace pcv::ad {

namespace {

thread_local bool g_grad_enabled = true;

#if defined(__GLIBC__)
// Graph temporaries are large and short-lived. Serving them from the heap
// instead of fresh mmap regions avoids page-fault churn on every op.
[[maybe_unused]] const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 512 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

Node& in(Node& self, std::size_t i) { return *self.inputs[i]; }

RowVector column_sums(const Matrix& m) {
  RowVector s = RowVector::Zero(m.cols());
  for (Index i = 0; i < m.rows(); ++i) s += m.row(i);
  return s;
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

void Node::accumulate(Matrix&& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) {
    grad = std::move(g);
  } else {
    grad += g;
  }
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::from_node(std::shared_ptr<Node> node) {
  Var v;
  v.node_ = std::move(node);
  return v;
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw std::logic_error("item() on non-scalar");
  return node_->value(0, 0);
}

void Var::zero_grad() {
  if (node_) node_->grad.resize(0, 0);
}

void Var::backward() const {
  if (rows() != 1 || cols() != 1) throw std::logic_error("backward() requires a scalar");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward_fn) continue;
    if (n->grad.size() > 0) n->backward_fn(*n);
    // Interior gradients are not needed once propagated.
    n->grad.resize(0, 0);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& v : inputs) needs = needs || v.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& v : inputs) node->inputs.push_back(v.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var::from_node(std::move(node));
}

Var constant(Matrix value) { return Var(std::move(value), false); }

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {a, b}, [](Node& self) {
    in(self, 0).accumulate(self.grad);
    in(self, 1).accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {a, b}, [](Node& self) {
    in(self, 0).accumulate(self.grad);
    in(self, 1).accumulate(-self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    Node& x = in(self, 0);
    Node& y = in(self, 1);
    if (x.requires_grad) x.accumulate(self.grad.cwiseProduct(y.value));
    if (y.requires_grad) y.accumulate(self.grad.cwiseProduct(x.value));
  });
}

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& self) { in(self, 0).accumulate(self.grad * s); });
}

Var relu(const Var& a) {
  return make_result(a.value().cwiseMax(0.0), {a}, [](Node& self) {
    Node& x = in(self, 0);
    // self.grad is discarded after this call, so it is reused in place.
    Matrix g = std::move(self.grad);
    const double* xv = x.value.data();
    double* gv = g.data();
    for (Index i = 0; i < g.size(); ++i) {
      if (!(xv[i] > 0.0)) gv[i] = 0.0;
    }
    x.accumulate(std::move(g));
  });
}

Var square(const Var& a) {
  return make_result(a.value().array().square().matrix(), {a}, [](Node& self) {
    Node& x = in(self, 0);
    x.accumulate(2.0 * self.grad.cwiseProduct(x.value));
  });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_result(std::move(out), {a}, [](Node& self) {
    Node& x = in(self, 0);
    x.accumulate(Matrix::Constant(x.value.rows(), x.value.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  return make_result(a.value() * b.value(), {a, b}, [](Node& self) {
    Node& x = in(self, 0);
    Node& y = in(self, 1);
    if (x.requires_grad) x.accumulate(self.grad * y.value.transpose());
    if (y.requires_grad) y.accumulate(x.value.transpose() * self.grad);
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw std::invalid_argument("linear: shape mismatch");
  }
  Matrix out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return make_result(std::move(out), {x, w, b}, [](Node& self) {
    Node& xi = in(self, 0);
    Node& wi = in(self, 1);
    Node& bi = in(self, 2);
    if (xi.requires_grad) xi.accumulate(self.grad * wi.value.transpose());
    if (wi.requires_grad) wi.accumulate(xi.value.transpose() * self.grad);
    if (bi.requires_grad) bi.accumulate(column_sums(self.grad));
  });
}

Var concat_cols(const Var& a, const Var& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row mismatch");
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Index ca = a.cols();
  const Index cb = b.cols();
  return make_result(std::move(out), {a, b}, [ca, cb](Node& self) {
    in(self, 0).accumulate(self.grad.leftCols(ca));
    in(self, 1).accumulate(self.grad.rightCols(cb));
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::invalid_argument("slice_cols: range out of bounds");
  }
  return make_result(a.value().middleCols(start, count), {a}, [start, count](Node& self) {
    Node& x = in(self, 0);
    Matrix g = Matrix::Zero(x.value.rows(), x.value.cols());
    g.middleCols(start, count) = self.grad;
    x.accumulate(g);
  });
}

Var gather_rows(const Var& a, std::vector<Index> index) {
  Matrix out(static_cast<Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw std::out_of_range("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(index[i]);
  }
  return make_result(std::move(out), {a}, [index = std::move(index)](Node& self) {
    Node& x = in(self, 0);
    Matrix g = Matrix::Zero(x.value.rows(), x.value.cols());
    for (std::size_t i = 0; i < index.size(); ++i) g.row(index[i]) += self.grad.row(static_cast<Index>(i));
    x.accumulate(g);
  });
}

Var segment_max(const Var& a, Index group) {
  if (group <= 0 || a.rows() % group != 0) throw std::invalid_argument("segment_max: bad group size");
  const Index groups = a.rows() / group;
  const Index cols = a.cols();
  Matrix out(groups, cols);
  std::vector<Index> arg(static_cast<std::size_t>(groups * cols));
  const Matrix& x = a.value();
  for (Index g = 0; g < groups; ++g) {
    const Index base = g * group;
    out.row(g) = x.row(base);
    Index* best = &arg[static_cast<std::size_t>(g * cols)];
    std::fill(best, best + cols, base);
    double* best_v = out.row(g).data();
    for (Index r = base + 1; r < base + group; ++r) {
      const double* xr = x.row(r).data();
      for (Index c = 0; c < cols; ++c) {
        if (xr[c] > best_v[c]) {
          best_v[c] = xr[c];
          best[c] = r;
        }
      }
    }
  }
  return make_result(std::move(out), {a}, [arg = std::move(arg), groups, cols](Node& self) {
    Node& xi = in(self, 0);
    Matrix g = Matrix::Zero(xi.value.rows(), cols);
    for (Index gi = 0; gi < groups; ++gi) {
      for (Index c = 0; c < cols; ++c) g(arg[static_cast<std::size_t>(gi * cols + c)], c) += self.grad(gi, c);
    }
    xi.accumulate(g);
  });
}

Var segment_mean(const Var& a, Index group) {
  if (group <= 0 || a.rows() % group != 0) throw std::invalid_argument("segment_mean: bad group size");
  const Index groups = a.rows() / group;
  Matrix out(groups, a.cols());
  for (Index g = 0; g < groups; ++g) out.row(g) = a.value().middleRows(g * group, group).colwise().mean();
  return make_result(std::move(out), {a}, [group, groups](Node& self) {
    Node& x = in(self, 0);
    Matrix g(x.value.rows(), x.value.cols());
    for (Index gi = 0; gi < groups; ++gi) {
      g.middleRows(gi * group, group).rowwise() = self.grad.row(gi) / static_cast<double>(group);
    }
    x.accumulate(g);
  });
}

Var repeat_rows(const Var& a, Index times) {
  if (times <= 0) throw std::invalid_argument("repeat_rows: times must be positive");
  Matrix out(a.rows() * times, a.cols());
  for (Index i = 0; i < a.rows(); ++i) out.middleRows(i * times, times).rowwise() = a.value().row(i);
  return make_result(std::move(out), {a}, [times](Node& self) {
    Node& x = in(self, 0);
    Matrix g(x.value.rows(), x.value.cols());
    for (Index i = 0; i < g.rows(); ++i) g.row(i) = self.grad.middleRows(i * times, times).colwise().sum();
    x.accumulate(g);
  });
}

Var tile_rows(const Var& a, Index copies) {
  if (copies <= 0) throw std::invalid_argument("tile_rows: copies must be positive");
  const Index r = a.rows();
  Matrix out(r * copies, a.cols());
  for (Index b = 0; b < copies; ++b) out.middleRows(b * r, r) = a.value();
  return make_result(std::move(out), {a}, [copies, r](Node& self) {
    Node& x = in(self, 0);
    Matrix g = Matrix::Zero(r, x.value.cols());
    for (Index b = 0; b < copies; ++b) g += self.grad.middleRows(b * r, r);
    x.accumulate(g);
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Matrix& running_mean, Matrix& running_var,
               bool training, double momentum, double eps) {
  const Index n = x.rows();
  const Index c = x.cols();
  if (gamma.cols() != c || beta.cols() != c) throw std::invalid_argument("batch_norm: channel mismatch");
  const Matrix& xv = x.value();
  // Row-wise sweeps keep the access pattern contiguous for row-major storage.
  RowVector mu;
  RowVector var;
  if (training) {
    mu = RowVector::Zero(c);
    for (Index i = 0; i < n; ++i) mu += xv.row(i);
    mu /= static_cast<double>(n);
    var = RowVector::Zero(c);
    for (Index i = 0; i < n; ++i) var.array() += (xv.row(i) - mu).array().square();
    var /= static_cast<double>(n);
    const double unbias = n > 1 ? static_cast<double>(n) / static_cast<double>(n - 1) : 1.0;
    running_mean = (1.0 - momentum) * running_mean + momentum * Matrix(mu);
    running_var = (1.0 - momentum) * running_var + momentum * unbias * Matrix(var);
  } else {
    mu = running_mean.row(0);
    var = running_var.row(0);
  }
  const RowVector inv_std = (var.array() + eps).rsqrt().matrix();
  const RowVector g = gamma.value().row(0);
  const RowVector b = beta.value().row(0);
  Matrix xhat(n, c);
  Matrix out(n, c);
  for (Index i = 0; i < n; ++i) {
    xhat.row(i) = (xv.row(i) - mu).cwiseProduct(inv_std);
    out.row(i) = xhat.row(i).cwiseProduct(g) + b;
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std, training, n, c](Node& self) {
                       Node& xi = in(self, 0);
                       Node& gi = in(self, 1);
                       Node& bi = in(self, 2);
                       const Matrix& dy = self.grad;
                       RowVector s1 = RowVector::Zero(c);  // sum of dy
                       RowVector s2 = RowVector::Zero(c);  // sum of dy * xhat
                       for (Index i = 0; i < n; ++i) {
                         s1 += dy.row(i);
                         s2 += dy.row(i).cwiseProduct(xhat.row(i));
                       }
                       if (gi.requires_grad) gi.accumulate(s2);
                       if (bi.requires_grad) bi.accumulate(s1);
                       if (!xi.requires_grad) return;
                       const RowVector g = gi.value.row(0);
                       Matrix dx(n, c);
                       if (!training) {
                         const RowVector scale = g.cwiseProduct(inv_std);
                         for (Index i = 0; i < n; ++i) dx.row(i) = dy.row(i).cwiseProduct(scale);
                       } else {
                         // dxhat = dy * g, so its column sums are s1 * g and s2 * g.
                         const RowVector a = g.cwiseProduct(inv_std);
                         const RowVector m1 = s1.cwiseProduct(a) / static_cast<double>(n);
                         const RowVector m2 = s2.cwiseProduct(a) / static_cast<double>(n);
                         for (Index i = 0; i < n; ++i) {
                           dx.row(i) = dy.row(i).cwiseProduct(a) - m1 - xhat.row(i).cwiseProduct(m2);
                         }
                       }
                       xi.accumulate(dx);
                     });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index c = x.cols();
  if (gamma.cols() != c || beta.cols() != c) throw std::invalid_argument("layer_norm: channel mismatch");
  const Eigen::VectorXd mu = x.value().rowwise().mean();
  const Eigen::VectorXd var = (x.value().colwise() - mu).array().square().rowwise().mean().matrix();
  const Eigen::VectorXd inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix xhat = (x.value().colwise() - mu).array().colwise() * inv_std.array();
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  return make_result(std::move(out), {x, gamma, beta}, [xhat = std::move(xhat), inv_std, c](Node& self) {
    Node& xi = in(self, 0);
    Node& gi = in(self, 1);
    Node& bi = in(self, 2);
    if (gi.requires_grad) gi.accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
    if (bi.requires_grad) bi.accumulate(self.grad.colwise().sum());
    if (!xi.requires_grad) return;
    Matrix dxhat = self.grad.array().rowwise() * gi.value.row(0).array();
    const Eigen::VectorXd s1 = dxhat.rowwise().sum();
    const Eigen::VectorXd s2 = dxhat.cwiseProduct(xhat).rowwise().sum();
    Matrix dx = (static_cast<double>(c) * dxhat.array()).colwise() - s1.array();
    dx.array() -= xhat.array().colwise() * s2.array();
    dx.array().colwise() *= inv_std.array() / static_cast<double>(c);
    xi.accumulate(dx);
  });
}

Var dropout(const Var& x, double p, bool training, std::mt19937_64& rng) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  Matrix mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  Matrix out = x.value().cwiseProduct(mask);
  return make_result(std::move(out), {x},
                     [mask = std::move(mask)](Node& self) { in(self, 0).accumulate(self.grad.cwiseProduct(mask)); });
}

Var attention(const Var& q, const Var& k, const Var& v, Index batch, Index heads) {
  const Index d = q.cols();
  if (k.cols() != d || v.cols() != d) throw std::invalid_argument("attention: width mismatch");
  if (batch <= 0 || heads <= 0 || d % heads != 0) throw std::invalid_argument("attention: bad batch/heads");
  if (q.rows() % batch != 0 || k.rows() % batch != 0 || v.rows() != k.rows()) {
    throw std::invalid_argument("attention: rows not divisible by batch");
  }
  const Index nq = q.rows() / batch;
  const Index nk = k.rows() / batch;
  const Index dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix out(q.rows(), d);
  std::vector<Matrix> probs(static_cast<std::size_t>(batch * heads));
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      const auto qh = q.value().block(b * nq, h * dh, nq, dh);
      const auto kh = k.value().block(b * nk, h * dh, nk, dh);
      const auto vh = v.value().block(b * nk, h * dh, nk, dh);
      Matrix s = (qh * kh.transpose()) * inv_scale;
      const Eigen::VectorXd row_max = s.rowwise().maxCoeff();
      s = (s.colwise() - row_max).array().exp().matrix();
      const Eigen::VectorXd z = s.rowwise().sum();
      s.array().colwise() /= z.array();
      out.block(b * nq, h * dh, nq, dh) = s * vh;
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(s);
    }
  }
  return make_result(std::move(out), {q, k, v},
                     [probs = std::move(probs), batch, heads, nq, nk, dh, inv_scale](Node& self) {
                       Node& qi = in(self, 0);
                       Node& ki = in(self, 1);
                       Node& vi = in(self, 2);
                       Matrix dq = Matrix::Zero(qi.value.rows(), qi.value.cols());
                       Matrix dk = Matrix::Zero(ki.value.rows(), ki.value.cols());
                       Matrix dv = Matrix::Zero(vi.value.rows(), vi.value.cols());
                       for (Index b = 0; b < batch; ++b) {
                         for (Index h = 0; h < heads; ++h) {
                           const Matrix& p = probs[static_cast<std::size_t>(b * heads + h)];
                           const auto go = self.grad.block(b * nq, h * dh, nq, dh);
                           const auto qh = qi.value.block(b * nq, h * dh, nq, dh);
                           const auto kh = ki.value.block(b * nk, h * dh, nk, dh);
                           const auto vh = vi.value.block(b * nk, h * dh, nk, dh);
                           dv.block(b * nk, h * dh, nk, dh) = p.transpose() * go;
                           const Matrix dp = go * vh.transpose();
                           const Eigen::VectorXd rowdot = dp.cwiseProduct(p).rowwise().sum();
                           const Matrix ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * inv_scale;
                           dq.block(b * nq, h * dh, nq, dh) = ds * kh;
                           dk.block(b * nk, h * dh, nk, dh) = ds.transpose() * qh;
                         }
                       }
                       qi.accumulate(dq);
                       ki.accumulate(dk);
                       vi.accumulate(dv);
                     });
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  const Index rows = logits.rows();
  const Index classes = logits.cols();
  if (static_cast<Index>(labels.size()) != rows) throw std::invalid_argument("cross_entropy: label count mismatch");
  Matrix probs(rows, classes);
  double total = 0.0;
  std::vector<int> lab(labels.begin(), labels.end());
  for (Index r = 0; r < rows; ++r) {
    if (lab[r] < 0 || lab[r] >= classes) throw std::out_of_range("cross_entropy: label out of range");
    const auto row = logits.value().row(r);
    const double m = row.maxCoeff();
    const RowVector e = (row.array() - m).exp().matrix();
    const double z = e.sum();
    total += (m + std::log(z)) - row(lab[r]);
    probs.row(r) = e / z;
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(rows);
  return make_result(std::move(out), {logits}, [probs = std::move(probs), lab = std::move(lab)](Node& self) {
    Matrix g = probs;
    for (Index r = 0; r < g.rows(); ++r) g(r, lab[static_cast<std::size_t>(r)]) -= 1.0;
    g *= self.grad(0, 0) / static_cast<double>(g.rows());
    in(self, 0).accumulate(g);
  });
}

Var normalize_rows(const Var& a, double eps) {
  Eigen::VectorXd norms = a.value().rowwise().norm();
  for (Index i = 0; i < norms.size(); ++i) {
    if (norms(i) < eps) norms(i) = 1.0;
  }
  Matrix out = a.value().array().colwise() / norms.array();
  Matrix y = out;
  return make_result(std::move(out), {a}, [y = std::move(y), norms](Node& self) {
    const Eigen::VectorXd dots = self.grad.cwiseProduct(y).rowwise().sum();
    Matrix g = self.grad - (y.array().colwise() * dots.array()).matrix();
    g.array().colwise() /= norms.array();
    in(self, 0).accumulate(g);
  });
}

}  // namespace pcv::ad
