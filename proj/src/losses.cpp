#include "pcv/losses.hpp"

#include "pcv/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <vector>
#include <stdexcept>

namespace pcv::losses {

using ad::Index;
using ad::Node;

namespace {

struct Normalized {
  Matrix unit;
  Eigen::VectorXd norms;
};

Normalized normalize(const Matrix& x, bool enabled) {
  Normalized n{x, Eigen::VectorXd::Ones(x.rows())};
  if (!enabled) return n;
  n.norms = x.rowwise().norm();
  for (Index i = 0; i < n.norms.size(); ++i) {
    if (n.norms(i) < 1e-12) n.norms(i) = 1.0;
  }
  n.unit.array().colwise() /= n.norms.array();
  return n;
}

// Gradient through row normalization.
Matrix unnormalize_grad(const Matrix& g, const Normalized& n, bool enabled) {
  if (!enabled) return g;
  const Eigen::VectorXd dots = g.cwiseProduct(n.unit).rowwise().sum();
  Matrix out = g - (n.unit.array().colwise() * dots.array()).matrix();
  out.array().colwise() /= n.norms.array();
  return out;
}

struct SampleGrads {
  Matrix predictions;
  Matrix positives;
  Matrix negatives;
};

// Loss of one sample; fills gradients of the loss (scaled by `scale`) when
// grads is non-null.
double info_nce_sample(const Matrix& pred, const Matrix& pos, const Matrix& neg, const InfoNceOptions& opt,
                       double scale, SampleGrads* grads) {
  const Index m = pred.rows();
  const double inv_tau = 1.0 / opt.temperature;
  const Normalized p = normalize(pred, opt.normalize);
  const Normalized q = normalize(pos, opt.normalize);
  const Normalized n = normalize(neg, opt.normalize);

  const Eigen::VectorXd pos_logit = p.unit.cwiseProduct(q.unit).rowwise().sum() * inv_tau;
  const Matrix neg_logit = (p.unit * n.unit.transpose()) * inv_tau;

  double total = 0.0;
  Eigen::VectorXd d_pos(m);
  Matrix d_neg(m, neg.rows());
  for (Index i = 0; i < m; ++i) {
    const double mx = std::max(pos_logit(i), neg_logit.row(i).maxCoeff());
    const double e_pos = std::exp(pos_logit(i) - mx);
    const ad::RowVector e_neg = (neg_logit.row(i).array() - mx).exp().matrix();
    const double z = e_pos + e_neg.sum();
    total += std::log(z) + mx - pos_logit(i);
    d_pos(i) = (e_pos / z - 1.0);
    d_neg.row(i) = e_neg / z;
  }
  const double loss = total / static_cast<double>(m);
  if (grads == nullptr) return loss;

  const double k = scale * inv_tau / static_cast<double>(m);
  d_pos *= k;
  d_neg *= k;
  const Matrix dp = (q.unit.array().colwise() * d_pos.array()).matrix() + d_neg * n.unit;
  const Matrix dq = p.unit.array().colwise() * d_pos.array();
  const Matrix dn = d_neg.transpose() * p.unit;
  grads->predictions = unnormalize_grad(dp, p, opt.normalize);
  grads->positives = unnormalize_grad(dq, q, opt.normalize);
  grads->negatives = unnormalize_grad(dn, n, opt.normalize);
  return loss;
}

void check_info_nce_shapes(const Matrix& pred, const Matrix& pos, const Matrix& neg, const InfoNceOptions& opt) {
  if (!(opt.temperature > 0.0)) throw std::invalid_argument("info_nce: temperature must be positive");
  if (pred.rows() != pos.rows() || pred.cols() != pos.cols() || neg.cols() != pred.cols()) {
    throw std::invalid_argument("info_nce: shape mismatch");
  }
  if (neg.rows() < 1) throw std::invalid_argument("info_nce: need at least one negative");
  if (pred.rows() < 1) throw std::invalid_argument("info_nce: need at least one prediction");
}

}  // namespace

MatchLoss match_loss_from_string(const std::string& s) {
  if (s == "infonce") return MatchLoss::kInfoNce;
  if (s == "l2") return MatchLoss::kL2;
  if (s == "cosine") return MatchLoss::kCosine;
  throw ConfigError("unknown matching loss: " + s);
}

const char* to_string(MatchLoss m) {
  switch (m) {
    case MatchLoss::kInfoNce: return "infonce";
    case MatchLoss::kL2: return "l2";
    case MatchLoss::kCosine: return "cosine";
  }
  return "infonce";
}

double info_nce(const Matrix& predictions, const Matrix& positives, const Matrix& negatives, const InfoNceOptions& opt) {
  check_info_nce_shapes(predictions, positives, negatives, opt);
  return info_nce_sample(predictions, positives, negatives, opt, 1.0, nullptr);
}

Var info_nce_loss(const Var& predictions, const Var& positives, const Var& negatives, int batch,
                  const InfoNceOptions& opt) {
  if (batch < 1 || predictions.rows() % batch != 0 || negatives.rows() % batch != 0) {
    throw std::invalid_argument("info_nce: rows not divisible by batch");
  }
  check_info_nce_shapes(predictions.value(), positives.value(), negatives.value(), opt);
  const Index m = predictions.rows() / batch;
  const Index q = negatives.rows() / batch;

  const bool record = ad::grad_enabled() &&
                      (predictions.requires_grad() || positives.requires_grad() || negatives.requires_grad());
  Matrix dp;
  Matrix dq;
  Matrix dn;
  if (record) {
    dp.resize(predictions.rows(), predictions.cols());
    dq.resize(positives.rows(), positives.cols());
    dn.resize(negatives.rows(), negatives.cols());
  }
  double total = 0.0;
  for (Index b = 0; b < batch; ++b) {
    SampleGrads g;
    total += info_nce_sample(predictions.value().middleRows(b * m, m), positives.value().middleRows(b * m, m),
                             negatives.value().middleRows(b * q, q), opt, 1.0 / static_cast<double>(batch),
                             record ? &g : nullptr);
    if (record) {
      dp.middleRows(b * m, m) = g.predictions;
      dq.middleRows(b * m, m) = g.positives;
      dn.middleRows(b * q, q) = g.negatives;
    }
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(batch);
  return ad::make_result(std::move(out), {predictions, positives, negatives},
                         [dp = std::move(dp), dq = std::move(dq), dn = std::move(dn)](Node& self) {
                           const double g = self.grad(0, 0);
                           self.inputs[0]->accumulate(dp * g);
                           self.inputs[1]->accumulate(dq * g);
                           self.inputs[2]->accumulate(dn * g);
                         });
}

double l2_match(const Matrix& predicted, const Matrix& target) {
  if (predicted.rows() != target.rows() || predicted.cols() != target.cols()) {
    throw std::invalid_argument("l2_match: shape mismatch");
  }
  return (predicted - target).squaredNorm() / static_cast<double>(predicted.size());
}

double cosine_match(const Matrix& predicted, const Matrix& target) {
  if (predicted.rows() != target.rows() || predicted.cols() != target.cols()) {
    throw std::invalid_argument("cosine_match: shape mismatch");
  }
  const Normalized a = normalize(predicted, true);
  const Normalized b = normalize(target, true);
  return (1.0 - a.unit.cwiseProduct(b.unit).rowwise().sum().array()).mean();
}

Var l2_match_loss(const Var& predicted, const Var& target) { return ad::mean(ad::square(ad::sub(predicted, target))); }

Var cosine_match_loss(const Var& predicted, const Var& target) {
  const Var dots = ad::mul(ad::normalize_rows(predicted), ad::normalize_rows(target));
  // mean over rows of (1 - cos) = 1 - sum(dots) / rows
  const double rows = static_cast<double>(predicted.rows());
  Matrix one(1, 1);
  one(0, 0) = 1.0;
  return ad::sub(ad::constant(one), ad::scale(ad::sum(dots), 1.0 / rows));
}

double cross_entropy(const Matrix& logits, int label) {
  if (logits.rows() != 1) throw std::invalid_argument("cross_entropy: expected a single logit row");
  if (label < 0 || label >= logits.cols()) throw std::out_of_range("cross_entropy: label out of range");
  const double m = logits.maxCoeff();
  return m + std::log((logits.array() - m).exp().sum()) - logits(0, label);
}

double alignment_loss(const Matrix& xs, const Matrix& xt, double alpha) {
  if (xs.rows() != xt.rows() || xs.cols() != xt.cols()) throw std::invalid_argument("alignment_loss: shape mismatch");
  if (xs.rows() == 0) throw std::invalid_argument("alignment_loss: empty set");
  const Eigen::VectorXd d = (xs - xt).rowwise().norm();
  return d.array().pow(alpha).mean();
}

double uniformity_loss(const Matrix& x, double t) {
  const Index n = x.rows();
  if (n < 2) throw std::invalid_argument("uniformity_loss: need at least two samples");
  // log-mean-exp over pairs, shifted by the largest exponent.
  std::vector<double> expo;
  expo.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  double mx = -std::numeric_limits<double>::infinity();
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) {
      const double e = -t * (x.row(i) - x.row(j)).squaredNorm();
      expo.push_back(e);
      mx = std::max(mx, e);
    }
  }
  double s = 0.0;
  for (double e : expo) s += std::exp(e - mx);
  return mx + std::log(s / static_cast<double>(expo.size()));
}

namespace {

Matrix unit_rows(Matrix m) {
  for (Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n > 1e-12) m.row(i) /= n;
  }
  return m;
}

}  // namespace

DiagnosticReport diagnose(std::span<const Matrix> grids, int frames, int regions, const Matrix& logits) {
  const Index n = static_cast<Index>(grids.size());
  if (n < 2) throw std::invalid_argument("diagnose: need at least two evaluation samples");
  if (logits.rows() != n) throw std::invalid_argument("diagnose: logits rows must match sample count");
  const Index d = grids.front().cols();
  Matrix spatial(n, d);
  Matrix temporal(n, d);
  for (Index s = 0; s < n; ++s) {
    const Matrix& g = grids[static_cast<std::size_t>(s)];
    if (g.rows() != static_cast<Index>(frames) * regions || g.cols() != d) {
      throw std::invalid_argument("diagnose: grid shape mismatch");
    }
    Matrix per_region = Matrix::Constant(regions, d, -std::numeric_limits<double>::infinity());
    Matrix per_frame(frames, d);
    for (int t = 0; t < frames; ++t) {
      const auto block = g.middleRows(static_cast<Index>(t) * regions, regions);
      per_frame.row(t) = block.colwise().maxCoeff();
      per_region = per_region.cwiseMax(block);
    }
    spatial.row(s) = per_region.colwise().mean();
    temporal.row(s) = per_frame.colwise().mean();
  }
  Matrix probs(n, logits.cols());
  for (Index s = 0; s < n; ++s) {
    const double m = logits.row(s).maxCoeff();
    const ad::RowVector e = (logits.row(s).array() - m).exp().matrix();
    probs.row(s) = e / e.sum();
  }
  spatial = unit_rows(std::move(spatial));
  temporal = unit_rows(std::move(temporal));
  probs = unit_rows(std::move(probs));

  DiagnosticReport r;
  r.align_st = alignment_loss(spatial, temporal, 2.0);
  r.uniform_t = uniformity_loss(temporal, 2.0);
  r.uniform_s = uniformity_loss(spatial, 2.0);
  r.uniform_logit = uniformity_loss(probs, 2.0);
  r.samples = static_cast<int>(n);
  return r;
}

nlohmann::json to_json(const DiagnosticReport& r) {
  return {{"align_ST", r.align_st},
          {"uniform_T", r.uniform_t},
          {"uniform_S", r.uniform_s},
          {"uniform_logit", r.uniform_logit},
          {"samples", r.samples}};
}

std::string format_table(const DiagnosticReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "| %-10s | %-12s | %-12s | %-12s | %-13s |\n"
                "|------------|--------------|--------------|--------------|---------------|\n"
                "| %-10d | %12.4f | %12.4f | %12.4f | %13.4f |\n",
                "Samples", "S-T align", "T uniform", "S uniform", "Logit uniform", r.samples, r.align_st, r.uniform_t,
                r.uniform_s, r.uniform_logit);
  return buf;
}

}  // namespace pcv::losses
