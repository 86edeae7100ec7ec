#pragma once

// Matching losses, classification loss and representation diagnostics.
// Value-level functions work on plain matrices; the *_loss variants record
// onto the autodiff tape.

#include "pcv/autodiff.hpp"

#include <nlohmann/json.hpp>

#include <span>
#include <string>

namespace pcv::losses {

using ad::Matrix;
using ad::Var;

enum class MatchLoss { kInfoNce, kL2, kCosine };

MatchLoss match_loss_from_string(const std::string& s);
const char* to_string(MatchLoss m);

struct InfoNceOptions {
  double temperature = 0.07;
  bool normalize = true;  // L2-normalize embeddings before the dot products
};

// Single sample: predictions/positives [M x D], negatives [Q x D]. Mean over
// rows of -log(exp(s+/tau) / (exp(s+/tau) + sum_j exp(s-_j/tau))).
double info_nce(const Matrix& predictions, const Matrix& positives, const Matrix& negatives,
                const InfoNceOptions& opt = {});

// Batched variant: rows of predictions/positives grouped per sample in blocks
// of rows_per_sample, negatives in blocks of negatives_per_sample. Returns
// the mean over samples of the per-sample loss.
Var info_nce_loss(const Var& predictions, const Var& positives, const Var& negatives, int batch,
                  const InfoNceOptions& opt = {});

double l2_match(const Matrix& predicted, const Matrix& target);
double cosine_match(const Matrix& predicted, const Matrix& target);
Var l2_match_loss(const Var& predicted, const Var& target);
Var cosine_match_loss(const Var& predicted, const Var& target);

double cross_entropy(const Matrix& logits, int label);

// (1/N) sum_i ||xs_i - xt_i||^alpha
double alignment_loss(const Matrix& xs, const Matrix& xt, double alpha = 2.0);
// log of the mean over i<j of exp(-t ||x_i - x_j||^2)
double uniformity_loss(const Matrix& x, double t = 2.0);

// Alignment between spatial and temporal representations plus uniformity of
// each representation, computed over an evaluation set.
struct DiagnosticReport {
  double align_st = 0.0;
  double uniform_t = 0.0;
  double uniform_s = 0.0;
  double uniform_logit = 0.0;
  int samples = 0;
};

// grids: one [T*M x D] token block per sample (frame-major). Spatial
// representation: max over frames, then mean over regions. Temporal: max
// over regions, then mean over frames. Logit representation: softmax rows.
// All three are L2-normalized before the metrics.
DiagnosticReport diagnose(std::span<const Matrix> grids, int frames, int regions, const Matrix& logits);

nlohmann::json to_json(const DiagnosticReport& r);
std::string format_table(const DiagnosticReport& r);

}  // namespace pcv::losses
