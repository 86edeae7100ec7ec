#include "pcv/nn.hpp"

#include "pcv/errors.hpp"

#include <cmath>
#include <stdexcept>

namespace pcv::nn {

Var ParameterStore::add(const std::string& name, Matrix value, bool learnable) {
  if (tensors_.count(name) != 0) throw std::logic_error("duplicate parameter name: " + name);
  Var v(std::move(value), learnable);
  tensors_.emplace(name, Tensor{v, learnable});
  return v;
}

const Var& ParameterStore::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second.var;
}

std::vector<Var> ParameterStore::learnable(const std::string& prefix) const {
  std::vector<Var> out;
  for (const auto& [name, t] : tensors_) {
    if (t.learnable && name.starts_with(prefix)) out.push_back(t.var);
  }
  return out;
}

std::vector<std::string> ParameterStore::learnable_names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, t] : tensors_) {
    if (t.learnable && name.starts_with(prefix)) out.push_back(name);
  }
  return out;
}

std::int64_t ParameterStore::count(const std::string& prefix) const {
  std::int64_t n = 0;
  for (const auto& [name, t] : tensors_) {
    if (t.learnable && name.starts_with(prefix)) n += static_cast<std::int64_t>(t.var.value().size());
  }
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : tensors_) t.var.zero_grad();
}

void ParameterStore::set_requires_grad(const std::string& prefix, bool on) {
  for (auto& [name, t] : tensors_) {
    if (t.learnable && name.starts_with(prefix)) t.var.set_requires_grad(on);
  }
}

std::int64_t count_parameters(const ParameterStore& store) { return store.count(); }

const char* to_string(NormKind kind) {
  switch (kind) {
    case NormKind::kBatch: return "batch";
    case NormKind::kLayer: return "layer";
    case NormKind::kNone: return "none";
  }
  return "none";
}

NormKind norm_kind_from_string(const std::string& s) {
  if (s == "batch") return NormKind::kBatch;
  if (s == "layer") return NormKind::kLayer;
  if (s == "none") return NormKind::kNone;
  throw ConfigError("unknown normalization kind: " + s);
}

Matrix uniform_init(int rows, int cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix normal_init(int rows, int cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Linear::Linear(ParameterStore& store, const std::string& name, int in, int out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight_ = store.add(name + ".weight", uniform_init(in, out, bound, rng));
  bias_ = store.add(name + ".bias", uniform_init(1, out, bound, rng));
}

Norm::Norm(ParameterStore& store, const std::string& name, int channels, NormKind kind) : kind_(kind) {
  if (kind == NormKind::kNone) return;
  gamma_ = store.add(name + ".gamma", Matrix::Ones(1, channels));
  beta_ = store.add(name + ".beta", Matrix::Zero(1, channels));
  if (kind == NormKind::kBatch) {
    running_mean_ = store.add(name + ".running_mean", Matrix::Zero(1, channels), false);
    running_var_ = store.add(name + ".running_var", Matrix::Ones(1, channels), false);
  }
}

Var Norm::operator()(const Var& x, bool training) const {
  switch (kind_) {
    case NormKind::kBatch: {
      // Buffers are shared through the store, so updating through a copy of
      // the handle mutates the registered tensor.
      Var mean = running_mean_;
      Var var = running_var_;
      return ad::batch_norm(x, gamma_, beta_, mean.mutable_value(), var.mutable_value(), training);
    }
    case NormKind::kLayer:
      return ad::layer_norm(x, gamma_, beta_);
    case NormKind::kNone:
      return x;
  }
  return x;
}

SharedMlp::SharedMlp(ParameterStore& store, const std::string& name, int in, const std::vector<int>& widths,
                     NormKind norm, std::mt19937_64& rng) {
  if (widths.empty()) throw ConfigError("shared MLP needs at least one width");
  int prev = in;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] <= 0) throw ConfigError("MLP widths must be positive");
    const std::string stage = name + "." + std::to_string(i);
    linears_.emplace_back(store, stage + ".linear", prev, widths[i], rng);
    norms_.emplace_back(store, stage + ".norm", widths[i], norm);
    prev = widths[i];
  }
  out_ = prev;
}

Var SharedMlp::operator()(Var x, bool training) const {
  for (std::size_t i = 0; i < linears_.size(); ++i) x = ad::relu(norms_[i](linears_[i](x), training));
  return x;
}

}  // namespace pcv::nn
