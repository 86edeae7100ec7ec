#pragma once

// Named parameter registry and the small layer set shared by the encoder,
// the operator module and the classification head.

#include "pcv/autodiff.hpp"

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace pcv::nn {

using ad::Matrix;
using ad::Var;

struct Tensor {
  Var var;
  bool learnable = true;
};

// Ordered name -> tensor map. Non-learnable entries hold buffers such as
// running normalization statistics; they are checkpointed but not counted.
class ParameterStore {
 public:
  Var add(const std::string& name, Matrix value, bool learnable = true);

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Var& get(const std::string& name) const;
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  std::vector<Var> learnable(const std::string& prefix = "") const;
  std::vector<std::string> learnable_names(const std::string& prefix = "") const;

  // Exact number of learnable scalars whose name starts with prefix.
  std::int64_t count(const std::string& prefix = "") const;

  void zero_grad();
  void set_requires_grad(const std::string& prefix, bool on);

 private:
  std::map<std::string, Tensor> tensors_;
};

std::int64_t count_parameters(const ParameterStore& store);

enum class NormKind { kBatch, kLayer, kNone };

const char* to_string(NormKind kind);
NormKind norm_kind_from_string(const std::string& s);

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, int in, int out, std::mt19937_64& rng);

  Var operator()(const Var& x) const { return ad::linear(x, weight_, bias_); }

  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }

 private:
  Var weight_;
  Var bias_;
};

class Norm {
 public:
  Norm() = default;
  Norm(ParameterStore& store, const std::string& name, int channels, NormKind kind);

  Var operator()(const Var& x, bool training) const;

 private:
  NormKind kind_ = NormKind::kNone;
  Var gamma_;
  Var beta_;
  Var running_mean_;
  Var running_var_;
};

// Pointwise MLP: each stage is linear -> norm -> ReLU.
class SharedMlp {
 public:
  SharedMlp() = default;
  SharedMlp(ParameterStore& store, const std::string& name, int in, const std::vector<int>& widths, NormKind norm,
            std::mt19937_64& rng);

  Var operator()(Var x, bool training) const;

  int out_channels() const { return out_; }

 private:
  std::vector<Linear> linears_;
  std::vector<Norm> norms_;
  int out_ = 0;
};

Matrix uniform_init(int rows, int cols, double bound, std::mt19937_64& rng);
Matrix normal_init(int rows, int cols, double std, std::mt19937_64& rng);

}  // namespace pcv::nn
