#pragma once

// Temporal-to-spatial operator module: pooled sub-global features, a
// self-attention block over source tokens, the trigonometric spectral layer,
// and a cross-attention decoder driven by learnable masked target tokens.

#include "pcv/autodiff.hpp"
#include "pcv/encoder.hpp"
#include "pcv/nn.hpp"

#include <nlohmann/json.hpp>

#include <random>
#include <string>

namespace pcv::pde {

using ad::Matrix;
using ad::Var;

enum class Direction { kTemporalToSpatial, kSpatialToTemporal };

Direction direction_from_string(const std::string& s);
const char* to_string(Direction d);

enum class PositionalEncoding { kLearned, kSinusoidal };

struct PdeConfig {
  int d_model = 512;
  int heads = 8;
  int operators = 16;  // O: O/2 sine terms and O/2 cosine terms
  bool per_channel_weights = true;
  double spectral_init_std = 0.0;
  PositionalEncoding positional = PositionalEncoding::kLearned;
  bool use_mhsa = true;
  bool use_spectral = true;
  bool use_mhca = true;
  Direction direction = Direction::kTemporalToSpatial;

  void validate() const;
};

nlohmann::json to_json(const PdeConfig& cfg);
PdeConfig pde_config_from_json(const nlohmann::json& j);

// Per-sample max pools of a grid: temporal [B*T x D] and spatial [B*M x D].
struct SubGlobalFeatures {
  Var temporal;
  Var spatial;
};

SubGlobalFeatures pool_to_subglobal(const encoder::FeatureGrid& grid);

// x + sum_k w_sin[k] * sin(k x) + w_cos[k] * cos(k x), k = 1..rows(w).
// Weights are [O/2 x d] (per channel) or [O/2 x 1] (one scalar per frequency).
Var spectral_map(const Var& x, const Var& w_sin, const Var& w_cos);

// Q/K/V projections without bias, output projection with bias, residual on
// the query stream.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(nn::ParameterStore& store, const std::string& name, int d_model, int heads, std::mt19937_64& rng);

  // query [batch*nq x d], source [batch*nk x d] -> query + attn(query, source)
  Var operator()(const Var& query, const Var& source, int batch) const;

  const Var& w_query() const { return wq_; }
  const Var& w_key() const { return wk_; }
  const Var& w_value() const { return wv_; }
  const nn::Linear& output() const { return out_; }

 private:
  Var wq_;
  Var wk_;
  Var wv_;
  nn::Linear out_;
  int heads_ = 1;
};

struct PdeOutput {
  Var predicted;  // [B*n_target x D]
  Var target;     // [B*n_target x D]
  Var negatives;  // [B*T*M x D], the pre-pooling grid tokens
  int batch = 0;
  int target_tokens = 0;
  int negatives_per_sample = 0;
};

class PdeModule {
 public:
  PdeModule() = default;
  PdeModule(nn::ParameterStore& store, const PdeConfig& cfg, int channels, int frames, int regions, std::mt19937_64& rng,
            const std::string& prefix = "pde");

  PdeOutput forward(const encoder::FeatureGrid& grid) const;

  // Stage-level entry points on [batch*n x d_model] latents.
  Var self_attend(const Var& source_latent, int batch) const;
  Var cross_attend(const Var& mapped, int batch) const;

  const PdeConfig& config() const { return cfg_; }
  const Var& w_sin() const { return w_sin_; }
  const Var& w_cos() const { return w_cos_; }
  const Var& masked_tokens() const { return masked_; }
  const Var& positional_table() const { return pe_; }
  const nn::Linear& input_projection() const { return input_proj_; }
  const nn::Linear& output_projection() const { return output_proj_; }
  const MultiHeadAttention& mhsa() const { return mhsa_; }
  const MultiHeadAttention& mhca() const { return mhca_; }

 private:
  PdeConfig cfg_;
  int source_tokens_ = 0;
  int target_tokens_ = 0;
  nn::Linear input_proj_;
  nn::Linear output_proj_;
  MultiHeadAttention mhsa_;
  MultiHeadAttention mhca_;
  Var w_sin_;
  Var w_cos_;
  Var masked_;
  Var pe_;
};

Matrix sinusoidal_table(int rows, int d_model);

}  // namespace pcv::pde
