#include "pcv/pde.hpp"

#include "pcv/errors.hpp"

#include <cmath>
#include <stdexcept>

namespace pcv::pde {

using ad::Index;
using ad::Node;

Direction direction_from_string(const std::string& s) {
  if (s == "t_to_s") return Direction::kTemporalToSpatial;
  if (s == "s_to_t") return Direction::kSpatialToTemporal;
  throw ConfigError("invalid direction '" + s + "' (expected t_to_s or s_to_t)");
}

const char* to_string(Direction d) { return d == Direction::kTemporalToSpatial ? "t_to_s" : "s_to_t"; }

void PdeConfig::validate() const {
  if (d_model < 1 || heads < 1 || d_model % heads != 0) throw ConfigError("d_model must be a positive multiple of heads");
  if (operators < 2 || operators % 2 != 0) throw ConfigError("operator count must be even and >= 2");
}

nlohmann::json to_json(const PdeConfig& cfg) {
  return {
      {"d_model", cfg.d_model},
      {"heads", cfg.heads},
      {"operators", cfg.operators},
      {"per_channel_weights", cfg.per_channel_weights},
      {"spectral_init_std", cfg.spectral_init_std},
      {"positional", cfg.positional == PositionalEncoding::kLearned ? "learned" : "sinusoidal"},
      {"use_mhsa", cfg.use_mhsa},
      {"use_spectral", cfg.use_spectral},
      {"use_mhca", cfg.use_mhca},
      {"direction", to_string(cfg.direction)},
  };
}

PdeConfig pde_config_from_json(const nlohmann::json& j) {
  PdeConfig cfg;
  try {
    cfg.d_model = j.at("d_model").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.operators = j.at("operators").get<int>();
    cfg.per_channel_weights = j.at("per_channel_weights").get<bool>();
    cfg.spectral_init_std = j.at("spectral_init_std").get<double>();
    cfg.positional = j.at("positional").get<std::string>() == "sinusoidal" ? PositionalEncoding::kSinusoidal
                                                                           : PositionalEncoding::kLearned;
    cfg.use_mhsa = j.at("use_mhsa").get<bool>();
    cfg.use_spectral = j.at("use_spectral").get<bool>();
    cfg.use_mhca = j.at("use_mhca").get<bool>();
    cfg.direction = direction_from_string(j.at("direction").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad pde config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

SubGlobalFeatures pool_to_subglobal(const encoder::FeatureGrid& grid) {
  const Index t = grid.frames;
  const Index m = grid.regions;
  std::vector<Index> region_major;
  region_major.reserve(static_cast<std::size_t>(grid.batch * t * m));
  for (Index b = 0; b < grid.batch; ++b) {
    for (Index r = 0; r < m; ++r) {
      for (Index f = 0; f < t; ++f) region_major.push_back(b * t * m + f * m + r);
    }
  }
  return {ad::segment_max(grid.tokens, m), ad::segment_max(ad::gather_rows(grid.tokens, std::move(region_major)), t)};
}

Var spectral_map(const Var& x, const Var& w_sin, const Var& w_cos) {
  const Index half = w_sin.rows();
  const bool per_channel = w_sin.cols() != 1 || x.cols() == 1;
  if (w_cos.rows() != half || w_cos.cols() != w_sin.cols() || (per_channel && w_sin.cols() != x.cols())) {
    throw std::invalid_argument("spectral_map: weight shape mismatch");
  }
  const auto& xv = x.value();
  const auto& ws = w_sin.value();
  const auto& wc = w_cos.value();
  Matrix out = xv;
  for (Index k = 1; k <= half; ++k) {
    const Matrix kx = static_cast<double>(k) * xv;
    const Matrix s = kx.array().sin().matrix();
    const Matrix c = kx.array().cos().matrix();
    if (per_channel) {
      out.array() += s.array().rowwise() * ws.row(k - 1).array() + c.array().rowwise() * wc.row(k - 1).array();
    } else {
      out.array() += ws(k - 1, 0) * s.array() + wc(k - 1, 0) * c.array();
    }
  }
  return ad::make_result(std::move(out), {x, w_sin, w_cos}, [half, per_channel](Node& self) {
    Node& xi = *self.inputs[0];
    Node& si = *self.inputs[1];
    Node& ci = *self.inputs[2];
    const auto& xv = xi.value;
    Matrix dx = self.grad;
    Matrix dws = Matrix::Zero(si.value.rows(), si.value.cols());
    Matrix dwc = Matrix::Zero(ci.value.rows(), ci.value.cols());
    for (Index k = 1; k <= half; ++k) {
      const double kd = static_cast<double>(k);
      const Matrix kx = kd * xv;
      const Matrix s = kx.array().sin().matrix();
      const Matrix c = kx.array().cos().matrix();
      const Matrix gs = self.grad.cwiseProduct(s);
      const Matrix gc = self.grad.cwiseProduct(c);
      if (per_channel) {
        dws.row(k - 1) = gs.colwise().sum();
        dwc.row(k - 1) = gc.colwise().sum();
        dx.array() += kd * (gc.array().rowwise() * si.value.row(k - 1).array() -
                            gs.array().rowwise() * ci.value.row(k - 1).array());
      } else {
        dws(k - 1, 0) = gs.sum();
        dwc(k - 1, 0) = gc.sum();
        dx.array() += kd * (si.value(k - 1, 0) * gc.array() - ci.value(k - 1, 0) * gs.array());
      }
    }
    xi.accumulate(dx);
    si.accumulate(dws);
    ci.accumulate(dwc);
  });
}

MultiHeadAttention::MultiHeadAttention(nn::ParameterStore& store, const std::string& name, int d_model, int heads,
                                       std::mt19937_64& rng)
    : heads_(heads) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
  wq_ = store.add(name + ".w_query", nn::uniform_init(d_model, d_model, bound, rng));
  wk_ = store.add(name + ".w_key", nn::uniform_init(d_model, d_model, bound, rng));
  wv_ = store.add(name + ".w_value", nn::uniform_init(d_model, d_model, bound, rng));
  out_ = nn::Linear(store, name + ".out", d_model, d_model, rng);
}

Var MultiHeadAttention::operator()(const Var& query, const Var& source, int batch) const {
  Var heads = ad::attention(ad::matmul(query, wq_), ad::matmul(source, wk_), ad::matmul(source, wv_), batch, heads_);
  return ad::add(query, out_(heads));
}

Matrix sinusoidal_table(int rows, int d_model) {
  Matrix table(rows, d_model);
  for (int p = 0; p < rows; ++p) {
    for (int i = 0; i < d_model; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d_model);
      // Positions are 1-based frame indices.
      const double angle = static_cast<double>(p + 1) * freq;
      table(p, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return table;
}

PdeModule::PdeModule(nn::ParameterStore& store, const PdeConfig& cfg, int channels, int frames, int regions,
                     std::mt19937_64& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  const bool forward_dir = cfg_.direction == Direction::kTemporalToSpatial;
  source_tokens_ = forward_dir ? frames : regions;
  target_tokens_ = forward_dir ? regions : frames;
  const int d = cfg_.d_model;

  input_proj_ = nn::Linear(store, prefix + ".input_proj", channels, d, rng);
  mhsa_ = MultiHeadAttention(store, prefix + ".mhsa", d, cfg_.heads, rng);
  const int half = cfg_.operators / 2;
  const int wcols = cfg_.per_channel_weights ? d : 1;
  if (cfg_.spectral_init_std > 0.0) {
    w_sin_ = store.add(prefix + ".spectral.w_sin", nn::normal_init(half, wcols, cfg_.spectral_init_std, rng));
    w_cos_ = store.add(prefix + ".spectral.w_cos", nn::normal_init(half, wcols, cfg_.spectral_init_std, rng));
  } else {
    w_sin_ = store.add(prefix + ".spectral.w_sin", Matrix::Zero(half, wcols));
    w_cos_ = store.add(prefix + ".spectral.w_cos", Matrix::Zero(half, wcols));
  }
  masked_ = store.add(prefix + ".masked_tokens", nn::normal_init(target_tokens_, d, 0.02, rng));
  mhca_ = MultiHeadAttention(store, prefix + ".mhca", d, cfg_.heads, rng);
  output_proj_ = nn::Linear(store, prefix + ".output_proj", d, channels, rng);
  if (cfg_.positional == PositionalEncoding::kLearned) {
    pe_ = store.add(prefix + ".frame_pe", nn::normal_init(source_tokens_, d, 0.02, rng));
  } else {
    pe_ = store.add(prefix + ".frame_pe", sinusoidal_table(source_tokens_, d), false);
  }
}

Var PdeModule::self_attend(const Var& source_latent, int batch) const {
  Var x = ad::add(source_latent, ad::tile_rows(pe_, batch));
  return mhsa_(x, x, batch);
}

Var PdeModule::cross_attend(const Var& mapped, int batch) const {
  return mhca_(ad::tile_rows(masked_, batch), mapped, batch);
}

PdeOutput PdeModule::forward(const encoder::FeatureGrid& grid) const {
  const bool forward_dir = cfg_.direction == Direction::kTemporalToSpatial;
  const int source_count = forward_dir ? grid.frames : grid.regions;
  const int target_count = forward_dir ? grid.regions : grid.frames;
  if (source_count != source_tokens_ || target_count != target_tokens_) {
    throw std::invalid_argument("pde: grid token counts do not match module configuration");
  }
  const int batch = grid.batch;
  auto pooled = pool_to_subglobal(grid);
  const Var& source = forward_dir ? pooled.temporal : pooled.spatial;
  const Var& target = forward_dir ? pooled.spatial : pooled.temporal;

  Var x = input_proj_(source);
  if (cfg_.use_mhsa) x = self_attend(x, batch);
  if (cfg_.use_spectral) x = spectral_map(x, w_sin_, w_cos_);

  Var decoded;
  if (cfg_.use_mhca) {
    decoded = cross_attend(x, batch);
  } else {
    decoded = ad::add(ad::tile_rows(masked_, batch), ad::repeat_rows(ad::segment_mean(x, source_count), target_count));
  }

  PdeOutput out;
  out.predicted = output_proj_(decoded);
  out.target = target;
  out.negatives = grid.tokens;
  out.batch = batch;
  out.target_tokens = target_count;
  out.negatives_per_sample = grid.frames * grid.regions;
  return out;
}

}  // namespace pcv::pde
