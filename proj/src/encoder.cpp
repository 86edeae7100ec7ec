#include "pcv/encoder.hpp"

#include "pcv/errors.hpp"

#include <stdexcept>

namespace pcv::encoder {

namespace {

using geom::Index;
using geom::Points;

// Groups supports[s] around queries[s] for every slot s and runs the MLP.
// feats (optional) rows are the concatenation of all slots' supports.
Var abstract_slots(const std::vector<Points>& supports, const std::vector<Points>& queries, const std::optional<Var>& feats,
                   int k, const nn::SharedMlp& mlp, bool training) {
  Index total = 0;
  for (const auto& q : queries) total += q.rows() * k;

  Matrix rel(total, 3);
  std::vector<Index> gather;
  if (feats) gather.reserve(static_cast<std::size_t>(total));

  Index row = 0;
  Index support_offset = 0;
  for (std::size_t s = 0; s < supports.size(); ++s) {
    const auto nbr = geom::knn_group(queries[s], supports[s], k);
    for (Index q = 0; q < nbr.queries; ++q) {
      for (Index j = 0; j < k; ++j) {
        const Index idx = nbr.at(q, j);
        rel.row(row++) = supports[s].row(idx) - queries[s].row(q);
        if (feats) gather.push_back(support_offset + idx);
      }
    }
    support_offset += supports[s].rows();
  }

  Var input = ad::constant(std::move(rel));
  if (feats) input = ad::concat_cols(input, ad::gather_rows(*feats, std::move(gather)));
  return ad::segment_max(mlp(input, training), k);
}

void check_finite(const Var& v, std::size_t layer) {
  if (!v.value().allFinite()) {
    throw NumericalError("encoder layer " + std::to_string(layer + 1) + ": non-finite activation");
  }
}

}  // namespace

int EncoderConfig::regions() const {
  int n = input_points;
  for (const auto& l : layers) n /= l.spatial_stride;
  return n;
}

void EncoderConfig::validate() const {
  if (layers.empty()) throw ConfigError("encoder needs at least one layer");
  if (input_points < 1) throw ConfigError("input_points must be positive");
  if (input_frames < 2) throw ConfigError("input_frames must be at least 2");
  int n = input_points;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.spatial_stride < 1) throw ConfigError("spatial_stride must be >= 1");
    if (l.k_neighbors < 1) throw ConfigError("k_neighbors must be >= 1");
    if (l.mlp_widths.empty()) throw ConfigError("layer " + std::to_string(i + 1) + " has no MLP widths");
    for (int w : l.mlp_widths) {
      if (w < 1) throw ConfigError("MLP widths must be positive");
    }
    n /= l.spatial_stride;
    if (n < 1) throw ConfigError("layer " + std::to_string(i + 1) + " samples fewer than one point");
  }
  if (layers.back().mlp_widths.back() != output_channels) {
    throw ConfigError("output_channels must equal the last MLP width");
  }
}

EncoderConfig EncoderConfig::msr_default() {
  EncoderConfig cfg;
  cfg.input_points = 2048;
  cfg.input_frames = 24;
  cfg.output_channels = 1024;
  cfg.layers = {
      {32, 48, {64, 64, 128}},
      {8, 32, {128, 128, 256}},
      {2, 8, {256, 512, 1024}},
  };
  return cfg;
}

EncoderConfig EncoderConfig::tiny(int points, int frames) {
  EncoderConfig cfg;
  cfg.input_points = points;
  cfg.input_frames = frames;
  cfg.output_channels = 64;
  cfg.layers = {
      {4, 16, {16, 32}},
      {4, 8, {64}},
  };
  return cfg;
}

nlohmann::json to_json(const EncoderConfig& cfg) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : cfg.layers) {
    layers.push_back({{"spatial_stride", l.spatial_stride}, {"k_neighbors", l.k_neighbors}, {"mlp_widths", l.mlp_widths}});
  }
  return {
      {"layers", layers},
      {"input_points", cfg.input_points},
      {"input_frames", cfg.input_frames},
      {"output_channels", cfg.output_channels},
      {"norm", nn::to_string(cfg.norm)},
      {"fps_start", cfg.fps_start == geom::FpsStart::kCanonical ? "canonical" : "first"},
      {"roll", cfg.roll == geom::RollBoundary::kClamp ? "clamp" : "circular"},
  };
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig cfg;
  try {
    for (const auto& l : j.at("layers")) {
      cfg.layers.push_back({l.at("spatial_stride").get<int>(), l.at("k_neighbors").get<int>(),
                            l.at("mlp_widths").get<std::vector<int>>()});
    }
    cfg.input_points = j.at("input_points").get<int>();
    cfg.input_frames = j.at("input_frames").get<int>();
    cfg.output_channels = j.at("output_channels").get<int>();
    cfg.norm = nn::norm_kind_from_string(j.at("norm").get<std::string>());
    cfg.fps_start = j.at("fps_start").get<std::string>() == "canonical" ? geom::FpsStart::kCanonical
                                                                         : geom::FpsStart::kFirstIndex;
    cfg.roll = j.at("roll").get<std::string>() == "clamp" ? geom::RollBoundary::kClamp : geom::RollBoundary::kCircular;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad encoder config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

Matrix FeatureGrid::sample(int b) const {
  const Index per = static_cast<Index>(frames) * regions;
  return tokens.value().middleRows(b * per, per);
}

Encoder::Encoder(nn::ParameterStore& store, const EncoderConfig& cfg, std::mt19937_64& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  int in = 3;
  for (std::size_t i = 0; i < cfg_.layers.size(); ++i) {
    mlps_.emplace_back(store, prefix + ".layer" + std::to_string(i + 1) + ".mlp", in, cfg_.layers[i].mlp_widths,
                       cfg_.norm, rng);
    in = 3 + mlps_.back().out_channels();
  }
}

FeatureGrid Encoder::forward(const PointCloudVideo& video, bool training) const {
  return forward(std::span<const PointCloudVideo>(&video, 1), training);
}

FeatureGrid Encoder::forward(std::span<const PointCloudVideo> videos, bool training) const {
  if (videos.empty()) throw std::invalid_argument("encoder: empty batch");
  const int frames = cfg_.input_frames;
  for (const auto& v : videos) {
    if (v.num_frames() != frames) {
      throw std::invalid_argument("encoder: expected " + std::to_string(frames) + " frames, got " +
                                  std::to_string(v.num_frames()));
    }
    for (const auto& f : v.frames) {
      if (f.size() != cfg_.input_points) {
        throw std::invalid_argument("encoder: expected " + std::to_string(cfg_.input_points) + " points per frame, got " +
                                    std::to_string(f.size()));
      }
    }
  }

  const auto pairs = geom::temporal_roll_pairs(frames, cfg_.roll);
  const int batch = static_cast<int>(videos.size());
  std::vector<Points> slots;
  slots.reserve(static_cast<std::size_t>(batch * frames));
  for (const auto& v : videos) {
    for (const auto& f : v.frames) slots.push_back(f.coords);
  }

  std::optional<Var> feats;
  Index count = cfg_.input_points;
  for (std::size_t l = 0; l < cfg_.layers.size(); ++l) {
    const auto& layer = cfg_.layers[l];
    count /= layer.spatial_stride;
    std::vector<Points> queries(slots.size());
    for (int b = 0; b < batch; ++b) {
      for (const auto& [support, query] : pairs) {
        const auto& source = slots[static_cast<std::size_t>(b * frames + query)];
        const auto idx = geom::farthest_point_sample(source, count, std::nullopt, cfg_.fps_start);
        Points q(count, 3);
        for (Index i = 0; i < count; ++i) q.row(i) = source.row(idx[static_cast<std::size_t>(i)]);
        queries[static_cast<std::size_t>(b * frames + support)] = std::move(q);
      }
    }
    Var out = abstract_slots(slots, queries, feats, layer.k_neighbors, mlps_[l], training);
    check_finite(out, l);
    feats = std::move(out);
    slots = std::move(queries);
  }

  FeatureGrid grid;
  grid.tokens = *feats;
  grid.batch = batch;
  grid.frames = frames;
  grid.regions = static_cast<int>(count);
  grid.channels = cfg_.output_channels;
  grid.query_coords.resize(static_cast<Index>(slots.size()) * count, 3);
  for (std::size_t s = 0; s < slots.size(); ++s) grid.query_coords.middleRows(static_cast<Index>(s) * count, count) = slots[s];
  return grid;
}

Var set_abstraction(const geom::Points& support_coords, const std::optional<Var>& support_feats,
                    const geom::Points& query_coords, int k_neighbors, const nn::SharedMlp& mlp, bool training) {
  if (support_feats && support_feats->rows() != support_coords.rows()) {
    throw std::invalid_argument("set_abstraction: feature rows must match support points");
  }
  Var out = abstract_slots({support_coords}, {query_coords}, support_feats, k_neighbors, mlp, training);
  if (!out.value().allFinite()) throw NumericalError("set_abstraction: non-finite activation");
  return out;
}

ClassificationHead::ClassificationHead(nn::ParameterStore& store, int in_channels, int num_classes, std::mt19937_64& rng,
                                       int hidden, double dropout, const std::string& prefix)
    : fc1_(store, prefix + ".fc1", in_channels, hidden, rng),
      fc2_(store, prefix + ".fc2", hidden, num_classes, rng),
      dropout_(dropout),
      num_classes_(num_classes) {
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
}

Var ClassificationHead::operator()(const FeatureGrid& grid, bool training, std::mt19937_64& rng) const {
  Var pooled = ad::segment_max(ad::segment_max(grid.tokens, grid.regions), grid.frames);
  Var hidden = ad::dropout(ad::relu(fc1_(pooled)), dropout_, training, rng);
  return fc2_(hidden);
}

}  // namespace pcv::encoder
