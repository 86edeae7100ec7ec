#pragma once

// Temporal-rolling set-abstraction encoder and the classification head.
//
// Frames are processed as a flat batch of B*T slots. At every layer, slot t
// aggregates support points of slot t around query points sampled from the
// rolled slot (t+1) mod T; the sampled query points then become slot t's
// points for the next layer, so deeper layers see progressively later frames.

#include "pcv/autodiff.hpp"
#include "pcv/geom.hpp"
#include "pcv/nn.hpp"
#include "pcv/video.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace pcv::encoder {

using ad::Matrix;
using ad::Var;

struct EncoderLayerConfig {
  int spatial_stride = 1;
  int k_neighbors = 1;
  std::vector<int> mlp_widths;
};

struct EncoderConfig {
  std::vector<EncoderLayerConfig> layers;
  int input_points = 0;
  int input_frames = 0;
  int output_channels = 0;
  nn::NormKind norm = nn::NormKind::kBatch;
  geom::FpsStart fps_start = geom::FpsStart::kFirstIndex;
  geom::RollBoundary roll = geom::RollBoundary::kCircular;

  // Point count per frame after the last layer.
  int regions() const;
  void validate() const;

  // 2048 x 24 input; strides 32/8/2; K 48/32/8; 1024 output channels.
  static EncoderConfig msr_default();
  // Desk-scale configuration used by the synthetic benchmark.
  static EncoderConfig tiny(int points = 128, int frames = 8);
};

nlohmann::json to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

// Encoder output for a batch: tokens are [B*T*M x D] ordered (b, t, m).
struct FeatureGrid {
  Var tokens;
  Matrix query_coords;  // [B*T*M x 3]
  int batch = 0;
  int frames = 0;
  int regions = 0;
  int channels = 0;

  // Tokens of one sample as a [T*M x D] value copy.
  Matrix sample(int b) const;
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(nn::ParameterStore& store, const EncoderConfig& cfg, std::mt19937_64& rng,
          const std::string& prefix = "encoder");

  FeatureGrid forward(std::span<const PointCloudVideo> videos, bool training) const;
  FeatureGrid forward(const PointCloudVideo& video, bool training) const;

  const EncoderConfig& config() const { return cfg_; }
  const nn::SharedMlp& mlp(std::size_t layer) const { return mlps_.at(layer); }

 private:
  EncoderConfig cfg_;
  std::vector<nn::SharedMlp> mlps_;
};

// One set-abstraction step: group k supports around every query, localize,
// concatenate support features, shared MLP, max-pool over the group.
// support_feats rows align with support_coords; absent means coordinates only.
Var set_abstraction(const geom::Points& support_coords, const std::optional<Var>& support_feats,
                    const geom::Points& query_coords, int k_neighbors, const nn::SharedMlp& mlp, bool training);

class ClassificationHead {
 public:
  ClassificationHead() = default;
  ClassificationHead(nn::ParameterStore& store, int in_channels, int num_classes, std::mt19937_64& rng,
                     int hidden = 512, double dropout = 0.5, const std::string& prefix = "head");

  // [B x num_classes] raw logits; spatial then temporal max-pool first.
  Var operator()(const FeatureGrid& grid, bool training, std::mt19937_64& rng) const;

  int num_classes() const { return num_classes_; }

 private:
  nn::Linear fc1_;
  nn::Linear fc2_;
  double dropout_ = 0.5;
  int num_classes_ = 0;
};

}  // namespace pcv::encoder
