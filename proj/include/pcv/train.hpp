#pragma once

// Training regimes (pretrain, finetune, linear probe, end-to-end),
// evaluation, diagnostics and model reports.

#include "pcv/checkpoint.hpp"
#include "pcv/data.hpp"
#include "pcv/encoder.hpp"
#include "pcv/losses.hpp"
#include "pcv/nn.hpp"
#include "pcv/pde.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace pcv::train {

enum class Mode { kPretrain, kFinetune, kProbe, kE2e, kEval, kDiagnose, kSynthData, kReport };

Mode mode_from_string(const std::string& s);
const char* to_string(Mode m);

struct OptimizerConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int epochs = 0;  // 0: regime default (30, or 60 for e2e)
  int batch_size = 16;
  bool cosine_schedule = true;
};

struct RunConfig {
  Mode mode = Mode::kPretrain;
  std::string data_root;
  std::string manifest;  // default: <data_root>/manifest.jsonl
  encoder::EncoderConfig encoder = encoder::EncoderConfig::msr_default();
  pde::PdeConfig pde;
  losses::MatchLoss loss = losses::MatchLoss::kInfoNce;
  double tau = 0.07;
  bool normalize_embeddings = true;
  OptimizerConfig optim;
  double lambda = 1.0;
  int num_classes = 0;  // 0: taken from the manifest (20 for reports)
  int head_hidden = 512;
  double head_dropout = 0.5;
  std::uint64_t seed = 0;
  std::vector<std::string> checkpoint_in;
  std::string out = "runs/default";
  bool eval_every_epoch = true;
  bool verbose = false;  // per-epoch progress on stderr
  data::SynthConfig synth;

  int epochs() const;
  std::filesystem::path manifest_path() const;
  void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> eval_accuracy;
  double wall_time = 0.0;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::vector<EpochRecord> history;
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  std::int64_t trained_parameters = 0;
};

// Encoder, optional operator module and optional classification head over
// one shared parameter store (prefixes "encoder.", "pde.", "head.").
struct ModelSpec {
  encoder::EncoderConfig encoder;
  std::optional<pde::PdeConfig> pde;
  int num_classes = 0;  // 0: no head
  int head_hidden = 512;
  double head_dropout = 0.5;
};

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

class Model {
 public:
  Model(const ModelSpec& spec, std::uint64_t seed);

  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }
  const ModelSpec& spec() const { return spec_; }
  const encoder::Encoder& encoder() const { return encoder_; }
  const pde::PdeModule* pde() const { return pde_ ? &*pde_ : nullptr; }
  const encoder::ClassificationHead* head() const { return head_ ? &*head_ : nullptr; }

  checkpoint::Checkpoint snapshot(const nlohmann::json& run_config = nullptr) const;

 private:
  ModelSpec spec_;
  nn::ParameterStore store_;
  encoder::Encoder encoder_;
  std::optional<pde::PdeModule> pde_;
  std::optional<encoder::ClassificationHead> head_;
};

// Decoupled-weight-decay Adam with optional cosine decay.
class AdamW {
 public:
  AdamW(std::vector<std::string> names, const nn::ParameterStore& store, double lr, double weight_decay,
        std::int64_t total_steps, bool cosine);

  void step();
  double current_lr() const;

 private:
  struct Slot {
    std::string name;
    nn::Var param;
    ad::Matrix m;
    ad::Matrix v;
    bool decay;
  };
  std::vector<Slot> slots_;
  double lr_;
  double weight_decay_;
  std::int64_t total_steps_;
  bool cosine_;
  std::int64_t t_ = 0;
};

// In-memory dataset: normalized videos resampled to the encoder's point count.
struct LoadedSplit {
  std::vector<PointCloudVideo> videos;
  std::vector<int> labels;
};

LoadedSplit load_split(const data::Manifest& manifest, data::Split split, int points);

struct Objective {
  bool match = false;     // operator-module matching loss
  bool classify = false;  // cross-entropy through the head
  double lambda = 1.0;    // weight of the matching term when both are on
  bool encoder_frozen = false;
  losses::MatchLoss loss = losses::MatchLoss::kInfoNce;
  losses::InfoNceOptions info_nce;
};

struct StepLoss {
  ad::Var total;
  std::optional<double> match;
  std::optional<double> classify;
};

// Builds the scalar training objective for one batch of clips.
StepLoss objective(const Model& model, std::span<const PointCloudVideo> clips, std::span<const int> labels,
                   const Objective& obj, bool training, std::mt19937_64& rng);

TrainResult run_pretrain(const RunConfig& cfg);
TrainResult run_finetune(const RunConfig& cfg);
TrainResult run_probe(const RunConfig& cfg);
TrainResult run_e2e(const RunConfig& cfg);

struct EvalReport {
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  int samples = 0;
  double mean_accuracy = 0.0;  // over checkpoints
  double std_accuracy = 0.0;
  std::vector<double> run_accuracies;
};

nlohmann::json to_json(const EvalReport& r);

// Uniform-cover clips per video, logits averaged across clips.
EvalReport evaluate(const Model& model, const LoadedSplit& split);
// Evaluates every checkpoint in cfg.checkpoint_in; accuracy fields refer to
// the first one, mean/std cover all.
EvalReport run_eval(const RunConfig& cfg);

// Diagnostics over the test split. With no checkpoint the model is freshly
// initialized from cfg and cfg.seed.
losses::DiagnosticReport run_diagnose(const RunConfig& cfg);
losses::DiagnosticReport diagnose_model(const Model& model, const LoadedSplit& split);

struct ModelReport {
  std::int64_t encoder = 0;
  std::int64_t pde = 0;
  std::int64_t head = 0;
  std::int64_t total = 0;  // encoder + pde
};

nlohmann::json to_json(const ModelReport& r);
ModelReport report_model(const RunConfig& cfg);

std::filesystem::path checkpoint_path(const RunConfig& cfg);
std::filesystem::path metrics_path(const RunConfig& cfg);

}  // namespace pcv::train
