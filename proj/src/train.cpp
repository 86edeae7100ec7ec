#include "pcv/train.hpp"

#include "pcv/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <limits>
#include <numeric>

namespace pcv::train {

namespace fs = std::filesystem;
using ad::Index;
using ad::Matrix;
using ad::Var;

namespace {

constexpr int kEvalBatch = 32;

double elapsed_seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

class MetricsLog {
 public:
  explicit MetricsLog(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    out_.open(path, std::ios::trunc);
    if (!out_) throw DataError(DataErrorCode::kIo, "cannot write " + path.string());
  }

  void append(const nlohmann::json& record) { out_ << record.dump() << '\n' << std::flush; }

 private:
  std::ofstream out_;
};

nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"wall_time", r.wall_time}};
  if (r.eval_accuracy) j["eval_accuracy"] = *r.eval_accuracy;
  return j;
}

// Writes parameter norms and the offending loss before aborting.
[[noreturn]] void abort_non_finite(const RunConfig& cfg, const Model& model, int epoch, std::int64_t step, double loss,
                                   const std::string& where = "loss") {
  nlohmann::json dump = {{"epoch", epoch},
                         {"step", step},
                         {"where", where},
                         {"loss", std::isfinite(loss) ? nlohmann::json(loss) : nlohmann::json("non-finite")}};
  nlohmann::json norms = nlohmann::json::object();
  for (const auto& [name, t] : model.store().tensors()) {
    const double n = t.var.value().norm();
    norms[name] = std::isfinite(n) ? nlohmann::json(n) : nlohmann::json("non-finite");
  }
  dump["parameter_norms"] = norms;
  const fs::path path = fs::path(cfg.out) / "nan_dump.json";
  fs::create_directories(path.parent_path());
  std::ofstream(path) << dump.dump(2) << '\n';
  throw NumericalError("non-finite " + where + " at epoch " + std::to_string(epoch) + ", step " +
                       std::to_string(step) + "; state dumped to " + path.string());
}

std::vector<Matrix> clip_logits(const Model& model, const std::vector<PointCloudVideo>& clips) {
  ad::NoGradGuard no_grad;
  std::mt19937_64 unused(0);
  std::vector<Matrix> out;
  for (std::size_t start = 0; start < clips.size(); start += kEvalBatch) {
    const std::size_t n = std::min<std::size_t>(kEvalBatch, clips.size() - start);
    const auto grid = model.encoder().forward(std::span(clips).subspan(start, n), false);
    const Var logits = (*model.head())(grid, false, unused);
    for (std::size_t i = 0; i < n; ++i) out.push_back(logits.value().row(static_cast<Index>(i)));
  }
  return out;
}

struct Regime {
  Objective objective;
  std::vector<std::string> trainable;  // prefixes
};

TrainResult train_loop(Model& model, const RunConfig& cfg, const Regime& regime, const LoadedSplit& train_split,
                       const LoadedSplit* test_split) {
  const int epochs = cfg.epochs();
  const int frames = model.spec().encoder.input_frames;
  const std::size_t batch = static_cast<std::size_t>(cfg.optim.batch_size);
  if (train_split.videos.empty()) throw DataError(DataErrorCode::kEmptySplit, "train split is empty");

  std::vector<std::string> names;
  for (const auto& prefix : regime.trainable) {
    const auto n = model.store().learnable_names(prefix);
    names.insert(names.end(), n.begin(), n.end());
  }
  if (regime.objective.encoder_frozen) model.store().set_requires_grad("encoder.", false);

  const std::int64_t steps_per_epoch =
      static_cast<std::int64_t>((train_split.videos.size() + batch - 1) / batch);
  AdamW optimizer(names, model.store(), cfg.optim.lr, cfg.optim.weight_decay, steps_per_epoch * epochs,
                  cfg.optim.cosine_schedule);

  std::int64_t trained = 0;
  for (const auto& name : names) trained += model.store().get(name).value().size();

  MetricsLog log(metrics_path(cfg));
  std::mt19937_64 data_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);
  const auto start = std::chrono::steady_clock::now();

  TrainResult result;
  result.trained_parameters = trained;
  std::vector<std::size_t> order(train_split.videos.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::int64_t step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), data_rng);
    double loss_sum = 0.0;
    int loss_count = 0;
    for (std::size_t s = 0; s < order.size(); s += batch) {
      const std::size_t n = std::min(batch, order.size() - s);
      std::vector<PointCloudVideo> clips;
      std::vector<int> labels;
      clips.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = order[s + i];
        auto c = data::clip_sample(train_split.videos[idx], frames, data::ClipMode::kRandomStart, data_rng());
        clips.push_back(std::move(c.front()));
        labels.push_back(train_split.labels[idx]);
      }
      StepLoss loss;
      try {
        loss = objective(model, clips, labels, regime.objective, true, dropout_rng);
      } catch (const NumericalError& e) {
        abort_non_finite(cfg, model, epoch, step, std::numeric_limits<double>::quiet_NaN(), e.what());
      }
      const double value = loss.total.item();
      if (!std::isfinite(value)) abort_non_finite(cfg, model, epoch, step, value);
      loss.total.backward();
      optimizer.step();
      model.store().zero_grad();
      loss_sum += value;
      ++loss_count;
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / std::max(loss_count, 1);
    const bool last = epoch + 1 == epochs;
    if (regime.objective.classify && test_split != nullptr && !test_split->videos.empty() &&
        (cfg.eval_every_epoch || last)) {
      rec.eval_accuracy = evaluate(model, *test_split).accuracy;
      result.best_accuracy = std::max(result.best_accuracy, *rec.eval_accuracy);
      if (last) result.final_accuracy = *rec.eval_accuracy;
    }
    rec.wall_time = elapsed_seconds(start);
    log.append(to_json(rec));
    if (cfg.verbose) std::cerr << to_json(rec).dump() << '\n';
    result.history.push_back(rec);
  }

  if (regime.objective.encoder_frozen) model.store().set_requires_grad("encoder.", true);
  result.checkpoint = checkpoint_path(cfg);
  checkpoint::save(result.checkpoint, model.snapshot(to_json(cfg)));
  log.append({{"summary",
               {{"best_accuracy", result.best_accuracy},
                {"final_accuracy", result.final_accuracy},
                {"param_count", trained},
                {"seed", cfg.seed},
                {"mode", to_string(cfg.mode)}}}});
  return result;
}

data::Manifest open_manifest(const RunConfig& cfg) { return data::load_manifest(cfg.manifest_path()); }

Objective objective_from(const RunConfig& cfg) {
  Objective o;
  o.loss = cfg.loss;
  o.lambda = cfg.lambda;
  o.info_nce.temperature = cfg.tau;
  o.info_nce.normalize = cfg.normalize_embeddings;
  return o;
}

int classes_for(const RunConfig& cfg, const data::Manifest& manifest) {
  if (cfg.num_classes > 0 && cfg.num_classes != manifest.num_classes) {
    throw DataError(DataErrorCode::kNonContiguousLabels, "manifest has " + std::to_string(manifest.num_classes) +
                                                             " classes but num_classes=" + std::to_string(cfg.num_classes));
  }
  return manifest.num_classes;
}

checkpoint::Checkpoint load_first_checkpoint(const RunConfig& cfg) {
  if (cfg.checkpoint_in.empty()) throw ConfigError("this mode requires --checkpoint");
  return checkpoint::load(cfg.checkpoint_in.front());
}

ModelSpec spec_from_checkpoint(const checkpoint::Checkpoint& ckpt) {
  if (!ckpt.config.contains("model")) throw DataError(DataErrorCode::kBadHeader, "checkpoint has no model config");
  return model_spec_from_json(ckpt.config.at("model"));
}

// Encoder weights from a pretrained checkpoint plus a fresh head.
Model encoder_with_head(const RunConfig& cfg, int classes) {
  const auto ckpt = load_first_checkpoint(cfg);
  if (!ckpt.has_prefix("encoder.")) throw DataError(DataErrorCode::kBadHeader, "checkpoint has no encoder parameters");
  ModelSpec spec;
  spec.encoder = spec_from_checkpoint(ckpt).encoder;
  spec.num_classes = classes;
  spec.head_hidden = cfg.head_hidden;
  spec.head_dropout = cfg.head_dropout;
  Model model(spec, cfg.seed);
  checkpoint::restore(ckpt, model.store(), "encoder.");
  return model;
}

void check_labels(const LoadedSplit& split, int classes) {
  for (int l : split.labels) {
    if (l < 0 || l >= classes) {
      throw DataError(DataErrorCode::kNonContiguousLabels,
                      "label " + std::to_string(l) + " outside head width " + std::to_string(classes));
    }
  }
}

}  // namespace

Mode mode_from_string(const std::string& s) {
  if (s == "pretrain") return Mode::kPretrain;
  if (s == "finetune") return Mode::kFinetune;
  if (s == "probe") return Mode::kProbe;
  if (s == "e2e") return Mode::kE2e;
  if (s == "eval") return Mode::kEval;
  if (s == "diagnose") return Mode::kDiagnose;
  if (s == "synth-data") return Mode::kSynthData;
  if (s == "report") return Mode::kReport;
  throw ConfigError("unknown mode: " + s);
}

const char* to_string(Mode m) {
  switch (m) {
    case Mode::kPretrain: return "pretrain";
    case Mode::kFinetune: return "finetune";
    case Mode::kProbe: return "probe";
    case Mode::kE2e: return "e2e";
    case Mode::kEval: return "eval";
    case Mode::kDiagnose: return "diagnose";
    case Mode::kSynthData: return "synth-data";
    case Mode::kReport: return "report";
  }
  return "pretrain";
}

int RunConfig::epochs() const {
  if (optim.epochs > 0) return optim.epochs;
  return mode == Mode::kE2e ? 60 : 30;
}

fs::path RunConfig::manifest_path() const {
  if (!manifest.empty()) return manifest;
  if (data_root.empty()) throw ConfigError("either data_root or manifest must be set");
  return fs::path(data_root) / "manifest.jsonl";
}

void RunConfig::validate() const {
  encoder.validate();
  pde.validate();
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (!(optim.lr > 0.0)) throw ConfigError("lr must be positive");
  if (optim.weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (optim.epochs < 0) throw ConfigError("epochs must be non-negative");
  if (optim.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
  if (head_hidden < 1) throw ConfigError("head_hidden must be positive");
  if (head_dropout < 0.0 || head_dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  if (num_classes < 0) throw ConfigError("num_classes must be non-negative");
}

nlohmann::json to_json(const RunConfig& cfg) {
  return {
      {"mode", to_string(cfg.mode)},
      {"data_root", cfg.data_root},
      {"manifest", cfg.manifest},
      {"encoder", encoder::to_json(cfg.encoder)},
      {"pde", pde::to_json(cfg.pde)},
      {"loss", losses::to_string(cfg.loss)},
      {"tau", cfg.tau},
      {"normalize_embeddings", cfg.normalize_embeddings},
      {"optimizer",
       {{"type", "adamw"},
        {"lr", cfg.optim.lr},
        {"weight_decay", cfg.optim.weight_decay},
        {"epochs", cfg.epochs()},
        {"batch_size", cfg.optim.batch_size},
        {"schedule", cfg.optim.cosine_schedule ? "cosine" : "constant"}}},
      {"lambda", cfg.lambda},
      {"num_classes", cfg.num_classes},
      {"head_hidden", cfg.head_hidden},
      {"head_dropout", cfg.head_dropout},
      {"seed", cfg.seed},
      {"checkpoint_in", cfg.checkpoint_in},
      {"out", cfg.out},
  };
}

nlohmann::json to_json(const ModelSpec& spec) {
  return {
      {"encoder", encoder::to_json(spec.encoder)},
      {"pde", spec.pde ? pde::to_json(*spec.pde) : nlohmann::json(nullptr)},
      {"num_classes", spec.num_classes},
      {"head_hidden", spec.head_hidden},
      {"head_dropout", spec.head_dropout},
  };
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec spec;
  try {
    spec.encoder = encoder::encoder_config_from_json(j.at("encoder"));
    if (!j.at("pde").is_null()) spec.pde = pde::pde_config_from_json(j.at("pde"));
    spec.num_classes = j.at("num_classes").get<int>();
    spec.head_hidden = j.at("head_hidden").get<int>();
    spec.head_dropout = j.at("head_dropout").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrorCode::kBadHeader, std::string("bad model spec: ") + e.what());
  }
  return spec;
}

Model::Model(const ModelSpec& spec, std::uint64_t seed) : spec_(spec) {
  std::mt19937_64 rng(seed);
  encoder_ = encoder::Encoder(store_, spec_.encoder, rng, "encoder");
  if (spec_.pde) {
    pde_.emplace(store_, *spec_.pde, spec_.encoder.output_channels, spec_.encoder.input_frames, spec_.encoder.regions(),
                 rng, "pde");
  }
  if (spec_.num_classes > 0) {
    head_.emplace(store_, spec_.encoder.output_channels, spec_.num_classes, rng, spec_.head_hidden, spec_.head_dropout,
                  "head");
  }
}

checkpoint::Checkpoint Model::snapshot(const nlohmann::json& run_config) const {
  return checkpoint::snapshot({{"model", to_json(spec_)}, {"run", run_config}}, store_);
}

AdamW::AdamW(std::vector<std::string> names, const nn::ParameterStore& store, double lr, double weight_decay,
             std::int64_t total_steps, bool cosine)
    : lr_(lr), weight_decay_(weight_decay), total_steps_(std::max<std::int64_t>(total_steps, 1)), cosine_(cosine) {
  for (auto& name : names) {
    Var p = store.get(name);
    const bool decay = name.ends_with(".weight") || name.ends_with(".w_query") || name.ends_with(".w_key") ||
                       name.ends_with(".w_value");
    slots_.push_back({name, p, Matrix::Zero(p.rows(), p.cols()), Matrix::Zero(p.rows(), p.cols()), decay});
  }
}

double AdamW::current_lr() const {
  if (!cosine_) return lr_;
  const double progress = std::min(1.0, static_cast<double>(t_) / static_cast<double>(total_steps_));
  return 0.5 * lr_ * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step() {
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEps = 1e-8;
  const double lr = current_lr();
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    const Matrix& g = s.param.grad();
    s.m = kBeta1 * s.m + (1.0 - kBeta1) * g;
    s.v = kBeta2 * s.v + (1.0 - kBeta2) * g.cwiseProduct(g);
    Matrix& p = s.param.mutable_value();
    if (s.decay) p *= 1.0 - lr * weight_decay_;
    p.array() -= lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + kEps);
  }
}

LoadedSplit load_split(const data::Manifest& manifest, data::Split split, int points) {
  LoadedSplit out;
  std::uint64_t k = 0;
  for (const auto& e : manifest.split(split)) {
    auto video = data::load_pcv(manifest.resolve(e));
    if (video.num_frames() < 2 || video.points_per_frame() < 1) {
      throw DataError(DataErrorCode::kShapeMismatch, e.path + ": needs at least two nonempty frames");
    }
    video = data::normalize_video(video);
    for (auto& f : video.frames) f = data::resample_frame(f, points, k++);
    video.label = e.label;
    out.videos.push_back(std::move(video));
    out.labels.push_back(e.label);
  }
  return out;
}

StepLoss objective(const Model& model, std::span<const PointCloudVideo> clips, std::span<const int> labels,
                   const Objective& obj, bool training, std::mt19937_64& rng) {
  encoder::FeatureGrid grid;
  if (obj.encoder_frozen) {
    ad::NoGradGuard no_grad;
    grid = model.encoder().forward(clips, false);
  } else {
    grid = model.encoder().forward(clips, training);
  }

  StepLoss out;
  std::optional<Var> match;
  std::optional<Var> ce;
  if (obj.match) {
    if (model.pde() == nullptr) throw ConfigError("matching objective requires the operator module");
    const auto p = model.pde()->forward(grid);
    switch (obj.loss) {
      case losses::MatchLoss::kInfoNce:
        match = losses::info_nce_loss(p.predicted, p.target, p.negatives, p.batch, obj.info_nce);
        break;
      case losses::MatchLoss::kL2:
        match = losses::l2_match_loss(p.predicted, p.target);
        break;
      case losses::MatchLoss::kCosine:
        match = losses::cosine_match_loss(p.predicted, p.target);
        break;
    }
    out.match = match->item();
  }
  if (obj.classify) {
    if (model.head() == nullptr) throw ConfigError("classification objective requires a head");
    ce = ad::softmax_cross_entropy((*model.head())(grid, training, rng), labels);
    out.classify = ce->item();
  }
  if (match && ce) {
    out.total = obj.lambda > 0.0 ? ad::add(*ce, ad::scale(*match, obj.lambda)) : *ce;
  } else if (match) {
    out.total = *match;
  } else if (ce) {
    out.total = *ce;
  } else {
    throw ConfigError("objective has no loss terms");
  }
  return out;
}

TrainResult run_pretrain(const RunConfig& cfg) {
  cfg.validate();
  const auto manifest = open_manifest(cfg);
  const auto train_split = load_split(manifest, data::Split::kTrain, cfg.encoder.input_points);
  ModelSpec spec{cfg.encoder, cfg.pde, 0, cfg.head_hidden, cfg.head_dropout};
  Model model(spec, cfg.seed);
  Regime regime{objective_from(cfg), {"encoder.", "pde."}};
  regime.objective.match = true;
  return train_loop(model, cfg, regime, train_split, nullptr);
}

TrainResult run_finetune(const RunConfig& cfg) {
  cfg.validate();
  const auto manifest = open_manifest(cfg);
  const int classes = classes_for(cfg, manifest);
  Model model = encoder_with_head(cfg, classes);
  const auto train_split = load_split(manifest, data::Split::kTrain, model.spec().encoder.input_points);
  const auto test_split = load_split(manifest, data::Split::kTest, model.spec().encoder.input_points);
  Regime regime{objective_from(cfg), {"encoder.", "head."}};
  regime.objective.classify = true;
  return train_loop(model, cfg, regime, train_split, &test_split);
}

TrainResult run_probe(const RunConfig& cfg) {
  cfg.validate();
  const auto manifest = open_manifest(cfg);
  const int classes = classes_for(cfg, manifest);
  Model model = encoder_with_head(cfg, classes);
  const auto train_split = load_split(manifest, data::Split::kTrain, model.spec().encoder.input_points);
  const auto test_split = load_split(manifest, data::Split::kTest, model.spec().encoder.input_points);
  Regime regime{objective_from(cfg), {"head."}};
  regime.objective.classify = true;
  regime.objective.encoder_frozen = true;
  return train_loop(model, cfg, regime, train_split, &test_split);
}

TrainResult run_e2e(const RunConfig& cfg) {
  cfg.validate();
  const auto manifest = open_manifest(cfg);
  const int classes = classes_for(cfg, manifest);
  const auto train_split = load_split(manifest, data::Split::kTrain, cfg.encoder.input_points);
  const auto test_split = load_split(manifest, data::Split::kTest, cfg.encoder.input_points);
  ModelSpec spec{cfg.encoder, cfg.pde, classes, cfg.head_hidden, cfg.head_dropout};
  Model model(spec, cfg.seed);
  Regime regime{objective_from(cfg), {"encoder.", "pde.", "head."}};
  regime.objective.match = true;
  regime.objective.classify = true;
  return train_loop(model, cfg, regime, train_split, &test_split);
}

nlohmann::json to_json(const EvalReport& r) {
  return {{"accuracy", r.accuracy},
          {"per_class_accuracy", r.per_class_accuracy},
          {"samples", r.samples},
          {"mean_accuracy", r.mean_accuracy},
          {"std_accuracy", r.std_accuracy},
          {"run_accuracies", r.run_accuracies}};
}

EvalReport evaluate(const Model& model, const LoadedSplit& split) {
  if (model.head() == nullptr) throw ConfigError("evaluation requires a classification head");
  const int classes = model.head()->num_classes();
  check_labels(split, classes);
  const int frames = model.spec().encoder.input_frames;

  std::vector<PointCloudVideo> clips;
  std::vector<std::size_t> owner;
  for (std::size_t v = 0; v < split.videos.size(); ++v) {
    for (auto& c : data::clip_sample(split.videos[v], frames, data::ClipMode::kUniformCover)) {
      clips.push_back(std::move(c));
      owner.push_back(v);
    }
  }
  const auto logits = clip_logits(model, clips);
  Matrix summed = Matrix::Zero(static_cast<Index>(split.videos.size()), classes);
  std::vector<int> counts(split.videos.size(), 0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    summed.row(static_cast<Index>(owner[i])) += logits[i];
    ++counts[owner[i]];
  }

  EvalReport r;
  r.samples = static_cast<int>(split.videos.size());
  std::vector<int> class_total(static_cast<std::size_t>(classes), 0);
  std::vector<int> class_hit(static_cast<std::size_t>(classes), 0);
  int hits = 0;
  for (std::size_t v = 0; v < split.videos.size(); ++v) {
    Index pred = 0;
    (summed.row(static_cast<Index>(v)) / counts[v]).maxCoeff(&pred);
    const int label = split.labels[v];
    ++class_total[static_cast<std::size_t>(label)];
    if (pred == label) {
      ++hits;
      ++class_hit[static_cast<std::size_t>(label)];
    }
  }
  r.accuracy = r.samples > 0 ? static_cast<double>(hits) / r.samples : 0.0;
  for (int c = 0; c < classes; ++c) {
    const auto i = static_cast<std::size_t>(c);
    r.per_class_accuracy.push_back(class_total[i] > 0 ? static_cast<double>(class_hit[i]) / class_total[i] : 0.0);
  }
  r.mean_accuracy = r.accuracy;
  r.run_accuracies = {r.accuracy};
  return r;
}

EvalReport run_eval(const RunConfig& cfg) {
  if (cfg.checkpoint_in.empty()) throw ConfigError("eval requires at least one --checkpoint");
  const auto manifest = open_manifest(cfg);
  EvalReport first;
  std::vector<double> accs;
  for (std::size_t i = 0; i < cfg.checkpoint_in.size(); ++i) {
    const auto ckpt = checkpoint::load(cfg.checkpoint_in[i]);
    const ModelSpec spec = spec_from_checkpoint(ckpt);
    if (spec.num_classes == 0) throw DataError(DataErrorCode::kBadHeader, "checkpoint has no classification head");
    if (spec.num_classes != manifest.num_classes) {
      throw DataError(DataErrorCode::kNonContiguousLabels, "label range does not match head width");
    }
    Model model(spec, cfg.seed);
    checkpoint::restore(ckpt, model.store(), "");
    const auto test_split = load_split(manifest, data::Split::kTest, spec.encoder.input_points);
    if (test_split.videos.empty()) throw DataError(DataErrorCode::kEmptySplit, "test split is empty");
    auto r = evaluate(model, test_split);
    accs.push_back(r.accuracy);
    if (i == 0) first = std::move(r);
  }
  const double mean = std::accumulate(accs.begin(), accs.end(), 0.0) / static_cast<double>(accs.size());
  double var = 0.0;
  for (double a : accs) var += (a - mean) * (a - mean);
  first.mean_accuracy = mean;
  first.std_accuracy = accs.size() > 1 ? std::sqrt(var / static_cast<double>(accs.size() - 1)) : 0.0;
  first.run_accuracies = accs;
  return first;
}

losses::DiagnosticReport diagnose_model(const Model& model, const LoadedSplit& split) {
  if (model.head() == nullptr) throw ConfigError("diagnostics require a classification head");
  ad::NoGradGuard no_grad;
  std::mt19937_64 unused(0);
  const int frames = model.spec().encoder.input_frames;
  std::vector<PointCloudVideo> clips;
  for (const auto& v : split.videos) clips.push_back(data::clip_sample(v, frames, data::ClipMode::kUniformCover).front());

  std::vector<Matrix> grids;
  Matrix logits(static_cast<Index>(clips.size()), model.head()->num_classes());
  int regions = 0;
  for (std::size_t start = 0; start < clips.size(); start += kEvalBatch) {
    const std::size_t n = std::min<std::size_t>(kEvalBatch, clips.size() - start);
    const auto grid = model.encoder().forward(std::span(clips).subspan(start, n), false);
    regions = grid.regions;
    const Var l = (*model.head())(grid, false, unused);
    for (std::size_t i = 0; i < n; ++i) {
      grids.push_back(grid.sample(static_cast<int>(i)));
      logits.row(static_cast<Index>(start + i)) = l.value().row(static_cast<Index>(i));
    }
  }
  return losses::diagnose(grids, frames, regions, logits);
}

losses::DiagnosticReport run_diagnose(const RunConfig& cfg) {
  const auto manifest = open_manifest(cfg);
  ModelSpec spec;
  std::optional<checkpoint::Checkpoint> ckpt;
  if (!cfg.checkpoint_in.empty()) {
    ckpt = checkpoint::load(cfg.checkpoint_in.front());
    spec = spec_from_checkpoint(*ckpt);
  } else {
    cfg.validate();
    spec = ModelSpec{cfg.encoder, std::nullopt, 0, cfg.head_hidden, cfg.head_dropout};
  }
  if (spec.num_classes == 0) spec.num_classes = manifest.num_classes;
  Model model(spec, cfg.seed);
  if (ckpt) checkpoint::restore(*ckpt, model.store(), "");
  const auto test_split = load_split(manifest, data::Split::kTest, spec.encoder.input_points);
  return diagnose_model(model, test_split);
}

nlohmann::json to_json(const ModelReport& r) {
  return {{"param_count_total", r.total},
          {"param_count_encoder", r.encoder},
          {"param_count_pde", r.pde},
          {"param_count_head", r.head}};
}

ModelReport report_model(const RunConfig& cfg) {
  cfg.validate();
  const int classes = cfg.num_classes > 0 ? cfg.num_classes : 20;
  Model model(ModelSpec{cfg.encoder, cfg.pde, classes, cfg.head_hidden, cfg.head_dropout}, cfg.seed);
  ModelReport r;
  r.encoder = model.store().count("encoder.");
  r.pde = model.store().count("pde.");
  r.head = model.store().count("head.");
  r.total = r.encoder + r.pde;
  return r;
}

fs::path checkpoint_path(const RunConfig& cfg) { return fs::path(cfg.out) / "checkpoint.pcvk"; }
fs::path metrics_path(const RunConfig& cfg) { return fs::path(cfg.out) / "metrics.jsonl"; }

}  // namespace pcv::train
