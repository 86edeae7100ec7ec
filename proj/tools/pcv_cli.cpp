// Command-line front end: synth-data, pretrain, finetune, probe, e2e, eval,
// diagnose, report. Every option can also come from a `key = value` file
// passed with --config (keys are the long flag names without dashes).

#include "pcv/data.hpp"
#include "pcv/errors.hpp"
#include "pcv/train.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

using pcv::ConfigError;
namespace train = pcv::train;

struct Overrides {
  std::string preset = "msr";
  std::optional<int> points;
  std::optional<int> frames;
  std::optional<std::string> strides;
  std::optional<std::string> neighbors;
  std::optional<std::string> widths;
  std::string norm = "batch";
  std::string fps_start = "first";
  std::string roll = "circular";

  std::string positional = "learned";
  std::string spectral_weights = "per-channel";
  std::string direction = "t_to_s";
  std::string loss = "infonce";
  std::string schedule = "cosine";
  bool raw_dot = false;
  bool eval_final_only = false;
};

std::vector<int> parse_ints(const std::string& text, char sep, const std::string& what) {
  std::vector<int> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, sep)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("bad " + what + " entry '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError(what + " is empty");
  return out;
}

pcv::encoder::EncoderConfig build_encoder(const Overrides& o) {
  pcv::encoder::EncoderConfig cfg;
  if (o.preset == "msr") {
    cfg = pcv::encoder::EncoderConfig::msr_default();
  } else if (o.preset == "tiny") {
    cfg = pcv::encoder::EncoderConfig::tiny();
  } else {
    throw ConfigError("unknown encoder preset: " + o.preset);
  }
  if (o.points) cfg.input_points = *o.points;
  if (o.frames) cfg.input_frames = *o.frames;

  const auto n_layers = cfg.layers.size();
  std::size_t wanted = n_layers;
  std::vector<int> strides, neighbors;
  std::vector<std::vector<int>> widths;
  if (o.strides) strides = parse_ints(*o.strides, ',', "strides");
  if (o.neighbors) neighbors = parse_ints(*o.neighbors, ',', "neighbors");
  if (o.widths) {
    std::stringstream in(*o.widths);
    std::string layer;
    while (std::getline(in, layer, '/')) widths.push_back(parse_ints(layer, ',', "widths"));
  }
  for (std::size_t n : {strides.size(), neighbors.size(), widths.size()}) {
    if (n != 0 && n != n_layers) wanted = n;
  }
  if (wanted != n_layers) {
    if (strides.size() != wanted || neighbors.size() != wanted || widths.size() != wanted) {
      throw ConfigError("changing the layer count needs strides, neighbors and widths together");
    }
    cfg.layers.assign(wanted, {});
  }
  for (std::size_t i = 0; i < wanted; ++i) {
    if (!strides.empty()) cfg.layers[i].spatial_stride = strides[i];
    if (!neighbors.empty()) cfg.layers[i].k_neighbors = neighbors[i];
    if (!widths.empty()) cfg.layers[i].mlp_widths = widths[i];
  }
  cfg.output_channels = cfg.layers.back().mlp_widths.back();
  cfg.norm = pcv::nn::norm_kind_from_string(o.norm);

  if (o.fps_start == "first") {
    cfg.fps_start = pcv::geom::FpsStart::kFirstIndex;
  } else if (o.fps_start == "canonical") {
    cfg.fps_start = pcv::geom::FpsStart::kCanonical;
  } else {
    throw ConfigError("fps-start must be first or canonical");
  }
  if (o.roll == "circular") {
    cfg.roll = pcv::geom::RollBoundary::kCircular;
  } else if (o.roll == "clamp") {
    cfg.roll = pcv::geom::RollBoundary::kClamp;
  } else {
    throw ConfigError("roll must be circular or clamp");
  }
  return cfg;
}

void finish_config(train::RunConfig& cfg, const Overrides& o) {
  cfg.encoder = build_encoder(o);
  if (o.positional == "learned") {
    cfg.pde.positional = pcv::pde::PositionalEncoding::kLearned;
  } else if (o.positional == "sinusoidal") {
    cfg.pde.positional = pcv::pde::PositionalEncoding::kSinusoidal;
  } else {
    throw ConfigError("positional must be learned or sinusoidal");
  }
  if (o.spectral_weights == "per-channel") {
    cfg.pde.per_channel_weights = true;
  } else if (o.spectral_weights == "scalar") {
    cfg.pde.per_channel_weights = false;
  } else {
    throw ConfigError("spectral-weights must be per-channel or scalar");
  }
  cfg.pde.direction = pcv::pde::direction_from_string(o.direction);
  cfg.loss = pcv::losses::match_loss_from_string(o.loss);
  if (o.schedule == "cosine") {
    cfg.optim.cosine_schedule = true;
  } else if (o.schedule == "constant") {
    cfg.optim.cosine_schedule = false;
  } else {
    throw ConfigError("schedule must be cosine or constant");
  }
  cfg.normalize_embeddings = !o.raw_dot;
  cfg.eval_every_epoch = !o.eval_final_only;
}

void print_training(const train::TrainResult& r, const train::RunConfig& cfg) {
  nlohmann::json j = {{"mode", train::to_string(cfg.mode)},
                      {"checkpoint", r.checkpoint.string()},
                      {"metrics", train::metrics_path(cfg).string()},
                      {"trained_parameters", r.trained_parameters},
                      {"final_train_loss", r.history.empty() ? 0.0 : r.history.back().train_loss}};
  if (cfg.mode != train::Mode::kPretrain) {
    j["final_accuracy"] = r.final_accuracy;
    j["best_accuracy"] = r.best_accuracy;
  }
  std::cout << j.dump(2) << '\n';
}

int dispatch(train::RunConfig& cfg) {
  switch (cfg.mode) {
    case train::Mode::kSynthData: {
      const auto manifest = pcv::data::write_synth_dataset(cfg.synth, cfg.out);
      std::cout << nlohmann::json{{"manifest", manifest.string()}}.dump(2) << '\n';
      return 0;
    }
    case train::Mode::kPretrain:
      print_training(train::run_pretrain(cfg), cfg);
      return 0;
    case train::Mode::kFinetune:
      print_training(train::run_finetune(cfg), cfg);
      return 0;
    case train::Mode::kProbe:
      print_training(train::run_probe(cfg), cfg);
      return 0;
    case train::Mode::kE2e:
      print_training(train::run_e2e(cfg), cfg);
      return 0;
    case train::Mode::kEval:
      std::cout << train::to_json(train::run_eval(cfg)).dump(2) << '\n';
      return 0;
    case train::Mode::kDiagnose: {
      const auto report = train::run_diagnose(cfg);
      const auto path = std::filesystem::path(cfg.out) / "diagnose.json";
      std::filesystem::create_directories(path.parent_path());
      std::ofstream(path) << pcv::losses::to_json(report).dump(2) << '\n';
      std::cout << pcv::losses::format_table(report) << pcv::losses::to_json(report).dump() << '\n';
      return 0;
    }
    case train::Mode::kReport:
      std::cout << train::to_json(train::report_model(cfg)).dump(2) << '\n';
      return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point-cloud video encoder with a spectral operator pretext task"};
  app.set_config("--config", "", "key = value file; keys are long flag names without dashes");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  train::RunConfig cfg;
  Overrides o;

  app.add_option("--seed", cfg.seed, "RNG seed")->capture_default_str();
  app.add_option("--out", cfg.out, "output directory")->capture_default_str();
  app.add_option("--data-root", cfg.data_root, "dataset directory holding manifest.jsonl");
  app.add_option("--manifest", cfg.manifest, "manifest path (default <data-root>/manifest.jsonl)");
  app.add_option("--checkpoint", cfg.checkpoint_in, "input checkpoint(s)")->delimiter(',');
  app.add_flag("--verbose", cfg.verbose, "print per-epoch records to stderr");

  app.add_option("--encoder-preset", o.preset, "msr or tiny")->capture_default_str();
  app.add_option("--points", o.points, "points per frame");
  app.add_option("--frames", o.frames, "frames per clip");
  app.add_option("--strides", o.strides, "per-layer spatial strides, e.g. 32,8,2");
  app.add_option("--neighbors", o.neighbors, "per-layer neighbor counts, e.g. 48,32,8");
  app.add_option("--widths", o.widths, "per-layer MLP widths, layers separated by '/', e.g. 16,32/64");
  app.add_option("--norm", o.norm, "batch, layer or none")->capture_default_str();
  app.add_option("--fps-start", o.fps_start, "first or canonical")->capture_default_str();
  app.add_option("--roll", o.roll, "circular or clamp")->capture_default_str();

  app.add_option("--d-model", cfg.pde.d_model, "operator-module width")->capture_default_str();
  app.add_option("--heads", cfg.pde.heads, "attention heads")->capture_default_str();
  app.add_option("--operators", cfg.pde.operators, "spectral basis size O (even)")->capture_default_str();
  app.add_option("--spectral-weights", o.spectral_weights, "per-channel or scalar")->capture_default_str();
  app.add_option("--spectral-init-std", cfg.pde.spectral_init_std, "std of spectral weight init")->capture_default_str();
  app.add_option("--positional", o.positional, "learned or sinusoidal")->capture_default_str();
  app.add_option("--use-mhsa", cfg.pde.use_mhsa, "true or false")->capture_default_str();
  app.add_option("--use-spectral", cfg.pde.use_spectral, "true or false")->capture_default_str();
  app.add_option("--use-mhca", cfg.pde.use_mhca, "true or false")->capture_default_str();
  app.add_option("--direction", o.direction, "t_to_s or s_to_t")->capture_default_str();

  app.add_option("--loss", o.loss, "infonce, l2 or cosine")->capture_default_str();
  app.add_option("--tau", cfg.tau, "InfoNCE temperature")->capture_default_str();
  app.add_flag("--raw-dot", o.raw_dot, "skip L2 normalization inside InfoNCE");
  app.add_option("--lambda", cfg.lambda, "weight of the matching loss in e2e")->capture_default_str();

  app.add_option("--lr", cfg.optim.lr, "learning rate")->capture_default_str();
  app.add_option("--weight-decay", cfg.optim.weight_decay, "decoupled weight decay")->capture_default_str();
  app.add_option("--epochs", cfg.optim.epochs, "epochs (0: 30, or 60 for e2e)")->capture_default_str();
  app.add_option("--batch-size", cfg.optim.batch_size, "videos per batch")->capture_default_str();
  app.add_option("--schedule", o.schedule, "cosine or constant")->capture_default_str();
  app.add_flag("--eval-final-only", o.eval_final_only, "evaluate only after the last epoch");

  app.add_option("--num-classes", cfg.num_classes, "head width (0: from manifest); class count for synth-data");
  app.add_option("--head-hidden", cfg.head_hidden, "classification head hidden width")->capture_default_str();
  app.add_option("--dropout", cfg.head_dropout, "classification head dropout")->capture_default_str();

  app.add_option("--samples-per-class", cfg.synth.samples_per_class, "synthetic train videos per class")
      ->capture_default_str();
  app.add_option("--test-per-class", cfg.synth.test_per_class, "synthetic test videos per class")
      ->capture_default_str();
  app.add_option("--noise-sigma", cfg.synth.noise_sigma, "synthetic point jitter")->capture_default_str();

  const std::vector<std::pair<const char*, const char*>> commands = {
      {"synth-data", "write the synthetic motion dataset to --out"},
      {"pretrain", "train encoder and operator module with the matching loss"},
      {"finetune", "train encoder and a fresh head from a pretrained checkpoint"},
      {"probe", "train a fresh head on a frozen pretrained encoder"},
      {"e2e", "train encoder, operator module and head jointly"},
      {"eval", "test accuracy of one or more checkpoints"},
      {"diagnose", "alignment and uniformity of a model's representations"},
      {"report", "parameter counts per group"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    cfg.mode = train::mode_from_string(app.get_subcommands().front()->get_name());
    if (cfg.mode == train::Mode::kSynthData) {
      cfg.synth.seed = cfg.seed;
      if (cfg.num_classes > 0) cfg.synth.num_classes = cfg.num_classes;
      if (o.points) cfg.synth.points = *o.points;
      if (o.frames) cfg.synth.frames = *o.frames;
    } else {
      finish_config(cfg, o);
    }
    return dispatch(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const pcv::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const pcv::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
