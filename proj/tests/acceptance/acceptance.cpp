// Acceptance suite: one PASS/FAIL line per criterion, thresholds pinned
// below. Exit status is nonzero when any criterion fails.

#include "pcv/checkpoint.hpp"
#include "pcv/data.hpp"
#include "pcv/encoder.hpp"
#include "pcv/errors.hpp"
#include "pcv/geom.hpp"
#include "pcv/losses.hpp"
#include "pcv/pde.hpp"
#include "pcv/train.hpp"
#include "test_util.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace {

using namespace pcv;
using ad::Index;
using ad::Matrix;
using ad::Var;
using pcv::testing::check_gradients;
using pcv::testing::random_matrix;
using pcv::testing::random_video;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

// Brute-force oracles, written from the definitions.
std::vector<Index> fps_oracle(const geom::Points& x, Index count) {
  std::vector<Index> chosen{0};
  while (static_cast<Index>(chosen.size()) < count) {
    Index best = -1;
    double best_d = -1.0;
    for (Index i = 0; i < x.rows(); ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      double d = std::numeric_limits<double>::infinity();
      for (Index c : chosen) d = std::min(d, (x.row(i) - x.row(c)).norm());
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

std::vector<Index> knn_oracle(const geom::Points& q, Index row, const geom::Points& s, Index k) {
  std::vector<std::pair<double, Index>> all;
  for (Index i = 0; i < s.rows(); ++i) all.emplace_back((q.row(row) - s.row(i)).norm(), i);
  std::sort(all.begin(), all.end());
  std::vector<Index> out;
  for (Index j = 0; j < k; ++j) out.push_back(all[static_cast<std::size_t>(j % s.rows())].second);
  return out;
}

geom::Points cloud(Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  geom::Points p(n, 3);
  for (Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  return p;
}

Outcome geometry_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  int fps_ok = 0;
  int knn_ok = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Index n = std::uniform_int_distribution<Index>(1, 64)(rng);
    const Index m = std::uniform_int_distribution<Index>(1, n)(rng);
    const auto p = cloud(n, rng);
    fps_ok += geom::farthest_point_sample(p, m) == fps_oracle(p, m);
  }
  for (int trial = 0; trial < 200; ++trial) {
    const Index m = std::uniform_int_distribution<Index>(1, 64)(rng);
    const Index n = std::uniform_int_distribution<Index>(1, 64)(rng);
    const Index k = std::uniform_int_distribution<Index>(1, 64)(rng);
    const auto q = cloud(m, rng);
    const auto s = cloud(n, rng);
    const auto nbr = geom::knn_group(q, s, k);
    bool ok = true;
    for (Index i = 0; i < m && ok; ++i) {
      const auto want = knn_oracle(q, i, s, k);
      for (Index j = 0; j < k; ++j) ok = ok && nbr.at(i, j) == want[static_cast<std::size_t>(j)];
    }
    knn_ok += ok;
  }
  const double secs = seconds_since(t0);
  return {fps_ok == 200 && knn_ok == 200 && secs < 10.0,
          "fps " + std::to_string(fps_ok) + "/200, knn " + std::to_string(knn_ok) + "/200, " + fmt(secs, 3) +
              " s (limit 10 s)"};
}

Outcome spectral_analytics() {
  const Var x(random_matrix(5, 4, 1, 4.0));
  const Matrix id = pde::spectral_map(x, Var(Matrix::Zero(8, 4)), Var(Matrix::Zero(8, 4))).value();
  const bool identity = id == x.value();

  const double y = pde::spectral_map(Var(Matrix::Constant(1, 1, std::numbers::pi)), Var(Matrix::Ones(1, 1)),
                                     Var(Matrix::Ones(1, 1)))
                       .item();
  const double pi_err = std::abs(y - (std::numbers::pi - 1.0));

  double worst = 0.0;
  for (bool per_channel : {true, false}) {
    Var in(random_matrix(3, 4, 2), true);
    Var ws(random_matrix(8, per_channel ? 4 : 1, 3), true);
    Var wc(random_matrix(8, per_channel ? 4 : 1, 4), true);
    const Var probe(random_matrix(3, 4, 5));
    const auto r = check_gradients([&] { return ad::sum(ad::mul(pde::spectral_map(in, ws, wc), probe)); },
                                   {{"x", in}, {"w_sin", ws}, {"w_cos", wc}}, 1e-4, 1e-8);
    worst = std::max(worst, r.max_rel_err);
  }
  return {identity && pi_err < 1e-6 && worst < 1e-4,
          std::string("zero-weight identity ") + (identity ? "exact" : "INEXACT") + ", |pi case err| " + fmt(pi_err) +
              " (< 1e-6), FD max rel err " + fmt(worst) + " (< 1e-4)"};
}

Outcome loss_analytics() {
  double nce_err = 0.0;
  for (int q : {1, 4, 16}) {
    const Matrix v = random_matrix(1, 8, 6);
    const Matrix p = v.replicate(3, 1);
    nce_err = std::max(nce_err, std::abs(losses::info_nce(p, p, v.replicate(q, 1)) - std::log(1.0 + q)));
  }
  const double ce_err = std::abs(losses::cross_entropy(Matrix::Zero(1, 20), 7) - std::log(20.0));
  Eigen::RowVectorXd u = random_matrix(1, 5, 7).row(0);
  u.normalize();
  Matrix anti(2, 5);
  anti << u, -u;
  const double uni_err = std::abs(losses::uniformity_loss(anti, 2.0) + 8.0);
  const Matrix xs = random_matrix(10, 6, 8);
  const double align = losses::alignment_loss(xs, xs);
  return {nce_err < 1e-6 && ce_err < 1e-6 && uni_err < 1e-6 && align == 0.0,
          "info_nce |err| " + fmt(nce_err) + ", CE |err| " + fmt(ce_err) + ", antipodal |err| " + fmt(uni_err) +
              ", alignment " + fmt(align) + " (tol 1e-6, alignment exact)"};
}

Outcome encoder_invariants() {
  auto cfg = encoder::EncoderConfig::msr_default();
  cfg.fps_start = geom::FpsStart::kCanonical;
  nn::ParameterStore store;
  std::mt19937_64 rng(9);
  const encoder::Encoder enc(store, cfg, rng);

  const auto video = random_video(24, 2048, 10);
  const auto grid = enc.forward(video, false);
  const bool shape = grid.frames == 24 && grid.regions == 4 && grid.channels == 1024 && grid.tokens.rows() == 96;

  auto shuffled = video;
  std::mt19937_64 perm_rng(11);
  for (auto& f : shuffled.frames) {
    std::vector<Index> perm(static_cast<std::size_t>(f.size()));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), perm_rng);
    geom::Points p(f.size(), 3);
    for (Index i = 0; i < f.size(); ++i) p.row(i) = f.coords.row(perm[static_cast<std::size_t>(i)]);
    f.coords = p;
  }
  const double perm_err = (enc.forward(shuffled, false).tokens.value() - grid.tokens.value()).cwiseAbs().maxCoeff();

  PointCloudVideo still;
  still.frames.assign(24, video.frames[0]);
  const Matrix st = enc.forward(still, false).tokens.value();
  double roll_err = 0.0;
  for (int t = 1; t < 24; ++t) roll_err = std::max(roll_err, (st.middleRows(t * 4, 4) - st.topRows(4)).cwiseAbs().maxCoeff());

  return {shape && perm_err < 1e-5 && roll_err < 1e-5,
          "permutation max-abs " + fmt(perm_err) + ", static-roll max-abs " + fmt(roll_err) + " (< 1e-5), grid [" +
              std::to_string(grid.frames) + "x" + std::to_string(grid.regions) + "x" + std::to_string(grid.channels) +
              "] (expected [24x4x1024]: 2048/(32*8*2) = 4)"};
}

Outcome end_to_end_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  train::ModelSpec spec;
  spec.encoder = encoder::EncoderConfig::tiny(32, 4);
  spec.pde = pde::PdeConfig{};
  spec.pde->d_model = 16;
  spec.pde->heads = 2;
  spec.pde->operators = 4;
  spec.pde->spectral_init_std = 0.1;  // nonzero so the spectral path carries curvature
  spec.num_classes = 3;
  spec.head_hidden = 16;
  spec.head_dropout = 0.0;
  train::Model model(spec, 12);

  const std::vector<PointCloudVideo> clips{random_video(4, 32, 13), random_video(4, 32, 14)};
  const std::vector<int> labels{0, 2};
  train::Objective obj;
  obj.match = obj.classify = true;
  obj.info_nce.temperature = 0.5;
  std::vector<std::pair<std::string, Var>> params;
  Index total = 0;
  for (const auto& name : model.store().learnable_names()) {
    params.emplace_back(name, model.store().get(name));
    total += model.store().get(name).value().size();
  }
  const auto r = check_gradients(
      [&] {
        std::mt19937_64 rng(0);
        return train::objective(model, clips, labels, obj, true, rng).total;
      },
      params, 1e-5, 1e-6);
  const double secs = seconds_since(t0);
  const bool coverage = r.checked >= (total * 9) / 10;
  return {r.max_rel_err < 1e-3 && secs < 120.0 && coverage,
          "max rel err " + fmt(r.max_rel_err) + " (< 1e-3) over " + std::to_string(r.checked) + "/" +
              std::to_string(total) + " parameters (" + std::to_string(r.kinks) + " on max/ReLU kinks skipped), " +
              fmt(secs, 3) + " s (limit 120 s)"};
}

// Shared desk-scale benchmark for criteria 6, 7 and 9.
struct Bench {
  fs::path root;
  std::vector<fs::path> e2e_checkpoints;
};

train::RunConfig desk_config(const Bench& b, train::Mode mode, std::uint64_t seed, const std::string& name) {
  train::RunConfig cfg;
  cfg.mode = mode;
  cfg.data_root = (b.root / "data").string();
  cfg.encoder = encoder::EncoderConfig::tiny(128, 8);
  cfg.pde.d_model = 64;
  cfg.pde.heads = 4;
  cfg.head_hidden = 128;
  cfg.optim.batch_size = 16;
  cfg.seed = seed;
  cfg.out = (b.root / (name + "_seed" + std::to_string(seed))).string();
  return cfg;
}

Outcome desk_learning(Bench& b) {
  std::vector<double> best;
  std::vector<double> secs;
  std::string runs;
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = desk_config(b, train::Mode::kE2e, seed, "e2e");
    const auto r = train::run_e2e(cfg);
    secs.push_back(seconds_since(t0));
    best.push_back(r.best_accuracy);
    b.e2e_checkpoints.push_back(r.checkpoint);
    int reached = -1;
    for (const auto& rec : r.history) {
      if (rec.eval_accuracy && *rec.eval_accuracy >= 0.95) {
        reached = rec.epoch + 1;
        break;
      }
    }
    runs += " seed" + std::to_string(seed) + ": best " + fmt(r.best_accuracy) + " final " + fmt(r.final_accuracy) +
            " (>=95% at epoch " + (reached > 0 ? std::to_string(reached) : "never") + ") " + fmt(secs.back(), 3) + " s;";
  }
  const double med = median(best);
  const double slowest = *std::max_element(secs.begin(), secs.end());
  return {med >= 0.95 && slowest < 600.0,
          "median best test accuracy " + fmt(med) + " (>= 0.95), slowest run " + fmt(slowest, 3) +
              " s (limit 600 s);" + runs};
}

Outcome regime_ordering(const Bench& b) {
  std::vector<double> ft;
  std::vector<double> probe;
  std::string runs;
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto pre = train::run_pretrain(desk_config(b, train::Mode::kPretrain, seed, "pretrain"));
    auto ft_cfg = desk_config(b, train::Mode::kFinetune, seed, "finetune");
    ft_cfg.checkpoint_in = {pre.checkpoint.string()};
    ft_cfg.eval_every_epoch = false;
    auto probe_cfg = desk_config(b, train::Mode::kProbe, seed, "probe");
    probe_cfg.checkpoint_in = {pre.checkpoint.string()};
    probe_cfg.eval_every_epoch = false;
    ft.push_back(train::run_finetune(ft_cfg).final_accuracy);
    probe.push_back(train::run_probe(probe_cfg).final_accuracy);
    runs += " seed" + std::to_string(seed) + ": finetune " + fmt(ft.back()) + " probe " + fmt(probe.back()) + ";";
  }
  const double f = median(ft);
  const double p = median(probe);
  return {f >= p - 0.01, "median pretrain+finetune " + fmt(f) + " vs linear probe " + fmt(p) +
                             " (fail only if probe leads by > 1 point);" + runs};
}

Outcome parameter_counts() {
  const auto r = train::report_model(train::RunConfig{});
  return {r.encoder >= 580000 && r.encoder <= 860000 && r.pde >= 1000000 && r.pde <= 8000000,
          "encoder " + std::to_string(r.encoder) + " in [580000, 860000], pde " + std::to_string(r.pde) +
              " in [1000000, 8000000]"};
}

Outcome diagnostics(const Bench& b) {
  if (b.e2e_checkpoints.size() != 3) return {false, "criterion 6 checkpoints unavailable"};
  std::vector<double> align_trained, align_fresh, logit_trained, logit_fresh;
  std::string runs;
  for (std::size_t i = 0; i < 3; ++i) {
    auto cfg = desk_config(b, train::Mode::kDiagnose, i, "diagnose_trained");
    cfg.checkpoint_in = {b.e2e_checkpoints[i].string()};
    const auto t = train::run_diagnose(cfg);
    auto fresh_cfg = desk_config(b, train::Mode::kDiagnose, i, "diagnose_fresh");
    fresh_cfg.num_classes = 6;
    const auto f = train::run_diagnose(fresh_cfg);
    align_trained.push_back(t.align_st);
    align_fresh.push_back(f.align_st);
    logit_trained.push_back(t.uniform_logit);
    logit_fresh.push_back(f.uniform_logit);
    runs += " seed" + std::to_string(i) + ": align " + fmt(t.align_st) + " vs " + fmt(f.align_st) + ", logit uniformity " +
            fmt(t.uniform_logit) + " vs " + fmt(f.uniform_logit) + ", T/S uniformity " + fmt(t.uniform_t) + "/" +
            fmt(t.uniform_s) + " vs " + fmt(f.uniform_t) + "/" + fmt(f.uniform_s) + ";";
  }
  const double at = median(align_trained), af = median(align_fresh);
  const double lt = median(logit_trained), lf = median(logit_fresh);
  return {at < af && lt < lf, "median trained vs untrained: alignment " + fmt(at) + " vs " + fmt(af) +
                                  ", logit uniformity " + fmt(lt) + " vs " + fmt(lf) + " (both must be lower);" + runs};
}

template <class F>
bool raises(F&& f, DataErrorCode code) {
  try {
    f();
  } catch (const DataError& e) {
    return e.code() == code;
  }
  return false;
}

Outcome serialization() {
  auto video = random_video(4, 16, 15);
  for (auto& f : video.frames) f.coords = f.coords.cast<float>().cast<double>();
  const auto pcv_bytes = data::write_pcv(video);
  const auto back = data::read_pcv(pcv_bytes);
  bool pcv_exact = data::write_pcv(back) == pcv_bytes;
  for (int t = 0; t < 4; ++t) pcv_exact = pcv_exact && back.frames[t].coords == video.frames[t].coords;

  train::ModelSpec spec{encoder::EncoderConfig::tiny(32, 8), pde::PdeConfig{16, 2, 4}, 6, 32, 0.5};
  const auto ckpt_bytes = checkpoint::encode(train::Model(spec, 16).snapshot());
  const bool ckpt_exact = checkpoint::encode(checkpoint::decode(ckpt_bytes)) == ckpt_bytes;

  std::vector<std::uint8_t> truncated(pcv_bytes.begin(), pcv_bytes.end() - 4);
  auto magic = pcv_bytes;
  magic[3] = '2';
  auto channels = pcv_bytes;
  channels[12] = 4;
  auto ckpt_magic = ckpt_bytes;
  ckpt_magic[0] = 'X';
  std::vector<std::uint8_t> ckpt_cut(ckpt_bytes.begin(), ckpt_bytes.end() - 4);
  auto ckpt_extra = ckpt_bytes;
  ckpt_extra.push_back(0);
  int named = 0;
  named += raises([&] { data::read_pcv(truncated); }, DataErrorCode::kTruncatedPayload);
  named += raises([&] { data::read_pcv(magic); }, DataErrorCode::kBadMagic);
  named += raises([&] { data::read_pcv(channels); }, DataErrorCode::kUnsupportedChannels);
  named += raises([&] { checkpoint::decode(ckpt_magic); }, DataErrorCode::kBadMagic);
  named += raises([&] { checkpoint::decode(ckpt_cut); }, DataErrorCode::kTruncatedPayload);
  named += raises([&] { checkpoint::decode(ckpt_extra); }, DataErrorCode::kTrailingBytes);
  return {pcv_exact && ckpt_exact && named == 6,
          std::string("PCV1 round-trip ") + (pcv_exact ? "bit-exact" : "MISMATCH") + ", checkpoint round-trip " +
              (ckpt_exact ? "bit-exact" : "MISMATCH") + ", named errors " + std::to_string(named) + "/6"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory for datasets and runs");
  app.add_option("--only", only, "run just these criterion numbers")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  Bench bench;
  bench.root = work;
  const auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
  if (wanted(6) || wanted(7) || wanted(9)) {
    fs::remove_all(bench.root);
    data::SynthConfig synth;  // 6 classes, 40 train / 10 test per class, N=128, T=8, noise 0.01
    data::write_synth_dataset(synth, bench.root / "data");
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"geometry oracles", geometry_oracles},
      {"spectral layer analytics", spectral_analytics},
      {"loss analytics", loss_analytics},
      {"encoder invariants", encoder_invariants},
      {"end-to-end gradient check", end_to_end_gradients},
      {"desk-scale e2e learning", [&] { return desk_learning(bench); }},
      {"pretrain+finetune vs linear probe", [&] { return regime_ordering(bench); }},
      {"parameter counts", parameter_counts},
      {"diagnostics trained vs untrained", [&] {
         if (bench.e2e_checkpoints.empty() && !wanted(6)) {
           for (std::uint64_t s : {0, 1, 2}) {
             bench.e2e_checkpoints.push_back(fs::path(desk_config(bench, train::Mode::kE2e, s, "e2e").out) /
                                             "checkpoint.pcvk");
             if (!fs::exists(bench.e2e_checkpoints.back())) {
               bench.e2e_checkpoints.back() = train::run_e2e(desk_config(bench, train::Mode::kE2e, s, "e2e")).checkpoint;
             }
           }
         }
         return diagnostics(bench);
       }},
      {"serialization", serialization},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!wanted(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << criteria[i].first << "): " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
