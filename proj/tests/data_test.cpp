#include "pcv/data.hpp"
#include "pcv/errors.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <bit>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

namespace {

using namespace pcv;
using namespace pcv::data;
using ad::Index;
using pcv::testing::random_video;
namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pcv_data_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::vector<std::uint8_t> header(const char* magic, std::uint32_t t, std::uint32_t n, std::uint32_t c) {
  std::vector<std::uint8_t> b(magic, magic + 4);
  put_u32(b, t);
  put_u32(b, n);
  put_u32(b, c);
  return b;
}

DataErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no DataError thrown";
  return DataErrorCode::kIo;
}

TEST(Pcv, RoundTripIsBitExact) {
  auto v = random_video(4, 16, 1);
  for (auto& f : v.frames) f.coords = f.coords.cast<float>().cast<double>();
  const auto bytes = write_pcv(v);
  EXPECT_EQ(bytes.size(), 16u + 4 * 16 * 3 * 4);
  const auto back = read_pcv(bytes);
  ASSERT_EQ(back.num_frames(), 4);
  for (int t = 0; t < 4; ++t) EXPECT_EQ(back.frames[t].coords, v.frames[t].coords);
  EXPECT_EQ(write_pcv(back), bytes);
}

TEST(Pcv, LayoutIsLittleEndianFrameMajor) {
  PointCloudVideo v;
  v.frames.push_back({(Points(1, 3) << 1, 2, 3).finished()});
  v.frames.push_back({(Points(1, 3) << 4, 5, 6).finished()});
  const auto bytes = write_pcv(v);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PCV1");
  EXPECT_EQ(bytes[4], 2);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[12], 3);
  std::uint32_t w = 0;
  for (int i = 0; i < 4; ++i) w |= static_cast<std::uint32_t>(bytes[16 + 12 + i]) << (8 * i);
  EXPECT_EQ(std::bit_cast<float>(w), 4.0f);
}

TEST(Pcv, NamedErrors) {
  auto b = header("PCV1", 2, 3, 3);
  for (int i = 0; i < 17; ++i) put_u32(b, 0);
  EXPECT_EQ(code_of([&] { read_pcv(b); }), DataErrorCode::kTruncatedPayload);
  try {
    read_pcv(b);
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated payload"), std::string::npos);
  }
  put_u32(b, 0);
  EXPECT_NO_THROW(read_pcv(b));
  put_u32(b, 0);
  EXPECT_EQ(code_of([&] { read_pcv(b); }), DataErrorCode::kTrailingBytes);

  const auto bad = header("PCV2", 2, 1, 3);
  EXPECT_EQ(code_of([&] { read_pcv(bad); }), DataErrorCode::kBadMagic);
  EXPECT_NE(std::string(DataError(DataErrorCode::kBadMagic, "").what()).find("bad magic"), std::string::npos);
  EXPECT_EQ(code_of([&] { read_pcv(header("PCV1", 2, 1, 4)); }), DataErrorCode::kUnsupportedChannels);
  const std::vector<std::uint8_t> short_header{'P', 'C', 'V', '1', 0};
  EXPECT_EQ(code_of([&] { read_pcv(short_header); }), DataErrorCode::kBadHeader);
}

TEST(Pcv, FileRoundTrip) {
  const auto dir = scratch("file");
  auto v = random_video(3, 5, 2);
  save_pcv(dir / "a.pcv", v);
  const auto back = load_pcv(dir / "a.pcv");
  EXPECT_LT((back.frames[2].coords - v.frames[2].coords).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_EQ(code_of([&] { load_pcv(dir / "missing.pcv"); }), DataErrorCode::kMissingFile);
}

void write_manifest(const fs::path& dir, const std::vector<std::string>& lines) {
  std::ofstream m(dir / "manifest.jsonl");
  for (const auto& l : lines) m << l << "\n";
}

TEST(Manifest, LoadsAndSplits) {
  const auto dir = scratch("manifest_ok");
  save_pcv(dir / "a.pcv", random_video(2, 3, 3));
  write_manifest(dir, {R"({"path":"a.pcv","label":0,"split":"train","subject":4})",
                       R"({"path":"a.pcv","label":1,"split":"test","subject":null})", ""});
  const auto m = load_manifest(dir / "manifest.jsonl");
  EXPECT_EQ(m.num_classes, 2);
  ASSERT_EQ(m.split(Split::kTrain).size(), 1u);
  EXPECT_EQ(m.split(Split::kTrain)[0].subject, 4);
  EXPECT_FALSE(m.split(Split::kTest)[0].subject.has_value());
  EXPECT_EQ(m.resolve(m.entries[0]), dir / "a.pcv");
  const auto line = manifest_line(m.entries[0]);
  EXPECT_EQ(nlohmann::json::parse(line).at("split"), "train");
}

TEST(Manifest, RejectsBadContent) {
  const auto dir = scratch("manifest_bad");
  save_pcv(dir / "a.pcv", random_video(2, 3, 4));
  const auto path = dir / "manifest.jsonl";

  write_manifest(dir, {R"({"path":"nope.pcv","label":0,"split":"train"})"});
  EXPECT_EQ(code_of([&] { load_manifest(path); }), DataErrorCode::kMissingFile);

  write_manifest(dir, {R"({"path":"a.pcv","label":0,"split":"train"})", R"({"path":"a.pcv","label":2,"split":"test"})"});
  EXPECT_EQ(code_of([&] { load_manifest(path); }), DataErrorCode::kNonContiguousLabels);

  write_manifest(dir, {R"({"path":"a.pcv","label":0,"split":"val"})"});
  EXPECT_EQ(code_of([&] { load_manifest(path); }), DataErrorCode::kUnknownSplit);

  write_manifest(dir, {R"({"path":"a.pcv","split":"train"})"});
  EXPECT_EQ(code_of([&] { load_manifest(path); }), DataErrorCode::kMalformedManifest);

  write_manifest(dir, {"not json"});
  EXPECT_EQ(code_of([&] { load_manifest(path); }), DataErrorCode::kMalformedManifest);

  write_manifest(dir, {});
  EXPECT_EQ(code_of([&] { load_manifest(path); }), DataErrorCode::kMalformedManifest);

  EXPECT_EQ(code_of([&] { load_manifest(dir / "absent.jsonl"); }), DataErrorCode::kMissingFile);
}

TEST(Clips, Examples) {
  const auto v = random_video(10, 4, 5);
  for (auto mode : {ClipMode::kRandomStart, ClipMode::kUniformCover}) {
    const auto full = clip_sample(v, 10, mode, 3);
    ASSERT_EQ(full.size(), 1u);
    EXPECT_EQ(full[0].frames.front().coords, v.frames.front().coords);
    EXPECT_EQ(full[0].num_frames(), 10);
  }
  const auto cover = clip_sample(v, 4, ClipMode::kUniformCover);
  ASSERT_EQ(cover.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(cover[i].num_frames(), 4);
    EXPECT_EQ(cover[i].frames[0].coords, v.frames[static_cast<std::size_t>(3 * i)].coords);
  }
  EXPECT_EQ(clip_sample(random_video(24, 2, 6), 12, ClipMode::kUniformCover).size(), 2u);
  EXPECT_THROW(clip_sample(v, 11, ClipMode::kUniformCover), std::invalid_argument);
}

TEST(Clips, RandomStartIsSeeded) {
  const auto v = random_video(20, 3, 7);
  std::set<double> starts;
  for (std::uint64_t s = 0; s < 30; ++s) {
    const auto a = clip_sample(v, 5, ClipMode::kRandomStart, s);
    const auto b = clip_sample(v, 5, ClipMode::kRandomStart, s);
    EXPECT_EQ(a[0].frames[0].coords, b[0].frames[0].coords);
    starts.insert(a[0].frames[0].coords(0, 0));
  }
  EXPECT_GT(starts.size(), 3u);
}

TEST(Clips, UniformCoverTouchesEveryFrame) {
  for (int t = 2; t <= 30; ++t) {
    PointCloudVideo v;
    for (int i = 0; i < t; ++i) v.frames.push_back({Points::Constant(1, 3, i)});
    for (int len = 1; len <= t; ++len) {
      std::set<int> seen;
      for (const auto& c : clip_sample(v, len, ClipMode::kUniformCover)) {
        for (const auto& f : c.frames) seen.insert(static_cast<int>(f.coords(0, 0)));
      }
      EXPECT_EQ(static_cast<int>(seen.size()), t) << "T=" << t << " L=" << len;
    }
  }
}

TEST(Normalize, Examples) {
  auto v = random_video(3, 20, 8);
  const auto once = normalize_video(v);
  const auto twice = normalize_video(once);
  for (int t = 0; t < 3; ++t) EXPECT_LT((once.frames[t].coords - twice.frames[t].coords).cwiseAbs().maxCoeff(), 1e-6);

  auto moved = v;
  for (auto& f : moved.frames) f.coords.array() += 5.0;
  const auto m = normalize_video(moved);
  for (int t = 0; t < 3; ++t) EXPECT_LT((m.frames[t].coords - once.frames[t].coords).cwiseAbs().maxCoeff(), 1e-9);

  PointCloudVideo r;
  r.frames.push_back({(Points(2, 3) << 2, 0, 0, -2, 0, 0).finished()});
  r.frames.push_back({(Points(2, 3) << 4, 2, 0, 0, 0, 6).finished()});
  const auto n = normalize_video(r);
  EXPECT_EQ(n.frames[0].coords, r.frames[0].coords / 2.0);
  EXPECT_EQ(n.frames[1].coords, r.frames[1].coords / 2.0);

  PointCloudVideo flat;
  flat.frames.assign(2, {Points::Constant(4, 3, 1.5)});
  EXPECT_EQ(normalize_video(flat).frames[1].coords, Points::Zero(4, 3));
}

TEST(Normalize, PreservesMotion) {
  auto v = random_video(2, 10, 9);
  v.frames[1].coords = v.frames[0].coords.rowwise() + Eigen::RowVector3d(0.3, 0, 0);
  const auto n = normalize_video(v);
  const double radius =
      (v.frames[0].coords.rowwise() - v.frames[0].coords.colwise().mean()).rowwise().norm().maxCoeff();
  const Eigen::RowVector3d shift = (n.frames[1].coords - n.frames[0].coords).colwise().mean();
  EXPECT_NEAR(shift(0), 0.3 / radius, 1e-12);
}

TEST(Resample, Examples) {
  const auto v = random_video(1, 12, 10);
  EXPECT_EQ(resample_frame(v.frames[0], 12, 1).coords, v.frames[0].coords);

  PointCloudFrame one{(Points(1, 3) << 0.1, 0.2, 0.3).finished()};
  const auto padded = resample_frame(one, 4, 2);
  ASSERT_EQ(padded.size(), 4);
  for (Index i = 0; i < 4; ++i) EXPECT_LT((padded.coords.row(i) - one.coords.row(0)).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_EQ(resample_frame(one, 4, 2).coords, padded.coords);

  const auto big = random_video(1, 4096, 11).frames[0];
  const auto down = resample_frame(big, 2048, 3);
  ASSERT_EQ(down.size(), 2048);
  std::set<std::tuple<double, double, double>> originals;
  for (Index i = 0; i < big.size(); ++i) originals.emplace(big.coords(i, 0), big.coords(i, 1), big.coords(i, 2));
  std::set<std::tuple<double, double, double>> picked;
  for (Index i = 0; i < down.size(); ++i) {
    const auto key = std::make_tuple(down.coords(i, 0), down.coords(i, 1), down.coords(i, 2));
    EXPECT_TRUE(originals.count(key));
    picked.insert(key);
  }
  EXPECT_EQ(picked.size(), 2048u);

  EXPECT_THROW(resample_frame(PointCloudFrame{Points(0, 3)}, 4, 0), std::invalid_argument);
}

SynthConfig clean(int frames = 8) {
  SynthConfig cfg;
  cfg.noise_sigma = 0.0;
  cfg.samples_per_class = 4;
  cfg.test_per_class = 2;
  cfg.points = 64;
  cfg.frames = frames;
  return cfg;
}

TEST(Synth, CountsLabelsAndShapes) {
  const auto s = synth_generate(clean());
  ASSERT_EQ(s.size(), 36u);
  int train = 0;
  for (const auto& x : s) {
    EXPECT_EQ(x.video.num_frames(), 8);
    EXPECT_EQ(x.video.points_per_frame(), 64);
    EXPECT_EQ(x.video.label, x.entry.label);
    if (x.entry.split == Split::kTrain) ++train;
  }
  EXPECT_EQ(train, 24);
  EXPECT_THROW(synth_generate(SynthConfig{.num_classes = 7}), ConfigError);
}

TEST(Synth, StaticClassHasIdenticalFrames) {
  for (const auto& x : synth_generate(clean())) {
    if (x.entry.label != 0) continue;
    for (const auto& f : x.video.frames) EXPECT_EQ(f.coords, x.video.frames[0].coords);
  }
}

TEST(Synth, RotationClassUndoesByInverseRotation) {
  for (const auto& x : synth_generate(clean())) {
    if (x.entry.label != 3) continue;
    for (int t = 0; t < 8; ++t) {
      const double a = -kSynthRotationDegPerFrame * t * std::numbers::pi / 180.0;
      Eigen::Matrix3d r;
      r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
      const Points back = x.video.frames[static_cast<std::size_t>(t)].coords * r.transpose();
      EXPECT_LT((back - x.video.frames[0].coords).cwiseAbs().maxCoeff(), 1e-5);
    }
  }
}

TEST(Synth, TranslationClassesMoveTheCentroid) {
  for (const auto& x : synth_generate(clean())) {
    if (x.entry.label != 1 && x.entry.label != 2) continue;
    const Eigen::RowVector3d d = (x.video.frames[7].coords - x.video.frames[0].coords).colwise().mean();
    const int axis = x.entry.label == 1 ? 0 : 1;
    EXPECT_NEAR(d(axis), 7 * kSynthTranslationPerFrame, 1e-6);
    EXPECT_NEAR(d(1 - axis), 0.0, 1e-6);
  }
}

TEST(Synth, SameSeedIsByteIdentical) {
  auto cfg = clean();
  cfg.noise_sigma = 0.01;
  const auto a = write_synth_dataset(cfg, scratch("synth_a"));
  const auto b = write_synth_dataset(cfg, scratch("synth_b"));
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  EXPECT_EQ(slurp(a), slurp(b));
  const auto m = load_manifest(a);
  EXPECT_EQ(m.num_classes, 6);
  for (const auto& e : m.entries) EXPECT_EQ(slurp(m.resolve(e)), slurp(b.parent_path() / e.path));
  cfg.seed = 1;
  EXPECT_NE(synth_generate(cfg)[0].video.frames[0].coords, synth_generate(clean())[0].video.frames[0].coords);
}

// Per-axis mean signed and mean absolute displacement between consecutive
// frames, averaged over points and frames.
Eigen::RowVectorXd displacement_features(const PointCloudVideo& v) {
  Eigen::RowVectorXd f = Eigen::RowVectorXd::Zero(6);
  for (std::size_t t = 1; t < v.frames.size(); ++t) {
    const Points d = v.frames[t].coords - v.frames[t - 1].coords;
    f.head(3) += d.colwise().mean();
    f.tail(3) += d.cwiseAbs().colwise().mean();
  }
  return f / static_cast<double>(v.frames.size() - 1);
}

TEST(Synth, ClassesSeparableByNearestNeighbour) {
  const auto s = synth_generate(clean());
  std::vector<std::pair<Eigen::RowVectorXd, int>> train;
  for (const auto& x : s) {
    if (x.entry.split == Split::kTrain) train.emplace_back(displacement_features(x.video), x.entry.label);
  }
  int correct = 0;
  int total = 0;
  for (const auto& x : s) {
    if (x.entry.split != Split::kTest) continue;
    const auto f = displacement_features(x.video);
    double best = std::numeric_limits<double>::infinity();
    int label = -1;
    for (const auto& [g, l] : train) {
      if ((g - f).squaredNorm() < best) {
        best = (g - f).squaredNorm();
        label = l;
      }
    }
    correct += label == x.entry.label;
    ++total;
  }
  EXPECT_GE(static_cast<double>(correct) / total, 0.99);
}

}  // namespace
