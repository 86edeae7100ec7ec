#include "pcv/data.hpp"

#include "pcv/errors.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>

namespace pcv::data {

namespace fs = std::filesystem;
using Eigen::Index;

namespace {

constexpr char kMagic[4] = {'P', 'C', 'V', '1'};
constexpr std::size_t kHeaderBytes = 16;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[offset + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(DataErrorCode::kMissingFile, path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<std::uint8_t> write_pcv(const PointCloudVideo& video) {
  const auto t = static_cast<std::uint32_t>(video.frames.size());
  const auto n = static_cast<std::uint32_t>(video.points_per_frame());
  for (const auto& f : video.frames) {
    if (f.size() != static_cast<Index>(n)) throw DataError(DataErrorCode::kShapeMismatch, "frames differ in point count");
  }
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + static_cast<std::size_t>(t) * n * 3 * 4);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, t);
  put_u32(out, n);
  put_u32(out, 3);
  for (const auto& f : video.frames) {
    for (Index i = 0; i < f.coords.rows(); ++i) {
      for (Index c = 0; c < 3; ++c) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(f.coords(i, c))));
    }
  }
  return out;
}

PointCloudVideo read_pcv(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw DataError(DataErrorCode::kBadMagic, "expected PCV1");
  }
  if (bytes.size() < kHeaderBytes) throw DataError(DataErrorCode::kBadHeader, "header shorter than 16 bytes");
  const std::uint32_t t = get_u32(bytes, 4);
  const std::uint32_t n = get_u32(bytes, 8);
  const std::uint32_t c = get_u32(bytes, 12);
  if (c != 3) throw DataError(DataErrorCode::kUnsupportedChannels, "C=" + std::to_string(c));
  const std::uint64_t floats = static_cast<std::uint64_t>(t) * n * c;
  const std::uint64_t have = (bytes.size() - kHeaderBytes) / 4;
  if (have < floats || (bytes.size() - kHeaderBytes) < floats * 4) {
    throw DataError(DataErrorCode::kTruncatedPayload,
                    "need " + std::to_string(floats) + " floats, have " + std::to_string(have));
  }
  if (bytes.size() - kHeaderBytes != floats * 4) {
    throw DataError(DataErrorCode::kTrailingBytes, std::to_string(bytes.size() - kHeaderBytes - floats * 4) + " extra");
  }
  PointCloudVideo video;
  video.frames.resize(t);
  std::size_t offset = kHeaderBytes;
  for (auto& f : video.frames) {
    f.coords.resize(n, 3);
    for (Index i = 0; i < static_cast<Index>(n); ++i) {
      for (Index k = 0; k < 3; ++k) {
        f.coords(i, k) = std::bit_cast<float>(get_u32(bytes, offset));
        offset += 4;
      }
    }
  }
  return video;
}

void save_pcv(const fs::path& path, const PointCloudVideo& video) {
  const auto bytes = write_pcv(video);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError(DataErrorCode::kIo, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

PointCloudVideo load_pcv(const fs::path& path) {
  const auto bytes = read_file(path);
  auto video = read_pcv(bytes);
  video.meta["source"] = path.string();
  return video;
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw DataError(DataErrorCode::kUnknownSplit, "'" + s + "'");
}

const char* to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

std::vector<ManifestEntry> Manifest::split(Split s) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    if (e.split == s) out.push_back(e);
  }
  return out;
}

std::string manifest_line(const ManifestEntry& e) {
  nlohmann::json j = {{"path", e.path}, {"label", e.label}, {"split", to_string(e.split)}};
  j["subject"] = e.subject ? nlohmann::json(*e.subject) : nlohmann::json(nullptr);
  return j.dump();
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError(DataErrorCode::kMissingFile, "manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  int line_no = 0;
  std::set<int> labels;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    ManifestEntry e;
    try {
      j = nlohmann::json::parse(line);
      e.path = j.at("path").get<std::string>();
      e.label = j.at("label").get<int>();
      if (j.contains("subject") && !j["subject"].is_null()) e.subject = j["subject"].get<int>();
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(DataErrorCode::kMalformedManifest, "line " + std::to_string(line_no) + ": " + ex.what());
    }
    if (!j.contains("split") || !j["split"].is_string()) {
      throw DataError(DataErrorCode::kMalformedManifest, "line " + std::to_string(line_no) + ": missing split");
    }
    e.split = split_from_string(j["split"].get<std::string>());
    if (!fs::exists(m.root / e.path)) throw DataError(DataErrorCode::kMissingFile, (m.root / e.path).string());
    labels.insert(e.label);
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) throw DataError(DataErrorCode::kMalformedManifest, "manifest is empty");
  int expected = 0;
  for (int l : labels) {
    if (l != expected++) throw DataError(DataErrorCode::kNonContiguousLabels, "labels must cover 0.." +
                                                                                  std::to_string(labels.size() - 1));
  }
  m.num_classes = static_cast<int>(labels.size());
  return m;
}

std::vector<PointCloudVideo> clip_sample(const PointCloudVideo& video, int clip_len, ClipMode mode, std::uint64_t seed) {
  const int t = video.num_frames();
  if (clip_len < 1) throw std::invalid_argument("clip length must be positive");
  if (clip_len > t) throw std::invalid_argument("clip length exceeds video length");
  const auto window = [&](int start) {
    PointCloudVideo clip;
    clip.label = video.label;
    clip.meta = video.meta;
    clip.frames.assign(video.frames.begin() + start, video.frames.begin() + start + clip_len);
    return clip;
  };
  std::vector<PointCloudVideo> clips;
  if (mode == ClipMode::kRandomStart) {
    std::mt19937_64 rng(seed);
    clips.push_back(window(std::uniform_int_distribution<int>(0, t - clip_len)(rng)));
    return clips;
  }
  const int n = (t + clip_len - 1) / clip_len;
  for (int i = 0; i < n; ++i) clips.push_back(window(n == 1 ? 0 : (i * (t - clip_len)) / (n - 1)));
  return clips;
}

PointCloudVideo normalize_video(const PointCloudVideo& video) {
  if (video.frames.empty() || video.frames.front().size() == 0) throw std::invalid_argument("normalize: empty video");
  const auto& f0 = video.frames.front().coords;
  const Eigen::RowVector3d centroid = f0.colwise().mean();
  double radius = (f0.rowwise() - centroid).rowwise().norm().maxCoeff();
  if (!(radius > 1e-12)) radius = 1.0;
  PointCloudVideo out = video;
  for (auto& f : out.frames) f.coords = (f.coords.rowwise() - centroid) / radius;
  return out;
}

PointCloudFrame resample_frame(const PointCloudFrame& frame, int target_n, std::uint64_t seed) {
  const Index n = frame.size();
  if (n == 0) throw std::invalid_argument("resample: empty frame");
  if (target_n < 1) throw std::invalid_argument("resample: target must be positive");
  if (n == target_n) return frame;
  PointCloudFrame out;
  out.coords.resize(target_n, 3);
  if (n > target_n) {
    const auto idx = geom::farthest_point_sample(frame.coords, target_n);
    for (Index i = 0; i < target_n; ++i) out.coords.row(i) = frame.coords.row(idx[static_cast<std::size_t>(i)]);
    return out;
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> jitter(0.0, 1e-4);
  out.coords.topRows(n) = frame.coords;
  for (Index i = n; i < target_n; ++i) {
    out.coords.row(i) = frame.coords.row(i % n);
    for (Index c = 0; c < 3; ++c) out.coords(i, c) += jitter(rng);
  }
  return out;
}

std::vector<SynthSample> synth_generate(const SynthConfig& cfg) {
  if (cfg.num_classes < 1 || cfg.num_classes > 6) throw ConfigError("synthetic data supports 1..6 classes");
  if (cfg.points < 1 || cfg.frames < 2) throw ConfigError("synthetic data needs points >= 1 and frames >= 2");
  if (cfg.samples_per_class < 0 || cfg.test_per_class < 0) throw ConfigError("sample counts must be non-negative");
  if (cfg.noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");

  std::vector<SynthSample> out;
  const int per_class = cfg.samples_per_class + cfg.test_per_class;
  for (int label = 0; label < cfg.num_classes; ++label) {
    for (int i = 0; i < per_class; ++i) {
      std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed & 0xFFFFFFFFu), static_cast<std::uint32_t>(cfg.seed >> 32),
                        static_cast<std::uint32_t>(label), static_cast<std::uint32_t>(i)};
      std::mt19937_64 rng(seq);
      std::normal_distribution<double> normal(0.0, 1.0);

      Points base(cfg.points, 3);
      for (Index p = 0; p < cfg.points; ++p) {
        Eigen::RowVector3d v;
        do {
          v = {normal(rng), normal(rng), normal(rng)};
        } while (v.norm() < 1e-9);
        base.row(p) = v / v.norm();
      }

      SynthSample s;
      const bool train = i < cfg.samples_per_class;
      const int index = train ? i : i - cfg.samples_per_class;
      s.entry.split = train ? Split::kTrain : Split::kTest;
      s.entry.label = label;
      s.entry.subject = i;
      s.entry.path = "samples/c" + std::to_string(label) + "_" + to_string(s.entry.split) + "_" + std::to_string(index) +
                     ".pcv";
      s.video.label = label;
      for (int t = 0; t < cfg.frames; ++t) {
        const double td = static_cast<double>(t);
        Points frame = base;
        switch (label) {
          case 0:
            break;
          case 1:
            frame.col(0).array() += kSynthTranslationPerFrame * td;
            break;
          case 2:
            frame.col(1).array() += kSynthTranslationPerFrame * td;
            break;
          case 3: {
            const double a = kSynthRotationDegPerFrame * td * std::numbers::pi / 180.0;
            const Eigen::VectorXd x = base.col(0);
            const Eigen::VectorXd y = base.col(1);
            frame.col(0) = std::cos(a) * x - std::sin(a) * y;
            frame.col(1) = std::sin(a) * x + std::cos(a) * y;
            break;
          }
          case 4:
            frame *= 1.0 + kSynthScaleAmplitude * std::sin(2.0 * std::numbers::pi * td / kSynthScalePeriodFrames);
            break;
          case 5:
            frame.col(0) += kSynthShearPerFrame * td * base.col(2);
            break;
        }
        if (cfg.noise_sigma > 0.0) {
          std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
          for (Index k = 0; k < frame.size(); ++k) frame.data()[k] += noise(rng);
        }
        // Stored precision is float32; round here so in-memory and on-disk
        // samples agree exactly.
        frame = frame.cast<float>().cast<double>();
        s.video.frames.push_back({std::move(frame)});
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

fs::path write_synth_dataset(const SynthConfig& cfg, const fs::path& out_dir) {
  const auto samples = synth_generate(cfg);
  fs::create_directories(out_dir / "samples");
  const fs::path manifest = out_dir / "manifest.jsonl";
  std::ofstream m(manifest);
  if (!m) throw DataError(DataErrorCode::kIo, "cannot write " + manifest.string());
  for (const auto& s : samples) {
    save_pcv(out_dir / s.entry.path, s.video);
    m << manifest_line(s.entry) << '\n';
  }
  return manifest;
}

}  // namespace pcv::data
