#pragma once

// Dataset plumbing: the PCV1 binary video format, JSON-lines manifests,
// clip sampling, normalization, resampling and the synthetic motion dataset.
//
// PCV1 layout (all little-endian):
//   bytes 0..3   "PCV1"
//   uint32       frame count T
//   uint32       points per frame N
//   uint32       channels C (must be 3)
//   float32[T*N*C] frame-major, then point-major, then channel-major

#include "pcv/video.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pcv::data {

std::vector<std::uint8_t> write_pcv(const PointCloudVideo& video);
PointCloudVideo read_pcv(std::span<const std::uint8_t> bytes);

void save_pcv(const std::filesystem::path& path, const PointCloudVideo& video);
PointCloudVideo load_pcv(const std::filesystem::path& path);

enum class Split { kTrain, kTest };

Split split_from_string(const std::string& s);
const char* to_string(Split s);

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  int label = 0;
  Split split = Split::kTrain;
  std::optional<int> subject;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  int num_classes = 0;

  std::vector<ManifestEntry> split(Split s) const;
  std::filesystem::path resolve(const ManifestEntry& e) const { return root / e.path; }
};

// Parses newline-delimited JSON with keys {path, label, split, subject}.
// Rejects missing files, non-contiguous labels and unknown splits.
Manifest load_manifest(const std::filesystem::path& path);
std::string manifest_line(const ManifestEntry& e);

enum class ClipMode { kRandomStart, kUniformCover };

// Contiguous windows of clip_len frames. random_start draws one window under
// seed; uniform_cover returns ceil(T/L) evenly spaced windows.
std::vector<PointCloudVideo> clip_sample(const PointCloudVideo& video, int clip_len, ClipMode mode,
                                         std::uint64_t seed = 0);

// Removes frame 0's centroid and divides by frame 0's max radius; the same
// transform applies to every frame.
PointCloudVideo normalize_video(const PointCloudVideo& video);

// Exactly target_n points: FPS-downsample, repeat-pad with seeded jitter
// (sigma 1e-4), or pass through.
PointCloudFrame resample_frame(const PointCloudFrame& frame, int target_n, std::uint64_t seed);

struct SynthConfig {
  int num_classes = 6;
  int samples_per_class = 40;  // train split
  int test_per_class = 10;
  int points = 128;
  int frames = 8;
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;
};

struct SynthSample {
  PointCloudVideo video;
  ManifestEntry entry;
};

// Points on the unit sphere animated by a class motion:
// 0 static, 1 +x translation, 2 +y translation, 3 rotation about z,
// 4 oscillating uniform scale, 5 shear drift, plus Gaussian jitter.
std::vector<SynthSample> synth_generate(const SynthConfig& cfg);

// Writes every sample as PCV1 plus manifest.jsonl under out_dir.
std::filesystem::path write_synth_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir);

// Motion constants of the synthetic classes.
inline constexpr double kSynthTranslationPerFrame = 0.05;
inline constexpr double kSynthRotationDegPerFrame = 10.0;
inline constexpr double kSynthScaleAmplitude = 0.10;
inline constexpr double kSynthScalePeriodFrames = 8.0;
inline constexpr double kSynthShearPerFrame = 0.05;

}  // namespace pcv::data
