#pragma once

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace locus {

/// Channels are rows; each channel is contiguous.
using SampleMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// n-channel time-domain audio plus array geometry.
struct MultichannelClip {
  SampleMatrix samples;                          // [n_channels x n_samples], normalized floats
  int sample_rate = 0;                           // Hz
  std::vector<Eigen::Vector3d> channel_geometry;  // mic positions in meters (may be empty)
  std::string clip_id;

  int n_channels() const { return static_cast<int>(samples.rows()); }
  long n_samples() const { return static_cast<long>(samples.cols()); }
  double duration_s() const { return sample_rate > 0 ? static_cast<double>(n_samples()) / sample_rate : 0.0; }

  /// Throws DataError if the clip violates its invariants.
  void validate(int min_channels = 2) const;
};

enum class SampleFormat { Pcm16, Pcm24, Pcm32, Float32 };

/// Reads a RIFF/WAVE file (PCM 16/24/32-bit int, 32-bit float, or the
/// extensible variants). Mic geometry is restored when the file carries it.
MultichannelClip load_clip(const std::filesystem::path& path, int min_channels = 2);

/// Writes a RIFF/WAVE file. Geometry is stored in a private chunk that other
/// readers ignore.
void save_clip(const MultichannelClip& clip, const std::filesystem::path& path,
               SampleFormat format = SampleFormat::Float32);

struct EventLabel {
  int class_id = 0;
  double onset_s = 0.0;
  double offset_s = 0.0;
  Eigen::Vector3d doa_unit = Eigen::Vector3d::UnitX();

  void validate(int n_classes, double clip_duration_s) const;
  bool operator==(const EventLabel&) const = default;
};

enum class Split { Train, Val, Test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct EnvironmentInfo {
  std::string room_id;
  Eigen::Vector3d room_dims = Eigen::Vector3d::Zero();
  double rt60_s = 0.0;
  double snr_db = 0.0;
  bool operator==(const EnvironmentInfo&) const = default;
};

struct ManifestEntry {
  std::string clip;  // path relative to the manifest directory (or absolute)
  Split split = Split::Train;
  std::vector<EventLabel> labels;
  EnvironmentInfo environment;
  std::optional<std::string> schedule;  // mask schedule file, when perturbed
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  static constexpr int kSchemaVersion = 1;

  int sample_rate = 0;
  int n_classes = 0;
  std::vector<Eigen::Vector3d> mic_positions;
  std::map<std::string, std::string> attributes;  // free-form provenance (e.g. perturbation settings)
  std::vector<ManifestEntry> entries;

  std::vector<const ManifestEntry*> split(Split s) const;
  bool operator==(const DatasetManifest&) const = default;
};

/// One JSON object per line: a header record carrying the schema version,
/// then one record per clip.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Validates schema version, split disjointness, and that every clip exists.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Resolves an entry's clip path against the manifest location.
std::filesystem::path resolve_path(const std::filesystem::path& manifest_path, const std::string& relative);

}  // namespace locus
