#pragma once

#include "locus/audio_io.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

namespace locus {

/// Shoebox room. Walls are ordered x0, x1, y0, y1, z0 (floor), z1 (ceiling).
struct RoomSpec {
  std::string id;
  Eigen::Vector3d dims = Eigen::Vector3d(5.0, 4.0, 3.0);
  std::array<double, 6> absorption{0.3, 0.3, 0.3, 0.3, 0.3, 0.3};  // each in (0, 1]
  int max_order = 6;
  double speed_of_sound = 343.0;

  void validate() const;
  bool inside(const Eigen::Vector3d& p, double margin = 0.0) const;
  /// Sabine estimate 0.161 V / sum(S_i a_i).
  double rt60_sabine() const;
};

struct ImageSource {
  double distance = 0.0;  // meters, image to mic
  double gain = 0.0;      // wall reflection product, before 1/(4 pi d)
  int order = 0;
};

/// All image sources with total reflection order <= room.max_order, the
/// direct path first.
std::vector<ImageSource> image_sources(const RoomSpec& room, const Eigen::Vector3d& src, const Eigen::Vector3d& mic);

/// Impulse response at sample_rate: each image contributes gain/(4 pi d) as a
/// Hann-windowed sinc centred on its fractional delay d/c.
std::vector<double> image_source_rir(const RoomSpec& room, const Eigen::Vector3d& src, const Eigen::Vector3d& mic,
                                     int sample_rate, int sinc_taps = 81);

/// Sub-sample position of the first peak reaching half the largest |h|.
double estimate_first_arrival(const std::vector<double>& h);

/// Mic offsets around the array centre.
std::vector<Eigen::Vector3d> tetrahedral_array(double radius = 0.042);
std::vector<Eigen::Vector3d> octahedral_array(double radius = 0.0425);

struct SceneSpec {
  RoomSpec room;
  Eigen::Vector3d source = Eigen::Vector3d::Zero();
  std::vector<double> source_signal;       // length = clip samples; silence outside the event
  std::vector<std::vector<double>> noise;  // per mic; empty -> white Gaussian from the seed
  double snr_db = 20.0;                    // +inf disables noise
  std::vector<Eigen::Vector3d> mics;       // absolute positions
  Eigen::Vector3d array_center = Eigen::Vector3d::Zero();
  int class_id = 0;
  double onset_s = 0.0, offset_s = 0.0;

  void validate() const;
};

struct SynthesizedClip {
  MultichannelClip clip;
  EventLabel label;
};

/// Spatializes the source through per-mic RIRs and adds noise so that the
/// reverberant source power over all mics divided by the noise power equals
/// snr_db. Mic geometry is stored relative to the array centre.
SynthesizedClip synthesize_clip(const SceneSpec& scene, double duration_s, int sample_rate, std::uint64_t seed);

constexpr int kSyntheticClasses = 7;

/// Dry source signal of the given class: band-limited noise, harmonic
/// complexes, a chirp, or modulated noise, placed at [onset, offset).
std::vector<double> class_signal(int class_id, long n_samples, int sample_rate, double onset_s, double offset_s,
                                 std::uint64_t seed);

struct SimulationConfig {
  int sample_rate = 24000;
  double clip_duration_s = 1.0;
  int n_classes = kSyntheticClasses;
  int train_clips = 300, val_clips = 60, test_clips = 60;
  std::string array = "tetrahedral";  // or "octahedral"
  double array_radius = 0.042;
  std::vector<RoomSpec> rooms;
  double snr_min_db = 6.0, snr_max_db = 30.0;
  double distance_min = 1.0, distance_max = 2.5;
  double wall_margin = 0.3;
  double event_min_s = 0.5;
  double target_rms = 0.05;

  void validate() const;
};

/// 4-mic tetrahedral array, three rooms, 7 classes, 300/60/60 one-second
/// clips at 24 kHz.
SimulationConfig desk_preset();
/// Reads JSON; absent keys keep desk_preset() values, unknown keys throw ConfigError.
SimulationConfig load_simulation_config(const std::filesystem::path& path);

/// Writes audio under out_dir/audio and the manifest to out_dir/manifest.jsonl.
/// Deterministic given seed; each clip uses a seed derived from (seed, index).
DatasetManifest generate_dataset(const SimulationConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir);

}  // namespace locus
