#pragma once

#include "locus/audio_io.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace locus {

/// Time interval during which the listed channels carry no valid data.
struct MaskSegment {
  double start_s = 0.0;
  double end_s = 0.0;
  std::vector<int> missing;  // sorted, unique channel indices
  bool operator==(const MaskSegment&) const = default;
};

/// Per-channel availability map for one clip.
struct MaskSchedule {
  std::vector<MaskSegment> segments;  // sorted, non-overlapping
  double clip_duration_s = 0.0;
  int n_channels = 0;
  std::optional<double> target_mdp_pct;    // what the sampler was asked for
  std::optional<double> achieved_mdp_pct;  // what quantization allowed

  /// Throws DataError when segments overlap, fall outside the clip, or drop
  /// more than floor(n/2) channels at once.
  void validate() const;
  bool operator==(const MaskSchedule&) const = default;
};

/// Percentage of the clip during which at least one channel is missing.
double compute_mdp(const MaskSchedule& schedule);

struct ScheduleOptions {
  double granularity_s = 0.020;  // boundaries snap to feature-frame hops
  bool strict = false;           // throw when quantization misses the target by > 0.5 points
};

/// Draws a random schedule with the requested MDP. Masked time is split into
/// a few segments; each segment drops a subset drawn uniformly from all
/// channel subsets of size 1..max_simultaneous_m. Deterministic given seed.
MaskSchedule sample_schedule(std::uint64_t seed, double duration_s, int n_channels, double target_mdp_pct,
                             int max_simultaneous_m, const ScheduleOptions& options = {});

struct EnergySample {
  double timestamp_s = 0.0;
  std::string device;
  bool active = true;
};

/// On/off availability of energy-harvesting supplies. Each sample holds the
/// device state until that device's next sample.
struct EnergyTrace {
  std::vector<EnergySample> samples;
  void validate() const;  // timestamps strictly increasing per device
};

EnergyTrace load_energy_trace_csv(const std::filesystem::path& path);

/// A channel is missing exactly while the device powering it is inactive.
/// Devices are assumed active before their first sample. The clip duration
/// defaults to the last timestamp in the trace.
MaskSchedule schedule_from_energy_trace(const EnergyTrace& trace,
                                        const std::map<std::string, std::vector<int>>& device_to_channels,
                                        int n_channels, std::optional<double> duration_s = std::nullopt);

/// Sample index range [first, last) covered by a segment.
std::pair<long, long> segment_samples(const MaskSegment& seg, int sample_rate, long n_samples);

/// Replaces scheduled (segment x channel) samples with i.i.d. N(0, 1) draws.
/// Values are not clipped. Everything else is copied bit-for-bit.
MultichannelClip apply_perturbation(const MultichannelClip& clip, const MaskSchedule& schedule, std::uint64_t seed);

/// mask[c][i] != 0 where channel c is missing at sample i.
std::vector<std::vector<std::uint8_t>> sample_mask(const MaskSchedule& schedule, int sample_rate, long n_samples);

/// Frames whose analysis window overlaps any missing-channel segment.
std::vector<bool> masked_frames(const MaskSchedule& schedule, int sample_rate, int hop_samples, int window_samples,
                                int n_frames);

void save_schedule(const MaskSchedule& schedule, const std::filesystem::path& path);
MaskSchedule load_schedule(const std::filesystem::path& path);

}  // namespace locus
