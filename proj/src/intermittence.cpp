#include "locus/intermittence.hpp"

#include "locus/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

namespace locus {

namespace fs = std::filesystem;

void MaskSchedule::validate() const {
  if (n_channels < 2) throw DataError("mask schedule needs at least 2 channels");
  if (!(clip_duration_s > 0.0)) throw DataError("mask schedule duration must be positive");
  const int limit = n_channels / 2;
  double prev_end = 0.0;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto& s = segments[i];
    if (!(s.start_s >= 0.0 && s.start_s < s.end_s && s.end_s <= clip_duration_s + 1e-9)) {
      throw DataError("mask segment " + std::to_string(i) + " lies outside the clip or is empty");
    }
    if (i > 0 && s.start_s < prev_end - 1e-9) throw DataError("mask segments overlap or are unsorted");
    prev_end = s.end_s;
    const int m = static_cast<int>(s.missing.size());
    if (m < 1 || m > limit) {
      throw DataError("mask segment " + std::to_string(i) + " drops " + std::to_string(m) +
                      " channels; allowed 1.." + std::to_string(limit));
    }
    for (std::size_t k = 0; k < s.missing.size(); ++k) {
      const int c = s.missing[k];
      if (c < 0 || c >= n_channels) throw DataError("mask channel index out of range");
      if (k > 0 && s.missing[k - 1] >= c) throw DataError("mask channel list must be sorted and unique");
    }
  }
}

double compute_mdp(const MaskSchedule& schedule) {
  if (!(schedule.clip_duration_s > 0.0)) return 0.0;
  std::vector<std::pair<double, double>> spans;
  for (const auto& s : schedule.segments) {
    if (!s.missing.empty() && s.end_s > s.start_s) spans.emplace_back(s.start_s, s.end_s);
  }
  std::sort(spans.begin(), spans.end());
  double covered = 0.0, cur_start = 0.0, cur_end = -1.0;
  for (const auto& [a, b] : spans) {
    if (a > cur_end) {
      if (cur_end > cur_start) covered += cur_end - cur_start;
      cur_start = a;
      cur_end = b;
    } else {
      cur_end = std::max(cur_end, b);
    }
  }
  if (cur_end > cur_start) covered += cur_end - cur_start;
  return 100.0 * covered / schedule.clip_duration_s;
}

namespace {

std::vector<int> bits_to_channels(unsigned mask) {
  std::vector<int> out;
  for (int c = 0; mask; ++c, mask >>= 1) {
    if (mask & 1u) out.push_back(c);
  }
  return out;
}

}  // namespace

MaskSchedule sample_schedule(std::uint64_t seed, double duration_s, int n_channels, double target_mdp_pct,
                             int max_simultaneous_m, const ScheduleOptions& options) {
  if (!(duration_s > 0.0)) throw std::invalid_argument("sample_schedule: duration must be positive");
  if (n_channels < 2 || n_channels > 16) throw std::invalid_argument("sample_schedule: need 2..16 channels");
  if (!(target_mdp_pct >= 0.0 && target_mdp_pct <= 100.0)) throw std::invalid_argument("sample_schedule: MDP outside [0, 100]");
  if (max_simultaneous_m < 1 || max_simultaneous_m > n_channels / 2) {
    throw std::invalid_argument("sample_schedule: max_simultaneous_m must be in [1, n/2]");
  }
  std::mt19937_64 rng(seed);
  MaskSchedule sched;
  sched.clip_duration_s = duration_s;
  sched.n_channels = n_channels;
  sched.target_mdp_pct = target_mdp_pct;

  const double g = options.granularity_s;
  const int units = std::max(1, static_cast<int>(std::ceil(duration_s / g - 1e-9)));
  auto unit_start = [&](int u) { return std::min(duration_s, u * g); };
  auto masked_len = [&](int k) { return k >= units ? duration_s : k * g; };

  // Nearest feasible unit count; exact ties are broken at random so that the
  // dataset-level MDP stays unbiased.
  const double want = target_mdp_pct / 100.0 * duration_s;
  int best = 0;
  double best_err = std::abs(masked_len(0) - want);
  std::vector<int> ties{0};
  for (int k = 1; k <= units; ++k) {
    const double err = std::abs(masked_len(k) - want);
    if (err < best_err - 1e-12) {
      best_err = err;
      best = k;
      ties.assign(1, k);
    } else if (std::abs(err - best_err) <= 1e-12) {
      ties.push_back(k);
    }
  }
  if (ties.size() > 1) best = ties[std::uniform_int_distribution<std::size_t>(0, ties.size() - 1)(rng)];
  const int k = best;

  if (k > 0) {
    // Split k masked units into n_seg runs and the rest into n_seg + 1 gaps.
    const int max_seg = std::min({k, 4, units - k + 1});
    const int n_seg = std::uniform_int_distribution<int>(1, std::max(1, max_seg))(rng);
    auto compose = [&](int total, int parts, int min_part) {
      std::vector<int> out(parts, min_part);
      int rest = total - parts * min_part;
      for (int i = 0; i < rest; ++i) out[std::uniform_int_distribution<int>(0, parts - 1)(rng)]++;
      return out;
    };
    const std::vector<int> runs = compose(k, n_seg, 1);
    std::vector<int> gaps(n_seg + 1, 0);
    const int free_units = units - k;
    // interior gaps are at least one unit so runs with different subsets stay distinct
    const int interior = n_seg - 1;
    if (free_units >= interior) {
      std::vector<int> extra = compose(free_units - interior, n_seg + 1, 0);
      for (int i = 0; i <= n_seg; ++i) gaps[i] = extra[i] + ((i > 0 && i < n_seg) ? 1 : 0);
    }

    std::vector<unsigned> subsets;
    for (unsigned m = 1; m < (1u << n_channels); ++m) {
      const int pc = std::popcount(m);
      if (pc >= 1 && pc <= max_simultaneous_m) subsets.push_back(m);
    }
    std::uniform_int_distribution<std::size_t> pick(0, subsets.size() - 1);
    int u = 0;
    for (int s = 0; s < n_seg; ++s) {
      u += gaps[s];
      MaskSegment seg;
      seg.start_s = unit_start(u);
      u += runs[s];
      seg.end_s = unit_start(u);
      seg.missing = bits_to_channels(subsets[pick(rng)]);
      if (seg.end_s > seg.start_s) sched.segments.push_back(std::move(seg));
    }
  }

  const double achieved = compute_mdp(sched);
  sched.achieved_mdp_pct = achieved;
  if (options.strict && std::abs(achieved - target_mdp_pct) > 0.5) {
    std::ostringstream os;
    os << "target MDP " << target_mdp_pct << "% is infeasible at " << g * 1000.0 << " ms granularity for a "
       << duration_s << " s clip (nearest " << achieved << "%)";
    throw DataError(os.str());
  }
  sched.validate();
  return sched;
}

void EnergyTrace::validate() const {
  std::map<std::string, double> last;
  for (const auto& s : samples) {
    auto it = last.find(s.device);
    if (it != last.end() && !(s.timestamp_s > it->second)) {
      throw DataError("energy trace timestamps for device '" + s.device + "' are not strictly increasing");
    }
    if (s.timestamp_s < 0.0) throw DataError("negative energy trace timestamp");
    last[s.device] = s.timestamp_s;
  }
}

EnergyTrace load_energy_trace_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open energy trace: " + path.string());
  EnergyTrace trace;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      const auto b = cell.find_first_not_of(" \t");
      const auto e = cell.find_last_not_of(" \t");
      cols.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    if (cols.size() != 3) throw DataError("energy trace line " + std::to_string(lineno) + ": expected 3 columns");
    if (lineno == 1 && cols[0] == "timestamp") continue;
    EnergySample s;
    try {
      s.timestamp_s = std::stod(cols[0]);
    } catch (const std::exception&) {
      throw DataError("energy trace line " + std::to_string(lineno) + ": bad timestamp '" + cols[0] + "'");
    }
    s.device = cols[1];
    const std::string& a = cols[2];
    if (a == "1" || a == "true" || a == "on") {
      s.active = true;
    } else if (a == "0" || a == "false" || a == "off") {
      s.active = false;
    } else {
      throw DataError("energy trace line " + std::to_string(lineno) + ": bad active flag '" + a + "'");
    }
    trace.samples.push_back(std::move(s));
  }
  trace.validate();
  return trace;
}

MaskSchedule schedule_from_energy_trace(const EnergyTrace& trace,
                                        const std::map<std::string, std::vector<int>>& device_to_channels,
                                        int n_channels, std::optional<double> duration_s) {
  trace.validate();
  std::map<std::string, std::vector<EnergySample>> per_device;
  double last_ts = 0.0;
  for (const auto& s : trace.samples) {
    auto it = device_to_channels.find(s.device);
    if (it == device_to_channels.end() || it->second.empty()) {
      throw DataError("energy trace device '" + s.device + "' is not mapped to any channel");
    }
    per_device[s.device].push_back(s);
    last_ts = std::max(last_ts, s.timestamp_s);
  }
  const double duration = duration_s.value_or(last_ts);
  MaskSchedule sched;
  sched.clip_duration_s = duration;
  sched.n_channels = n_channels;
  if (!(duration > 0.0)) throw DataError("energy trace spans zero time");

  std::set<double> cuts{0.0, duration};
  for (const auto& s : trace.samples) {
    if (s.timestamp_s > 0.0 && s.timestamp_s < duration) cuts.insert(s.timestamp_s);
  }
  auto active_at = [&](const std::vector<EnergySample>& v, double t) {
    bool active = true;
    for (const auto& s : v) {
      if (s.timestamp_s <= t) active = s.active;
      else break;
    }
    return active;
  };

  const std::vector<double> pts(cuts.begin(), cuts.end());
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const double a = pts[i], b = pts[i + 1];
    std::set<int> missing;
    for (const auto& [dev, samples] : per_device) {
      if (!active_at(samples, a)) {
        for (int c : device_to_channels.at(dev)) {
          if (c < 0 || c >= n_channels) throw DataError("device '" + dev + "' maps to channel out of range");
          missing.insert(c);
        }
      }
    }
    if (missing.empty()) continue;
    std::vector<int> ch(missing.begin(), missing.end());
    if (!sched.segments.empty() && sched.segments.back().missing == ch && std::abs(sched.segments.back().end_s - a) < 1e-12) {
      sched.segments.back().end_s = b;
    } else {
      sched.segments.push_back({a, b, std::move(ch)});
    }
  }
  sched.achieved_mdp_pct = compute_mdp(sched);
  sched.validate();
  return sched;
}

std::pair<long, long> segment_samples(const MaskSegment& seg, int sample_rate, long n_samples) {
  const long a = std::clamp(static_cast<long>(std::llround(seg.start_s * sample_rate)), 0L, n_samples);
  const long b = std::clamp(static_cast<long>(std::llround(seg.end_s * sample_rate)), 0L, n_samples);
  return {a, b};
}

MultichannelClip apply_perturbation(const MultichannelClip& clip, const MaskSchedule& schedule, std::uint64_t seed) {
  if (std::abs(schedule.clip_duration_s - clip.duration_s()) > 1.0 / clip.sample_rate + 1e-9) {
    throw DataError("mask schedule duration " + std::to_string(schedule.clip_duration_s) +
                    " s does not match clip duration " + std::to_string(clip.duration_s()) + " s");
  }
  if (schedule.n_channels != clip.n_channels()) throw DataError("mask schedule channel count does not match clip");
  MultichannelClip out = clip;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (const auto& seg : schedule.segments) {
    const auto [a, b] = segment_samples(seg, clip.sample_rate, clip.n_samples());
    for (int c : seg.missing) {
      for (long i = a; i < b; ++i) out.samples(c, i) = static_cast<float>(noise(rng));
    }
  }
  return out;
}

std::vector<std::vector<std::uint8_t>> sample_mask(const MaskSchedule& schedule, int sample_rate, long n_samples) {
  std::vector<std::vector<std::uint8_t>> mask(schedule.n_channels, std::vector<std::uint8_t>(n_samples, 0));
  for (const auto& seg : schedule.segments) {
    const auto [a, b] = segment_samples(seg, sample_rate, n_samples);
    for (int c : seg.missing) std::fill(mask[c].begin() + a, mask[c].begin() + b, 1);
  }
  return mask;
}

std::vector<bool> masked_frames(const MaskSchedule& schedule, int sample_rate, int hop_samples, int window_samples,
                                int n_frames) {
  std::vector<bool> out(n_frames, false);
  const long total = static_cast<long>(n_frames - 1) * hop_samples + window_samples;
  for (const auto& seg : schedule.segments) {
    const auto [a, b] = segment_samples(seg, sample_rate, std::max<long>(total, std::llround(schedule.clip_duration_s * sample_rate)));
    for (int t = 0; t < n_frames; ++t) {
      const long f0 = static_cast<long>(t) * hop_samples, f1 = f0 + window_samples;
      if (a < f1 && b > f0) out[t] = true;
    }
  }
  return out;
}

void save_schedule(const MaskSchedule& s, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write schedule: " + path.string());
  out << std::setprecision(17);
  out << "locus-mask-schedule 1\n";
  out << "duration_s " << s.clip_duration_s << "\n";
  out << "n_channels " << s.n_channels << "\n";
  if (s.target_mdp_pct) out << "target_mdp_pct " << *s.target_mdp_pct << "\n";
  if (s.achieved_mdp_pct) out << "achieved_mdp_pct " << *s.achieved_mdp_pct << "\n";
  for (const auto& seg : s.segments) {
    out << "segment " << seg.start_s << ' ' << seg.end_s << ' ';
    for (std::size_t i = 0; i < seg.missing.size(); ++i) out << (i ? "," : "") << seg.missing[i];
    out << "\n";
  }
}

MaskSchedule load_schedule(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open schedule: " + path.string());
  MaskSchedule s;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (!header) {
      int version = 0;
      ls >> version;
      if (key != "locus-mask-schedule" || version != 1) throw DataError("not a mask schedule (v1): " + path.string());
      header = true;
    } else if (key == "duration_s") {
      ls >> s.clip_duration_s;
    } else if (key == "n_channels") {
      ls >> s.n_channels;
    } else if (key == "target_mdp_pct") {
      double v;
      ls >> v;
      s.target_mdp_pct = v;
    } else if (key == "achieved_mdp_pct") {
      double v;
      ls >> v;
      s.achieved_mdp_pct = v;
    } else if (key == "segment") {
      MaskSegment seg;
      std::string chans;
      ls >> seg.start_s >> seg.end_s >> chans;
      std::stringstream cs(chans);
      std::string c;
      while (std::getline(cs, c, ',')) seg.missing.push_back(std::stoi(c));
      s.segments.push_back(std::move(seg));
    } else {
      throw DataError("unknown schedule record '" + key + "' in " + path.string());
    }
    if (ls.fail()) throw DataError("malformed schedule line in " + path.string() + ": " + line);
  }
  if (!header) throw DataError("empty schedule file: " + path.string());
  s.validate();
  return s;
}

}  // namespace locus
