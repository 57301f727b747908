#include "locus/baselines.hpp"

#include "locus/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace locus {

std::string to_string(ImputationMethod m) {
  switch (m) {
    case ImputationMethod::Mean: return "mean";
    case ImputationMethod::Hotdeck: return "hotdeck";
    case ImputationMethod::Prob: return "prob";
    case ImputationMethod::Autoenc: return "autoenc";
    case ImputationMethod::CorruptPassthrough: return "corrupt-passthrough";
  }
  return "?";
}

ImputationMethod imputation_from_string(const std::string& s) {
  if (s == "mean") return ImputationMethod::Mean;
  if (s == "hotdeck") return ImputationMethod::Hotdeck;
  if (s == "prob") return ImputationMethod::Prob;
  if (s == "autoenc") return ImputationMethod::Autoenc;
  if (s == "corrupt-passthrough") return ImputationMethod::CorruptPassthrough;
  throw ConfigError("unknown imputation method '" + s + "'");
}

bool is_time_domain(ImputationMethod m) {
  return m == ImputationMethod::Mean || m == ImputationMethod::Hotdeck || m == ImputationMethod::Prob;
}

namespace {

void check_shapes(const MultichannelClip& clip, const MaskSchedule& schedule) {
  if (schedule.n_channels != clip.n_channels()) {
    throw DataError("schedule has " + std::to_string(schedule.n_channels) + " channels, clip has " +
                    std::to_string(clip.n_channels()));
  }
}

std::vector<int> available_channels(const MaskSegment& seg, int n_channels) {
  std::vector<int> avail;
  for (int c = 0; c < n_channels; ++c) {
    if (std::find(seg.missing.begin(), seg.missing.end(), c) == seg.missing.end()) avail.push_back(c);
  }
  return avail;
}

void fill_mean(MultichannelClip& out, int channel, const std::vector<int>& avail, long a, long b) {
  for (long i = a; i < b; ++i) {
    double s = 0.0;
    for (int c : avail) s += out.samples(c, i);
    out.samples(channel, i) = static_cast<float>(s / static_cast<double>(avail.size()));
  }
}

}  // namespace

MultichannelClip mean_impute(const MultichannelClip& clip, const MaskSchedule& schedule) {
  check_shapes(clip, schedule);
  MultichannelClip out = clip;
  for (const auto& seg : schedule.segments) {
    const auto avail = available_channels(seg, clip.n_channels());
    if (avail.empty()) throw DataError("mean_impute: every channel is missing in a segment");
    const auto [a, b] = segment_samples(seg, clip.sample_rate, clip.n_samples());
    // available channels are untouched within the segment, so order is irrelevant
    for (int c : seg.missing) fill_mean(out, c, avail, a, b);
  }
  return out;
}

MultichannelClip hotdeck_impute(const MultichannelClip& clip, const MaskSchedule& schedule) {
  check_shapes(clip, schedule);
  MultichannelClip out = clip;
  const auto mask = sample_mask(schedule, clip.sample_rate, clip.n_samples());
  const long n = clip.n_samples();
  auto pearson = [&](int x, int y) {
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    long cnt = 0;
    for (long i = 0; i < n; ++i) {
      if (mask[x][i] || mask[y][i]) continue;
      const double vx = clip.samples(x, i), vy = clip.samples(y, i);
      sx += vx;
      sy += vy;
      sxx += vx * vx;
      syy += vy * vy;
      sxy += vx * vy;
      ++cnt;
    }
    if (cnt < 2) return std::numeric_limits<double>::quiet_NaN();
    const double cov = sxy - sx * sy / cnt;
    const double vx = sxx - sx * sx / cnt, vy = syy - sy * sy / cnt;
    if (vx <= 0.0 || vy <= 0.0) return std::numeric_limits<double>::quiet_NaN();
    return cov / std::sqrt(vx * vy);
  };
  for (const auto& seg : schedule.segments) {
    const auto avail = available_channels(seg, clip.n_channels());
    if (avail.empty()) throw DataError("hotdeck_impute: every channel is missing in a segment");
    const auto [a, b] = segment_samples(seg, clip.sample_rate, clip.n_samples());
    for (int c : seg.missing) {
      int donor = -1;
      double best = -std::numeric_limits<double>::infinity();
      for (int d : avail) {
        const double r = pearson(c, d);
        if (std::isfinite(r) && r > best) {
          best = r;
          donor = d;
        }
      }
      if (donor < 0) {
        fill_mean(out, c, avail, a, b);
        continue;
      }
      for (long i = a; i < b; ++i) out.samples(c, i) = clip.samples(donor, i);
    }
  }
  return out;
}

MultichannelClip prob_impute(const MultichannelClip& clip, const MaskSchedule& schedule, std::uint64_t seed) {
  check_shapes(clip, schedule);
  MultichannelClip out = clip;
  const auto mask = sample_mask(schedule, clip.sample_rate, clip.n_samples());
  const int channels = clip.n_channels();
  const long n = clip.n_samples();
  std::vector<double> mean(channels, 0.0), sd(channels, 0.0);
  std::vector<long> count(channels, 0);
  double pooled_sq = 0.0;
  long pooled_n = 0;
  for (int c = 0; c < channels; ++c) {
    double s = 0, ss = 0;
    for (long i = 0; i < n; ++i) {
      if (mask[c][i]) continue;
      const double v = clip.samples(c, i);
      s += v;
      ss += v * v;
      ++count[c];
    }
    pooled_sq += ss;
    pooled_n += count[c];
    if (count[c] > 0) {
      mean[c] = s / count[c];
      sd[c] = std::sqrt(std::max(0.0, ss / count[c] - mean[c] * mean[c]));
    }
  }
  const double pooled_sd = pooled_n > 0 ? std::sqrt(pooled_sq / pooled_n) : 0.0;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (const auto& seg : schedule.segments) {
    const auto [a, b] = segment_samples(seg, clip.sample_rate, clip.n_samples());
    for (int c : seg.missing) {
      const double mu = count[c] > 0 ? mean[c] : 0.0;
      const double sigma = count[c] > 0 ? sd[c] : pooled_sd;
      for (long i = a; i < b; ++i) out.samples(c, i) = static_cast<float>(mu + sigma * gauss(rng));
    }
  }
  return out;
}

MultichannelClip impute_clip(ImputationMethod method, const MultichannelClip& clip, const MaskSchedule& schedule,
                             std::uint64_t seed) {
  switch (method) {
    case ImputationMethod::Mean: return mean_impute(clip, schedule);
    case ImputationMethod::Hotdeck: return hotdeck_impute(clip, schedule);
    case ImputationMethod::Prob: return prob_impute(clip, schedule, seed);
    case ImputationMethod::Autoenc:
    case ImputationMethod::CorruptPassthrough: return clip;
  }
  return clip;
}

nn::Tensor<float> autoenc_impute(const nn::Tensor<float>& f_tilde, Lafs<float>& lafs) {
  if (!lafs.trained) throw std::logic_error("autoenc_impute: LaFS parameters are untrained");
  return recover<float>(f_tilde, nullptr, &lafs, RecoveryMode::LafsOnly, false).f_hat;
}

}  // namespace locus
