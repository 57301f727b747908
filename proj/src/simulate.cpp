#include "locus/simulate.hpp"

#include "locus/dsp.hpp"
#include "locus/errors.hpp"
#include "locus/nn/tensor.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

namespace locus {

using Eigen::Vector3d;

// ------------------------------------------------------------------ room

void RoomSpec::validate() const {
  if (!(dims.minCoeff() > 0.0)) throw ConfigError("room '" + id + "' must have positive dimensions");
  for (double a : absorption) {
    if (!(a > 0.0 && a <= 1.0)) throw ConfigError("room '" + id + "' absorption must lie in (0, 1]");
  }
  if (max_order < 0) throw ConfigError("room '" + id + "' max_order must be >= 0");
  if (!(speed_of_sound > 0.0)) throw ConfigError("speed of sound must be positive");
}

bool RoomSpec::inside(const Vector3d& p, double margin) const {
  for (int i = 0; i < 3; ++i) {
    if (!(p[i] > margin && p[i] < dims[i] - margin)) return false;
  }
  return true;
}

double RoomSpec::rt60_sabine() const {
  const double lx = dims.x(), ly = dims.y(), lz = dims.z();
  const double area[6] = {ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly};
  double a = 0.0;
  for (int i = 0; i < 6; ++i) a += area[i] * absorption[i];
  return 0.161 * lx * ly * lz / a;
}

std::vector<ImageSource> image_sources(const RoomSpec& room, const Vector3d& src, const Vector3d& mic) {
  room.validate();
  if (!room.inside(src)) throw DataError("source lies outside the room");
  if (!room.inside(mic)) throw DataError("microphone lies outside the room");
  std::array<double, 6> beta;
  for (int i = 0; i < 6; ++i) beta[i] = std::sqrt(1.0 - room.absorption[i]);
  const int n_max = room.max_order;
  std::vector<ImageSource> out;
  // per axis: image coordinate and reflection counts (wall at 0, wall at L)
  struct AxisImage {
    double coord;
    int low, high;
  };
  std::array<std::vector<AxisImage>, 3> axes;
  for (int ax = 0; ax < 3; ++ax) {
    const double l = room.dims[ax], s = src[ax];
    for (int n = -n_max - 1; n <= n_max + 1; ++n) {
      for (int q = 0; q <= 1; ++q) {
        const int low = std::abs(n - q), high = std::abs(n);
        if (low + high > n_max) continue;
        axes[ax].push_back({(q ? -s : s) + 2.0 * n * l, low, high});
      }
    }
  }
  for (const auto& ix : axes[0]) {
    for (const auto& iy : axes[1]) {
      const int oxy = ix.low + ix.high + iy.low + iy.high;
      if (oxy > n_max) continue;
      for (const auto& iz : axes[2]) {
        const int order = oxy + iz.low + iz.high;
        if (order > n_max) continue;
        const Vector3d img(ix.coord, iy.coord, iz.coord);
        const double gain = std::pow(beta[0], ix.low) * std::pow(beta[1], ix.high) * std::pow(beta[2], iy.low) *
                            std::pow(beta[3], iy.high) * std::pow(beta[4], iz.low) * std::pow(beta[5], iz.high);
        out.push_back({(img - mic).norm(), gain, order});
      }
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const ImageSource& a, const ImageSource& b) {
    return a.order != b.order ? a.order < b.order : a.distance < b.distance;
  });
  return out;
}

std::vector<double> image_source_rir(const RoomSpec& room, const Vector3d& src, const Vector3d& mic, int sample_rate,
                                     int sinc_taps) {
  if (sinc_taps < 1 || sinc_taps % 2 == 0) throw std::invalid_argument("sinc_taps must be odd");
  if ((src - mic).norm() < 1e-6) throw DataError("source coincides with a microphone");
  const auto images = image_sources(room, src, mic);
  const int half = sinc_taps / 2;
  double max_delay = 0.0;
  for (const auto& im : images) max_delay = std::max(max_delay, im.distance / room.speed_of_sound * sample_rate);
  std::vector<double> h(static_cast<std::size_t>(std::ceil(max_delay)) + half + 2, 0.0);
  for (const auto& im : images) {
    const double delay = im.distance / room.speed_of_sound * sample_rate;
    const double amp = im.gain / (4.0 * std::numbers::pi * im.distance);
    const long first = static_cast<long>(std::ceil(delay - half));
    const long last = static_cast<long>(std::floor(delay + half));
    for (long n = std::max(0L, first); n <= last; ++n) {
      const double x = n - delay;
      const double window = 0.5 + 0.5 * std::cos(std::numbers::pi * x / (half + 1));
      const double sinc = std::abs(x) < 1e-12 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
      h[n] += amp * window * sinc;
    }
  }
  return h;
}

double estimate_first_arrival(const std::vector<double>& h) {
  double peak = 0.0;
  for (double v : h) peak = std::max(peak, std::abs(v));
  if (peak == 0.0) throw std::invalid_argument("estimate_first_arrival: silent response");
  std::size_t i = 0;
  while (std::abs(h[i]) < 0.5 * peak) ++i;
  while (i + 1 < h.size() && std::abs(h[i + 1]) > std::abs(h[i])) ++i;
  if (i == 0 || i + 1 >= h.size()) return static_cast<double>(i);
  const double a = std::abs(h[i - 1]), b = std::abs(h[i]), c = std::abs(h[i + 1]);
  const double denom = a - 2.0 * b + c;
  return denom == 0.0 ? static_cast<double>(i) : i + 0.5 * (a - c) / denom;
}

namespace {

Vector3d from_angles(double az_deg, double el_deg) {
  const double az = az_deg * std::numbers::pi / 180.0, el = el_deg * std::numbers::pi / 180.0;
  return {std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
}

}  // namespace

std::vector<Vector3d> tetrahedral_array(double radius) {
  return {radius * from_angles(45, 35), radius * from_angles(-45, -35), radius * from_angles(135, -35),
          radius * from_angles(-135, 35)};
}

std::vector<Vector3d> octahedral_array(double radius) {
  return {radius * Vector3d::UnitX(), -radius * Vector3d::UnitX(), radius * Vector3d::UnitY(),
          -radius * Vector3d::UnitY(), radius * Vector3d::UnitZ(), -radius * Vector3d::UnitZ()};
}

// ----------------------------------------------------------------- scene

void SceneSpec::validate() const {
  room.validate();
  if (mics.size() < 2) throw DataError("scene needs at least two microphones");
  if (!room.inside(source)) throw DataError("source lies outside the room");
  for (const auto& m : mics) {
    if (!room.inside(m)) throw DataError("microphone lies outside the room");
    if ((m - source).norm() < 1e-3) throw DataError("source coincides with a microphone");
  }
  if (std::isnan(snr_db)) throw DataError("SNR must not be NaN");
  if (!noise.empty() && noise.size() != mics.size()) throw DataError("need one noise signal per microphone");
}

SynthesizedClip synthesize_clip(const SceneSpec& scene, double duration_s, int sample_rate, std::uint64_t seed) {
  scene.validate();
  const long n = std::lround(duration_s * sample_rate);
  if (static_cast<long>(scene.source_signal.size()) != n) {
    throw DataError("source signal has " + std::to_string(scene.source_signal.size()) + " samples, expected " +
                    std::to_string(n));
  }
  const int mics = static_cast<int>(scene.mics.size());
  std::vector<std::vector<double>> wet(mics);
  double signal_power = 0.0;
  for (int m = 0; m < mics; ++m) {
    const auto h = image_source_rir(scene.room, scene.source, scene.mics[m], sample_rate);
    wet[m] = dsp::fft_convolve(scene.source_signal, h);
    wet[m].resize(n);
    for (double v : wet[m]) signal_power += v * v;
  }
  signal_power /= static_cast<double>(mics) * n;
  if (!(signal_power > 0.0)) throw DataError("silent source: SNR scaling is undefined");

  SynthesizedClip out;
  out.clip.sample_rate = sample_rate;
  out.clip.samples.resize(mics, n);
  if (std::isinf(scene.snr_db) && scene.snr_db > 0) {
    for (int m = 0; m < mics; ++m) {
      for (long i = 0; i < n; ++i) out.clip.samples(m, i) = static_cast<float>(wet[m][i]);
    }
  } else {
    std::vector<std::vector<double>> noise = scene.noise;
    if (noise.empty()) {
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> g(0.0, 1.0);
      noise.assign(mics, std::vector<double>(n));
      for (auto& ch : noise) {
        for (auto& v : ch) v = g(rng);
      }
    }
    double noise_power = 0.0;
    for (const auto& ch : noise) {
      if (static_cast<long>(ch.size()) != n) throw DataError("noise signal length differs from the clip");
      for (double v : ch) noise_power += v * v;
    }
    noise_power /= static_cast<double>(mics) * n;
    if (!(noise_power > 0.0)) throw DataError("noise signal is silent");
    const double k = std::sqrt(signal_power / (noise_power * std::pow(10.0, scene.snr_db / 10.0)));
    for (int m = 0; m < mics; ++m) {
      for (long i = 0; i < n; ++i) out.clip.samples(m, i) = static_cast<float>(wet[m][i] + k * noise[m][i]);
    }
  }
  for (const auto& m : scene.mics) out.clip.channel_geometry.push_back(m - scene.array_center);
  out.label.class_id = scene.class_id;
  out.label.onset_s = scene.onset_s;
  out.label.offset_s = scene.offset_s;
  out.label.doa_unit = (scene.source - scene.array_center).normalized();
  return out;
}

// --------------------------------------------------------------- classes

namespace {

std::vector<double> band_noise(long len, int sr, double lo_hz, double hi_hz, std::mt19937_64& rng) {
  const int n = dsp::next_pow2(len);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(n, 0.0);
  for (long i = 0; i < len; ++i) x[i] = g(rng);
  dsp::RealFft fft(n);
  std::vector<std::complex<double>> spec(n / 2 + 1);
  fft.forward(x, spec);
  for (std::size_t k = 0; k < spec.size(); ++k) {
    const double f = static_cast<double>(k) * sr / n;
    if (f < lo_hz || f > hi_hz) spec[k] = 0.0;
  }
  fft.inverse(spec, x);
  x.resize(len);
  return x;
}

}  // namespace

std::vector<double> class_signal(int class_id, long n_samples, int sample_rate, double onset_s, double offset_s,
                                 std::uint64_t seed) {
  if (class_id < 0 || class_id >= kSyntheticClasses) throw ConfigError("synthetic class id out of range");
  const long a = std::clamp<long>(std::lround(onset_s * sample_rate), 0, n_samples);
  const long b = std::clamp<long>(std::lround(offset_s * sample_rate), a, n_samples);
  const long len = b - a;
  std::vector<double> out(n_samples, 0.0);
  if (len == 0) return out;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double sr = sample_rate;
  std::vector<double> s(len, 0.0);
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  switch (class_id) {
    case 0: s = band_noise(len, sample_rate, 200.0, 800.0, rng); break;
    case 1: s = band_noise(len, sample_rate, 1000.0, 3000.0, rng); break;
    case 2: s = band_noise(len, sample_rate, 4000.0, std::min(8000.0, sr / 2), rng); break;
    case 3:
    case 4: {
      const double f0 = class_id == 3 ? 150.0 + 100.0 * u(rng) : 500.0 + 400.0 * u(rng);
      const int harmonics = class_id == 3 ? 10 : 5;
      for (int h = 1; h <= harmonics; ++h) {
        if (h * f0 >= sr / 2) break;
        const double phase = kTwoPi * u(rng);
        for (long i = 0; i < len; ++i) s[i] += std::sin(kTwoPi * h * f0 * i / sr + phase) / h;
      }
      break;
    }
    case 5: {
      const double f_lo = 500.0, f_hi = std::min(4000.0, sr / 2 - 100.0);
      const double dur = len / sr;
      const double rate = (f_hi - f_lo) / dur;
      for (long i = 0; i < len; ++i) {
        const double t = i / sr;
        s[i] = std::sin(kTwoPi * (f_lo * t + 0.5 * rate * t * t));
      }
      break;
    }
    case 6: {
      std::normal_distribution<double> g(0.0, 1.0);
      const double fm = 4.0 + 6.0 * u(rng);
      for (long i = 0; i < len; ++i) s[i] = g(rng) * (0.5 + 0.5 * std::sin(kTwoPi * fm * i / sr));
      break;
    }
  }
  double energy = 0.0;
  for (double v : s) energy += v * v;
  const double scale = energy > 0.0 ? 1.0 / std::sqrt(energy / len) : 0.0;
  const long fade = std::min<long>(std::lround(0.01 * sr), len / 2);
  for (long i = 0; i < len; ++i) {
    double w = 1.0;
    if (i < fade) w = 0.5 - 0.5 * std::cos(std::numbers::pi * i / fade);
    else if (i >= len - fade) w = 0.5 - 0.5 * std::cos(std::numbers::pi * (len - 1 - i) / fade);
    out[a + i] = s[i] * scale * w;
  }
  return out;
}

// ---------------------------------------------------------------- config

void SimulationConfig::validate() const {
  if (sample_rate <= 0) throw ConfigError("sample_rate must be positive");
  if (!(clip_duration_s > 0.0)) throw ConfigError("clip_duration_s must be positive");
  if (n_classes < 1 || n_classes > kSyntheticClasses) {
    throw ConfigError("n_classes must lie in [1, " + std::to_string(kSyntheticClasses) + "]");
  }
  if (train_clips < 0 || val_clips < 0 || test_clips < 0) throw ConfigError("clip counts must be >= 0");
  if (array != "tetrahedral" && array != "octahedral") throw ConfigError("array must be tetrahedral or octahedral");
  if (!(array_radius > 0.0)) throw ConfigError("array_radius must be positive");
  if (rooms.empty()) throw ConfigError("at least one room is required");
  for (const auto& r : rooms) r.validate();
  if (!(snr_min_db <= snr_max_db)) throw ConfigError("snr_min_db must not exceed snr_max_db");
  if (!(distance_min > 0.0 && distance_min <= distance_max)) throw ConfigError("invalid source distance range");
  if (!(event_min_s > 0.0 && event_min_s <= clip_duration_s)) throw ConfigError("event_min_s must lie in (0, duration]");
  if (!(target_rms > 0.0)) throw ConfigError("target_rms must be positive");
}

SimulationConfig desk_preset() {
  SimulationConfig c;
  auto room = [](std::string id, Vector3d dims, double alpha) {
    RoomSpec r;
    r.id = std::move(id);
    r.dims = dims;
    r.absorption.fill(alpha);
    return r;
  };
  c.rooms = {room("hall-10x7.5x3.5", {10.0, 7.5, 3.5}, 0.15), room("lab-15x8x5", {15.0, 8.0, 5.0}, 0.35),
             room("office-7.5x4x3", {7.5, 4.0, 3.0}, 0.6)};
  return c;
}

namespace {

template <typename V>
void take(const nlohmann::json& j, const char* key, V& dst) {
  if (j.contains(key)) dst = j.at(key).get<V>();
}

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  for (const auto& [k, _] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }) == allowed.end()) {
      throw ConfigError("unknown key '" + k + "' in " + where);
    }
  }
}

}  // namespace

SimulationConfig load_simulation_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open simulation config: " + path.string());
  SimulationConfig c = desk_preset();
  try {
    const auto j = nlohmann::json::parse(in);
    reject_unknown(j,
                   {"sample_rate", "clip_duration_s", "n_classes", "train_clips", "val_clips", "test_clips", "array",
                    "array_radius", "rooms", "snr_min_db", "snr_max_db", "distance_min", "distance_max", "wall_margin",
                    "event_min_s", "target_rms"},
                   "simulation config");
    take(j, "sample_rate", c.sample_rate);
    take(j, "clip_duration_s", c.clip_duration_s);
    take(j, "n_classes", c.n_classes);
    take(j, "train_clips", c.train_clips);
    take(j, "val_clips", c.val_clips);
    take(j, "test_clips", c.test_clips);
    take(j, "array", c.array);
    if (j.contains("array") && !j.contains("array_radius")) c.array_radius = c.array == "octahedral" ? 0.0425 : 0.042;
    take(j, "array_radius", c.array_radius);
    take(j, "snr_min_db", c.snr_min_db);
    take(j, "snr_max_db", c.snr_max_db);
    take(j, "distance_min", c.distance_min);
    take(j, "distance_max", c.distance_max);
    take(j, "wall_margin", c.wall_margin);
    take(j, "event_min_s", c.event_min_s);
    take(j, "target_rms", c.target_rms);
    if (j.contains("rooms")) {
      c.rooms.clear();
      for (const auto& r : j.at("rooms")) {
        reject_unknown(r, {"id", "dims", "absorption", "max_order", "speed_of_sound"}, "room");
        RoomSpec room;
        take(r, "id", room.id);
        const auto d = r.at("dims").get<std::vector<double>>();
        if (d.size() != 3) throw ConfigError("room dims must have three entries");
        room.dims = Vector3d(d[0], d[1], d[2]);
        if (r.contains("absorption")) {
          if (r.at("absorption").is_number()) {
            room.absorption.fill(r.at("absorption").get<double>());
          } else {
            const auto a = r.at("absorption").get<std::vector<double>>();
            if (a.size() != 6) throw ConfigError("room absorption must be a number or six entries");
            std::copy(a.begin(), a.end(), room.absorption.begin());
          }
        }
        take(r, "max_order", room.max_order);
        take(r, "speed_of_sound", room.speed_of_sound);
        c.rooms.push_back(room);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("simulation config " + path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

// --------------------------------------------------------------- dataset

DatasetManifest generate_dataset(const SimulationConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir) {
  cfg.validate();
  const auto offsets = cfg.array == "octahedral" ? octahedral_array(cfg.array_radius) : tetrahedral_array(cfg.array_radius);
  const long n = std::lround(cfg.clip_duration_s * cfg.sample_rate);

  DatasetManifest manifest;
  manifest.sample_rate = cfg.sample_rate;
  manifest.n_classes = cfg.n_classes;
  manifest.mic_positions = offsets;
  manifest.attributes["generator"] = "simulate";
  manifest.attributes["seed"] = std::to_string(seed);
  manifest.attributes["array"] = cfg.array;

  const std::pair<Split, int> splits[] = {
      {Split::Train, cfg.train_clips}, {Split::Val, cfg.val_clips}, {Split::Test, cfg.test_clips}};
  int index = 0;
  for (const auto& [split, count] : splits) {
    for (int k = 0; k < count; ++k, ++index) {
      const std::uint64_t clip_seed = nn::mix_seed(seed, static_cast<std::uint64_t>(index));
      std::mt19937_64 rng(clip_seed);
      std::uniform_real_distribution<double> u(0.0, 1.0);
      std::normal_distribution<double> g(0.0, 1.0);

      SceneSpec scene;
      scene.room = cfg.rooms[static_cast<std::size_t>(index / cfg.n_classes) % cfg.rooms.size()];
      scene.array_center = scene.room.dims / 2.0;
      for (const auto& o : offsets) scene.mics.push_back(scene.array_center + o);
      bool placed = false;
      for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        Vector3d dir(g(rng), g(rng), g(rng));
        if (dir.norm() < 1e-9) continue;
        dir.normalize();
        const double dist = cfg.distance_min + (cfg.distance_max - cfg.distance_min) * u(rng);
        scene.source = scene.array_center + dist * dir;
        placed = scene.room.inside(scene.source, cfg.wall_margin);
      }
      if (!placed) throw DataError("cannot place a source inside room '" + scene.room.id + "' at the configured distance");

      scene.class_id = index % cfg.n_classes;
      const double len = cfg.event_min_s + (cfg.clip_duration_s - cfg.event_min_s) * u(rng);
      scene.onset_s = (cfg.clip_duration_s - len) * u(rng);
      scene.offset_s = scene.onset_s + len;
      scene.snr_db = cfg.snr_min_db + (cfg.snr_max_db - cfg.snr_min_db) * u(rng);
      scene.source_signal =
          class_signal(scene.class_id, n, cfg.sample_rate, scene.onset_s, scene.offset_s, nn::mix_seed(clip_seed, 1));

      auto synth = synthesize_clip(scene, cfg.clip_duration_s, cfg.sample_rate, nn::mix_seed(clip_seed, 2));
      const double rms = std::sqrt(synth.clip.samples.cast<double>().squaredNorm() / synth.clip.samples.size());
      synth.clip.samples *= static_cast<float>(cfg.target_rms / rms);

      char name[64];
      std::snprintf(name, sizeof(name), "%s_%04d", to_string(split).c_str(), k);
      synth.clip.clip_id = name;
      const std::string rel = "audio/" + to_string(split) + "/" + name + ".wav";
      save_clip(synth.clip, out_dir / rel, SampleFormat::Float32);

      ManifestEntry e;
      e.clip = rel;
      e.split = split;
      e.labels = {synth.label};
      e.environment = {scene.room.id, scene.room.dims, scene.room.rt60_sabine(), scene.snr_db};
      manifest.entries.push_back(std::move(e));
    }
  }
  save_manifest(manifest, out_dir / "manifest.jsonl");
  spdlog::info("simulated {} clips into {}", manifest.entries.size(), out_dir.string());
  return manifest;
}

}  // namespace locus
