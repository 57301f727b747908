#include "locus/audio_io.hpp"

#include "locus/errors.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace locus {

namespace fs = std::filesystem;
using json = nlohmann::json;

void MultichannelClip::validate(int min_channels) const {
  if (n_channels() < min_channels) {
    throw DataError("clip '" + clip_id + "' has " + std::to_string(n_channels()) + " channel(s), need at least " +
                    std::to_string(min_channels));
  }
  if (sample_rate <= 0) throw DataError("clip '" + clip_id + "' has non-positive sample rate");
  if (!channel_geometry.empty() && static_cast<int>(channel_geometry.size()) != n_channels()) {
    throw DataError("clip '" + clip_id + "' geometry does not match channel count");
  }
}

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;
constexpr std::array<char, 4> kGeometryChunk = {'l', 'g', 'e', 'o'};

std::uint16_t read_u16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }
std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::vector<unsigned char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open audio file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

MultichannelClip load_clip(const fs::path& path, int min_channels) {
  if (!fs::exists(path)) throw DataError("audio file not found: " + path.string());
  const auto bytes = slurp(path);
  auto corrupt = [&](const std::string& why) { return DataError("corrupt WAV header in " + path.string() + ": " + why); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw corrupt("missing RIFF/WAVE signature");
  }

  std::uint16_t format = 0, channels = 0, bits = 0, block_align = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  std::vector<Eigen::Vector3d> geometry;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::uint32_t size = read_u32(hdr + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) {
      // Tolerate a truncated trailing data chunk only if it is the data chunk.
      if (std::memcmp(hdr, "data", 4) != 0) throw corrupt("chunk extends past end of file");
    }
    const std::size_t avail = std::min<std::size_t>(size, bytes.size() - body);
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (avail < 16) throw corrupt("fmt chunk too short");
      const unsigned char* f = bytes.data() + body;
      format = read_u16(f);
      channels = read_u16(f + 2);
      rate = read_u32(f + 4);
      block_align = read_u16(f + 12);
      bits = read_u16(f + 14);
      if (format == kFormatExtensible) {
        if (avail < 26) throw corrupt("extensible fmt chunk too short");
        format = read_u16(f + 24);  // first two bytes of the subformat GUID
      }
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = bytes.data() + body;
      data_size = avail;
    } else if (std::memcmp(hdr, kGeometryChunk.data(), 4) == 0) {
      const std::size_t count = avail / (3 * sizeof(double));
      for (std::size_t i = 0; i < count; ++i) {
        double xyz[3];
        std::memcpy(xyz, bytes.data() + body + i * sizeof(xyz), sizeof(xyz));
        geometry.emplace_back(xyz[0], xyz[1], xyz[2]);
      }
    }
    pos = body + size + (size & 1u);
  }

  if (format == 0) throw corrupt("no fmt chunk");
  if (data == nullptr) throw corrupt("no data chunk");
  if (channels == 0 || rate == 0) throw corrupt("zero channels or sample rate");
  const bool is_float = format == kFormatFloat;
  if (!(format == kFormatPcm || is_float)) throw corrupt("unsupported sample format " + std::to_string(format));
  if (is_float && bits != 32) throw corrupt("only 32-bit float is supported");
  if (!is_float && bits != 16 && bits != 24 && bits != 32) throw corrupt("unsupported PCM bit depth " + std::to_string(bits));
  const std::size_t bytes_per_sample = bits / 8;
  if (block_align != channels * bytes_per_sample) throw corrupt("inconsistent block alignment");

  const std::size_t frames = data_size / block_align;
  MultichannelClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.clip_id = path.stem().string();
  clip.samples.resize(channels, static_cast<Eigen::Index>(frames));
  for (std::size_t i = 0; i < frames; ++i) {
    for (std::uint16_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + i * block_align + c * bytes_per_sample;
      float v = 0.0f;
      if (is_float) {
        std::memcpy(&v, p, 4);
      } else if (bits == 16) {
        v = static_cast<float>(static_cast<std::int16_t>(read_u16(p))) / 32768.0f;
      } else if (bits == 24) {
        std::int32_t s = static_cast<std::int32_t>(p[0] | (p[1] << 8) | (p[2] << 16));
        if (s & 0x800000) s |= ~0xFFFFFF;
        v = static_cast<float>(static_cast<double>(s) / 8388608.0);
      } else {
        v = static_cast<float>(static_cast<double>(static_cast<std::int32_t>(read_u32(p))) / 2147483648.0);
      }
      clip.samples(c, static_cast<Eigen::Index>(i)) = v;
    }
  }
  if (geometry.size() == channels) clip.channel_geometry = std::move(geometry);
  clip.validate(min_channels);
  return clip;
}

void save_clip(const MultichannelClip& clip, const fs::path& path, SampleFormat format) {
  clip.validate(1);
  const int bits = format == SampleFormat::Pcm16 ? 16 : format == SampleFormat::Pcm24 ? 24 : 32;
  const std::uint16_t channels = static_cast<std::uint16_t>(clip.n_channels());
  const std::uint16_t block_align = static_cast<std::uint16_t>(channels * bits / 8);
  const std::size_t frames = static_cast<std::size_t>(clip.n_samples());

  std::string pcm;
  pcm.reserve(frames * block_align);
  for (std::size_t i = 0; i < frames; ++i) {
    for (int c = 0; c < channels; ++c) {
      const float v = clip.samples(c, static_cast<Eigen::Index>(i));
      switch (format) {
        case SampleFormat::Float32: {
          char b[4];
          std::memcpy(b, &v, 4);
          pcm.append(b, 4);
          break;
        }
        case SampleFormat::Pcm16: {
          const double s = std::clamp(std::round(static_cast<double>(v) * 32768.0), -32768.0, 32767.0);
          put_u16(pcm, static_cast<std::uint16_t>(static_cast<std::int16_t>(s)));
          break;
        }
        case SampleFormat::Pcm24: {
          const double s = std::clamp(std::round(static_cast<double>(v) * 8388608.0), -8388608.0, 8388607.0);
          const std::int32_t q = static_cast<std::int32_t>(s);
          for (int k = 0; k < 3; ++k) pcm.push_back(static_cast<char>((q >> (8 * k)) & 0xFF));
          break;
        }
        case SampleFormat::Pcm32: {
          const double s = std::clamp(std::round(static_cast<double>(v) * 2147483648.0), -2147483648.0, 2147483647.0);
          put_u32(pcm, static_cast<std::uint32_t>(static_cast<std::int32_t>(s)));
          break;
        }
      }
    }
  }

  std::string geo;
  for (const auto& p : clip.channel_geometry) {
    const double xyz[3] = {p.x(), p.y(), p.z()};
    geo.append(reinterpret_cast<const char*>(xyz), sizeof(xyz));
  }

  std::string out;
  out.append("RIFF");
  put_u32(out, 0);  // patched below
  out.append("WAVE");
  out.append("fmt ");
  put_u32(out, 16);
  put_u16(out, format == SampleFormat::Float32 ? kFormatFloat : kFormatPcm);
  put_u16(out, channels);
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate) * block_align);
  put_u16(out, block_align);
  put_u16(out, static_cast<std::uint16_t>(bits));
  if (!geo.empty()) {
    out.append(kGeometryChunk.data(), 4);
    put_u32(out, static_cast<std::uint32_t>(geo.size()));
    out.append(geo);
  }
  out.append("data");
  put_u32(out, static_cast<std::uint32_t>(pcm.size()));
  out.append(pcm);
  if (pcm.size() & 1u) out.push_back('\0');
  const std::uint32_t riff_size = static_cast<std::uint32_t>(out.size() - 8);
  for (int i = 0; i < 4; ++i) out[4 + i] = static_cast<char>((riff_size >> (8 * i)) & 0xFF);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write audio file: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

void EventLabel::validate(int n_classes, double clip_duration_s) const {
  if (class_id < 0 || (n_classes > 0 && class_id >= n_classes)) throw DataError("event class id out of range");
  if (!(onset_s >= 0.0 && onset_s < offset_s && offset_s <= clip_duration_s + 1e-9)) {
    throw DataError("event onset/offset outside clip");
  }
  if (std::abs(doa_unit.norm() - 1.0) > 1e-6) throw DataError("event DoA is not a unit vector");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw DataError("unknown split tag '" + s + "'");
}

std::vector<const ManifestEntry*> DatasetManifest::split(Split s) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == s) out.push_back(&e);
  }
  return out;
}

namespace {

json vec3(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }
Eigen::Vector3d vec3(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

}  // namespace

fs::path resolve_path(const fs::path& manifest_path, const std::string& relative) {
  fs::path p(relative);
  if (p.is_absolute()) return p;
  return manifest_path.parent_path() / p;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest: " + path.string());
  json header = {{"schema_version", DatasetManifest::kSchemaVersion},
                 {"kind", "locus-manifest"},
                 {"sample_rate", m.sample_rate},
                 {"n_classes", m.n_classes},
                 {"attributes", m.attributes}};
  header["mic_positions"] = json::array();
  for (const auto& p : m.mic_positions) header["mic_positions"].push_back(vec3(p));
  out << header.dump() << '\n';
  for (const auto& e : m.entries) {
    json rec = {{"clip", e.clip}, {"split", to_string(e.split)}};
    rec["labels"] = json::array();
    for (const auto& l : e.labels) {
      rec["labels"].push_back(
          {{"class_id", l.class_id}, {"onset_s", l.onset_s}, {"offset_s", l.offset_s}, {"doa", vec3(l.doa_unit)}});
    }
    rec["env"] = {{"room_id", e.environment.room_id},
                  {"room_dims", vec3(e.environment.room_dims)},
                  {"rt60_s", e.environment.rt60_s},
                  {"snr_db", e.environment.snr_db}};
    if (e.schedule) rec["schedule"] = *e.schedule;
    out << rec.dump() << '\n';
  }
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  DatasetManifest m;
  std::string line;
  int lineno = 0;
  bool have_header = false;
  std::set<std::string> seen;
  try {
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const json j = json::parse(line);
      if (!have_header) {
        const int version = j.at("schema_version").get<int>();
        if (version != DatasetManifest::kSchemaVersion) {
          throw DataError("manifest schema version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(DatasetManifest::kSchemaVersion) + ")");
        }
        m.sample_rate = j.at("sample_rate").get<int>();
        m.n_classes = j.at("n_classes").get<int>();
        for (const auto& p : j.at("mic_positions")) m.mic_positions.push_back(vec3(p));
        if (j.contains("attributes")) m.attributes = j.at("attributes").get<std::map<std::string, std::string>>();
        have_header = true;
        continue;
      }
      ManifestEntry e;
      e.clip = j.at("clip").get<std::string>();
      e.split = split_from_string(j.at("split").get<std::string>());
      for (const auto& l : j.at("labels")) {
        EventLabel lab;
        lab.class_id = l.at("class_id").get<int>();
        lab.onset_s = l.at("onset_s").get<double>();
        lab.offset_s = l.at("offset_s").get<double>();
        lab.doa_unit = vec3(l.at("doa"));
        e.labels.push_back(lab);
      }
      if (j.contains("env")) {
        const auto& env = j.at("env");
        e.environment.room_id = env.value("room_id", "");
        e.environment.room_dims = vec3(env.at("room_dims"));
        e.environment.rt60_s = env.value("rt60_s", 0.0);
        e.environment.snr_db = env.value("snr_db", 0.0);
      }
      if (j.contains("schedule")) e.schedule = j.at("schedule").get<std::string>();
      if (!seen.insert(e.clip).second) {
        throw DataError("clip '" + e.clip + "' appears more than once (splits must be disjoint)");
      }
      const fs::path clip_path = resolve_path(path, e.clip);
      if (!fs::exists(clip_path)) throw DataError("manifest references missing clip: " + clip_path.string());
      if (e.schedule && !fs::exists(resolve_path(path, *e.schedule))) {
        throw DataError("manifest references missing schedule: " + resolve_path(path, *e.schedule).string());
      }
      m.entries.push_back(std::move(e));
    }
  } catch (const json::exception& ex) {
    throw DataError("malformed manifest " + path.string() + " line " + std::to_string(lineno) + ": " + ex.what());
  }
  if (!have_header) throw DataError("manifest has no header record: " + path.string());
  return m;
}

}  // namespace locus
