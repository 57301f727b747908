#include "locus/checkpoint.hpp"

#include "locus/errors.hpp"

#include <algorithm>
#include <cstring>
#include <span>
#include <fstream>

namespace locus {

namespace {

constexpr char kMagic[8] = {'L', 'O', 'C', 'U', 'S', 'C', 'K', 'P'};

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  template <typename V>
  void pod(const V& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(V));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint64_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void floats(std::span<const float> v) {
    pod(static_cast<std::uint64_t>(v.size()));
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::ifstream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <typename V>
  V pod() {
    V v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(V));
    check();
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ULL << 30)) throw DataError("corrupt checkpoint string length: " + path_);
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }
  std::vector<float> floats() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ULL << 32)) throw DataError("corrupt checkpoint array length: " + path_);
    std::vector<float> v(n);
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
    check();
    return v;
  }

 private:
  void check() {
    if (!in_) throw DataError("truncated checkpoint: " + path_);
  }
  std::ifstream& in_;
  std::string path_;
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint: " + path.string());
    out.write(kMagic, 8);
    Writer w(out);
    w.pod(Checkpoint::kVersion);
    w.str(ckpt.config_json);
    w.str(ckpt.config_hash);
    w.pod(static_cast<std::int32_t>(ckpt.best_epoch));
    w.pod(ckpt.best_val_e_doa);
    w.pod(static_cast<std::int32_t>(ckpt.n_classes));

    const auto& n = ckpt.normalizer;
    w.pod(static_cast<std::int32_t>(n.channels()));
    w.pod(static_cast<std::int32_t>(n.bins()));
    w.floats(n.mean());
    w.floats(n.stddev());
    w.floats(n.zmin());
    w.floats(n.zmax());

    w.pod(static_cast<std::uint64_t>(ckpt.mic_positions.size()));
    for (const auto& p : ckpt.mic_positions) {
      for (int i = 0; i < 3; ++i) w.pod(p[i]);
    }

    w.pod(static_cast<std::uint64_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
      w.str(name);
      w.pod(static_cast<std::uint32_t>(t.rank()));
      for (int d : t.shape()) w.pod(static_cast<std::int32_t>(d));
      w.floats(t.storage());
    }
    if (!out) throw DataError("failed writing checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw DataError("not a checkpoint file: " + path.string());
  Reader r(in, path.string());
  const auto version = r.pod<std::uint32_t>();
  if (version != Checkpoint::kVersion) {
    throw DataError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(Checkpoint::kVersion) + ")");
  }
  Checkpoint c;
  c.config_json = r.str();
  c.config_hash = r.str();
  c.best_epoch = r.pod<std::int32_t>();
  c.best_val_e_doa = r.pod<double>();
  c.n_classes = r.pod<std::int32_t>();

  const int channels = r.pod<std::int32_t>();
  const int bins = r.pod<std::int32_t>();
  auto mean = r.floats();
  auto sd = r.floats();
  auto zmin = r.floats();
  auto zmax = r.floats();
  c.normalizer = FeatureNormalizer::from_stats(channels, bins, std::move(mean), std::move(sd), std::move(zmin),
                                               std::move(zmax));

  const auto mics = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < mics; ++i) {
    Eigen::Vector3d p;
    for (int k = 0; k < 3; ++k) p[k] = r.pod<double>();
    c.mic_positions.push_back(p);
  }

  const auto count = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) throw DataError("corrupt tensor rank in checkpoint: " + path.string());
    std::vector<int> shape(rank);
    for (auto& d : shape) d = r.pod<std::int32_t>();
    nn::Tensor<float> t(shape);
    auto data = r.floats();
    if (data.size() != t.size()) throw DataError("tensor '" + name + "' size mismatch in checkpoint");
    std::copy(data.begin(), data.end(), t.data());
    c.tensors.emplace(name, std::move(t));
  }
  return c;
}

bool same_geometry(const std::vector<Eigen::Vector3d>& a, const std::vector<Eigen::Vector3d>& b, double tol) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if ((a[i] - b[i]).norm() > tol) return false;
  }
  return true;
}

}  // namespace locus
