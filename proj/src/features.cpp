#include "locus/features.hpp"

#include "locus/dsp.hpp"
#include "locus/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

namespace locus {

namespace {

constexpr double kLogFloor = 1e-10;
constexpr double kPhatEps = 1e-8;

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace

int StftParams::window_samples(int sample_rate) const { return static_cast<int>(std::lround(window_s * sample_rate)); }
int StftParams::hop_samples(int sample_rate) const { return static_cast<int>(std::lround(hop_s * sample_rate)); }

int StftParams::n_frames(long n_samples, int sample_rate) const {
  const int win = window_samples(sample_rate), hop = hop_samples(sample_rate);
  if (n_samples < win) return 0;
  return static_cast<int>(1 + (n_samples - win) / hop);
}

void StftParams::validate(int sample_rate) const {
  if (sample_rate <= 0) throw ConfigError("sample rate must be positive");
  const int win = window_samples(sample_rate);
  if (win > n_fft) throw ConfigError("window longer than FFT size");
  if (hop_samples(sample_rate) <= 0 || win <= 0) throw ConfigError("window/hop must be positive");
  if (gcc_lags > n_fft || gcc_lags % 2 != 0) throw ConfigError("GCC length must be even and <= n_fft");
}

ComplexMatrix stft(std::span<const float> channel, const StftParams& params, int sample_rate) {
  params.validate(sample_rate);
  const int win = params.window_samples(sample_rate), hop = params.hop_samples(sample_rate);
  const int frames = params.n_frames(static_cast<long>(channel.size()), sample_rate);
  if (frames <= 0) {
    throw DataError("signal of " + std::to_string(channel.size()) + " samples is shorter than one " +
                    std::to_string(win) + "-sample window");
  }
  const auto window = dsp::hann_window(win);
  const dsp::RealFft fft(params.n_fft);
  const int bins = params.n_fft / 2 + 1;
  ComplexMatrix out(frames, bins);
  std::vector<double> buf(params.n_fft);
  std::vector<std::complex<double>> spec(bins);
  for (int t = 0; t < frames; ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    const std::size_t off = static_cast<std::size_t>(t) * hop;
    for (int i = 0; i < win; ++i) buf[i] = static_cast<double>(channel[off + i]) * window[i];
    fft.forward(buf, spec);
    for (int k = 0; k < bins; ++k) out(t, k) = spec[k];
  }
  return out;
}

RealMatrix mel_filterbank(int n_mels, int n_fft, int sample_rate) {
  const int bins = n_fft / 2 + 1;
  RealMatrix fb = RealMatrix::Zero(n_mels, bins);
  const double mel_lo = hz_to_mel(0.0), mel_hi = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(n_mels + 2);
  for (int i = 0; i < n_mels + 2; ++i) edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mels + 1));
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / n_fft;
      double w = 0.0;
      if (f > lo && f <= c) w = (f - lo) / (c - lo);
      else if (f > c && f < hi) w = (hi - f) / (hi - c);
      fb(m, k) = w;
    }
  }
  return fb;
}

RealMatrix mfcc_from_stft(const ComplexMatrix& spec, const StftParams& params, int sample_rate) {
  const int n = params.n_mels;
  const RealMatrix fb = mel_filterbank(n, params.n_fft, sample_rate);
  const RealMatrix power = spec.cwiseAbs2();
  RealMatrix logmel = power * fb.transpose();  // [frames x n_mels]
  logmel = logmel.unaryExpr([](double e) { return std::log(std::max(e, kLogFloor)); });
  RealMatrix dct(n, n);
  for (int k = 0; k < n; ++k) {
    const double s = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    for (int i = 0; i < n; ++i) dct(k, i) = s * std::cos(std::numbers::pi * k * (2 * i + 1) / (2.0 * n));
  }
  return logmel * dct.transpose();
}

RealMatrix mfcc(std::span<const float> channel, const StftParams& params, int sample_rate) {
  return mfcc_from_stft(stft(channel, params, sample_rate), params, sample_rate);
}

RealMatrix gcc_from_stft(const ComplexMatrix& a, const ComplexMatrix& b, const StftParams& params) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("gcc_phat: spectra differ in shape");
  const int n = params.n_fft, bins = n / 2 + 1, half = params.gcc_lags / 2;
  const dsp::RealFft fft(n);
  RealMatrix out(a.rows(), params.gcc_lags);
  std::vector<std::complex<double>> cross(bins);
  std::vector<double> r(n);
  for (Eigen::Index t = 0; t < a.rows(); ++t) {
    for (int k = 0; k < bins; ++k) {
      const std::complex<double> x = a(t, k) * std::conj(b(t, k));
      cross[k] = x / (std::abs(x) + kPhatEps);
    }
    fft.inverse(cross, r);
    // r peaks at -d when b is a delayed by d, so lag l reads r[-l].
    for (int i = 0; i < params.gcc_lags; ++i) {
      const int lag = i - half;
      out(t, i) = r[((-lag) % n + n) % n];
    }
  }
  return out;
}

RealMatrix gcc_phat(std::span<const float> a, std::span<const float> b, const StftParams& params, int sample_rate) {
  if (a.size() != b.size()) throw std::invalid_argument("gcc_phat: channels differ in length");
  return gcc_from_stft(stft(a, params, sample_rate), stft(b, params, sample_rate), params);
}

int pair_count(int n_mics) { return n_mics * (n_mics - 1) / 2; }

std::vector<std::pair<int, int>> mic_pairs(int n_mics) {
  std::vector<std::pair<int, int>> p;
  for (int i = 0; i < n_mics; ++i) {
    for (int j = i + 1; j < n_mics; ++j) p.emplace_back(i, j);
  }
  return p;
}

FeatureMatrix assemble_features(const MultichannelClip& clip, const StftParams& params) {
  clip.validate(2);
  if (params.gcc_lags != params.n_mels) throw std::invalid_argument("GCC length must equal the mel band count");
  const int mics = clip.n_channels();
  std::vector<ComplexMatrix> specs;
  specs.reserve(mics);
  for (int c = 0; c < mics; ++c) {
    specs.push_back(stft(std::span<const float>(clip.samples.row(c).data(), clip.n_samples()), params, clip.sample_rate));
  }
  const int frames = static_cast<int>(specs[0].rows());
  const int d = params.n_mels;
  const auto pairs = mic_pairs(mics);
  FeatureMatrix f;
  f.meta = {mics, static_cast<int>(pairs.size()), params.hop_s, d};
  f.values = nn::Tensor<float>({mics + static_cast<int>(pairs.size()), frames, d});
  auto put = [&](int ch, const RealMatrix& m) {
    float* dst = f.values.data() + static_cast<std::size_t>(ch) * frames * d;
    for (int t = 0; t < frames; ++t) {
      for (int k = 0; k < d; ++k) dst[t * d + k] = static_cast<float>(m(t, k));
    }
  };
  for (int c = 0; c < mics; ++c) put(c, mfcc_from_stft(specs[c], params, clip.sample_rate));
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    put(mics + static_cast<int>(p), gcc_from_stft(specs[pairs[p].first], specs[pairs[p].second], params));
  }
  return f;
}

// ---------------------------------------------------------- normalization

FeatureNormalizer FeatureNormalizer::fit(const std::vector<const FeatureMatrix*>& training) {
  if (training.empty()) throw DataError("cannot fit feature statistics on an empty training split");
  FeatureNormalizer n;
  n.channels_ = training.front()->channels();
  n.bins_ = training.front()->bins();
  const std::size_t cd = static_cast<std::size_t>(n.channels_) * n.bins_;
  std::vector<double> sum(cd, 0.0), sq(cd, 0.0);
  double count = 0.0;
  for (const auto* f : training) {
    if (f->channels() != n.channels_ || f->bins() != n.bins_) throw DataError("training features differ in shape");
    const int frames = f->frames();
    for (int c = 0; c < n.channels_; ++c) {
      for (int t = 0; t < frames; ++t) {
        const float* row = f->values.data() + (static_cast<std::size_t>(c) * frames + t) * n.bins_;
        for (int k = 0; k < n.bins_; ++k) {
          sum[c * n.bins_ + k] += row[k];
          sq[c * n.bins_ + k] += static_cast<double>(row[k]) * row[k];
        }
      }
    }
    count += frames;
  }
  n.mean_.resize(cd);
  n.std_.resize(cd);
  for (std::size_t i = 0; i < cd; ++i) {
    const double m = sum[i] / count;
    const double v = std::max(0.0, sq[i] / count - m * m);
    n.mean_[i] = static_cast<float>(m);
    n.std_[i] = static_cast<float>(std::sqrt(v) > 1e-6 ? std::sqrt(v) : 1.0);
  }
  n.zmin_.assign(cd, std::numeric_limits<float>::max());
  n.zmax_.assign(cd, std::numeric_limits<float>::lowest());
  for (const auto* f : training) {
    const int frames = f->frames();
    for (int c = 0; c < n.channels_; ++c) {
      for (int t = 0; t < frames; ++t) {
        const float* row = f->values.data() + (static_cast<std::size_t>(c) * frames + t) * n.bins_;
        for (int k = 0; k < n.bins_; ++k) {
          const std::size_t i = c * n.bins_ + k;
          const float z = (row[k] - n.mean_[i]) / n.std_[i];
          n.zmin_[i] = std::min(n.zmin_[i], z);
          n.zmax_[i] = std::max(n.zmax_[i], z);
        }
      }
    }
  }
  for (std::size_t i = 0; i < cd; ++i) {
    if (n.zmax_[i] - n.zmin_[i] < 1e-6f) n.zmax_[i] = n.zmin_[i] + 1.0f;
  }
  return n;
}

FeatureNormalizer FeatureNormalizer::from_stats(int channels, int bins, std::vector<float> mean, std::vector<float> stddev,
                                                std::vector<float> zmin, std::vector<float> zmax) {
  const std::size_t cd = static_cast<std::size_t>(channels) * bins;
  if (mean.size() != cd || stddev.size() != cd || zmin.size() != cd || zmax.size() != cd) {
    throw DataError("normalizer statistics have the wrong size");
  }
  FeatureNormalizer n;
  n.channels_ = channels;
  n.bins_ = bins;
  n.mean_ = std::move(mean);
  n.std_ = std::move(stddev);
  n.zmin_ = std::move(zmin);
  n.zmax_ = std::move(zmax);
  return n;
}

template <typename Fn>
nn::Tensor<float> FeatureNormalizer::map(const nn::Tensor<float>& t, Fn fn) const {
  if (t.rank() < 3) throw std::invalid_argument("normalizer expects [C,T,D] or [N,C,T,D]");
  const std::size_t r = t.rank();
  const int c_dim = t.dim(r - 3), frames = t.dim(r - 2), bins = t.dim(r - 1);
  if (c_dim != channels_ || bins != bins_) throw std::invalid_argument("normalizer: feature shape does not match statistics");
  nn::Tensor<float> out(t.shape());
  const std::size_t block = static_cast<std::size_t>(c_dim) * frames * bins;
  const std::size_t blocks = t.size() / block;
  for (std::size_t b = 0; b < blocks; ++b) {
    for (int c = 0; c < c_dim; ++c) {
      for (int f = 0; f < frames; ++f) {
        const std::size_t off = b * block + (static_cast<std::size_t>(c) * frames + f) * bins;
        for (int k = 0; k < bins; ++k) out[off + k] = fn(t[off + k], static_cast<std::size_t>(c) * bins + k);
      }
    }
  }
  return out;
}

nn::Tensor<float> FeatureNormalizer::standardize(const FeatureMatrix& f) const {
  return map(f.values, [&](float v, std::size_t i) { return (v - mean_[i]) / std_[i]; });
}

nn::Tensor<float> FeatureNormalizer::squash(const nn::Tensor<float>& z) const {
  return map(z, [&](float v, std::size_t i) { return (v - zmin_[i]) / (zmax_[i] - zmin_[i]); });
}

nn::Tensor<float> FeatureNormalizer::unsquash(const nn::Tensor<float>& s) const {
  return map(s, [&](float v, std::size_t i) { return v * (zmax_[i] - zmin_[i]) + zmin_[i]; });
}

nn::Tensor<float> FeatureNormalizer::unsquash_scale(const std::vector<int>& shape) const {
  return map(nn::Tensor<float>(shape), [&](float, std::size_t i) { return zmax_[i] - zmin_[i]; });
}

// -------------------------------------------------------------- file I/O

namespace {
constexpr char kFeatureMagic[8] = {'L', 'O', 'C', 'F', 'E', 'A', 'T', '1'};
}

void save_features(const FeatureMatrix& f, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write features: " + path.string());
  out.write(kFeatureMagic, 8);
  const std::int32_t header[5] = {f.meta.n_mics, f.meta.n_pairs, f.meta.bins, 3, 0};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  out.write(reinterpret_cast<const char*>(&f.meta.frame_hop_s), sizeof(double));
  for (std::size_t i = 0; i < 3; ++i) {
    const std::int32_t d = f.values.dim(i);
    out.write(reinterpret_cast<const char*>(&d), sizeof(d));
  }
  out.write(reinterpret_cast<const char*>(f.values.data()), static_cast<std::streamsize>(f.values.size() * sizeof(float)));
}

FeatureMatrix load_features(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open features: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kFeatureMagic, 8) != 0) throw DataError("not a feature file: " + path.string());
  std::int32_t header[5];
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  FeatureMatrix f;
  f.meta.n_mics = header[0];
  f.meta.n_pairs = header[1];
  f.meta.bins = header[2];
  in.read(reinterpret_cast<char*>(&f.meta.frame_hop_s), sizeof(double));
  if (header[3] != 3) throw DataError("feature file has unexpected rank: " + path.string());
  std::vector<int> shape(3);
  for (auto& d : shape) {
    std::int32_t v;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    d = v;
  }
  if (!in) throw DataError("truncated feature header: " + path.string());
  f.values = nn::Tensor<float>(shape);
  in.read(reinterpret_cast<char*>(f.values.data()), static_cast<std::streamsize>(f.values.size() * sizeof(float)));
  if (!in) throw DataError("truncated feature payload: " + path.string());
  return f;
}

}  // namespace locus
