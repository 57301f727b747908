#pragma once

#include "locus/audio_io.hpp"
#include "locus/nn/tensor.hpp"

#include <complex>
#include <filesystem>
#include <span>
#include <vector>

namespace locus {

struct StftParams {
  int n_fft = 1024;
  double window_s = 0.040;
  double hop_s = 0.020;
  int n_mels = 64;   // also the truncated GCC length
  int gcc_lags = 64;

  int window_samples(int sample_rate) const;
  int hop_samples(int sample_rate) const;
  /// Full windows only; the trailing partial window is dropped.
  int n_frames(long n_samples, int sample_rate) const;
  void validate(int sample_rate) const;
};

using ComplexMatrix = Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RealMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Hann-windowed, zero-padded STFT: [frames x (n_fft/2 + 1)].
ComplexMatrix stft(std::span<const float> channel, const StftParams& params, int sample_rate);

/// Log-mel energies over n_mels triangular filters spanning [0, sr/2], then an
/// orthonormal DCT-II keeping all coefficients. No liftering.
RealMatrix mfcc(std::span<const float> channel, const StftParams& params, int sample_rate);

/// GCC-PHAT per frame, truncated to lags [-L/2, L/2) with lag 0 at index L/2.
/// A positive lag means channel_b lags channel_a.
RealMatrix gcc_phat(std::span<const float> channel_a, std::span<const float> channel_b, const StftParams& params,
                    int sample_rate);

RealMatrix mfcc_from_stft(const ComplexMatrix& spec, const StftParams& params, int sample_rate);
RealMatrix gcc_from_stft(const ComplexMatrix& spec_a, const ComplexMatrix& spec_b, const StftParams& params);

/// Triangular mel filterbank, [n_mels x (n_fft/2 + 1)].
RealMatrix mel_filterbank(int n_mels, int n_fft, int sample_rate);

struct FeatureMeta {
  int n_mics = 0;
  int n_pairs = 0;
  double frame_hop_s = 0.0;
  int bins = 0;  // D
  bool operator==(const FeatureMeta&) const = default;
};

/// Stacked per-mic MFCC followed by per-pair GCC-PHAT (pairs i<j in
/// lexicographic order): values [n_mics + n_pairs, frames, D].
struct FeatureMatrix {
  nn::Tensor<float> values;
  FeatureMeta meta;

  int channels() const { return values.dim(0); }
  int frames() const { return values.dim(1); }
  int bins() const { return values.dim(2); }
};

int pair_count(int n_mics);
std::vector<std::pair<int, int>> mic_pairs(int n_mics);

FeatureMatrix assemble_features(const MultichannelClip& clip, const StftParams& params = {});

/// Per (feature channel, bin) z-score from training statistics, followed by an
/// affine map of the training z-range onto [0, 1] for the recovery stack.
class FeatureNormalizer {
 public:
  FeatureNormalizer() = default;
  static FeatureNormalizer fit(const std::vector<const FeatureMatrix*>& training);

  int channels() const { return channels_; }
  int bins() const { return bins_; }
  bool fitted() const { return channels_ > 0; }

  /// Raw features -> z-scores, [C, T, D].
  nn::Tensor<float> standardize(const FeatureMatrix& f) const;
  /// z-scores -> [0, 1]-range values; works on [C,T,D] or [N,C,T,D].
  nn::Tensor<float> squash(const nn::Tensor<float>& z) const;
  nn::Tensor<float> unsquash(const nn::Tensor<float>& s) const;
  /// d(z)/d(s) per element, laid out like squash input.
  nn::Tensor<float> unsquash_scale(const std::vector<int>& shape) const;

  const std::vector<float>& mean() const { return mean_; }
  const std::vector<float>& stddev() const { return std_; }
  const std::vector<float>& zmin() const { return zmin_; }
  const std::vector<float>& zmax() const { return zmax_; }
  static FeatureNormalizer from_stats(int channels, int bins, std::vector<float> mean, std::vector<float> stddev,
                                      std::vector<float> zmin, std::vector<float> zmax);

 private:
  template <typename Fn>
  nn::Tensor<float> map(const nn::Tensor<float>& t, Fn fn) const;

  int channels_ = 0, bins_ = 0;
  std::vector<float> mean_, std_, zmin_, zmax_;  // [C*D]
};

/// Binary container: magic, version, meta, shape header, float32 payload.
void save_features(const FeatureMatrix& f, const std::filesystem::path& path);
FeatureMatrix load_features(const std::filesystem::path& path);

}  // namespace locus
