#pragma once

#include <complex>
#include <span>
#include <vector>

namespace locus::dsp {

/// Real-input FFT of a fixed size. Plans are cached process-wide; transforms
/// may run concurrently once a plan exists.
class RealFft {
 public:
  explicit RealFft(int n);
  int size() const { return n_; }
  /// in: n reals -> out: n/2+1 bins (unnormalized).
  void forward(std::span<const double> in, std::span<std::complex<double>> out) const;
  /// in: n/2+1 bins -> out: n reals, scaled by 1/n so inverse(forward(x)) == x.
  void inverse(std::span<const std::complex<double>> in, std::span<double> out) const;

 private:
  int n_;
  void* fwd_;
  void* inv_;
};

int next_pow2(long n);

/// Full linear convolution (length a.size() + b.size() - 1) via FFT.
std::vector<double> fft_convolve(std::span<const double> a, std::span<const double> b);

/// Periodic Hann window (the STFT convention).
std::vector<double> hann_window(int n);

}  // namespace locus::dsp
