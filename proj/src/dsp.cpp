#include "locus/dsp.hpp"

#include <fftw3.h>

#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <stdexcept>

namespace locus::dsp {

namespace {

struct Plans {
  fftw_plan fwd;
  fftw_plan inv;
};

std::mutex& plan_mutex() {
  static std::mutex m;
  return m;
}

const Plans& plans_for(int n) {
  static std::map<int, Plans> cache;
  std::lock_guard<std::mutex> lock(plan_mutex());
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  std::vector<double> r(n);
  std::vector<fftw_complex> c(n / 2 + 1);
  Plans p;
  p.fwd = fftw_plan_dft_r2c_1d(n, r.data(), c.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
  p.inv = fftw_plan_dft_c2r_1d(n, c.data(), r.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
  if (!p.fwd || !p.inv) throw std::runtime_error("FFTW plan creation failed for size " + std::to_string(n));
  return cache.emplace(n, p).first->second;
}

}  // namespace

RealFft::RealFft(int n) : n_(n) {
  if (n < 2) throw std::invalid_argument("RealFft: size must be >= 2");
  const Plans& p = plans_for(n);
  fwd_ = p.fwd;
  inv_ = p.inv;
}

void RealFft::forward(std::span<const double> in, std::span<std::complex<double>> out) const {
  if (static_cast<int>(in.size()) != n_ || static_cast<int>(out.size()) != n_ / 2 + 1) {
    throw std::invalid_argument("RealFft::forward: size mismatch");
  }
  fftw_execute_dft_r2c(static_cast<fftw_plan>(fwd_), const_cast<double*>(in.data()),
                       reinterpret_cast<fftw_complex*>(out.data()));
}

void RealFft::inverse(std::span<const std::complex<double>> in, std::span<double> out) const {
  if (static_cast<int>(out.size()) != n_ || static_cast<int>(in.size()) != n_ / 2 + 1) {
    throw std::invalid_argument("RealFft::inverse: size mismatch");
  }
  // c2r destroys its input
  std::vector<std::complex<double>> tmp(in.begin(), in.end());
  fftw_execute_dft_c2r(static_cast<fftw_plan>(inv_), reinterpret_cast<fftw_complex*>(tmp.data()), out.data());
  const double scale = 1.0 / n_;
  for (auto& v : out) v *= scale;
}

int next_pow2(long n) {
  int p = 1;
  while (p < n) p <<= 1;
  return p;
}

std::vector<double> fft_convolve(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) return {};
  const long len = static_cast<long>(a.size() + b.size() - 1);
  const int n = next_pow2(len);
  RealFft fft(n);
  std::vector<double> pa(n, 0.0), pb(n, 0.0);
  std::copy(a.begin(), a.end(), pa.begin());
  std::copy(b.begin(), b.end(), pb.begin());
  std::vector<std::complex<double>> fa(n / 2 + 1), fb(n / 2 + 1);
  fft.forward(pa, fa);
  fft.forward(pb, fb);
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] *= fb[i];
  std::vector<double> out(n);
  fft.inverse(fa, out);
  out.resize(len);
  return out;
}

std::vector<double> hann_window(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

}  // namespace locus::dsp
