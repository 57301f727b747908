#include "locus/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace locus::nn {

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col, std::ptrdiff_t row_stride, std::ptrdiff_t col_offset) {
  const int gw = g.grid_w;
  for (int c = 0; c < g.channels; ++c) {
    const T* plane = image + static_cast<std::ptrdiff_t>(c) * g.height * g.width;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const int row = (c * g.kh + ki) * g.kw + kj;
        T* dst = col + row * row_stride + col_offset;
        for (int i = 0; i < g.grid_h; ++i) {
          const int y = i * g.sh - g.ph + ki * g.dh;
          T* out = dst + static_cast<std::ptrdiff_t>(i) * gw;
          if (y < 0 || y >= g.height) {
            std::fill(out, out + gw, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::ptrdiff_t>(y) * g.width;
          for (int j = 0; j < gw; ++j) {
            const int x = j * g.sw - g.pw + kj * g.dw;
            out[j] = (x >= 0 && x < g.width) ? src[x] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* image, std::ptrdiff_t row_stride, std::ptrdiff_t col_offset) {
  const int gw = g.grid_w;
  for (int c = 0; c < g.channels; ++c) {
    T* plane = image + static_cast<std::ptrdiff_t>(c) * g.height * g.width;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj) {
        const int row = (c * g.kh + ki) * g.kw + kj;
        const T* src = col + row * row_stride + col_offset;
        for (int i = 0; i < g.grid_h; ++i) {
          const int y = i * g.sh - g.ph + ki * g.dh;
          if (y < 0 || y >= g.height) continue;
          T* dst = plane + static_cast<std::ptrdiff_t>(y) * g.width;
          const T* in = src + static_cast<std::ptrdiff_t>(i) * gw;
          for (int j = 0; j < gw; ++j) {
            const int x = j * g.sw - g.pw + kj * g.dw;
            if (x >= 0 && x < g.width) dst[x] += in[j];
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(const Conv2dOptions& opt, Rng& rng)
    : opt_(opt),
      weight_("weight", {opt.out_channels, opt.in_channels * opt.kh * opt.kw}),
      bias_("bias", {opt.out_channels}) {
  const T bound = T(1) / std::sqrt(static_cast<T>(opt.in_channels * opt.kh * opt.kw));
  uniform_init(weight_.value, bound, rng);
  uniform_init(bias_.value, bound, rng);
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, bool) {
  if (x.rank() != 4 || x.dim(1) != opt_.in_channels) {
    throw std::invalid_argument("Conv2d: bad input shape " + shape_string(x.shape()));
  }
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  geom_ = ConvGeometry{opt_.in_channels, h, w, opt_.kh, opt_.kw, opt_.sh, opt_.sw, opt_.ph, opt_.pw,
                       opt_.dh, opt_.dw, 0, 0};
  geom_.grid_h = (h + 2 * opt_.ph - opt_.dh * (opt_.kh - 1) - 1) / opt_.sh + 1;
  geom_.grid_w = (w + 2 * opt_.pw - opt_.dw * (opt_.kw - 1) - 1) / opt_.sw + 1;
  if (geom_.grid_h <= 0 || geom_.grid_w <= 0) throw std::invalid_argument("Conv2d: input smaller than kernel");
  batch_ = n;
  const int g = geom_.grid();
  const std::ptrdiff_t cols = static_cast<std::ptrdiff_t>(n) * g;
  col_.resize(geom_.rows(), cols);
  const std::size_t in_stride = x.stride(0);
  for (int b = 0; b < n; ++b) im2col(x.data() + b * in_stride, geom_, col_.data(), cols, static_cast<std::ptrdiff_t>(b) * g);

  ConstMatMap<T> wmat(weight_.value.data(), opt_.out_channels, geom_.rows());
  RowMat<T> y = wmat * col_;
  Tensor<T> out({n, opt_.out_channels, geom_.grid_h, geom_.grid_w});
  for (int b = 0; b < n; ++b) {
    for (int o = 0; o < opt_.out_channels; ++o) {
      const T bo = bias_.value[o];
      const T* src = y.data() + static_cast<std::ptrdiff_t>(o) * cols + static_cast<std::ptrdiff_t>(b) * g;
      T* dst = out.data() + (static_cast<std::size_t>(b) * opt_.out_channels + o) * g;
      for (int p = 0; p < g; ++p) dst[p] = src[p] + bo;
    }
  }
  return out;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& gy) {
  const int n = batch_, g = geom_.grid();
  require_shape(gy, {n, opt_.out_channels, geom_.grid_h, geom_.grid_w}, "Conv2d::backward");
  const std::ptrdiff_t cols = static_cast<std::ptrdiff_t>(n) * g;
  RowMat<T> dy(opt_.out_channels, cols);
  for (int b = 0; b < n; ++b) {
    for (int o = 0; o < opt_.out_channels; ++o) {
      const T* src = gy.data() + (static_cast<std::size_t>(b) * opt_.out_channels + o) * g;
      std::copy(src, src + g, dy.data() + static_cast<std::ptrdiff_t>(o) * cols + static_cast<std::ptrdiff_t>(b) * g);
    }
  }
  MatMap<T> dw(weight_.grad.data(), opt_.out_channels, geom_.rows());
  dw.noalias() += dy * col_.transpose();
  for (int o = 0; o < opt_.out_channels; ++o) bias_.grad[o] += dy.row(o).sum();

  ConstMatMap<T> wmat(weight_.value.data(), opt_.out_channels, geom_.rows());
  RowMat<T> dcol = wmat.transpose() * dy;
  Tensor<T> gx({n, geom_.channels, geom_.height, geom_.width});
  const std::size_t in_stride = gx.stride(0);
  for (int b = 0; b < n; ++b) col2im(dcol.data(), geom_, gx.data() + b * in_stride, cols, static_cast<std::ptrdiff_t>(b) * g);
  return gx;
}

template <typename T>
void Conv2d<T>::parameters(std::vector<Parameter<T>*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

template <typename T>
void Conv2d<T>::state(std::vector<StateEntry<T>>& out, const std::string& prefix) {
  out.push_back({prefix + "weight", &weight_.value});
  out.push_back({prefix + "bias", &bias_.value});
}

// ------------------------------------------------------- ConvTranspose2d

template <typename T>
ConvTranspose2d<T>::ConvTranspose2d(const ConvTranspose2dOptions& opt, Rng& rng)
    : opt_(opt),
      weight_("weight", {opt.in_channels, opt.out_channels * opt.kh * opt.kw}),
      bias_("bias", {opt.out_channels}) {
  const T bound = T(1) / std::sqrt(static_cast<T>(opt.out_channels * opt.kh * opt.kw));
  uniform_init(weight_.value, bound, rng);
  uniform_init(bias_.value, bound, rng);
}

template <typename T>
Tensor<T> ConvTranspose2d<T>::forward(const Tensor<T>& x, bool) {
  if (x.rank() != 4 || x.dim(1) != opt_.in_channels) {
    throw std::invalid_argument("ConvTranspose2d: bad input shape " + shape_string(x.shape()));
  }
  const int n = x.dim(0), hi = x.dim(2), wi = x.dim(3);
  const int ho = (hi - 1) * opt_.sh - 2 * opt_.ph + (opt_.kh - 1) + opt_.oph + 1;
  const int wo = (wi - 1) * opt_.sw - 2 * opt_.pw + (opt_.kw - 1) + opt_.opw + 1;
  geom_ = ConvGeometry{opt_.out_channels, ho, wo, opt_.kh, opt_.kw, opt_.sh, opt_.sw, opt_.ph, opt_.pw, 1, 1, hi, wi};
  batch_ = n;
  const int g = geom_.grid();
  const std::ptrdiff_t cols = static_cast<std::ptrdiff_t>(n) * g;
  input_cols_.resize(opt_.in_channels, cols);
  for (int b = 0; b < n; ++b) {
    for (int c = 0; c < opt_.in_channels; ++c) {
      const T* src = x.data() + (static_cast<std::size_t>(b) * opt_.in_channels + c) * g;
      std::copy(src, src + g, input_cols_.data() + static_cast<std::ptrdiff_t>(c) * cols + static_cast<std::ptrdiff_t>(b) * g);
    }
  }
  ConstMatMap<T> wmat(weight_.value.data(), opt_.in_channels, geom_.rows());
  RowMat<T> col = wmat.transpose() * input_cols_;
  Tensor<T> out({n, opt_.out_channels, ho, wo});
  const std::size_t out_stride = out.stride(0);
  for (int b = 0; b < n; ++b) col2im(col.data(), geom_, out.data() + b * out_stride, cols, static_cast<std::ptrdiff_t>(b) * g);
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  for (int b = 0; b < n; ++b) {
    for (int o = 0; o < opt_.out_channels; ++o) {
      T* dst = out.data() + b * out_stride + o * plane;
      const T bo = bias_.value[o];
      for (std::size_t p = 0; p < plane; ++p) dst[p] += bo;
    }
  }
  return out;
}

template <typename T>
Tensor<T> ConvTranspose2d<T>::backward(const Tensor<T>& gy) {
  const int n = batch_, g = geom_.grid();
  require_shape(gy, {n, opt_.out_channels, geom_.height, geom_.width}, "ConvTranspose2d::backward");
  const std::ptrdiff_t cols = static_cast<std::ptrdiff_t>(n) * g;
  RowMat<T> dcol(geom_.rows(), cols);
  const std::size_t out_stride = gy.stride(0);
  for (int b = 0; b < n; ++b) im2col(gy.data() + b * out_stride, geom_, dcol.data(), cols, static_cast<std::ptrdiff_t>(b) * g);

  MatMap<T> dw(weight_.grad.data(), opt_.in_channels, geom_.rows());
  dw.noalias() += input_cols_ * dcol.transpose();
  const std::size_t plane = static_cast<std::size_t>(geom_.height) * geom_.width;
  for (int b = 0; b < n; ++b) {
    for (int o = 0; o < opt_.out_channels; ++o) {
      const T* src = gy.data() + b * out_stride + o * plane;
      T acc = 0;
      for (std::size_t p = 0; p < plane; ++p) acc += src[p];
      bias_.grad[o] += acc;
    }
  }
  ConstMatMap<T> wmat(weight_.value.data(), opt_.in_channels, geom_.rows());
  RowMat<T> dx = wmat * dcol;
  Tensor<T> gx({n, opt_.in_channels, geom_.grid_h, geom_.grid_w});
  for (int b = 0; b < n; ++b) {
    for (int c = 0; c < opt_.in_channels; ++c) {
      const T* src = dx.data() + static_cast<std::ptrdiff_t>(c) * cols + static_cast<std::ptrdiff_t>(b) * g;
      std::copy(src, src + g, gx.data() + (static_cast<std::size_t>(b) * opt_.in_channels + c) * g);
    }
  }
  return gx;
}

template <typename T>
void ConvTranspose2d<T>::parameters(std::vector<Parameter<T>*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

template <typename T>
void ConvTranspose2d<T>::state(std::vector<StateEntry<T>>& out, const std::string& prefix) {
  out.push_back({prefix + "weight", &weight_.value});
  out.push_back({prefix + "bias", &bias_.value});
}

// ------------------------------------------------------------- BatchNorm

template <typename T>
BatchNorm<T>::BatchNorm(int channels, T momentum, T eps)
    : channels_(channels),
      momentum_(momentum),
      eps_(eps),
      gamma_("gamma", {channels}),
      beta_("beta", {channels}),
      running_mean_({channels}, T(0)),
      running_var_({channels}, T(1)) {
  gamma_.value.fill(T(1));
}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, bool training) {
  if (x.rank() < 2 || x.dim(1) != channels_) throw std::invalid_argument("BatchNorm: bad input shape " + shape_string(x.shape()));
  const int n = x.dim(0);
  const std::size_t plane = x.stride(1);
  const std::size_t m = static_cast<std::size_t>(n) * plane;
  Tensor<T> out(x.shape());
  xhat_ = Tensor<T>(x.shape());
  inv_std_.assign(channels_, T(0));
  cached_training_ = training;
  for (int c = 0; c < channels_; ++c) {
    T mean, var;
    if (training) {
      double s = 0.0;
      for (int b = 0; b < n; ++b) {
        const T* p = x.data() + (static_cast<std::size_t>(b) * channels_ + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      mean = static_cast<T>(s / static_cast<double>(m));
      double v = 0.0;
      for (int b = 0; b < n; ++b) {
        const T* p = x.data() + (static_cast<std::size_t>(b) * channels_ + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = static_cast<double>(p[i]) - mean;
          v += d * d;
        }
      }
      var = static_cast<T>(v / static_cast<double>(m));
      const T unbiased = m > 1 ? static_cast<T>(v / static_cast<double>(m - 1)) : var;
      running_mean_[c] = (T(1) - momentum_) * running_mean_[c] + momentum_ * mean;
      running_var_[c] = (T(1) - momentum_) * running_var_[c] + momentum_ * unbiased;
    } else {
      mean = running_mean_[c];
      var = running_var_[c];
    }
    const T inv = T(1) / std::sqrt(var + eps_);
    inv_std_[c] = inv;
    const T gm = gamma_.value[c], bt = beta_.value[c];
    for (int b = 0; b < n; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * channels_ + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T xh = (x[off + i] - mean) * inv;
        xhat_[off + i] = xh;
        out[off + i] = gm * xh + bt;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> BatchNorm<T>::backward(const Tensor<T>& gy) {
  require_shape(gy, xhat_.shape(), "BatchNorm::backward");
  const int n = gy.dim(0);
  const std::size_t plane = gy.stride(1);
  const double m = static_cast<double>(n) * static_cast<double>(plane);
  Tensor<T> gx(gy.shape());
  for (int c = 0; c < channels_; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (int b = 0; b < n; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * channels_ + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += gy[off + i];
        sum_gx += static_cast<double>(gy[off + i]) * xhat_[off + i];
      }
    }
    gamma_.grad[c] += static_cast<T>(sum_gx);
    beta_.grad[c] += static_cast<T>(sum_g);
    const T scale = gamma_.value[c] * inv_std_[c];
    for (int b = 0; b < n; ++b) {
      const std::size_t off = (static_cast<std::size_t>(b) * channels_ + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        if (cached_training_) {
          gx[off + i] = static_cast<T>(scale * (gy[off + i] - sum_g / m - xhat_[off + i] * sum_gx / m));
        } else {
          gx[off + i] = scale * gy[off + i];
        }
      }
    }
  }
  return gx;
}

template <typename T>
void BatchNorm<T>::parameters(std::vector<Parameter<T>*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

template <typename T>
void BatchNorm<T>::state(std::vector<StateEntry<T>>& out, const std::string& prefix) {
  out.push_back({prefix + "gamma", &gamma_.value});
  out.push_back({prefix + "beta", &beta_.value});
  out.push_back({prefix + "running_mean", &running_mean_});
  out.push_back({prefix + "running_var", &running_var_});
}

// ----------------------------------------------------------- activations

template <typename T>
Tensor<T> Relu<T>::forward(const Tensor<T>& x, bool) {
  out_ = x;
  for (auto& v : out_.flat()) v = v > T(0) ? v : T(0);
  return out_;
}

template <typename T>
Tensor<T> Relu<T>::backward(const Tensor<T>& gy) {
  require_shape(gy, out_.shape(), "Relu::backward");
  Tensor<T> gx(gy.shape());
  for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = out_[i] > T(0) ? gy[i] : T(0);
  return gx;
}

template <typename T>
Tensor<T> LeakyRelu<T>::forward(const Tensor<T>& x, bool) {
  in_ = x;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : slope_ * x[i];
  return out;
}

template <typename T>
Tensor<T> LeakyRelu<T>::backward(const Tensor<T>& gy) {
  require_shape(gy, in_.shape(), "LeakyRelu::backward");
  Tensor<T> gx(gy.shape());
  for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = in_[i] > T(0) ? gy[i] : slope_ * gy[i];
  return gx;
}

template <typename T>
Tensor<T> Sigmoid<T>::forward(const Tensor<T>& x, bool) {
  out_ = Tensor<T>(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out_[i] = T(1) / (T(1) + std::exp(-x[i]));
  return out_;
}

template <typename T>
Tensor<T> Sigmoid<T>::backward(const Tensor<T>& gy) {
  require_shape(gy, out_.shape(), "Sigmoid::backward");
  Tensor<T> gx(gy.shape());
  for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = gy[i] * out_[i] * (T(1) - out_[i]);
  return gx;
}

template <typename T>
Tensor<T> Tanh<T>::forward(const Tensor<T>& x, bool) {
  out_ = Tensor<T>(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out_[i] = std::tanh(x[i]);
  return out_;
}

template <typename T>
Tensor<T> Tanh<T>::backward(const Tensor<T>& gy) {
  require_shape(gy, out_.shape(), "Tanh::backward");
  Tensor<T> gx(gy.shape());
  for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = gy[i] * (T(1) - out_[i] * out_[i]);
  return gx;
}

// --------------------------------------------------------------- pooling

template <typename T>
Tensor<T> MaxPoolLastAxis<T>::forward(const Tensor<T>& x, bool) {
  in_shape_ = x.shape();
  const int w = in_shape_.back();
  if (factor_ <= 0 || w % factor_ != 0) throw std::invalid_argument("MaxPoolLastAxis: width not divisible by factor");
  std::vector<int> out_shape = in_shape_;
  out_shape.back() = w / factor_;
  Tensor<T> out(out_shape);
  argmax_.assign(out.size(), 0);
  for (std::size_t o = 0; o < out.size(); ++o) {
    const std::size_t base = o * static_cast<std::size_t>(factor_);
    std::size_t best = base;
    for (int k = 1; k < factor_; ++k) {
      if (x[base + k] > x[best]) best = base + k;
    }
    argmax_[o] = best;
    out[o] = x[best];
  }
  return out;
}

template <typename T>
Tensor<T> MaxPoolLastAxis<T>::backward(const Tensor<T>& gy) {
  Tensor<T> gx(in_shape_);
  if (gy.size() != argmax_.size()) throw std::invalid_argument("MaxPoolLastAxis::backward: shape mismatch");
  for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax_[o]] += gy[o];
  return gx;
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::forward(const Tensor<T>& x, bool) {
  if (x.rank() != 4) throw std::invalid_argument("GlobalAvgPool: expected rank-4 input");
  in_shape_ = x.shape();
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = x.stride(1);
  Tensor<T> out({n, c});
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += x[i * plane + p];
    out[i] = static_cast<T>(s / static_cast<double>(plane));
  }
  return out;
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::backward(const Tensor<T>& gy) {
  Tensor<T> gx(in_shape_);
  const std::size_t plane = gx.stride(1);
  const T inv = T(1) / static_cast<T>(plane);
  for (std::size_t i = 0; i < gy.size(); ++i) {
    for (std::size_t p = 0; p < plane; ++p) gx[i * plane + p] = gy[i] * inv;
  }
  return gx;
}

// ---------------------------------------------------------------- Linear

template <typename T>
Linear<T>::Linear(int in_features, int out_features, Rng& rng)
    : in_(in_features), out_(out_features), weight_("weight", {out_features, in_features}), bias_("bias", {out_features}) {
  const T bound = T(1) / std::sqrt(static_cast<T>(in_features));
  uniform_init(weight_.value, bound, rng);
  uniform_init(bias_.value, bound, rng);
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, bool) {
  if (x.rank() < 2 || x.shape().back() != in_) throw std::invalid_argument("Linear: bad input shape " + shape_string(x.shape()));
  input_ = x;
  const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(x.size() / in_);
  std::vector<int> out_shape = x.shape();
  out_shape.back() = out_;
  Tensor<T> out(out_shape);
  ConstMatMap<T> xm(x.data(), rows, in_);
  ConstMatMap<T> wm(weight_.value.data(), out_, in_);
  MatMap<T> ym(out.data(), rows, out_);
  ym.noalias() = xm * wm.transpose();
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias_.value.data(), out_);
  ym.rowwise() += bv;
  return out;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& gy) {
  const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(input_.size() / in_);
  if (gy.size() != static_cast<std::size_t>(rows) * out_) throw std::invalid_argument("Linear::backward: shape mismatch");
  ConstMatMap<T> gm(gy.data(), rows, out_);
  ConstMatMap<T> xm(input_.data(), rows, in_);
  MatMap<T> dw(weight_.grad.data(), out_, in_);
  dw.noalias() += gm.transpose() * xm;
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(bias_.grad.data(), out_);
  db += gm.colwise().sum();
  Tensor<T> gx(input_.shape());
  MatMap<T> gxm(gx.data(), rows, in_);
  ConstMatMap<T> wm(weight_.value.data(), out_, in_);
  gxm.noalias() = gm * wm;
  return gx;
}

template <typename T>
void Linear<T>::parameters(std::vector<Parameter<T>*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

template <typename T>
void Linear<T>::state(std::vector<StateEntry<T>>& out, const std::string& prefix) {
  out.push_back({prefix + "weight", &weight_.value});
  out.push_back({prefix + "bias", &bias_.value});
}

// ------------------------------------------------------------ Sequential

template <typename T>
Tensor<T> Sequential<T>::forward(const Tensor<T>& x, bool training) {
  Tensor<T> h = x;
  for (auto& l : layers_) h = l->forward(h, training);
  return h;
}

template <typename T>
Tensor<T> Sequential<T>::backward(const Tensor<T>& gy) {
  Tensor<T> g = gy;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

template <typename T>
void Sequential<T>::parameters(std::vector<Parameter<T>*>& out) {
  for (auto& l : layers_) l->parameters(out);
}

template <typename T>
void Sequential<T>::state(std::vector<StateEntry<T>>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->state(out, prefix + std::to_string(i) + ".");
}

template <typename T>
double mse_loss(const Tensor<T>& pred, const Tensor<T>& target, Tensor<T>* grad) {
  if (!pred.same_shape(target)) throw std::invalid_argument("mse_loss: shape mismatch");
  const double n = static_cast<double>(pred.size());
  double s = 0.0;
  if (grad) *grad = Tensor<T>(pred.shape());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    s += d * d;
    if (grad) (*grad)[i] = static_cast<T>(2.0 * d / n);
  }
  return s / n;
}

#define LOCUS_INSTANTIATE(T)                                                                          \
  template void im2col<T>(const T*, const ConvGeometry&, T*, std::ptrdiff_t, std::ptrdiff_t);         \
  template void col2im<T>(const T*, const ConvGeometry&, T*, std::ptrdiff_t, std::ptrdiff_t);         \
  template class Conv2d<T>;                                                                           \
  template class ConvTranspose2d<T>;                                                                  \
  template class BatchNorm<T>;                                                                        \
  template class Relu<T>;                                                                             \
  template class LeakyRelu<T>;                                                                        \
  template class Sigmoid<T>;                                                                          \
  template class Tanh<T>;                                                                             \
  template class MaxPoolLastAxis<T>;                                                                  \
  template class Linear<T>;                                                                           \
  template class GlobalAvgPool<T>;                                                                    \
  template class Sequential<T>;                                                                       \
  template double mse_loss<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);

LOCUS_INSTANTIATE(float)
LOCUS_INSTANTIATE(double)

#undef LOCUS_INSTANTIATE

}  // namespace locus::nn
