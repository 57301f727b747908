#include "locus/recovery.hpp"

#include <cmath>
#include <stdexcept>

namespace locus {

using nn::Tensor;

double entropy_eq1(double f) {
  const double h = f > 0.0 ? -f * std::log(f) : 0.0;
  return 1.0 / (1.0 + std::exp(-h));
}

// ------------------------------------------------------------------ InFo

template <typename T>
InfoNet<T>::InfoNet(int channels, int reduction, nn::Rng& rng)
    : channels_(channels), hidden_((channels + reduction - 1) / reduction) {
  if (channels < 1 || reduction < 1) throw std::invalid_argument("InfoNet: channels and reduction must be positive");
  channel_branch_.template add<nn::GlobalAvgPool<T>>();
  channel_branch_.template add<nn::Linear<T>>(channels_, hidden_, rng);
  channel_branch_.template add<nn::BatchNorm<T>>(hidden_);
  channel_branch_.template add<nn::Relu<T>>();
  channel_branch_.template add<nn::Linear<T>>(hidden_, hidden_, rng);
  channel_branch_.template add<nn::BatchNorm<T>>(hidden_);
  channel_branch_.template add<nn::Relu<T>>();
  channel_branch_.template add<nn::Linear<T>>(hidden_, channels_, rng);

  nn::Conv2dOptions squeeze{.in_channels = channels_, .out_channels = hidden_, .kh = 1, .kw = 1};
  point_branch_.template add<nn::Conv2d<T>>(squeeze, rng);
  for (int i = 0; i < 3; ++i) {
    nn::Conv2dOptions dil{.in_channels = hidden_, .out_channels = hidden_, .kh = 3, .kw = 3,
                          .ph = 2, .pw = 2, .dh = 2, .dw = 2};
    point_branch_.template add<nn::Conv2d<T>>(dil, rng);
    point_branch_.template add<nn::BatchNorm<T>>(hidden_);
    point_branch_.template add<nn::Relu<T>>();
  }
  nn::Conv2dOptions head{.in_channels = hidden_, .out_channels = 1, .kh = 1, .kw = 1};
  point_branch_.template add<nn::Conv2d<T>>(head, rng);
}

template <typename T>
Tensor<T> InfoNet<T>::forward(const Tensor<T>& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != channels_) {
    throw std::invalid_argument("InfoNet: expected [N, " + std::to_string(channels_) + ", T, D], got " +
                                nn::shape_string(x.shape()));
  }
  const Tensor<T> ic = channel_branch_.forward(x, training);  // [N, C]
  const Tensor<T> is = point_branch_.forward(x, training);    // [N, 1, T, D]
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = x.stride(1);
  out_ = Tensor<T>(x.shape());
  for (int b = 0; b < n; ++b) {
    const T* s = is.data() + b * plane;
    for (int ch = 0; ch < c; ++ch) {
      const T bias = ic[static_cast<std::size_t>(b) * c + ch];
      T* o = out_.data() + (static_cast<std::size_t>(b) * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) o[i] = T(1) / (T(1) + std::exp(-(bias + s[i])));
    }
  }
  return out_;
}

template <typename T>
Tensor<T> InfoNet<T>::backward(const Tensor<T>& grad_out) {
  nn::require_shape(grad_out, out_.shape(), "InfoNet::backward");
  const int n = out_.dim(0), c = out_.dim(1);
  const std::size_t plane = out_.stride(1);
  Tensor<T> g_ic({n, c});
  Tensor<T> g_is({n, 1, out_.dim(2), out_.dim(3)});
  for (int b = 0; b < n; ++b) {
    T* gs = g_is.data() + b * plane;
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * plane;
      T acc = T(0);
      for (std::size_t i = 0; i < plane; ++i) {
        const T y = out_[off + i];
        const T gz = grad_out[off + i] * y * (T(1) - y);
        acc += gz;
        gs[i] += gz;
      }
      g_ic[static_cast<std::size_t>(b) * c + ch] = acc;
    }
  }
  Tensor<T> dx = channel_branch_.backward(g_ic);
  const Tensor<T> dx2 = point_branch_.backward(g_is);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dx2[i];
  return dx;
}

template <typename T>
void InfoNet<T>::parameters(std::vector<nn::Parameter<T>*>& out) {
  channel_branch_.parameters(out);
  point_branch_.parameters(out);
}

template <typename T>
void InfoNet<T>::state(std::vector<nn::StateEntry<T>>& out, const std::string& prefix) {
  channel_branch_.state(out, prefix + "channel.");
  point_branch_.state(out, prefix + "point.");
}

// ------------------------------------------------------------------ LaFS

template <typename T>
Lafs<T>::Lafs(int channels, nn::Rng& rng) : channels_(channels) {
  if (channels < 1) throw std::invalid_argument("Lafs: channels must be positive");
  const int down[kLevels] = {32, 64, 128, 256, 512};
  const int up[kLevels] = {256, 128, 64, 32, 16};
  int in = channels_;
  for (int f : down) {
    nn::Conv2dOptions o{.in_channels = in, .out_channels = f, .kh = 5, .kw = 3, .sh = 2, .sw = 2, .ph = 2, .pw = 1};
    net_.template add<nn::Conv2d<T>>(o, rng);
    net_.template add<nn::Relu<T>>();
    net_.template add<nn::BatchNorm<T>>(f);
    in = f;
  }
  for (int f : up) {
    nn::ConvTranspose2dOptions o{.in_channels = in, .out_channels = f, .kh = 5, .kw = 3, .sh = 2, .sw = 2,
                                 .ph = 2, .pw = 1, .oph = 1, .opw = 1};
    net_.template add<nn::ConvTranspose2d<T>>(o, rng);
    net_.template add<nn::BatchNorm<T>>(f);
    net_.template add<nn::LeakyRelu<T>>();
    in = f;
  }
  nn::Conv2dOptions last{.in_channels = in, .out_channels = channels_, .kh = 3, .kw = 3, .ph = 1, .pw = 1};
  net_.template add<nn::Conv2d<T>>(last, rng);
  net_.template add<nn::Sigmoid<T>>();
}

template <typename T>
Tensor<T> Lafs<T>::forward(const Tensor<T>& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != channels_) {
    throw std::invalid_argument("Lafs: expected [N, " + std::to_string(channels_) + ", T, D], got " +
                                nn::shape_string(x.shape()));
  }
  in_shape_ = x.shape();
  auto round_up = [](int v) { return (v + kMultiple - 1) / kMultiple * kMultiple; };
  padded_h_ = round_up(x.dim(2));
  padded_w_ = round_up(x.dim(3));
  const Tensor<T> y = net_.forward(reflect_pad(x, padded_h_, padded_w_), training);
  // crop to the input extent
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out(x.shape());
  for (int b = 0; b < n * c; ++b) {
    for (int i = 0; i < h; ++i) {
      const T* src = y.data() + (static_cast<std::size_t>(b) * padded_h_ + i) * padded_w_;
      std::copy(src, src + w, out.data() + (static_cast<std::size_t>(b) * h + i) * w);
    }
  }
  return out;
}

template <typename T>
Tensor<T> Lafs<T>::backward(const Tensor<T>& grad_out) {
  nn::require_shape(grad_out, in_shape_, "Lafs::backward");
  const int n = in_shape_[0], c = in_shape_[1], h = in_shape_[2], w = in_shape_[3];
  Tensor<T> g({n, c, padded_h_, padded_w_});
  for (int b = 0; b < n * c; ++b) {
    for (int i = 0; i < h; ++i) {
      const T* src = grad_out.data() + (static_cast<std::size_t>(b) * h + i) * w;
      std::copy(src, src + w, g.data() + (static_cast<std::size_t>(b) * padded_h_ + i) * padded_w_);
    }
  }
  return reflect_pad_backward(net_.backward(g), in_shape_);
}

template <typename T>
void Lafs<T>::parameters(std::vector<nn::Parameter<T>*>& out) {
  net_.parameters(out);
}

template <typename T>
void Lafs<T>::state(std::vector<nn::StateEntry<T>>& out, const std::string& prefix) {
  net_.state(out, prefix);
}

// --------------------------------------------------------------- padding

namespace {

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, int out_h, int out_w) {
  if (x.rank() != 4) throw std::invalid_argument("reflect_pad: expected rank-4 tensor");
  const int planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h < h || out_w < w) throw std::invalid_argument("reflect_pad: target smaller than input");
  Tensor<T> out({x.dim(0), x.dim(1), out_h, out_w});
  std::vector<int> cols(out_w);
  for (int j = 0; j < out_w; ++j) cols[j] = reflect_index(j, w);
  for (int p = 0; p < planes; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
    for (int i = 0; i < out_h; ++i) {
      const T* row = src + static_cast<std::size_t>(reflect_index(i, h)) * w;
      for (int j = 0; j < out_w; ++j) dst[static_cast<std::size_t>(i) * out_w + j] = row[cols[j]];
    }
  }
  return out;
}

template <typename T>
Tensor<T> reflect_pad_backward(const Tensor<T>& grad, const std::vector<int>& in_shape) {
  const int planes = in_shape[0] * in_shape[1], h = in_shape[2], w = in_shape[3];
  const int out_h = grad.dim(2), out_w = grad.dim(3);
  Tensor<T> dx(in_shape);
  std::vector<int> cols(out_w);
  for (int j = 0; j < out_w; ++j) cols[j] = reflect_index(j, w);
  for (int p = 0; p < planes; ++p) {
    const T* src = grad.data() + static_cast<std::size_t>(p) * out_h * out_w;
    T* dst = dx.data() + static_cast<std::size_t>(p) * h * w;
    for (int i = 0; i < out_h; ++i) {
      T* row = dst + static_cast<std::size_t>(reflect_index(i, h)) * w;
      for (int j = 0; j < out_w; ++j) row[cols[j]] += src[static_cast<std::size_t>(i) * out_w + j];
    }
  }
  return dx;
}

// ------------------------------------------------------------------ GRep

template <typename T>
Tensor<T> grep_combine(const Tensor<T>& f_tilde, const Tensor<T>& f_bar, const Tensor<T>& info) {
  nn::require_shape(f_bar, f_tilde.shape(), "grep_combine(f_bar)");
  nn::require_shape(info, f_tilde.shape(), "grep_combine(info)");
  Tensor<T> out(f_tilde.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = info[i] * f_tilde[i] + (T(1) - info[i]) * f_bar[i];
  return out;
}

template <typename T>
GrepGrads<T> grep_backward(const Tensor<T>& f_tilde, const Tensor<T>& f_bar, const Tensor<T>& info,
                           const Tensor<T>& grad_out) {
  nn::require_shape(grad_out, f_tilde.shape(), "grep_backward");
  GrepGrads<T> g{Tensor<T>(f_tilde.shape()), Tensor<T>(f_tilde.shape()), Tensor<T>(f_tilde.shape())};
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    g.f_tilde[i] = grad_out[i] * info[i];
    g.f_bar[i] = grad_out[i] * (T(1) - info[i]);
    g.info[i] = grad_out[i] * (f_tilde[i] - f_bar[i]);
  }
  return g;
}

std::string to_string(RecoveryMode m) {
  switch (m) {
    case RecoveryMode::Full: return "locus";
    case RecoveryMode::InfoOnly: return "info-only";
    case RecoveryMode::LafsOnly: return "lafs-only";
  }
  return "?";
}

template <typename T>
RecoveryOutput<T> recover(const Tensor<T>& f_tilde, InfoNet<T>* info, Lafs<T>* lafs, RecoveryMode mode,
                          bool training) {
  RecoveryOutput<T> out;
  if (mode != RecoveryMode::InfoOnly) {
    if (!lafs) throw std::invalid_argument("recover: mode " + to_string(mode) + " needs LaFS");
    out.f_bar = lafs->forward(f_tilde, training);
  }
  if (mode != RecoveryMode::LafsOnly) {
    if (!info) throw std::invalid_argument("recover: mode " + to_string(mode) + " needs InFo");
    out.entropy.values = info->forward(f_tilde, training);
  }
  switch (mode) {
    case RecoveryMode::Full:
      out.f_hat = grep_combine(f_tilde, out.f_bar, out.entropy.values);
      break;
    case RecoveryMode::InfoOnly:
      out.f_hat = Tensor<T>(f_tilde.shape());
      for (std::size_t i = 0; i < f_tilde.size(); ++i) out.f_hat[i] = out.entropy.values[i] * f_tilde[i];
      break;
    case RecoveryMode::LafsOnly:
      out.f_hat = out.f_bar;
      break;
  }
  return out;
}

template <typename T>
Tensor<T> recovery_entropy_grad(const RecoveryOutput<T>& out, const Tensor<T>& f_tilde, const Tensor<T>& grad_f_hat,
                                RecoveryMode mode) {
  nn::require_shape(grad_f_hat, f_tilde.shape(), "recovery_entropy_grad");
  Tensor<T> g(f_tilde.shape());
  switch (mode) {
    case RecoveryMode::Full:
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_f_hat[i] * (f_tilde[i] - out.f_bar[i]);
      break;
    case RecoveryMode::InfoOnly:
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_f_hat[i] * f_tilde[i];
      break;
    case RecoveryMode::LafsOnly:
      throw std::invalid_argument("recovery_entropy_grad: lafs-only has no entropy map");
  }
  return g;
}

#define LOCUS_INSTANTIATE(T)                                                                                   \
  template class InfoNet<T>;                                                                                   \
  template class Lafs<T>;                                                                                      \
  template Tensor<T> reflect_pad<T>(const Tensor<T>&, int, int);                                               \
  template Tensor<T> reflect_pad_backward<T>(const Tensor<T>&, const std::vector<int>&);                       \
  template Tensor<T> grep_combine<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                   \
  template GrepGrads<T> grep_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template RecoveryOutput<T> recover<T>(const Tensor<T>&, InfoNet<T>*, Lafs<T>*, RecoveryMode, bool);          \
  template Tensor<T> recovery_entropy_grad<T>(const RecoveryOutput<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                              RecoveryMode);

LOCUS_INSTANTIATE(float)
LOCUS_INSTANTIATE(double)

#undef LOCUS_INSTANTIATE

}  // namespace locus
