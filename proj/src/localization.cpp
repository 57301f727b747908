#include "locus/localization.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace locus {

using nn::Tensor;

template <typename T>
Crnn<T>::Crnn(const CrnnConfig& cfg, nn::Rng& rng)
    : cfg_(cfg),
      gru1_(cfg.conv_filters, cfg.gru_hidden, rng),
      gru2_(2 * cfg.gru_hidden, cfg.gru_hidden, rng) {
  const int reduced = std::accumulate(cfg.pool.begin(), cfg.pool.end(), 1, std::multiplies<>());
  if (cfg.pool.empty() || reduced != cfg.bins) {
    throw std::invalid_argument("Crnn: pooling factors must multiply to the bin count " + std::to_string(cfg.bins));
  }
  int in = cfg.channels;
  for (int factor : cfg.pool) {
    nn::Conv2dOptions o{.in_channels = in, .out_channels = cfg.conv_filters, .kh = 3, .kw = 3, .ph = 1, .pw = 1};
    conv_.template add<nn::Conv2d<T>>(o, rng);
    conv_.template add<nn::BatchNorm<T>>(cfg.conv_filters);
    conv_.template add<nn::Relu<T>>();
    if (factor > 1) conv_.template add<nn::MaxPoolLastAxis<T>>(factor);
    in = cfg.conv_filters;
  }
  head_.template add<nn::Linear<T>>(2 * cfg.gru_hidden, cfg.fc_hidden, rng);
  head_.template add<nn::Linear<T>>(cfg.fc_hidden, 3 * cfg.n_classes, rng);
  head_.template add<nn::Tanh<T>>();
}

template <typename T>
Tensor<T> Crnn<T>::forward(const Tensor<T>& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != cfg_.channels || x.dim(3) != cfg_.bins) {
    throw std::invalid_argument("Crnn: expected [N, " + std::to_string(cfg_.channels) + ", T, " +
                                std::to_string(cfg_.bins) + "], got " + nn::shape_string(x.shape()));
  }
  batch_ = x.dim(0);
  frames_ = x.dim(2);
  const Tensor<T> c = conv_.forward(x, training);  // [N, F, T, 1]
  const int f = cfg_.conv_filters;
  Tensor<T> seq({batch_, frames_, f});
  for (int b = 0; b < batch_; ++b) {
    for (int ch = 0; ch < f; ++ch) {
      const T* src = c.data() + (static_cast<std::size_t>(b) * f + ch) * frames_;
      for (int t = 0; t < frames_; ++t) seq[(static_cast<std::size_t>(b) * frames_ + t) * f + ch] = src[t];
    }
  }
  Tensor<T> y = head_.forward(gru2_.forward(gru1_.forward(seq, training), training), training);
  y.reshape({batch_, frames_, cfg_.n_classes, 3});
  return y;
}

template <typename T>
Tensor<T> Crnn<T>::backward(const Tensor<T>& grad_out) {
  nn::require_shape(grad_out, {batch_, frames_, cfg_.n_classes, 3}, "Crnn::backward");
  Tensor<T> g = grad_out;
  g.reshape({batch_, frames_, 3 * cfg_.n_classes});
  const Tensor<T> gseq = gru1_.backward(gru2_.backward(head_.backward(g)));
  const int f = cfg_.conv_filters;
  Tensor<T> gc({batch_, f, frames_, 1});
  for (int b = 0; b < batch_; ++b) {
    for (int ch = 0; ch < f; ++ch) {
      T* dst = gc.data() + (static_cast<std::size_t>(b) * f + ch) * frames_;
      for (int t = 0; t < frames_; ++t) dst[t] = gseq[(static_cast<std::size_t>(b) * frames_ + t) * f + ch];
    }
  }
  return conv_.backward(gc);
}

template <typename T>
void Crnn<T>::parameters(std::vector<nn::Parameter<T>*>& out) {
  conv_.parameters(out);
  gru1_.parameters(out);
  gru2_.parameters(out);
  head_.parameters(out);
}

template <typename T>
void Crnn<T>::state(std::vector<nn::StateEntry<T>>& out, const std::string& prefix) {
  conv_.state(out, prefix + "conv.");
  gru1_.state(out, prefix + "gru1.");
  gru2_.state(out, prefix + "gru2.");
  head_.state(out, prefix + "head.");
}

template class Crnn<float>;
template class Crnn<double>;

// --------------------------------------------------------------- targets

bool frame_active(const EventLabel& label, int frame, double hop_s, double window_s) {
  const double centre = frame * hop_s + window_s / 2.0;
  return centre >= label.onset_s && centre < label.offset_s;
}

Tensor<float> accdoa_targets(const std::vector<EventLabel>& labels, int n_frames, int n_classes, double hop_s,
                             double window_s) {
  Tensor<float> y({n_frames, n_classes, 3});
  for (const auto& l : labels) {
    if (l.class_id < 0 || l.class_id >= n_classes) throw std::invalid_argument("label class out of range");
    const Eigen::Vector3d u = l.doa_unit.normalized();
    for (int t = 0; t < n_frames; ++t) {
      if (!frame_active(l, t, hop_s, window_s)) continue;
      float* v = y.data() + (static_cast<std::size_t>(t) * n_classes + l.class_id) * 3;
      for (int i = 0; i < 3; ++i) v[i] = static_cast<float>(u[i]);
    }
  }
  return y;
}

std::vector<Detection> decode_accdoa(const Tensor<float>& accdoa, double threshold) {
  if (accdoa.rank() != 3 || accdoa.dim(2) != 3) throw std::invalid_argument("decode_accdoa: expected [T, K, 3]");
  if (!(threshold > 0.0)) throw std::invalid_argument("decode_accdoa: threshold must be positive");
  std::vector<Detection> out;
  const int frames = accdoa.dim(0), classes = accdoa.dim(1);
  for (int t = 0; t < frames; ++t) {
    for (int k = 0; k < classes; ++k) {
      const float* v = accdoa.data() + (static_cast<std::size_t>(t) * classes + k) * 3;
      const Eigen::Vector3d d(v[0], v[1], v[2]);
      const double n = d.norm();
      if (n > threshold) out.push_back({t, k, d / n});
    }
  }
  return out;
}

double angular_error_deg(const Eigen::Vector3d& p, const Eigen::Vector3d& r) {
  const double c = std::clamp(p.dot(r), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

double DoaScore::mean_deg() const {
  return matched > 0 ? sum_deg / static_cast<double>(matched) : std::numeric_limits<double>::quiet_NaN();
}

namespace {

Eigen::Vector3d unit_or_throw(const Eigen::Vector3d& v, long& renormalized) {
  const double n = v.norm();
  if (std::abs(n - 1.0) <= 1e-6) return v;
  if (n >= 0.5 && n <= 2.0) {
    ++renormalized;
    return v / n;
  }
  throw std::invalid_argument("e_doa: direction vector with norm " + std::to_string(n) + " is not a unit vector");
}

}  // namespace

DoaScore e_doa(const std::vector<Detection>& predictions, const std::vector<Detection>& references) {
  long renormalized = 0;
  std::map<std::pair<int, int>, Eigen::Vector3d> refs;
  for (const auto& r : references) refs[{r.frame, r.class_id}] = unit_or_throw(r.doa, renormalized);
  DoaScore s;
  for (const auto& p : predictions) {
    const auto it = refs.find({p.frame, p.class_id});
    if (it == refs.end()) continue;
    s.sum_deg += angular_error_deg(unit_or_throw(p.doa, renormalized), it->second);
    ++s.matched;
  }
  if (renormalized > 0) spdlog::warn("e_doa: normalized {} non-unit direction vectors", renormalized);
  return s;
}

void write_predictions_header(std::ostream& out) { out << "clip_id,frame,class,x,y,z\n"; }

void write_predictions_csv(std::ostream& out, const std::string& clip_id, const std::vector<Detection>& detections) {
  char buf[128];
  for (const auto& d : detections) {
    std::snprintf(buf, sizeof(buf), ",%d,%d,%.6f,%.6f,%.6f\n", d.frame, d.class_id, d.doa.x(), d.doa.y(), d.doa.z());
    out << clip_id << buf;
  }
}

}  // namespace locus
