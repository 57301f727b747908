#include "locus/nn/gru.hpp"

#include <cmath>

namespace locus::nn {

namespace {

template <typename T>
T sigmoid(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

}  // namespace

template <typename T>
Gru<T>::Gru(int input, int hidden, bool reverse, Rng& rng)
    : input_(input),
      hidden_(hidden),
      reverse_(reverse),
      w_ih_("w_ih", {3 * hidden, input}),
      w_hh_("w_hh", {3 * hidden, hidden}),
      b_ih_("b_ih", {3 * hidden}),
      b_hh_("b_hh", {3 * hidden}) {
  const T bound = T(1) / std::sqrt(static_cast<T>(hidden));
  uniform_init(w_ih_.value, bound, rng);
  uniform_init(w_hh_.value, bound, rng);
  uniform_init(b_ih_.value, bound, rng);
  uniform_init(b_hh_.value, bound, rng);
}

template <typename T>
Tensor<T> Gru<T>::forward(const Tensor<T>& x, bool) {
  if (x.rank() != 3 || x.dim(2) != input_) throw std::invalid_argument("Gru: bad input shape " + shape_string(x.shape()));
  x_ = x;
  const int n = x.dim(0), steps = x.dim(1), h = hidden_;
  ConstMatMap<T> xm(x.data(), static_cast<std::ptrdiff_t>(n) * steps, input_);
  ConstMatMap<T> wih(w_ih_.value.data(), 3 * h, input_);
  ConstMatMap<T> whh(w_hh_.value.data(), 3 * h, h);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bih(b_ih_.value.data(), 3 * h);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bhh(b_hh_.value.data(), 3 * h);

  RowMat<T> xg = xm * wih.transpose();
  xg.rowwise() += bih;

  gates_.assign(steps, RowMat<T>());
  hn_.assign(steps, RowMat<T>());
  h_prev_.assign(steps, RowMat<T>());
  Tensor<T> out({n, steps, h});
  RowMat<T> hstate = RowMat<T>::Zero(n, h);
  for (int s = 0; s < steps; ++s) {
    const int t = reverse_ ? steps - 1 - s : s;
    RowMat<T> hg = hstate * whh.transpose();
    hg.rowwise() += bhh;
    RowMat<T> g(n, 3 * h);
    RowMat<T> hn = hg.rightCols(h);
    RowMat<T> hnew(n, h);
    for (int b = 0; b < n; ++b) {
      const auto xrow = xg.row(static_cast<std::ptrdiff_t>(b) * steps + t);
      for (int j = 0; j < h; ++j) {
        const T r = sigmoid(xrow(j) + hg(b, j));
        const T z = sigmoid(xrow(h + j) + hg(b, h + j));
        const T nn = std::tanh(xrow(2 * h + j) + r * hn(b, j));
        g(b, j) = r;
        g(b, h + j) = z;
        g(b, 2 * h + j) = nn;
        hnew(b, j) = (T(1) - z) * nn + z * hstate(b, j);
      }
    }
    gates_[s] = std::move(g);
    hn_[s] = std::move(hn);
    h_prev_[s] = hstate;
    hstate = std::move(hnew);
    for (int b = 0; b < n; ++b) {
      T* dst = out.data() + (static_cast<std::size_t>(b) * steps + t) * h;
      for (int j = 0; j < h; ++j) dst[j] = hstate(b, j);
    }
  }
  return out;
}

template <typename T>
Tensor<T> Gru<T>::backward(const Tensor<T>& gy) {
  const int n = x_.dim(0), steps = x_.dim(1), h = hidden_;
  require_shape(gy, {n, steps, h}, "Gru::backward");
  ConstMatMap<T> whh(w_hh_.value.data(), 3 * h, h);
  MatMap<T> dwhh(w_hh_.grad.data(), 3 * h, h);
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> dbhh(b_hh_.grad.data(), 3 * h);

  RowMat<T> dxg = RowMat<T>::Zero(static_cast<std::ptrdiff_t>(n) * steps, 3 * h);
  RowMat<T> dh_next = RowMat<T>::Zero(n, h);
  for (int s = steps - 1; s >= 0; --s) {
    const int t = reverse_ ? steps - 1 - s : s;
    const RowMat<T>& g = gates_[s];
    const RowMat<T>& hn = hn_[s];
    const RowMat<T>& hp = h_prev_[s];
    RowMat<T> dhg(n, 3 * h);
    RowMat<T> dh_prev(n, h);
    for (int b = 0; b < n; ++b) {
      const T* gyrow = gy.data() + (static_cast<std::size_t>(b) * steps + t) * h;
      auto dxrow = dxg.row(static_cast<std::ptrdiff_t>(b) * steps + t);
      for (int j = 0; j < h; ++j) {
        const T r = g(b, j), z = g(b, h + j), nn = g(b, 2 * h + j);
        const T dh = gyrow[j] + dh_next(b, j);
        const T dn = dh * (T(1) - z);
        const T dz = dh * (hp(b, j) - nn);
        const T dn_pre = dn * (T(1) - nn * nn);
        const T dr = dn_pre * hn(b, j);
        const T dr_pre = dr * r * (T(1) - r);
        const T dz_pre = dz * z * (T(1) - z);
        dxrow(j) = dr_pre;
        dxrow(h + j) = dz_pre;
        dxrow(2 * h + j) = dn_pre;
        dhg(b, j) = dr_pre;
        dhg(b, h + j) = dz_pre;
        dhg(b, 2 * h + j) = dn_pre * r;
        dh_prev(b, j) = dh * z;
      }
    }
    dwhh.noalias() += dhg.transpose() * hp;
    dbhh += dhg.colwise().sum();
    dh_prev.noalias() += dhg * whh;
    dh_next = std::move(dh_prev);
  }
  ConstMatMap<T> xm(x_.data(), static_cast<std::ptrdiff_t>(n) * steps, input_);
  ConstMatMap<T> wih(w_ih_.value.data(), 3 * h, input_);
  MatMap<T> dwih(w_ih_.grad.data(), 3 * h, input_);
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> dbih(b_ih_.grad.data(), 3 * h);
  dwih.noalias() += dxg.transpose() * xm;
  dbih += dxg.colwise().sum();
  Tensor<T> gx(x_.shape());
  MatMap<T> gxm(gx.data(), static_cast<std::ptrdiff_t>(n) * steps, input_);
  gxm.noalias() = dxg * wih;
  return gx;
}

template <typename T>
void Gru<T>::parameters(std::vector<Parameter<T>*>& out) {
  out.push_back(&w_ih_);
  out.push_back(&w_hh_);
  out.push_back(&b_ih_);
  out.push_back(&b_hh_);
}

template <typename T>
void Gru<T>::state(std::vector<StateEntry<T>>& out, const std::string& prefix) {
  out.push_back({prefix + "w_ih", &w_ih_.value});
  out.push_back({prefix + "w_hh", &w_hh_.value});
  out.push_back({prefix + "b_ih", &b_ih_.value});
  out.push_back({prefix + "b_hh", &b_hh_.value});
}

template <typename T>
BiGru<T>::BiGru(int input, int hidden, Rng& rng)
    : hidden_(hidden), fwd_(input, hidden, false, rng), bwd_(input, hidden, true, rng) {}

template <typename T>
Tensor<T> BiGru<T>::forward(const Tensor<T>& x, bool training) {
  const Tensor<T> f = fwd_.forward(x, training);
  const Tensor<T> b = bwd_.forward(x, training);
  const int n = x.dim(0), steps = x.dim(1), h = hidden_;
  Tensor<T> out({n, steps, 2 * h});
  for (std::size_t row = 0; row < static_cast<std::size_t>(n) * steps; ++row) {
    std::copy(f.data() + row * h, f.data() + (row + 1) * h, out.data() + row * 2 * h);
    std::copy(b.data() + row * h, b.data() + (row + 1) * h, out.data() + row * 2 * h + h);
  }
  return out;
}

template <typename T>
Tensor<T> BiGru<T>::backward(const Tensor<T>& gy) {
  const int n = gy.dim(0), steps = gy.dim(1), h = hidden_;
  Tensor<T> gf({n, steps, h}), gb({n, steps, h});
  for (std::size_t row = 0; row < static_cast<std::size_t>(n) * steps; ++row) {
    std::copy(gy.data() + row * 2 * h, gy.data() + row * 2 * h + h, gf.data() + row * h);
    std::copy(gy.data() + row * 2 * h + h, gy.data() + (row + 1) * 2 * h, gb.data() + row * h);
  }
  Tensor<T> gx = fwd_.backward(gf);
  const Tensor<T> gx2 = bwd_.backward(gb);
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gx2[i];
  return gx;
}

template <typename T>
void BiGru<T>::parameters(std::vector<Parameter<T>*>& out) {
  fwd_.parameters(out);
  bwd_.parameters(out);
}

template <typename T>
void BiGru<T>::state(std::vector<StateEntry<T>>& out, const std::string& prefix) {
  fwd_.state(out, prefix + "fwd.");
  bwd_.state(out, prefix + "bwd.");
}

template class Gru<float>;
template class Gru<double>;
template class BiGru<float>;
template class BiGru<double>;

}  // namespace locus::nn
