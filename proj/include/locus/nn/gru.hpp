#pragma once

#include "locus/nn/layers.hpp"

namespace locus::nn {

/// Single-direction gated recurrent unit over [N, T, input] -> [N, T, hidden].
/// Gate layout and equations follow the common (r, z, n) convention:
///   r = s(Wir x + bir + Whr h + bhr),  z = s(Wiz x + biz + Whz h + bhz)
///   n = tanh(Win x + bin + r * (Whn h + bhn)),  h' = (1 - z) * n + z * h
template <typename T>
class Gru : public Layer<T> {
 public:
  Gru(int input, int hidden, bool reverse, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void parameters(std::vector<Parameter<T>*>& out) override;
  void state(std::vector<StateEntry<T>>& out, const std::string& prefix) override;

 private:
  int input_, hidden_;
  bool reverse_;
  Parameter<T> w_ih_, w_hh_, b_ih_, b_hh_;
  Tensor<T> x_;
  // per processed step (in processing order)
  std::vector<RowMat<T>> gates_;   // [N, 3H] post-activation r, z, n
  std::vector<RowMat<T>> hn_;      // [N, H] Whn h + bhn
  std::vector<RowMat<T>> h_prev_;  // [N, H]
};

/// Concatenates a forward and a reverse Gru along the feature axis.
template <typename T>
class BiGru : public Layer<T> {
 public:
  BiGru(int input, int hidden, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void parameters(std::vector<Parameter<T>*>& out) override;
  void state(std::vector<StateEntry<T>>& out, const std::string& prefix) override;

 private:
  int hidden_;
  Gru<T> fwd_, bwd_;
};

}  // namespace locus::nn
