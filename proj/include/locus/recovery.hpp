#pragma once

#include "locus/nn/layers.hpp"

#include <string>

namespace locus {

/// Reference per-element entropy sigma(-f log f), with 0 log 0 := 0. Note that
/// both f = 0 and f = 1 map to 0.5. The runtime estimate is InfoNet.
double entropy_eq1(double f);

/// Element-wise information estimate, same shape as the features it scores.
template <typename T>
struct EntropyMap {
  nn::Tensor<T> values;  // every element in (0, 1)
};

/// Learned entropy estimator. Output = sigmoid(I_c + I_s) where I_c comes from
/// a pooled MLP over channels (broadcast over T, D) and I_s from a dilated
/// point-wise conv stack (broadcast over channels). [N,C,T,D] -> [N,C,T,D].
template <typename T>
class InfoNet {
 public:
  InfoNet(int channels, int reduction, nn::Rng& rng);

  nn::Tensor<T> forward(const nn::Tensor<T>& x, bool training);
  /// Gradient w.r.t. the network input.
  nn::Tensor<T> backward(const nn::Tensor<T>& grad_out);
  void parameters(std::vector<nn::Parameter<T>*>& out);
  void state(std::vector<nn::StateEntry<T>>& out, const std::string& prefix);

  int channels() const { return channels_; }
  int hidden() const { return hidden_; }

 private:
  int channels_, hidden_;
  nn::Sequential<T> channel_branch_;
  nn::Sequential<T> point_branch_;
  nn::Tensor<T> out_;
};

/// Contraction/expansion autoencoder producing the full-rank estimate.
/// Inputs are reflect-padded to multiples of 32 on (T, D) and the output is
/// cropped back, so any frame count works. Output values lie in (0, 1).
template <typename T>
class Lafs {
 public:
  static constexpr int kLevels = 5;
  static constexpr int kMultiple = 32;

  Lafs(int channels, nn::Rng& rng);

  nn::Tensor<T> forward(const nn::Tensor<T>& x, bool training);
  nn::Tensor<T> backward(const nn::Tensor<T>& grad_out);
  void parameters(std::vector<nn::Parameter<T>*>& out);
  void state(std::vector<nn::StateEntry<T>>& out, const std::string& prefix);

  int channels() const { return channels_; }
  /// Set once the network has been optimized or restored from a checkpoint.
  bool trained = false;

 private:
  int channels_;
  nn::Sequential<T> net_;
  std::vector<int> in_shape_;
  int padded_h_ = 0, padded_w_ = 0;
};

/// Mirror padding of the last two axes up to (out_h, out_w); the pad goes
/// after the data. Pads may exceed the input length.
template <typename T>
nn::Tensor<T> reflect_pad(const nn::Tensor<T>& x, int out_h, int out_w);
/// Adjoint of reflect_pad (gradient w.r.t. the unpadded input).
template <typename T>
nn::Tensor<T> reflect_pad_backward(const nn::Tensor<T>& grad, const std::vector<int>& in_shape);

/// F_hat = I * F_tilde + (1 - I) * F_bar, element-wise. Shapes must match.
template <typename T>
nn::Tensor<T> grep_combine(const nn::Tensor<T>& f_tilde, const nn::Tensor<T>& f_bar, const nn::Tensor<T>& info);

template <typename T>
struct GrepGrads {
  nn::Tensor<T> f_tilde, f_bar, info;
};

template <typename T>
GrepGrads<T> grep_backward(const nn::Tensor<T>& f_tilde, const nn::Tensor<T>& f_bar, const nn::Tensor<T>& info,
                           const nn::Tensor<T>& grad_out);

enum class RecoveryMode {
  Full,      // GRep(F_tilde, LaFS, InFo)
  InfoOnly,  // I * F_tilde
  LafsOnly,  // F_bar
};

std::string to_string(RecoveryMode m);

template <typename T>
struct RecoveryOutput {
  nn::Tensor<T> f_hat;
  EntropyMap<T> entropy;  // empty in LafsOnly mode
  nn::Tensor<T> f_bar;    // empty in InfoOnly mode
};

/// Runs the recovery stack on squashed features [N,C,T,D]. Networks not used
/// by the mode may be null.
template <typename T>
RecoveryOutput<T> recover(const nn::Tensor<T>& f_tilde, InfoNet<T>* info, Lafs<T>* lafs, RecoveryMode mode,
                          bool training);

/// Gradient of a downstream loss w.r.t. the entropy map, given dL/dF_hat.
/// F_bar is treated as a constant (its parameters follow their own objective).
template <typename T>
nn::Tensor<T> recovery_entropy_grad(const RecoveryOutput<T>& out, const nn::Tensor<T>& f_tilde,
                                    const nn::Tensor<T>& grad_f_hat, RecoveryMode mode);

}  // namespace locus
