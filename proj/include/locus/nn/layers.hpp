#pragma once

#include "locus/nn/tensor.hpp"

#include <memory>
#include <string>
#include <vector>

namespace locus::nn {

/// A differentiable stage. forward() caches what backward() needs, so a
/// layer instance supports one in-flight forward/backward pair at a time.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, bool training) = 0;
  /// Accumulates parameter gradients and returns d(loss)/d(input).
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual void parameters(std::vector<Parameter<T>*>& /*out*/) {}
  /// All persistent tensors (parameters plus running statistics).
  virtual void state(std::vector<StateEntry<T>>& /*out*/, const std::string& /*prefix*/) {}
};

struct ConvGeometry {
  int channels = 0, height = 0, width = 0;  // image side
  int kh = 1, kw = 1, sh = 1, sw = 1, ph = 0, pw = 0, dh = 1, dw = 1;
  int grid_h = 0, grid_w = 0;  // column side
  int rows() const { return channels * kh * kw; }
  int grid() const { return grid_h * grid_w; }
};

/// Unfolds one image into columns [channels*kh*kw, grid] of a matrix whose
/// rows are `row_stride` apart, starting at column `col_offset`.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col, std::ptrdiff_t row_stride, std::ptrdiff_t col_offset);

/// Adjoint of im2col: scatters-and-adds columns back into an image.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* image, std::ptrdiff_t row_stride, std::ptrdiff_t col_offset);

struct Conv2dOptions {
  int in_channels = 1, out_channels = 1;
  int kh = 3, kw = 3;
  int sh = 1, sw = 1;
  int ph = 0, pw = 0;
  int dh = 1, dw = 1;
};

/// 2-D convolution over [N, C, H, W] via im2col + GEMM.
template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(const Conv2dOptions& opt, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void parameters(std::vector<Parameter<T>*>& out) override;
  void state(std::vector<StateEntry<T>>& out, const std::string& prefix) override;
  const Conv2dOptions& options() const { return opt_; }

 private:
  Conv2dOptions opt_;
  Parameter<T> weight_;  // [out, in*kh*kw]
  Parameter<T> bias_;    // [out]
  RowMat<T> col_;
  ConvGeometry geom_;
  int batch_ = 0;
};

struct ConvTranspose2dOptions {
  int in_channels = 1, out_channels = 1;
  int kh = 3, kw = 3;
  int sh = 2, sw = 2;
  int ph = 0, pw = 0;
  int oph = 0, opw = 0;  // output padding
};

/// Transposed convolution (adjoint of a strided convolution), weight [in, out*kh*kw].
template <typename T>
class ConvTranspose2d : public Layer<T> {
 public:
  ConvTranspose2d(const ConvTranspose2dOptions& opt, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void parameters(std::vector<Parameter<T>*>& out) override;
  void state(std::vector<StateEntry<T>>& out, const std::string& prefix) override;

 private:
  ConvTranspose2dOptions opt_;
  Parameter<T> weight_;
  Parameter<T> bias_;
  RowMat<T> input_cols_;  // [in, N*Hi*Wi]
  ConvGeometry geom_;
  int batch_ = 0;
};

/// Batch normalization over axis 1 of [N, C] or [N, C, H, W].
template <typename T>
class BatchNorm : public Layer<T> {
 public:
  explicit BatchNorm(int channels, T momentum = T(0.1), T eps = T(1e-5));
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void parameters(std::vector<Parameter<T>*>& out) override;
  void state(std::vector<StateEntry<T>>& out, const std::string& prefix) override;

 private:
  int channels_;
  T momentum_, eps_;
  Parameter<T> gamma_, beta_;
  Tensor<T> running_mean_, running_var_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
  bool cached_training_ = false;
};

template <typename T>
class Relu : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;

 private:
  Tensor<T> out_;
};

template <typename T>
class LeakyRelu : public Layer<T> {
 public:
  explicit LeakyRelu(T slope = T(0.01)) : slope_(slope) {}
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;

 private:
  T slope_;
  Tensor<T> in_;
};

template <typename T>
class Sigmoid : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;

 private:
  Tensor<T> out_;
};

template <typename T>
class Tanh : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;

 private:
  Tensor<T> out_;
};

/// Max-pool along the last axis with window == stride == factor.
template <typename T>
class MaxPoolLastAxis : public Layer<T> {
 public:
  explicit MaxPoolLastAxis(int factor) : factor_(factor) {}
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;

 private:
  int factor_;
  std::vector<int> in_shape_;
  std::vector<std::size_t> argmax_;
};

/// Fully connected layer on [N, in] (or [..., in], flattened over leading axes).
template <typename T>
class Linear : public Layer<T> {
 public:
  Linear(int in_features, int out_features, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void parameters(std::vector<Parameter<T>*>& out) override;
  void state(std::vector<StateEntry<T>>& out, const std::string& prefix) override;

 private:
  int in_, out_;
  Parameter<T> weight_;  // [out, in]
  Parameter<T> bias_;
  Tensor<T> input_;
};

/// [N, C, H, W] -> [N, C] mean over H, W.
template <typename T>
class GlobalAvgPool : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;

 private:
  std::vector<int> in_shape_;
};

template <typename T>
class Sequential : public Layer<T> {
 public:
  Sequential() = default;
  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }
  Tensor<T> forward(const Tensor<T>& x, bool training) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void parameters(std::vector<Parameter<T>*>& out) override;
  void state(std::vector<StateEntry<T>>& out, const std::string& prefix) override;
  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

/// Mean squared error over all elements; returns loss and writes d(loss)/d(pred).
template <typename T>
double mse_loss(const Tensor<T>& pred, const Tensor<T>& target, Tensor<T>* grad);

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace locus::nn
