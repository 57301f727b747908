#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace locus::nn {

using Rng = std::mt19937_64;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// Dense row-major tensor. Shapes are small (rank <= 4) and always explicit.
/// Storage is aligned to Eigen's packet size so vectorized reductions peel the
/// same head elements on every run, keeping results bitwise reproducible.
template <typename T>
class Tensor {
 public:
  using Storage = std::vector<T, Eigen::aligned_allocator<T>>;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, T fill = T(0)) : shape_(std::move(shape)) {
    data_.assign(count(shape_), fill);
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  void reshape(std::vector<int> shape) {
    if (count(shape) != data_.size()) throw std::invalid_argument("reshape: element count mismatch");
    shape_ = std::move(shape);
  }
  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  /// Elements per outer index of `axis` (product of trailing dims).
  std::size_t stride(std::size_t axis) const {
    std::size_t s = 1;
    for (std::size_t i = axis + 1; i < shape_.size(); ++i) s *= static_cast<std::size_t>(shape_[i]);
    return s;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  Storage data_;
};

std::string shape_string(const std::vector<int>& shape);

template <typename T>
void require_shape(const Tensor<T>& t, const std::vector<int>& expected, const char* what) {
  if (t.shape() != expected) {
    throw std::invalid_argument(std::string(what) + ": expected shape " + shape_string(expected) + ", got " +
                                shape_string(t.shape()));
  }
}

/// Trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> shape) : name(std::move(n)), value(shape), grad(shape) {}
  void zero_grad() { grad.fill(T(0)); }
};

/// Named pointer into module state, used for checkpoints and state copies.
template <typename T>
struct StateEntry {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
void uniform_init(Tensor<T>& t, T bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  for (auto& v : t.flat()) v = static_cast<T>(dist(rng));
}

/// splitmix64 finalizer; derives independent stream seeds from a master seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t tag_hash(std::string_view tag) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace locus::nn
