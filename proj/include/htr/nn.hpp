#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "htr/ops.hpp"

namespace htr {

/// Named tensors of a model in registration order. Parameters are trained;
/// buffers (batchnorm running statistics) are saved but never differentiated.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    BasicTensor<T> tensor;
    bool trainable = true;
  };

  BasicTensor<T> parameter(const std::string& name, Shape shape, std::vector<T> init);
  BasicTensor<T> buffer(const std::string& name, Shape shape, std::vector<T> init);

  const std::vector<Entry>& entries() const { return entries_; }
  const Entry& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<BasicTensor<T>> parameters() const;
  /// Total scalar count of trainable parameters.
  std::size_t parameter_count() const;
  void zero_grad();

 private:
  BasicTensor<T> add(const std::string& name, Shape shape, std::vector<T> init, bool trainable);
  std::vector<Entry> entries_;
};

/// Whether dropout and batch statistics are live, and the RNG dropout draws from.
struct ForwardMode {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

namespace init {
/// U(-bound, bound) with bound = gain * sqrt(6 / (fan_in + fan_out)).
template <typename T>
std::vector<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::size_t count,
                              std::mt19937_64& rng, double gain = 1.0);
/// U(-bound, bound) with bound = sqrt(6 / fan_in).
template <typename T>
std::vector<T> kaiming_uniform(std::size_t fan_in, std::size_t count, std::mt19937_64& rng);
template <typename T>
std::vector<T> normal(double stddev, std::size_t count, std::mt19937_64& rng);
}  // namespace init

/// y = x W + b with W stored [in, out]. Accepts [n, in].
template <typename T>
struct Linear {
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
         std::mt19937_64& rng, double gain = 1.0);
  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }
};

template <typename T>
struct LayerNorm {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& prefix, std::size_t dim);
  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
};

template <typename T>
struct BatchNorm2d {
  static constexpr double kMomentum = 0.1;
  static constexpr double kEps = 1e-5;

  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  BatchNormState<T> state;

  BatchNorm2d() = default;
  BatchNorm2d(ParamStore<T>& store, const std::string& prefix, std::size_t channels);
  BasicTensor<T> operator()(const BasicTensor<T>& x, bool training);
};

/// Bias-free convolution followed by batchnorm.
template <typename T>
struct ConvBn {
  BasicTensor<T> weight;
  BatchNorm2d<T> bn;
  Conv2dParams params;

  ConvBn() = default;
  ConvBn(ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
         std::size_t kernel, std::size_t stride, std::size_t padding, std::mt19937_64& rng);
  BasicTensor<T> operator()(const BasicTensor<T>& x, bool training);
};

}  // namespace htr
