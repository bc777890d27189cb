#include "htr/nn.hpp"

#include <algorithm>
#include <cmath>

#include "htr/errors.hpp"

namespace htr {

template <typename T>
BasicTensor<T> ParamStore<T>::add(const std::string& name, Shape shape, std::vector<T> init,
                                  bool trainable) {
  if (contains(name)) throw ContractError("duplicate tensor name " + name);
  BasicTensor<T> t(std::move(shape), std::move(init), trainable);
  entries_.push_back({name, t, trainable});
  return t;
}

template <typename T>
BasicTensor<T> ParamStore<T>::parameter(const std::string& name, Shape shape, std::vector<T> init) {
  return add(name, std::move(shape), std::move(init), true);
}

template <typename T>
BasicTensor<T> ParamStore<T>::buffer(const std::string& name, Shape shape, std::vector<T> init) {
  return add(name, std::move(shape), std::move(init), false);
}

template <typename T>
const typename ParamStore<T>::Entry& ParamStore<T>::at(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw ContractError("unknown tensor " + name);
}

template <typename T>
bool ParamStore<T>::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == name; });
}

template <typename T>
std::vector<BasicTensor<T>> ParamStore<T>::parameters() const {
  std::vector<BasicTensor<T>> out;
  for (const auto& e : entries_) {
    if (e.trainable) out.push_back(e.tensor);
  }
  return out;
}

template <typename T>
std::size_t ParamStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.trainable) n += e.tensor.numel();
  }
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

namespace init {

template <typename T>
std::vector<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::size_t count,
                              std::mt19937_64& rng, double gain) {
  const double bound = gain * std::sqrt(6.0 / double(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(count);
  for (auto& x : v) x = T(dist(rng));
  return v;
}

template <typename T>
std::vector<T> kaiming_uniform(std::size_t fan_in, std::size_t count, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / double(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(count);
  for (auto& x : v) x = T(dist(rng));
  return v;
}

template <typename T>
std::vector<T> normal(double stddev, std::size_t count, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(count);
  for (auto& x : v) x = T(dist(rng));
  return v;
}

}  // namespace init

template <typename T>
Linear<T>::Linear(ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
                  std::mt19937_64& rng, double gain) {
  weight = store.parameter(prefix + ".weight", {in, out},
                           init::xavier_uniform<T>(in, out, in * out, rng, gain));
  bias = store.parameter(prefix + ".bias", {out}, std::vector<T>(out, T(0)));
}

template <typename T>
BasicTensor<T> Linear<T>::operator()(const BasicTensor<T>& x) const {
  return add_bias(matmul(x, weight), bias);
}

template <typename T>
LayerNorm<T>::LayerNorm(ParamStore<T>& store, const std::string& prefix, std::size_t dim) {
  gamma = store.parameter(prefix + ".gamma", {dim}, std::vector<T>(dim, T(1)));
  beta = store.parameter(prefix + ".beta", {dim}, std::vector<T>(dim, T(0)));
}

template <typename T>
BasicTensor<T> LayerNorm<T>::operator()(const BasicTensor<T>& x) const {
  return layer_norm(x, gamma, beta, 1e-5);
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(ParamStore<T>& store, const std::string& prefix, std::size_t channels) {
  gamma = store.parameter(prefix + ".gamma", {channels}, std::vector<T>(channels, T(1)));
  beta = store.parameter(prefix + ".beta", {channels}, std::vector<T>(channels, T(0)));
  state.running_mean = store.buffer(prefix + ".running_mean", {channels}, std::vector<T>(channels, T(0)));
  state.running_var = store.buffer(prefix + ".running_var", {channels}, std::vector<T>(channels, T(1)));
}

template <typename T>
BasicTensor<T> BatchNorm2d<T>::operator()(const BasicTensor<T>& x, bool training) {
  return batchnorm2d(x, gamma, beta, state, training, kMomentum, kEps);
}

template <typename T>
ConvBn<T>::ConvBn(ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
                  std::size_t kernel, std::size_t stride, std::size_t padding, std::mt19937_64& rng)
    : params{stride, padding} {
  const std::size_t fan_in = in * kernel * kernel;
  weight = store.parameter(prefix + ".conv.weight", {out, in, kernel, kernel},
                           init::kaiming_uniform<T>(fan_in, out * fan_in, rng));
  bn = BatchNorm2d<T>(store, prefix + ".bn", out);
}

template <typename T>
BasicTensor<T> ConvBn<T>::operator()(const BasicTensor<T>& x, bool training) {
  return bn(conv2d(x, weight, BasicTensor<T>(), params), training);
}

#define HTR_INSTANTIATE_NN(T)                                                                      \
  template class ParamStore<T>;                                                                    \
  template struct Linear<T>;                                                                       \
  template struct LayerNorm<T>;                                                                    \
  template struct BatchNorm2d<T>;                                                                  \
  template struct ConvBn<T>;                                                                       \
  template std::vector<T> init::xavier_uniform<T>(std::size_t, std::size_t, std::size_t,          \
                                                  std::mt19937_64&, double);                       \
  template std::vector<T> init::kaiming_uniform<T>(std::size_t, std::size_t, std::mt19937_64&);   \
  template std::vector<T> init::normal<T>(double, std::size_t, std::mt19937_64&);

HTR_INSTANTIATE_NN(float)
HTR_INSTANTIATE_NN(double)

}  // namespace htr
