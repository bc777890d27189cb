#include "htr/vision.hpp"

#include <algorithm>
#include <cmath>

#include "htr/errors.hpp"

namespace htr {

std::size_t ResNetConfig::scaled(std::size_t channels) const {
  return std::size_t(std::llround(double(channels) * width_scale));
}

void ResNetConfig::validate() const {
  if (!(width_scale > 0.0 && width_scale <= 1.0)) throw ContractError("width_scale must be in (0,1]");
  if (stage_channels.size() != 4 || blocks_per_stage.size() != 4) {
    throw ContractError("ResNet needs exactly four stages");
  }
  if (scaled(stem_channels) < 4) throw ContractError("scaled stem channels below 4");
  for (std::size_t s = 0; s < 4; ++s) {
    if (blocks_per_stage[s] < 1) throw ContractError("every stage needs at least one block");
    if (scaled(stage_channels[s]) < 4) throw ContractError("scaled stage channels below 4");
    if (s > 0 && stage_channels[s] <= stage_channels[s - 1]) {
      throw ContractError("stage channels must strictly increase");
    }
  }
}

template <typename T>
BasicBlock<T>::BasicBlock(ParamStore<T>& store, const std::string& prefix, std::size_t in,
                          std::size_t out, std::size_t stride, std::mt19937_64& rng)
    : conv1(store, prefix + ".conv1", in, out, 3, stride, 1, rng),
      conv2(store, prefix + ".conv2", out, out, 3, 1, 1, rng),
      has_projection(stride != 1 || in != out) {
  if (has_projection) projection = ConvBn<T>(store, prefix + ".downsample", in, out, 1, stride, 0, rng);
}

template <typename T>
BasicTensor<T> BasicBlock<T>::skip(const BasicTensor<T>& x, bool training) {
  return has_projection ? projection(x, training) : x;
}

template <typename T>
BasicTensor<T> BasicBlock<T>::forward(const BasicTensor<T>& x, bool training) {
  auto main = conv2(relu(conv1(x, training)), training);
  return relu(add(main, skip(x, training)));
}

template <typename T>
ResNet<T>::ResNet(ParamStore<T>& store, const std::string& prefix, const ResNetConfig& cfg,
                  std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  const std::size_t stem = cfg_.scaled(cfg_.stem_channels);
  stem_ = ConvBn<T>(store, prefix + ".stem", 1, stem, 7, 2, 3, rng);
  std::size_t in = stem;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t out = cfg_.scaled(cfg_.stage_channels[s]);
    std::vector<BasicBlock<T>> blocks;
    for (std::size_t b = 0; b < cfg_.blocks_per_stage[s]; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      blocks.emplace_back(store, prefix + ".layer" + std::to_string(s + 1) + "." + std::to_string(b),
                          in, out, stride, rng);
      in = out;
    }
    stages_.push_back(std::move(blocks));
  }
}

template <typename T>
BasicTensor<T> ResNet<T>::forward(const BasicTensor<T>& images, bool training) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != kEncoderInputHeight) {
    throw ContractError("encoder input must be [N,1,64,W], got " + shape_str(s));
  }
  if (s[3] % kEncoderStride != 0) {
    throw ContractError("encoder input width " + std::to_string(s[3]) + " is not a multiple of 32");
  }
  auto x = relu(stem_(images, training));
  x = maxpool2d(x, Pool2dParams{3, 2, 1});
  for (auto& stage : stages_) {
    for (auto& block : stage) x = block.forward(x, training);
  }
  return x;
}

template <typename T>
Projection<T>::Projection(ParamStore<T>& store, const std::string& prefix, std::size_t in,
                          std::size_t d_model, std::size_t depth, std::mt19937_64& rng) {
  if (depth < 1 || depth > 3) throw ContractError("projection depth must be 1, 2 or 3");
  for (std::size_t i = 0; i < depth; ++i) {
    layers.emplace_back(store, prefix + "." + std::to_string(i), i == 0 ? in : d_model, d_model, rng);
  }
}

template <typename T>
BasicTensor<T> Projection<T>::operator()(const BasicTensor<T>& x) const {
  auto y = layers[0](x);
  for (std::size_t i = 1; i < layers.size(); ++i) y = layers[i](relu(y));
  return y;
}

template <typename T>
EncoderOutput<T> features_to_sequence(const BasicTensor<T>& fmap, const Projection<T>& proj,
                                      std::span<const std::size_t> widths) {
  const auto& s = fmap.shape();
  if (s.size() != 4 || s[2] != 2) throw ContractError("feature map must be [N,C,2,T], got " + shape_str(s));
  const std::size_t n = s[0], c = s[1], t = s[3];
  if (proj.layers.empty() || proj.layers[0].in_features() != 2 * c) {
    throw ContractError("projection expects " +
                        std::to_string(proj.layers.empty() ? 0 : proj.layers[0].in_features()) +
                        " inputs but columns carry " + std::to_string(2 * c));
  }
  if (!widths.empty() && widths.size() != n) throw ContractError("one width per sample required");
  auto columns = reshape(permute(fmap, {0, 3, 2, 1}), {n * t, 2 * c});

  EncoderOutput<T> out;
  out.memory = proj(columns);
  out.batch = n;
  out.length = t;
  out.pad_mask.assign(n * t, 0);
  for (std::size_t i = 0; i < widths.size(); ++i) {
    for (std::size_t j = 0; j < t; ++j) out.pad_mask[i * t + j] = kEncoderStride * j >= widths[i];
  }
  return out;
}

#define HTR_INSTANTIATE_VISION(T)                                                                  \
  template struct BasicBlock<T>;                                                                   \
  template class ResNet<T>;                                                                        \
  template struct Projection<T>;                                                                   \
  template EncoderOutput<T> features_to_sequence(const BasicTensor<T>&, const Projection<T>&,     \
                                                 std::span<const std::size_t>);

HTR_INSTANTIATE_VISION(float)
HTR_INSTANTIATE_VISION(double)

}  // namespace htr
