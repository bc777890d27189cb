#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "htr/nn.hpp"

namespace htr {

/// Height the encoder expects and its total horizontal downsampling factor.
inline constexpr std::size_t kEncoderInputHeight = 64;
inline constexpr std::size_t kEncoderStride = 32;

struct ResNetConfig {
  std::size_t stem_channels = 64;
  std::vector<std::size_t> stage_channels{64, 128, 256, 512};
  std::vector<std::size_t> blocks_per_stage{2, 2, 2, 2};
  double width_scale = 0.25;

  /// Channel count after width scaling.
  std::size_t scaled(std::size_t channels) const;
  std::size_t output_channels() const { return scaled(stage_channels.back()); }
  void validate() const;
  bool operator==(const ResNetConfig&) const = default;
};

/// Two 3x3 conv+bn layers with an identity skip, or a strided 1x1 conv+bn skip
/// when the stride or channel count changes.
template <typename T>
struct BasicBlock {
  ConvBn<T> conv1;
  ConvBn<T> conv2;
  bool has_projection = false;
  ConvBn<T> projection;

  BasicBlock() = default;
  BasicBlock(ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
             std::size_t stride, std::mt19937_64& rng);
  BasicBlock<T>& operator=(BasicBlock<T>&&) = default;
  BasicBlock(BasicBlock<T>&&) = default;

  BasicTensor<T> skip(const BasicTensor<T>& x, bool training);
  BasicTensor<T> forward(const BasicTensor<T>& x, bool training);
};

/// ResNet-18-shaped feature extractor: [N,1,64,W] -> [N,C,2,W/32].
template <typename T>
class ResNet {
 public:
  ResNet(ParamStore<T>& store, const std::string& prefix, const ResNetConfig& cfg, std::mt19937_64& rng);

  BasicTensor<T> forward(const BasicTensor<T>& images, bool training);
  const ResNetConfig& config() const { return cfg_; }
  std::vector<std::vector<BasicBlock<T>>>& stages() { return stages_; }

 private:
  ResNetConfig cfg_;
  ConvBn<T> stem_;
  std::vector<std::vector<BasicBlock<T>>> stages_;
};

/// Per-column affine head 2C -> d_model (-> d_model ...) with relu between layers.
template <typename T>
struct Projection {
  std::vector<Linear<T>> layers;

  Projection() = default;
  Projection(ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t d_model,
             std::size_t depth, std::mt19937_64& rng);
  BasicTensor<T> operator()(const BasicTensor<T>& x) const;
};

/// Image-derived memory for a batch, flattened to [batch*length, d_model].
/// Row n*length + t is column t of sample n, left to right in pixel space.
template <typename T>
struct EncoderOutput {
  BasicTensor<T> memory;
  std::size_t batch = 1;
  std::size_t length = 0;
  std::vector<std::uint8_t> pad_mask;  // batch*length, nonzero = derived from padding

  bool padded(std::size_t n, std::size_t t) const { return pad_mask[n * length + t] != 0; }
};

/// Concatenates the two feature rows of each column into a 2C vector and
/// projects it. `widths` holds each sample's unpadded pixel width; a column t
/// is padding when 32*t >= width. An empty span marks nothing as padding.
template <typename T>
EncoderOutput<T> features_to_sequence(const BasicTensor<T>& fmap, const Projection<T>& proj,
                                      std::span<const std::size_t> widths = {});

}  // namespace htr
