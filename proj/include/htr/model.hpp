#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>

#include "htr/image.hpp"
#include "htr/transformer.hpp"
#include "htr/vision.hpp"
#include "json.hpp"

namespace htr {

struct ModelConfig {
  ResNetConfig resnet;
  TransformerConfig transformer;
  std::size_t proj_depth = 2;
  std::size_t image_height = kCanonicalHeight;
  std::size_t max_width = kMaxWidth;
  bool binarize = false;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::ordered_json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Full line recognizer: ResNet features -> column projection -> transformer
/// encoder -> character decoder. Tensor names are prefixed "encoder.",
/// "proj.", "tfenc." and "tfdec.".
template <typename T>
class Recognizer {
 public:
  Recognizer(const ModelConfig& cfg, std::size_t vocab_size, std::uint64_t init_seed);
  Recognizer(const Recognizer&) = delete;
  Recognizer& operator=(const Recognizer&) = delete;

  const ModelConfig& config() const { return cfg_; }
  std::size_t vocab_size() const { return vocab_size_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }

  /// Image memory after the projection head. `images` holds [N,1,64,W] values
  /// in [0,1]; they are standardized to (x-0.5)/0.5 here.
  EncoderOutput<T> visual(const BasicTensor<T>& images, std::span<const std::size_t> widths,
                          const ForwardMode& mode);

  /// Memory after the transformer encoder, as consumed by cross-attention.
  EncoderOutput<T> encode(const BasicTensor<T>& images, std::span<const std::size_t> widths,
                          const ForwardMode& mode);

  /// Teacher-forced logits [N*t, V] for decoder inputs `tokens` [N*t].
  BasicTensor<T> logits(const EncoderOutput<T>& memory, std::span<const TokenId> tokens, std::size_t t,
                        const ForwardMode& mode) const;

  /// Next-token log-probabilities for one sample of an encoded batch (eval mode).
  NextTokenScorer scorer(const EncoderOutput<T>& memory, std::size_t sample) const;

  /// Greedy transcription of each sample, at most max_target_len generated tokens.
  std::vector<DecodeResult> greedy(const EncoderOutput<T>& memory) const;

  /// [1,1,64,W] input for one normalized line image, right-padded with
  /// background (1.0) to a multiple of 32.
  static BasicTensor<T> line_input(const LineImage& img);

 private:
  ModelConfig cfg_;
  std::size_t vocab_size_;
  ParamStore<T> store_;
  std::unique_ptr<ResNet<T>> resnet_;
  Projection<T> proj_;
  std::unique_ptr<TransformerEncoder<T>> tfenc_;
  std::unique_ptr<TransformerDecoder<T>> tfdec_;
};

}  // namespace htr
