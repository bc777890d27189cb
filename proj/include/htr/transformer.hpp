#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "htr/nn.hpp"
#include "htr/text.hpp"

namespace htr {

struct TransformerConfig {
  std::size_t d_model = 256;
  std::size_t n_heads = 4;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t d_ff = 512;
  double dropout = 0.1;
  std::size_t max_target_len = 128;

  void validate() const;
  bool operator==(const TransformerConfig&) const = default;
};

enum class MaskKind { causal, padding, combined };

/// Query-by-key attention mask; true (nonzero) = blocked.
struct AttentionMask {
  MaskKind kind = MaskKind::padding;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> blocked;

  /// Blocks the strict upper triangle of a t-by-t matrix.
  static AttentionMask causal(std::size_t t);
  /// Blocks every key column marked in `key_pad`, for `rows` queries.
  static AttentionMask padding(std::size_t rows, std::span<const std::uint8_t> key_pad);
  /// Union of two masks of equal size.
  static AttentionMask combined(const AttentionMask& a, const AttentionMask& b);

  bool is_blocked(std::size_t r, std::size_t c) const { return blocked[r * cols + c] != 0; }
  /// Throws MaskError if some query row is fully blocked.
  void validate() const;
};

/// One mask per batch element, in the layout masked softmax consumes.
BlockMask stack_masks(const std::vector<AttentionMask>& masks);

/// Sinusoidal table [t, d_model]; d_model must be even.
template <typename T>
BasicTensor<T> positional_encoding(std::size_t t, std::size_t d_model);

template <typename T>
struct MultiHeadAttention {
  std::size_t n_heads = 1;
  Linear<T> wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& store, const std::string& prefix, std::size_t d_model,
                     std::size_t n_heads, std::mt19937_64& rng);

  /// query [batch*tq, d], key_value [batch*tk, d] -> [batch*tq, d]. `mask` has
  /// batch 1 (shared) or `batch`. When `weights_out` is given it receives the
  /// attention weights [batch*heads, tq, tk].
  BasicTensor<T> forward(const BasicTensor<T>& query, const BasicTensor<T>& key_value,
                         std::size_t batch, std::size_t tq, std::size_t tk, const BlockMask& mask,
                         BasicTensor<T>* weights_out = nullptr) const;
};

template <typename T>
struct EncoderLayer {
  MultiHeadAttention<T> self_attn;
  Linear<T> ff1, ff2;
  LayerNorm<T> norm1, norm2;
  double dropout = 0;

  EncoderLayer() = default;
  EncoderLayer(ParamStore<T>& store, const std::string& prefix, const TransformerConfig& cfg,
               std::mt19937_64& rng);
  BasicTensor<T> forward(const BasicTensor<T>& x, std::size_t batch, std::size_t t,
                         const BlockMask& mask, const ForwardMode& mode,
                         BasicTensor<T>* weights_out = nullptr) const;
};

template <typename T>
struct DecoderLayer {
  MultiHeadAttention<T> self_attn, cross_attn;
  Linear<T> ff1, ff2;
  LayerNorm<T> norm1, norm2, norm3;
  double dropout = 0;

  DecoderLayer() = default;
  DecoderLayer(ParamStore<T>& store, const std::string& prefix, const TransformerConfig& cfg,
               std::mt19937_64& rng);
  BasicTensor<T> forward(const BasicTensor<T>& x, const BasicTensor<T>& memory, std::size_t batch,
                         std::size_t t, std::size_t tk, const BlockMask& self_mask,
                         const BlockMask& cross_mask, const ForwardMode& mode) const;
};

/// Self-attention stack over image memory. Positional encoding is added once at entry.
template <typename T>
class TransformerEncoder {
 public:
  TransformerEncoder(ParamStore<T>& store, const std::string& prefix, const TransformerConfig& cfg,
                     std::mt19937_64& rng);

  /// memory [batch*t, d] with key padding flags [batch*t] -> [batch*t, d].
  BasicTensor<T> forward(const BasicTensor<T>& memory, std::size_t batch, std::size_t t,
                         std::span<const std::uint8_t> pad_mask, const ForwardMode& mode) const;
  const std::vector<EncoderLayer<T>>& layers() const { return layers_; }

 private:
  TransformerConfig cfg_;
  std::vector<EncoderLayer<T>> layers_;
};

/// Teacher-forced character decoder with cross-attention over memory.
template <typename T>
class TransformerDecoder {
 public:
  TransformerDecoder(ParamStore<T>& store, const std::string& prefix, const TransformerConfig& cfg,
                     std::size_t vocab_size, std::mt19937_64& rng);

  /// tokens [batch*t] (row-major per sample) -> logits [batch*t, vocab].
  BasicTensor<T> forward(std::span<const TokenId> tokens, std::size_t batch, std::size_t t,
                         const BasicTensor<T>& memory, std::size_t tk,
                         std::span<const std::uint8_t> memory_pad, const ForwardMode& mode) const;
  std::size_t vocab_size() const { return vocab_size_; }

 private:
  TransformerConfig cfg_;
  std::size_t vocab_size_;
  BasicTensor<T> embedding_;
  std::vector<DecoderLayer<T>> layers_;
  Linear<T> out_;
};

/// Scale applied to the output head's Xavier bound; keeps initial logits
/// near uniform so the first loss sits close to ln V.
inline constexpr double kOutputHeadGain = 0.1;

/// Log-probabilities of the next token given a sos-prefixed prefix.
using NextTokenScorer = std::function<std::vector<double>(const TokenSeq& prefix)>;

struct DecodeResult {
  TokenSeq tokens;         // sos, generated tokens, and eos unless truncated
  bool truncated = false;  // max_len reached without eos
  double score = 0;        // summed log-probability over generated tokens / their count
};

/// Repeated argmax (lowest id on ties) until eos or `max_len` generated tokens.
DecodeResult greedy_decode(const NextTokenScorer& scorer, std::size_t max_len);

/// Length-normalized beam search. Width 1 reproduces greedy_decode.
DecodeResult beam_decode(const NextTokenScorer& scorer, std::size_t width, std::size_t max_len);

/// Natural-log softmax computed in double precision.
std::vector<double> log_softmax(std::span<const float> logits);
std::vector<double> log_softmax(std::span<const double> logits);

}  // namespace htr
