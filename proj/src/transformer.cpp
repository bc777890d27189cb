#include "htr/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "htr/errors.hpp"

namespace htr {

void TransformerConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ContractError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                        std::to_string(n_heads));
  }
  if (d_model % 2 != 0) throw ContractError("d_model must be even for positional encoding");
  if (d_ff == 0) throw ContractError("d_ff must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("dropout must be in [0,1)");
  if (max_target_len < 2) throw ContractError("max_target_len must be at least 2");
}

AttentionMask AttentionMask::causal(std::size_t t) {
  AttentionMask m{MaskKind::causal, t, t, std::vector<std::uint8_t>(t * t, 0)};
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t c = r + 1; c < t; ++c) m.blocked[r * t + c] = 1;
  }
  return m;
}

AttentionMask AttentionMask::padding(std::size_t rows, std::span<const std::uint8_t> key_pad) {
  AttentionMask m{MaskKind::padding, rows, key_pad.size(), {}};
  m.blocked.reserve(rows * key_pad.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (auto p : key_pad) m.blocked.push_back(p ? 1 : 0);
  }
  return m;
}

AttentionMask AttentionMask::combined(const AttentionMask& a, const AttentionMask& b) {
  if (a.rows != b.rows || a.cols != b.cols) throw DimensionError("cannot combine masks of different size");
  AttentionMask m{MaskKind::combined, a.rows, a.cols, a.blocked};
  for (std::size_t i = 0; i < m.blocked.size(); ++i) m.blocked[i] = (a.blocked[i] || b.blocked[i]) ? 1 : 0;
  return m;
}

void AttentionMask::validate() const {
  for (std::size_t r = 0; r < rows; ++r) {
    bool open = false;
    for (std::size_t c = 0; c < cols && !open; ++c) open = !is_blocked(r, c);
    if (!open) throw MaskError("attention mask blocks every key for query " + std::to_string(r));
  }
}

BlockMask stack_masks(const std::vector<AttentionMask>& masks) {
  if (masks.empty()) throw ContractError("no masks to stack");
  BlockMask out{masks.size(), masks[0].rows, masks[0].cols, {}};
  out.blocked.reserve(masks.size() * out.rows * out.cols);
  for (const auto& m : masks) {
    if (m.rows != out.rows || m.cols != out.cols) throw DimensionError("stacked masks differ in size");
    m.validate();
    out.blocked.insert(out.blocked.end(), m.blocked.begin(), m.blocked.end());
  }
  return out;
}

template <typename T>
BasicTensor<T> positional_encoding(std::size_t t, std::size_t d_model) {
  if (d_model == 0 || d_model % 2 != 0) throw ContractError("positional encoding needs an even d_model");
  std::vector<T> pe(t * d_model);
  for (std::size_t pos = 0; pos < t; ++pos) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double angle = double(pos) / std::pow(10000.0, double(2 * i) / double(d_model));
      pe[pos * d_model + 2 * i] = T(std::sin(angle));
      pe[pos * d_model + 2 * i + 1] = T(std::cos(angle));
    }
  }
  return BasicTensor<T>({t, d_model}, std::move(pe));
}

namespace {

/// The table repeated for every batch element: [batch*t, d].
template <typename T>
BasicTensor<T> tiled_positions(std::size_t batch, std::size_t t, std::size_t d) {
  const auto pe = positional_encoding<T>(t, d);
  std::vector<T> v;
  v.reserve(batch * t * d);
  for (std::size_t b = 0; b < batch; ++b) v.insert(v.end(), pe.data().begin(), pe.data().end());
  return BasicTensor<T>({batch * t, d}, std::move(v));
}

template <typename T>
BasicTensor<T> maybe_dropout(const BasicTensor<T>& x, double p, const ForwardMode& mode) {
  if (!mode.training || p == 0.0) return x;
  if (mode.rng == nullptr) throw ContractError("training mode needs a dropout RNG");
  return dropout(x, p, *mode.rng);
}

BlockMask key_padding(std::size_t batch, std::size_t tq, std::size_t tk,
                      std::span<const std::uint8_t> pad) {
  if (pad.empty()) return BlockMask{1, tq, tk, std::vector<std::uint8_t>(tq * tk, 0)};
  if (pad.size() != batch * tk) throw ContractError("pad mask length does not match memory");
  std::vector<AttentionMask> masks;
  for (std::size_t b = 0; b < batch; ++b) masks.push_back(AttentionMask::padding(tq, pad.subspan(b * tk, tk)));
  return stack_masks(masks);
}

}  // namespace

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(ParamStore<T>& store, const std::string& prefix,
                                          std::size_t d_model, std::size_t heads, std::mt19937_64& rng)
    : n_heads(heads),
      wq(store, prefix + ".q", d_model, d_model, rng),
      wk(store, prefix + ".k", d_model, d_model, rng),
      wv(store, prefix + ".v", d_model, d_model, rng),
      wo(store, prefix + ".out", d_model, d_model, rng) {}

template <typename T>
BasicTensor<T> MultiHeadAttention<T>::forward(const BasicTensor<T>& query, const BasicTensor<T>& key_value,
                                              std::size_t batch, std::size_t tq, std::size_t tk,
                                              const BlockMask& mask, BasicTensor<T>* weights_out) const {
  const std::size_t d = wq.in_features(), h = n_heads, dh = d / h;
  if (query.shape() != Shape{batch * tq, d} || key_value.shape() != Shape{batch * tk, d}) {
    throw DimensionError("attention inputs " + shape_str(query.shape()) + " and " +
                         shape_str(key_value.shape()) + " do not match batch/length/d_model");
  }
  if (mask.rows != tq || mask.cols != tk || (mask.batch != 1 && mask.batch != batch)) {
    throw DimensionError("attention mask does not match [batch, tq, tk]");
  }
  // [batch*len, d] -> [batch*heads, len, dh]
  auto split = [&](const BasicTensor<T>& x, std::size_t len) {
    return reshape(permute(reshape(x, {batch, len, h, dh}), {0, 2, 1, 3}), {batch * h, len, dh});
  };
  const auto q = split(wq(query), tq);
  const auto k = split(wk(key_value), tk);
  const auto v = split(wv(key_value), tk);
  const auto scores = scale(matmul(q, transpose(k, 1, 2)), 1.0 / std::sqrt(double(dh)));
  const auto weights = softmax(scores, mask);
  if (weights_out != nullptr) *weights_out = weights;
  const auto context = matmul(weights, v);
  const auto merged = reshape(permute(reshape(context, {batch, h, tq, dh}), {0, 2, 1, 3}), {batch * tq, d});
  return wo(merged);
}

template <typename T>
EncoderLayer<T>::EncoderLayer(ParamStore<T>& store, const std::string& prefix,
                              const TransformerConfig& cfg, std::mt19937_64& rng)
    : self_attn(store, prefix + ".self_attn", cfg.d_model, cfg.n_heads, rng),
      ff1(store, prefix + ".ff1", cfg.d_model, cfg.d_ff, rng),
      ff2(store, prefix + ".ff2", cfg.d_ff, cfg.d_model, rng),
      norm1(store, prefix + ".norm1", cfg.d_model),
      norm2(store, prefix + ".norm2", cfg.d_model),
      dropout(cfg.dropout) {}

template <typename T>
BasicTensor<T> EncoderLayer<T>::forward(const BasicTensor<T>& x, std::size_t batch, std::size_t t,
                                        const BlockMask& mask, const ForwardMode& mode,
                                        BasicTensor<T>* weights_out) const {
  const auto attended = self_attn.forward(x, x, batch, t, t, mask, weights_out);
  const auto y = norm1(add(x, maybe_dropout(attended, dropout, mode)));
  const auto ff = ff2(relu(ff1(y)));
  return norm2(add(y, maybe_dropout(ff, dropout, mode)));
}

template <typename T>
DecoderLayer<T>::DecoderLayer(ParamStore<T>& store, const std::string& prefix,
                              const TransformerConfig& cfg, std::mt19937_64& rng)
    : self_attn(store, prefix + ".self_attn", cfg.d_model, cfg.n_heads, rng),
      cross_attn(store, prefix + ".cross_attn", cfg.d_model, cfg.n_heads, rng),
      ff1(store, prefix + ".ff1", cfg.d_model, cfg.d_ff, rng),
      ff2(store, prefix + ".ff2", cfg.d_ff, cfg.d_model, rng),
      norm1(store, prefix + ".norm1", cfg.d_model),
      norm2(store, prefix + ".norm2", cfg.d_model),
      norm3(store, prefix + ".norm3", cfg.d_model),
      dropout(cfg.dropout) {}

template <typename T>
BasicTensor<T> DecoderLayer<T>::forward(const BasicTensor<T>& x, const BasicTensor<T>& memory,
                                        std::size_t batch, std::size_t t, std::size_t tk,
                                        const BlockMask& self_mask, const BlockMask& cross_mask,
                                        const ForwardMode& mode) const {
  const auto s = self_attn.forward(x, x, batch, t, t, self_mask);
  const auto y1 = norm1(add(x, maybe_dropout(s, dropout, mode)));
  const auto c = cross_attn.forward(y1, memory, batch, t, tk, cross_mask);
  const auto y2 = norm2(add(y1, maybe_dropout(c, dropout, mode)));
  const auto ff = ff2(relu(ff1(y2)));
  return norm3(add(y2, maybe_dropout(ff, dropout, mode)));
}

template <typename T>
TransformerEncoder<T>::TransformerEncoder(ParamStore<T>& store, const std::string& prefix,
                                          const TransformerConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  for (std::size_t i = 0; i < cfg_.enc_layers; ++i) {
    layers_.emplace_back(store, prefix + ".layers." + std::to_string(i), cfg_, rng);
  }
}

template <typename T>
BasicTensor<T> TransformerEncoder<T>::forward(const BasicTensor<T>& memory, std::size_t batch,
                                              std::size_t t, std::span<const std::uint8_t> pad_mask,
                                              const ForwardMode& mode) const {
  if (memory.shape() != Shape{batch * t, cfg_.d_model}) {
    throw DimensionError("encoder memory " + shape_str(memory.shape()) + " does not match [" +
                         std::to_string(batch * t) + "," + std::to_string(cfg_.d_model) + "]");
  }
  const BlockMask mask = key_padding(batch, t, t, pad_mask);
  auto x = add(memory, tiled_positions<T>(batch, t, cfg_.d_model));
  for (const auto& layer : layers_) x = layer.forward(x, batch, t, mask, mode);
  return x;
}

template <typename T>
TransformerDecoder<T>::TransformerDecoder(ParamStore<T>& store, const std::string& prefix,
                                          const TransformerConfig& cfg, std::size_t vocab_size,
                                          std::mt19937_64& rng)
    : cfg_(cfg), vocab_size_(vocab_size) {
  cfg_.validate();
  if (vocab_size <= std::size_t(kNumSpecials)) throw ContractError("vocabulary has no characters");
  embedding_ = store.parameter(prefix + ".embedding", {vocab_size, cfg_.d_model},
                               init::normal<T>(1.0 / std::sqrt(double(cfg_.d_model)),
                                               vocab_size * cfg_.d_model, rng));
  for (std::size_t i = 0; i < cfg_.dec_layers; ++i) {
    layers_.emplace_back(store, prefix + ".layers." + std::to_string(i), cfg_, rng);
  }
  out_ = Linear<T>(store, prefix + ".out", cfg_.d_model, vocab_size, rng, kOutputHeadGain);
}

template <typename T>
BasicTensor<T> TransformerDecoder<T>::forward(std::span<const TokenId> tokens, std::size_t batch,
                                              std::size_t t, const BasicTensor<T>& memory,
                                              std::size_t tk, std::span<const std::uint8_t> memory_pad,
                                              const ForwardMode& mode) const {
  if (tokens.size() != batch * t || t == 0) throw DimensionError("token matrix does not match [batch, t]");
  if (t > cfg_.max_target_len) {
    throw ContractError("decoder input of length " + std::to_string(t) + " exceeds max_target_len " +
                        std::to_string(cfg_.max_target_len));
  }
  const double emb_scale = std::sqrt(double(cfg_.d_model));
  auto x = add(scale(embedding_lookup(embedding_, tokens), emb_scale), tiled_positions<T>(batch, t, cfg_.d_model));
  const auto causal = AttentionMask::causal(t);
  const BlockMask self_mask{1, t, t, causal.blocked};
  const BlockMask cross_mask = key_padding(batch, t, tk, memory_pad);
  for (const auto& layer : layers_) x = layer.forward(x, memory, batch, t, tk, self_mask, cross_mask, mode);
  return out_(x);
}

template <typename F>
std::vector<double> log_softmax_impl(std::span<const F> logits) {
  double m = -std::numeric_limits<double>::infinity();
  for (F v : logits) m = std::max(m, double(v));
  double s = 0;
  for (F v : logits) s += std::exp(double(v) - m);
  const double lse = m + std::log(s);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = double(logits[i]) - lse;
  return out;
}

std::vector<double> log_softmax(std::span<const float> logits) { return log_softmax_impl(logits); }
std::vector<double> log_softmax(std::span<const double> logits) { return log_softmax_impl(logits); }

DecodeResult greedy_decode(const NextTokenScorer& scorer, std::size_t max_len) {
  DecodeResult r;
  r.tokens = {kSosId};
  double total = 0;
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto lp = scorer(r.tokens);
    const auto best = std::size_t(std::max_element(lp.begin(), lp.end()) - lp.begin());
    total += lp[best];
    r.tokens.push_back(TokenId(best));
    if (TokenId(best) == kEosId) {
      r.score = total / double(step + 1);
      return r;
    }
  }
  r.truncated = true;
  r.score = max_len == 0 ? 0.0 : total / double(max_len);
  return r;
}

DecodeResult beam_decode(const NextTokenScorer& scorer, std::size_t width, std::size_t max_len) {
  if (width < 1) throw ContractError("beam width must be at least 1");
  struct Hyp {
    TokenSeq tokens;
    double logp = 0;
  };
  std::vector<Hyp> alive{{{kSosId}, 0.0}};
  std::vector<DecodeResult> done;
  for (std::size_t step = 1; step <= max_len && !alive.empty(); ++step) {
    std::vector<Hyp> expansions;
    for (const auto& h : alive) {
      const auto lp = scorer(h.tokens);
      for (std::size_t id = 0; id < lp.size(); ++id) {
        Hyp next{h.tokens, h.logp + lp[id]};
        next.tokens.push_back(TokenId(id));
        expansions.push_back(std::move(next));
      }
    }
    // All expansions share a length, so raw log-probability orders them; stable
    // sorting keeps the lowest id first on ties, matching greedy argmax.
    std::stable_sort(expansions.begin(), expansions.end(),
                     [](const Hyp& a, const Hyp& b) { return a.logp > b.logp; });
    expansions.resize(std::min(width, expansions.size()));
    alive.clear();
    for (auto& h : expansions) {
      if (h.tokens.back() == kEosId) {
        done.push_back({std::move(h.tokens), false, h.logp / double(step)});
      } else {
        alive.push_back(std::move(h));
      }
    }
  }
  for (auto& h : alive) {
    const double len = double(h.tokens.size() - 1);
    done.push_back({std::move(h.tokens), true, len == 0 ? 0.0 : h.logp / len});
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < done.size(); ++i) {
    if (done[i].score > done[best].score) best = i;
  }
  return done[best];
}

#define HTR_INSTANTIATE_TRANSFORMER(T)                                     \
  template BasicTensor<T> positional_encoding<T>(std::size_t, std::size_t); \
  template struct MultiHeadAttention<T>;                                   \
  template struct EncoderLayer<T>;                                         \
  template struct DecoderLayer<T>;                                         \
  template class TransformerEncoder<T>;                                    \
  template class TransformerDecoder<T>;

HTR_INSTANTIATE_TRANSFORMER(float)
HTR_INSTANTIATE_TRANSFORMER(double)

}  // namespace htr
