#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "doctest.h"
#include "htr/errors.hpp"
#include "htr/transformer.hpp"
#include "test_util.hpp"

using namespace htr;
using htr::testing::random_tensor;

namespace {

TransformerConfig micro(std::size_t layers = 1) {
  TransformerConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.enc_layers = layers;
  cfg.dec_layers = layers;
  cfg.d_ff = 32;
  cfg.dropout = 0.0;
  cfg.max_target_len = 20;
  return cfg;
}

void set_identity(Linear<float>& l) {
  auto w = l.weight.mutable_data();
  const std::size_t n = l.in_features();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) w[i * n + j] = i == j ? 1.f : 0.f;
  std::fill(l.bias.mutable_data().begin(), l.bias.mutable_data().end(), 0.f);
}

BlockMask open_mask(std::size_t tq, std::size_t tk) {
  return BlockMask{1, tq, tk, std::vector<std::uint8_t>(tq * tk, 0)};
}

/// Row-major [n,d] -> reference projection x W + b computed directly.
std::vector<double> affine(std::span<const float> x, std::size_t n, const Linear<float>& l) {
  const std::size_t in = l.in_features(), out = l.out_features();
  std::vector<double> y(n * out);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < out; ++j) {
      double s = l.bias.data()[j];
      for (std::size_t k = 0; k < in; ++k) s += double(x[r * in + k]) * l.weight.data()[k * out + j];
      y[r * out + j] = s;
    }
  return y;
}

/// Deterministic pseudo-random log-probabilities keyed by prefix.
NextTokenScorer table_scorer(std::size_t vocab, std::uint64_t seed) {
  auto cache = std::make_shared<std::map<TokenSeq, std::vector<double>>>();
  return [=](const TokenSeq& prefix) {
    auto it = cache->find(prefix);
    if (it != cache->end()) return it->second;
    std::uint64_t h = seed;
    for (TokenId t : prefix) h = h * 1000003u + std::uint64_t(t) + 7;
    std::mt19937_64 rng(h);
    std::normal_distribution<double> n(0, 2);
    std::vector<float> logits(vocab);
    for (auto& l : logits) l = float(n(rng));
    auto lp = log_softmax(std::span<const float>(logits));
    (*cache)[prefix] = lp;
    return lp;
  };
}

}  // namespace

TEST_CASE("positional encoding examples") {
  const auto pe = positional_encoding<double>(50, 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(pe.data()[i] == (i % 2 == 0 ? 0.0 : 1.0));
  for (std::size_t t = 0; t < 50; ++t) CHECK(pe.data()[t * 8] == doctest::Approx(std::sin(double(t))));
  for (double v : pe.data()) REQUIRE((v >= -1.0 && v <= 1.0));
  // Dimension pair i uses frequency 10000^(-2i/d).
  CHECK(pe.data()[3 * 8 + 4] == doctest::Approx(std::sin(3.0 / std::pow(10000.0, 4.0 / 8.0))));
  CHECK_THROWS_AS(positional_encoding<float>(4, 7), ContractError);
}

TEST_CASE("attention masks") {
  const auto c = AttentionMask::causal(4);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t k = 0; k < 4; ++k) CHECK(c.is_blocked(r, k) == (k > r));
  const std::uint8_t pad[] = {0, 0, 1, 1};
  const auto p = AttentionMask::padding(4, pad);
  const auto both = AttentionMask::combined(c, p);
  CHECK(both.kind == MaskKind::combined);
  CHECK(both.is_blocked(3, 2));
  CHECK(!both.is_blocked(3, 1));
  const std::uint8_t all[] = {1, 1};
  CHECK_THROWS_AS(AttentionMask::padding(2, all).validate(), MaskError);
  CHECK_THROWS_AS(stack_masks({AttentionMask::padding(2, all)}), MaskError);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("attention with a single key returns the projected value row") {
  ParamStore<float> store;
  std::mt19937_64 rng(71);
  MultiHeadAttention<float> mha(store, "a", 8, 2, rng);
  const auto q = random_tensor<float>({3, 8}, rng);
  const auto kv = random_tensor<float>({1, 8}, rng);
  const auto out = mha.forward(q, kv, 1, 3, 1, open_mask(3, 1));
  const auto v = affine(kv.data(), 1, mha.wv);
  std::vector<float> vf(v.begin(), v.end());
  const auto expect = affine(vf, 1, mha.wo);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 8; ++j) CHECK(out.data()[r * 8 + j] == doctest::Approx(expect[j]).epsilon(1e-5));
}

TEST_CASE("attention masked down to one key returns that value row") {
  ParamStore<float> store;
  std::mt19937_64 rng(72);
  MultiHeadAttention<float> mha(store, "a", 8, 2, rng);
  const auto q = random_tensor<float>({2, 8}, rng);
  const auto kv = random_tensor<float>({5, 8}, rng);
  const std::size_t j = 3;
  BlockMask mask{1, 2, 5, std::vector<std::uint8_t>(10, 1)};
  mask.blocked[0 * 5 + j] = mask.blocked[1 * 5 + j] = 0;
  const auto out = mha.forward(q, kv, 1, 2, 5, mask);
  const auto v = affine(kv.data(), 5, mha.wv);
  std::vector<float> row(v.begin() + 8 * j, v.begin() + 8 * (j + 1));
  const auto expect = affine(row, 1, mha.wo);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 8; ++c) CHECK(out.data()[r * 8 + c] == doctest::Approx(expect[c]).epsilon(1e-5));
}

TEST_CASE("uniform scores average the value rows") {
  ParamStore<float> store;
  std::mt19937_64 rng(73);
  MultiHeadAttention<float> mha(store, "a", 4, 2, rng);
  std::fill(mha.wq.weight.mutable_data().begin(), mha.wq.weight.mutable_data().end(), 0.f);
  std::fill(mha.wq.bias.mutable_data().begin(), mha.wq.bias.mutable_data().end(), 0.f);
  set_identity(mha.wv);
  set_identity(mha.wo);
  const auto q = random_tensor<float>({2, 4}, rng);
  const auto kv = random_tensor<float>({6, 4}, rng);
  const auto out = mha.forward(q, kv, 1, 2, 6, open_mask(2, 6));
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0;
    for (std::size_t r = 0; r < 6; ++r) mean += kv.data()[r * 4 + c] / 6.0;
    CHECK(out.data()[c] == doctest::Approx(mean).epsilon(1e-6));
    CHECK(out.data()[4 + c] == doctest::Approx(mean).epsilon(1e-6));
  }
}

TEST_CASE("attention weights form a simplex and respect masks exactly") {
  ParamStore<float> store;
  std::mt19937_64 rng(74);
  const auto cfg = micro();
  EncoderLayer<float> layer(store, "l", cfg, rng);
  const std::size_t b = 3, t = 6;
  std::vector<AttentionMask> masks;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<std::uint8_t> pad(t, 0);
    for (std::size_t k = t - i; k < t; ++k) pad[k] = 1;
    masks.push_back(AttentionMask::combined(AttentionMask::causal(t), AttentionMask::padding(t, pad)));
    // Keep every row open: pad only keys no query is forced onto alone.
    masks.back().blocked[0] = 0;
  }
  const auto mask = stack_masks(masks);
  Tensor weights;
  layer.forward(random_tensor<float>({b * t, cfg.d_model}, rng, -3, 3), b, t, mask, ForwardMode{}, &weights);
  REQUIRE(weights.shape() == Shape{b * cfg.n_heads, t, t});
  for (std::size_t g = 0; g < b * cfg.n_heads; ++g)
    for (std::size_t r = 0; r < t; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < t; ++c) {
        const float w = weights.data()[(g * t + r) * t + c];
        if (masks[g / cfg.n_heads].is_blocked(r, c)) REQUIRE(w == 0.f);
        s += w;
      }
      REQUIRE(std::abs(s - 1.0) < 1e-5);
    }
}

TEST_CASE("encoder with zero layers adds positional encoding only") {
  auto cfg = micro(0);
  ParamStore<float> store;
  std::mt19937_64 rng(75);
  TransformerEncoder<float> enc(store, "tfenc", cfg, rng);
  const auto x = random_tensor<float>({5, 16}, rng);
  const auto y = enc.forward(x, 1, 5, {}, ForwardMode{});
  const auto pe = positional_encoding<float>(5, 16);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i] + pe.data()[i]);
}

TEST_CASE("appending masked memory positions leaves unmasked outputs unchanged") {
  auto cfg = micro(2);
  ParamStore<float> store;
  std::mt19937_64 rng(76);
  TransformerEncoder<float> enc(store, "tfenc", cfg, rng);
  const auto base = random_tensor<float>({5, 16}, rng);
  const auto tail = random_tensor<float>({3, 16}, rng, -5, 5);
  const auto longer = concat<float>({base, tail}, 0);
  const std::vector<std::uint8_t> pad{0, 0, 0, 0, 0, 1, 1, 1};
  const auto a = enc.forward(base, 1, 5, {}, ForwardMode{});
  const auto b = enc.forward(longer, 1, 8, pad, ForwardMode{});
  for (std::size_t i = 0; i < 5 * 16; ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-5);
}

TEST_CASE("without positional encoding an encoder layer is permutation equivariant") {
  const auto cfg = micro();
  ParamStore<float> store;
  std::mt19937_64 rng(77);
  EncoderLayer<float> layer(store, "l", cfg, rng);
  const std::size_t t = 7, d = cfg.d_model;
  const auto x = random_tensor<float>({t, d}, rng);
  std::vector<std::size_t> perm(t);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<float> px(t * d);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t k = 0; k < d; ++k) px[i * d + k] = x.data()[perm[i] * d + k];
  const auto y = layer.forward(x, 1, t, open_mask(t, t), ForwardMode{});
  const auto py = layer.forward(Tensor({t, d}, px), 1, t, open_mask(t, t), ForwardMode{});
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t k = 0; k < d; ++k) CHECK(std::abs(py.data()[i * d + k] - y.data()[perm[i] * d + k]) < 1e-5);
}

TEST_CASE("decoder logits are causal bitwise") {
  const auto cfg = micro(2);
  ParamStore<float> store;
  std::mt19937_64 rng(78);
  TransformerDecoder<float> dec(store, "tfdec", cfg, 12, rng);
  std::uniform_int_distribution<int> tok(4, 11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t t = 8, tk = 5;
    const auto memory = random_tensor<float>({tk, 16}, rng);
    TokenSeq tokens{kSosId};
    while (tokens.size() < t) tokens.push_back(tok(rng));
    const std::size_t j = 1 + std::size_t(trial) % (t - 1);
    const auto before = dec.forward(tokens, 1, t, memory, tk, {}, ForwardMode{});
    tokens[j] = tokens[j] == 4 ? 5 : 4;
    const auto after = dec.forward(tokens, 1, t, memory, tk, {}, ForwardMode{});
    const std::size_t v = 12;
    CHECK(std::equal(before.data().begin(), before.data().begin() + std::ptrdiff_t(j * v), after.data().begin()));
    CHECK(!std::equal(before.data().begin() + std::ptrdiff_t(j * v), before.data().end(), after.data().begin() + std::ptrdiff_t(j * v)));
  }
}

TEST_CASE("decoder output shape, determinism and token range") {
  const auto cfg = micro();
  ParamStore<float> store;
  std::mt19937_64 rng(79);
  TransformerDecoder<float> dec(store, "tfdec", cfg, 9, rng);
  const auto memory = random_tensor<float>({2 * 4, 16}, rng);
  const TokenSeq tokens{1, 4, 5, 1, 6, 7};
  const auto a = dec.forward(tokens, 2, 3, memory, 4, {}, ForwardMode{});
  const auto b = dec.forward(tokens, 2, 3, memory, 4, {}, ForwardMode{});
  CHECK(a.shape() == Shape{6, 9});
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  for (std::size_t r = 0; r < 6; ++r) {
    const auto lp = log_softmax(a.data().subspan(r * 9, 9));
    double s = 0;
    for (double x : lp) s += std::exp(x);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  const TokenSeq bad{1, 9, 4};
  CHECK_THROWS_AS(dec.forward(bad, 1, 3, memory, 8, {}, ForwardMode{}), ContractError);
}

TEST_CASE("padded memory positions receive no gradient") {
  const auto cfg = micro();
  ParamStore<float> store;
  std::mt19937_64 rng(80);
  TransformerEncoder<float> enc(store, "tfenc", cfg, rng);
  TransformerDecoder<float> dec(store, "tfdec", cfg, 9, rng);
  auto memory = random_tensor<float>({2 * 5, 16}, rng, -1, 1, true);
  const std::vector<std::uint8_t> pad{0, 0, 0, 1, 1, 0, 0, 0, 0, 1};
  Tape tape;
  {
    TapeScope<float> scope(tape);
    const auto m = enc.forward(memory, 2, 5, pad, ForwardMode{});
    const TokenSeq in{1, 4, 5, 1, 6, 7};
    const TokenSeq target{4, 5, 2, 6, 7, 2};
    backward(tape, cross_entropy_masked(dec.forward(in, 2, 3, m, 5, pad, ForwardMode{}), target, kPadId));
  }
  const auto g = memory.grad();
  for (std::size_t r = 0; r < 10; ++r) {
    double norm = 0;
    for (std::size_t k = 0; k < 16; ++k) norm += std::abs(g[r * 16 + k]);
    if (pad[r]) {
      CHECK(norm == 0.0);
    } else {
      CHECK(norm > 0.0);
    }
  }
}

TEST_CASE("greedy decode examples") {
  const NextTokenScorer eos_first = [](const TokenSeq&) {
    std::vector<float> logits(6, 0.f);
    logits[kEosId] = 5.f;
    return log_softmax(std::span<const float>(logits));
  };
  const auto r = greedy_decode(eos_first, 10);
  CHECK(r.tokens == TokenSeq{kSosId, kEosId});
  CHECK(!r.truncated);
  CHECK(decode(Vocab::from_chars({U'a', U'b'}), r.tokens).empty());

  const NextTokenScorer never_eos = [](const TokenSeq&) {
    std::vector<float> logits(6, 0.f);
    logits[4] = 3.f;
    return log_softmax(std::span<const float>(logits));
  };
  const auto t = greedy_decode(never_eos, 3);
  CHECK(t.tokens == TokenSeq{1, 4, 4, 4});
  CHECK(t.truncated);

  const auto scorer = table_scorer(7, 5);
  const auto once = greedy_decode(scorer, 12);
  const auto twice = greedy_decode(scorer, 12);
  CHECK(once.tokens == twice.tokens);
}

TEST_CASE("beam width 1 reproduces greedy exactly") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto scorer = table_scorer(6, seed);
    const auto g = greedy_decode(scorer, 10);
    const auto b = beam_decode(scorer, 1, 10);
    CHECK(g.tokens == b.tokens);
    CHECK(g.truncated == b.truncated);
    CHECK(g.score == b.score);
  }
}

TEST_CASE("wide beam finds the exhaustive optimum on two-step problems") {
  const std::size_t vocab = 5, max_len = 2;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto scorer = table_scorer(vocab, 100 + seed);
    // Enumerate every complete or length-capped continuation.
    double best = -1e300;
    TokenSeq best_seq;
    const auto first = scorer({kSosId});
    for (std::size_t a = 0; a < vocab; ++a) {
      if (TokenId(a) == kEosId) {
        if (first[a] > best) best = first[a], best_seq = {kSosId, kEosId};
        continue;
      }
      const auto second = scorer({kSosId, TokenId(a)});
      for (std::size_t b = 0; b < vocab; ++b) {
        const double s = (first[a] + second[b]) / 2.0;
        if (s > best) best = s, best_seq = {kSosId, TokenId(a), TokenId(b)};
      }
    }
    const auto r = beam_decode(scorer, vocab, max_len);
    CHECK(r.tokens == best_seq);
    CHECK(r.score == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("beam width 4 scores at least as well as width 1 on sampled problems") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto scorer = table_scorer(6, 500 + seed);
    CHECK(beam_decode(scorer, 4, 8).score >= beam_decode(scorer, 1, 8).score);
  }
}
