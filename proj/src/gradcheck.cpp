#include "htr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

#include "htr/errors.hpp"
#include "htr/ops.hpp"
#include "htr/transformer.hpp"
#include "htr/vision.hpp"

namespace htr {

double grad_check(const ScalarFn& f, const std::vector<TensorD>& inputs, double eps) {
  std::vector<TensorD> xs = inputs;
  std::vector<bool> previous(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    previous[i] = xs[i].requires_grad();
    xs[i].set_requires_grad(true);
    xs[i].zero_grad();
  }

  std::vector<std::vector<double>> analytic(xs.size());
  {
    TapeD tape;
    TapeScope<double> scope(tape);
    TensorD loss = f();
    backward(tape, loss);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (xs[i].has_grad()) {
        analytic[i].assign(xs[i].grad().begin(), xs[i].grad().end());
      } else {
        analytic[i].assign(xs[i].numel(), 0.0);
      }
    }
  }

  double worst = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    auto values = xs[i].mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double saved = values[j];
      values[j] = saved + eps;
      const double plus = f().item();
      values[j] = saved - eps;
      const double minus = f().item();
      values[j] = saved;
      const double numeric = (plus - minus) / (2 * eps);
      const double a = analytic[i][j];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
    xs[i].zero_grad();
    xs[i].set_requires_grad(previous[i]);
  }
  return worst;
}

namespace {

TensorD uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return TensorD(std::move(shape), std::move(v));
}

/// Magnitudes in [0.1, 1] with random sign, keeping relu-like kinks out of reach of eps.
TensorD off_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return TensorD(std::move(shape), std::move(v));
}

struct Case {
  std::string name;
  // Builds fresh inputs and the function under test for one random point.
  std::function<std::pair<ScalarFn, std::vector<TensorD>>(std::mt19937_64&)> make;
};

/// Binds a readout weight drawn once per point to an op applied to `inputs`.
template <typename Op>
std::pair<ScalarFn, std::vector<TensorD>> point(std::vector<TensorD> inputs, Op op, std::mt19937_64& rng) {
  const TensorD probe = op(inputs);
  const TensorD weight = uniform(probe.shape(), rng);
  ScalarFn f = [inputs, op, weight] { return sum(mul(op(inputs), weight)); };
  return {f, inputs};
}

std::vector<Case> op_cases() {
  using V = std::vector<TensorD>;
  std::vector<Case> cases;
  cases.push_back({"matmul", [](auto& rng) {
                     return point({uniform({3, 4}, rng), uniform({4, 2}, rng)},
                                  [](const V& x) { return matmul(x[0], x[1]); }, rng);
                   }});
  cases.push_back({"matmul_batched", [](auto& rng) {
                     return point({uniform({2, 3, 4}, rng), uniform({2, 4, 3}, rng)},
                                  [](const V& x) { return matmul(x[0], x[1]); }, rng);
                   }});
  cases.push_back({"conv2d", [](auto& rng) {
                     return point({uniform({2, 2, 5, 6}, rng), uniform({3, 2, 3, 3}, rng), uniform({3}, rng)},
                                  [](const V& x) { return conv2d(x[0], x[1], x[2], Conv2dParams{2, 1}); },
                                  rng);
                   }});
  cases.push_back({"maxpool2d", [](auto& rng) {
                     return point({uniform({1, 2, 5, 5}, rng)},
                                  [](const V& x) { return maxpool2d(x[0], Pool2dParams{3, 2, 1}); }, rng);
                   }});
  cases.push_back({"batchnorm2d_train", [](auto& rng) {
                     auto state = std::make_shared<BatchNormState<double>>(
                         BatchNormState<double>{TensorD::zeros({3}), TensorD::full({3}, 1.0)});
                     return point({uniform({2, 3, 2, 3}, rng), uniform({3}, rng, 0.5, 1.5), uniform({3}, rng)},
                                  [state](const V& x) {
                                    return batchnorm2d(x[0], x[1], x[2], *state, true, 0.1, 1e-5);
                                  },
                                  rng);
                   }});
  cases.push_back({"batchnorm2d_eval", [](auto& rng) {
                     auto state = std::make_shared<BatchNormState<double>>(
                         BatchNormState<double>{uniform({3}, rng), uniform({3}, rng, 0.5, 2.0)});
                     return point({uniform({2, 3, 2, 2}, rng), uniform({3}, rng), uniform({3}, rng)},
                                  [state](const V& x) {
                                    return batchnorm2d(x[0], x[1], x[2], *state, false, 0.1, 1e-5);
                                  },
                                  rng);
                   }});
  cases.push_back({"layer_norm", [](auto& rng) {
                     return point({uniform({3, 5}, rng), uniform({5}, rng), uniform({5}, rng)},
                                  [](const V& x) { return layer_norm(x[0], x[1], x[2], 1e-5); }, rng);
                   }});
  cases.push_back({"softmax", [](auto& rng) {
                     return point({uniform({3, 4}, rng, -2, 2)}, [](const V& x) { return softmax(x[0]); }, rng);
                   }});
  cases.push_back({"softmax_masked", [](auto& rng) {
                     BlockMask mask{2, 3, 3, {0, 1, 1, 0, 0, 1, 0, 0, 0, 0, 0, 1, 0, 0, 1, 1, 0, 0}};
                     return point({uniform({4, 3, 3}, rng, -2, 2)},
                                  [mask](const V& x) { return softmax(x[0], mask); }, rng);
                   }});
  cases.push_back({"cross_entropy_masked", [](auto& rng) {
                     const std::vector<TokenId> targets{2, 0, 4, 1};
                     V in{uniform({4, 5}, rng, -2, 2)};
                     ScalarFn f = [in, targets] { return cross_entropy_masked(in[0], targets, 0); };
                     return std::pair<ScalarFn, V>{f, in};
                   }});
  cases.push_back({"relu", [](auto& rng) {
                     return point({off_zero({4, 5}, rng)}, [](const V& x) { return relu(x[0]); }, rng);
                   }});
  cases.push_back({"global_avgpool", [](auto& rng) {
                     return point({uniform({2, 3, 2, 4}, rng)}, [](const V& x) { return global_avgpool(x[0]); }, rng);
                   }});
  cases.push_back({"add", [](auto& rng) {
                     return point({uniform({3, 4}, rng), uniform({3, 4}, rng)},
                                  [](const V& x) { return add(x[0], x[1]); }, rng);
                   }});
  cases.push_back({"mul", [](auto& rng) {
                     return point({uniform({3, 4}, rng), uniform({3, 4}, rng)},
                                  [](const V& x) { return mul(x[0], x[1]); }, rng);
                   }});
  cases.push_back({"scale", [](auto& rng) {
                     return point({uniform({3, 4}, rng)}, [](const V& x) { return scale(x[0], -1.7); }, rng);
                   }});
  cases.push_back({"add_bias", [](auto& rng) {
                     return point({uniform({2, 3, 4}, rng), uniform({4}, rng)},
                                  [](const V& x) { return add_bias(x[0], x[1]); }, rng);
                   }});
  cases.push_back({"reshape", [](auto& rng) {
                     return point({uniform({2, 6}, rng)}, [](const V& x) { return reshape(x[0], {3, 4}); }, rng);
                   }});
  cases.push_back({"permute", [](auto& rng) {
                     return point({uniform({2, 3, 4}, rng)}, [](const V& x) { return permute(x[0], {2, 0, 1}); }, rng);
                   }});
  cases.push_back({"transpose", [](auto& rng) {
                     return point({uniform({2, 3, 4}, rng)}, [](const V& x) { return transpose(x[0], 0, 2); }, rng);
                   }});
  cases.push_back({"concat", [](auto& rng) {
                     return point({uniform({2, 3}, rng), uniform({2, 2}, rng)},
                                  [](const V& x) { return concat<double>({x[0], x[1]}, 1); }, rng);
                   }});
  cases.push_back({"sum", [](auto& rng) {
                     V in{uniform({3, 4}, rng)};
                     ScalarFn f = [in] { return sum(in[0]); };
                     return std::pair<ScalarFn, V>{f, in};
                   }});
  cases.push_back({"embedding_lookup", [](auto& rng) {
                     const std::vector<TokenId> ids{2, 0, 2, 3};
                     return point({uniform({4, 3}, rng)},
                                  [ids](const V& x) { return embedding_lookup(x[0], ids); }, rng);
                   }});
  cases.push_back({"dropout", [](auto& rng) {
                     const auto seed = rng();
                     return point({uniform({4, 5}, rng)},
                                  [seed](const V& x) {
                                    std::mt19937_64 drop(seed);  // same mask on every evaluation
                                    return dropout(x[0], 0.3, drop);
                                  },
                                  rng);
                   }});
  cases.push_back({"residual_block", [](auto& rng) {
                     auto store = std::make_shared<ParamStore<double>>();
                     std::mt19937_64 init(rng());
                     auto block = std::make_shared<BasicBlock<double>>(*store, "b", 2, 3, 2, init);
                     V in{uniform({2, 2, 4, 4}, rng)};
                     for (const auto& p : store->parameters()) in.push_back(p);
                     return point(in, [store, block](const V& x) { return block->forward(x[0], true); }, rng);
                   }});
  return cases;
}

/// One-layer encoder-decoder at d_model 8 over a 3-position memory and 3 target tokens.
std::pair<ScalarFn, std::vector<TensorD>> micro_seq2seq(std::mt19937_64& rng) {
  TransformerConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.d_ff = 16;
  cfg.dropout = 0.0;
  cfg.max_target_len = 8;
  auto store = std::make_shared<ParamStore<double>>();
  std::mt19937_64 init(rng());
  auto enc = std::make_shared<TransformerEncoder<double>>(*store, "tfenc", cfg, init);
  auto dec = std::make_shared<TransformerDecoder<double>>(*store, "tfdec", cfg, 7, init);
  const TensorD memory = uniform({3, 8}, rng);
  std::vector<TensorD> inputs{memory};
  for (const auto& p : store->parameters()) inputs.push_back(p);
  const TokenSeq tokens{kSosId, 4, 5};
  const TokenSeq targets{4, 5, kEosId};
  ScalarFn f = [store, enc, dec, memory, tokens, targets] {
    const auto m = enc->forward(memory, 1, 3, {}, ForwardMode{});
    return cross_entropy_masked(dec->forward(tokens, 1, 3, m, 3, {}, ForwardMode{}), targets, kPadId);
  };
  return {f, inputs};
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck_suite(unsigned long long seed, int points, double tolerance) {
  std::mt19937_64 rng(seed);
  auto cases = op_cases();
  cases.push_back({"micro_encoder_decoder", micro_seq2seq});
  std::vector<GradCheckResult> results;
  for (const auto& c : cases) {
    GradCheckResult r{c.name, 0.0, true};
    for (int p = 0; p < points; ++p) {
      auto [f, inputs] = c.make(rng);
      r.max_error = std::max(r.max_error, grad_check(f, inputs));
    }
    r.passed = r.max_error < tolerance;
    results.push_back(r);
  }
  return results;
}

}  // namespace htr
