#include <cmath>
#include <random>

#include "doctest.h"
#include "htr/errors.hpp"
#include "htr/model.hpp"
#include "htr/vision.hpp"
#include "test_util.hpp"

using namespace htr;
using htr::testing::random_tensor;

namespace {

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.resnet.width_scale = 0.25;
  cfg.transformer.d_model = 32;
  cfg.transformer.n_heads = 2;
  cfg.transformer.enc_layers = 1;
  cfg.transformer.dec_layers = 1;
  cfg.transformer.d_ff = 64;
  cfg.transformer.dropout = 0.0;
  return cfg;
}

/// Line-like input: light background with random dark strokes.
Tensor ink_image(std::size_t n, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<float> v(n * 64 * w);
  for (auto& x : v) x = u(rng) < 0.15 ? float(u(rng) * 0.3) : float(0.9 + 0.1 * u(rng));
  return Tensor({n, 1, 64, w}, std::move(v));
}

// Independent count: conv weights + 2 per batchnorm channel, blocks with a
// 1x1 projection wherever stride or width changes.
std::size_t expected_resnet_params(const ResNetConfig& cfg) {
  auto c = [&](std::size_t ch) { return std::size_t(std::llround(ch * cfg.width_scale)); };
  std::size_t in = c(cfg.stem_channels);
  std::size_t total = 1 * in * 7 * 7 + 2 * in;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::size_t out = c(cfg.stage_channels[s]);
    for (std::size_t b = 0; b < cfg.blocks_per_stage[s]; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      total += in * out * 9 + 2 * out + out * out * 9 + 2 * out;
      if (stride != 1 || in != out) total += in * out + 2 * out;
      in = out;
    }
  }
  return total;
}

}  // namespace

TEST_CASE("resnet output shape at full width") {
  ResNetConfig cfg;
  cfg.width_scale = 1.0;
  ParamStore<float> store;
  std::mt19937_64 rng(51);
  ResNet<float> net(store, "encoder", cfg, rng);
  std::mt19937_64 data(52);
  CHECK(net.forward(ink_image(1, 512, data), false).shape() == Shape{1, 512, 2, 16});
  CHECK(net.forward(ink_image(1, 32, data), false).shape() == Shape{1, 512, 2, 1});
  CHECK_THROWS_AS(net.forward(ink_image(1, 100, data), false), ContractError);
  CHECK_THROWS_AS(net.forward(Tensor::zeros({1, 1, 48, 64}), false), ContractError);
}

TEST_CASE("memory length equals W/32 for every admissible width") {
  Recognizer<float> model(small_model(), 10, 53);
  std::mt19937_64 data(54);
  for (std::size_t w = 32; w <= 1024; w += 32) {
    const std::size_t widths[] = {w};
    const auto out = model.visual(ink_image(1, w, data), widths, ForwardMode{});
    REQUIRE(out.length == w / 32);
    REQUIRE(out.memory.shape() == Shape{w / 32, 32});
  }
}

TEST_CASE("resnet config invariants") {
  ResNetConfig cfg;
  cfg.blocks_per_stage = {2, 0, 2, 2};
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg = ResNetConfig{};
  cfg.stage_channels = {64, 64, 256, 512};
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg = ResNetConfig{};
  cfg.width_scale = 0.05;  // 64 * 0.05 rounds to 3 channels
  CHECK_THROWS_AS(cfg.validate(), ContractError);
  cfg.width_scale = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ContractError);
}

TEST_CASE("parameter count follows the block-graph formula at every width scale") {
  for (double scale : {1.0, 0.5, 0.25, 0.125}) {
    ResNetConfig cfg;
    cfg.width_scale = scale;
    ParamStore<float> store;
    std::mt19937_64 rng(55);
    ResNet<float> net(store, "encoder", cfg, rng);
    CHECK(store.parameter_count() == expected_resnet_params(cfg));
  }
  ResNetConfig deep;
  deep.blocks_per_stage = {1, 3, 1, 2};
  ParamStore<float> store;
  std::mt19937_64 rng(56);
  ResNet<float> net(store, "encoder", deep, rng);
  CHECK(store.parameter_count() == expected_resnet_params(deep));
}

TEST_CASE("zeroed residual branches reduce every block to its skip path") {
  ParamStore<float> store;
  std::mt19937_64 rng(57);
  ResNet<float> net(store, "encoder", ResNetConfig{}, rng);
  for (const auto& e : store.entries()) {
    const bool branch = e.name.find(".conv1.conv.weight") != std::string::npos ||
                        e.name.find(".conv2.conv.weight") != std::string::npos;
    if (branch) {
      auto t = e.tensor;
      std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.f);
    }
  }
  std::mt19937_64 data(58);
  auto x = random_tensor<float>({2, 16, 8, 16}, data, 0.0, 2.0);
  for (auto& stage : net.stages()) {
    for (auto& block : stage) {
      const auto out = block.forward(x, false);
      const auto skip = relu(block.skip(x, false));
      REQUIRE(out.shape() == skip.shape());
      CHECK(std::equal(out.data().begin(), out.data().end(), skip.data().begin()));
      if (!block.has_projection) {
        // Non-negative inputs pass through the identity skip unchanged.
        CHECK(std::equal(out.data().begin(), out.data().end(), x.data().begin()));
      }
      x = out;
    }
  }
}

TEST_CASE("features_to_sequence concatenates the two rows per column") {
  // C = 2, T = 3; value encodes (channel, row, column).
  std::vector<float> v(2 * 2 * 3);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t t = 0; t < 3; ++t) v[(c * 2 + r) * 3 + t] = float(100 * c + 10 * r + t);
  const Tensor fmap({1, 2, 2, 3}, v);

  ParamStore<float> store;
  std::mt19937_64 rng(59);
  Projection<float> proj(store, "proj", 4, 4, 2, rng);
  for (auto& layer : proj.layers) {
    auto w = layer.weight.mutable_data();
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) w[i * 4 + j] = i == j ? 1.f : 0.f;
  }
  const auto out = features_to_sequence(fmap, proj);
  REQUIRE(out.memory.shape() == Shape{3, 4});
  for (std::size_t t = 0; t < 3; ++t) {
    // Row 0 channels first, then row 1 channels.
    const float expect[4] = {float(t), float(100 + t), float(10 + t), float(110 + t)};
    for (std::size_t k = 0; k < 4; ++k) CHECK(out.memory.data()[t * 4 + k] == expect[k]);
  }

  Projection<float> wrong(store, "wrong", 6, 4, 1, rng);
  CHECK_THROWS_AS(features_to_sequence(fmap, wrong), ContractError);
}

TEST_CASE("memory positions keep left-to-right column order") {
  const std::size_t c = 3, t = 7;
  std::vector<float> v(c * 2 * t);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = float(i % t);  // column j is constant j
  ParamStore<float> store;
  std::mt19937_64 rng(60);
  Projection<float> proj(store, "proj", 2 * c, 2 * c, 1, rng);
  auto w = proj.layers[0].weight.mutable_data();
  for (std::size_t i = 0; i < 2 * c; ++i)
    for (std::size_t j = 0; j < 2 * c; ++j) w[i * 2 * c + j] = i == j ? 1.f : 0.f;
  const auto out = features_to_sequence(Tensor({1, c, 2, t}, v), proj);
  for (std::size_t j = 0; j < t; ++j)
    for (std::size_t k = 0; k < 2 * c; ++k) CHECK(out.memory.data()[j * 2 * c + k] == float(j));
}

TEST_CASE("pad mask marks columns past the original width") {
  ParamStore<float> store;
  std::mt19937_64 rng(61);
  Projection<float> proj(store, "proj", 2, 4, 1, rng);
  const std::size_t widths[] = {100, 64};
  const auto out = features_to_sequence(Tensor::zeros({2, 1, 2, 4}), proj, widths);
  CHECK(out.pad_mask == std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 1, 1});
}

TEST_CASE("shifting the line right by 32 pixels shifts interior memory by one position") {
  Recognizer<float> model(small_model(), 10, 62);
  std::mt19937_64 data(63);
  const std::size_t w = 1024;
  auto img = ink_image(1, w, data);
  // Last 32 columns are background so the shift loses no ink.
  std::vector<float> base(img.data().begin(), img.data().end());
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = w - 32; x < w; ++x) base[y * w + x] = 1.f;
  std::vector<float> shifted(base.size(), 1.f);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 32; x < w; ++x) shifted[y * w + x] = base[y * w + x - 32];

  const std::size_t widths[] = {w};
  const auto a = model.visual(Tensor({1, 1, 64, w}, base), widths, ForwardMode{});
  const auto b = model.visual(Tensor({1, 1, 64, w}, shifted), widths, ForwardMode{});
  const std::size_t d = 32;
  double worst = 0;
  // The stride-32 receptive field reaches about 7 positions, so stay clear of both edges.
  for (std::size_t t = 9; t <= 20; ++t)
    for (std::size_t k = 0; k < d; ++k)
      worst = std::max(worst, double(std::abs(a.memory.data()[t * d + k] - b.memory.data()[(t + 1) * d + k])));
  CHECK(worst < 1e-4);
}

TEST_CASE("one backward pass reaches every encoder and projection parameter") {
  Recognizer<float> model(small_model(), 10, 64);
  std::mt19937_64 data(65);
  const std::size_t widths[] = {256, 200};
  Tape tape;
  std::mt19937_64 drop(1);
  {
    TapeScope<float> scope(tape);
    const ForwardMode mode{true, &drop};
    const auto enc = model.encode(ink_image(2, 256, data), widths, mode);
    const TokenSeq inputs{1, 4, 5, 6, 1, 7, 8, 9};
    const TokenSeq targets{4, 5, 6, 2, 7, 8, 9, 2};
    const auto loss = cross_entropy_masked(model.logits(enc, inputs, 4, mode), targets, kPadId);
    backward(tape, loss);
  }
  std::size_t checked = 0;
  for (const auto& e : model.store().entries()) {
    if (!e.trainable) continue;
    if (e.name.rfind("encoder.", 0) != 0 && e.name.rfind("proj.", 0) != 0) continue;
    ++checked;
    const auto g = e.tensor.grad();
    INFO(e.name);
    CHECK(std::any_of(g.begin(), g.end(), [](float x) { return x != 0.f; }));
  }
  CHECK(checked > 40);
}
