#include "htr/model.hpp"

#include <random>

#include "htr/errors.hpp"

namespace htr {

void ModelConfig::validate() const {
  resnet.validate();
  transformer.validate();
  if (proj_depth < 1 || proj_depth > 3) throw ContractError("proj_depth must be 1, 2 or 3");
  if (image_height != kEncoderInputHeight) {
    throw ContractError("image_height must be " + std::to_string(kEncoderInputHeight));
  }
  if (max_width < kEncoderStride) throw ContractError("max_width must be at least 32");
}

nlohmann::ordered_json to_json(const ModelConfig& cfg) {
  nlohmann::ordered_json j;
  j["resnet"] = {{"stem_channels", cfg.resnet.stem_channels},
                 {"stage_channels", cfg.resnet.stage_channels},
                 {"blocks_per_stage", cfg.resnet.blocks_per_stage},
                 {"width_scale", cfg.resnet.width_scale}};
  j["transformer"] = {{"d_model", cfg.transformer.d_model},
                      {"n_heads", cfg.transformer.n_heads},
                      {"enc_layers", cfg.transformer.enc_layers},
                      {"dec_layers", cfg.transformer.dec_layers},
                      {"d_ff", cfg.transformer.d_ff},
                      {"dropout", cfg.transformer.dropout},
                      {"max_target_len", cfg.transformer.max_target_len}};
  j["proj_depth"] = cfg.proj_depth;
  j["image_height"] = cfg.image_height;
  j["max_width"] = cfg.max_width;
  j["binarize"] = cfg.binarize;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig cfg;
    const auto& r = j.at("resnet");
    cfg.resnet.stem_channels = r.at("stem_channels").get<std::size_t>();
    cfg.resnet.stage_channels = r.at("stage_channels").get<std::vector<std::size_t>>();
    cfg.resnet.blocks_per_stage = r.at("blocks_per_stage").get<std::vector<std::size_t>>();
    cfg.resnet.width_scale = r.at("width_scale").get<double>();
    const auto& t = j.at("transformer");
    cfg.transformer.d_model = t.at("d_model").get<std::size_t>();
    cfg.transformer.n_heads = t.at("n_heads").get<std::size_t>();
    cfg.transformer.enc_layers = t.at("enc_layers").get<std::size_t>();
    cfg.transformer.dec_layers = t.at("dec_layers").get<std::size_t>();
    cfg.transformer.d_ff = t.at("d_ff").get<std::size_t>();
    cfg.transformer.dropout = t.at("dropout").get<double>();
    cfg.transformer.max_target_len = t.at("max_target_len").get<std::size_t>();
    cfg.proj_depth = j.at("proj_depth").get<std::size_t>();
    cfg.image_height = j.at("image_height").get<std::size_t>();
    cfg.max_width = j.at("max_width").get<std::size_t>();
    cfg.binarize = j.at("binarize").get<bool>();
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model config: ") + e.what());
  }
}

template <typename T>
Recognizer<T>::Recognizer(const ModelConfig& cfg, std::size_t vocab_size, std::uint64_t init_seed)
    : cfg_(cfg), vocab_size_(vocab_size) {
  cfg_.validate();
  std::mt19937_64 rng(init_seed);
  resnet_ = std::make_unique<ResNet<T>>(store_, "encoder", cfg_.resnet, rng);
  proj_ = Projection<T>(store_, "proj", 2 * cfg_.resnet.output_channels(), cfg_.transformer.d_model,
                        cfg_.proj_depth, rng);
  tfenc_ = std::make_unique<TransformerEncoder<T>>(store_, "tfenc", cfg_.transformer, rng);
  tfdec_ = std::make_unique<TransformerDecoder<T>>(store_, "tfdec", cfg_.transformer, vocab_size, rng);
}

template <typename T>
EncoderOutput<T> Recognizer<T>::visual(const BasicTensor<T>& images, std::span<const std::size_t> widths,
                                       const ForwardMode& mode) {
  std::vector<T> standardized(images.data().begin(), images.data().end());
  for (auto& v : standardized) v = (v - T(0.5)) / T(0.5);
  const BasicTensor<T> x(images.shape(), std::move(standardized));
  return features_to_sequence(resnet_->forward(x, mode.training), proj_, widths);
}

template <typename T>
EncoderOutput<T> Recognizer<T>::encode(const BasicTensor<T>& images, std::span<const std::size_t> widths,
                                       const ForwardMode& mode) {
  auto out = visual(images, widths, mode);
  out.memory = tfenc_->forward(out.memory, out.batch, out.length, out.pad_mask, mode);
  return out;
}

template <typename T>
BasicTensor<T> Recognizer<T>::logits(const EncoderOutput<T>& memory, std::span<const TokenId> tokens,
                                     std::size_t t, const ForwardMode& mode) const {
  return tfdec_->forward(tokens, memory.batch, t, memory.memory, memory.length, memory.pad_mask, mode);
}

template <typename T>
NextTokenScorer Recognizer<T>::scorer(const EncoderOutput<T>& memory, std::size_t sample) const {
  if (sample >= memory.batch) throw ContractError("sample index out of range");
  const std::size_t d = cfg_.transformer.d_model, tk = memory.length;
  const auto all = memory.memory.data();
  EncoderOutput<T> one;
  one.memory = BasicTensor<T>({tk, d}, std::vector<T>(all.begin() + std::ptrdiff_t(sample * tk * d),
                                                      all.begin() + std::ptrdiff_t((sample + 1) * tk * d)));
  one.batch = 1;
  one.length = tk;
  one.pad_mask.assign(memory.pad_mask.begin() + std::ptrdiff_t(sample * tk),
                      memory.pad_mask.begin() + std::ptrdiff_t((sample + 1) * tk));
  return [this, one](const TokenSeq& prefix) {
    const auto out = logits(one, prefix, prefix.size(), ForwardMode{});
    const std::size_t v = vocab_size_;
    return log_softmax(out.data().subspan((prefix.size() - 1) * v, v));
  };
}

template <typename T>
std::vector<DecodeResult> Recognizer<T>::greedy(const EncoderOutput<T>& memory) const {
  std::vector<DecodeResult> out;
  for (std::size_t n = 0; n < memory.batch; ++n) {
    out.push_back(greedy_decode(scorer(memory, n), cfg_.transformer.max_target_len));
  }
  return out;
}

template <typename T>
BasicTensor<T> Recognizer<T>::line_input(const LineImage& img) {
  const std::size_t h = img.height(), w = img.width();
  if (h != kEncoderInputHeight) throw ContractError("line image height must be 64");
  const std::size_t padded = (w + kEncoderStride - 1) / kEncoderStride * kEncoderStride;
  std::vector<T> v(h * padded, T(1));
  const auto src = img.pixels.data();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) v[y * padded + x] = T(src[y * w + x]);
  }
  return BasicTensor<T>({1, 1, h, padded}, std::move(v));
}

template class Recognizer<float>;
template class Recognizer<double>;

}  // namespace htr
