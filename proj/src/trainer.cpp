#include "htr/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "htr/errors.hpp"
#include "htr/log.hpp"

namespace htr {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0 && std::isfinite(learning_rate))) {
    throw ContractError("learning_rate must be finite and non-negative");
  }
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ContractError("betas must lie in [0,1)");
  if (!(eps > 0)) throw ContractError("eps must be positive");
  if (!(grad_clip > 0)) throw ContractError("grad_clip must be positive");
  if (batch_size < 1) throw ContractError("batch_size must be at least 1");
  if (!(val_fraction >= 0 && val_fraction < 1)) throw ContractError("val_fraction must be in [0,1)");
}

nlohmann::ordered_json to_json(const TrainConfig& cfg) {
  nlohmann::ordered_json j;
  j["learning_rate"] = cfg.learning_rate;
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["eps"] = cfg.eps;
  j["grad_clip"] = cfg.grad_clip;
  j["max_steps"] = cfg.max_steps;
  j["batch_size"] = cfg.batch_size;
  j["eval_every"] = cfg.eval_every;
  j["seed"] = cfg.seed;
  j["val_fraction"] = cfg.val_fraction;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  try {
    TrainConfig cfg;
    cfg.learning_rate = j.at("learning_rate").get<double>();
    cfg.beta1 = j.at("beta1").get<double>();
    cfg.beta2 = j.at("beta2").get<double>();
    cfg.eps = j.at("eps").get<double>();
    cfg.grad_clip = j.at("grad_clip").get<double>();
    cfg.max_steps = j.at("max_steps").get<std::size_t>();
    cfg.batch_size = j.at("batch_size").get<std::size_t>();
    cfg.eval_every = j.at("eval_every").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.val_fraction = j.at("val_fraction").get<double>();
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed train config: ") + e.what());
  }
}

void adam_update(std::span<float> param, std::span<const float> grad, std::span<float> m,
                 std::span<float> v, std::size_t t, double lr, const TrainConfig& cfg) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ContractError("adam_update: moment and gradient sizes must match the parameter");
  }
  if (t < 1) throw ContractError("adam_update: step count starts at 1");
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, double(t)), c2 = 1.0 - std::pow(b2, double(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = b1 * m[i] + (1 - b1) * g;
    const double vi = b2 * v[i] + (1 - b2) * g * g;
    m[i] = float(mi);
    v[i] = float(vi);
    param[i] = float(param[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
  }
}

double grad_norm(std::span<const BasicTensor<float>> params) {
  double sq = 0;
  for (const auto& p : params) {
    for (float g : p.grad()) sq += double(g) * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(std::span<BasicTensor<float>> params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm) {
    const double scale = max_norm / (norm + 1e-6);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g = float(g * scale);
    }
  }
  return norm;
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(x >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json header;  // std::map-backed, so keys come out sorted
  header["format_version"] = kCheckpointVersion;
  header["model_config"] = nlohmann::json(to_json(ckpt.model));
  header["train_config"] = nlohmann::json(to_json(ckpt.train));
  std::vector<std::uint32_t> chars;
  for (char32_t c : ckpt.vocab.chars()) chars.push_back(std::uint32_t(c));
  header["vocab"] = chars;
  header["step"] = ckpt.step;
  header["learning_rate"] = ckpt.learning_rate;
  header["adam_t"] = ckpt.adam_t;
  header["epoch"] = ckpt.epoch;
  header["batch_cursor"] = ckpt.batch_cursor;
  header["rng_state"] = ckpt.rng_state;
  auto dir = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (shape_numel(t.shape) != t.values.size()) throw ContractError("tensor " + t.name + " size mismatch");
    const std::size_t len = t.values.size() * 4;
    dir.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"length", len}});
    offset += len;
  }
  header["tensors"] = dir;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  out.reserve(12 + text.size() + offset);
  put_u32(out, std::uint32_t(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : ckpt.tensors) {
    for (float f : t.values) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12) throw FormatError("checkpoint truncated before the header");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    if (std::memcmp(bytes.data(), kCheckpointMagic, 7) == 0) {
      throw MigrationError("checkpoint format '" + std::string(bytes.begin(), bytes.begin() + 8) +
                           "' is not supported (expected " + kCheckpointMagic + ")");
    }
    throw FormatError("not a checkpoint (bad magic)");
  }
  const std::size_t header_len = get_u32(bytes.data() + 8);
  if (bytes.size() < 12 + header_len) throw FormatError("checkpoint truncated inside the header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + std::ptrdiff_t(12 + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
  }
  const auto payload = bytes.subspan(12 + header_len);
  try {
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw MigrationError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                           std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint ckpt;
    ckpt.model = model_config_from_json(header.at("model_config"));
    ckpt.train = train_config_from_json(header.at("train_config"));
    std::vector<char32_t> chars;
    for (auto c : header.at("vocab").get<std::vector<std::uint32_t>>()) chars.push_back(char32_t(c));
    ckpt.vocab = Vocab::from_chars(std::move(chars));
    ckpt.step = header.at("step").get<std::size_t>();
    ckpt.learning_rate = header.at("learning_rate").get<double>();
    ckpt.adam_t = header.at("adam_t").get<std::size_t>();
    ckpt.epoch = header.at("epoch").get<std::size_t>();
    ckpt.batch_cursor = header.at("batch_cursor").get<std::size_t>();
    ckpt.rng_state = header.at("rng_state").get<std::string>();
    std::size_t expected_offset = 0;
    for (const auto& entry : header.at("tensors")) {
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto length = entry.at("length").get<std::size_t>();
      if (offset != expected_offset || length != shape_numel(t.shape) * 4) {
        throw FormatError("checkpoint tensor directory is inconsistent at " + t.name);
      }
      if (offset + length > payload.size()) throw FormatError("checkpoint truncated inside tensor " + t.name);
      t.values.resize(length / 4);
      for (std::size_t i = 0; i < t.values.size(); ++i) {
        t.values[i] = std::bit_cast<float>(get_u32(payload.data() + offset + 4 * i));
      }
      expected_offset = offset + length;
      ckpt.tensors.push_back(std::move(t));
    }
    if (expected_offset != payload.size()) throw FormatError("checkpoint has trailing bytes");
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  // Write-then-rename so an interrupted save never leaves a half file behind.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

namespace {

void import_tensors(ParamStore<float>& store, const std::vector<NamedTensor>& tensors) {
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) {
    if (!by_name.emplace(t.name, &t).second) throw FormatError("checkpoint repeats tensor " + t.name);
  }
  std::size_t used = 0;
  for (const auto& e : store.entries()) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks tensor " + e.name);
    if (it->second->shape != e.tensor.shape()) throw FormatError("checkpoint tensor " + e.name + " has the wrong shape");
    auto dst = e.tensor;
    std::copy(it->second->values.begin(), it->second->values.end(), dst.mutable_data().begin());
    ++used;
  }
  for (const auto& t : tensors) {
    if (t.name.rfind("adam.", 0) != 0 && !store.contains(t.name)) {
      throw FormatError("checkpoint tensor " + t.name + " does not belong to the model");
    }
  }
  (void)used;
}

}  // namespace

std::unique_ptr<Recognizer<float>> model_from_checkpoint(const Checkpoint& ckpt) {
  auto model = std::make_unique<Recognizer<float>>(ckpt.model, ckpt.vocab.size(), 0);
  import_tensors(model->store(), ckpt.tensors);
  return model;
}

std::size_t import_weights(Recognizer<float>& model, const std::vector<NamedTensor>& tensors,
                           const std::string& prefix) {
  auto& store = model.store();
  std::size_t copied = 0;
  for (const auto& t : tensors) {
    if (t.name.rfind(prefix, 0) != 0) continue;
    if (!store.contains(t.name)) throw FormatError("model has no tensor named " + t.name);
    auto dst = store.at(t.name).tensor;
    if (dst.shape() != t.shape) throw FormatError("tensor " + t.name + " has the wrong shape");
    std::copy(t.values.begin(), t.values.end(), dst.mutable_data().begin());
    ++copied;
  }
  return copied;
}

std::string transcribe(Recognizer<float>& model, const Vocab& vocab, const LineImage& line) {
  const auto input = Recognizer<float>::line_input(line);
  const std::size_t widths[] = {line.width()};
  const auto memory = model.encode(input, widths, ForwardMode{});
  return decode(vocab, model.greedy(memory).front().tokens);
}

CerReport evaluate(Recognizer<float>& model, const Vocab& vocab, std::span<const LineExample> examples) {
  std::vector<ScoredPair> pairs;
  pairs.reserve(examples.size());
  for (const auto& ex : examples) pairs.push_back({ex.text, transcribe(model, vocab, ex.image)});
  return score_corpus(pairs);
}

CerReport evaluate_model(const Checkpoint& ckpt, const std::filesystem::path& manifest) {
  auto model = model_from_checkpoint(ckpt);
  const ImageSettings settings{ckpt.model.image_height, ckpt.model.max_width, ckpt.model.binarize};
  const auto examples = load_examples(load_manifest(manifest), settings);
  return evaluate(*model, ckpt.vocab, examples);
}

std::string LogRecord::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["loss"] = loss;
  if (val_cer) j["val_cer"] = *val_cer;
  return j.dump();
}

Trainer::Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg, Vocab vocab,
                 std::vector<LineExample> train_set)
    : model_cfg_(model_cfg),
      cfg_(train_cfg),
      vocab_(std::move(vocab)),
      train_set_(std::move(train_set)),
      lr_(train_cfg.learning_rate),
      rng_(derive_seed(train_cfg.seed, 1)) {
  cfg_.validate();
  if (train_set_.empty()) throw ContractError("training set is empty");
  model_ = std::make_unique<Recognizer<float>>(model_cfg_, vocab_.size(), derive_seed(cfg_.seed, 0));
  init_adam();
}

Trainer::Trainer(const Checkpoint& ckpt, std::vector<LineExample> train_set)
    : model_cfg_(ckpt.model), cfg_(ckpt.train), vocab_(ckpt.vocab), train_set_(std::move(train_set)) {
  if (train_set_.empty()) throw ContractError("training set is empty");
  model_ = model_from_checkpoint(ckpt);
  init_adam();
  restore(ckpt);
}

void Trainer::init_adam() {
  adam_m_.clear();
  adam_v_.clear();
  for (const auto& p : model_->store().parameters()) {
    adam_m_.emplace_back(p.numel(), 0.f);
    adam_v_.emplace_back(p.numel(), 0.f);
  }
  adam_t_ = 0;
}

const std::vector<Batch>& Trainer::epoch_batches() {
  if (batches_epoch_ != epoch_) {
    batches_ = make_batches(train_set_, vocab_, cfg_.batch_size, derive_seed(cfg_.seed, 1000 + epoch_));
    batches_epoch_ = epoch_;
  }
  return batches_;
}

double Trainer::train_step(const Batch& batch) {
  auto& store = model_->store();
  store.zero_grad();
  const auto inputs = batch.decoder_inputs();
  const auto targets = batch.decoder_targets();
  Tape tape;
  double loss_value = 0;
  {
    TapeScope<float> scope(tape);
    const ForwardMode mode{true, &rng_};
    const auto memory = model_->encode(batch.images, batch.widths, mode);
    const auto logits = model_->logits(memory, inputs, batch.target_len - 1, mode);
    const auto loss = cross_entropy_masked(logits, targets, kPadId);
    loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      throw DivergenceError(std::int64_t(step_ + 1),
                            "loss became non-finite at step " + std::to_string(step_ + 1));
    }
    backward(tape, loss);
  }
  auto params = store.parameters();
  clip_grad_norm(params, cfg_.grad_clip);
  ++adam_t_;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) params[i].mutable_grad();  // zero gradient still decays the moments
    adam_update(params[i].mutable_data(), params[i].grad(), adam_m_[i], adam_v_[i], adam_t_, lr_, cfg_);
  }
  ++step_;
  return loss_value;
}

double Trainer::step_next() {
  if (cursor_ >= epoch_batches().size()) {
    ++epoch_;
    cursor_ = 0;
  }
  const double loss = train_step(epoch_batches()[cursor_]);
  ++cursor_;
  return loss;
}

Checkpoint Trainer::snapshot() const {
  Checkpoint ckpt;
  ckpt.model = model_cfg_;
  ckpt.train = cfg_;
  ckpt.vocab = vocab_;
  ckpt.step = step_;
  ckpt.learning_rate = lr_;
  ckpt.adam_t = adam_t_;
  ckpt.epoch = epoch_;
  ckpt.batch_cursor = cursor_;
  std::ostringstream rng_text;
  rng_text << rng_;
  ckpt.rng_state = rng_text.str();
  const auto& store = model_->store();
  for (const auto& e : store.entries()) {
    ckpt.tensors.push_back({e.name, e.tensor.shape(), {e.tensor.data().begin(), e.tensor.data().end()}});
  }
  std::size_t i = 0;
  for (const auto& e : store.entries()) {
    if (e.trainable) ckpt.tensors.push_back({"adam.m." + e.name, e.tensor.shape(), adam_m_[i++]});
  }
  i = 0;
  for (const auto& e : store.entries()) {
    if (e.trainable) ckpt.tensors.push_back({"adam.v." + e.name, e.tensor.shape(), adam_v_[i++]});
  }
  return ckpt;
}

void Trainer::restore(const Checkpoint& ckpt) {
  if (!(ckpt.model == model_cfg_) || !(ckpt.vocab == vocab_)) {
    throw ContractError("checkpoint belongs to a different model or vocabulary");
  }
  auto& store = model_->store();
  import_tensors(store, ckpt.tensors);
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& t : ckpt.tensors) by_name.emplace(t.name, &t);
  std::size_t i = 0;
  for (const auto& e : store.entries()) {
    if (!e.trainable) continue;
    const auto m = by_name.find("adam.m." + e.name), v = by_name.find("adam.v." + e.name);
    if (m == by_name.end() || v == by_name.end()) throw FormatError("checkpoint lacks optimizer state for " + e.name);
    if (m->second->values.size() != e.tensor.numel() || v->second->values.size() != e.tensor.numel()) {
      throw FormatError("optimizer state for " + e.name + " has the wrong size");
    }
    adam_m_[i] = m->second->values;
    adam_v_[i] = v->second->values;
    ++i;
  }
  cfg_ = ckpt.train;
  adam_t_ = ckpt.adam_t;
  step_ = ckpt.step;
  lr_ = ckpt.learning_rate;
  epoch_ = ckpt.epoch;
  cursor_ = ckpt.batch_cursor;
  std::istringstream rng_text(ckpt.rng_state);
  rng_text >> rng_;
  if (!rng_text) throw FormatError("checkpoint RNG state is unreadable");
}

FitResult fit(const std::vector<LineExample>& examples, const ModelConfig& model_cfg, const TrainConfig& cfg,
              const FitOptions& options) {
  cfg.validate();
  model_cfg.validate();
  if (examples.empty()) throw ContractError("no training examples");
  const auto [train_idx, val_idx] = split_train_val(examples.size(), cfg.val_fraction, cfg.seed);
  std::vector<LineExample> train_set, val_set;
  for (auto i : train_idx) train_set.push_back(examples[i]);
  for (auto i : val_idx) val_set.push_back(examples[i]);

  std::unique_ptr<Trainer> trainer;
  if (options.resume) {
    auto expected = options.resume->train;
    expected.max_steps = cfg.max_steps;
    if (!(options.resume->model == model_cfg) || !(expected == cfg)) {
      throw ContractError("resumed checkpoint was trained with a different configuration");
    }
    trainer = std::make_unique<Trainer>(*options.resume, std::move(train_set));
    trainer->set_max_steps(cfg.max_steps);
  } else {
    std::vector<std::string> texts;
    for (const auto& ex : examples) texts.push_back(ex.text);
    trainer = std::make_unique<Trainer>(model_cfg, cfg, Vocab::build(texts), std::move(train_set));
  }

  std::ofstream log_file;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    const auto log_path = options.out_dir / "train_log.jsonl";
    log_file.open(log_path, options.resume ? std::ios::app : std::ios::trunc);
    if (!log_file) throw IoError("cannot write " + log_path.string());
  }
  // Log lines reach the file together with the checkpoint they lead up to,
  // so a rolled-back stretch never appears and resuming appends cleanly.
  std::size_t flushed = 0;
  FitResult result;
  auto save = [&](const Checkpoint& ckpt) {
    if (options.out_dir.empty()) return;
    save_checkpoint(options.out_dir / "checkpoint.htr", ckpt);
    for (; flushed < result.log.size(); ++flushed) log_file << result.log[flushed].to_json() << '\n';
    log_file.flush();
  };

  Checkpoint last_good = trainer->snapshot();
  while (trainer->step() < cfg.max_steps) {
    double loss = 0;
    try {
      loss = trainer->step_next();
    } catch (const DivergenceError& e) {
      if (result.retries >= options.max_retries) throw;
      ++result.retries;
      const double lr = trainer->learning_rate() / 2;
      std::ostringstream msg;
      msg << "step " << e.step() << ": non-finite loss, restarting from step " << last_good.step
          << " with learning rate " << lr;
      log_warn(msg.str());
      trainer->restore(last_good);
      trainer->set_learning_rate(lr);
      while (!result.log.empty() && result.log.back().step > last_good.step) result.log.pop_back();
      continue;
    }
    LogRecord rec{trainer->step(), loss, std::nullopt};
    const bool periodic = cfg.eval_every > 0 && rec.step % cfg.eval_every == 0;
    if (periodic || rec.step == cfg.max_steps) {
      if (!val_set.empty()) rec.val_cer = evaluate(trainer->model(), trainer->vocab(), val_set).corpus_cer;
    }
    result.log.push_back(rec);
    if (options.on_record) options.on_record(rec);
    if (periodic || rec.step == cfg.max_steps) {
      last_good = trainer->snapshot();
      save(last_good);
    }
  }
  result.checkpoint = trainer->snapshot();
  save(result.checkpoint);
  return result;
}

FitResult fit(const std::filesystem::path& manifest, const ModelConfig& model_cfg, const TrainConfig& cfg,
              const FitOptions& options) {
  const ImageSettings settings{model_cfg.image_height, model_cfg.max_width, model_cfg.binarize};
  return fit(load_examples(load_manifest(manifest), settings), model_cfg, cfg, options);
}

}  // namespace htr
