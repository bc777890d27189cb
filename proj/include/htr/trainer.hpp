#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "htr/dataset.hpp"
#include "htr/metrics.hpp"
#include "htr/model.hpp"
#include "htr/text.hpp"
#include "json.hpp"

namespace htr {

struct TrainConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double grad_clip = 1.0;
  std::size_t max_steps = 1000;
  std::size_t batch_size = 8;
  std::size_t eval_every = 100;  // 0 disables periodic evaluation
  std::uint64_t seed = 0;
  double val_fraction = 0.1;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::ordered_json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// One Adam update on a flat parameter block with bias-corrected moments.
/// `t` is the 1-based step count after this update.
void adam_update(std::span<float> param, std::span<const float> grad, std::span<float> m,
                 std::span<float> v, std::size_t t, double lr, const TrainConfig& cfg);

/// Scales all gradients so their joint L2 norm is at most `max_norm`
/// (factor max_norm / (norm + 1e-6)). Returns the norm before clipping.
double clip_grad_norm(std::span<BasicTensor<float>> params, double max_norm);

/// Joint L2 norm of the gradients (missing gradients count as zero).
double grad_norm(std::span<const BasicTensor<float>> params);

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// Everything needed to rebuild a model and continue its training run.
struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  Vocab vocab;
  std::size_t step = 0;
  double learning_rate = 0;  // current, after any divergence halving
  std::size_t adam_t = 0;
  std::size_t epoch = 0;
  std::size_t batch_cursor = 0;
  std::string rng_state;
  std::vector<NamedTensor> tensors;  // model tensors, then "adam.m.*" and "adam.v.*"
};

inline constexpr char kCheckpointMagic[] = "HTRCKPT1";
inline constexpr int kCheckpointVersion = 1;

/// Magic, 4-byte LE header length, sorted-key JSON header, f32 LE payloads.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Builds a model holding the checkpoint's weights and batchnorm statistics.
std::unique_ptr<Recognizer<float>> model_from_checkpoint(const Checkpoint& ckpt);

/// Copies each tensor whose name starts with `prefix` into the model tensor of
/// the same name, e.g. externally converted "encoder." weights. Throws
/// FormatError for a name the model lacks or a shape mismatch. Returns the
/// number of tensors copied.
std::size_t import_weights(Recognizer<float>& model, const std::vector<NamedTensor>& tensors,
                           const std::string& prefix);

/// Greedy transcription of one normalized line.
std::string transcribe(Recognizer<float>& model, const Vocab& vocab, const LineImage& line);

/// Greedy-decodes every example and scores it against its transcription.
CerReport evaluate(Recognizer<float>& model, const Vocab& vocab, std::span<const LineExample> examples);
CerReport evaluate_model(const Checkpoint& ckpt, const std::filesystem::path& manifest);

struct LogRecord {
  std::size_t step = 0;
  double loss = 0;
  std::optional<double> val_cer;

  std::string to_json() const;
};

/// Teacher-forced Adam training over a fixed example set. Batches come from
/// make_batches with a per-epoch seed; the batch cursor, dropout RNG and
/// optimizer moments are all part of the checkpointed state.
class Trainer {
 public:
  Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg, Vocab vocab,
          std::vector<LineExample> train_set);
  /// Resumes from `ckpt`; `train_set` must be the one the run started with.
  Trainer(const Checkpoint& ckpt, std::vector<LineExample> train_set);

  Recognizer<float>& model() { return *model_; }
  const Vocab& vocab() const { return vocab_; }
  std::size_t step() const { return step_; }
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  void set_max_steps(std::size_t n) { cfg_.max_steps = n; }

  /// One forward/backward/clip/Adam step on `batch`. Throws DivergenceError
  /// carrying the step number if the loss is not finite.
  double train_step(const Batch& batch);
  /// train_step on the next batch of the epoch schedule.
  double step_next();
  Checkpoint snapshot() const;
  void restore(const Checkpoint& ckpt);

 private:
  void init_adam();
  const std::vector<Batch>& epoch_batches();

  ModelConfig model_cfg_;
  TrainConfig cfg_;
  Vocab vocab_;
  std::vector<LineExample> train_set_;
  std::unique_ptr<Recognizer<float>> model_;
  std::vector<std::vector<float>> adam_m_, adam_v_;  // per trainable parameter, store order
  std::size_t adam_t_ = 0;
  std::size_t step_ = 0;
  double lr_ = 0;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
  std::vector<Batch> batches_;
  std::size_t batches_epoch_ = SIZE_MAX;
};

struct FitResult {
  Checkpoint checkpoint;
  std::vector<LogRecord> log;
  std::size_t retries = 0;
};

struct FitOptions {
  std::filesystem::path out_dir;  // checkpoint.htr and train_log.jsonl; empty keeps everything in memory
  std::function<void(const LogRecord&)> on_record;
  std::size_t max_retries = 3;
  /// Continue this run instead of initializing; its configs must match
  /// apart from max_steps.
  std::optional<Checkpoint> resume;
};

/// Runs `cfg.max_steps` steps with periodic validation. On a non-finite loss,
/// rolls back to the last good snapshot with the learning rate halved, up to
/// `max_retries` times, then rethrows the DivergenceError.
FitResult fit(const std::vector<LineExample>& examples, const ModelConfig& model_cfg,
              const TrainConfig& cfg, const FitOptions& options = {});
FitResult fit(const std::filesystem::path& manifest, const ModelConfig& model_cfg,
              const TrainConfig& cfg, const FitOptions& options = {});

}  // namespace htr
