#pragma once

// Joint contrastive + captioning pretraining of the signal tower, the text
// tower and the captioning decoder, with AdamW, warmup/step-decay learning
// rate and resumable checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "esi/data_model.hpp"
#include "esi/decoder.hpp"
#include "esi/objectives.hpp"
#include "esi/signal_encoder.hpp"
#include "esi/text_encoder.hpp"

namespace esi {

struct TrainConfig {
  int epochs = 30;
  int warmup_epochs = 5;
  double base_lr = 5e-5;
  double lr_decay_factor = 0.1;
  int lr_decay_every = 10;
  bool decay_from_zero = false;  // count decay boundaries from epoch 0, not from warmup end
  int batch_size = 48;
  bool drop_last = true;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t seed = 0;
  LossWeights loss;
  bool freeze_text = false;
  int vocab_min_freq = 1;
  std::string variant = "esi-tiny";
  ConvNeXt1DConfig signal = ConvNeXt1DConfig::tiny();
  TextEncoderConfig text;
  DecoderConfig decoder;

  // esi (ConvNeXt-base tower), esi-tiny (ConvNeXt-tiny) or micro (desk-scale
  // benchmark model with its own optimizer settings).
  static TrainConfig preset(const std::string& variant);
  void validate() const;

  nlohmann::json to_json() const;
  // Missing keys keep the values of `base`.
  static TrainConfig from_json(const nlohmann::json& j, const TrainConfig& base);
};

// YAML file; keys mirror to_json(). An optional top-level `variant` selects
// the preset the other keys override.
TrainConfig load_train_config(const std::filesystem::path& path);

// Linear warmup from 0 to base_lr over warmup_epochs, then a factor of
// lr_decay_factor at every lr_decay_every-epoch boundary after warmup.
double lr_at(int64_t step, int64_t steps_per_epoch, const TrainConfig& config);

template <typename T>
struct EmbeddingBatch {
  Var<T> signal;  // [B, d] unit rows
  Var<T> text;    // [B, d] unit rows
  Var<T> tokens;  // [B, T', w] signal tokens for cross-attention
};

// Signal tower, text tower, decoder and temperature sharing one parameter
// store.
template <typename T>
class EsiModel {
 public:
  EsiModel(const TrainConfig& config, Vocabulary vocab);

  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const Vocabulary& vocab() const { return vocab_; }
  const TrainConfig& config() const { return config_; }
  const SignalEncoder<T>& signal() const { return *signal_; }
  const TextEncoder<T>& text() const { return *text_; }
  const CaptionDecoder<T>& decoder() const { return *decoder_; }
  const Var<T>& log_sigma() const { return log_sigma_; }

  TokenizedBatch tokenize(const std::vector<std::string>& texts) const;
  // Unit rows [B, d], no graph.
  Tensor<T> embed_signals(const std::vector<const ECGRecord*>& records,
                          size_t batch_size = 64) const;
  Tensor<T> embed_texts(const std::vector<std::string>& texts, size_t batch_size = 64) const;

  void clamp_temperature();

 private:
  TrainConfig config_;
  Vocabulary vocab_;
  ParamStore<T> params_;
  std::unique_ptr<SignalEncoder<T>> signal_;
  std::unique_ptr<TextEncoder<T>> text_;
  std::unique_ptr<CaptionDecoder<T>> decoder_;
  Var<T> log_sigma_;
};

// Stacks equally shaped records into [B, leads, samples].
template <typename T>
Tensor<T> stack_signals(const std::vector<const ECGRecord*>& records);

// Decoupled-weight-decay Adam over the trainable entries of a ParamStore.
template <typename T>
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  // Clips the global gradient norm to max_norm (when > 0), then updates
  // every parameter that requires grad and holds a gradient. Returns the
  // pre-clip gradient norm.
  double step(ParamStore<T>& params, double lr, double max_norm);

  int64_t steps() const { return t_; }
  std::map<std::string, Tensor<float>>& first_moments() { return m_; }
  std::map<std::string, Tensor<float>>& second_moments() { return v_; }
  const std::map<std::string, Tensor<float>>& first_moments() const { return m_; }
  const std::map<std::string, Tensor<float>>& second_moments() const { return v_; }
  void set_steps(int64_t t) { t_ = t; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
  std::map<std::string, Tensor<float>> m_, v_;
};

struct EpochStats {
  int epoch = 0;
  double total = 0.0;
  double contrastive = 0.0;
  double captioning = 0.0;
  int64_t steps = 0;
  double lr = 0.0;     // at the last step of the epoch
  double sigma = 0.0;  // temperature after the epoch
};

class Checkpoint {
 public:
  static constexpr uint32_t kVersion = 1;

  TrainConfig config;
  Vocabulary vocab;
  int epoch = 0;  // completed epochs
  int64_t step = 0;
  std::string rng_state;
  std::vector<EpochStats> history;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;  // params then adam.m.* / adam.v.*

  // "ESICKPT\0", u32 version, u64 metadata length, metadata JSON, then every
  // tensor as little-endian float32 in metadata order.
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes);

  const Tensor<float>* find(const std::string& name) const;
};

std::unique_ptr<EsiModel<float>> model_from_checkpoint(const Checkpoint& ckpt);

struct PretrainOptions {
  // Checkpoint to continue from; its config must match.
  const Checkpoint* resume = nullptr;
  // Stop after this many completed epochs (<= config.epochs); 0 = all.
  int stop_after_epoch = 0;
  std::function<void(const EpochStats&)> on_epoch;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::unique_ptr<EsiModel<float>> model;
};

// Builds the vocabulary from the descriptions (unless resuming) and runs the
// remaining epochs. Throws NumericError naming the batch on a non-finite
// loss.
PretrainResult pretrain(const std::vector<ECGTextPair>& pairs, const TrainConfig& config,
                        const PretrainOptions& options = {});

// Hex SHA-256 over the names, shapes and raw bytes of every parameter whose
// name starts with prefix.
std::string parameter_hash(const ParamStore<float>& params, const std::string& prefix = "");

}  // namespace esi
