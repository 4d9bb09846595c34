#pragma once

// A minimal decoder-only transformer with hand-written reverse-mode
// gradients, AdamW training, perplexity scoring and nucleus sampling.
//
// Parameters live in a Checkpoint so every model is directly usable by the
// parameter-space arithmetic. Tensor layout (weights are [in, out]):
//
//   embed.tok                [vocab, d_model]
//   embed.pos                [context, d_model]
//   layer{i}.ln1.weight/bias [d_model]
//   layer{i}.attn.qkv.weight [d_model, 3*d_model]   .bias [3*d_model]
//   layer{i}.attn.proj.weight[d_model, d_model]     .bias [d_model]
//   layer{i}.ln2.weight/bias [d_model]
//   layer{i}.mlp.fc.weight   [d_model, d_ff]        .bias [d_ff]
//   layer{i}.mlp.proj.weight [d_ff, d_model]        .bias [d_model]
//   ln_f.weight/bias         [d_model]
//   head.weight              [d_model, vocab]   (absent when embeddings are tied)
//
// The Affine architecture is a lookup table, logits(t) = embed.tok[x_t] +
// head.bias, with embed.tok of shape [vocab, vocab]. Its logits are linear in
// the parameters, which makes weight-space and output-space interpolation
// coincide exactly.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lmi/tensorstore.hpp"

namespace lmi {

using TokenSeq = std::vector<int>;

inline constexpr int kPadToken = 0;
inline constexpr int kBosToken = 1;
inline constexpr int kEosToken = 2;

enum class Architecture { Transformer, Affine };

struct ModelConfig {
  Architecture arch = Architecture::Transformer;
  int vocab_size = 32;
  int context_len = 40;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int d_ff = 256;
  bool tie_embeddings = false;

  void validate() const;
  // Closed-form parameter count.
  std::size_t parameter_count() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  std::string digest() const;

  bool operator==(const ModelConfig&) const = default;
};

// Config stored in a checkpoint's "config" metadata.
ModelConfig config_of(const Checkpoint& ckpt);

enum class Schedule { CosineWithWarmup, Constant };

struct TrainConfig {
  int steps = 1000;
  int batch_size = 64;
  double max_lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  int warmup_steps = 100;
  Schedule schedule = Schedule::CosineWithWarmup;
  std::uint64_t seed = 0;

  void validate() const;
  double lr_at(int step) const;

  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct GenConfig {
  double top_p = 0.9;
  int max_new_tokens = 30;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

class ModelInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(int step);
  int step() const { return step_; }

 private:
  int step_;
};

// Row-major [rows, cols] matrix of logits, always in double.
struct LogitsMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
};

// Normal(0, 0.02) weights, zero biases, unit LayerNorm scales. Deterministic
// in (config, seed). The checkpoint meta carries config, config_digest, seed
// and provenance "init".
Checkpoint init_model(const ModelConfig& config, std::uint64_t seed, DType dtype = DType::F32);

// Throws ModelInputError for an empty, overlong or out-of-vocabulary input.
LogitsMatrix forward(const Checkpoint& ckpt, std::span<const int> tokens);

// Gradient of sum_{t,v} upstream[t][v] * logits[t][v] with respect to every
// parameter (vector-Jacobian product). Same layout and dtype as ckpt.
Checkpoint backward_from_logits(const Checkpoint& ckpt, std::span<const int> tokens,
                                const LogitsMatrix& upstream);

// Mean next-token negative log-likelihood over every position of the batch.
double loss_nll(const Checkpoint& ckpt, std::span<const TokenSeq> batch);

struct LossAndGrad {
  double loss = 0.0;
  Checkpoint grad;
};

LossAndGrad loss_and_grad(const Checkpoint& ckpt, std::span<const TokenSeq> batch);
Checkpoint grad(const Checkpoint& ckpt, std::span<const TokenSeq> batch);

struct TrainLogEntry {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

using TrainCallback = std::function<void(const TrainLogEntry&)>;

// AdamW (decoupled weight decay on rank >= 2 tensors) with the configured
// schedule. Batches are drawn from per-epoch shuffles seeded by cfg.seed.
// Meta of the result: config, init_digest, train.config, train.final_loss,
// seed lineage.
Checkpoint train(const Checkpoint& init, std::span<const TokenSeq> dataset, const TrainConfig& cfg,
                 const TrainCallback& on_step = {});

// exp(total NLL / total predicted tokens).
double perplexity(const Checkpoint& scorer, std::span<const TokenSeq> texts);

std::vector<double> softmax(std::span<const double> logits);
std::vector<double> next_token_distribution(const Checkpoint& ckpt, std::span<const int> prompt);

// Smallest set of tokens, taken in order of decreasing probability (ties by
// token id), whose cumulative mass reaches top_p. Never empty.
std::vector<int> nucleus(std::span<const double> probs, double top_p);

struct SampleStep {
  std::vector<int> nucleus;
  int token = 0;
};

using SampleTrace = std::vector<SampleStep>;

// Final-position logits for a context.
using LogitsFn = std::function<std::vector<double>(std::span<const int>)>;

// Nucleus sampling loop shared by plain and ensemble decoding. Returns only
// the generated tokens (EOS included when produced). Stops at EOS,
// max_new_tokens or when the context is full.
TokenSeq sample_with(const LogitsFn& logits_fn, std::span<const int> prompt, const GenConfig& cfg,
                     int context_len, SampleTrace* trace = nullptr);

TokenSeq sample(const Checkpoint& ckpt, std::span<const int> prompt, const GenConfig& cfg,
                SampleTrace* trace = nullptr);

}  // namespace lmi
