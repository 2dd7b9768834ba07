#ifndef LMM_MODEL_HPP
#define LMM_MODEL_HPP

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lmm/common.hpp"

namespace lmm::model {

using TokenId = std::int32_t;

/// Target value excluded from the loss.
inline constexpr TokenId kIgnoreTarget = -1;

struct ModelConfig {
  int vocab_size = 0;
  int context_len = 256;
  int d_model = 128;
  int n_heads = 4;
  int n_layers = 2;

  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_fraction = 0.05;
  double grad_clip = 1.0;  // global-norm clip, 0 disables
  int batch_size = 16;
  int n_steps = 1000;
  int eval_every = 100;
  std::uint64_t seed = 0;
  double init_std = 0.02;
  unsigned threads = 0;  // 0 = hardware concurrency; results do not depend on it

  /// Throws ConfigError.
  void validate() const;
  int head_dim() const { return d_model / n_heads; }

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

enum class TensorRole {
  TokenEmbedding,
  PositionEmbedding,
  NormScale,
  NormShift,
  QkvWeight,
  QkvBias,
  OutWeight,
  OutBias,
  FcWeight,
  FcBias,
  ProjWeight,
  ProjBias,
};

std::string_view to_string(TensorRole role);

struct TensorInfo {
  std::string name;
  TensorRole role;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

/// All trainable tensors in one flat buffer, in declared order:
/// wte, wpe, per layer {ln1 scale/shift, qkv weight/bias, out weight/bias,
/// ln2 scale/shift, fc weight/bias, proj weight/bias}, final norm scale/shift.
/// The output projection reuses wte.
struct ModelParameters {
  ModelConfig config;
  AlignedDoubles data;
  std::vector<TensorInfo> layout;

  const TensorInfo& tensor(const std::string& name) const;
  std::span<double> view(const TensorInfo& t) { return {data.data() + t.offset, t.size()}; }
  std::span<const double> view(const TensorInfo& t) const { return {data.data() + t.offset, t.size()}; }
  std::size_t size() const { return data.size(); }
  bool all_finite() const;

  bool operator==(const ModelParameters& other) const { return data == other.data; }
};

std::vector<TensorInfo> make_layout(const ModelConfig& config);

/// Weights ~ Normal(0, init_std), biases 0, norm scales 1, shifts 0.
ModelParameters init_params(const ModelConfig& config, std::uint64_t seed);

struct ForwardTrace {
  /// attention[layer][head] is a row-major T x T matrix.
  std::vector<std::vector<std::vector<double>>> attention;
};

/// Logits for every position, row-major T x vocab_size.
std::vector<double> forward(const ModelParameters& params, std::span<const TokenId> tokens,
                            ForwardTrace* trace = nullptr);

struct Example {
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;  // kIgnoreTarget entries are masked
};

/// inputs = tokens[0..n-2], targets = tokens[1..n-1]; targets equal to
/// `pad` are masked.
Example make_example(std::span<const TokenId> tokens, TokenId pad = 0);

struct LossAndGrads {
  double loss = 0.0;  // mean next-token cross-entropy over unmasked positions, nats
  std::size_t positions = 0;
  AlignedDoubles grads;  // same layout as ModelParameters::data
};

LossAndGrads loss_and_grads(const ModelParameters& params, std::span<const Example> batch);
/// Forward-only variant.
double mean_loss(const ModelParameters& params, std::span<const Example> batch, unsigned threads = 0);

// ---------------------------------------------------------------------------
// Training

struct LossRecord {
  int step = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated
};

struct TrainSequence {
  std::string patient_id;
  std::vector<TokenId> tokens;
};

struct TrainResult {
  ModelParameters params;  // at best validation loss
  std::vector<LossRecord> history;
  int best_step = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t n_train = 0, n_val = 0, n_test = 0;
};

enum class Split { Train, Validation, Test };

/// 95 / 2.5 / 2.5 by a seeded hash of the patient id.
Split assign_split(const std::string& patient_id, std::uint64_t seed);

using ProgressFn = std::function<void(const LossRecord&)>;

TrainResult train(const std::vector<TrainSequence>& corpus, const ModelConfig& config,
                  const ProgressFn& progress = nullptr);

std::string history_csv(const std::vector<LossRecord>& history);

// ---------------------------------------------------------------------------
// Checkpoints: "LMMCKPT 1\n", config JSON on one line, then little-endian
// float64 tensors in layout order.

void save_checkpoint(const ModelParameters& params, const std::string& path);
ModelParameters load_checkpoint(const std::string& path);
std::string serialize_checkpoint(const ModelParameters& params);
ModelParameters parse_checkpoint(std::string_view bytes);

// ---------------------------------------------------------------------------
// Inference

/// Incremental decoder state with a per-sequence key/value cache.
class InferenceState {
 public:
  explicit InferenceState(const ModelParameters& params);

  /// Feeds one token; logits() then describes the next position.
  void append(TokenId token);
  std::span<const double> logits() const { return logits_; }
  std::size_t length() const { return length_; }
  const ModelParameters& params() const { return *params_; }

 private:
  const ModelParameters* params_;
  std::size_t length_ = 0;
  std::vector<AlignedDoubles> keys_, values_;  // per layer, context_len x d_model
  AlignedDoubles logits_;
  AlignedDoubles x_, h_, qkv_, att_, tmp_, fc_;
  AlignedDoubles scores_;
};

/// temperature 0 gives argmax with ties to the smallest id; top_k 0 keeps
/// every token.
TokenId sample_from_logits(std::span<const double> logits, double temperature, int top_k, Rng& rng);

TokenId sample_next(const ModelParameters& params, std::span<const TokenId> prefix, double temperature,
                    int top_k, Rng& rng);

}  // namespace lmm::model

#endif  // LMM_MODEL_HPP
