#ifndef LMM_MONTECARLO_HPP
#define LMM_MONTECARLO_HPP

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lmm/model.hpp"
#include "lmm/sequencer.hpp"
#include "lmm/vocab.hpp"

namespace lmm::mc {

/// Autoregressive decoding state for one sequence.
class Session {
 public:
  virtual ~Session() = default;
  virtual std::unique_ptr<Session> clone() const = 0;
  virtual void append(TokenId token) = 0;
  /// Next-token logits after the tokens appended so far.
  virtual std::span<const double> logits() const = 0;
  virtual std::size_t length() const = 0;
};

/// Anything that can score next tokens: the transformer, or a hand-built
/// table model in tests.
class SequenceModel {
 public:
  virtual ~SequenceModel() = default;
  virtual std::unique_ptr<Session> start() const = 0;
  virtual std::size_t context_len() const = 0;
  virtual std::size_t vocab_size() const = 0;
};

class TransformerModel final : public SequenceModel {
 public:
  explicit TransformerModel(const model::ModelParameters& params) : params_(&params) {}
  std::unique_ptr<Session> start() const override;
  std::size_t context_len() const override { return static_cast<std::size_t>(params_->config.context_len); }
  std::size_t vocab_size() const override { return static_cast<std::size_t>(params_->config.vocab_size); }

 private:
  const model::ModelParameters* params_;
};

enum class Bucketing { Monthly, Quarterly };

std::string_view to_string(Bucketing b);
Bucketing parse_bucketing(std::string_view name);
double bucket_days(Bucketing b);

struct SimulationRequest {
  seq::TokenSequence prompt;
  int n_futures = 64;
  double horizon_days = 365;
  double temperature = 1.0;
  int top_k = 0;
  std::uint64_t base_seed = 0;
  int max_tokens_per_future = 0;  // 0 = context length
  /// Surface prefixes tabulated into event_probs, e.g. "DX:G20".
  std::vector<std::string> predicates;
  Bucketing bucketing = Bucketing::Monthly;
  unsigned threads = 0;

  /// Throws ConfigError.
  void validate() const;
};

enum class StopReason { Horizon, Eos, TokenCap };

struct ProbabilityTable {
  std::string predicate;
  Bucketing bucketing = Bucketing::Monthly;
  /// Fraction of futures whose first match falls in each bucket.
  std::vector<double> per_bucket;
  double any_time = 0.0;
};

struct SimulationBundle {
  std::vector<std::vector<TokenId>> futures;
  std::vector<StopReason> stop_reasons;
  std::vector<double> per_future_cost;
  double predicted_cost = 0.0;
  double cost_std_error = 0.0;
  double horizon_days = 0.0;
  std::uint64_t seed = 0;
  std::size_t prompt_length = 0;  // after truncation
  /// Futures that reached the horizon or EOS; token-capped ones are kept but not counted.
  std::size_t n_futures_completed = 0;
  std::vector<ProbabilityTable> event_probs;

  std::size_t n_futures() const { return futures.size(); }
};

/// Prompts longer than half the context are cut to their most recent event
/// groups so futures have room to grow. Throws PromptTooLong when even the
/// demographic prefix does not fit.
seq::TokenSequence fit_prompt(const seq::TokenSequence& prompt, std::size_t context_len, const Vocabulary& vocab);

SimulationBundle simulate_futures(const SequenceModel& model, const Vocabulary& vocab,
                                  const SimulationRequest& request);

/// Sum of dequantized cost tokens whose cumulative preceding gap days are
/// within the horizon.
double cost_of_future(std::span<const TokenId> future, const Vocabulary& vocab, double horizon_days);

/// Throws UnknownPredicate for an empty predicate or one outside the known
/// surface namespaces. ICD-10 CM events are matched on their full dotted code
/// (`DX:I50.9`), other events on their token surface.
ProbabilityTable event_probability(const SimulationBundle& bundle, const Vocabulary& vocab,
                                   const std::string& predicate, Bucketing bucketing = Bucketing::Monthly);
/// A future counts when any of the predicates matches; the table is labelled `label`.
ProbabilityTable event_probability(const SimulationBundle& bundle, const Vocabulary& vocab,
                                   const std::vector<std::string>& predicates, const std::string& label,
                                   Bucketing bucketing = Bucketing::Monthly);

/// Prompt with the event appended on the same day (no gap token). A trailing
/// EOS is dropped. Throws UnknownCode.
seq::TokenSequence intervene(const seq::TokenSequence& prompt, const MedicalEvent& event, const Vocabulary& vocab);

std::string bundle_to_json(const SimulationBundle& bundle, const Vocabulary& vocab, bool verbose = false);

}  // namespace lmm::mc

#endif  // LMM_MONTECARLO_HPP
