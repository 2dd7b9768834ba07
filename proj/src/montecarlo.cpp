#include "lmm/montecarlo.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace lmm::mc {

namespace {

constexpr std::string_view kExtension = "DX-X:";

class TransformerSession final : public Session {
 public:
  explicit TransformerSession(const model::ModelParameters& params) : state_(params) {}
  std::unique_ptr<Session> clone() const override { return std::make_unique<TransformerSession>(*this); }
  void append(TokenId token) override { state_.append(token); }
  std::span<const double> logits() const override { return state_.logits(); }
  std::size_t length() const override { return state_.length(); }

 private:
  model::InferenceState state_;
};

bool known_namespace(std::string_view predicate) {
  const auto colon = predicate.find(':');
  if (colon == std::string_view::npos || colon == 0) return false;
  const auto ns = predicate.substr(0, colon + 1);
  for (auto sys : {CodeSystem::ICD10CM, CodeSystem::ICD10PCS, CodeSystem::CPT4, CodeSystem::HCPCS, CodeSystem::NDC,
                   CodeSystem::PLACE_OF_SERVICE, CodeSystem::DEMOGRAPHIC, CodeSystem::COST, CodeSystem::TIME_GAP}) {
    if (ns == surface_prefix(sys)) return true;
  }
  return false;
}

/// Cumulative gap days at the first event matching `predicate`, if any.
std::optional<double> first_match_day(std::span<const TokenId> future, const Vocabulary& vocab,
                                      const std::vector<std::string>& predicates, double horizon_days) {
  double days = 0.0;
  std::size_t i = 0;
  while (i < future.size()) {
    const TokenId id = future[i];
    if (id == kEos) break;
    const Token& t = vocab.token(id);
    if (t.kind == CodeSystem::TIME_GAP) {
      days += vocab.gap_days(id);
      if (days > horizon_days) break;
      ++i;
      continue;
    }
    std::string full = t.surface;
    ++i;
    if (t.kind == CodeSystem::ICD10CM && !starts_with(t.surface, kExtension)) {
      std::string ext;
      while (i < future.size() && starts_with(vocab.surface(future[i]), kExtension)) {
        ext += vocab.surface(future[i]).substr(kExtension.size());
        ++i;
      }
      if (!ext.empty()) full += "." + ext;
    }
    for (const auto& p : predicates) {
      if (starts_with(full, p)) return days;
    }
  }
  return std::nullopt;
}

std::size_t n_buckets(double horizon_days, Bucketing b) {
  return static_cast<std::size_t>(std::max(1.0, std::ceil(horizon_days / bucket_days(b))));
}

}  // namespace

std::unique_ptr<Session> TransformerModel::start() const { return std::make_unique<TransformerSession>(*params_); }

std::string_view to_string(Bucketing b) { return b == Bucketing::Monthly ? "monthly" : "quarterly"; }

Bucketing parse_bucketing(std::string_view name) {
  if (name == "monthly") return Bucketing::Monthly;
  if (name == "quarterly") return Bucketing::Quarterly;
  throw Error(ErrorCode::ConfigError, "bucketing must be monthly or quarterly, got " + std::string(name));
}

double bucket_days(Bucketing b) { return b == Bucketing::Monthly ? 365.25 / 12.0 : 365.25 / 4.0; }

void SimulationRequest::validate() const {
  if (n_futures < 1) throw Error(ErrorCode::ConfigError, "n_futures must be >= 1");
  if (!(horizon_days >= 1)) throw Error(ErrorCode::ConfigError, "horizon_days must be >= 1");
  if (!(temperature >= 0) || top_k < 0 || max_tokens_per_future < 0) {
    throw Error(ErrorCode::ConfigError, "temperature, top_k and max_tokens_per_future must be >= 0");
  }
}

seq::TokenSequence fit_prompt(const seq::TokenSequence& prompt, std::size_t context_len, const Vocabulary& vocab) {
  seq::TokenSequence p = prompt;
  if (!p.tokens.empty() && p.tokens.back() == kEos) p.tokens.pop_back();
  if (p.tokens.empty()) throw Error(ErrorCode::PromptTooLong, "empty prompt");
  const std::size_t budget = std::max<std::size_t>(context_len / 2, seq::kPrefixLength);
  if (p.tokens.size() > budget) {
    try {
      p = seq::truncate(p, budget, vocab);
    } catch (const Error& e) {
      throw Error(ErrorCode::PromptTooLong, e.what());
    }
  }
  if (p.tokens.size() >= context_len) {
    throw Error(ErrorCode::PromptTooLong,
                std::to_string(p.tokens.size()) + " prompt tokens leave no room in context " + std::to_string(context_len));
  }
  return p;
}

SimulationBundle simulate_futures(const SequenceModel& model, const Vocabulary& vocab,
                                  const SimulationRequest& request) {
  request.validate();
  for (const auto& pred : request.predicates) {
    if (!known_namespace(pred)) throw Error(ErrorCode::UnknownPredicate, "predicate '" + pred + "'");
  }
  if (model.vocab_size() != vocab.size()) {
    throw Error(ErrorCode::ConfigError, "model vocab_size " + std::to_string(model.vocab_size()) +
                                            " differs from vocabulary size " + std::to_string(vocab.size()));
  }
  const std::size_t ctx = model.context_len();
  const auto prompt = fit_prompt(request.prompt, ctx, vocab);
  for (TokenId t : prompt.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab.size()) {
      throw Error(ErrorCode::UnknownTokenId, "prompt token " + std::to_string(t));
    }
  }

  auto base = model.start();
  for (TokenId t : prompt.tokens) base->append(t);

  const std::size_t n = static_cast<std::size_t>(request.n_futures);
  const std::size_t cap = request.max_tokens_per_future > 0 ? static_cast<std::size_t>(request.max_tokens_per_future) : ctx;

  SimulationBundle b;
  b.futures.resize(n);
  b.stop_reasons.resize(n, StopReason::TokenCap);
  b.per_future_cost.resize(n, 0.0);
  b.horizon_days = request.horizon_days;
  b.seed = request.base_seed;
  b.prompt_length = prompt.tokens.size();

  parallel_for(
      n,
      [&](std::size_t i) {
        Rng rng = Rng::stream(request.base_seed, i);
        auto session = base->clone();
        auto& out = b.futures[i];
        double days = 0.0;
        StopReason reason = StopReason::TokenCap;
        while (out.size() < cap) {
          const TokenId tok = model::sample_from_logits(session->logits(), request.temperature, request.top_k, rng);
          out.push_back(tok);
          if (tok == kEos) {
            reason = StopReason::Eos;
            break;
          }
          if (vocab.is_gap(tok)) {
            days += vocab.gap_days(tok);
            if (days > request.horizon_days) {
              reason = StopReason::Horizon;
              break;
            }
          }
          if (session->length() >= ctx) break;
          session->append(tok);
        }
        b.stop_reasons[i] = reason;
        b.per_future_cost[i] = cost_of_future(out, vocab, request.horizon_days);
      },
      request.threads);

  for (auto r : b.stop_reasons) {
    if (r != StopReason::TokenCap) ++b.n_futures_completed;
  }
  b.predicted_cost = compensated_sum(b.per_future_cost) / static_cast<double>(n);
  if (n > 1) {
    KahanSum sq;
    for (double c : b.per_future_cost) sq.add((c - b.predicted_cost) * (c - b.predicted_cost));
    b.cost_std_error = std::sqrt(sq.value() / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
  }
  for (const auto& pred : request.predicates) b.event_probs.push_back(event_probability(b, vocab, pred, request.bucketing));
  return b;
}

double cost_of_future(std::span<const TokenId> future, const Vocabulary& vocab, double horizon_days) {
  double days = 0.0;
  KahanSum total;
  for (TokenId t : future) {
    if (vocab.is_gap(t)) {
      days += vocab.gap_days(t);
    } else if (vocab.is_cost(t) && days <= horizon_days) {
      total.add(vocab.dequantize_cost(t));
    }
  }
  return total.value();
}

ProbabilityTable event_probability(const SimulationBundle& bundle, const Vocabulary& vocab,
                                   const std::string& predicate, Bucketing bucketing) {
  return event_probability(bundle, vocab, std::vector<std::string>{predicate}, predicate, bucketing);
}

ProbabilityTable event_probability(const SimulationBundle& bundle, const Vocabulary& vocab,
                                   const std::vector<std::string>& predicates, const std::string& label,
                                   Bucketing bucketing) {
  if (predicates.empty()) throw Error(ErrorCode::UnknownPredicate, "no predicate given");
  for (const auto& p : predicates) {
    if (!known_namespace(p)) throw Error(ErrorCode::UnknownPredicate, "predicate '" + p + "'");
  }
  ProbabilityTable table;
  table.predicate = label;
  table.bucketing = bucketing;
  const std::size_t nb = n_buckets(bundle.horizon_days, bucketing);
  std::vector<std::size_t> counts(nb, 0);
  std::size_t any = 0;
  for (const auto& f : bundle.futures) {
    const auto day = first_match_day(f, vocab, predicates, bundle.horizon_days);
    if (!day) continue;
    ++any;
    const auto k = std::min(nb - 1, static_cast<std::size_t>(*day / bucket_days(bucketing)));
    ++counts[k];
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, bundle.futures.size()));
  for (auto c : counts) table.per_bucket.push_back(static_cast<double>(c) / n);
  table.any_time = static_cast<double>(any) / n;
  return table;
}

seq::TokenSequence intervene(const seq::TokenSequence& prompt, const MedicalEvent& event, const Vocabulary& vocab) {
  seq::TokenSequence out = prompt;
  if (!out.tokens.empty() && out.tokens.back() == kEos) out.tokens.pop_back();
  const auto ids = vocab.encode_event(event, UnknownPolicy::Strict);
  out.tokens.insert(out.tokens.end(), ids.begin(), ids.end());
  return out;
}

std::string bundle_to_json(const SimulationBundle& bundle, const Vocabulary& vocab, bool verbose) {
  nlohmann::ordered_json j;
  j["predicted_cost"] = bundle.predicted_cost;
  j["cost_std_error"] = bundle.cost_std_error;
  j["n_futures"] = bundle.n_futures();
  j["n_futures_completed"] = bundle.n_futures_completed;
  j["horizon_days"] = bundle.horizon_days;
  j["seed"] = bundle.seed;
  j["prompt_length"] = bundle.prompt_length;
  auto rows = nlohmann::ordered_json::array();
  auto any = nlohmann::ordered_json::array();
  for (const auto& t : bundle.event_probs) {
    for (std::size_t k = 0; k < t.per_bucket.size(); ++k) {
      rows.push_back({{"predicate", t.predicate}, {"bucket", k}, {"p", t.per_bucket[k]}});
    }
    any.push_back({{"predicate", t.predicate}, {"bucketing", to_string(t.bucketing)}, {"p", t.any_time}});
  }
  j["event_probs"] = rows;
  j["event_any"] = any;
  if (verbose) {
    auto futures = nlohmann::ordered_json::array();
    for (const auto& f : bundle.futures) {
      auto surfaces = nlohmann::ordered_json::array();
      for (TokenId t : f) surfaces.push_back(vocab.surface(t));
      futures.push_back(surfaces);
    }
    j["futures"] = futures;
  }
  return j.dump();
}

}  // namespace lmm::mc
