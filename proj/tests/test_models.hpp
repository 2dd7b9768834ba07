// Hand-built sequence models with known next-token distributions. They plug
// into the Monte Carlo simulator in place of the transformer so sampled
// estimates can be compared with exact answers.
#ifndef LMM_TESTS_TEST_MODELS_HPP
#define LMM_TESTS_TEST_MODELS_HPP

#include <cmath>
#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <vector>

#include "lmm/montecarlo.hpp"
#include "lmm/synth.hpp"
#include "lmm/vocab.hpp"

namespace lmm::testing {

/// Next-token probabilities as a function of the full token history.
using NextFn = std::function<std::vector<double>(const std::vector<TokenId>& history)>;

class FnModel final : public mc::SequenceModel {
 public:
  FnModel(NextFn next, std::size_t vocab_size, std::size_t context_len = 256)
      : next_(std::move(next)), vocab_size_(vocab_size), context_len_(context_len) {}

  std::unique_ptr<mc::Session> start() const override { return std::make_unique<FnSession>(this); }
  std::size_t context_len() const override { return context_len_; }
  std::size_t vocab_size() const override { return vocab_size_; }

  std::vector<double> probs(const std::vector<TokenId>& history) const { return next_(history); }

 private:
  class FnSession final : public mc::Session {
   public:
    explicit FnSession(const FnModel* m) : model_(m) {}
    std::unique_ptr<mc::Session> clone() const override { return std::make_unique<FnSession>(*this); }
    void append(TokenId t) override {
      history_.push_back(t);
      const auto p = model_->probs(history_);
      logits_.resize(p.size());
      for (std::size_t i = 0; i < p.size(); ++i) {
        logits_[i] = p[i] > 0 ? std::log(p[i]) : -std::numeric_limits<double>::infinity();
      }
    }
    std::span<const double> logits() const override { return logits_; }
    std::size_t length() const override { return history_.size(); }

   private:
    const FnModel* model_;
    std::vector<TokenId> history_;
    std::vector<double> logits_;
  };

  NextFn next_;
  std::size_t vocab_size_;
  std::size_t context_len_;
};

inline TokenId last_of(const std::vector<TokenId>& h, const std::vector<TokenId>& among) {
  for (auto it = h.rbegin(); it != h.rend(); ++it) {
    for (TokenId t : among) {
      if (*it == t) return t;
    }
  }
  return -1;
}

// ---------------------------------------------------------------------------
// Two-state bigram chain: the next token depends only on the current one.
// After a diagnosis comes EOS or one of two gap tokens specific to that
// diagnosis's state, so the gap carries the state forward; after a gap comes
// the next diagnosis.

struct TwoStateChain {
  Vocabulary vocab = Vocabulary::build({{CodeSystem::ICD10CM, {"Z00", "I63"}}});
  TokenId healthy = vocab.id_of("DX:Z00");
  TokenId sick = vocab.id_of("DX:I63");
  TokenId healthy_short = vocab.id_of("GAP:D15_30");
  TokenId healthy_long = vocab.id_of("GAP:D31_90");
  TokenId sick_short = vocab.id_of("GAP:D4_7");
  TokenId sick_long = vocab.id_of("GAP:D8_14");
  double p_hs = 0.3;     // healthy -> sick
  double p_sh = 0.2;     // sick -> healthy
  double p_eos = 0.05;   // after a diagnosis
  double p_short = 0.6;  // short gap given a gap

  std::vector<double> next(const std::vector<TokenId>& h) const {
    std::vector<double> p(vocab.size(), 0.0);
    auto at = [&](TokenId t) -> double& { return p[static_cast<std::size_t>(t)]; };
    const TokenId last = h.back();
    if (last == healthy_short || last == healthy_long) {
      at(sick) = p_hs;
      at(healthy) = 1.0 - p_hs;
    } else if (last == sick_short || last == sick_long) {
      at(healthy) = p_sh;
      at(sick) = 1.0 - p_sh;
    } else {
      const bool is_sick = last == sick;
      at(kEos) = p_eos;
      at(is_sick ? sick_short : healthy_short) = (1.0 - p_eos) * p_short;
      at(is_sick ? sick_long : healthy_long) = (1.0 - p_eos) * (1.0 - p_short);
    }
    return p;
  }

  FnModel model() const {
    return FnModel([this](const std::vector<TokenId>& h) { return next(h); }, vocab.size());
  }

  /// Demographic prefix followed by one healthy diagnosis.
  seq::TokenSequence prompt() const {
    seq::TokenSequence s;
    s.tokens = {kBos, vocab.age_token(70), vocab.sex_token(Sex::F), healthy};
    return s;
  }
};

/// Exact distribution, by enumerating every token path the model can emit,
/// of the cumulative gap days at which `target` first appears, binned into
/// `n_buckets` buckets of `bucket_days` (the last bucket is open). Paths end
/// at EOS or at a gap that pushes cumulative days past the horizon, the same
/// stop rules the simulator uses.
inline void exact_first_hit(const FnModel& model, const Vocabulary& vocab, std::vector<TokenId>& history,
                            TokenId target, double horizon_days, double bucket_days, double prob, double days,
                            std::vector<double>& out) {
  const auto p = model.probs(history);
  for (std::size_t t = 0; t < p.size(); ++t) {
    if (p[t] == 0.0) continue;
    const auto tok = static_cast<TokenId>(t);
    if (tok == target) {
      const auto k = std::min(out.size() - 1, static_cast<std::size_t>(days / bucket_days));
      out[k] += prob * p[t];
      continue;
    }
    if (tok == kEos) continue;
    double d = days;
    if (vocab.is_gap(tok)) {
      d += vocab.gap_days(tok);
      if (d > horizon_days) continue;
    }
    history.push_back(tok);
    exact_first_hit(model, vocab, history, target, horizon_days, bucket_days, prob * p[t], d, out);
    history.pop_back();
  }
}

inline std::vector<double> exact_first_hit(const FnModel& model, const Vocabulary& vocab, std::vector<TokenId> history,
                                           TokenId target, double horizon_days, double bucket_days) {
  std::vector<double> out(static_cast<std::size_t>(std::max(1.0, std::ceil(horizon_days / bucket_days))), 0.0);
  exact_first_hit(model, vocab, history, target, horizon_days, bucket_days, 1.0, 0.0, out);
  return out;
}

// ---------------------------------------------------------------------------
// Generator mirror: a token-level model whose futures follow a GeneratorSpec's
// monthly chain exactly. Each emitting month is [GAP] DX CPT COST with one
// visit per live month; death ends the future with EOS. Requirements on the
// spec: every live state visits with probability 1, diagnoses are 3-character
// codes, costs are (near) deterministic at a bucket representative, no hazard
// shift and no background events.

struct GeneratorMirror {
  synth::GeneratorSpec spec;
  Vocabulary vocab;
  TokenId gap = 0;
  std::vector<TokenId> dx, cpt, cost;  // per state, -1 for terminal states

  /// Months are separated by GAP:D15_30; this horizon keeps exactly 12
  /// emitting months.
  double horizon_days() const { return vocab.gap_days(gap) * 11.5; }

  static GeneratorMirror make(const std::vector<std::string>& dx_codes, const std::vector<std::string>& cpt_codes,
                              const std::vector<std::size_t>& cost_buckets,
                              const std::vector<std::vector<double>>& transition, const std::vector<double>& init) {
    GeneratorMirror g;
    std::vector<std::string> live_dx, live_cpt;
    for (std::size_t i = 0; i < dx_codes.size(); ++i) {
      if (!dx_codes[i].empty()) {
        live_dx.push_back(dx_codes[i]);
        live_cpt.push_back(cpt_codes[i]);
      }
    }
    g.vocab = Vocabulary::build({{CodeSystem::ICD10CM, live_dx}, {CodeSystem::CPT4, live_cpt}});
    g.gap = g.vocab.id_of("GAP:D15_30");

    auto& spec = g.spec;
    spec.states.clear();
    for (std::size_t i = 0; i < dx_codes.size(); ++i) {
      synth::ConditionState s;
      s.name = dx_codes[i].empty() ? "deceased" : dx_codes[i];
      s.terminal = dx_codes[i].empty();
      s.visit_prob = s.terminal ? 0.0 : 1.0;
      s.visit.diagnosis = dx_codes[i];
      s.visit.encounter_code = cpt_codes[i];
      const TokenId c = g.vocab.id_of(cost_surface(cost_buckets[i]));
      s.visit.cost = synth::LogNormalCost::with_mean(s.terminal ? 1.0 : g.vocab.dequantize_cost(c), 1e-6);
      spec.states.push_back(s);
      g.dx.push_back(s.terminal ? -1 : g.vocab.id_of("DX:" + dx_codes[i]));
      g.cpt.push_back(s.terminal ? -1 : g.vocab.id_of("CPT:" + cpt_codes[i]));
      g.cost.push_back(s.terminal ? -1 : c);
    }
    spec.transition = transition;
    spec.init = {{0, init}};
    spec.hazard = {};
    spec.background.clear();
    spec.validate();
    return g;
  }

  std::vector<double> next(const std::vector<TokenId>& h) const {
    std::vector<double> p(vocab.size(), 0.0);
    const TokenId last = h.back();
    const std::size_t S = spec.states.size();
    auto state_of = [&](TokenId t, const std::vector<TokenId>& ids) -> std::optional<std::size_t> {
      for (std::size_t s = 0; s < S; ++s) {
        if (ids[s] == t) return s;
      }
      return std::nullopt;
    };
    auto emit_month = [&](const std::vector<double>& dist) {
      for (std::size_t s = 0; s < S; ++s) {
        if (spec.states[s].terminal) p[static_cast<std::size_t>(kEos)] += dist[s];
        else p[static_cast<std::size_t>(dx[s])] += dist[s];
      }
    };
    if (auto s = state_of(last, dx)) {
      p[static_cast<std::size_t>(cpt[*s])] = 1.0;
    } else if (auto s2 = state_of(last, cpt)) {
      p[static_cast<std::size_t>(cost[*s2])] = 1.0;
    } else if (state_of(last, cost)) {
      p[static_cast<std::size_t>(gap)] = 1.0;
    } else if (last == gap) {
      std::vector<TokenId> live;
      for (auto t : dx) {
        if (t >= 0) live.push_back(t);
      }
      emit_month(spec.transition[*state_of(last_of(h, live), dx)]);
    } else {
      // End of the demographic prompt: month 1 follows one transition from init.
      std::vector<double> m1(S, 0.0);
      for (std::size_t i = 0; i < S; ++i) {
        for (std::size_t j = 0; j < S; ++j) m1[j] += spec.init[0].probs[i] * spec.transition[i][j];
      }
      emit_month(m1);
    }
    return p;
  }

  FnModel model() const {
    return FnModel([this](const std::vector<TokenId>& h) { return next(h); }, vocab.size());
  }

  seq::TokenSequence prompt(int age = 50, Sex sex = Sex::F) const {
    seq::TokenSequence s;
    s.tokens = {kBos, vocab.age_token(age), vocab.sex_token(sex)};
    return s;
  }
};

/// Three states (healthy, sick, deceased) with distinct cost buckets.
inline GeneratorMirror small_mirror() {
  return GeneratorMirror::make({"Z00", "E11", ""}, {"99213", "99214", "99213"}, {5, 8, 0},
                               {{0.90, 0.08, 0.02}, {0.05, 0.90, 0.05}, {0.0, 0.0, 1.0}}, {0.7, 0.3, 0.0});
}

}  // namespace lmm::testing

#endif  // LMM_TESTS_TEST_MODELS_HPP
