// Acceptance run: one PASS/FAIL line per criterion on stdout, details on
// stderr. Exit status is non-zero when any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "cohort_oracles.hpp"
#include "httplib.h"
#include "json.hpp"
#include "lmm/cohort_eval.hpp"
#include "lmm/metrics.hpp"
#include "lmm/model.hpp"
#include "lmm/montecarlo.hpp"
#include "lmm/sequencer.hpp"
#include "lmm/service.hpp"
#include "lmm/synth.hpp"
#include "lmm/vocab.hpp"
#include "metric_oracles.hpp"
#include "test_models.hpp"

using namespace lmm;

namespace {

// Tolerances and budgets.
constexpr double kGradEps = 1e-4;
constexpr double kGradTol = 1e-4;
constexpr double kGradFloor = 1e-6;  // denominator floor for near-zero gradients
constexpr std::size_t kGradSamplesPerRole = 200;
constexpr double kGradSeconds = 60;

constexpr double kRowSumTol = 1e-9;

constexpr double kTvTol = 0.05;
constexpr std::size_t kTvMinCount = 100;
constexpr std::size_t kMarkovSequences = 50000;
constexpr double kLearningSeconds = 600;

constexpr int kMcRuns = 100;
constexpr int kMcFutures = 4096;
constexpr int kMcRunsRequired = 99;
constexpr double kMcSigmas = 3;
constexpr double kCostStdErrors = 2;

constexpr double kFixtureTol = 1e-12;
constexpr int kOracleInstances = 1000;

constexpr double kMacroAurocMin = 0.75;
constexpr double kNoSignalBand = 0.05;
constexpr double kEndToEndSeconds = 1200;

constexpr int kTokenizerEvents = 100000;
constexpr std::size_t kWorkedExampleMax = 10;
constexpr std::size_t kWorkedExampleText = 25;

constexpr std::size_t kCohortPatients = 10000;
constexpr std::size_t kMappedRows = 19;

struct Outcome {
  bool pass = false;
  std::string summary;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double x, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << x;
  return os.str();
}

void note(const std::string& line) { std::cerr << "  " << line << '\n'; }

std::vector<double> softmax_row(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] - m);
  for (auto& x : p) x /= z;
  return p;
}

model::ModelParameters perturbed_params(const model::ModelConfig& c, std::uint64_t seed, double scale) {
  auto p = model::init_params(c, seed);
  Rng rng(seed + 1);
  for (const auto& t : p.layout) {
    const bool scale_tensor = t.role == model::TensorRole::NormScale;
    for (auto& x : p.view(t)) x = (scale_tensor ? 1.0 : 0.0) + scale * rng.normal();
  }
  return p;
}

// ---------------------------------------------------------------------------

Outcome gradient_check() {
  const auto t0 = Clock::now();
  model::ModelConfig c;
  c.vocab_size = 24;
  c.context_len = 12;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  auto p = perturbed_params(c, 7, 0.3);
  const std::vector<model::Example> batch{
      model::make_example(std::vector<TokenId>{1, 5, 9, 0, 14, 3, 22, 2}),
      model::make_example(std::vector<TokenId>{1, 7, 7, 12, 19, 23, 4, 6, 11, 2}),
      model::make_example(std::vector<TokenId>{1, 20, 8, 2})};
  const auto lg = model::loss_and_grads(p, batch);

  std::map<model::TensorRole, std::vector<std::size_t>> coords;
  for (const auto& t : p.layout) {
    for (std::size_t k = 0; k < t.size(); ++k) coords[t.role].push_back(t.offset + k);
  }
  Rng rng(99);
  double worst = 0;
  std::size_t checked = 0;
  for (auto& [role, idx] : coords) {
    // partial Fisher-Yates: the first n entries are a uniform sample without replacement
    const std::size_t n = std::min(kGradSamplesPerRole, idx.size());
    for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    double role_worst = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = idx[i];
      const double keep = p.data[k];
      p.data[k] = keep + kGradEps;
      const double up = model::mean_loss(p, batch, 1);
      p.data[k] = keep - kGradEps;
      const double down = model::mean_loss(p, batch, 1);
      p.data[k] = keep;
      const double numeric = (up - down) / (2 * kGradEps);
      const double analytic = lg.grads[k];
      const double err =
          std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), kGradFloor});
      role_worst = std::max(role_worst, err);
    }
    note(std::string(model::to_string(role)) + ": " + std::to_string(n) + " coordinates, max relative error " +
         fmt(role_worst, 3));
    worst = std::max(worst, role_worst);
    checked += n;
  }
  const double secs = seconds_since(t0);
  return {worst < kGradTol && secs < kGradSeconds,
          "gradient check: max relative error " + fmt(worst, 3) + " (tol " + fmt(kGradTol) + ") over " +
              std::to_string(checked) + " coordinates, eps " + fmt(kGradEps) + ", " + fmt(secs, 3) + " s (limit " +
              fmt(kGradSeconds) + " s)"};
}

// ---------------------------------------------------------------------------

Outcome causality() {
  model::ModelConfig c;
  c.vocab_size = 30;
  c.context_len = 24;
  c.d_model = 16;
  c.n_heads = 4;
  c.n_layers = 2;
  const auto p = perturbed_params(c, 3, 0.5);
  const std::size_t V = 30, T = 24;
  Rng rng(5);
  std::vector<TokenId> tokens(T);
  for (auto& t : tokens) t = static_cast<TokenId>(rng.below(V));

  model::ForwardTrace trace;
  const auto base = model::forward(p, tokens, &trace);
  std::size_t changed_rows = 0;
  for (std::size_t pos = 0; pos < T; ++pos) {
    auto alt = tokens;
    alt[pos] = static_cast<TokenId>((alt[pos] + 1 + rng.below(V - 1)) % V);
    const auto out = model::forward(p, alt);
    for (std::size_t r = 0; r < pos; ++r) {
      for (std::size_t k = 0; k < V; ++k) changed_rows += out[r * V + k] != base[r * V + k];
    }
  }

  double attn_dev = 0, masked_mass = 0;
  for (const auto& layer : trace.attention) {
    for (const auto& head : layer) {
      for (std::size_t r = 0; r < T; ++r) {
        double s = 0;
        for (std::size_t k = 0; k < T; ++k) {
          s += head[r * T + k];
          if (k > r) masked_mass = std::max(masked_mass, std::abs(head[r * T + k]));
        }
        attn_dev = std::max(attn_dev, std::abs(s - 1.0));
      }
    }
  }
  double soft_dev = 0;
  for (std::size_t r = 0; r < T; ++r) {
    const auto q = softmax_row(std::span<const double>(base).subspan(r * V, V));
    double s = 0;
    for (double x : q) s += x;
    soft_dev = std::max(soft_dev, std::abs(s - 1.0));
  }
  const bool pass = changed_rows == 0 && masked_mass == 0 && attn_dev <= kRowSumTol && soft_dev <= kRowSumTol;
  return {pass, "causality: " + std::to_string(changed_rows) + " past logits changed by future edits, " +
                    "max attention to future " + fmt(masked_mass) + ", attention row sum error " +
                    fmt(attn_dev, 3) + ", softmax row sum error " + fmt(soft_dev, 3) + " (tol " + fmt(kRowSumTol) +
                    ")"};
}

// ---------------------------------------------------------------------------

Outcome learning_sanity() {
  const auto t0 = Clock::now();
  constexpr std::size_t V = 10;
  constexpr TokenId kFirst = 3;
  constexpr double kEosProb = 0.08;
  // Generator rows: row[BOS] is the initial distribution, row[i] for content i.
  Rng grng(2718);
  std::vector<std::vector<double>> rows(V, std::vector<double>(V, 0.0));
  auto fill_row = [&](std::vector<double>& row, double eos) {
    double z = 0;
    for (std::size_t j = kFirst; j < V; ++j) z += row[j] = std::exp(1.2 * grng.normal());
    for (std::size_t j = kFirst; j < V; ++j) row[j] *= (1 - eos) / z;
    row[kEos] = eos;
  };
  fill_row(rows[kBos], 0.0);
  for (std::size_t i = kFirst; i < V; ++i) fill_row(rows[i], kEosProb);

  model::ModelConfig c;
  c.vocab_size = V;
  c.context_len = 32;
  c.d_model = 32;
  c.n_heads = 2;
  c.n_layers = 1;
  // constant-rate AdamW: a small rate and a large batch keep the final noise floor low
  c.batch_size = 64;
  c.n_steps = 4000;
  c.eval_every = 500;
  c.learning_rate = 1e-3;
  c.seed = 4;

  std::vector<model::TrainSequence> corpus(kMarkovSequences);
  for (std::size_t n = 0; n < kMarkovSequences; ++n) {
    auto rng = Rng::stream(31, n);
    auto& s = corpus[n];
    s.patient_id = "S" + std::to_string(n);
    s.tokens = {kBos};
    while (s.tokens.back() != kEos && s.tokens.size() < static_cast<std::size_t>(c.context_len) + 1) {
      const auto& row = rows[static_cast<std::size_t>(s.tokens.back())];
      double u = rng.uniform(), acc = 0;
      std::size_t j = 0;
      for (; j + 1 < V; ++j) {
        acc += row[j];
        if (u < acc) break;
      }
      s.tokens.push_back(static_cast<TokenId>(j));
    }
  }

  const auto result = model::train(corpus, c);
  note("markov: best validation loss " + fmt(result.best_val_loss) + " at step " + std::to_string(result.best_step));

  std::vector<std::size_t> seen(V, 0);
  std::vector<double> tv_sum(V, 0.0);
  std::vector<std::size_t> tv_n(V, 0);
  for (const auto& s : corpus) {
    const auto split = model::assign_split(s.patient_id, c.seed);
    if (split == model::Split::Train) {
      for (std::size_t t = 0; t + 1 < s.tokens.size(); ++t) ++seen[static_cast<std::size_t>(s.tokens[t])];
    } else if (split == model::Split::Test) {
      const std::vector<TokenId> in(s.tokens.begin(), s.tokens.end() - 1);
      const auto logits = model::forward(result.params, in);
      for (std::size_t t = 0; t < in.size(); ++t) {
        const auto ctx = static_cast<std::size_t>(in[t]);
        const auto q = softmax_row(std::span<const double>(logits).subspan(t * V, V));
        double tv = 0;
        for (std::size_t j = 0; j < V; ++j) tv += std::abs(q[j] - rows[ctx][j]);
        tv_sum[ctx] += tv / 2;
        ++tv_n[ctx];
      }
    }
  }
  double worst = 0;
  std::size_t contexts = 0;
  for (std::size_t ctx = 0; ctx < V; ++ctx) {
    if (seen[ctx] < kTvMinCount || tv_n[ctx] == 0) continue;
    const double tv = tv_sum[ctx] / static_cast<double>(tv_n[ctx]);
    note("context " + std::to_string(ctx) + ": seen " + std::to_string(seen[ctx]) + ", mean TV " + fmt(tv));
    worst = std::max(worst, tv);
    ++contexts;
  }
  const double secs = seconds_since(t0);
  return {contexts > 0 && worst <= kTvTol && secs < kLearningSeconds,
          "learning sanity: max mean TV " + fmt(worst) + " (tol " + fmt(kTvTol) + ") over " +
              std::to_string(contexts) + " contexts seen >= " + std::to_string(kTvMinCount) + " times, " +
              fmt(secs, 3) + " s (limit " + fmt(kLearningSeconds) + " s)"};
}

// ---------------------------------------------------------------------------

Outcome monte_carlo_fidelity() {
  const testing::TwoStateChain chain;
  const auto model = chain.model();
  const double horizon = 150;
  const auto exact = testing::exact_first_hit(model, chain.vocab, chain.prompt().tokens, chain.sick, horizon,
                                              mc::bucket_days(mc::Bucketing::Monthly));
  double p_any = 0;
  for (double x : exact) p_any += x;

  mc::SimulationRequest r;
  r.prompt = chain.prompt();
  r.n_futures = kMcFutures;
  r.horizon_days = horizon;
  r.predicates = {"DX:I63"};
  const double n = kMcFutures;
  const double sd_any = std::sqrt(p_any * (1 - p_any) / n);
  int runs_ok = 0;
  std::size_t cells = 0, cells_ok = 0;
  for (int run = 0; run < kMcRuns; ++run) {
    r.base_seed = 50000 + static_cast<std::uint64_t>(run);
    const auto b = mc::simulate_futures(model, chain.vocab, r);
    const auto& t = b.event_probs.at(0);
    runs_ok += std::abs(t.any_time - p_any) <= kMcSigmas * sd_any;
    for (std::size_t k = 0; k < exact.size() && k < t.per_bucket.size(); ++k) {
      ++cells;
      cells_ok += std::abs(t.per_bucket[k] - exact[k]) <= kMcSigmas * std::sqrt(exact[k] * (1 - exact[k]) / n) + 1e-12;
    }
  }
  note("chain: exact any-time probability " + fmt(p_any, 6) + "; per-bucket cells within " + fmt(kMcSigmas) +
       " sigma: " + std::to_string(cells_ok) + "/" + std::to_string(cells));

  const auto mirror = testing::small_mirror();
  const auto mirror_model = mirror.model();
  mc::SimulationRequest cr;
  cr.prompt = mirror.prompt(50, Sex::F);
  cr.n_futures = 16384;
  cr.horizon_days = mirror.horizon_days();
  cr.base_seed = 2024;
  const auto cb = mc::simulate_futures(mirror_model, mirror.vocab, cr);
  const double dp = synth::expected_annual_cost(mirror.spec, Sex::F, 50);
  const double z = std::abs(cb.predicted_cost - dp) / cb.cost_std_error;
  note("cost: predicted " + fmt(cb.predicted_cost, 8) + " vs expected " + fmt(dp, 8) + ", standard error " +
       fmt(cb.cost_std_error));

  return {runs_ok >= kMcRunsRequired && z <= kCostStdErrors,
          "monte carlo fidelity: " + std::to_string(runs_ok) + "/" + std::to_string(kMcRuns) +
              " runs within " + fmt(kMcSigmas) + " sigma of the exact probability (need " +
              std::to_string(kMcRunsRequired) + "); predicted cost " + fmt(z, 3) + " standard errors from the " +
              "generator expectation (limit " + fmt(kCostStdErrors) + ")"};
}

// ---------------------------------------------------------------------------

Outcome metric_oracles() {
  Rng rng(123);
  int mismatches = 0;
  for (int i = 0; i < kOracleInstances; ++i) {
    const auto s = testing::random_scored(rng);
    mismatches += metrics::auroc(s) != testing::brute_auroc(s);
    mismatches += metrics::auprc(s) != testing::brute_auprc(s);
  }

  using metrics::EvalPair;
  double fixture_err = 0;
  auto check = [&](double got, double want) { fixture_err = std::max(fixture_err, std::abs(got - want)); };
  const std::vector<EvalPair> a{{100, 110}, {200, 190}, {300, 330}, {400, 370}};
  check(metrics::r_squared(a), 0.96);
  check(metrics::mae(a), 20.0);
  check(metrics::nmae(a), 8.0);
  const std::vector<EvalPair> b{{0, 1}, {0, 2}, {10, 3}};
  check(metrics::r_squared(b), 0.19);
  check(metrics::mae(b), 10.0 / 3.0);
  check(metrics::nmae(b), 100.0);

  Rng crng(31);
  std::vector<EvalPair> pairs;
  for (int i = 0; i < 5000; ++i) {
    double y_hat = std::exp(crng.normal() * 2 + 9);
    if (i % 97 == 0) y_hat = 250000.0;
    pairs.push_back({std::exp(crng.normal() * 2 + 8), y_hat, static_cast<int>(crng.below(90)), Sex::F});
  }
  const auto censored = metrics::censor(pairs, 250000.0);
  std::vector<EvalPair> kept;
  for (const auto& p : pairs) {
    if (!(p.y_hat > 250000.0)) kept.push_back(p);
  }
  bool censor_ok = censored.kept.size() == kept.size() && censored.removed == pairs.size() - kept.size();
  for (std::size_t i = 0; censor_ok && i < kept.size(); ++i) {
    censor_ok = censored.kept[i].y == kept[i].y && censored.kept[i].y_hat == kept[i].y_hat;
  }
  censor_ok = censor_ok && metrics::nmae(censored.kept) == metrics::nmae(kept);

  return {mismatches == 0 && fixture_err <= kFixtureTol && censor_ok,
          "metric oracles: " + std::to_string(mismatches) + " auroc/auprc mismatches over " +
              std::to_string(kOracleInstances) + " random instances, fixture error " + fmt(fixture_err, 3) +
              " (tol " + fmt(kFixtureTol) + "), censoring " + (censor_ok ? "matches" : "differs from") +
              " per-pair recomputation"};
}

// ---------------------------------------------------------------------------

Outcome end_to_end() {
  const auto t0 = Clock::now();
  const auto spec = synth::default_spec();
  const auto train_cohort = synth::generate_cohort(spec, 5000, 11, "P");
  const auto eval_cohort = synth::generate_cohort(spec, 1000, 12, "E");
  const auto vocab = Vocabulary::build(synth::collect_codes(train_cohort.timelines));

  model::ModelConfig c;
  c.vocab_size = static_cast<int>(vocab.size());
  c.context_len = 256;
  c.d_model = 32;
  c.n_heads = 2;
  c.n_layers = 2;
  c.n_steps = 3000;
  c.batch_size = 16;
  c.eval_every = 500;
  c.learning_rate = 3e-3;
  c.seed = 1;
  std::vector<model::TrainSequence> corpus;
  seq::LinearizeOptions lin;
  lin.policy = UnknownPolicy::Lenient;
  for (const auto& tl : train_cohort.timelines) {
    auto s = seq::linearize(tl, vocab, lin);
    if (s.tokens.size() > static_cast<std::size_t>(c.context_len) + 1) s = seq::truncate(s, static_cast<std::size_t>(c.context_len) + 1, vocab);
    corpus.push_back({tl.patient_id, std::move(s.tokens)});
  }
  const auto trained = model::train(corpus, c);
  note("end to end: best validation loss " + fmt(trained.best_val_loss) + " at step " +
       std::to_string(trained.best_step) + " (" + fmt(seconds_since(t0), 3) + " s)");
  const mc::TransformerModel model(trained.params);

  cohort::SimulationDefaults sim;
  sim.n_futures = 64;
  sim.seed = 3;
  cohort::CostEvalOptions copt;
  copt.sim = sim;
  const auto cost = cohort::run_cost_eval(cohort::monte_carlo_cost_predictor(model, vocab, sim), vocab,
                                          eval_cohort.timelines, copt);
  note("cost: " + std::to_string(cost.predictions.size()) + " patients, NMAE " + fmt(cost.lmm.nmae) +
       " vs constant mean " + fmt(cost.constant_mean.nmae) + ", R2 " + fmt(cost.lmm.r_squared));

  const auto map = cohort::ConditionMap::packaged();
  cohort::ConditionEvalOptions oopt;
  oopt.sim = sim;
  const auto window = cohort::target_window(oopt.target_year, oopt.window_months);
  const auto cond = cohort::run_condition_eval(
      cohort::monte_carlo_condition_scorer(model, vocab, map, sim, window.days()), vocab, eval_cohort.timelines, map,
      oopt);
  std::optional<double> fracture;
  for (const auto& row : cond.rows) {
    if (row.auroc) note(row.ccw_name + ": positives " + std::to_string(row.n_positive) + ", AUROC " + fmt(*row.auroc));
    if (row.ccw_name == map.find("Hip pelvic fracture").ccw_name) fracture = row.auroc;
  }
  // Reported alongside: in the generator, stroke patients carry Parkinson's
  // diagnoses, so appending a stroke should raise P(G20) within a year.
  {
    mc::SimulationRequest ir;
    ir.prompt.tokens = {kBos, vocab.age_token(70), vocab.sex_token(Sex::F)};
    ir.n_futures = 4096;
    ir.base_seed = 9;
    ir.predicates = {"DX:G20"};
    const auto base = mc::simulate_futures(model, vocab, ir);
    ir.prompt = mc::intervene(ir.prompt, {make_date(2017, 12, 31), CodeSystem::ICD10CM, "I63.9", {}}, vocab);
    const auto stroke = mc::simulate_futures(model, vocab, ir);
    const double p0 = base.event_probs[0].any_time, p1 = stroke.event_probs[0].any_time;
    const double se = std::sqrt(p0 * (1 - p0) / 4096 + p1 * (1 - p1) / 4096);
    note("intervention: P(G20 within 365 days) for a 70-year-old woman " + fmt(p0) + " -> " + fmt(p1) +
         " after a stroke; delta " + fmt(p1 - p0) + " = " + fmt((p1 - p0) / se, 3) + " standard errors");
  }
  const double macro = cond.macro_auroc.value_or(0.0);
  const double secs = seconds_since(t0);
  const bool pass = cost.lmm.nmae < cost.constant_mean.nmae && macro > kMacroAurocMin && fracture &&
                    std::abs(*fracture - 0.5) <= kNoSignalBand && secs < kEndToEndSeconds;
  return {pass, "end to end: NMAE " + fmt(cost.lmm.nmae) + " vs constant mean " + fmt(cost.constant_mean.nmae) +
                    ", mapped macro AUROC " + fmt(macro) + " over " + std::to_string(cond.macro_count) +
                    " conditions (min " + fmt(kMacroAurocMin) + "), no-signal hip pelvic fracture AUROC " +
                    (fracture ? fmt(*fracture) : std::string("n/a")) + " (0.5 +/- " + fmt(kNoSignalBand) + "), " +
                    fmt(secs, 3) + " s (limit " + fmt(kEndToEndSeconds) + " s)"};
}

// ---------------------------------------------------------------------------

// Reference gap buckets: D0, D1_3, D4_7, D8_14, D15_30, D31_90, D91_365, D365P.
std::string gap_oracle(long days) {
  if (days == 0) return "GAP:D0";
  if (days <= 3) return "GAP:D1_3";
  if (days <= 7) return "GAP:D4_7";
  if (days <= 14) return "GAP:D8_14";
  if (days <= 30) return "GAP:D15_30";
  if (days <= 90) return "GAP:D31_90";
  if (days <= 365) return "GAP:D91_365";
  return "GAP:D365P";
}

Outcome tokenizer() {
  Rng rng(77);
  auto digits = [&](int n) {
    std::string s;
    for (int i = 0; i < n; ++i) s.push_back(static_cast<char>('0' + rng.below(10)));
    return s;
  };
  auto letter = [&] { return static_cast<char>('A' + rng.below(26)); };
  std::vector<std::pair<CodeSystem, std::string>> pool;
  std::map<CodeSystem, std::set<std::string>> lists;
  auto add = [&](CodeSystem sys, std::string code) {
    if (lists[sys].insert(code).second) pool.emplace_back(sys, code);
  };
  for (int i = 0; i < 400; ++i) {
    std::string icd = std::string(1, letter()) + digits(2);
    const int ext = static_cast<int>(rng.below(4));
    if (ext > 0) icd += "." + digits(ext);
    add(CodeSystem::ICD10CM, icd);
  }
  for (int i = 0; i < 60; ++i) add(CodeSystem::CPT4, digits(5));
  for (int i = 0; i < 30; ++i) add(CodeSystem::HCPCS, std::string(1, letter()) + digits(4));
  for (int i = 0; i < 80; ++i) add(CodeSystem::NDC, digits(11));
  for (int i = 0; i < 20; ++i) add(CodeSystem::ICD10PCS, digits(3) + std::string(1, letter()) + digits(3));
  for (int i = 0; i < 10; ++i) add(CodeSystem::PLACE_OF_SERVICE, digits(2));
  CodeLists code_lists;
  for (const auto& [sys, set] : lists) code_lists[sys] = {set.begin(), set.end()};
  const auto v = Vocabulary::build(code_lists);

  // Events are drawn as timelines so gap tokens are exercised too.
  std::size_t events = 0, bad_event = 0, bad_len = 0, bad_gap = 0, bad_day = 0;
  while (events < static_cast<std::size_t>(kTokenizerEvents)) {
    synth::PatientTimeline tl;
    tl.patient_id = "T";
    tl.birth_year = 1930 + static_cast<int>(rng.below(80));
    tl.sex = rng.bernoulli(0.5) ? Sex::F : Sex::M;
    Date d = make_date(2015, 1, 1) + std::chrono::days{rng.below(400)};
    const std::size_t n = std::min<std::size_t>(1 + rng.below(60), kTokenizerEvents - events);
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0 && rng.bernoulli(0.6)) d += std::chrono::days{rng.below(rng.bernoulli(0.1) ? 900 : 45)};
      const auto& [sys, code] = pool[rng.below(pool.size())];
      MedicalEvent e{d, sys, code, {}};
      if (sys != CodeSystem::ICD10CM && rng.bernoulli(0.7)) e.paid = std::exp(rng.uniform() * 16.0) - 1.0;
      const auto ids = v.encode_event(e);
      bad_len += ids.empty() || ids.size() > 4;
      const auto back = v.decode_event(ids, e.date);
      const double want_paid = e.paid ? v.dequantize_cost(v.quantize_cost(*e.paid)) : -1;
      bad_event += !(back.system == e.system && back.code == e.code && back.date == e.date &&
                     back.paid.value_or(-1) == want_paid);
      tl.events.push_back(e);
    }
    events += n;

    const auto s = seq::linearize(tl, v);
    const auto parsed = seq::parse_sequence(s, v);
    std::vector<std::vector<MedicalEvent>> days;
    for (std::size_t i = 0; i < tl.events.size(); ++i) {
      if (i == 0 || tl.events[i].date != tl.events[i - 1].date) days.emplace_back();
      days.back().push_back(tl.events[i]);
    }
    if (parsed.days.size() != days.size()) {
      ++bad_day;
      continue;
    }
    for (std::size_t k = 0; k < days.size(); ++k) {
      if (k > 0) {
        const long gap = (days[k][0].date - days[k - 1][0].date).count();
        bad_gap += !parsed.days[k].gap || v.surface(*parsed.days[k].gap) != gap_oracle(gap);
      }
      std::multiset<std::tuple<int, std::string, double>> want, got;
      for (const auto& e : days[k]) {
        want.insert({static_cast<int>(e.system), e.code, e.paid ? v.dequantize_cost(v.quantize_cost(*e.paid)) : -1.0});
      }
      for (const auto& e : parsed.days[k].events) got.insert({static_cast<int>(e.system), e.code, e.paid.value_or(-1.0)});
      bad_day += want != got;
    }
  }

  // Worked example: a 47-year-old woman with a breast cancer diagnosis and a
  // $12 prescription fill.
  const auto ex = Vocabulary::build({{CodeSystem::ICD10CM, {"C50.919"}}, {CodeSystem::NDC, {"00078043815"}}});
  const Date d = make_date(2017, 5, 1);
  std::size_t ex_tokens = 0;
  for (const auto& e : std::vector<MedicalEvent>{{d, CodeSystem::DEMOGRAPHIC, "AGE_47", {}},
                                                 {d, CodeSystem::DEMOGRAPHIC, "SEX_F", {}},
                                                 {d, CodeSystem::ICD10CM, "C50.919", {}},
                                                 {d, CodeSystem::NDC, "00078043815", 12.0}}) {
    ex_tokens += ex.encode_event(e).size();
  }
  note("tokenizer: vocabulary of " + std::to_string(v.size()) + " tokens; worked example " +
       std::to_string(ex_tokens) + " tokens");
  const bool pass = bad_event == 0 && bad_len == 0 && bad_gap == 0 && bad_day == 0 && ex_tokens <= kWorkedExampleMax;
  return {pass, "tokenizer: " + std::to_string(events) + " random events, " + std::to_string(bad_event) +
                    " round-trip mismatches, " + std::to_string(bad_len) + " outside 1-4 tokens, " +
                    std::to_string(bad_gap) + " gap bucket errors, " + std::to_string(bad_day) +
                    " day mismatches; worked example " + std::to_string(ex_tokens) + " tokens (max " +
                    std::to_string(kWorkedExampleMax) + ", text needs " + std::to_string(kWorkedExampleText) + ")"};
}

// ---------------------------------------------------------------------------

Outcome cohort_checks() {
  auto spec = synth::default_spec();
  spec.full_enrollment_prob = 0.8;
  spec.rx_coverage_prob = 0.85;
  spec.capitation_prob = 0.1;
  auto timelines = synth::generate_cohort(spec, kCohortPatients, 21).timelines;
  // a few records without enrollment data
  for (std::size_t i = 0; i < timelines.size(); i += 997) timelines[i].months_enrolled.clear();
  const cohort::SoaCohortCriteria criteria;
  const auto r = cohort::soa_filter(timelines, criteria);

  std::size_t mismatches = 0, inc = 0, ex = 0;
  for (const auto& tl : timelines) {
    const auto want = testing::recheck(tl, criteria);
    if (!want) {
      mismatches += inc >= r.included.size() || r.included[inc].patient_id != tl.patient_id;
      ++inc;
    } else {
      mismatches += ex >= r.report.excluded.size() || r.report.excluded[ex].patient_id != tl.patient_id ||
                    r.report.excluded[ex].reason != *want;
      ++ex;
    }
  }
  mismatches += inc != r.included.size() || ex != r.report.excluded.size();
  note("cohort: " + std::to_string(r.report.included) + " included; excluded no rx " + std::to_string(r.report.no_rx) +
       ", capitation " + std::to_string(r.report.capitation) + ", enrollment " + std::to_string(r.report.enrollment) +
       ", missing enrollment " + std::to_string(r.report.missing_enrollment));

  const auto map = cohort::ConditionMap::packaged();
  const bool spot = cohort::map_condition(map, "Hyperlipidemia") == "Dyslipidemia" &&
                    cohort::map_condition(map, "Hip pelvic fracture") == cohort::kNotMapped;
  return {mismatches == 0 && map.mapped_count() == kMappedRows && spot,
          "cohort: " + std::to_string(mismatches) + " filter disagreements with the recheck over " +
              std::to_string(timelines.size()) + " patients; packaged map has " + std::to_string(map.mapped_count()) +
              " mapped rows of " + std::to_string(map.rows().size()) + " (need " + std::to_string(kMappedRows) +
              "); spot checks " + (spot ? "pass" : "fail")};
}

// ---------------------------------------------------------------------------

Outcome determinism() {
  std::vector<std::string> differing;
  auto same = [&](const std::string& stage, const std::string& a, const std::string& b) {
    if (a != b || a.empty()) differing.push_back(stage);
  };
  const auto spec = synth::default_spec();

  auto generate = [&](unsigned threads) {
    return synth::generate_cohort(spec, 400, 8, "D", threads).timelines;
  };
  const auto timelines = generate(1);
  same("generate", synth::serialize_claims(timelines, synth::ClaimsFormat::CSV_V1),
       synth::serialize_claims(generate(0), synth::ClaimsFormat::CSV_V1));

  const auto vocab = Vocabulary::build(synth::collect_codes(timelines));
  std::vector<model::TrainSequence> corpus;
  for (const auto& tl : timelines) {
    auto s = seq::linearize(tl, vocab, {.policy = UnknownPolicy::Lenient});
    if (s.tokens.size() > 65) s = seq::truncate(s, 65, vocab);
    corpus.push_back({tl.patient_id, std::move(s.tokens)});
  }
  auto train = [&](unsigned threads) {
    model::ModelConfig c;
    c.vocab_size = static_cast<int>(vocab.size());
    c.context_len = 64;
    c.d_model = 16;
    c.n_heads = 2;
    c.n_layers = 1;
    c.n_steps = 40;
    c.batch_size = 8;
    c.eval_every = 20;
    c.seed = 6;
    c.threads = threads;
    return model::train(corpus, c);
  };
  const auto t1 = train(1), t2 = train(0);
  same("train", model::serialize_checkpoint(t1.params) + model::history_csv(t1.history),
       model::serialize_checkpoint(t2.params) + model::history_csv(t2.history));

  const mc::TransformerModel model(t1.params);
  mc::SimulationRequest req;
  req.prompt = seq::split_at(timelines[0], make_date(2017, 12, 31), vocab, UnknownPolicy::Lenient).prompt;
  req.n_futures = 64;
  req.base_seed = 17;
  req.predicates = {"DX:I10", "DX:E11"};
  auto simulate = [&](unsigned threads) {
    auto r = req;
    r.threads = threads;
    return mc::bundle_to_json(mc::simulate_futures(model, vocab, r), vocab, true);
  };
  same("simulate", simulate(1), simulate(0));

  cohort::SimulationDefaults sim;
  sim.n_futures = 8;
  sim.seed = 2;
  auto evaluate = [&](unsigned threads) {
    auto s = sim;
    s.threads = threads;
    cohort::CostEvalOptions copt;
    copt.sim = s;
    const auto cost = cohort::run_cost_eval(cohort::monte_carlo_cost_predictor(model, vocab, s), vocab, timelines, copt);
    const auto map = cohort::ConditionMap::packaged();
    cohort::ConditionEvalOptions oopt;
    oopt.sim = s;
    const auto cond = cohort::run_condition_eval(
        cohort::monte_carlo_condition_scorer(model, vocab, map, s, cohort::target_window(2018).days()), vocab,
        timelines, map, oopt);
    return cohort::cost_report_json(cost) + cohort::predictions_csv(cost.predictions) +
           cohort::condition_report_json(cond) + cohort::condition_rows_csv(cond);
  };
  same("evaluate", evaluate(1), evaluate(0));

  auto serve = [&](unsigned threads) {
    service::ServiceConfig cfg;
    cfg.threads = threads;
    const service::SimulationService svc(t1.params, vocab, cfg);
    service::HttpServer server(svc);
    const int port = server.start("127.0.0.1", 0);
    httplib::Client client("127.0.0.1", port);
    client.set_read_timeout(120, 0);
    nlohmann::json tokens = nlohmann::json::array();
    for (auto id : req.prompt.tokens) tokens.push_back(vocab.surface(id));
    const nlohmann::json sim_body{{"history", tokens}, {"seed", 5}, {"n_futures", 32}, {"verbose", true}};
    const nlohmann::json iv_body{{"history", tokens},
                                 {"intervention", {{"system", "ICD10CM"}, {"code", "I10"}}},
                                 {"simulate", {{"seed", 5}, {"n_futures", 32}}}};
    std::string out;
    for (const auto& [path, body] : {std::pair{"/v1/simulate", sim_body}, std::pair{"/v1/intervene", iv_body}}) {
      auto res = client.Post(path, body.dump(), "application/json");
      out += res && res->status == 200 ? res->body : std::string("request failed");
    }
    server.stop();
    return out;
  };
  same("serve", serve(1), serve(0));

  std::string list;
  for (const auto& s : differing) list += (list.empty() ? "" : ", ") + s;
  return {differing.empty(), "determinism: generate, train, simulate, evaluate and serve " +
                                 std::string(differing.empty() ? "are byte-identical across two runs"
                                                               : "differ across runs in: " + list)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "Run only these criteria (1-9)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, gradient_check}, {2, causality},     {3, learning_sanity}, {4, monte_carlo_fidelity}, {5, metric_oracles},
      {6, end_to_end},     {7, tokenizer},     {8, cohort_checks},   {9, determinism}};
  int failures = 0;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    std::cerr << "criterion " << id << '\n';
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, "criterion raised: " + std::string(e.what())};
    }
    note("elapsed " + fmt(seconds_since(t0), 3) + " s");
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << o.summary << std::endl;
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
