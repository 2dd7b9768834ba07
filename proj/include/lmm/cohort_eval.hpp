#ifndef LMM_COHORT_EVAL_HPP
#define LMM_COHORT_EVAL_HPP

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lmm/metrics.hpp"
#include "lmm/montecarlo.hpp"
#include "lmm/sequencer.hpp"
#include "lmm/synth.hpp"

namespace lmm::cohort {

using synth::PatientTimeline;

struct SoaCohortCriteria {
  int baseline_year = 2017;
  int target_year = 2018;
  bool require_rx_data = true;
  bool exclude_any_capitation = true;
  int min_baseline_enrollment_months = 12;

  /// Throws ConfigError.
  void validate() const;
};

enum class ExclusionReason { NoRx, Capitation, Enrollment, MissingEnrollmentData };
std::string_view to_string(ExclusionReason r);

struct Exclusion {
  std::string patient_id;
  ExclusionReason reason;
};

struct FilterReport {
  std::size_t input = 0;
  std::size_t included = 0;
  std::size_t no_rx = 0;
  std::size_t capitation = 0;
  std::size_t enrollment = 0;
  std::size_t missing_enrollment = 0;
  std::vector<Exclusion> excluded;
};

struct FilterResult {
  std::vector<PatientTimeline> included;
  FilterReport report;
};

/// Rules in fixed order: no rx coverage, capitation in the baseline or target
/// year, baseline enrollment. Each excluded patient is counted once, at the
/// first rule it fails. Timelines without any enrollment record are reported
/// as MissingEnrollmentData.
FilterResult soa_filter(const std::vector<PatientTimeline>& timelines, const SoaCohortCriteria& criteria);

// ---------------------------------------------------------------------------
// Chronic-condition map

inline constexpr std::string_view kNotMapped = "NOT_MAPPED";

struct ConditionRow {
  std::string ccw_name;
  std::optional<std::string> caliber_name;  // empty when not mapped
  std::vector<std::string> prefixes;        // ICD-10 CM code prefixes

  bool mapped() const { return caliber_name.has_value(); }
};

/// CSV `ccw_name,caliber_name,icd10cm_prefixes` with semicolon-separated prefixes.
class ConditionMap {
 public:
  static ConditionMap packaged();
  static ConditionMap parse(std::string_view csv);
  static ConditionMap load(const std::string& path);

  const std::vector<ConditionRow>& rows() const { return rows_; }
  std::size_t mapped_count() const;
  /// Case-insensitive; a row named `X (A + B)` also answers to X, A and B.
  /// Throws UnknownCondition.
  const ConditionRow& find(std::string_view ccw_name) const;
  std::size_t index_of(std::string_view ccw_name) const;

 private:
  std::vector<ConditionRow> rows_;
};

std::string_view packaged_condition_map_csv();

/// Caliber name, or NOT_MAPPED. Throws UnknownCondition.
std::string map_condition(const ConditionMap& map, std::string_view ccw_name);
std::string map_condition(std::string_view ccw_name);

struct LabelWindow {
  Date start;
  int months = 6;

  Date end() const;  // exclusive
  double days() const;
};

/// First `months` months of the target year.
LabelWindow target_window(int target_year, int months = 6);

/// One label per map row: any ICD-10 CM event inside the window whose code
/// starts with one of the row's prefixes.
std::vector<bool> label_chronic(const PatientTimeline& timeline, const ConditionMap& map, const LabelWindow& window);

/// Sum of paid amounts on events dated in `year`.
double actual_cost(const PatientTimeline& timeline, int year);

// ---------------------------------------------------------------------------
// Cost evaluation

/// Predicted target-year cost for one prompt. The seed is derived per patient.
using CostPredictor =
    std::function<double(const seq::TokenSequence& prompt, const PatientTimeline& timeline, std::uint64_t seed)>;

struct SimulationDefaults {
  int n_futures = 64;
  double temperature = 1.0;
  int top_k = 0;
  std::uint64_t seed = 0;
  unsigned threads = 0;
};

CostPredictor monte_carlo_cost_predictor(const mc::SequenceModel& model, const Vocabulary& vocab,
                                         const SimulationDefaults& sim, double horizon_days = 365);

struct PatientPrediction {
  std::string patient_id;
  double actual = 0.0;
  double predicted = 0.0;
  int age = 0;
  Sex sex = Sex::U;
};

struct Skip {
  std::string patient_id;
  std::string reason;
};

struct CostEvalOptions {
  SoaCohortCriteria criteria;
  SimulationDefaults sim;
  std::optional<double> censor_threshold = 250000.0;  // empty: no censored report
  UnknownPolicy policy = UnknownPolicy::Lenient;
};

struct CostEvalResult {
  FilterReport filter;
  std::vector<PatientPrediction> predictions;
  std::vector<Skip> skipped;
  metrics::MetricReport lmm;
  std::optional<metrics::MetricReport> lmm_censored;
  std::optional<double> censor_threshold;
  std::size_t censored_removed = 0;
  metrics::MetricReport constant_mean;
};

std::uint64_t patient_seed(std::uint64_t seed, const std::string& patient_id);

CostEvalResult run_cost_eval(const CostPredictor& predictor, const Vocabulary& vocab,
                             const std::vector<PatientTimeline>& timelines, const CostEvalOptions& options);

std::vector<metrics::EvalPair> to_pairs(const std::vector<PatientPrediction>& predictions);
std::string cost_report_json(const CostEvalResult& result);
std::string predictions_csv(const std::vector<PatientPrediction>& predictions);

// ---------------------------------------------------------------------------
// Chronic-condition evaluation

/// One score per map row.
using ConditionScorer = std::function<std::vector<double>(const seq::TokenSequence& prompt,
                                                          const PatientTimeline& timeline, std::uint64_t seed)>;

/// Any-time probability of each row's prefixes within the window length.
ConditionScorer monte_carlo_condition_scorer(const mc::SequenceModel& model, const Vocabulary& vocab,
                                             const ConditionMap& map, const SimulationDefaults& sim,
                                             double horizon_days);

struct ConditionEvalRow {
  std::string ccw_name;
  std::optional<std::string> caliber_name;
  std::size_t n_positive = 0;
  double occurrence_ratio = 0.0;
  std::optional<double> auroc;  // empty for single-class conditions
  std::optional<double> auprc;
};

struct ConditionEvalOptions {
  int baseline_year = 2017;
  int target_year = 2018;
  int window_months = 6;
  SimulationDefaults sim;
  UnknownPolicy policy = UnknownPolicy::Lenient;
};

struct ConditionEvalResult {
  std::vector<ConditionEvalRow> rows;  // occurrence ratio descending
  std::optional<double> macro_auroc;   // mapped rows with metrics only
  std::size_t macro_count = 0;
  std::size_t mapped_single_class = 0;
  std::size_t cohort_size = 0;
  std::vector<Skip> skipped;
};

ConditionEvalResult run_condition_eval(const ConditionScorer& scorer, const Vocabulary& vocab,
                                       const std::vector<PatientTimeline>& timelines, const ConditionMap& map,
                                       const ConditionEvalOptions& options);

std::string condition_report_json(const ConditionEvalResult& result);
std::string condition_rows_csv(const ConditionEvalResult& result);

}  // namespace lmm::cohort

#endif  // LMM_COHORT_EVAL_HPP
