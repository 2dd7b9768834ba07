#ifndef LMM_SYNTH_HPP
#define LMM_SYNTH_HPP

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lmm/common.hpp"
#include "lmm/vocab.hpp"

namespace lmm::synth {

struct LogNormalCost {
  double mu = 0.0;     // log-dollars
  double sigma = 0.5;  // log-dollars, > 0

  double mean() const;
  static LogNormalCost with_mean(double mean_dollars, double sigma);
};

struct EmissionEntry {
  CodeSystem system = CodeSystem::NDC;
  std::string code;
  double probability = 0.0;  // per visit
};

/// One encounter: place of service, a diagnosis, a billed encounter line that
/// carries the paid amount, and optional extra codes.
struct VisitTemplate {
  std::string diagnosis;  // ICD-10 CM; empty for none
  std::string place_of_service = "11";
  CodeSystem encounter_system = CodeSystem::CPT4;
  std::string encounter_code = "99213";
  std::vector<EmissionEntry> extras;
  LogNormalCost cost;
};

struct ConditionState {
  std::string name;
  bool terminal = false;  // no events after entering (e.g. deceased)
  double visit_prob = 0.0;  // monthly
  VisitTemplate visit;

  const std::string& icd10cm() const { return visit.diagnosis; }
};

/// State-independent encounters (any live patient, fixed monthly rate).
struct BackgroundEvent {
  std::string name;
  double monthly_prob = 0.0;
  VisitTemplate visit;
};

struct InitBand {
  int min_age = 0;
  std::vector<double> probs;
};

/// Logistic shift applied to every off-diagonal transition out of a
/// non-terminal state: logit(p) += per_decade * (age - 50) / 10 + male * [sex == M].
struct HazardShift {
  double per_decade = 0.0;
  double male = 0.0;
};

struct GeneratorSpec {
  std::vector<ConditionState> states;
  std::vector<InitBand> init;  // ascending min_age; first must be 0
  std::vector<std::vector<double>> transition;
  HazardShift hazard;
  std::vector<BackgroundEvent> background;
  int horizon_months = 36;
  Date start_date = make_date(2016, 1, 1);

  int min_age = 0;
  int max_age = 89;
  double female_fraction = 0.5;
  double rx_coverage_prob = 0.9;
  double capitation_prob = 0.05;
  double full_enrollment_prob = 0.9;
  int baseline_year = 2017;

  /// Throws InvalidSpec describing the first violated invariant.
  void validate() const;
};

/// Eight-state desk-scale default: healthy, hypertension, diabetes, COPD,
/// heart failure, stroke, cancer, deceased; plus a history-independent hip
/// fracture encounter.
GeneratorSpec default_spec();

std::string spec_to_json(const GeneratorSpec& spec);
GeneratorSpec spec_from_json(const std::string& text);

struct PatientTimeline {
  std::string patient_id;
  Sex sex = Sex::U;
  int birth_year = 1970;
  std::vector<MedicalEvent> events;  // ascending date, stable
  std::map<int, int> months_enrolled;  // calendar year -> months
  bool has_rx_coverage = false;
  std::set<int> capitated_years;
  std::optional<Date> enrollment_start;

  bool operator==(const PatientTimeline&) const = default;
};

/// Transition matrix with the hazard shift applied for a given patient.
std::vector<std::vector<double>> modulated_transition(const GeneratorSpec& spec, Sex sex, double age);
const std::vector<double>& initial_distribution(const GeneratorSpec& spec, int age);

/// marginals[m][s] = P(state at month m = s), m = 0..months (m = 0 is the
/// initial draw; months 1.. are emitting months).
std::vector<std::vector<double>> state_marginals(const GeneratorSpec& spec, Sex sex, int age, int months);

/// Expected paid amount in each state during one month.
std::vector<double> expected_monthly_cost(const GeneratorSpec& spec);

/// Exact expected cost over emitting months 1..12 by forward dynamic programming.
double expected_annual_cost(const GeneratorSpec& spec, Sex sex, int age);

struct Cohort {
  std::vector<PatientTimeline> timelines;
  /// Hidden state path per patient (index 0 = initial draw). Oracle use only.
  std::vector<std::vector<int>> state_paths;
};

/// Samples n patients. Patient i draws from Rng::stream(seed, i), so the
/// result is independent of thread count. Ids are `<id_prefix><index>`.
Cohort generate_cohort(const GeneratorSpec& spec, std::size_t n, std::uint64_t seed,
                       const std::string& id_prefix = "P", unsigned threads = 0);

// ---------------------------------------------------------------------------
// Claims files

enum class ClaimsFormat { CSV_V1, JSONL_V1 };

ClaimsFormat parse_claims_format(std::string_view name);

inline constexpr std::string_view kCsvHeader =
    "patient_id,sex,birth_year,service_date,system,code,paid,capitated,rx";

struct Reject {
  std::size_t line_no = 0;
  std::string reason;
};

struct IngestResult {
  std::vector<PatientTimeline> timelines;  // in order of first appearance
  std::vector<Reject> rejects;
};

struct IngestOptions {
  std::optional<Date> window_start;
  std::optional<Date> window_end;
};

IngestResult ingest_claims(const std::string& path, ClaimsFormat format, const IngestOptions& options = {});
IngestResult ingest_claims_text(std::string_view text, ClaimsFormat format, const IngestOptions& options = {});

/// Writes timelines as claim records. Enrollment is carried by one
/// `DEMOGRAPHIC,ENROLL_<months>` row per enrolled year.
std::string serialize_claims(const std::vector<PatientTimeline>& timelines, ClaimsFormat format);
void write_claims(const std::vector<PatientTimeline>& timelines, const std::string& path, ClaimsFormat format);

std::string rejects_csv(const std::vector<Reject>& rejects);

/// Distinct canonical codes per system across timelines (vocabulary input).
CodeLists collect_codes(const std::vector<PatientTimeline>& timelines);

}  // namespace lmm::synth

#endif  // LMM_SYNTH_HPP
