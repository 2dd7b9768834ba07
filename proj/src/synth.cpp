#include "lmm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace lmm::synth {

namespace {

using json = nlohmann::json;

constexpr double kRowTolerance = 1e-12;

Error invalid(const std::string& what) { return Error(ErrorCode::InvalidSpec, what); }

bool is_prob(double p) { return p >= 0.0 && p <= 1.0; }

double logit(double p) { return std::log(p / (1.0 - p)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Age (years, fractional) during emitting month m >= 1.
double age_at_month(int age0, int m) { return age0 + (m - 1) / 12.0; }

Date month_start(Date start, int m) {
  using namespace std::chrono;
  const year_month_day ymd{start};
  const year_month ym = year_month{ymd.year(), ymd.month()} + months{m - 1};
  return sys_days{ym / day{1}};
}

unsigned days_in_month(Date first_of_month) {
  using namespace std::chrono;
  const year_month_day ymd{first_of_month};
  return static_cast<unsigned>(year_month_day_last{ymd.year() / ymd.month() / last}.day());
}

void validate_visit(const VisitTemplate& v, const std::string& owner) {
  try {
    if (!v.diagnosis.empty()) canonical_code(CodeSystem::ICD10CM, v.diagnosis);
    if (!v.place_of_service.empty()) canonical_code(CodeSystem::PLACE_OF_SERVICE, v.place_of_service);
    if (v.encounter_system == CodeSystem::ICD10CM) throw invalid(owner + ": encounter cannot be a diagnosis");
    canonical_code(v.encounter_system, v.encounter_code);
    for (const auto& e : v.extras) {
      canonical_code(e.system, e.code);
      if (!is_prob(e.probability)) throw invalid(owner + ": emission probability outside [0,1]");
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidSpec) throw;
    throw invalid(owner + ": " + e.what());
  }
  if (!(v.cost.sigma > 0.0) || !std::isfinite(v.cost.mu)) throw invalid(owner + ": cost sigma must be > 0");
}

void emit_visit(const VisitTemplate& v, Date date, Rng& rng, std::vector<MedicalEvent>& out) {
  if (!v.place_of_service.empty()) {
    out.push_back({date, CodeSystem::PLACE_OF_SERVICE, v.place_of_service, std::nullopt});
  }
  if (!v.diagnosis.empty()) {
    out.push_back({date, CodeSystem::ICD10CM, canonical_code(CodeSystem::ICD10CM, v.diagnosis), std::nullopt});
  }
  const double paid = std::round(std::exp(v.cost.mu + v.cost.sigma * rng.normal()) * 100.0) / 100.0;
  out.push_back({date, v.encounter_system, canonical_code(v.encounter_system, v.encounter_code), paid});
  for (const auto& e : v.extras) {
    if (rng.bernoulli(e.probability)) {
      out.push_back({date, e.system, canonical_code(e.system, e.code), std::nullopt});
    }
  }
}

std::size_t sample_index(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  // Rounding slack: land on the last state with positive mass.
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return i;
  }
  return 0;
}

}  // namespace

double LogNormalCost::mean() const { return std::exp(mu + 0.5 * sigma * sigma); }

LogNormalCost LogNormalCost::with_mean(double mean_dollars, double sigma) {
  return {std::log(mean_dollars) - 0.5 * sigma * sigma, sigma};
}

void GeneratorSpec::validate() const {
  const std::size_t s = states.size();
  if (s == 0) throw invalid("no states");
  if (transition.size() != s) throw invalid("transition matrix must be square over the states");
  for (std::size_t i = 0; i < s; ++i) {
    if (transition[i].size() != s) throw invalid("transition row " + std::to_string(i) + " has wrong width");
    double sum = 0.0;
    for (double p : transition[i]) {
      if (!is_prob(p)) throw invalid("transition probability outside [0,1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kRowTolerance) throw invalid("transition row " + std::to_string(i) + " does not sum to 1");
  }
  if (init.empty() || init.front().min_age != 0) throw invalid("init bands must start at age 0");
  for (std::size_t b = 0; b < init.size(); ++b) {
    if (b > 0 && init[b].min_age <= init[b - 1].min_age) throw invalid("init bands must ascend");
    if (init[b].probs.size() != s) throw invalid("init band has wrong width");
    double sum = 0.0;
    for (double p : init[b].probs) {
      if (!is_prob(p)) throw invalid("init probability outside [0,1]");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kRowTolerance) throw invalid("init band does not sum to 1");
  }
  for (const auto& st : states) {
    if (!is_prob(st.visit_prob)) throw invalid(st.name + ": visit probability outside [0,1]");
    validate_visit(st.visit, st.name);
  }
  for (const auto& b : background) {
    if (!is_prob(b.monthly_prob)) throw invalid(b.name + ": monthly probability outside [0,1]");
    validate_visit(b.visit, b.name);
  }
  if (horizon_months < 1) throw invalid("horizon_months must be >= 1");
  if (min_age < 0 || max_age < min_age || max_age > kMaxAge) throw invalid("bad age range");
  if (!is_prob(female_fraction) || !is_prob(rx_coverage_prob) || !is_prob(capitation_prob) ||
      !is_prob(full_enrollment_prob)) {
    throw invalid("population fractions must lie in [0,1]");
  }
}

GeneratorSpec default_spec() {
  GeneratorSpec spec;
  auto state = [](std::string name, double visit, std::string dx, std::string pos, CodeSystem enc_sys,
                  std::string enc, double mean_cost, double sigma, std::vector<EmissionEntry> extras) {
    ConditionState s;
    s.name = std::move(name);
    s.visit_prob = visit;
    s.visit.diagnosis = std::move(dx);
    s.visit.place_of_service = std::move(pos);
    s.visit.encounter_system = enc_sys;
    s.visit.encounter_code = std::move(enc);
    s.visit.extras = std::move(extras);
    s.visit.cost = LogNormalCost::with_mean(mean_cost, sigma);
    return s;
  };
  using CS = CodeSystem;
  spec.states = {
      state("healthy", 0.08, "Z00.00", "11", CS::CPT4, "99213", 150, 0.6, {}),
      state("hypertension", 0.35, "I10", "11", CS::CPT4, "99214", 220, 0.6,
            {{CS::NDC, "68180051301", 0.8}}),
      state("diabetes", 0.45, "E11.9", "11", CS::CPT4, "99214", 400, 0.7,
            {{CS::ICD10CM, "I10", 0.5}, {CS::NDC, "00093104801", 0.9}, {CS::CPT4, "83036", 0.4}}),
      state("copd", 0.40, "J44.9", "11", CS::CPT4, "99214", 500, 0.7,
            {{CS::NDC, "00173068220", 0.7}, {CS::CPT4, "94010", 0.3}}),
      state("heart_failure", 0.60, "I50.9", "22", CS::CPT4, "99215", 1500, 0.9,
            {{CS::ICD10CM, "I10", 0.5}, {CS::CPT4, "93306", 0.3}, {CS::NDC, "00054829725", 0.8}}),
      state("stroke", 0.60, "I63.9", "21", CS::CPT4, "99223", 6000, 1.0,
            {{CS::ICD10CM, "G20", 0.25}, {CS::ICD10CM, "I10", 0.5}, {CS::ICD10PCS, "B030ZZZ", 0.3}}),
      state("cancer", 0.70, "C50.919", "22", CS::HCPCS, "J9355", 8000, 1.0,
            {{CS::CPT4, "96413", 0.6}, {CS::NDC, "00078043815", 0.5}}),
      state("deceased", 0.0, "", "11", CS::CPT4, "99213", 1, 0.5, {}),
  };
  spec.states.back().terminal = true;

  // healthy, htn, diabetes, copd, hf, stroke, cancer, deceased
  std::vector<std::vector<double>> off = {
      {0, 0.010, 0.004, 0.003, 0.001, 0.001, 0.002, 0.0005},
      {0.002, 0, 0.010, 0.000, 0.006, 0.004, 0.001, 0.001},
      {0, 0, 0, 0.000, 0.008, 0.005, 0.001, 0.002},
      {0, 0, 0, 0, 0.006, 0.002, 0.001, 0.003},
      {0, 0, 0, 0, 0, 0.006, 0.000, 0.008},
      {0, 0.050, 0, 0, 0, 0, 0.000, 0.010},
      {0.020, 0, 0, 0, 0, 0, 0, 0.010},
      {0, 0, 0, 0, 0, 0, 0, 0},
  };
  for (std::size_t i = 0; i < off.size(); ++i) {
    double leave = 0.0;
    for (std::size_t j = 0; j < off.size(); ++j) leave += (i == j) ? 0.0 : off[i][j];
    off[i][i] = 1.0 - leave;
  }
  spec.transition = off;
  spec.init = {
      {0, {0.97, 0.01, 0.01, 0.01, 0.0, 0.0, 0.0, 0.0}},
      {18, {0.80, 0.10, 0.05, 0.02, 0.005, 0.005, 0.02, 0.0}},
      {45, {0.55, 0.22, 0.12, 0.05, 0.02, 0.01, 0.03, 0.0}},
      {65, {0.35, 0.28, 0.16, 0.08, 0.07, 0.03, 0.03, 0.0}},
  };
  spec.hazard = {0.15, 0.1};

  BackgroundEvent fracture;
  fracture.name = "hip_fracture";
  fracture.monthly_prob = 0.07;
  fracture.visit.diagnosis = "S72.00";
  fracture.visit.place_of_service = "23";
  fracture.visit.encounter_system = CS::CPT4;
  fracture.visit.encounter_code = "27236";
  fracture.visit.cost = LogNormalCost::with_mean(3000, 0.8);
  spec.background = {fracture};
  return spec;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<double>> modulated_transition(const GeneratorSpec& spec, Sex sex, double age) {
  auto t = spec.transition;
  const double shift = spec.hazard.per_decade * (age - 50.0) / 10.0 + (sex == Sex::M ? spec.hazard.male : 0.0);
  if (shift == 0.0) return t;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (spec.states[i].terminal) continue;
    double leave = 0.0;
    for (std::size_t j = 0; j < t.size(); ++j) {
      if (i == j) continue;
      double& p = t[i][j];
      if (p > 0.0 && p < 1.0) p = sigmoid(logit(p) + shift);
      leave += p;
    }
    if (leave > 1.0) {
      for (std::size_t j = 0; j < t.size(); ++j) {
        if (i != j) t[i][j] /= leave;
      }
      leave = 1.0;
    }
    t[i][i] = 1.0 - leave;
  }
  return t;
}

const std::vector<double>& initial_distribution(const GeneratorSpec& spec, int age) {
  const InitBand* band = &spec.init.front();
  for (const auto& b : spec.init) {
    if (b.min_age <= age) band = &b;
  }
  return band->probs;
}

std::vector<std::vector<double>> state_marginals(const GeneratorSpec& spec, Sex sex, int age, int months) {
  spec.validate();
  const std::size_t s = spec.states.size();
  std::vector<std::vector<double>> out;
  out.push_back(initial_distribution(spec, age));
  for (int m = 1; m <= months; ++m) {
    const auto t = modulated_transition(spec, sex, age_at_month(age, m));
    std::vector<double> next(s, 0.0);
    const auto& prev = out.back();
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t j = 0; j < s; ++j) next[j] += prev[i] * t[i][j];
    }
    out.push_back(std::move(next));
  }
  return out;
}

std::vector<double> expected_monthly_cost(const GeneratorSpec& spec) {
  double background = 0.0;
  for (const auto& b : spec.background) background += b.monthly_prob * b.visit.cost.mean();
  std::vector<double> c;
  for (const auto& st : spec.states) {
    c.push_back(st.terminal ? 0.0 : st.visit_prob * st.visit.cost.mean() + background);
  }
  return c;
}

double expected_annual_cost(const GeneratorSpec& spec, Sex sex, int age) {
  const auto marginals = state_marginals(spec, sex, age, 12);
  const auto cost = expected_monthly_cost(spec);
  KahanSum total;
  for (int m = 1; m <= 12; ++m) {
    for (std::size_t s = 0; s < cost.size(); ++s) total.add(marginals[static_cast<std::size_t>(m)][s] * cost[s]);
  }
  return total.value();
}

Cohort generate_cohort(const GeneratorSpec& spec, std::size_t n, std::uint64_t seed, const std::string& id_prefix,
                       unsigned threads) {
  if (n < 1) throw invalid("cohort size must be >= 1");
  spec.validate();
  Cohort cohort;
  cohort.timelines.resize(n);
  cohort.state_paths.resize(n);
  const int start_year = year_of(spec.start_date);
  const int last_year = year_of(month_start(spec.start_date, spec.horizon_months));
  const int width = std::max<int>(6, static_cast<int>(std::to_string(n - 1).size()));

  parallel_for(
      n,
      [&](std::size_t i) {
        Rng rng = Rng::stream(seed, i);
        PatientTimeline& tl = cohort.timelines[i];
        std::string idx = std::to_string(i);
        tl.patient_id = id_prefix + std::string(static_cast<std::size_t>(std::max<int>(0, width - static_cast<int>(idx.size()))), '0') + idx;
        tl.sex = rng.bernoulli(spec.female_fraction) ? Sex::F : Sex::M;
        const int age0 = spec.min_age + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_age - spec.min_age + 1)));
        tl.birth_year = start_year - age0;
        tl.enrollment_start = spec.start_date;
        for (int y = start_year; y <= last_year; ++y) tl.months_enrolled[y] = 12;
        if (!rng.bernoulli(spec.full_enrollment_prob)) {
          tl.months_enrolled[spec.baseline_year] = 1 + static_cast<int>(rng.below(11));
        }
        tl.has_rx_coverage = rng.bernoulli(spec.rx_coverage_prob);
        if (rng.bernoulli(spec.capitation_prob)) {
          tl.capitated_years.insert(start_year + static_cast<int>(rng.below(static_cast<std::uint64_t>(last_year - start_year + 1))));
        }

        auto& path = cohort.state_paths[i];
        path.push_back(static_cast<int>(sample_index(initial_distribution(spec, age0), rng)));
        for (int m = 1; m <= spec.horizon_months; ++m) {
          const auto t = modulated_transition(spec, tl.sex, age_at_month(age0, m));
          const auto s = sample_index(t[static_cast<std::size_t>(path.back())], rng);
          path.push_back(static_cast<int>(s));
          const auto& st = spec.states[s];
          if (st.terminal) continue;
          const Date first = month_start(spec.start_date, m);
          const unsigned ndays = days_in_month(first);
          if (rng.bernoulli(st.visit_prob)) {
            emit_visit(st.visit, first + std::chrono::days{rng.below(ndays)}, rng, tl.events);
          }
          for (const auto& b : spec.background) {
            if (rng.bernoulli(b.monthly_prob)) {
              emit_visit(b.visit, first + std::chrono::days{rng.below(ndays)}, rng, tl.events);
            }
          }
        }
        std::stable_sort(tl.events.begin(), tl.events.end(),
                         [](const MedicalEvent& a, const MedicalEvent& b) { return a.date < b.date; });
      },
      threads);
  return cohort;
}

// ---------------------------------------------------------------------------
// Spec JSON

namespace {

json visit_to_json(const VisitTemplate& v) {
  json extras = json::array();
  for (const auto& e : v.extras) {
    extras.push_back({{"system", to_string(e.system)}, {"code", e.code}, {"probability", e.probability}});
  }
  return {{"diagnosis", v.diagnosis},
          {"place_of_service", v.place_of_service},
          {"encounter_system", to_string(v.encounter_system)},
          {"encounter_code", v.encounter_code},
          {"extras", extras},
          {"cost_mu", v.cost.mu},
          {"cost_sigma", v.cost.sigma}};
}

VisitTemplate visit_from_json(const json& j) {
  VisitTemplate v;
  v.diagnosis = j.value("diagnosis", "");
  v.place_of_service = j.value("place_of_service", "");
  v.encounter_system = parse_code_system(j.at("encounter_system").get<std::string>());
  v.encounter_code = j.at("encounter_code").get<std::string>();
  for (const auto& e : j.value("extras", json::array())) {
    v.extras.push_back({parse_code_system(e.at("system").get<std::string>()), e.at("code").get<std::string>(),
                        e.at("probability").get<double>()});
  }
  v.cost = {j.at("cost_mu").get<double>(), j.at("cost_sigma").get<double>()};
  return v;
}

}  // namespace

std::string spec_to_json(const GeneratorSpec& spec) {
  json states = json::array();
  for (const auto& s : spec.states) {
    states.push_back({{"name", s.name}, {"terminal", s.terminal}, {"visit_prob", s.visit_prob},
                      {"visit", visit_to_json(s.visit)}});
  }
  json init = json::array();
  for (const auto& b : spec.init) init.push_back({{"min_age", b.min_age}, {"probs", b.probs}});
  json background = json::array();
  for (const auto& b : spec.background) {
    background.push_back({{"name", b.name}, {"monthly_prob", b.monthly_prob}, {"visit", visit_to_json(b.visit)}});
  }
  json j = {{"states", states},
            {"init", init},
            {"transition", spec.transition},
            {"hazard", {{"per_decade", spec.hazard.per_decade}, {"male", spec.hazard.male}}},
            {"background", background},
            {"horizon_months", spec.horizon_months},
            {"start_date", format_date(spec.start_date)},
            {"min_age", spec.min_age},
            {"max_age", spec.max_age},
            {"female_fraction", spec.female_fraction},
            {"rx_coverage_prob", spec.rx_coverage_prob},
            {"capitation_prob", spec.capitation_prob},
            {"full_enrollment_prob", spec.full_enrollment_prob},
            {"baseline_year", spec.baseline_year}};
  return j.dump(2);
}

GeneratorSpec spec_from_json(const std::string& text) {
  GeneratorSpec spec;
  try {
    const json j = json::parse(text);
    spec.states.clear();
    for (const auto& s : j.at("states")) {
      ConditionState st;
      st.name = s.at("name").get<std::string>();
      st.terminal = s.value("terminal", false);
      st.visit_prob = s.value("visit_prob", 0.0);
      st.visit = visit_from_json(s.at("visit"));
      spec.states.push_back(std::move(st));
    }
    spec.init.clear();
    for (const auto& b : j.at("init")) {
      spec.init.push_back({b.at("min_age").get<int>(), b.at("probs").get<std::vector<double>>()});
    }
    spec.transition = j.at("transition").get<std::vector<std::vector<double>>>();
    if (j.contains("hazard")) {
      spec.hazard = {j["hazard"].value("per_decade", 0.0), j["hazard"].value("male", 0.0)};
    }
    for (const auto& b : j.value("background", json::array())) {
      spec.background.push_back(
          {b.at("name").get<std::string>(), b.at("monthly_prob").get<double>(), visit_from_json(b.at("visit"))});
    }
    spec.horizon_months = j.value("horizon_months", spec.horizon_months);
    if (j.contains("start_date")) spec.start_date = parse_date(j["start_date"].get<std::string>());
    spec.min_age = j.value("min_age", spec.min_age);
    spec.max_age = j.value("max_age", spec.max_age);
    spec.female_fraction = j.value("female_fraction", spec.female_fraction);
    spec.rx_coverage_prob = j.value("rx_coverage_prob", spec.rx_coverage_prob);
    spec.capitation_prob = j.value("capitation_prob", spec.capitation_prob);
    spec.full_enrollment_prob = j.value("full_enrollment_prob", spec.full_enrollment_prob);
    spec.baseline_year = j.value("baseline_year", spec.baseline_year);
  } catch (const json::exception& e) {
    throw invalid(std::string("spec JSON: ") + e.what());
  } catch (const Error& e) {
    throw invalid(e.what());
  }
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Claims ingestion

ClaimsFormat parse_claims_format(std::string_view name) {
  if (name == "CSV_V1" || name == "csv") return ClaimsFormat::CSV_V1;
  if (name == "JSONL_V1" || name == "jsonl") return ClaimsFormat::JSONL_V1;
  throw Error(ErrorCode::FormatError, "unknown claims format '" + std::string(name) + "'");
}

namespace {

struct RawRecord {
  std::string patient_id, sex, birth_year, service_date, system, code, paid, capitated, rx;
};

struct LineReject {
  std::string reason;
};

int parse_flag(const std::string& s, const char* name) {
  if (s == "0" || s == "false") return 0;
  if (s == "1" || s == "true") return 1;
  throw LineReject{std::string(name) + " must be 0 or 1"};
}

class TimelineBuilder {
 public:
  explicit TimelineBuilder(const IngestOptions& options) : options_(options) {}

  void add(const RawRecord& r) {
    if (r.patient_id.empty()) throw LineReject{"empty patient_id"};
    Sex sex;
    int birth_year = 0;
    try {
      sex = parse_sex(r.sex);
      std::size_t pos = 0;
      birth_year = std::stoi(r.birth_year, &pos);
      if (pos != r.birth_year.size()) throw LineReject{"bad birth_year"};
    } catch (const LineReject&) {
      throw;
    } catch (const std::exception&) {
      throw LineReject{"bad sex or birth_year"};
    }
    Date date;
    CodeSystem system;
    try {
      date = parse_date(r.service_date);
      system = parse_code_system(r.system);
    } catch (const Error& e) {
      throw LineReject{e.what()};
    }
    if ((options_.window_start && date < *options_.window_start) ||
        (options_.window_end && date > *options_.window_end)) {
      throw LineReject{"service_date outside data window"};
    }
    std::optional<double> paid;
    if (!r.paid.empty()) {
      double v = 0.0;
      try {
        std::size_t pos = 0;
        v = std::stod(r.paid, &pos);
        if (pos != r.paid.size()) throw LineReject{"bad paid amount"};
      } catch (const LineReject&) {
        throw;
      } catch (const std::exception&) {
        throw LineReject{"bad paid amount"};
      }
      if (!std::isfinite(v) || v < 0.0) throw LineReject{"negative or non-finite paid amount"};
      paid = v;
    }
    const int capitated = parse_flag(r.capitated, "capitated");
    const int rx = parse_flag(r.rx, "rx");

    std::optional<int> enroll_months;
    std::string code;
    if (system == CodeSystem::DEMOGRAPHIC) {
      if (!starts_with(r.code, "ENROLL_")) throw LineReject{"DEMOGRAPHIC rows must be ENROLL_<months>"};
      try {
        std::size_t pos = 0;
        const std::string digits = r.code.substr(7);
        const int m = std::stoi(digits, &pos);
        if (pos != digits.size() || m < 0 || m > 12) throw LineReject{"enrollment months must be 0..12"};
        enroll_months = m;
      } catch (const LineReject&) {
        throw;
      } catch (const std::exception&) {
        throw LineReject{"enrollment months must be 0..12"};
      }
      if (paid) throw LineReject{"enrollment rows carry no paid amount"};
    } else if (system == CodeSystem::TIME_GAP || system == CodeSystem::STRUCTURAL) {
      throw LineReject{"system not allowed in claims"};
    } else {
      if (system == CodeSystem::ICD10CM && paid) throw LineReject{"paid amount on a diagnosis code"};
      if (system == CodeSystem::COST && !paid) throw LineReject{"COST row without paid amount"};
      try {
        code = canonical_code(system, r.code);
      } catch (const Error& e) {
        throw LineReject{e.what()};
      }
    }

    auto [it, fresh] = index_.try_emplace(r.patient_id, timelines_.size());
    if (fresh) {
      PatientTimeline tl;
      tl.patient_id = r.patient_id;
      tl.sex = sex;
      tl.birth_year = birth_year;
      timelines_.push_back(std::move(tl));
    }
    PatientTimeline& tl = timelines_[it->second];
    if (tl.sex != sex || tl.birth_year != birth_year) {
      if (fresh) index_.erase(it), timelines_.pop_back();
      throw LineReject{"sex/birth_year disagree with earlier rows for this patient"};
    }
    if (rx) tl.has_rx_coverage = true;
    if (capitated) tl.capitated_years.insert(year_of(date));
    if (enroll_months) {
      tl.months_enrolled[year_of(date)] = *enroll_months;
      if (!tl.enrollment_start || date < *tl.enrollment_start) tl.enrollment_start = date;
    } else {
      tl.events.push_back({date, system, code, paid});
    }
  }

  std::vector<PatientTimeline> finish() {
    for (auto& tl : timelines_) {
      std::stable_sort(tl.events.begin(), tl.events.end(),
                       [](const MedicalEvent& a, const MedicalEvent& b) { return a.date < b.date; });
    }
    return std::move(timelines_);
  }

 private:
  IngestOptions options_;
  std::vector<PatientTimeline> timelines_;
  std::unordered_map<std::string, std::size_t> index_;
};

RawRecord raw_from_csv(const std::string& line) {
  std::vector<std::string> f;
  try {
    f = split_csv_line(line);
  } catch (const Error& e) {
    throw LineReject{e.what()};
  }
  if (f.size() != 9) throw LineReject{"expected 9 columns, got " + std::to_string(f.size())};
  for (auto& x : f) x = trim(x);
  return {f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]};
}

RawRecord raw_from_json(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception&) {
    throw LineReject{"invalid JSON"};
  }
  if (!j.is_object()) throw LineReject{"expected a JSON object"};
  auto field = [&](const char* key, bool optional = false) -> std::string {
    if (!j.contains(key) || j[key].is_null()) {
      if (optional) return "";
      throw LineReject{std::string("missing field ") + key};
    }
    const auto& v = j[key];
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    if (v.is_number()) return format_double(v.get<double>());
    throw LineReject{std::string("bad field ") + key};
  };
  return {field("patient_id"), field("sex"),  field("birth_year"), field("service_date"), field("system"),
          field("code", true),  field("paid", true), field("capitated"), field("rx")};
}

IngestResult ingest_stream(std::istream& in, ClaimsFormat format, const IngestOptions& options) {
  IngestResult result;
  TimelineBuilder builder(options);
  std::string line;
  std::size_t line_no = 0;
  if (format == ClaimsFormat::CSV_V1) {
    if (!std::getline(in, line)) throw Error(ErrorCode::FormatError, "missing CSV header");
    ++line_no;
    if (trim(line) != kCsvHeader) throw Error(ErrorCode::FormatError, "CSV header mismatch: '" + trim(line) + "'");
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      builder.add(format == ClaimsFormat::CSV_V1 ? raw_from_csv(line) : raw_from_json(line));
    } catch (const LineReject& r) {
      result.rejects.push_back({line_no, r.reason});
    }
  }
  result.timelines = builder.finish();
  return result;
}

}  // namespace

IngestResult ingest_claims(const std::string& path, ClaimsFormat format, const IngestOptions& options) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::UnreadableFile, "cannot open " + path);
  return ingest_stream(in, format, options);
}

IngestResult ingest_claims_text(std::string_view text, ClaimsFormat format, const IngestOptions& options) {
  std::istringstream in{std::string(text)};
  return ingest_stream(in, format, options);
}

std::string serialize_claims(const std::vector<PatientTimeline>& timelines, ClaimsFormat format) {
  std::ostringstream out;
  if (format == ClaimsFormat::CSV_V1) out << kCsvHeader << '\n';
  for (const auto& tl : timelines) {
    const std::string rx = tl.has_rx_coverage ? "1" : "0";
    auto row = [&](Date date, CodeSystem system, const std::string& code, const std::optional<double>& paid) {
      const std::string cap = tl.capitated_years.count(year_of(date)) ? "1" : "0";
      if (format == ClaimsFormat::CSV_V1) {
        out << csv_escape(tl.patient_id) << ',' << to_string(tl.sex) << ',' << tl.birth_year << ','
            << format_date(date) << ',' << to_string(system) << ',' << code << ','
            << (paid ? format_double(*paid) : "") << ',' << cap << ',' << rx << '\n';
      } else {
        json j = {{"patient_id", tl.patient_id}, {"sex", to_string(tl.sex)},   {"birth_year", tl.birth_year},
                  {"service_date", format_date(date)}, {"system", to_string(system)}, {"code", code},
                  {"capitated", cap == "1" ? 1 : 0},  {"rx", rx == "1" ? 1 : 0}};
        j["paid"] = paid ? json(*paid) : json(nullptr);
        out << j.dump() << '\n';
      }
    };
    for (const auto& [year, months] : tl.months_enrolled) {
      Date d = make_date(year, 1, 1);
      if (tl.enrollment_start && year_of(*tl.enrollment_start) == year) d = *tl.enrollment_start;
      row(d, CodeSystem::DEMOGRAPHIC, "ENROLL_" + std::to_string(months), std::nullopt);
    }
    for (const auto& e : tl.events) row(e.date, e.system, e.code, e.paid);
  }
  return out.str();
}

void write_claims(const std::vector<PatientTimeline>& timelines, const std::string& path, ClaimsFormat format) {
  write_file(path, serialize_claims(timelines, format));
}

std::string rejects_csv(const std::vector<Reject>& rejects) {
  std::string out = "line_no,reason\n";
  for (const auto& r : rejects) out += std::to_string(r.line_no) + "," + csv_escape(r.reason) + "\n";
  return out;
}

CodeLists collect_codes(const std::vector<PatientTimeline>& timelines) {
  std::map<CodeSystem, std::set<std::string>> seen;
  for (const auto& tl : timelines) {
    for (const auto& e : tl.events) {
      if (e.system == CodeSystem::DEMOGRAPHIC || e.system == CodeSystem::COST) continue;
      seen[e.system].insert(canonical_code(e.system, e.code));
    }
  }
  CodeLists out;
  for (auto& [system, codes] : seen) out[system] = {codes.begin(), codes.end()};
  return out;
}

}  // namespace lmm::synth
