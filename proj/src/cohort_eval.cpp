#include "lmm/cohort_eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "json.hpp"

namespace lmm::cohort {

namespace {

std::string normalize_name(std::string_view name) {
  std::string s(name);
  // Typographic apostrophe (U+2019) to ASCII.
  for (std::size_t p; (p = s.find("\xE2\x80\x99")) != std::string::npos;) s.replace(p, 3, "'");
  std::string out;
  for (char c : s) {
    const char lc = c == '-' ? ' ' : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (lc == ' ' && (out.empty() || out.back() == ' ')) continue;
    out.push_back(lc);
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

std::vector<std::string> names_of(const ConditionRow& row) {
  std::vector<std::string> names{normalize_name(row.ccw_name)};
  const auto open = row.ccw_name.find(" (");
  if (open != std::string::npos && row.ccw_name.back() == ')') {
    names.push_back(normalize_name(row.ccw_name.substr(0, open)));
    const std::string inner = row.ccw_name.substr(open + 2, row.ccw_name.size() - open - 3);
    for (const auto& part : split(inner, '+')) names.push_back(normalize_name(trim(part)));
  }
  return names;
}

std::string strip_dots(std::string_view code) {
  std::string out;
  for (char c : code) {
    if (c != '.') out.push_back(c);
  }
  return out;
}

nlohmann::ordered_json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

nlohmann::ordered_json report_json(const metrics::MetricReport& r) {
  return nlohmann::ordered_json::parse(metrics::report_to_json(r));
}

seq::TokenSequence baseline_prompt(const PatientTimeline& tl, int baseline_year, const Vocabulary& vocab,
                                   UnknownPolicy policy) {
  return seq::split_at(tl, make_date(baseline_year, 12, 31), vocab, policy).prompt;
}

}  // namespace

void SoaCohortCriteria::validate() const {
  if (target_year != baseline_year + 1) throw Error(ErrorCode::ConfigError, "target_year must be baseline_year + 1");
  if (min_baseline_enrollment_months < 0 || min_baseline_enrollment_months > 12) {
    throw Error(ErrorCode::ConfigError, "min_baseline_enrollment_months must be 0..12");
  }
}

std::string_view to_string(ExclusionReason r) {
  switch (r) {
    case ExclusionReason::NoRx: return "NO_RX";
    case ExclusionReason::Capitation: return "CAPITATION";
    case ExclusionReason::Enrollment: return "ENROLLMENT";
    case ExclusionReason::MissingEnrollmentData: return "MISSING_ENROLLMENT_DATA";
  }
  return "?";
}

FilterResult soa_filter(const std::vector<PatientTimeline>& timelines, const SoaCohortCriteria& criteria) {
  criteria.validate();
  FilterResult out;
  out.report.input = timelines.size();
  for (const auto& tl : timelines) {
    std::optional<ExclusionReason> reason;
    if (criteria.require_rx_data && !tl.has_rx_coverage) {
      reason = ExclusionReason::NoRx;
    } else if (criteria.exclude_any_capitation && (tl.capitated_years.count(criteria.baseline_year) ||
                                                   tl.capitated_years.count(criteria.target_year))) {
      reason = ExclusionReason::Capitation;
    } else if (tl.months_enrolled.empty()) {
      reason = ExclusionReason::MissingEnrollmentData;
    } else {
      const auto it = tl.months_enrolled.find(criteria.baseline_year);
      const int months = it == tl.months_enrolled.end() ? 0 : it->second;
      if (months < criteria.min_baseline_enrollment_months) reason = ExclusionReason::Enrollment;
    }
    if (!reason) {
      out.included.push_back(tl);
      continue;
    }
    out.report.excluded.push_back({tl.patient_id, *reason});
    switch (*reason) {
      case ExclusionReason::NoRx: ++out.report.no_rx; break;
      case ExclusionReason::Capitation: ++out.report.capitation; break;
      case ExclusionReason::Enrollment: ++out.report.enrollment; break;
      case ExclusionReason::MissingEnrollmentData: ++out.report.missing_enrollment; break;
    }
  }
  out.report.included = out.included.size();
  return out;
}

// ---------------------------------------------------------------------------

ConditionMap ConditionMap::packaged() { return parse(packaged_condition_map_csv()); }

ConditionMap ConditionMap::parse(std::string_view csv) {
  ConditionMap map;
  std::size_t line_no = 0;
  bool header = false;
  for (auto line : split(csv, '\n')) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto where = "condition map line " + std::to_string(line_no) + ": ";
    if (!header) {
      if (line != "ccw_name,caliber_name,icd10cm_prefixes") throw Error(ErrorCode::FormatError, where + "bad header");
      header = true;
      continue;
    }
    const auto f = split_csv_line(line);
    if (f.size() != 3) throw Error(ErrorCode::FormatError, where + "expected 3 fields");
    ConditionRow row;
    row.ccw_name = trim(f[0]);
    if (row.ccw_name.empty()) throw Error(ErrorCode::FormatError, where + "empty condition name");
    if (f[1] != kNotMapped) row.caliber_name = f[1];
    for (const auto& p : split(f[2], ';')) {
      std::string prefix = strip_dots(trim(p));
      for (auto& c : prefix) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      if (prefix.empty()) throw Error(ErrorCode::FormatError, where + "empty code prefix");
      row.prefixes.push_back(prefix);
    }
    for (const auto& existing : map.rows_) {
      if (normalize_name(existing.ccw_name) == normalize_name(row.ccw_name)) {
        throw Error(ErrorCode::FormatError, where + "duplicate condition " + row.ccw_name);
      }
    }
    map.rows_.push_back(std::move(row));
  }
  if (!header) throw Error(ErrorCode::FormatError, "condition map is empty");
  return map;
}

ConditionMap ConditionMap::load(const std::string& path) { return parse(read_file(path)); }

std::size_t ConditionMap::mapped_count() const {
  return static_cast<std::size_t>(std::count_if(rows_.begin(), rows_.end(), [](const auto& r) { return r.mapped(); }));
}

std::size_t ConditionMap::index_of(std::string_view ccw_name) const {
  const std::string key = normalize_name(ccw_name);
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    for (const auto& n : names_of(rows_[i])) {
      if (n == key) return i;
    }
  }
  throw Error(ErrorCode::UnknownCondition, "no condition named '" + std::string(ccw_name) + "'");
}

const ConditionRow& ConditionMap::find(std::string_view ccw_name) const { return rows_[index_of(ccw_name)]; }

std::string map_condition(const ConditionMap& map, std::string_view ccw_name) {
  const auto& row = map.find(ccw_name);
  return row.caliber_name ? *row.caliber_name : std::string(kNotMapped);
}

std::string map_condition(std::string_view ccw_name) {
  static const ConditionMap map = ConditionMap::packaged();
  return map_condition(map, ccw_name);
}

Date LabelWindow::end() const {
  const std::chrono::year_month_day ymd{start};
  return std::chrono::sys_days{ymd + std::chrono::months{months}};
}

double LabelWindow::days() const { return static_cast<double>(days_between(start, end())); }

LabelWindow target_window(int target_year, int months) {
  if (months < 1 || months > 12) throw Error(ErrorCode::ConfigError, "window months must be 1..12");
  return {make_date(target_year, 1, 1), months};
}

std::vector<bool> label_chronic(const PatientTimeline& timeline, const ConditionMap& map, const LabelWindow& window) {
  std::vector<bool> labels(map.rows().size(), false);
  const Date end = window.end();
  for (const auto& e : timeline.events) {
    if (e.system != CodeSystem::ICD10CM || e.date < window.start || e.date >= end) continue;
    const std::string code = strip_dots(e.code);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i]) continue;
      for (const auto& p : map.rows()[i].prefixes) {
        if (starts_with(code, p)) {
          labels[i] = true;
          break;
        }
      }
    }
  }
  return labels;
}

double actual_cost(const PatientTimeline& timeline, int year) {
  KahanSum total;
  for (const auto& e : timeline.events) {
    if (e.paid && year_of(e.date) == year) total.add(*e.paid);
  }
  return total.value();
}

// ---------------------------------------------------------------------------

std::uint64_t patient_seed(std::uint64_t seed, const std::string& patient_id) {
  return splitmix64(seed ^ stable_hash(patient_id, 0x9e3779b97f4a7c15ULL));
}

CostPredictor monte_carlo_cost_predictor(const mc::SequenceModel& model, const Vocabulary& vocab,
                                         const SimulationDefaults& sim, double horizon_days) {
  return [&model, &vocab, sim, horizon_days](const seq::TokenSequence& prompt, const PatientTimeline&,
                                             std::uint64_t seed) {
    mc::SimulationRequest req;
    req.prompt = prompt;
    req.n_futures = sim.n_futures;
    req.horizon_days = horizon_days;
    req.temperature = sim.temperature;
    req.top_k = sim.top_k;
    req.base_seed = seed;
    req.threads = 1;
    return mc::simulate_futures(model, vocab, req).predicted_cost;
  };
}

std::vector<metrics::EvalPair> to_pairs(const std::vector<PatientPrediction>& predictions) {
  std::vector<metrics::EvalPair> pairs;
  pairs.reserve(predictions.size());
  for (const auto& p : predictions) pairs.push_back({p.actual, p.predicted, p.age, p.sex});
  return pairs;
}

CostEvalResult run_cost_eval(const CostPredictor& predictor, const Vocabulary& vocab,
                             const std::vector<PatientTimeline>& timelines, const CostEvalOptions& options) {
  CostEvalResult result;
  auto filtered = soa_filter(timelines, options.criteria);
  result.filter = filtered.report;
  const auto& cohort = filtered.included;
  const int base = options.criteria.baseline_year;

  std::vector<std::optional<PatientPrediction>> slots(cohort.size());
  std::vector<std::string> errors(cohort.size());
  parallel_for(
      cohort.size(),
      [&](std::size_t i) {
        const auto& tl = cohort[i];
        try {
          const auto prompt = baseline_prompt(tl, base, vocab, options.policy);
          const double predicted = predictor(prompt, tl, patient_seed(options.sim.seed, tl.patient_id));
          if (!std::isfinite(predicted)) throw Error(ErrorCode::NonFiniteLoss, "non-finite prediction");
          slots[i] = PatientPrediction{tl.patient_id, actual_cost(tl, options.criteria.target_year), predicted,
                                       base - tl.birth_year, tl.sex};
        } catch (const Error& e) {
          errors[i] = e.what();
        }
      },
      options.sim.threads);

  for (std::size_t i = 0; i < cohort.size(); ++i) {
    if (slots[i]) result.predictions.push_back(*slots[i]);
    else result.skipped.push_back({cohort[i].patient_id, errors[i]});
  }
  const auto pairs = to_pairs(result.predictions);
  result.lmm = metrics::make_report(pairs, "lmm");
  if (options.censor_threshold) {
    auto censored = metrics::censor(pairs, *options.censor_threshold);
    result.censored_removed = censored.removed;
    result.censor_threshold = options.censor_threshold;
    result.lmm_censored = metrics::make_report(censored.kept, "lmm_censored");
  }

  KahanSum s;
  for (const auto& p : pairs) s.add(p.y);
  const double mean = s.value() / static_cast<double>(pairs.size());
  auto constant = pairs;
  for (auto& p : constant) p.y_hat = mean;
  result.constant_mean = metrics::make_report(constant, "constant_mean");
  return result;
}

std::string cost_report_json(const CostEvalResult& r) {
  nlohmann::ordered_json j;
  j["cohort"] = {{"input", r.filter.input},
                 {"included", r.filter.included},
                 {"excluded", {{"NO_RX", r.filter.no_rx},
                               {"CAPITATION", r.filter.capitation},
                               {"ENROLLMENT", r.filter.enrollment},
                               {"MISSING_ENROLLMENT_DATA", r.filter.missing_enrollment}}}};
  j["evaluated"] = r.predictions.size();
  j["skipped"] = r.skipped.size();
  j["lmm"] = report_json(r.lmm);
  if (r.lmm_censored) {
    j["censor_threshold"] = *r.censor_threshold;
    j["lmm_censored"] = report_json(*r.lmm_censored);
    j["censored_removed"] = r.censored_removed;
  }
  j["constant_mean"] = report_json(r.constant_mean);
  return j.dump();
}

std::string predictions_csv(const std::vector<PatientPrediction>& predictions) {
  std::string out = "patient_id,age,sex,actual,predicted\n";
  for (const auto& p : predictions) {
    out += csv_escape(p.patient_id) + "," + std::to_string(p.age) + "," + std::string(to_string(p.sex)) + "," +
           format_double(p.actual) + "," + format_double(p.predicted) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------

ConditionScorer monte_carlo_condition_scorer(const mc::SequenceModel& model, const Vocabulary& vocab,
                                             const ConditionMap& map, const SimulationDefaults& sim,
                                             double horizon_days) {
  std::vector<std::vector<std::string>> predicates;
  for (const auto& row : map.rows()) {
    std::vector<std::string> p;
    for (const auto& prefix : row.prefixes) p.push_back("DX:" + prefix);
    predicates.push_back(std::move(p));
  }
  return [&model, &vocab, &map, sim, horizon_days, predicates](const seq::TokenSequence& prompt, const PatientTimeline&,
                                                               std::uint64_t seed) {
    mc::SimulationRequest req;
    req.prompt = prompt;
    req.n_futures = sim.n_futures;
    req.horizon_days = horizon_days;
    req.temperature = sim.temperature;
    req.top_k = sim.top_k;
    req.base_seed = seed;
    req.threads = 1;
    const auto bundle = mc::simulate_futures(model, vocab, req);
    std::vector<double> scores;
    for (std::size_t i = 0; i < predicates.size(); ++i) {
      scores.push_back(mc::event_probability(bundle, vocab, predicates[i], map.rows()[i].ccw_name).any_time);
    }
    return scores;
  };
}

ConditionEvalResult run_condition_eval(const ConditionScorer& scorer, const Vocabulary& vocab,
                                       const std::vector<PatientTimeline>& timelines, const ConditionMap& map,
                                       const ConditionEvalOptions& options) {
  const auto window = target_window(options.target_year, options.window_months);
  const std::size_t nr = map.rows().size();
  std::vector<std::optional<std::vector<double>>> scores(timelines.size());
  std::vector<std::string> errors(timelines.size());
  parallel_for(
      timelines.size(),
      [&](std::size_t i) {
        const auto& tl = timelines[i];
        try {
          const auto prompt = baseline_prompt(tl, options.baseline_year, vocab, options.policy);
          auto s = scorer(prompt, tl, patient_seed(options.sim.seed, tl.patient_id));
          if (s.size() != nr) throw Error(ErrorCode::ConfigError, "scorer returned wrong number of scores");
          scores[i] = std::move(s);
        } catch (const Error& e) {
          errors[i] = e.what();
        }
      },
      options.sim.threads);

  ConditionEvalResult result;
  std::vector<std::vector<metrics::Scored>> per_row(nr);
  for (std::size_t i = 0; i < timelines.size(); ++i) {
    if (!scores[i]) {
      result.skipped.push_back({timelines[i].patient_id, errors[i]});
      continue;
    }
    const auto labels = label_chronic(timelines[i], map, window);
    for (std::size_t r = 0; r < nr; ++r) per_row[r].push_back({(*scores[i])[r], labels[r]});
  }
  result.cohort_size = timelines.size() - result.skipped.size();

  KahanSum macro;
  for (std::size_t r = 0; r < nr; ++r) {
    const auto& row = map.rows()[r];
    ConditionEvalRow out{row.ccw_name, row.caliber_name, 0, 0.0, std::nullopt, std::nullopt};
    for (const auto& s : per_row[r]) out.n_positive += s.label ? 1 : 0;
    if (result.cohort_size) out.occurrence_ratio = static_cast<double>(out.n_positive) / static_cast<double>(result.cohort_size);
    if (out.n_positive > 0 && out.n_positive < result.cohort_size) {
      out.auroc = metrics::auroc(per_row[r]);
      out.auprc = metrics::auprc(per_row[r]);
    }
    if (row.mapped()) {
      if (out.auroc) {
        macro.add(*out.auroc);
        ++result.macro_count;
      } else {
        ++result.mapped_single_class;
      }
    }
    result.rows.push_back(std::move(out));
  }
  if (result.macro_count) result.macro_auroc = macro.value() / static_cast<double>(result.macro_count);
  std::stable_sort(result.rows.begin(), result.rows.end(),
                   [](const auto& a, const auto& b) { return a.occurrence_ratio > b.occurrence_ratio; });
  return result;
}

std::string condition_report_json(const ConditionEvalResult& r) {
  nlohmann::ordered_json j;
  j["cohort_size"] = r.cohort_size;
  j["skipped"] = r.skipped.size();
  j["macro_auroc"] = optional_number(r.macro_auroc);
  j["macro_count"] = r.macro_count;
  j["mapped_single_class"] = r.mapped_single_class;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"ccw_name", row.ccw_name},
                    {"caliber_name", row.caliber_name ? *row.caliber_name : std::string(kNotMapped)},
                    {"n_positive", row.n_positive},
                    {"occurrence_ratio", row.occurrence_ratio},
                    {"auroc", optional_number(row.auroc)},
                    {"auprc", optional_number(row.auprc)}});
  }
  j["conditions"] = rows;
  return j.dump();
}

std::string condition_rows_csv(const ConditionEvalResult& r) {
  std::string out = "ccw_name,caliber_name,n_positive,occurrence_ratio,auroc,auprc\n";
  for (const auto& row : r.rows) {
    out += csv_escape(row.ccw_name) + "," + csv_escape(row.caliber_name ? *row.caliber_name : std::string(kNotMapped)) +
           "," + std::to_string(row.n_positive) + "," + format_double(row.occurrence_ratio) + "," +
           (row.auroc ? format_double(*row.auroc) : std::string()) + "," +
           (row.auprc ? format_double(*row.auprc) : std::string()) + "\n";
  }
  return out;
}

}  // namespace lmm::cohort
