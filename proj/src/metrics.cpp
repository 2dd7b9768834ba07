#include "lmm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "json.hpp"

namespace lmm::metrics {

namespace {

double mean_actual(std::span<const EvalPair> pairs) {
  KahanSum s;
  for (const auto& p : pairs) s.add(p.y);
  return s.value() / static_cast<double>(pairs.size());
}

std::vector<Scored> top_labels(std::span<const EvalPair> pairs, double percent) {
  const double cut = upper_percentile_cutoff(pairs, percent);
  std::vector<Scored> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({p.y_hat, p.y >= cut});
  return out;
}

}  // namespace

double ConfusionCounts::tpr() const { return tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0; }
double ConfusionCounts::fpr() const { return fp + tn ? static_cast<double>(fp) / static_cast<double>(fp + tn) : 0.0; }
double ConfusionCounts::precision() const {
  return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
}

ConfusionCounts confusion_at(std::span<const Scored> scores, double threshold) {
  ConfusionCounts c;
  for (const auto& s : scores) {
    const bool pred = s.score >= threshold;
    if (pred && s.label) ++c.tp;
    else if (pred) ++c.fp;
    else if (s.label) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double r_squared(std::span<const EvalPair> pairs) {
  if (pairs.size() < 2) throw Error(ErrorCode::DegenerateActuals, "r_squared needs at least 2 pairs");
  const double ybar = mean_actual(pairs);
  KahanSum ss_res, ss_tot;
  for (const auto& p : pairs) {
    ss_res.add((p.y - p.y_hat) * (p.y - p.y_hat));
    ss_tot.add((p.y - ybar) * (p.y - ybar));
  }
  if (ss_tot.value() == 0.0) throw Error(ErrorCode::DegenerateActuals, "actuals have zero variance");
  return 1.0 - ss_res.value() / ss_tot.value();
}

double mae(std::span<const EvalPair> pairs) {
  if (pairs.empty()) throw Error(ErrorCode::EmptyInput, "mae of no pairs");
  KahanSum s;
  for (const auto& p : pairs) s.add(std::abs(p.y_hat - p.y));
  return s.value() / static_cast<double>(pairs.size());
}

double nmae(std::span<const EvalPair> pairs) {
  if (pairs.empty()) throw Error(ErrorCode::EmptyInput, "nmae of no pairs");
  const double ybar = mean_actual(pairs);
  if (!(ybar > 0.0)) throw Error(ErrorCode::ZeroMeanActual, "mean actual is not positive");
  return mae(pairs) / ybar * 100.0;
}

double auroc(std::span<const Scored> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a].score < scores[b].score; });
  // Counts of (positive, negative) pairs in half units so the result is exact.
  std::uint64_t negatives_below = 0, half_units = 0, pos = 0, neg = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    std::uint64_t p = 0, n = 0;
    while (j < idx.size() && scores[idx[j]].score == scores[idx[i]].score) {
      (scores[idx[j]].label ? p : n) += 1;
      ++j;
    }
    half_units += p * (2 * negatives_below + n);
    negatives_below += n;
    pos += p;
    neg += n;
    i = j;
  }
  if (pos == 0 || neg == 0) throw Error(ErrorCode::SingleClass, "auroc needs both classes");
  return static_cast<double>(half_units) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

double auprc(std::span<const Scored> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a].score > scores[b].score; });
  std::size_t total_pos = 0;
  for (const auto& s : scores) total_pos += s.label ? 1 : 0;
  if (total_pos == 0) throw Error(ErrorCode::NoPositives, "auprc needs a positive");
  KahanSum ap;
  std::size_t tp = 0, seen = 0, i = 0;
  while (i < idx.size()) {
    std::size_t j = i, group_pos = 0;
    while (j < idx.size() && scores[idx[j]].score == scores[idx[i]].score) {
      group_pos += scores[idx[j]].label ? 1 : 0;
      ++j;
    }
    seen += j - i;
    tp += group_pos;
    if (group_pos) {
      ap.add(static_cast<double>(group_pos) / static_cast<double>(total_pos) * static_cast<double>(tp) /
             static_cast<double>(seen));
    }
    i = j;
  }
  return ap.value();
}

double pearson_r_squared(std::span<const EvalPair> pairs) {
  if (pairs.size() < 2) throw Error(ErrorCode::ZeroVariance, "pearson needs at least 2 pairs");
  KahanSum sy, sp;
  for (const auto& p : pairs) {
    sy.add(p.y);
    sp.add(p.y_hat);
  }
  const double n = static_cast<double>(pairs.size());
  const double my = sy.value() / n, mp = sp.value() / n;
  KahanSum cov, vy, vp;
  for (const auto& p : pairs) {
    cov.add((p.y - my) * (p.y_hat - mp));
    vy.add((p.y - my) * (p.y - my));
    vp.add((p.y_hat - mp) * (p.y_hat - mp));
  }
  if (vy.value() == 0.0 || vp.value() == 0.0) throw Error(ErrorCode::ZeroVariance, "a variable has zero variance");
  return cov.value() * cov.value() / (vy.value() * vp.value());
}

double upper_percentile_cutoff(std::span<const EvalPair> pairs, double percent) {
  if (pairs.empty()) throw Error(ErrorCode::EmptyInput, "percentile of no pairs");
  if (!(percent > 0.0 && percent <= 100.0)) throw Error(ErrorCode::ConfigError, "percent must lie in (0, 100]");
  std::vector<double> ys;
  ys.reserve(pairs.size());
  for (const auto& p : pairs) ys.push_back(p.y);
  std::sort(ys.begin(), ys.end(), std::greater<>());
  // Nearest rank from the top: the ceil(p/100 * n)-th largest value.
  const auto rank = static_cast<std::size_t>(std::ceil(percent / 100.0 * static_cast<double>(ys.size())));
  return ys[std::max<std::size_t>(rank, 1) - 1];
}

double top_percentile_auc(std::span<const EvalPair> pairs, double percent) {
  return auroc(top_labels(pairs, percent));
}

CensorResult censor(std::span<const EvalPair> pairs, double threshold) {
  CensorResult r;
  for (const auto& p : pairs) {
    if (p.y_hat > threshold) ++r.removed;
    else r.kept.push_back(p);
  }
  return r;
}

std::string age_band(int age) {
  if (age < 0) return "unknown";
  if (age <= 17) return "0-17";
  if (age <= 34) return "18-34";
  if (age <= 49) return "35-49";
  if (age <= 64) return "50-64";
  return "65+";
}

SliceTable sliced_nmae(std::span<const EvalPair> pairs) {
  SliceTable t;
  std::vector<std::pair<std::string, std::vector<EvalPair>>> slices;
  for (const char* band : {"0-17", "18-34", "35-49", "50-64", "65+"}) slices.push_back({std::string("age:") + band, {}});
  for (const char* sex : {"F", "M", "U"}) slices.push_back({std::string("sex:") + sex, {}});
  for (const auto& p : pairs) {
    const std::string band = "age:" + age_band(p.age);
    for (auto& [name, members] : slices) {
      if (name == band || name == "sex:" + std::string(to_string(p.sex))) members.push_back(p);
    }
  }
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (auto& [name, members] : slices) {
    if (members.empty()) {
      t.empty_slices.push_back(name);
      continue;
    }
    SliceRow row{name, members.size(), std::nullopt};
    if (mean_actual(members) > 0.0) {
      row.nmae = nmae(members);
      lo = std::min(lo, *row.nmae);
      hi = std::max(hi, *row.nmae);
    }
    t.rows.push_back(row);
  }
  t.spread = hi >= lo ? hi - lo : 0.0;
  return t;
}

MetricReport make_report(std::span<const EvalPair> pairs, const std::string& model) {
  MetricReport r;
  r.model = model;
  r.n = pairs.size();
  r.r_squared = r_squared(pairs);
  r.mae = mae(pairs);
  r.nmae = nmae(pairs);
  try {
    r.pearson_r_squared = pearson_r_squared(pairs);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::ZeroVariance) throw;
  }
  try {
    r.top1_auc = top_percentile_auc(pairs, 1.0);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::SingleClass) throw;
  }
  r.slices = sliced_nmae(pairs);
  return r;
}

std::string report_to_json(const MetricReport& r) {
  nlohmann::ordered_json j;
  j["model"] = r.model;
  j["n"] = r.n;
  j["r_squared"] = r.r_squared;
  j["mae"] = r.mae;
  j["nmae"] = r.nmae;
  j["pearson_r_squared"] =
      r.pearson_r_squared ? nlohmann::ordered_json(*r.pearson_r_squared) : nlohmann::ordered_json(nullptr);
  j["top1_auc"] = r.top1_auc ? nlohmann::ordered_json(*r.top1_auc) : nlohmann::ordered_json(nullptr);
  auto rows = nlohmann::ordered_json::array();
  for (const auto& s : r.slices.rows) {
    rows.push_back({{"slice", s.slice}, {"n", s.n},
                    {"nmae", s.nmae ? nlohmann::ordered_json(*s.nmae) : nlohmann::ordered_json(nullptr)}});
  }
  j["slices"] = rows;
  j["empty_slices"] = r.slices.empty_slices;
  j["slice_spread"] = r.slices.spread;
  return j.dump();
}

std::string table1_csv(std::span<const MetricReport> reports) {
  std::string out = "model,r_squared,nmae\n";
  for (const auto& r : reports) out += csv_escape(r.model) + "," + format_double(r.r_squared) + "," + format_double(r.nmae) + "\n";
  return out;
}

std::string slices_csv(const SliceTable& table) {
  std::string out = "slice,n,nmae\n";
  for (const auto& r : table.rows) {
    out += r.slice + "," + std::to_string(r.n) + "," + (r.nmae ? format_double(*r.nmae) : std::string()) + "\n";
  }
  return out;
}

}  // namespace lmm::metrics
