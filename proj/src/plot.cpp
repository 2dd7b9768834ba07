#include "lmm/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace lmm::plot {

namespace {

constexpr double kWidth = 720, kHeight = 440;
constexpr double kLeft = 80, kRight = 20, kTop = 40, kBottom = 60;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

std::string px(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", x);
  return buf;
}

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Scale {
  double lo = 0, hi = 1;
  bool log = false;
  double a = 0, b = 1;  // pixel range

  double map(double v) const {
    const double t = log ? (std::log10(v) - lo) / (hi - lo) : (v - lo) / (hi - lo);
    return a + t * (b - a);
  }
  std::vector<double> ticks() const {
    std::vector<double> out;
    if (log) {
      for (double e = std::ceil(lo); e <= hi + 1e-9; e += 1) out.push_back(std::pow(10.0, e));
      if (out.size() < 2) out = {std::pow(10.0, lo), std::pow(10.0, hi)};
    } else {
      for (int i = 0; i <= 5; ++i) out.push_back(lo + (hi - lo) * i / 5.0);
    }
    return out;
  }
};

bool usable(double v, bool log) { return std::isfinite(v) && (!log || v > 0); }

Scale fit(std::vector<double> values, bool log, double a, double b) {
  Scale s;
  s.log = log;
  s.a = a;
  s.b = b;
  values.erase(std::remove_if(values.begin(), values.end(), [&](double v) { return !usable(v, log); }), values.end());
  if (values.empty()) return s;
  auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  s.lo = log ? std::floor(std::log10(*mn)) : std::min(0.0, *mn);
  s.hi = log ? std::ceil(std::log10(*mx)) : *mx;
  if (s.hi <= s.lo) s.hi = s.lo + 1;
  return s;
}

std::string frame(const Axes& axes, const Scale& sx, const Scale& sy, bool ticks = true) {
  std::string o = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + px(kWidth) + "\" height=\"" + px(kHeight) +
                  "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o += "<text x=\"" + px(kWidth / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" + escape(axes.title) +
       "</text>\n";
  o += "<line x1=\"" + px(kLeft) + "\" y1=\"" + px(kHeight - kBottom) + "\" x2=\"" + px(kWidth - kRight) + "\" y2=\"" +
       px(kHeight - kBottom) + "\" stroke=\"black\"/>\n";
  o += "<line x1=\"" + px(kLeft) + "\" y1=\"" + px(kTop) + "\" x2=\"" + px(kLeft) + "\" y2=\"" + px(kHeight - kBottom) +
       "\" stroke=\"black\"/>\n";
  if (ticks) {
    for (double t : sx.ticks()) {
      const double x = sx.map(t);
      o += "<line x1=\"" + px(x) + "\" y1=\"" + px(kHeight - kBottom) + "\" x2=\"" + px(x) + "\" y2=\"" +
           px(kHeight - kBottom + 5) + "\" stroke=\"black\"/>\n";
      o += "<text x=\"" + px(x) + "\" y=\"" + px(kHeight - kBottom + 18) + "\" text-anchor=\"middle\">" + num(t) +
           "</text>\n";
    }
  }
  for (double t : ticks ? sy.ticks() : std::vector<double>{}) {
    const double y = sy.map(t);
    o += "<line x1=\"" + px(kLeft - 5) + "\" y1=\"" + px(y) + "\" x2=\"" + px(kLeft) + "\" y2=\"" + px(y) +
         "\" stroke=\"black\"/>\n";
    o += "<text x=\"" + px(kLeft - 8) + "\" y=\"" + px(y + 4) + "\" text-anchor=\"end\">" + num(t) + "</text>\n";
  }
  o += "<text x=\"" + px((kLeft + kWidth - kRight) / 2) + "\" y=\"" + px(kHeight - 15) + "\" text-anchor=\"middle\">" +
       escape(axes.x_label) + "</text>\n";
  o += "<text transform=\"translate(18," + px((kTop + kHeight - kBottom) / 2) +
       ") rotate(-90)\" text-anchor=\"middle\">" + escape(axes.y_label) + "</text>\n";
  return o;
}

std::string legend(const std::vector<Series>& series) {
  std::string o;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = kTop + 8 + 16.0 * static_cast<double>(i);
    o += "<rect x=\"" + px(kWidth - kRight - 150) + "\" y=\"" + px(y - 9) + "\" width=\"10\" height=\"10\" fill=\"" +
         kPalette[i % 6] + "\"/>\n";
    o += "<text x=\"" + px(kWidth - kRight - 135) + "\" y=\"" + px(y) + "\">" + escape(series[i].name) + "</text>\n";
  }
  return o;
}

std::pair<Scale, Scale> scales(const Axes& axes, const std::vector<Series>& series) {
  std::vector<double> xs, ys;
  for (const auto& s : series) {
    for (const auto& p : s.points) {
      xs.push_back(p.x);
      ys.push_back(p.y);
    }
  }
  return {fit(xs, axes.log_x, kLeft, kWidth - kRight), fit(ys, axes.log_y, kHeight - kBottom, kTop)};
}

std::vector<std::string> fields(std::string_view line) { return split_csv_line(line); }

std::vector<std::string> data_lines(std::string_view text, std::string_view expected_header) {
  auto lines = split(text, '\n');
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  if (lines.empty() || trim(lines.front()) != expected_header) {
    throw Error(ErrorCode::FormatError, "expected CSV header '" + std::string(expected_header) + "'");
  }
  lines.erase(lines.begin());
  return lines;
}

double to_double(const std::string& s) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::FormatError, "not a number: '" + s + "'");
  }
}

}  // namespace

std::string line_chart(const Axes& axes, const std::vector<Series>& series) {
  const auto [sx, sy] = scales(axes, series);
  std::string o = frame(axes, sx, sy);
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::string pts;
    for (const auto& p : series[i].points) {
      if (!usable(p.x, axes.log_x) || !usable(p.y, axes.log_y)) continue;
      pts += px(sx.map(p.x)) + "," + px(sy.map(p.y)) + " ";
    }
    o += "<polyline fill=\"none\" stroke=\"" + std::string(kPalette[i % 6]) + "\" stroke-width=\"2\" points=\"" + pts +
         "\"/>\n";
  }
  return o + legend(series) + "</svg>\n";
}

std::string scatter_chart(const Axes& axes, const std::vector<Series>& series) {
  const auto [sx, sy] = scales(axes, series);
  std::string o = frame(axes, sx, sy);
  for (std::size_t i = 0; i < series.size(); ++i) {
    for (const auto& p : series[i].points) {
      if (!usable(p.x, axes.log_x) || !usable(p.y, axes.log_y)) continue;
      o += "<circle cx=\"" + px(sx.map(p.x)) + "\" cy=\"" + px(sy.map(p.y)) + "\" r=\"2\" fill=\"" + kPalette[i % 6] +
           "\" fill-opacity=\"0.5\"/>\n";
    }
  }
  return o + legend(series) + "</svg>\n";
}

std::string bar_chart(const Axes& axes, const std::vector<Bar>& bars) {
  std::vector<double> vs;
  for (const auto& b : bars) vs.push_back(b.value);
  Scale sx = fit(vs, axes.log_x, kLeft + 140, kWidth - kRight);
  std::string o = frame(axes, sx, sx, false);
  for (double t : sx.ticks()) {
    const double x = sx.map(t);
    o += "<text x=\"" + px(x) + "\" y=\"" + px(kHeight - kBottom + 18) + "\" text-anchor=\"middle\">" + num(t) +
         "</text>\n";
  }
  const double band = (kHeight - kBottom - kTop) / std::max<double>(1.0, static_cast<double>(bars.size()));
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double y = kTop + band * static_cast<double>(i);
    const double x0 = sx.map(axes.log_x ? std::pow(10.0, sx.lo) : std::max(sx.lo, 0.0));
    const double x1 = usable(bars[i].value, axes.log_x) ? sx.map(bars[i].value) : x0;
    o += "<rect x=\"" + px(std::min(x0, x1)) + "\" y=\"" + px(y + band * 0.15) + "\" width=\"" +
         px(std::abs(x1 - x0)) + "\" height=\"" + px(band * 0.7) + "\" fill=\"" + kPalette[0] + "\"/>\n";
    o += "<text x=\"" + px(kLeft + 135) + "\" y=\"" + px(y + band * 0.5 + 4) + "\" text-anchor=\"end\" font-size=\"" +
         px(std::min(12.0, band * 0.8)) + "\">" + escape(bars[i].label) + "</text>\n";
  }
  return o + "</svg>\n";
}

std::string series_csv(const std::vector<Series>& series) {
  std::string out = "series,x,y\n";
  for (const auto& s : series) {
    for (const auto& p : s.points) out += csv_escape(s.name) + "," + format_double(p.x) + "," + format_double(p.y) + "\n";
  }
  return out;
}

std::vector<Point> roc_points(std::span<const metrics::Scored> scores) {
  std::vector<metrics::Scored> v(scores.begin(), scores.end());
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::size_t pos = 0, neg = 0;
  for (const auto& s : v) (s.label ? pos : neg)++;
  if (pos == 0 || neg == 0) throw Error(ErrorCode::SingleClass, "ROC curve needs both classes");
  std::vector<Point> out{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    while (j < v.size() && v[j].score == v[i].score) {
      (v[j].label ? tp : fp)++;
      ++j;
    }
    out.push_back({static_cast<double>(fp) / static_cast<double>(neg), static_cast<double>(tp) / static_cast<double>(pos)});
    i = j;
  }
  return out;
}

Files cost_figures(const std::vector<cohort::PatientPrediction>& predictions) {
  Files files;
  Series scatter{"patients", {}};
  for (const auto& p : predictions) scatter.points.push_back({p.actual, p.predicted});
  files.emplace_back("cost_scatter.svg",
                     scatter_chart({"Predicted vs actual annual cost", "actual ($)", "predicted ($)", true, true},
                                   {scatter}));
  files.emplace_back("cost_scatter.csv", series_csv({scatter}));

  const auto pairs = cohort::to_pairs(predictions);
  if (pairs.empty()) return files;
  const double cutoff = metrics::upper_percentile_cutoff(pairs, 1.0);
  std::vector<metrics::Scored> scored;
  for (const auto& p : pairs) scored.push_back({p.y_hat, p.y >= cutoff});
  try {
    Series roc{"top 1% cost", roc_points(scored)};
    Series chance{"chance", {{0, 0}, {1, 1}}};
    files.emplace_back("top1_roc.svg", line_chart({"High-cost identification (top 1%), AUC " +
                                                       num(metrics::auroc(scored)),
                                                   "false positive rate", "true positive rate"},
                                                  {roc, chance}));
    files.emplace_back("top1_roc.csv", series_csv({roc}));
  } catch (const Error& e) {
    if (e.code() != ErrorCode::SingleClass) throw;
  }
  return files;
}

Files condition_figures(const std::vector<cohort::ConditionEvalRow>& rows) {
  std::vector<Bar> auroc, ratio;
  for (const auto& r : rows) {
    ratio.push_back({r.ccw_name, r.occurrence_ratio});
    if (r.auroc) auroc.push_back({r.ccw_name, *r.auroc});
  }
  Files files;
  files.emplace_back("condition_auroc.svg", bar_chart({"AUROC by condition", "AUROC", ""}, auroc));
  files.emplace_back("condition_occurrence.svg",
                     bar_chart({"Occurrence ratio by condition", "occurrence ratio", ""}, ratio));
  return files;
}

Files loss_figures(const std::vector<model::LossRecord>& history) {
  Series train{"train", {}}, val{"validation", {}};
  for (const auto& r : history) {
    train.points.push_back({static_cast<double>(r.step), r.train_loss});
    if (!std::isnan(r.val_loss)) val.points.push_back({static_cast<double>(r.step), r.val_loss});
  }
  Files files;
  files.emplace_back("loss.svg", line_chart({"Training loss", "step", "cross-entropy (nats)"}, {train, val}));
  files.emplace_back("loss.csv", series_csv({train, val}));
  return files;
}

std::vector<cohort::PatientPrediction> parse_predictions_csv(std::string_view text) {
  std::vector<cohort::PatientPrediction> out;
  for (const auto& line : data_lines(text, "patient_id,age,sex,actual,predicted")) {
    const auto f = fields(line);
    if (f.size() != 5) throw Error(ErrorCode::FormatError, "prediction row needs 5 fields: " + line);
    out.push_back({f[0], to_double(f[3]), to_double(f[4]), static_cast<int>(to_double(f[1])), parse_sex(f[2])});
  }
  return out;
}

std::vector<cohort::ConditionEvalRow> parse_condition_rows_csv(std::string_view text) {
  std::vector<cohort::ConditionEvalRow> out;
  for (const auto& line : data_lines(text, "ccw_name,caliber_name,n_positive,occurrence_ratio,auroc,auprc")) {
    const auto f = fields(line);
    if (f.size() != 6) throw Error(ErrorCode::FormatError, "condition row needs 6 fields: " + line);
    cohort::ConditionEvalRow r;
    r.ccw_name = f[0];
    if (f[1] != cohort::kNotMapped) r.caliber_name = f[1];
    r.n_positive = static_cast<std::size_t>(to_double(f[2]));
    r.occurrence_ratio = to_double(f[3]);
    if (!f[4].empty()) r.auroc = to_double(f[4]);
    if (!f[5].empty()) r.auprc = to_double(f[5]);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<model::LossRecord> parse_history_csv(std::string_view text) {
  std::vector<model::LossRecord> out;
  for (const auto& line : data_lines(text, "step,train_loss,val_loss")) {
    const auto f = split(line, ',');
    if (f.size() != 3) throw Error(ErrorCode::FormatError, "history row needs 3 fields: " + line);
    model::LossRecord r;
    r.step = static_cast<int>(to_double(f[0]));
    r.train_loss = to_double(f[1]);
    r.val_loss = trim(f[2]).empty() ? std::numeric_limits<double>::quiet_NaN() : to_double(trim(f[2]));
    out.push_back(r);
  }
  return out;
}

}  // namespace lmm::plot
