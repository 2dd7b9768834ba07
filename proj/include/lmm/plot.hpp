#ifndef LMM_PLOT_HPP
#define LMM_PLOT_HPP

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lmm/cohort_eval.hpp"
#include "lmm/metrics.hpp"
#include "lmm/model.hpp"

namespace lmm::plot {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct Series {
  std::string name;
  std::vector<Point> points;
};

struct Axes {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;  // non-positive values are dropped on log axes
  bool log_y = false;
};

struct Bar {
  std::string label;
  double value = 0.0;
};

std::string line_chart(const Axes& axes, const std::vector<Series>& series);
std::string scatter_chart(const Axes& axes, const std::vector<Series>& series);
/// Horizontal bars, one per label, in the given order.
std::string bar_chart(const Axes& axes, const std::vector<Bar>& bars);

/// `series,x,y` rows.
std::string series_csv(const std::vector<Series>& series);

/// ROC curve from (0,0) to (1,1); tied scores form one step.
std::vector<Point> roc_points(std::span<const metrics::Scored> scores);

/// Named output files (file name, contents).
using Files = std::vector<std::pair<std::string, std::string>>;

/// Predicted vs actual cost scatter and the top-1% ROC curve.
Files cost_figures(const std::vector<cohort::PatientPrediction>& predictions);
/// Per-condition AUROC and occurrence ratio bars.
Files condition_figures(const std::vector<cohort::ConditionEvalRow>& rows);
/// Train and validation loss curves.
Files loss_figures(const std::vector<model::LossRecord>& history);

// Readers for the CSV files the evaluation commands write.
std::vector<cohort::PatientPrediction> parse_predictions_csv(std::string_view text);
std::vector<cohort::ConditionEvalRow> parse_condition_rows_csv(std::string_view text);
std::vector<model::LossRecord> parse_history_csv(std::string_view text);

}  // namespace lmm::plot

#endif  // LMM_PLOT_HPP
