#ifndef LMM_METRICS_HPP
#define LMM_METRICS_HPP

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lmm/common.hpp"
#include "lmm/vocab.hpp"

namespace lmm::metrics {

struct EvalPair {
  double y = 0.0;      // actual
  double y_hat = 0.0;  // predicted
  int age = -1;        // -1 when unknown
  Sex sex = Sex::U;
};

struct Scored {
  double score = 0.0;
  bool label = false;
};

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  double tpr() const;
  double fpr() const;
  double precision() const;
  double recall() const { return tpr(); }
};

/// Predicts positive when score >= threshold.
ConfusionCounts confusion_at(std::span<const Scored> scores, double threshold);

/// Throws DegenerateActuals (n < 2 or zero variance).
double r_squared(std::span<const EvalPair> pairs);
/// Throws EmptyInput.
double mae(std::span<const EvalPair> pairs);
/// Percent. Throws ZeroMeanActual.
double nmae(std::span<const EvalPair> pairs);
/// Mann-Whitney AUROC with ties counted half. Throws SingleClass.
double auroc(std::span<const Scored> scores);
/// Average precision with equal scores grouped into one threshold. Throws NoPositives.
double auprc(std::span<const Scored> scores);
/// Throws ZeroVariance.
double pearson_r_squared(std::span<const EvalPair> pairs);

/// Nearest-rank value at the upper p percent of actuals.
double upper_percentile_cutoff(std::span<const EvalPair> pairs, double percent);
/// AUROC of predicted cost against labels "actual >= upper p% cutoff".
double top_percentile_auc(std::span<const EvalPair> pairs, double percent = 1.0);

struct CensorResult {
  std::vector<EvalPair> kept;
  std::size_t removed = 0;
};

/// Drops pairs whose prediction exceeds the threshold.
CensorResult censor(std::span<const EvalPair> pairs, double threshold = 250000.0);

struct SliceRow {
  std::string slice;  // e.g. "age:18-34" or "sex:F"
  std::size_t n = 0;
  std::optional<double> nmae;  // empty when the slice mean is zero
};

struct SliceTable {
  std::vector<SliceRow> rows;
  std::vector<std::string> empty_slices;
  double spread = 0.0;  // max - min reported nmae
};

/// Age bands 0-17, 18-34, 35-49, 50-64, 65+ and sex F/M/U.
SliceTable sliced_nmae(std::span<const EvalPair> pairs);
std::string age_band(int age);

struct MetricReport {
  std::string model = "lmm";
  std::size_t n = 0;
  double r_squared = 0.0;
  double mae = 0.0;
  double nmae = 0.0;
  std::optional<double> pearson_r_squared;  // empty for a constant predictor
  std::optional<double> top1_auc;
  SliceTable slices;
};

/// Computes every statistic; Pearson r^2 and top-percentile AUC are left
/// empty when they are undefined for the sample.
MetricReport make_report(std::span<const EvalPair> pairs, const std::string& model = "lmm");
std::string report_to_json(const MetricReport& report);
/// `model,r_squared,nmae` header plus one row per report.
std::string table1_csv(std::span<const MetricReport> reports);
std::string slices_csv(const SliceTable& table);

}  // namespace lmm::metrics

#endif  // LMM_METRICS_HPP
