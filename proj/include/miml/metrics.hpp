#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "miml/checkpoint.hpp"
#include "miml/dataset.hpp"
#include "miml/tensor.hpp"

namespace miml {

inline constexpr double kDecisionThreshold = 0.5;

/// 1 where score > threshold (strict), else 0.
Tensor binarize(const Tensor& scores, double threshold = kDecisionThreshold);

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

enum class ClassSide { positive, negative };

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Per-label counts over observed entries only. `predictions`, `labels` and
/// `mask` are [B × L] 0/1 tensors.
std::vector<ConfusionCounts> confusion_counts(const Tensor& predictions, const Tensor& labels, const Tensor& mask);

/// Precision, recall and F1 of one class. A 0/0 ratio counts as 0 and
/// emits a warning.
Prf class_prf(const ConfusionCounts& counts, ClassSide side);

/// Unweighted mean of the positive- and negative-class metrics.
Prf instrument_metrics(const ConfusionCounts& counts);

struct LabelMetrics {
  std::string label;
  ConfusionCounts counts;
  Prf positive;
  Prf negative;
  Prf macro;
};

struct EvalReport {
  std::uint64_t seed = 0;
  double threshold = kDecisionThreshold;
  std::vector<LabelMetrics> labels;
  Prf overall;  // unweighted mean of the per-label macro metrics
};

EvalReport build_report(const std::vector<ConfusionCounts>& counts, const std::vector<std::string>& label_names,
                        std::uint64_t seed, double threshold = kDecisionThreshold);

/// Eval-mode bag scores for the given bags, [B × L].
Tensor predict_scores(const ModelParams& params, const Dataset& dataset, std::span<const std::size_t> indices);

/// Scores one split; unobserved labels are left out of every count.
EvalReport evaluate(const Checkpoint& checkpoint, const Dataset& dataset, Split split = Split::test,
                    double threshold = kDecisionThreshold);

// CSV columns: seed,label,pos_P,pos_R,pos_F1,neg_P,neg_R,neg_F1,macro_P,macro_R,macro_F1
// with one row per label followed by an OVERALL row (whose pos/neg columns
// hold the label means of those columns).
std::string report_csv(const EvalReport& report);
EvalReport parse_report_csv(std::string_view text);

/// Box-plot statistics of one metric across seeds. Quartiles use linear
/// interpolation between order statistics.
struct MetricSummary {
  std::string metric;
  double min = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
  double max = 0.0;
  double mean = 0.0;
};

double quantile(std::vector<double> values, double q);
MetricSummary summarize(std::string metric, const std::vector<double>& values);

/// One summary per "<label or OVERALL>/<column>" metric.
std::vector<MetricSummary> aggregate_seeds(const std::vector<EvalReport>& reports);
// CSV columns: metric,min,q1,median,q3,max,mean
std::string summary_csv(const std::vector<MetricSummary>& rows);

}  // namespace miml
