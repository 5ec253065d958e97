#include "miml/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "miml/errors.hpp"
#include "miml/fs_util.hpp"
#include "miml/log.hpp"

namespace miml {

Tensor binarize(const Tensor& scores, double threshold) {
  Tensor out(scores.shape());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] > threshold ? 1.0 : 0.0;
  return out;
}

std::vector<ConfusionCounts> confusion_counts(const Tensor& pred, const Tensor& labels, const Tensor& mask) {
  if (pred.rank() != 2 || labels.shape() != pred.shape() || mask.shape() != pred.shape()) {
    throw ContractError("confusion_counts: predictions, labels and mask must share a [B x L] shape");
  }
  const std::size_t b = pred.dim(0), l = pred.dim(1);
  std::vector<ConfusionCounts> counts(l);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < l; ++j) {
      if (mask.at(i, j) == 0.0) continue;
      const bool p = pred.at(i, j) != 0.0, y = labels.at(i, j) != 0.0;
      auto& c = counts[j];
      if (p && y) ++c.tp;
      else if (p) ++c.fp;
      else if (y) ++c.fn;
      else ++c.tn;
    }
  return counts;
}

namespace {

double ratio(std::size_t num, std::size_t den, const char* what) {
  if (den == 0) {
    log::warn(std::string(what) + " is 0/0; reporting 0");
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

Prf class_prf(const ConfusionCounts& c, ClassSide side) {
  Prf m;
  if (side == ClassSide::positive) {
    m.precision = ratio(c.tp, c.tp + c.fp, "positive-class precision");
    m.recall = ratio(c.tp, c.tp + c.fn, "positive-class recall");
  } else {
    m.precision = ratio(c.tn, c.tn + c.fn, "negative-class precision");
    m.recall = ratio(c.tn, c.tn + c.fp, "negative-class recall");
  }
  m.f1 = harmonic(m.precision, m.recall);
  return m;
}

namespace {

Prf mean_of(const Prf& a, const Prf& b) {
  return Prf{(a.precision + b.precision) / 2.0, (a.recall + b.recall) / 2.0, (a.f1 + b.f1) / 2.0};
}

}  // namespace

Prf instrument_metrics(const ConfusionCounts& c) {
  return mean_of(class_prf(c, ClassSide::positive), class_prf(c, ClassSide::negative));
}

EvalReport build_report(const std::vector<ConfusionCounts>& counts, const std::vector<std::string>& names,
                        std::uint64_t seed, double threshold) {
  if (counts.size() != names.size()) throw ContractError("build_report: label count mismatch");
  if (counts.empty()) throw ContractError("build_report: no labels");
  EvalReport r{.seed = seed, .threshold = threshold};
  for (std::size_t j = 0; j < counts.size(); ++j) {
    LabelMetrics lm{.label = names[j], .counts = counts[j]};
    lm.positive = class_prf(counts[j], ClassSide::positive);
    lm.negative = class_prf(counts[j], ClassSide::negative);
    lm.macro = mean_of(lm.positive, lm.negative);
    r.overall.precision += lm.macro.precision;
    r.overall.recall += lm.macro.recall;
    r.overall.f1 += lm.macro.f1;
    r.labels.push_back(std::move(lm));
  }
  const double n = static_cast<double>(counts.size());
  r.overall.precision /= n;
  r.overall.recall /= n;
  r.overall.f1 /= n;
  return r;
}

Tensor predict_scores(const ModelParams& params, const Dataset& ds, std::span<const std::size_t> indices) {
  constexpr std::size_t kChunk = 256;
  const std::size_t l = num_labels(params);
  Tensor scores({indices.size(), l});
  for (std::size_t start = 0; start < indices.size(); start += kChunk) {
    const auto chunk = indices.subspan(start, std::min(kChunk, indices.size() - start));
    const auto out = predict(params, gather_features(ds, chunk));
    std::copy(out.bag_scores.values().begin(), out.bag_scores.values().end(), scores.data().begin() + start * l);
  }
  return scores;
}

EvalReport evaluate(const Checkpoint& ck, const Dataset& ds, Split split, double threshold) {
  if (ck.meta.label_names != ds.label_names) throw DataError("checkpoint and dataset label vocabularies differ");
  if (ck.meta.feature_dim != ds.feature_dim()) throw DataError("checkpoint and dataset feature dimensions differ");
  if (ck.meta.kind == ModelKind::fc && ck.meta.num_instances != ds.num_instances()) {
    throw DataError("fc checkpoint was trained on bags of " + std::to_string(ck.meta.num_instances) + " instances");
  }
  const auto idx = ds.indices(split);
  if (idx.empty()) throw DataError("split '" + std::string(split_name(split)) + "' is empty");
  const Tensor scores = predict_scores(ck.params, ds, idx);
  const auto [labels, mask] = gather_labels(ds, idx);
  return build_report(confusion_counts(binarize(scores, threshold), labels, mask), ds.label_names, ck.meta.seed,
                      threshold);
}

namespace {

constexpr std::string_view kReportHeader = "seed,label,pos_P,pos_R,pos_F1,neg_P,neg_R,neg_F1,macro_P,macro_R,macro_F1";
constexpr const char* kColumns[] = {"pos_P", "pos_R", "pos_F1", "neg_P", "neg_R", "neg_F1", "macro_P", "macro_R", "macro_F1"};

std::array<double, 9> columns_of(const LabelMetrics& m) {
  return {m.positive.precision, m.positive.recall, m.positive.f1, m.negative.precision, m.negative.recall,
          m.negative.f1,        m.macro.precision,    m.macro.recall,    m.macro.f1};
}

std::array<double, 9> overall_columns(const EvalReport& r) {
  std::array<double, 9> acc{};
  for (const auto& m : r.labels) {
    const auto c = columns_of(m);
    for (std::size_t k = 0; k < 6; ++k) acc[k] += c[k];
  }
  for (std::size_t k = 0; k < 6; ++k) acc[k] /= static_cast<double>(r.labels.size());
  acc[6] = r.overall.precision;
  acc[7] = r.overall.recall;
  acc[8] = r.overall.f1;
  return acc;
}

double parse_number(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw DataError("report CSV: bad number '" + s + "'");
  return v;
}

}  // namespace

std::string report_csv(const EvalReport& r) {
  std::ostringstream out;
  out << kReportHeader << '\n';
  auto row = [&](const std::string& label, const std::array<double, 9>& c) {
    out << r.seed << ',' << label;
    for (double v : c) out << ',' << format_double(v);
    out << '\n';
  };
  for (const auto& m : r.labels) row(m.label, columns_of(m));
  row("OVERALL", overall_columns(r));
  return out.str();
}

EvalReport parse_report_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) throw DataError("report CSV: unexpected header");
  EvalReport r;
  bool have_overall = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 11) throw DataError("report CSV: expected 11 columns in '" + line + "'");
    r.seed = static_cast<std::uint64_t>(parse_number(f[0]));
    std::array<double, 9> c{};
    for (std::size_t k = 0; k < 9; ++k) c[k] = parse_number(f[k + 2]);
    if (f[1] == "OVERALL") {
      r.overall = Prf{c[6], c[7], c[8]};
      have_overall = true;
      continue;
    }
    r.labels.push_back(LabelMetrics{.label = f[1],
                                    .counts = {},
                                    .positive = {c[0], c[1], c[2]},
                                    .negative = {c[3], c[4], c[5]},
                                    .macro = {c[6], c[7], c[8]}});
  }
  if (!have_overall || r.labels.empty()) throw DataError("report CSV: missing label rows or OVERALL row");
  return r;
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw ContractError("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

MetricSummary summarize(std::string metric, const std::vector<double>& values) {
  MetricSummary s{.metric = std::move(metric)};
  s.min = quantile(values, 0.0);
  s.q1 = quantile(values, 0.25);
  s.median = quantile(values, 0.5);
  s.q3 = quantile(values, 0.75);
  s.max = quantile(values, 1.0);
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  return s;
}

std::vector<MetricSummary> aggregate_seeds(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ContractError("aggregate_seeds needs at least one report");
  const auto& first = reports.front();
  for (const auto& r : reports) {
    if (r.labels.size() != first.labels.size()) throw DataError("aggregate_seeds: reports have different label sets");
    for (std::size_t j = 0; j < r.labels.size(); ++j)
      if (r.labels[j].label != first.labels[j].label) throw DataError("aggregate_seeds: reports have different label sets");
  }

  std::vector<MetricSummary> rows;
  auto add_group = [&](const std::string& name, auto&& columns) {
    for (std::size_t k = 0; k < 9; ++k) {
      std::vector<double> values;
      for (const auto& r : reports) values.push_back(columns(r)[k]);
      rows.push_back(summarize(name + "/" + kColumns[k], values));
    }
  };
  add_group("OVERALL", [](const EvalReport& r) { return overall_columns(r); });
  for (std::size_t j = 0; j < first.labels.size(); ++j) {
    add_group(first.labels[j].label, [j](const EvalReport& r) { return columns_of(r.labels[j]); });
  }
  return rows;
}

std::string summary_csv(const std::vector<MetricSummary>& rows) {
  std::ostringstream out;
  out << "metric,min,q1,median,q3,max,mean\n";
  for (const auto& s : rows) {
    out << s.metric << ',' << format_double(s.min) << ',' << format_double(s.q1) << ',' << format_double(s.median)
        << ',' << format_double(s.q3) << ',' << format_double(s.max) << ',' << format_double(s.mean) << '\n';
  }
  return out.str();
}

}  // namespace miml
