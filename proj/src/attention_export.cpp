#include "miml/attention_export.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>

#include "miml/errors.hpp"
#include "miml/fs_util.hpp"

namespace miml {

using nlohmann::json;

std::vector<SampleAttention> export_attention(const Checkpoint& ck, const Dataset& ds,
                                              const std::vector<std::string>& keys) {
  if (ck.meta.kind == ModelKind::fc) throw ContractError("the fc baseline has no instance-level attention to export");
  if (ck.meta.label_names != ds.label_names) throw DataError("checkpoint and dataset label vocabularies differ");

  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ds.bags.size(); ++i) index.emplace(ds.bags[i].sample_key, i);
  std::vector<std::size_t> rows;
  for (const auto& k : keys) {
    const auto it = index.find(k);
    if (it == index.end()) throw DataError("unknown sample key '" + k + "'");
    rows.push_back(it->second);
  }

  const auto out = predict(ck.params, gather_features(ds, rows));
  const std::size_t r = ds.num_instances(), l = ds.num_labels();
  std::vector<SampleAttention> samples;
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const Bag& bag = ds.bags[rows[b]];
    SampleAttention s{.sample_key = bag.sample_key};
    for (std::size_t j = 0; j < l; ++j) {
      LabelAttention la{.label = ds.label_names[j],
                        .bag_score = out.bag_scores.at(b, j),
                        .observed = bag.observed[j] != 0,
                        .value = bag.labels[j]};
      for (std::size_t k = 0; k < r; ++k) {
        la.instance_scores.push_back(out.instance_scores.at(b, k, j));
        la.weights.push_back(out.attention.at(b, k, j));
      }
      s.labels.push_back(std::move(la));
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

json attention_json(const std::vector<SampleAttention>& samples) {
  json doc;
  doc["format"] = "miml-attention";
  doc["version"] = 1;
  json arr = json::array();
  for (const auto& s : samples) {
    json labels = json::array();
    for (const auto& la : s.labels) {
      json entry{{"label", la.label},
                 {"bag_score", la.bag_score},
                 {"instance_scores", la.instance_scores},
                 {"attention", la.weights},
                 {"observed", la.observed}};
      entry["value"] = la.observed ? json(la.value) : json(nullptr);
      labels.push_back(std::move(entry));
    }
    arr.push_back({{"sample_key", s.sample_key}, {"labels", std::move(labels)}});
  }
  doc["samples"] = std::move(arr);
  return doc;
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

}  // namespace

std::string attention_svg(const SampleAttention& s) {
  constexpr int kLabelWidth = 140, kCellWidth = 40, kRowHeight = 18, kGap = 4, kTitle = 24;
  const std::size_t r = s.labels.empty() ? 0 : s.labels.front().weights.size();
  const int width = kLabelWidth + static_cast<int>(r) * kCellWidth + 10;
  const int height = kTitle + static_cast<int>(s.labels.size()) * (kRowHeight + kGap) + 10;

  std::ostringstream out;
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
      << "  <title>attention weights: " << xml_escape(s.sample_key) << "</title>\n"
      << "  <text x=\"4\" y=\"16\" font-size=\"13\">" << xml_escape(s.sample_key) << "</text>\n";
  for (std::size_t j = 0; j < s.labels.size(); ++j) {
    const auto& la = s.labels[j];
    const int y = kTitle + static_cast<int>(j) * (kRowHeight + kGap);
    const double peak = la.weights.empty() ? 1.0 : *std::max_element(la.weights.begin(), la.weights.end());
    out << "  <g class=\"strip\" data-label=\"" << xml_escape(la.label) << "\">\n"
        << "    <text x=\"4\" y=\"" << y + 13 << "\">" << xml_escape(la.label) << " (" << format_double(la.bag_score)
        << ")</text>\n";
    for (std::size_t k = 0; k < la.weights.size(); ++k) {
      const double opacity = peak > 0.0 ? la.weights[k] / peak : 0.0;
      out << "    <rect class=\"cell\" x=\"" << kLabelWidth + static_cast<int>(k) * kCellWidth << "\" y=\"" << y
          << "\" width=\"" << kCellWidth - 2 << "\" height=\"" << kRowHeight << "\" fill=\"#1f4e9c\" fill-opacity=\""
          << format_double(opacity) << "\" stroke=\"#999999\" stroke-width=\"0.5\"/>\n";
    }
    out << "  </g>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace miml
