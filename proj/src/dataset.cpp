#include "miml/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "miml/errors.hpp"
#include "miml/fs_util.hpp"
#include "miml/log.hpp"
#include "miml/npy.hpp"

namespace miml {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw DataError("unknown split '" + std::string(name) + "'");
}

std::size_t Bag::observed_count() const {
  return static_cast<std::size_t>(std::count(observed.begin(), observed.end(), std::uint8_t{1}));
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bags.size(); ++i)
    if (bags[i].split == split) out.push_back(i);
  return out;
}

std::size_t Dataset::count(Split split) const {
  return static_cast<std::size_t>(
      std::count_if(bags.begin(), bags.end(), [split](const Bag& b) { return b.split == split; }));
}

void validate(const Dataset& ds) {
  const std::size_t l = ds.num_labels();
  const std::size_t r = ds.num_instances();
  const std::size_t d = ds.feature_dim();
  std::unordered_set<std::string> keys;
  for (const auto& bag : ds.bags) {
    if (!keys.insert(bag.sample_key).second) throw DataError("duplicate sample key '" + bag.sample_key + "'");
    if (bag.num_instances != r || bag.feature_dim != d) {
      throw DataError("bag '" + bag.sample_key + "' has shape " + std::to_string(bag.num_instances) + "x" +
                      std::to_string(bag.feature_dim) + ", expected " + std::to_string(r) + "x" + std::to_string(d));
    }
    if (bag.features.size() != r * d) throw DataError("bag '" + bag.sample_key + "' feature length mismatch");
    if (bag.labels.size() != l || bag.observed.size() != l) {
      throw DataError("bag '" + bag.sample_key + "' label vector length differs from L=" + std::to_string(l));
    }
    for (float v : bag.features)
      if (!(v >= 0.0f && v <= 1.0f)) throw DataError("bag '" + bag.sample_key + "' has features outside [0, 1]");
    for (std::size_t j = 0; j < l; ++j)
      if (bag.labels[j] > 1 || bag.observed[j] > 1) throw DataError("bag '" + bag.sample_key + "' has non-binary labels");
  }
}

Tensor gather_features(const Dataset& ds, std::span<const std::size_t> indices) {
  const std::size_t r = ds.num_instances(), d = ds.feature_dim();
  Tensor x({indices.size(), r, d});
  double* out = x.data().data();
  for (auto idx : indices) {
    const auto& f = ds.bags.at(idx).features;
    out = std::copy(f.begin(), f.end(), out);
  }
  return x;
}

std::pair<Tensor, Tensor> gather_labels(const Dataset& ds, std::span<const std::size_t> indices) {
  const std::size_t l = ds.num_labels();
  Tensor y({indices.size(), l});
  Tensor m({indices.size(), l});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& bag = ds.bags.at(indices[b]);
    for (std::size_t j = 0; j < l; ++j) {
      y.at(b, j) = bag.labels[j];
      m.at(b, j) = bag.observed[j];
    }
  }
  return {std::move(y), std::move(m)};
}

Dataset split_validation(const Dataset& ds, double fraction, RngStream& rng) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ContractError("validation fraction must lie in (0, 1)");
  auto train = ds.indices(Split::train);
  if (train.empty()) throw DataError("cannot carve a validation split from an empty train split");
  const auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(train.size())));
  if (n_val == 0 || n_val == train.size()) {
    throw DataError("validation fraction " + format_double(fraction) + " of " + std::to_string(train.size()) +
                    " train bags leaves an empty train or validation split");
  }
  rng.shuffle(std::span(train));
  Dataset out = ds;
  for (std::size_t i = 0; i < n_val; ++i) out.bags[train[i]].split = Split::val;
  return out;
}

// --- interchange format ---------------------------------------------------

void save_dataset(const Dataset& ds, const fs::path& dir) {
  validate(ds);
  fs::create_directories(dir);
  const std::size_t n = ds.bags.size(), r = ds.num_instances(), d = ds.feature_dim();

  json manifest;
  manifest["format"] = "miml-dataset";
  manifest["version"] = 1;
  manifest["num_bags"] = n;
  manifest["counts"] = {{"train", ds.count(Split::train)}, {"val", ds.count(Split::val)}, {"test", ds.count(Split::test)}};
  manifest["num_labels"] = ds.num_labels();
  manifest["num_instances"] = r;
  manifest["feature_dim"] = d;
  manifest["label_names"] = ds.label_names;
  manifest["provenance"] = ds.provenance;
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");

  std::vector<float> flat;
  flat.reserve(n * r * d);
  for (const auto& bag : ds.bags) flat.insert(flat.end(), bag.features.begin(), bag.features.end());
  write_file_bytes((dir / "features.npy").string(), write_npy(make_f4_array({n, r, d}, flat)));

  std::ostringstream labels;
  labels << "sample_key,label_name,value\n";
  std::ostringstream splits;
  splits << "sample_key,split\n";
  for (const auto& bag : ds.bags) {
    if (bag.sample_key.find_first_of(",\n\r") != std::string::npos) {
      throw DataError("sample key '" + bag.sample_key + "' cannot be written to CSV");
    }
    for (std::size_t j = 0; j < ds.num_labels(); ++j)
      if (bag.observed[j]) labels << bag.sample_key << ',' << ds.label_names[j] << ',' << int(bag.labels[j]) << '\n';
    splits << bag.sample_key << ',' << split_name(bag.split) << '\n';
  }
  write_text_file(dir / "labels.csv", labels.str());
  write_text_file(dir / "splits.csv", splits.str());
}

Dataset load_dataset(const fs::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_text_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw DataError("manifest.json: " + std::string(e.what()));
  }

  Dataset ds;
  std::size_t n = 0, r = 0, d = 0;
  try {
    n = manifest.at("num_bags").get<std::size_t>();
    r = manifest.at("num_instances").get<std::size_t>();
    d = manifest.at("feature_dim").get<std::size_t>();
    ds.label_names = manifest.at("label_names").get<std::vector<std::string>>();
    ds.provenance = manifest.value("provenance", "");
    if (manifest.at("num_labels").get<std::size_t>() != ds.label_names.size()) {
      throw DataError("manifest num_labels disagrees with label_names");
    }
  } catch (const json::exception& e) {
    throw DataError("manifest.json: " + std::string(e.what()));
  }
  const std::size_t l = ds.label_names.size();

  const auto features = parse_npy(read_file_bytes((dir / "features.npy").string()));
  if (features.is_string() || features.shape != Shape{n, r, d}) {
    throw DataError("features.npy has shape " + shape_str(features.shape) + " but manifest declares " +
                    shape_str({n, r, d}));
  }

  const auto split_rows = read_csv_rows(dir / "splits.csv");
  if (split_rows.empty() || split_rows.front() != std::vector<std::string>{"sample_key", "split"}) {
    throw DataError("splits.csv: missing header row");
  }
  if (split_rows.size() - 1 != n) {
    throw DataError("splits.csv has " + std::to_string(split_rows.size() - 1) + " rows, manifest declares " +
                    std::to_string(n));
  }

  std::unordered_map<std::string, std::size_t> key_index;
  ds.bags.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = split_rows[i + 1];
    if (row.size() != 2) throw DataError("splits.csv: malformed row " + std::to_string(i + 2));
    Bag& bag = ds.bags[i];
    bag.sample_key = row[0];
    bag.split = parse_split(row[1]);
    bag.num_instances = r;
    bag.feature_dim = d;
    const auto src = features.values.data().subspan(i * r * d, r * d);
    bag.features.assign(src.begin(), src.end());
    bag.labels.assign(l, 0);
    bag.observed.assign(l, 0);
    if (!key_index.emplace(bag.sample_key, i).second) throw DataError("splits.csv: duplicate key '" + bag.sample_key + "'");
  }

  std::unordered_map<std::string, std::size_t> label_index;
  for (std::size_t j = 0; j < l; ++j) label_index.emplace(ds.label_names[j], j);

  const auto label_rows = read_csv_rows(dir / "labels.csv");
  if (label_rows.empty() || label_rows.front() != std::vector<std::string>{"sample_key", "label_name", "value"}) {
    throw DataError("labels.csv: missing header row");
  }
  for (std::size_t i = 1; i < label_rows.size(); ++i) {
    const auto& row = label_rows[i];
    if (row.size() != 3) throw DataError("labels.csv: malformed row " + std::to_string(i + 1));
    const auto bag_it = key_index.find(row[0]);
    if (bag_it == key_index.end()) throw DataError("labels.csv: unknown sample key '" + row[0] + "'");
    const auto label_it = label_index.find(row[1]);
    if (label_it == label_index.end()) throw DataError("labels.csv: unknown label name '" + row[1] + "'");
    if (row[2] != "0" && row[2] != "1") throw DataError("labels.csv: value must be 0 or 1, got '" + row[2] + "'");
    Bag& bag = ds.bags[bag_it->second];
    bag.observed[label_it->second] = 1;
    bag.labels[label_it->second] = row[2] == "1" ? 1 : 0;
  }

  validate(ds);
  return ds;
}

// --- OpenMIC --------------------------------------------------------------

std::vector<std::string> read_key_list(const fs::path& path) {
  std::vector<std::string> keys;
  for (auto& row : read_csv_rows(path)) {
    if (row.empty() || row[0].empty()) continue;
    keys.push_back(row[0]);
  }
  if (!keys.empty() && keys.front() == "sample_key") keys.erase(keys.begin());
  return keys;
}

Dataset import_openmic(const OpenMicPaths& paths) {
  const auto arrays = parse_npz(read_file_bytes(paths.npz.string()));
  const auto& x = npz_member(arrays, "X");
  const auto& y_true = npz_member(arrays, "Y_true");
  const auto& y_mask = npz_member(arrays, "Y_mask");
  const auto& keys = npz_member(arrays, "sample_key");

  if (x.is_string() || x.shape.size() != 3) throw DataError("X must be a numeric N x R x D array, got " + shape_str(x.shape));
  const std::size_t n = x.shape[0], r = x.shape[1], d = x.shape[2];
  if (y_true.shape.size() != 2 || y_true.shape[0] != n) {
    throw DataError("Y_true shape " + shape_str(y_true.shape) + " disagrees with X " + shape_str(x.shape));
  }
  const std::size_t l = y_true.shape[1];
  if (y_mask.shape != y_true.shape) {
    throw DataError("Y_mask shape " + shape_str(y_mask.shape) + " disagrees with Y_true " + shape_str(y_true.shape));
  }
  if (!keys.is_string() || keys.shape != Shape{n}) {
    throw DataError("sample_key must be N strings, got shape " + shape_str(keys.shape));
  }

  Dataset ds;
  ds.provenance = "OpenMIC import from " + paths.npz.filename().string();
  ds.label_names.resize(l);
  if (paths.class_map) {
    json cm;
    try {
      cm = json::parse(read_text_file(*paths.class_map));
    } catch (const json::exception& e) {
      throw DataError(paths.class_map->string() + ": " + e.what());
    }
    if (!cm.is_object() || cm.size() != l) {
      throw DataError("class map must map exactly " + std::to_string(l) + " label names to column indices");
    }
    std::vector<bool> seen(l, false);
    for (const auto& [name, col] : cm.items()) {
      if (!col.is_number_integer() || col.get<long>() < 0 || col.get<std::size_t>() >= l || seen[col.get<std::size_t>()]) {
        throw DataError("class map entry '" + name + "' has an invalid or repeated column index");
      }
      seen[col.get<std::size_t>()] = true;
      ds.label_names[col.get<std::size_t>()] = name;
    }
  } else {
    log::warn("no class map given; using positional label names label_00..");
    for (std::size_t j = 0; j < l; ++j) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "label_%02zu", j);
      ds.label_names[j] = buf;
    }
  }

  std::unordered_map<std::string, Split> split_of;
  for (const auto& k : read_key_list(paths.train_split)) split_of[k] = Split::train;
  for (const auto& k : read_key_list(paths.test_split)) {
    const auto [it, inserted] = split_of.emplace(k, Split::test);
    if (!inserted && it->second == Split::train) throw DataError("sample key '" + k + "' appears in both split files");
  }

  const bool quantized = x.dtype == DType::u8;
  ds.bags.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Bag& bag = ds.bags[i];
    bag.sample_key = keys.strings[i];
    const auto sit = split_of.find(bag.sample_key);
    if (sit == split_of.end()) throw DataError("sample key '" + bag.sample_key + "' is in neither split file");
    bag.split = sit->second;
    bag.num_instances = r;
    bag.feature_dim = d;
    bag.features.resize(r * d);
    const auto src = x.values.data().subspan(i * r * d, r * d);
    for (std::size_t k = 0; k < r * d; ++k) {
      const double v = quantized ? src[k] / 255.0 : std::clamp(src[k], 0.0, 1.0);
      bag.features[k] = static_cast<float>(v);
    }
    bag.labels.assign(l, 0);
    bag.observed.assign(l, 0);
    for (std::size_t j = 0; j < l; ++j) {
      if (y_mask.values.at(i, j) != 0.0) {
        bag.observed[j] = 1;
        bag.labels[j] = y_true.values.at(i, j) > 0.5 ? 1 : 0;
      }
    }
  }
  if (split_of.size() > n) log::warn("split files list keys that are not present in the NPZ");
  validate(ds);
  return ds;
}

// --- synthetic ------------------------------------------------------------

void validate(const SynthSpec& s) {
  auto bad = [](const std::string& msg) { throw DataError("synthetic spec: " + msg); };
  if (s.n_bags == 0 || s.n_labels == 0 || s.bag_size == 0 || s.feature_dim == 0) bad("sizes must be positive");
  if (s.min_positives == 0 || s.min_positives > s.max_positives) bad("need 1 <= min_positives <= max_positives");
  if (s.max_positives > s.bag_size) bad("max_positives exceeds bag_size");
  if (s.n_labels * s.min_positives > s.bag_size) {
    bad("n_labels * min_positives exceeds bag_size; every label could not be planted at once");
  }
  if (!(s.label_rate >= 0.0 && s.label_rate <= 1.0)) bad("label_rate must lie in [0, 1]");
  if (!(s.observe_rate > 0.0 && s.observe_rate <= 1.0)) bad("observe_rate must lie in (0, 1]");
  if (!(s.noise_scale > 0.0)) bad("noise_scale must be positive");
  if (!(s.test_fraction >= 0.0 && s.test_fraction < 1.0)) bad("test_fraction must lie in [0, 1)");
}

SynthSpec synth_spec_from_json(const json& j, SynthSpec s) {
  if (!j.is_object()) throw ContractError("synthetic spec must be a JSON object");
  static const std::set<std::string> keys = {"n_bags",        "n_labels",     "bag_size",    "feature_dim",
                                             "label_rate",    "min_positives", "max_positives", "observe_rate",
                                             "noise_scale",   "test_fraction", "seed"};
  for (const auto& [key, value] : j.items())
    if (!keys.contains(key)) throw ContractError("synthetic spec: unknown key '" + key + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get("n_bags", s.n_bags);
    get("n_labels", s.n_labels);
    get("bag_size", s.bag_size);
    get("feature_dim", s.feature_dim);
    get("label_rate", s.label_rate);
    get("min_positives", s.min_positives);
    get("max_positives", s.max_positives);
    get("observe_rate", s.observe_rate);
    get("noise_scale", s.noise_scale);
    get("test_fraction", s.test_fraction);
    get("seed", s.seed);
  } catch (const json::exception& e) {
    throw ContractError(std::string("synthetic spec: ") + e.what());
  }
  return s;
}

json to_json(const SynthSpec& s) {
  return {{"n_bags", s.n_bags},           {"n_labels", s.n_labels},         {"bag_size", s.bag_size},
          {"feature_dim", s.feature_dim}, {"label_rate", s.label_rate},     {"min_positives", s.min_positives},
          {"max_positives", s.max_positives}, {"observe_rate", s.observe_rate}, {"noise_scale", s.noise_scale},
          {"test_fraction", s.test_fraction}, {"seed", s.seed}};
}

std::string synth_spec_schema() {
  return "Synthetic spec JSON (flat object, every key optional):\n"
         "  n_bags        int     number of bags                      (2000)\n"
         "  n_labels      int     labels L                            (5)\n"
         "  bag_size      int     instances per bag R                 (10)\n"
         "  feature_dim   int     feature dimension D                 (16)\n"
         "  label_rate    float   P(label positive in a bag)          (0.3)\n"
         "  min_positives int     planted instances per positive label (1)\n"
         "  max_positives int                                         (2)\n"
         "  observe_rate  float   P(label observed)                   (0.7)\n"
         "  noise_scale   float   spread around each prototype        (0.1)\n"
         "  test_fraction float   share of bags in the test split     (0.2)\n"
         "  seed          int                                         (0)\n";
}

SyntheticData generate_synthetic(const SynthSpec& spec) {
  validate(spec);
  const std::size_t l = spec.n_labels, r = spec.bag_size, d = spec.feature_dim;
  const RngStream root(spec.seed);
  RngStream proto_rng = root.split(1);
  RngStream bag_rng = root.split(2);
  RngStream split_rng = root.split(3);

  constexpr int kMaxTries = 1000;
  const double min_sep = 2.0 * spec.noise_scale;
  std::vector<std::vector<double>> prototypes;
  for (std::size_t j = 0; j < l; ++j) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxTries && !placed; ++attempt) {
      std::vector<double> p(d);
      for (auto& v : p) v = proto_rng.uniform();
      placed = std::all_of(prototypes.begin(), prototypes.end(), [&](const auto& q) {
        double dist2 = 0.0;
        for (std::size_t k = 0; k < d; ++k) dist2 += (p[k] - q[k]) * (p[k] - q[k]);
        return std::sqrt(dist2) >= min_sep;
      });
      if (placed) prototypes.push_back(std::move(p));
    }
    if (!placed) {
      throw DataError("synthetic spec: could not place " + std::to_string(l) + " prototypes separated by " +
                      format_double(min_sep) + " in " + std::to_string(d) + " dimensions");
    }
  }

  SyntheticData out;
  out.dataset.provenance = "synthetic (seed " + std::to_string(spec.seed) + ")";
  for (std::size_t j = 0; j < l; ++j) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "class_%02zu", j);
    out.dataset.label_names.emplace_back(buf);
  }
  out.dataset.bags.resize(spec.n_bags);
  out.instance_truth.resize(spec.n_bags);

  for (std::size_t b = 0; b < spec.n_bags; ++b) {
    Bag& bag = out.dataset.bags[b];
    auto& truth = out.instance_truth[b];
    char key[32];
    std::snprintf(key, sizeof(key), "syn_%06zu", b);
    bag.sample_key = key;
    bag.num_instances = r;
    bag.feature_dim = d;
    bag.features.resize(r * d);
    bag.labels.assign(l, 0);
    bag.observed.assign(l, 0);
    truth.assign(r * l, 0);

    std::vector<std::size_t> positives;
    for (std::size_t j = 0; j < l; ++j)
      if (bag_rng.bernoulli(spec.label_rate)) positives.push_back(j);
    bag_rng.shuffle(std::span(positives));

    std::vector<std::size_t> free_slots(r);
    for (std::size_t i = 0; i < r; ++i) free_slots[i] = i;
    bag_rng.shuffle(std::span(free_slots));

    std::vector<long> owner(r, -1);
    std::size_t next_slot = 0;
    for (std::size_t p = 0; p < positives.size(); ++p) {
      const std::size_t j = positives[p];
      const std::size_t span = spec.max_positives - spec.min_positives + 1;
      std::size_t k = spec.min_positives + static_cast<std::size_t>(bag_rng.below(span));
      // Leave room for the remaining positive labels' minimum.
      const std::size_t reserve = (positives.size() - p - 1) * spec.min_positives;
      k = std::min(k, r - next_slot - reserve);
      for (std::size_t c = 0; c < k; ++c) owner[free_slots[next_slot++]] = static_cast<long>(j);
      bag.labels[j] = 1;
    }

    for (std::size_t i = 0; i < r; ++i) {
      float* row = bag.features.data() + i * d;
      if (owner[i] >= 0) {
        const auto& proto = prototypes[static_cast<std::size_t>(owner[i])];
        for (std::size_t k = 0; k < d; ++k)
          row[k] = static_cast<float>(std::clamp(proto[k] + spec.noise_scale * bag_rng.normal(), 0.0, 1.0));
        truth[i * l + static_cast<std::size_t>(owner[i])] = 1;
      } else {
        for (std::size_t k = 0; k < d; ++k) row[k] = static_cast<float>(bag_rng.uniform());
      }
    }
    for (std::size_t j = 0; j < l; ++j) bag.observed[j] = bag_rng.bernoulli(spec.observe_rate) ? 1 : 0;
  }

  std::vector<std::size_t> order(spec.n_bags);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  split_rng.shuffle(std::span(order));
  const auto n_test = static_cast<std::size_t>(std::floor(spec.test_fraction * static_cast<double>(spec.n_bags)));
  for (std::size_t i = 0; i < n_test; ++i) out.dataset.bags[order[i]].split = Split::test;
  return out;
}

}  // namespace miml
