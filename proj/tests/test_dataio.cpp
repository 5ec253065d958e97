#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "miml/dataset.hpp"
#include "miml/errors.hpp"
#include "miml/fs_util.hpp"
#include "miml/log.hpp"
#include "miml/npy.hpp"
#include "test_util.hpp"

using namespace miml;
namespace fs = std::filesystem;
using testutil::TempDir;

namespace {

const fs::path kData = MIML_TEST_DATA_DIR;

// Hand-assembled NPY v1.0 stream.
std::vector<std::uint8_t> npy_bytes(const std::string& dict, std::size_t payload, std::uint8_t major = 1) {
  std::string header = dict;
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  std::vector<std::uint8_t> out = {0x93, 'N', 'U', 'M', 'P', 'Y', major, 0,
                                   static_cast<std::uint8_t>(header.size() & 0xFF),
                                   static_cast<std::uint8_t>(header.size() >> 8)};
  out.insert(out.end(), header.begin(), header.end());
  out.resize(out.size() + payload, 0);
  return out;
}

NpyError::Kind npy_error_kind(const std::vector<std::uint8_t>& bytes) {
  try {
    parse_npy(bytes);
  } catch (const NpyError& e) {
    return e.kind();
  }
  FAIL("parse_npy accepted invalid input");
  return NpyError::Kind::bad_header;
}

Dataset small_dataset() {
  Dataset ds;
  ds.label_names = {"a", "b"};
  ds.provenance = "unit test";
  for (int i = 0; i < 4; ++i) {
    Bag bag;
    bag.sample_key = "k" + std::to_string(i);
    bag.num_instances = 2;
    bag.feature_dim = 3;
    for (int j = 0; j < 6; ++j) bag.features.push_back(static_cast<float>((i * 6 + j) / 23.0));
    bag.labels = {static_cast<std::uint8_t>(i % 2), 1};
    bag.observed = {1, static_cast<std::uint8_t>(i != 2)};
    bag.split = i == 3 ? Split::test : Split::train;
    ds.bags.push_back(bag);
  }
  ds.bags[1].observed = {0, 0};
  return ds;
}

bool same_dataset(const Dataset& a, const Dataset& b) {
  if (a.label_names != b.label_names || a.provenance != b.provenance || a.bags.size() != b.bags.size()) return false;
  for (std::size_t i = 0; i < a.bags.size(); ++i) {
    const auto& x = a.bags[i];
    const auto& y = b.bags[i];
    if (x.sample_key != y.sample_key || x.split != y.split || x.observed != y.observed) return false;
    if (x.features != y.features) return false;
    for (std::size_t l = 0; l < x.labels.size(); ++l)
      if (x.observed[l] && x.labels[l] != y.labels[l]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("parse_npy examples") {
  const auto zeros = parse_npy(npy_bytes("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }", 24));
  CHECK(zeros.shape == Shape{2, 3});
  CHECK(zeros.dtype == DType::f4);
  CHECK(zeros.values == Tensor({2, 3}));

  auto bytes = npy_bytes("{'descr': '|u1', 'fortran_order': False, 'shape': (256,), }", 0);
  for (int v = 0; v < 256; ++v) bytes.push_back(static_cast<std::uint8_t>(v));
  const auto u8 = parse_npy(bytes);
  REQUIRE(u8.count() == 256);
  for (int v = 0; v < 256; ++v) CHECK(u8.values[v] == v);

  auto scalar = npy_bytes("{'descr': '<f8', 'fortran_order': False, 'shape': (), }", 0);
  const double seven = 7.0;
  const auto* p = reinterpret_cast<const std::uint8_t*>(&seven);
  scalar.insert(scalar.end(), p, p + 8);
  const auto s = parse_npy(scalar);
  CHECK(s.shape.empty());
  CHECK(s.values.values() == std::vector<double>{7.0});
}

TEST_CASE("parse_npy error kinds are distinct") {
  auto bad_magic = npy_bytes("{'descr': '<f4', 'fortran_order': False, 'shape': (1,), }", 4);
  bad_magic[1] = 'X';
  CHECK(npy_error_kind(bad_magic) == NpyError::Kind::bad_magic);
  CHECK(npy_error_kind(npy_bytes("{'descr': '<f4', 'fortran_order': False, 'shape': (1,), }", 4, 2)) ==
        NpyError::Kind::unsupported_version);
  CHECK(npy_error_kind(npy_bytes("{'descr': '<c16', 'fortran_order': False, 'shape': (1,), }", 16)) ==
        NpyError::Kind::unsupported_dtype);
  CHECK(npy_error_kind(npy_bytes("{'descr': '>f4', 'fortran_order': False, 'shape': (1,), }", 4)) ==
        NpyError::Kind::unsupported_dtype);
  CHECK(npy_error_kind(npy_bytes("{'descr': '<f4', 'fortran_order': True, 'shape': (2, 3), }", 24)) ==
        NpyError::Kind::fortran_order);
  CHECK(npy_error_kind(npy_bytes("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }", 23)) ==
        NpyError::Kind::truncated);
  CHECK(npy_error_kind(npy_bytes("{'descr': '<f4', 'shape': (2, 3), }", 24)) == NpyError::Kind::bad_header);
  CHECK(npy_error_kind({0x93, 'N', 'U'}) == NpyError::Kind::truncated);
  CHECK(npy_error_kind(read_file_bytes((kData / "fortran.npy").string())) == NpyError::Kind::fortran_order);
}

TEST_CASE("npy write/parse round trip") {
  const auto t = Tensor({2, 2}, {0.25, -1.5, 3.0, 1.0 / 3.0});
  const auto back = parse_npy(write_npy(make_f4_array(t)));
  CHECK(back.dtype == DType::f4);
  CHECK(back.shape == t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(back.values[i] == static_cast<double>(static_cast<float>(t[i])));

  const auto strings = make_string_array({"alpha", "βeta", ""});
  const auto sback = parse_npy(write_npy(strings));
  CHECK(sback.strings == strings.strings);

  // The header block is padded to a multiple of 64 bytes.
  const auto bytes = write_npy(make_f4_array(t));
  const std::size_t header_len = bytes[8] | (bytes[9] << 8);
  CHECK((10 + header_len) % 64 == 0);
  CHECK(bytes.size() == 10 + header_len + 16);
}

TEST_CASE("parse_npz reads numpy archives") {
  const long before = log::warning_count();
  const auto arrays = parse_npz(read_file_bytes((kData / "mixed_stored.npz").string()));
  CHECK(log::warning_count() == before + 1);  // README.txt skipped
  CHECK(arrays.size() == 4);
  CHECK(npz_member(arrays, "f8").values == Tensor({2, 2}, {1.5, -2.25, 3.0, 1e-300}));
  CHECK(npz_member(arrays, "i8").values == Tensor({3}, {-3.0, 0.0, 1099511627776.0}));
  CHECK(npz_member(arrays, "f4").values == Tensor({2, 3}, {0, 0.25, 0.5, 0.75, 1.0, 1.25}));
  CHECK(npz_member(arrays, "scalar").shape.empty());
  CHECK_THROWS_AS(npz_member(arrays, "missing"), DataError);

  const auto mini = parse_npz(read_file_bytes((kData / "openmic_mini.npz").string()));
  CHECK(npz_member(mini, "X").shape == Shape{6, 3, 4});
  CHECK(npz_member(mini, "X").dtype == DType::u8);
  double sum = 0;
  for (double v : npz_member(mini, "X").values.values()) sum += v;
  CHECK(sum == 8828.0);
  CHECK(npz_member(mini, "Y_mask").dtype == DType::b1);
  CHECK(npz_member(mini, "sample_key").strings.front() == "000135_483840");
}

TEST_CASE("npz write/parse round trip") {
  std::map<std::string, NpyArray> arrays;
  arrays["X"] = make_f4_array(Tensor({3}, {1, 2, 3}));
  for (auto method : {ZipMethod::stored, ZipMethod::deflate}) {
    const auto one = parse_npz(write_npz(arrays, method));
    CHECK(one.size() == 1);
    CHECK(one.at("X").values == arrays["X"].values);
  }
  const auto original = read_file_bytes((kData / "mixed_stored.npz").string());
  const auto parsed = parse_npz(original);
  for (auto method : {ZipMethod::stored, ZipMethod::deflate}) {
    const auto again = parse_npz(write_npz(parsed, method));
    REQUIRE(again.size() == parsed.size());
    for (const auto& [name, a] : parsed) {
      CHECK(again.at(name).shape == a.shape);
      CHECK(again.at(name).dtype == a.dtype);
      CHECK(again.at(name).values == a.values);
    }
  }
  CHECK(write_npz(parsed) == write_npz(parsed));

  auto corrupt = write_npz(arrays);
  corrupt.resize(corrupt.size() - 10);
  CHECK_THROWS_AS(parse_npz(corrupt), DataError);
  CHECK_THROWS_AS(parse_npz(std::vector<std::uint8_t>{1, 2, 3}), DataError);
}

TEST_CASE("import_openmic") {
  OpenMicPaths paths{kData / "openmic_mini.npz", kData / "openmic_mini_train.csv", kData / "openmic_mini_test.csv",
                     kData / "openmic_mini_classmap.json"};
  const auto ds = import_openmic(paths);
  CHECK(ds.label_names == std::vector<std::string>{"accordion", "banjo", "bass"});
  REQUIRE(ds.bags.size() == 6);
  CHECK(ds.num_instances() == 3);
  CHECK(ds.feature_dim() == 4);
  CHECK(ds.bags[0].features[0] == 1.0f);
  CHECK(ds.bags[0].features[1] == 0.0f);
  for (const auto& bag : ds.bags)
    for (float v : bag.features) CHECK((v >= 0.0f && v <= 1.0f));

  // Y_true 0.9 with mask set is an observed positive; masked entries are unobserved.
  CHECK(ds.bags[0].labels[0] == 1);
  CHECK(ds.bags[0].observed == std::vector<std::uint8_t>{1, 1, 0});
  CHECK(ds.bags[0].labels[1] == 0);
  // 0.51 is above the threshold, 0.5 is not.
  CHECK(ds.bags[1].labels[2] == 1);
  CHECK(ds.bags[5].labels[0] == 1);
  CHECK(ds.bags[4].observed_count() == 0);
  CHECK(ds.count(Split::train) == 4);
  CHECK(ds.count(Split::test) == 2);
  CHECK(ds.bags[4].split == Split::test);

  paths.class_map.reset();
  const long before = log::warning_count();
  const auto positional = import_openmic(paths);
  CHECK(positional.label_names == std::vector<std::string>{"label_00", "label_01", "label_02"});
  CHECK(log::warning_count() > before);

  TempDir tmp;
  std::ofstream(tmp.path / "both.csv") << "000135_483840\n000139_119040\n";
  std::ofstream(tmp.path / "rest.csv") << "000135_483840\n000141_153600\n000144_30720\n000145_172800\n000149_645120\n";
  CHECK_THROWS_AS(import_openmic({paths.npz, tmp.path / "both.csv", tmp.path / "rest.csv", {}}), DataError);
  std::ofstream(tmp.path / "short.csv") << "000141_153600\n000144_30720\n";
  CHECK_THROWS_AS(import_openmic({paths.npz, paths.train_split, tmp.path / "short.csv", {}}), DataError);

  std::map<std::string, NpyArray> bad = parse_npz(read_file_bytes(paths.npz.string()));
  bad["Y_mask"].shape = {6, 2};
  bad["Y_mask"].values = Tensor({6, 2});
  write_file_bytes((tmp.path / "bad.npz").string(), write_npz(bad));
  CHECK_THROWS_AS(import_openmic({tmp.path / "bad.npz", paths.train_split, paths.test_split, {}}), DataError);
}

TEST_CASE("import, save, load is idempotent") {
  const auto ds = import_openmic({kData / "openmic_mini.npz", kData / "openmic_mini_train.csv",
                                  kData / "openmic_mini_test.csv", kData / "openmic_mini_classmap.json"});
  TempDir tmp;
  save_dataset(ds, tmp.path / "one");
  const auto one = load_dataset(tmp.path / "one");
  CHECK(same_dataset(ds, one));
  save_dataset(one, tmp.path / "two");
  for (const char* f : {"manifest.json", "features.npy", "labels.csv", "splits.csv"})
    CHECK(read_file_bytes((tmp.path / "one" / f).string()) == read_file_bytes((tmp.path / "two" / f).string()));
}

TEST_CASE("save/load round trip and errors") {
  const auto ds = small_dataset();
  TempDir tmp;
  save_dataset(ds, tmp.path / "ds");
  const auto back = load_dataset(tmp.path / "ds");
  CHECK(same_dataset(ds, back));
  CHECK(back.bags[1].observed_count() == 0);

  const auto rows = read_csv_rows(tmp.path / "ds" / "labels.csv");
  CHECK(rows.front() == std::vector<std::string>{"sample_key", "label_name", "value"});
  std::size_t observed = 0;
  for (const auto& bag : ds.bags) observed += bag.observed_count();
  CHECK(rows.size() == observed + 1);
  for (const auto& row : rows) CHECK(row[0] != "k1");

  SUBCASE("manifest count mismatch") {
    auto manifest = read_text_file(tmp.path / "ds" / "manifest.json");
    const auto pos = manifest.find("\"num_bags\": 4");
    REQUIRE(pos != std::string::npos);
    manifest.replace(pos, 13, "\"num_bags\": 3");
    write_text_file(tmp.path / "ds" / "manifest.json", manifest);
    CHECK_THROWS_AS(load_dataset(tmp.path / "ds"), DataError);
  }
  SUBCASE("unknown label name") {
    std::ofstream(tmp.path / "ds" / "labels.csv", std::ios::app) << "k0,zzz,1\n";
    CHECK_THROWS_AS(load_dataset(tmp.path / "ds"), DataError);
  }
  SUBCASE("missing directory") { CHECK_THROWS_AS(load_dataset(tmp.path / "nope"), DataError); }
}

TEST_CASE("validate") {
  auto ds = small_dataset();
  CHECK_NOTHROW(validate(ds));
  auto dup = ds;
  dup.bags[1].sample_key = "k0";
  CHECK_THROWS_AS(validate(dup), DataError);
  auto range = ds;
  range.bags[0].features[0] = 1.5f;
  CHECK_THROWS_AS(validate(range), DataError);
  auto labels = ds;
  labels.bags[2].labels.push_back(0);
  CHECK_THROWS_AS(validate(labels), DataError);
}

TEST_CASE("split_validation") {
  Dataset ds;
  ds.label_names = {"x"};
  for (int i = 0; i < 120; ++i) {
    Bag bag{.sample_key = "b" + std::to_string(i), .num_instances = 1, .feature_dim = 1, .features = {0.5f},
            .labels = {1}, .observed = {1}, .split = i < 100 ? Split::train : Split::test};
    ds.bags.push_back(bag);
  }
  RngStream a(5), b(5), c(6);
  const auto s1 = split_validation(ds, 0.15, a);
  CHECK(s1.count(Split::train) == 85);
  CHECK(s1.count(Split::val) == 15);
  CHECK(s1.count(Split::test) == 20);
  for (std::size_t i = 100; i < 120; ++i) CHECK(s1.bags[i].split == Split::test);
  CHECK(s1.indices(Split::val) == split_validation(ds, 0.15, b).indices(Split::val));
  CHECK(s1.indices(Split::val) != split_validation(ds, 0.15, c).indices(Split::val));

  RngStream r(1);
  CHECK_THROWS(split_validation(ds, 0.0, r));
  CHECK_THROWS(split_validation(ds, 1.0, r));
  CHECK_THROWS(split_validation(ds, 0.001, r));  // empty val
}

TEST_CASE("generate_synthetic") {
  SynthSpec spec;
  spec.seed = 31;
  const auto one = generate_synthetic(spec);
  const auto two = generate_synthetic(spec);
  CHECK(same_dataset(one.dataset, two.dataset));
  CHECK(one.instance_truth == two.instance_truth);
  CHECK_NOTHROW(validate(one.dataset));

  const auto& ds = one.dataset;
  const std::size_t L = spec.n_labels, R = spec.bag_size;
  REQUIRE(ds.bags.size() == spec.n_bags);
  CHECK(ds.count(Split::test) == static_cast<std::size_t>(spec.test_fraction * spec.n_bags));

  std::vector<double> positives(L, 0.0);
  double observed = 0;
  for (std::size_t b = 0; b < ds.bags.size(); ++b) {
    const auto& bag = ds.bags[b];
    const auto& truth = one.instance_truth[b];
    for (std::size_t l = 0; l < L; ++l) {
      std::size_t planted = 0;
      for (std::size_t i = 0; i < R; ++i) planted += truth[i * L + l];
      // MIL assumption: the bag label is positive iff some instance carries it.
      CHECK((bag.labels[l] == 1) == (planted > 0));
      if (planted > 0) CHECK((planted >= spec.min_positives && planted <= spec.max_positives));
      positives[l] += bag.labels[l];
      observed += bag.observed[l];
    }
  }
  for (std::size_t l = 0; l < L; ++l) CHECK(std::abs(positives[l] / spec.n_bags - spec.label_rate) <= 0.05);
  CHECK(std::abs(observed / (spec.n_bags * L) - spec.observe_rate) <= 0.05);

  spec.observe_rate = 1.0;
  spec.n_bags = 50;
  for (const auto& bag : generate_synthetic(spec).dataset.bags)
    for (auto m : bag.observed) CHECK(m == 1);

  SynthSpec bad;
  bad.bag_size = 4;  // 5 labels with at least one planted instance each cannot fit
  CHECK_THROWS(generate_synthetic(bad));
  SynthSpec cramped;
  cramped.feature_dim = 1;
  cramped.n_labels = 5;
  cramped.noise_scale = 0.3;
  CHECK_THROWS_AS(generate_synthetic(cramped), DataError);
}

TEST_CASE("atomic output") {
  TempDir tmp;
  {
    AtomicOutput out(tmp.path / "dir");
    write_text_file(out.path() / "x.txt", "hi");
    CHECK_FALSE(fs::exists(tmp.path / "dir"));
  }
  CHECK_FALSE(fs::exists(tmp.path / "dir"));
  CHECK_FALSE(fs::exists(tmp.path / "dir.partial"));
  {
    AtomicOutput out(tmp.path / "dir");
    write_text_file(out.path() / "x.txt", "hi");
    out.commit();
  }
  CHECK(read_text_file(tmp.path / "dir" / "x.txt") == "hi");
  CHECK(format_double(0.1) == "0.1");
}
