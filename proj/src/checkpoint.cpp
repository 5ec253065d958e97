#include "miml/checkpoint.hpp"

#include <map>

#include "miml/errors.hpp"
#include "miml/fs_util.hpp"
#include "miml/npy.hpp"

namespace miml {

namespace fs = std::filesystem;
using nlohmann::json;

void save_checkpoint(const Checkpoint& ck, const fs::path& dir) {
  fs::create_directories(dir);
  json tensors = json::array();
  auto write = [&](const std::string& name, const Tensor& t) {
    const std::string file = name + ".npy";
    write_file_bytes((dir / file).string(), write_npy(make_f4_array(t)));
    tensors.push_back({{"name", name}, {"file", file}, {"shape", t.shape()}});
  };
  for_each_parameter(ck.params, write);
  for_each_buffer(ck.params, write);

  const auto& m = ck.meta;
  json manifest;
  manifest["format"] = "miml-checkpoint";
  manifest["version"] = 1;
  manifest["architecture"] = model_kind_name(m.kind);
  manifest["num_labels"] = m.num_labels;
  manifest["num_instances"] = m.num_instances;
  manifest["feature_dim"] = m.feature_dim;
  manifest["label_names"] = m.label_names;
  manifest["hyperparameters"] = m.hyperparameters;
  manifest["seed"] = m.seed;
  manifest["epoch"] = m.epoch;
  manifest["validation_loss"] = m.validation_loss;
  manifest["parameter_census"] = m.parameter_census;
  manifest["tensors"] = tensors;
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  Checkpoint ck;
  json manifest;
  try {
    manifest = json::parse(read_text_file(dir / "manifest.json"));
    if (manifest.value("format", "") != "miml-checkpoint") throw DataError(dir.string() + " is not a checkpoint directory");
    auto& m = ck.meta;
    m.kind = parse_model_kind(manifest.at("architecture").get<std::string>());
    m.num_labels = manifest.at("num_labels").get<std::size_t>();
    m.num_instances = manifest.at("num_instances").get<std::size_t>();
    m.feature_dim = manifest.at("feature_dim").get<std::size_t>();
    m.label_names = manifest.at("label_names").get<std::vector<std::string>>();
    m.hyperparameters = manifest.at("hyperparameters");
    m.seed = manifest.at("seed").get<std::uint64_t>();
    m.epoch = manifest.at("epoch").get<std::size_t>();
    m.validation_loss = manifest.at("validation_loss").get<double>();
    m.parameter_census = manifest.at("parameter_census").get<std::size_t>();
  } catch (const json::exception& e) {
    throw DataError((dir / "manifest.json").string() + ": " + e.what());
  } catch (const ContractError& e) {
    throw DataError((dir / "manifest.json").string() + ": " + e.what());
  }

  const auto& m = ck.meta;
  ModelShape shape{.num_instances = m.num_instances,
                   .feature_dim = m.feature_dim,
                   .num_labels = m.num_labels,
                   .dropout_rate = m.hyperparameters.value("dropout_rate", kDefaultDropout),
                   .fc_hidden = m.hyperparameters.value("fc_hidden", std::vector<std::size_t>{512, 512})};
  RngStream scratch(0);
  ck.params = init_model(m.kind, shape, scratch);

  std::map<std::string, std::string> files;
  for (const auto& t : manifest.at("tensors")) files[t.at("name").get<std::string>()] = t.at("file").get<std::string>();

  auto read = [&](const std::string& name, Tensor& t) {
    const auto it = files.find(name);
    if (it == files.end()) throw DataError("checkpoint lacks tensor '" + name + "'");
    auto arr = parse_npy(read_file_bytes((dir / it->second).string()));
    if (arr.is_string() || arr.shape != t.shape()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(arr.shape) + ", expected " +
                      shape_str(t.shape()));
    }
    t = std::move(arr.values);
  };
  for_each_parameter(ck.params, read);
  for_each_buffer(ck.params, read);

  if (parameter_census(ck.params) != m.parameter_census) {
    throw DataError("checkpoint manifest census " + std::to_string(m.parameter_census) + " disagrees with tensors");
  }
  return ck;
}

void round_to_f32(ModelParams& params) {
  auto round = [](const std::string&, Tensor& t) {
    for (auto& v : t.values()) v = static_cast<double>(static_cast<float>(v));
  };
  for_each_parameter(params, round);
  for_each_buffer(params, round);
}

}  // namespace miml
