#include "miml/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

#include "miml/errors.hpp"
#include "miml/fs_util.hpp"
#include "miml/log.hpp"

namespace miml {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stream ids derived from the run seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kDropoutStream = 3;
constexpr std::uint64_t kValSplitStream = 4;

constexpr std::size_t kEvalBatch = 256;

const std::set<std::string>& config_keys() {
  static const std::set<std::string> keys{"batch_size", "lr",         "epochs",        "seed",
                                          "checkpoint_dir", "loss_alpha", "loss_beta", "loss_gamma",
                                          "beta1",      "beta2",      "adam_epsilon",  "dropout_rate",
                                          "val_fraction", "fc_hidden"};
  return keys;
}

}  // namespace

void validate(const TrainConfig& c) {
  auto bad = [](const std::string& msg) { throw ContractError("train config: " + msg); };
  if (c.batch_size == 0) bad("batch_size must be positive");
  if (!(c.lr > 0.0)) bad("lr must be positive");
  if (c.epochs == 0) bad("epochs must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) bad("beta1 and beta2 must lie in [0, 1)");
  if (!(c.adam_epsilon > 0.0)) bad("adam_epsilon must be positive");
  if (!(c.dropout_rate >= 0.0 && c.dropout_rate < 1.0)) bad("dropout_rate must lie in [0, 1)");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) bad("val_fraction must lie in (0, 1)");
  if (c.fc_hidden.size() != 2 || c.fc_hidden[0] == 0 || c.fc_hidden[1] == 0) bad("fc_hidden must be two positive sizes");
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ContractError("train config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!config_keys().contains(key)) throw ContractError("train config: unknown key '" + key + "'");
  }
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
    c.loss.alpha = j.value("loss_alpha", c.loss.alpha);
    c.loss.beta = j.value("loss_beta", c.loss.beta);
    c.loss.gamma = j.value("loss_gamma", c.loss.gamma);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.fc_hidden = j.value("fc_hidden", c.fc_hidden);
  } catch (const json::exception& e) {
    throw ContractError(std::string("train config: ") + e.what());
  }
  validate(c);
  return c;
}

json to_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size},     {"lr", c.lr},
              {"epochs", c.epochs},             {"seed", c.seed},
              {"checkpoint_dir", c.checkpoint_dir}, {"loss_alpha", c.loss.alpha},
              {"loss_beta", c.loss.beta},       {"loss_gamma", c.loss.gamma},
              {"beta1", c.beta1},               {"beta2", c.beta2},
              {"adam_epsilon", c.adam_epsilon}, {"dropout_rate", c.dropout_rate},
              {"val_fraction", c.val_fraction}, {"fc_hidden", c.fc_hidden}};
}

TrainConfig load_train_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw ContractError(path.string() + ": " + e.what());
  }
  return train_config_from_json(j);
}

std::string train_config_schema() {
  return "Config JSON (flat object, every key optional):\n"
         "  batch_size    int     mini-batch size in bags            (128)\n"
         "  lr            float   Adam learning rate                 (5e-4)\n"
         "  epochs        int     training epochs                    (250)\n"
         "  seed          int     single source of randomness        (0)\n"
         "  checkpoint_dir string where the best checkpoint is kept  (\"\")\n"
         "  loss_alpha    float   g(p) = alpha * p^gamma + beta      (1)\n"
         "  loss_beta     float                                      (0)\n"
         "  loss_gamma    float                                      (-1)\n"
         "  beta1, beta2  float   Adam moment decay                  (0.9, 0.999)\n"
         "  adam_epsilon  float   Adam denominator guard             (1e-8)\n"
         "  dropout_rate  float   dropout after each hidden layer    (0.6)\n"
         "  val_fraction  float   train share moved to validation    (0.15)\n"
         "  fc_hidden     [int,int] hidden sizes of the fc baseline  ([512, 512])\n"
         "Command-line flags override values from the file.\n";
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out << "epoch,train_loss,val_loss\n";
  for (const auto& h : history)
    out << h.epoch << ',' << format_double(h.train_loss) << ',' << format_double(h.val_loss) << '\n';
  return out.str();
}

double evaluation_loss(const ModelParams& params, const Dataset& ds, std::span<const std::size_t> indices,
                       const LossConfig& loss) {
  double total = 0.0;
  std::size_t bags = 0;
  for (std::size_t start = 0; start < indices.size(); start += kEvalBatch) {
    const auto chunk = indices.subspan(start, std::min(kEvalBatch, indices.size() - start));
    const auto [labels, mask] = gather_labels(ds, chunk);
    if (std::all_of(mask.values().begin(), mask.values().end(), [](double m) { return m == 0.0; })) continue;
    const auto out = predict(params, gather_features(ds, chunk));
    const auto l = partial_bce(out.bag_scores, labels, mask, loss);
    for (double v : l.per_bag) total += v;
    bags += l.contributing_bags;
  }
  if (bags == 0) throw DataError("no observed labels among the evaluated bags");
  return total / static_cast<double>(bags);
}

TrainResult train(ModelKind kind, const Dataset& input, const TrainConfig& cfg) {
  validate(cfg);
  validate(input);
  const RngStream root(cfg.seed);

  const Dataset* ds = &input;
  Dataset with_val;
  if (input.count(Split::val) == 0) {
    RngStream val_rng = root.split(kValSplitStream);
    with_val = split_validation(input, cfg.val_fraction, val_rng);
    ds = &with_val;
  }
  auto train_idx = ds->indices(Split::train);
  const auto val_idx = ds->indices(Split::val);
  if (train_idx.empty() || val_idx.empty()) throw DataError("training needs non-empty train and val splits");

  const ModelShape shape{.num_instances = ds->num_instances(),
                         .feature_dim = ds->feature_dim(),
                         .num_labels = ds->num_labels(),
                         .dropout_rate = cfg.dropout_rate,
                         .fc_hidden = cfg.fc_hidden};
  RngStream init_rng = root.split(kInitStream);
  RngStream shuffle_rng = root.split(kShuffleStream);
  RngStream dropout_rng = root.split(kDropoutStream);
  ModelParams params = init_model(kind, shape, init_rng);
  AdamState adam = make_adam(params, AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_epsilon});

  TrainResult result;
  auto& meta = result.checkpoint.meta;
  meta.kind = kind;
  meta.num_labels = shape.num_labels;
  meta.num_instances = shape.num_instances;
  meta.feature_dim = shape.feature_dim;
  meta.label_names = ds->label_names;
  meta.seed = cfg.seed;
  meta.parameter_census = parameter_census(params);
  meta.hyperparameters = to_json(cfg);
  meta.hyperparameters.erase("seed");
  meta.hyperparameters.erase("checkpoint_dir");

  double best = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span(train_idx));
    double total = 0.0;
    std::size_t bags = 0;
    for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
      const auto batch = std::span<const std::size_t>(train_idx).subspan(start, std::min(cfg.batch_size, train_idx.size() - start));
      const auto [labels, mask] = gather_labels(*ds, batch);
      if (std::all_of(mask.values().begin(), mask.values().end(), [](double m) { return m == 0.0; })) continue;
      if (kind != ModelKind::fc && batch.size() * shape.num_instances < 2) continue;  // batch norm needs 2 rows

      auto fwd = forward(params, gather_features(*ds, batch), Mode::train, dropout_rng);
      const auto loss = partial_bce(fwd.bag_scores, labels, mask, cfg.loss);
      if (!std::isfinite(loss.loss)) {
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch));
      }
      const auto grads = backward(params, fwd.trace, loss.grad);
      adam_step(adam, params, grads);
      total += loss.loss * static_cast<double>(loss.contributing_bags);
      bags += loss.contributing_bags;
    }
    const double train_loss = bags ? total / static_cast<double>(bags) : 0.0;
    const double val_loss = evaluation_loss(params, *ds, val_idx, cfg.loss);
    if (!std::isfinite(val_loss)) throw NumericalError("non-finite validation loss at epoch " + std::to_string(epoch));
    result.history.push_back({epoch, train_loss, val_loss});
    log::debug("seed " + std::to_string(cfg.seed) + " epoch " + std::to_string(epoch) + " train " +
               format_double(train_loss) + " val " + format_double(val_loss));

    if (val_loss < best) {
      best = val_loss;
      result.checkpoint.params = params;
      round_to_f32(result.checkpoint.params);
      meta.epoch = epoch;
      meta.validation_loss = val_loss;
      if (!cfg.checkpoint_dir.empty()) save_checkpoint(result.checkpoint, cfg.checkpoint_dir);
    }
  }
  return result;
}

std::vector<TrainResult> run_seeds(ModelKind kind, const Dataset& dataset, const TrainConfig& cfg,
                                   std::vector<std::uint64_t> seeds, std::size_t max_parallel) {
  std::sort(seeds.begin(), seeds.end());
  if (std::adjacent_find(seeds.begin(), seeds.end()) != seeds.end()) throw ContractError("run_seeds: duplicate seeds");

  std::vector<TrainResult> results(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      try {
        TrainConfig c = cfg;
        c.seed = seeds[i];
        if (!cfg.checkpoint_dir.empty()) {
          c.checkpoint_dir = (fs::path(cfg.checkpoint_dir) / ("seed_" + std::to_string(seeds[i]))).string();
        }
        results[i] = train(kind, dataset, c);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };

  std::size_t threads = max_parallel ? max_parallel : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, seeds.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

}  // namespace miml
