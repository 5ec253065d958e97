#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "miml/attention_export.hpp"
#include "miml/checkpoint.hpp"
#include "miml/dataset.hpp"
#include "miml/errors.hpp"
#include "miml/fs_util.hpp"
#include "miml/log.hpp"
#include "miml/metrics.hpp"
#include "miml/npy.hpp"
#include "miml/trainer.hpp"

namespace fs = std::filesystem;
using namespace miml;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

void print_dataset_summary(const Dataset& ds) {
  std::cout << "N=" << ds.bags.size() << " L=" << ds.num_labels() << " R=" << ds.num_instances()
            << " D=" << ds.feature_dim() << '\n'
            << "train=" << ds.count(Split::train) << " val=" << ds.count(Split::val)
            << " test=" << ds.count(Split::test) << '\n'
            << "label,observed,positive\n";
  for (std::size_t l = 0; l < ds.num_labels(); ++l) {
    std::size_t observed = 0, positive = 0;
    for (const auto& bag : ds.bags) {
      observed += bag.observed[l];
      positive += bag.observed[l] && bag.labels[l];
    }
    std::cout << ds.label_names[l] << ',' << observed << ',' << positive << '\n';
  }
}

// A run directory holds checkpoint/; a checkpoint directory holds manifest.json.
fs::path resolve_checkpoint(const fs::path& path) {
  if (fs::exists(path / "manifest.json")) return path;
  if (fs::exists(path / "checkpoint" / "manifest.json")) return path / "checkpoint";
  throw DataError(path.string() + " contains no checkpoint");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string safe_file_stem(const std::string& key) {
  std::string out = key;
  for (char& c : out)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  return out;
}

void print_prf_table(const EvalReport& report) {
  std::cout << std::left << std::setw(16) << "label" << std::right << std::setw(10) << "macro_P" << std::setw(10)
            << "macro_R" << std::setw(10) << "macro_F1" << '\n';
  std::cout << std::fixed << std::setprecision(4);
  auto row = [](const std::string& name, const Prf& m) {
    std::cout << std::left << std::setw(16) << name << std::right << std::setw(10) << m.precision << std::setw(10)
              << m.recall << std::setw(10) << m.f1 << '\n';
  };
  for (const auto& l : report.labels) row(l.label, l.macro);
  row("OVERALL", report.overall);
  std::cout.unsetf(std::ios::floatfield);
}

struct ConvertArgs {
  std::string npz, train_split, test_split, classmap, out;
};

void run_convert(const ConvertArgs& a) {
  OpenMicPaths paths{a.npz, a.train_split, a.test_split, {}};
  if (!a.classmap.empty()) paths.class_map = a.classmap;
  const auto ds = import_openmic(paths);
  AtomicOutput out(a.out);
  save_dataset(ds, out.path());
  out.commit();
  print_dataset_summary(ds);
}

struct SynthArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n_bags;
};

void run_synth(const SynthArgs& a) {
  SynthSpec spec;
  if (!a.spec.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text_file(a.spec));
    } catch (const nlohmann::json::exception& e) {
      throw ContractError(a.spec + ": " + e.what());
    }
    spec = synth_spec_from_json(j);
  }
  if (a.seed) spec.seed = *a.seed;
  if (a.n_bags) spec.n_bags = *a.n_bags;
  const auto data = generate_synthetic(spec);

  const std::size_t n = data.dataset.bags.size(), r = spec.bag_size, l = spec.n_labels;
  NpyArray truth{.dtype = DType::u8, .item_size = 1, .shape = {n, r, l}, .values = Tensor({n, r, l})};
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < r * l; ++i) truth.values[b * r * l + i] = data.instance_truth[b][i];

  AtomicOutput out(a.out);
  save_dataset(data.dataset, out.path());
  write_file_bytes((out.path() / "instance_truth.npy").string(), write_npy(truth));
  write_text_file(out.path() / "synth_spec.json", to_json(spec).dump(2) + "\n");
  out.commit();
  print_dataset_summary(data.dataset);
}

struct TrainArgs {
  std::string data, config, model = "att", out;
  std::optional<std::uint64_t> seed;
  std::string seeds;
  std::optional<std::size_t> epochs, batch_size, threads;
  std::optional<double> lr, dropout_rate, val_fraction;
};

void run_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (a.lr) cfg.lr = *a.lr;
  if (a.dropout_rate) cfg.dropout_rate = *a.dropout_rate;
  if (a.val_fraction) cfg.val_fraction = *a.val_fraction;
  cfg.checkpoint_dir.clear();
  validate(cfg);
  const ModelKind kind = parse_model_kind(a.model);
  const auto ds = load_dataset(a.data);

  AtomicOutput out(a.out);
  auto effective = to_json(cfg);
  effective.erase("checkpoint_dir");
  write_text_file(out.path() / "config.json", effective.dump(2) + "\n");

  std::cout << "model=" << model_kind_name(kind) << " epochs=" << cfg.epochs << " batch_size=" << cfg.batch_size
            << " lr=" << format_double(cfg.lr) << '\n';
  if (a.seeds.empty()) {
    auto single = cfg;
    single.checkpoint_dir = (out.path() / "checkpoint").string();
    const auto result = train(kind, ds, single);
    write_text_file(out.path() / "history.csv", history_csv(result.history));
    std::cout << "seed=" << cfg.seed << " parameters=" << result.checkpoint.meta.parameter_census
              << " best_epoch=" << result.checkpoint.meta.epoch
              << " val_loss=" << format_double(result.checkpoint.meta.validation_loss) << '\n';
  } else {
    std::vector<std::uint64_t> seeds;
    for (const auto& s : split_list(a.seeds)) {
      try {
        std::size_t used = 0;
        seeds.push_back(std::stoull(s, &used));
        if (used != s.size()) throw std::invalid_argument(s);
      } catch (const std::exception&) {
        throw ContractError("--seeds: '" + s + "' is not an unsigned integer");
      }
    }
    const auto results = run_seeds(kind, ds, cfg, seeds, a.threads.value_or(0));
    for (const auto& r : results) {
      const auto dir = out.path() / ("seed_" + std::to_string(r.checkpoint.meta.seed));
      fs::create_directories(dir);
      save_checkpoint(r.checkpoint, dir / "checkpoint");
      write_text_file(dir / "history.csv", history_csv(r.history));
      std::cout << "seed=" << r.checkpoint.meta.seed << " parameters=" << r.checkpoint.meta.parameter_census
                << " best_epoch=" << r.checkpoint.meta.epoch
                << " val_loss=" << format_double(r.checkpoint.meta.validation_loss) << '\n';
    }
  }
  out.commit();
}

struct EvaluateArgs {
  std::string checkpoint, data, split = "test", out;
  double threshold = kDecisionThreshold;
};

void run_evaluate(const EvaluateArgs& a) {
  const auto ck = load_checkpoint(resolve_checkpoint(a.checkpoint));
  const auto ds = load_dataset(a.data);
  const auto report = evaluate(ck, ds, parse_split(a.split), a.threshold);
  AtomicOutput out(a.out, false);
  write_text_file(out.path(), report_csv(report));
  out.commit();
  print_prf_table(report);
}

struct AttentionArgs {
  std::string checkpoint, data, keys, out;
  bool svg = false;
};

void run_attention(const AttentionArgs& a) {
  const auto ck = load_checkpoint(resolve_checkpoint(a.checkpoint));
  const auto ds = load_dataset(a.data);
  const auto keys = split_list(a.keys);
  if (keys.empty()) throw ContractError("--keys needs at least one sample key");
  const auto samples = export_attention(ck, ds, keys);
  AtomicOutput out(a.out);
  write_text_file(out.path() / "attention.json", attention_json(samples).dump(2) + "\n");
  if (a.svg)
    for (const auto& s : samples) write_text_file(out.path() / (safe_file_stem(s.sample_key) + ".svg"), attention_svg(s));
  out.commit();
  std::cout << "exported " << samples.size() << " samples\n";
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string out;
};

void run_report(const ReportArgs& a) {
  std::vector<EvalReport> reports;
  for (const auto& run : a.runs) {
    fs::path p = run;
    if (fs::is_directory(p)) p /= "eval.csv";
    if (!fs::exists(p)) throw DataError(run + ": no eval CSV found");
    reports.push_back(parse_report_csv(read_text_file(p)));
  }
  const auto summary = aggregate_seeds(reports);
  AtomicOutput out(a.out, false);
  write_text_file(out.path(), summary_csv(summary));
  out.commit();
  std::cout << "reports=" << reports.size() << '\n' << "metric,min,q1,median,q3,max,mean\n";
  for (const auto& m : summary) {
    if (m.metric.rfind("OVERALL/macro", 0) != 0) continue;
    std::cout << m.metric << ',' << format_double(m.min) << ',' << format_double(m.q1) << ','
              << format_double(m.median) << ',' << format_double(m.q3) << ',' << format_double(m.max) << ','
              << format_double(m.mean) << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-based multiple instance learning for weakly labeled multi-label data"};
  app.require_subcommand(1, 1);
  app.footer("Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numerical failure.\n\n" +
             train_config_schema() + "\n" + synth_spec_schema());
  std::string level = "info";
  app.add_option("--log-level", level, "debug, info, warn, error or off")
      ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}));

  std::function<void()> action;

  ConvertArgs conv;
  auto* c = app.add_subcommand("convert", "Import an OpenMIC NPZ release into the dataset directory format");
  c->add_option("--npz", conv.npz, "NPZ with X, Y_true, Y_mask, sample_key")->required();
  c->add_option("--train-split", conv.train_split, "CSV of train sample keys")->required();
  c->add_option("--test-split", conv.test_split, "CSV of test sample keys")->required();
  c->add_option("--classmap", conv.classmap, "JSON mapping label name to column index");
  c->add_option("--out", conv.out, "output dataset directory")->required();
  c->callback([&] { action = [&] { run_convert(conv); }; });

  SynthArgs syn;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dataset with planted instance-level truth");
  s->add_option("--spec", syn.spec, "synthetic spec JSON (see below)");
  s->add_option("--seed", syn.seed, "overrides the spec seed");
  s->add_option("--n-bags", syn.n_bags, "overrides the spec n_bags");
  s->add_option("--out", syn.out, "output dataset directory")->required();
  s->footer(synth_spec_schema());
  s->callback([&] { action = [&] { run_synth(syn); }; });

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model and keep the best-validation checkpoint");
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--config", tr.config, "train config JSON (see below)");
  t->add_option("--model", tr.model, "att, fc_t or fc")->check(CLI::IsMember({"att", "fc_t", "fc"}));
  t->add_option("--seed", tr.seed, "random seed");
  t->add_option("--seeds", tr.seeds, "comma-separated seeds; writes OUT/seed_<s>/ per seed")->excludes("--seed");
  t->add_option("--threads", tr.threads, "worker threads for --seeds (0 = all cores)");
  t->add_option("--epochs", tr.epochs);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--lr", tr.lr);
  t->add_option("--dropout-rate", tr.dropout_rate);
  t->add_option("--val-fraction", tr.val_fraction);
  t->add_option("--out", tr.out, "run directory (checkpoint/, history.csv, config.json)")->required();
  t->footer(train_config_schema());
  t->callback([&] { action = [&] { run_train(tr); }; });

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score a checkpoint on one split");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint or run directory")->required();
  e->add_option("--data", ev.data, "dataset directory")->required();
  e->add_option("--split", ev.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  e->add_option("--threshold", ev.threshold, "decision threshold, strict");
  e->add_option("--out", ev.out, "report CSV")->required();
  e->callback([&] { action = [&] { run_evaluate(ev); }; });

  AttentionArgs at;
  auto* a = app.add_subcommand("attention", "Export instance scores and attention weights");
  a->add_option("--checkpoint", at.checkpoint, "checkpoint or run directory")->required();
  a->add_option("--data", at.data, "dataset directory")->required();
  a->add_option("--keys", at.keys, "comma-separated sample keys")->required();
  a->add_flag("--svg", at.svg, "also write one SVG per sample");
  a->add_option("--out", at.out, "output directory")->required();
  a->callback([&] { action = [&] { run_attention(at); }; });

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "Aggregate per-seed eval CSVs into box-plot statistics");
  r->add_option("--runs", rep.runs, "eval CSV files or directories containing eval.csv")->required();
  r->add_option("--out", rep.out, "summary CSV")->required();
  r->callback([&] { action = [&] { run_report(rep); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitUsage;
  }

  const std::map<std::string, log::Level> levels = {{"debug", log::Level::debug},
                                                    {"info", log::Level::info},
                                                    {"warn", log::Level::warn},
                                                    {"error", log::Level::error},
                                                    {"off", log::Level::off}};
  log::set_level(levels.at(level));

  try {
    action();
  } catch (const ContractError& err) {
    log::error(err.what());
    return kExitUsage;
  } catch (const NumericalError& err) {
    log::error(err.what());
    return kExitNumerical;
  } catch (const DataError& err) {
    log::error(err.what());
    return kExitData;
  } catch (const fs::filesystem_error& err) {
    log::error(err.what());
    return kExitData;
  } catch (const std::exception& err) {
    log::error(err.what());
    return kExitData;
  }
  return 0;
}
