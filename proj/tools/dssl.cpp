// dssl: generate synthetic documents, train, evaluate and run ablations.
#include <iostream>
#include <optional>
#include <ranges>
#include <string>
#include <type_traits>
#include <vector>

#include "CLI11.hpp"
#include "dssl/commands.hpp"

using dssl::Json;

namespace {

struct Overrides {
  std::string config_file;
  std::vector<std::string> sets;
  bool print_only = false;
  Json patch = Json::object();
};

// "a.b.c=value": value is parsed as JSON, falling back to a plain string.
void apply_set(Json& patch, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw dssl::ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  Json* node = &patch;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

template <class T>
void flag(CLI::App* app, Overrides& o, const std::string& name, const std::string& key, const std::string& help) {
  auto* opt = app->add_option_function<T>(
      name, [&o, key](const T& v) { apply_set(o.patch, key + "=" + Json(v).dump()); }, help);
  if constexpr (!std::is_same_v<T, std::string> && std::ranges::range<T>) opt->delimiter(',');
}

void common(CLI::App* app, Overrides& o) {
  app->add_option("-c,--config", o.config_file, "JSON config file; flags override its values");
  app->add_option("--set", o.sets, "Override any config key, e.g. --set train.lr=0.0005");
  app->add_flag("--print-config", o.print_only, "Print the resolved config and exit");
  flag<std::string>(app, o, "-o,--output", "output_dir", "Output directory (default: $DSSL_OUTPUT_ROOT/<command>)");
  flag<std::uint64_t>(app, o, "--seed", "seed", "Run seed");
}

void data_flags(CLI::App* app, Overrides& o) {
  flag<std::string>(app, o, "-d,--data", "data.dir", "Dataset directory (empty: synthesize in memory)");
  flag<std::size_t>(app, o, "--count", "data.count", "Pages to synthesize when no dataset directory is given");
  flag<double>(app, o, "--labels", "labels", "Labeled fraction of the training pool");
  flag<std::uint64_t>(app, o, "--split-seed", "split_seed", "Seed of the labeled/unlabeled/val/test split");
}

void train_flags(CLI::App* app, Overrides& o) {
  data_flags(app, o);
  flag<std::string>(app, o, "--mode", "mode", "semi or supervised");
  flag<double>(app, o, "--tau", "train.tau", "Pseudo-label confidence threshold");
  flag<std::size_t>(app, o, "--epochs", "train.epochs", "Training epochs");
  flag<std::size_t>(app, o, "--steps-per-epoch", "train.steps_per_epoch", "Optimizer steps per epoch");
  flag<double>(app, o, "--lr", "train.lr", "Learning rate");
  flag<std::size_t>(app, o, "--batch-size", "train.batch_size", "Labeled images per step");
  flag<double>(app, o, "--ema", "train.ema_momentum", "Teacher EMA momentum");
  flag<std::size_t>(app, o, "--queries", "model.num_queries", "Decoder queries N");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised table detection with a deformable-attention detector"};
  app.require_subcommand(1);
  Overrides o;

  auto* gen = app.add_subcommand("generate", "Write a synthetic document dataset");
  common(gen, o);
  flag<std::size_t>(gen, o, "--count", "count", "Number of pages");
  flag<double>(gen, o, "--labels", "labels", "Labeled fraction recorded in the manifest");
  flag<std::uint64_t>(gen, o, "--split-seed", "split_seed", "Seed of the split recorded in the manifest");
  gen->add_flag_callback("--force", [&o] { apply_set(o.patch, "force=true"); }, "Allow a non-empty output directory");

  auto* train = app.add_subcommand("train", "Train a detector (semi-supervised or supervised-only)");
  common(train, o);
  train_flags(train, o);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint or a detection results file");
  common(eval, o);
  data_flags(eval, o);
  flag<std::string>(eval, o, "--run", "run_dir", "Training run directory (model, data and best checkpoint)");
  flag<std::string>(eval, o, "--checkpoint", "checkpoint", "Checkpoint file");
  flag<std::string>(eval, o, "--predictions", "predictions", "Detection results JSON instead of a model");
  flag<std::string>(eval, o, "--split", "split", "labeled, unlabeled, val or test");
  flag<double>(eval, o, "--score-threshold", "eval.score_threshold", "Score cut for precision/recall/F1");
  flag<std::vector<double>>(eval, o, "--ious", "eval.report_ious", "IoU thresholds of the P/R/F1 rows");
  eval->add_flag_callback("--no-overlays", [&o] { apply_set(o.patch, "overlays=false"); }, "Skip overlay images");

  auto* ablate = app.add_subcommand("ablate", "Sweep tau or the query count; one training run per value");
  common(ablate, o);
  train_flags(ablate, o);
  flag<std::string>(ablate, o, "--kind", "ablate.kind", "tau or queries");
  flag<std::vector<double>>(ablate, o, "--grid", "ablate.grid", "Grid values");

  CLI11_PARSE(app, argc, argv);

  try {
    const std::string command = app.get_subcommands().front()->get_name();
    Json cfg = dssl::default_config(command);
    if (!o.config_file.empty()) {
      Json file = dssl::load_config(o.config_file);
      if (file.at("command") != command)
        throw dssl::ConfigError(o.config_file + " is a '" + file.at("command").get<std::string>() + "' config");
      cfg = file;
    }
    for (const auto& s : o.sets) apply_set(o.patch, s);
    cfg = dssl::merge_config(cfg, o.patch);
    if (o.print_only) {
      std::cout << cfg.dump(2) << "\n";
      return 0;
    }
    dssl::run_command(cfg, std::cout);
  } catch (const dssl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
