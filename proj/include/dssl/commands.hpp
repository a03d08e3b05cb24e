#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "dssl/data.hpp"
#include "dssl/engine.hpp"
#include "dssl/metrics.hpp"

namespace dssl {

using Json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Complete configuration of a command with every key at its default value.
/// Commands: generate, train, eval, ablate.
Json default_config(std::string_view command);

/// Recursively overlays `patch` onto `base`. Keys that `base` does not have
/// and type changes (other than between number kinds) are rejected.
Json merge_config(const Json& base, const Json& patch);

/// Reads a config file and merges it over the defaults of its "command".
Json load_config(const std::filesystem::path& file);

/// DSSL_OUTPUT_ROOT if set, otherwise "runs".
std::filesystem::path default_output_root();

SynthDocSpec synth_spec_from(const Json& cfg);
TrainConfig train_config_from(const Json& cfg);
EvalConfig eval_config_from(const Json& cfg);
ModelConfig model_config_from(const Json& model);
Json to_json(const ModelConfig& m);

/// Dataset of a train/eval/ablate config with splits assigned from
/// "labels" and "split_seed".
Dataset load_split_dataset(const Json& cfg);

/// Writes images, annotations.json and manifest.tsv into output_dir.
Dataset cmd_generate(const Json& cfg, std::ostream& log);

/// Trains into output_dir: config.json, metrics.csv, checkpoint_final.bin,
/// checkpoint_best.bin.
TrainResult cmd_train(const Json& cfg, std::ostream& log);

/// Evaluates a checkpoint (or a results file) on one split; writes
/// report.csv, detections.json and overlays/*.pgm into output_dir.
EvalReport cmd_eval(const Json& cfg, std::ostream& log);

struct SweepRow {
  double value = 0.0;
  EvalReport report;
  std::size_t pseudo_count = 0;
  double pseudo_confidence = 0.0;
  double wall_seconds = 0.0;
};

/// One training run per grid value of "tau" or "queries", each in its own
/// subdirectory, plus sweep.csv.
std::vector<SweepRow> cmd_ablate(const Json& cfg, std::ostream& log);

/// Dispatches on cfg["command"] after writing the resolved config.
void run_command(const Json& cfg, std::ostream& log);

/// Burns 1-px rectangle outlines into a copy of the image.
Image draw_boxes(const Image& image, const std::vector<Box>& boxes, double value);

}  // namespace dssl
