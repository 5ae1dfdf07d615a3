#pragma once

#include "wf/data.hpp"
#include "wf/train.hpp"
#include "wf/untrain.hpp"

#include <optional>
#include <string>
#include <vector>

namespace wf {

// Where the data comes from: the synthetic generator or a pair of IDX files.
struct DatasetSpecConfig {
  std::string kind;  // "synth" | "idx"
  SynthSpec synth;
  std::string train_images, train_labels, test_images, test_labels;
  double val_fraction = 0.1;  // carved off the end of the IDX train split
};

struct ExplainConfig {
  std::string layer;  // empty = first gated layer
  int top_k = 10;
  int min_classes = 2;
};

// One run, parsed from a single JSON document. Every field has a default
// except the dataset spec; unknown keys are rejected.
struct RunConfig {
  std::string arch = "small_cnn";
  uint64_t seed = 7;
  std::string out_dir = "runs";
  DatasetSpecConfig dataset;
  TrainConfig train;
  UntrainConfig untrain;
  std::vector<std::string> gate_layers;  // empty = every gateable layer
  ExplainConfig explain;
};

// Command-line values that beat the file: flag > file > default. A seed
// override is applied before the derived per-section seeds are defaulted.
struct ConfigOverrides {
  std::optional<uint64_t> seed;
  std::optional<std::string> out_dir;
};

RunConfig parse_run_config(const std::string& json_text, const ConfigOverrides& overrides = {});
RunConfig load_run_config(const std::string& path, const ConfigOverrides& overrides = {});

// Materializes the configured dataset (synthetic or IDX-backed).
DataSplits load_dataset(const DatasetSpecConfig& spec);

}  // namespace wf
