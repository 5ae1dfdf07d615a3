#include "wf/run_config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace wf {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument("config: " + what); }

void check_keys(const json& obj, const std::string& scope,
                const std::set<std::string>& allowed) {
  if (!obj.is_object()) fail("'" + scope + "' must be a JSON object");
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key))
      fail("unknown key '" + (scope.empty() ? key : scope + "." + key) + "'");
}

template <typename T>
void read(const json& obj, const std::string& scope, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    fail("'" + (scope.empty() ? std::string(key) : scope + "." + key) + "' has the wrong type");
  }
}

void parse_dataset(const json& obj, DatasetSpecConfig& ds, uint64_t run_seed) {
  check_keys(obj, "dataset",
             {"kind", "n_classes", "image_size", "per_class_train", "per_class_val",
              "per_class_test", "noise_sigma", "seed", "train_images", "train_labels",
              "test_images", "test_labels", "val_fraction"});
  read(obj, "dataset", "kind", ds.kind);
  if (ds.kind == "synth") {
    ds.synth.seed = run_seed;
    read(obj, "dataset", "n_classes", ds.synth.n_classes);
    read(obj, "dataset", "image_size", ds.synth.image_size);
    read(obj, "dataset", "per_class_train", ds.synth.per_class_train);
    read(obj, "dataset", "per_class_val", ds.synth.per_class_val);
    read(obj, "dataset", "per_class_test", ds.synth.per_class_test);
    read(obj, "dataset", "noise_sigma", ds.synth.noise_sigma);
    read(obj, "dataset", "seed", ds.synth.seed);
  } else if (ds.kind == "idx") {
    read(obj, "dataset", "train_images", ds.train_images);
    read(obj, "dataset", "train_labels", ds.train_labels);
    read(obj, "dataset", "test_images", ds.test_images);
    read(obj, "dataset", "test_labels", ds.test_labels);
    read(obj, "dataset", "val_fraction", ds.val_fraction);
    auto require = [](const char* name, const std::string& value) {
      if (value.empty()) fail("dataset kind 'idx' requires 'dataset." + std::string(name) + "'");
    };
    require("train_images", ds.train_images);
    require("train_labels", ds.train_labels);
    require("test_images", ds.test_images);
    require("test_labels", ds.test_labels);
    if (!(ds.val_fraction > 0.0 && ds.val_fraction < 1.0))
      fail("'dataset.val_fraction' must be in (0,1)");
  } else {
    fail("'dataset.kind' must be \"synth\" or \"idx\", got \"" + ds.kind + "\"");
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text, const ConfigOverrides& overrides) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    fail(std::string("not valid JSON: ") + e.what());
  }
  check_keys(doc, "", {"arch", "seed", "out_dir", "dataset", "train", "untrain", "explain"});

  RunConfig cfg;
  read(doc, "", "arch", cfg.arch);
  if (cfg.arch != "small_cnn" && cfg.arch != "tiny_vit")
    fail("'arch' must be \"small_cnn\" or \"tiny_vit\", got \"" + cfg.arch + "\"");
  read(doc, "", "seed", cfg.seed);
  if (overrides.seed) cfg.seed = *overrides.seed;
  read(doc, "", "out_dir", cfg.out_dir);
  if (overrides.out_dir) cfg.out_dir = *overrides.out_dir;

  if (!doc.contains("dataset")) fail("'dataset' is required (it is the only defaultless field)");
  parse_dataset(doc.at("dataset"), cfg.dataset, cfg.seed);

  cfg.train.seed = cfg.seed;
  if (doc.contains("train")) {
    const json& t = doc.at("train");
    check_keys(t, "train",
               {"optimizer", "learning_rate", "batch_size", "max_epochs", "patience", "seed"});
    read(t, "train", "optimizer", cfg.train.optimizer);
    read(t, "train", "learning_rate", cfg.train.learning_rate);
    read(t, "train", "batch_size", cfg.train.batch_size);
    read(t, "train", "max_epochs", cfg.train.max_epochs);
    read(t, "train", "patience", cfg.train.patience);
    read(t, "train", "seed", cfg.train.seed);
  }

  // ViT gates need a stronger forget weight than conv gates by default.
  if (cfg.arch == "tiny_vit") cfg.untrain.lambda1 = 100.0;
  cfg.untrain.seed = cfg.seed;
  if (doc.contains("untrain")) {
    const json& u = doc.at("untrain");
    check_keys(u, "untrain",
               {"lambda0", "lambda1", "lambda2", "chi", "learning_rate", "batch_size",
                "accumulation_steps", "patience", "validations_per_epoch", "loss_mode",
                "epsilon_guard", "seed", "validation_seed", "max_epochs", "max_val_batches",
                "gate_layers"});
    read(u, "untrain", "lambda0", cfg.untrain.lambda0);
    read(u, "untrain", "lambda1", cfg.untrain.lambda1);
    read(u, "untrain", "lambda2", cfg.untrain.lambda2);
    read(u, "untrain", "chi", cfg.untrain.chi);
    read(u, "untrain", "learning_rate", cfg.untrain.learning_rate);
    read(u, "untrain", "batch_size", cfg.untrain.batch_size);
    read(u, "untrain", "accumulation_steps", cfg.untrain.accumulation_steps);
    read(u, "untrain", "patience", cfg.untrain.patience);
    read(u, "untrain", "validations_per_epoch", cfg.untrain.validations_per_epoch);
    read(u, "untrain", "epsilon_guard", cfg.untrain.epsilon_guard);
    read(u, "untrain", "seed", cfg.untrain.seed);
    read(u, "untrain", "validation_seed", cfg.untrain.validation_seed);
    read(u, "untrain", "max_epochs", cfg.untrain.max_epochs);
    read(u, "untrain", "max_val_batches", cfg.untrain.max_val_batches);
    read(u, "untrain", "gate_layers", cfg.gate_layers);
    if (u.contains("loss_mode")) {
      std::string mode;
      read(u, "untrain", "loss_mode", mode);
      cfg.untrain.loss_mode = parse_loss_mode(mode);
    }
  }

  if (doc.contains("explain")) {
    const json& e = doc.at("explain");
    check_keys(e, "explain", {"layer", "top_k", "min_classes"});
    read(e, "explain", "layer", cfg.explain.layer);
    read(e, "explain", "top_k", cfg.explain.top_k);
    read(e, "explain", "min_classes", cfg.explain.min_classes);
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path, const ConfigOverrides& overrides) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str(), overrides);
}

DataSplits load_dataset(const DatasetSpecConfig& spec) {
  if (spec.kind == "synth") return synth_dataset(spec.synth);
  if (spec.kind != "idx")
    throw std::invalid_argument("config: dataset kind '" + spec.kind + "' is not loadable");

  Dataset full = load_idx(spec.train_images, spec.train_labels);
  Dataset test = load_idx(spec.test_images, spec.test_labels);
  test.split = "test";
  if (test.n_classes > full.n_classes) full.n_classes = test.n_classes;
  if (full.n_classes > test.n_classes) test.n_classes = full.n_classes;

  // Deterministic tail split: the last val_fraction of the train file.
  const Index n = full.size();
  const Index n_val = std::max<Index>(1, static_cast<Index>(spec.val_fraction * static_cast<double>(n)));
  if (n_val >= n)
    throw std::invalid_argument("config: val_fraction leaves no training data (" +
                                std::to_string(n) + " rows)");
  const Index n_train = n - n_val;
  const Index px = full.images.numel() / n;

  DataSplits out;
  out.train.images = Tensor({n_train, 1, full.image_size(), full.image_size()});
  out.val.images = Tensor({n_val, 1, full.image_size(), full.image_size()});
  out.train.images.array() = full.images.array().head(n_train * px);
  out.val.images.array() = full.images.array().tail(n_val * px);
  out.train.labels.assign(full.labels.begin(), full.labels.begin() + n_train);
  out.val.labels.assign(full.labels.begin() + n_train, full.labels.end());
  out.train.n_classes = out.val.n_classes = full.n_classes;
  out.train.split = "train";
  out.val.split = "val";
  out.test = std::move(test);
  return out;
}

}  // namespace wf
