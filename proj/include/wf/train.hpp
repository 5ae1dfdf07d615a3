#pragma once

#include "wf/data.hpp"
#include "wf/models.hpp"

#include <memory>
#include <string>
#include <vector>

namespace wf {

struct TrainConfig {
  std::string optimizer = "adam";  // "adam" | "sgd"
  double learning_rate = 1e-3;
  Index batch_size = 64;
  int max_epochs = 30;
  int patience = 5;  // epochs without val-accuracy improvement
  uint64_t seed = 1;
};

struct TrainResult {
  double best_val_accuracy = 0.0;
  int epochs_run = 0;
  bool early_stopped = false;
  std::vector<double> val_accuracy_history;
};

// Steps only trainable parameters; gradients are consumed as-is and zeroed
// by the caller (train loops call step() then zero_grad()).
class Adam {
 public:
  Adam(std::vector<Parameter*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  void step();
  void zero_grad();

 private:
  std::vector<Parameter*> params_;
  std::vector<Eigen::ArrayXd> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

class Sgd {
 public:
  Sgd(std::vector<Parameter*> params, double lr);
  void step();
  void zero_grad();

 private:
  std::vector<Parameter*> params_;
  double lr_;
};

// Value-only snapshots, used for best-epoch restore in the training loops.
std::vector<Tensor> snapshot_values(const std::vector<Parameter*>& params);
void restore_values(const std::vector<Parameter*>& params, const std::vector<Tensor>& values);

// Plain argmax accuracy over a dataset (chunked, untaped).
double dataset_accuracy(Network& m, const Dataset& ds, int selector_row = Network::kNoSelector);

// Cross-entropy training with per-epoch validation, early stopping on val
// accuracy, and best-snapshot restore. The model must be unwrapped.
TrainResult train_baseline(Network& model, const Dataset& train, const Dataset& val,
                           const TrainConfig& cfg);

// Leave-one-out oracle: a fresh model of the same architecture (seeded by
// init_seed) trained with every class-`excluded` sample filtered out. The
// head keeps all n_classes outputs.
std::unique_ptr<Network> retrain_without_class(const Network& reference, const Dataset& train,
                                               const Dataset& val, int excluded,
                                               const TrainConfig& cfg, uint64_t init_seed);

}  // namespace wf
