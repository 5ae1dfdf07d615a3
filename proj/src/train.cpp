#include "wf/train.hpp"

#include "wf/ops.hpp"

#include <cmath>
#include <stdexcept>

namespace wf {
namespace {

uint64_t mix(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

void check_train_config(const TrainConfig& cfg) {
  if (cfg.optimizer != "adam" && cfg.optimizer != "sgd")
    throw std::invalid_argument("train: unknown optimizer '" + cfg.optimizer + "'; known: adam, sgd");
  if (!(cfg.learning_rate > 0.0)) throw std::invalid_argument("train: learning rate must be > 0");
  if (cfg.batch_size < 2 || cfg.batch_size % 2 != 0)
    throw std::invalid_argument("train: batch size must be even and >= 2");
  if (cfg.max_epochs < 1) throw std::invalid_argument("train: max_epochs must be >= 1");
  if (cfg.patience < 1) throw std::invalid_argument("train: patience must be >= 1");
}

}  // namespace

Adam::Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Parameter* p : params_) {
    m_.push_back(Eigen::ArrayXd::Zero(p->value.numel()));
    v_.push_back(Eigen::ArrayXd::Zero(p->value.numel()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter* p = params_[i];
    if (!p->trainable) continue;
    const Eigen::ArrayXd& g = p->grad.array();
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.square();
    p->value.array() -= lr_ * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + eps_);
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

Sgd::Sgd(std::vector<Parameter*> params, double lr) : params_(std::move(params)), lr_(lr) {}

void Sgd::step() {
  for (Parameter* p : params_) {
    if (!p->trainable) continue;
    p->value.array() -= lr_ * p->grad.array();
  }
}

void Sgd::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

std::vector<Tensor> snapshot_values(const std::vector<Parameter*>& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Parameter* p : params) out.push_back(p->value);
  return out;
}

void restore_values(const std::vector<Parameter*>& params, const std::vector<Tensor>& values) {
  if (params.size() != values.size())
    throw std::invalid_argument("restore_values: snapshot holds " + std::to_string(values.size()) +
                                " tensors for " + std::to_string(params.size()) + " parameters");
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->value.same_shape(values[i]))
      throw std::invalid_argument("restore_values: shape mismatch for '" + params[i]->name + "'");
    params[i]->value = values[i];
  }
}

double dataset_accuracy(Network& m, const Dataset& ds, int selector_row) {
  if (ds.size() == 0) throw std::invalid_argument("accuracy: empty sample set");
  std::vector<int> pred = predict(m, ds.images, selector_row);
  Index hits = 0;
  for (size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == ds.labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

TrainResult train_baseline(Network& model, const Dataset& train, const Dataset& val,
                           const TrainConfig& cfg) {
  check_train_config(cfg);
  if (model.wrapped())
    throw std::invalid_argument("train_baseline: expects an unwrapped base model");
  if (train.size() < cfg.batch_size)
    throw std::invalid_argument("train_baseline: training split smaller than one batch");
  if (val.size() == 0) throw std::invalid_argument("train_baseline: empty validation split");

  std::vector<Parameter*> params = model.parameters();
  std::unique_ptr<Adam> adam;
  std::unique_ptr<Sgd> sgd;
  if (cfg.optimizer == "adam")
    adam = std::make_unique<Adam>(params, cfg.learning_rate);
  else
    sgd = std::make_unique<Sgd>(params, cfg.learning_rate);
  auto opt_step = [&] {
    if (adam) adam->step();
    else sgd->step();
  };
  auto opt_zero = [&] {
    if (adam) adam->zero_grad();
    else sgd->zero_grad();
  };
  opt_zero();

  TrainResult res;
  std::vector<Tensor> best = snapshot_values(params);
  double best_acc = -1.0;
  int stale = 0;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    for (const Batch& b : batches(train, cfg.batch_size, mix(cfg.seed, static_cast<uint64_t>(epoch)))) {
      Tape t;
      Var loss = softmax_cross_entropy(model.forward(t, b.images), b.labels);
      double lv = loss.scalar();
      if (!std::isfinite(lv))
        throw std::runtime_error("train_baseline: non-finite loss at epoch " + std::to_string(epoch));
      t.backward(loss);
      opt_step();
      opt_zero();
    }
    res.epochs_run = epoch + 1;
    double acc = dataset_accuracy(model, val);
    res.val_accuracy_history.push_back(acc);
    if (acc > best_acc) {
      best_acc = acc;
      best = snapshot_values(params);
      stale = 0;
    } else if (++stale >= cfg.patience) {
      res.early_stopped = true;
      break;
    }
  }
  restore_values(params, best);
  res.best_val_accuracy = best_acc;
  return res;
}

std::unique_ptr<Network> retrain_without_class(const Network& reference, const Dataset& train,
                                               const Dataset& val, int excluded,
                                               const TrainConfig& cfg, uint64_t init_seed) {
  if (excluded < 0 || excluded >= reference.n_classes())
    throw std::invalid_argument("retrain_without_class: class " + std::to_string(excluded) +
                                " out of range [0," + std::to_string(reference.n_classes()) + ")");
  std::unique_ptr<Network> m =
      make_network(reference.architecture(), reference.n_classes(), reference.image_size(), init_seed);
  Dataset tr = subset_excluding_class(train, excluded);
  Dataset va = subset_excluding_class(val, excluded);
  train_baseline(*m, tr, va, cfg);
  return m;
}

}  // namespace wf
