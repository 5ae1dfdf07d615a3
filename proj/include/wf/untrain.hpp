#pragma once

#include "wf/data.hpp"
#include "wf/models.hpp"

#include <random>
#include <utility>
#include <vector>

namespace wf {

// How the retain and forget pressures combine into the scalar objective.
//   Reciprocal:  L = l0*S_r + l1/(S_u + eps) + l2*R
//   Difference:  L = l0*S_r - l1*S_u + l2*R
//   LogitTarget: retain CE replaced by mean squared distance to the frozen
//                base model's logits; forget/regularizer terms unchanged.
enum class UntrainLossMode { Reciprocal, Difference, LogitTarget };

UntrainLossMode parse_loss_mode(const std::string& name);
std::string loss_mode_name(UntrainLossMode mode);

struct UntrainConfig {
  double lambda0 = 1.0;
  double lambda1 = 10.0;
  double lambda2 = 1.0;
  int chi = 3;                    // retain-half replicas with random selectors
  double learning_rate = 100.0;   // plain gradient descent on gate logits
  Index batch_size = 128;
  int accumulation_steps = 16;    // batches per optimizer step
  int patience = 10;              // validations without improvement
  int validations_per_epoch = 5;
  UntrainLossMode loss_mode = UntrainLossMode::Reciprocal;
  double epsilon_guard = 1e-8;    // added to S_u under the reciprocal
  uint64_t seed = 0;
  uint64_t validation_seed = 1234;  // fixes val batch order and selector draws
  int max_epochs = 50;
  int max_val_batches = 4;        // val loss averaged over this many batches
};

void check_untrain_config(const UntrainConfig& cfg);

// One loss evaluation, reported at validation time.
struct UntrainStats {
  double s_u = 0.0;   // forget cross-entropy
  double s_r = 0.0;   // retain term
  double reg = 0.0;   // open-gate regularizer
  double total = 0.0;
};

struct UntrainRecord {
  long step = 0;  // batches consumed when the validation ran
  double s_r = 0.0, s_u = 0.0, reg = 0.0, loss = 0.0, val_loss = 0.0;
};

struct UntrainResult {
  std::vector<UntrainRecord> history;
  long batches_seen = 0;
  long optimizer_steps = 0;
  int epochs_run = 0;
  bool early_stopped = false;
  double best_val_loss = 0.0;
};

// First half unlearns, second half retains. Batch must be even.
std::pair<Batch, Batch> split_batch(const Batch& b);

// Mean CE of the unlearn half, each sample forwarded under its own label row.
Var forget_term(Tape& t, Network& m, const Batch& unlearn_half);
// Mean CE over chi replicas of the retain half, each sample under a freshly
// drawn random selector row; rng drives the draws (one per sample, in order).
Var retain_term(Tape& t, Network& m, const Batch& retain_half, int chi, std::mt19937_64& rng);
// Mean squared L2 distance to the frozen base logits (masking bypassed),
// samples forwarded under their own label row.
Var retain_term_logit(Tape& t, Network& m, const Batch& retain_half);
// Mean over layers of mean(1 - sigma(raw)) pooled over both gate banks.
Var gate_regularizer(Tape& t, Network& m);

// Full composite loss on one batch per cfg.loss_mode.
Var untrain_loss(Tape& t, Network& m, const Batch& batch, const UntrainConfig& cfg,
                 std::mt19937_64& selector_rng, UntrainStats* stats = nullptr);

// Single-round multi-class untraining: plain GD on the gate logits with
// gradient accumulation, logit clipping after every step, periodic validation
// on `val`, early stopping, and best-snapshot restore. Base weights frozen.
UntrainResult untrain(Network& m, const Dataset& stream, const Dataset& val, const UntrainConfig& cfg);

}  // namespace wf
