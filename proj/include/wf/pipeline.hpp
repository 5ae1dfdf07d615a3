#pragma once

#include "wf/metrics.hpp"
#include "wf/run_config.hpp"

namespace wf {

// Commands compose through fixed filenames inside cfg.out_dir:
//   baseline.ckpt            trained base model        (cmd_train)
//   train_report.json        training summary          (cmd_train)
//   oracle_class<k>.ckpt     leave-one-out oracles     (cmd_retrain_all)
//   unlearned.ckpt           gated model, post-untrain (cmd_untrain)
//   untrain_history.jsonl    per-validation loss trace (cmd_untrain)
//   metrics.json / .txt      evaluation report         (cmd_eval)
//   curve_<kind>_class<k>.csv  fraction/confidence curves (cmd_eval)
//   associations.csv         class-filter edge list    (cmd_explain)
//   association_graph.json   graph document            (cmd_explain)
// All commands are deterministic given config + seeds and never modify
// their input checkpoints.

void cmd_train(const RunConfig& cfg);
void cmd_retrain_all(const RunConfig& cfg);
void cmd_untrain(const RunConfig& cfg);

// cls = -1 evaluates every class. oracles_dir empty: activation distance and
// JS divergence are omitted from the report.
MetricsReport cmd_eval(const RunConfig& cfg, int cls = -1, const std::string& oracles_dir = "");

void cmd_explain(const RunConfig& cfg);

// Prints one pass/fail row per op kind; returns the number of failures.
int cmd_gradcheck(uint64_t seed);

}  // namespace wf
