#include "wf/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <string>

int main(int argc, char** argv) {
  CLI::App app{"per-class weight-gate unlearning: train, untrain, evaluate, explain"};
  app.require_subcommand(1);

  std::string config_path, out_dir, oracles_dir, cls_arg = "all", layer;
  uint64_t seed = 0;
  int top_k = 10, min_classes = 2;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration (JSON)")->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", out_dir, "override the config output directory");
    return sub;
  };

  CLI::App* train = add_common(app.add_subcommand("train", "train the baseline classifier"));
  CLI::App* retrain =
      add_common(app.add_subcommand("retrain-all", "train one leave-one-out oracle per class"));
  CLI::App* untrain =
      add_common(app.add_subcommand("untrain", "gate the baseline and unlearn every class"));
  CLI::App* eval = add_common(app.add_subcommand("eval", "score the unlearned model"));
  eval->add_option("--class", cls_arg, "class index, or 'all'");
  eval->add_option("--oracles", oracles_dir, "directory holding oracle_class<k>.ckpt files");
  CLI::App* explain =
      add_common(app.add_subcommand("explain", "export class-filter association data"));
  explain->add_option("--layer", layer, "gated layer id (default: first gated layer)");
  explain->add_option("--top-k", top_k, "filters kept per class");
  explain->add_option("--min-classes", min_classes, "min classes sharing a filter");
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "compare analytic gradients to finite differences");
  gradcheck->add_option("--seed", seed, "randomization seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gradcheck->parsed()) return wf::cmd_gradcheck(seed) == 0 ? 0 : 1;

    wf::ConfigOverrides overrides;
    CLI::App* active = app.get_subcommands().front();
    if (active->count("--seed") > 0) overrides.seed = seed;
    if (active->count("--out") > 0) overrides.out_dir = out_dir;
    wf::RunConfig cfg = wf::load_run_config(config_path, overrides);

    if (train->parsed()) {
      wf::cmd_train(cfg);
    } else if (retrain->parsed()) {
      wf::cmd_retrain_all(cfg);
    } else if (untrain->parsed()) {
      wf::cmd_untrain(cfg);
    } else if (eval->parsed()) {
      int cls = -1;
      if (cls_arg != "all") {
        try {
          size_t used = 0;
          cls = std::stoi(cls_arg, &used);
          if (used != cls_arg.size()) throw std::invalid_argument("");
        } catch (const std::exception&) {
          throw std::invalid_argument("--class must be an integer or 'all', got '" + cls_arg + "'");
        }
      }
      wf::cmd_eval(cfg, cls, oracles_dir);
    } else if (explain->parsed()) {
      if (explain->count("--layer") > 0) cfg.explain.layer = layer;
      if (explain->count("--top-k") > 0) cfg.explain.top_k = top_k;
      if (explain->count("--min-classes") > 0) cfg.explain.min_classes = min_classes;
      wf::cmd_explain(cfg);
    }
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
