#include "wf/pipeline.hpp"

#include "wf/checkpoint.hpp"
#include "wf/explain.hpp"
#include "wf/gradcheck.hpp"
#include "wf/train.hpp"
#include "wf/untrain.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace wf {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

uint64_t mix(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

fs::path out_path(const RunConfig& cfg, const std::string& name) {
  fs::create_directories(cfg.out_dir);
  return fs::path(cfg.out_dir) / name;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw std::runtime_error("write to '" + path.string() + "' failed");
}

std::unique_ptr<Network> load_required(const RunConfig& cfg, const std::string& name,
                                       const std::string& producer) {
  fs::path p = fs::path(cfg.out_dir) / name;
  if (!fs::exists(p))
    throw std::runtime_error("missing " + p.string() + " (run '" + producer + "' first)");
  return load_checkpoint_file(p.string());
}

std::string dataset_id(const DatasetSpecConfig& spec) {
  if (spec.kind == "synth") {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "synth:nc=%d,s=%d,seed=%llu", spec.synth.n_classes,
                  spec.synth.image_size, static_cast<unsigned long long>(spec.synth.seed));
    return buf;
  }
  return "idx:" + fs::path(spec.train_images).filename().string();
}

void check_dataset_model(const Network& m, const Dataset& ds, const std::string& what) {
  if (m.n_classes() != ds.n_classes || m.image_size() != ds.image_size())
    throw std::runtime_error(what + ": checkpoint is " + std::to_string(m.n_classes()) +
                             " classes @" + std::to_string(m.image_size()) +
                             "px but the dataset is " + std::to_string(ds.n_classes) +
                             " classes @" + std::to_string(ds.image_size()) + "px");
}

// Acc_r(c): all non-c test images classified under selector c.
double retain_accuracy(Network& m, const Dataset& test, int cls) {
  return accuracy(m, subset_excluding_class(test, cls), cls);
}

double forget_accuracy(Network& m, const Dataset& test, int cls) {
  return accuracy(m, subset_of_class(test, cls), cls);
}

std::string curve_csv(const Curve& c) {
  std::string out = "fraction,normalized_confidence\n";
  char buf[80];
  for (const CurvePoint& p : c.points) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", p.fraction, p.value);
    out += buf;
  }
  return out;
}

const char* curve_tag(CurveKind k) {
  switch (k) {
    case CurveKind::Deletion: return "deletion";
    case CurveKind::Insertion: return "insertion";
    default: return "other_class";
  }
}

json report_to_json(const MetricsReport& r) {
  json j;
  j["model_id"] = r.model_id;
  j["dataset_id"] = r.dataset_id;
  j["arch"] = r.arch;
  j["seed"] = r.seed;
  j["mean_acc_retain"] = r.mean_acc_retain;
  j["mean_acc_forget"] = r.mean_acc_forget;
  j["mean_zrf"] = r.mean_zrf;
  j["classes"] = json::array();
  for (const ClassMetricsRow& row : r.classes) {
    json c;
    c["class"] = row.cls;
    c["acc_retain"] = row.acc_retain;
    c["acc_forget"] = row.acc_forget;
    c["zrf"] = row.zrf;
    if (row.activation_distance) c["activation_distance"] = *row.activation_distance;
    if (row.js_divergence) c["js_divergence"] = *row.js_divergence;
    if (row.insertion_auc) c["insertion_auc"] = *row.insertion_auc;
    if (row.deletion_auc) c["deletion_auc"] = *row.deletion_auc;
    j["classes"].push_back(std::move(c));
  }
  return j;
}

std::string report_table(const MetricsReport& r) {
  char buf[160];
  std::string out;
  std::snprintf(buf, sizeof(buf), "model %s | data %s | arch %s | seed %llu\n",
                r.model_id.c_str(), r.dataset_id.c_str(), r.arch.c_str(),
                static_cast<unsigned long long>(r.seed));
  out += buf;
  out += "class  acc_r   acc_f   zrf     act_dist  js_div    ins_auc  del_auc\n";
  auto opt = [](const std::optional<double>& v, const char* fmt) {
    char b[32];
    if (v)
      std::snprintf(b, sizeof(b), fmt, *v);
    else
      std::snprintf(b, sizeof(b), "%8s", "-");
    return std::string(b);
  };
  for (const ClassMetricsRow& c : r.classes) {
    std::snprintf(buf, sizeof(buf), "%5d  %.4f  %.4f  %.4f", c.cls, c.acc_retain, c.acc_forget,
                  c.zrf);
    out += buf;
    out += "  " + opt(c.activation_distance, "%8.4f");
    out += "  " + opt(c.js_divergence, "%8.4f");
    out += " " + opt(c.insertion_auc, "%8.4f");
    out += " " + opt(c.deletion_auc, "%8.4f");
    out += "\n";
  }
  std::snprintf(buf, sizeof(buf), " mean  %.4f  %.4f  %.4f\n", r.mean_acc_retain,
                r.mean_acc_forget, r.mean_zrf);
  out += buf;
  return out;
}

}  // namespace

void cmd_train(const RunConfig& cfg) {
  DataSplits data = load_dataset(cfg.dataset);
  std::unique_ptr<Network> net =
      make_network(cfg.arch, data.train.n_classes, static_cast<int>(data.train.image_size()),
                   mix(cfg.seed, 0xB45E));
  TrainResult res = train_baseline(*net, data.train, data.val, cfg.train);
  const double test_acc = dataset_accuracy(*net, data.test);

  save_checkpoint_file(*net, out_path(cfg, "baseline.ckpt").string());
  json rep;
  rep["arch"] = cfg.arch;
  rep["seed"] = cfg.seed;
  rep["dataset_id"] = dataset_id(cfg.dataset);
  rep["best_val_accuracy"] = res.best_val_accuracy;
  rep["test_accuracy"] = test_acc;
  rep["epochs_run"] = res.epochs_run;
  rep["early_stopped"] = res.early_stopped;
  rep["val_accuracy_history"] = res.val_accuracy_history;
  write_text(out_path(cfg, "train_report.json"), rep.dump(2) + "\n");

  std::printf("trained %s: val acc %.4f, test acc %.4f, %d epochs%s\n", cfg.arch.c_str(),
              res.best_val_accuracy, test_acc, res.epochs_run,
              res.early_stopped ? " (early stop)" : "");
  std::printf("wrote %s\n", out_path(cfg, "baseline.ckpt").string().c_str());
}

void cmd_retrain_all(const RunConfig& cfg) {
  DataSplits data = load_dataset(cfg.dataset);
  std::unique_ptr<Network> reference =
      make_network(cfg.arch, data.train.n_classes, static_cast<int>(data.train.image_size()),
                   mix(cfg.seed, 0xB45E));
  for (int c = 0; c < data.train.n_classes; ++c) {
    std::unique_ptr<Network> oracle =
        retrain_without_class(*reference, data.train, data.val, c, cfg.train, mix(cfg.seed, 1000 + c));
    const double forget_acc = forget_accuracy(*oracle, data.test, c);
    const double retain_acc = retain_accuracy(*oracle, data.test, c);
    std::string name = "oracle_class" + std::to_string(c) + ".ckpt";
    save_checkpoint_file(*oracle, out_path(cfg, name).string());
    std::printf("oracle class %d: retain acc %.4f, forget acc %.4f -> %s\n", c, retain_acc,
                forget_acc, name.c_str());
  }
}

void cmd_untrain(const RunConfig& cfg) {
  DataSplits data = load_dataset(cfg.dataset);
  std::unique_ptr<Network> base = load_required(cfg, "baseline.ckpt", "train");
  check_dataset_model(*base, data.train, "untrain");
  std::unique_ptr<Network> wf = wf_wrap(*base, cfg.gate_layers);
  UntrainResult res = untrain(*wf, data.train, data.val, cfg.untrain);

  save_checkpoint_file(*wf, out_path(cfg, "unlearned.ckpt").string());
  std::string hist;
  for (const UntrainRecord& r : res.history) {
    json line;
    line["step"] = r.step;
    line["S_r"] = r.s_r;
    line["S_u"] = r.s_u;
    line["R"] = r.reg;
    line["L"] = r.loss;
    line["val_L"] = r.val_loss;
    hist += line.dump() + "\n";
  }
  write_text(out_path(cfg, "untrain_history.jsonl"), hist);

  std::printf("untrained (%s loss): %ld batches, %ld steps, %d epochs%s, best val loss %.6f\n",
              loss_mode_name(cfg.untrain.loss_mode).c_str(), res.batches_seen, res.optimizer_steps,
              res.epochs_run, res.early_stopped ? " (early stop)" : "", res.best_val_loss);
  std::printf("wrote %s\n", out_path(cfg, "unlearned.ckpt").string().c_str());
}

MetricsReport cmd_eval(const RunConfig& cfg, int cls, const std::string& oracles_dir) {
  DataSplits data = load_dataset(cfg.dataset);
  std::unique_ptr<Network> unlearned = load_required(cfg, "unlearned.ckpt", "untrain");
  std::unique_ptr<Network> baseline = load_required(cfg, "baseline.ckpt", "train");
  check_dataset_model(*unlearned, data.test, "eval");
  if (!unlearned->wrapped()) throw std::runtime_error("eval: unlearned.ckpt carries no gates");
  if (cls < -1 || cls >= unlearned->n_classes())
    throw std::runtime_error("eval: class " + std::to_string(cls) + " out of range [0," +
                             std::to_string(unlearned->n_classes()) + ")");

  std::unique_ptr<Network> twin =
      make_network(cfg.arch, unlearned->n_classes(), unlearned->image_size(), mix(cfg.seed, 0x2BF));

  MetricsReport report;
  report.model_id = "unlearned.ckpt";
  report.dataset_id = dataset_id(cfg.dataset);
  report.arch = cfg.arch;
  report.seed = cfg.seed;

  std::vector<int> wanted;
  if (cls == -1)
    for (int c = 0; c < unlearned->n_classes(); ++c) wanted.push_back(c);
  else
    wanted.push_back(cls);

  for (int c : wanted) {
    ClassMetricsRow row;
    row.cls = c;
    Dataset forget = subset_of_class(data.test, c);
    row.acc_forget = accuracy(*unlearned, forget, c);
    row.acc_retain = retain_accuracy(*unlearned, data.test, c);
    row.zrf = zrf(*unlearned, *twin, forget.images, c);

    Curve del = deletion_curve(*unlearned, *baseline, data.test, c);
    Curve ins = insertion_curve(*unlearned, *baseline, data.test, c);
    Curve oth = other_class_curve(*unlearned, *baseline, data.test, c);
    row.deletion_auc = del.auc;
    row.insertion_auc = ins.auc;
    for (const Curve* cv : {&del, &ins, &oth}) {
      std::string name =
          std::string("curve_") + curve_tag(cv->kind) + "_class" + std::to_string(c) + ".csv";
      write_text(out_path(cfg, name), curve_csv(*cv));
    }

    if (!oracles_dir.empty()) {
      fs::path op = fs::path(oracles_dir) / ("oracle_class" + std::to_string(c) + ".ckpt");
      if (!fs::exists(op))
        throw std::runtime_error("eval: missing oracle checkpoint " + op.string());
      std::unique_ptr<Network> oracle = load_checkpoint_file(op.string());
      row.activation_distance = activation_distance(*unlearned, *oracle, forget.images, c);
      row.js_divergence = mean_js(*unlearned, *oracle, forget.images, c);
    }
    report.classes.push_back(std::move(row));
  }
  finalize_means(report);

  write_text(out_path(cfg, "metrics.json"), report_to_json(report).dump(2) + "\n");
  std::string table = report_table(report);
  write_text(out_path(cfg, "metrics.txt"), table);
  std::fputs(table.c_str(), stdout);
  return report;
}

void cmd_explain(const RunConfig& cfg) {
  std::unique_ptr<Network> unlearned = load_required(cfg, "unlearned.ckpt", "untrain");
  if (!unlearned->wrapped()) throw std::runtime_error("explain: unlearned.ckpt carries no gates");
  std::string layer = cfg.explain.layer;
  if (layer.empty()) layer = unlearned->wf_layers().front().id;

  FilterRelevance rel = filter_relevance(*unlearned, layer);
  TopFilters top = top_filters(rel, cfg.explain.top_k);
  AssociationGraph graph = shared_filter_graph(top, cfg.explain.min_classes);

  write_association_csv(graph, out_path(cfg, "associations.csv").string());
  json g;
  g["layer"] = graph.layer_id;
  g["top_k"] = graph.k;
  g["min_classes"] = graph.min_classes;
  g["n_classes"] = unlearned->n_classes();
  g["filters"] = graph.filters;
  g["edges"] = json::array();
  for (const AssociationEdge& e : graph.edges) {
    json edge;
    edge["class"] = e.cls;
    edge["filter"] = e.filter;
    edge["relevance"] = e.relevance;
    g["edges"].push_back(std::move(edge));
  }
  write_text(out_path(cfg, "association_graph.json"), g.dump(2) + "\n");

  std::printf("layer %s: %zu shared filters, %zu edges (k=%d, r=%d)\n", layer.c_str(),
              graph.filters.size(), graph.edges.size(), graph.k, graph.min_classes);
  std::printf("wrote %s\n", out_path(cfg, "associations.csv").string().c_str());
}

int cmd_gradcheck(uint64_t seed) {
  std::vector<GradCheckRow> table = gradcheck_table(seed);
  int failures = 0;
  double worst = 0.0;
  for (const GradCheckRow& r : table) {
    std::printf("%-24s %11.3e  %s\n", r.name.c_str(), r.max_rel_err, r.pass ? "pass" : "FAIL");
    if (!r.pass) ++failures;
    worst = std::max(worst, r.max_rel_err);
  }
  std::printf("%zu ops checked, worst relative error %.3e, %d failure%s\n", table.size(), worst,
              failures, failures == 1 ? "" : "s");
  return failures;
}

}  // namespace wf
