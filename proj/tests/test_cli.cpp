#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

CliResult run_cli(const std::string& args) {
  static int counter = 0;
  fs::path errfile = fs::temp_directory_path() / ("wf_cli_err_" + std::to_string(counter++));
  std::string cmd = std::string(WFNET_BIN) + " " + args + " 2>" + errfile.string();
  CliResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[512];
  while (size_t n = fread(buf, 1, sizeof(buf), pipe)) r.out.append(buf, n);
  int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(errfile);
  fs::remove(errfile);
  return r;
}

// Scratch area with a small-but-real run configuration.
struct Workspace {
  fs::path dir;
  fs::path cfg;

  explicit Workspace(const std::string& tag, json extra = json::object()) {
    dir = fs::temp_directory_path() / ("wf_cli_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    json c = {
        {"arch", "small_cnn"},
        {"seed", 5},
        {"out_dir", (dir / "run").string()},
        {"dataset",
         {{"kind", "synth"},
          {"n_classes", 5},
          {"image_size", 16},
          {"per_class_train", 16},
          {"per_class_val", 8},
          {"per_class_test", 8}}},
        {"train", {{"max_epochs", 2}, {"patience", 2}}},
        {"untrain",
         {{"batch_size", 8},
          {"accumulation_steps", 1},
          {"max_epochs", 1},
          {"validations_per_epoch", 1},
          {"max_val_batches", 1}}},
    };
    for (auto& [k, v] : extra.items()) c[k] = v;
    cfg = dir / "cfg.json";
    std::ofstream(cfg) << c.dump(2);
  }
  ~Workspace() { fs::remove_all(dir); }

  fs::path out(const std::string& name) const { return dir / "run" / name; }
  std::string flag() const { return "--config " + cfg.string(); }
};

// One-line "error: ..." contract for every failure path.
void check_error_line(const CliResult& r, const std::string& needle) {
  CHECK(r.code == 1);
  CHECK(r.err.rfind("error: ", 0) == 0);
  CHECK(r.err.find(needle) != std::string::npos);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
}

}  // namespace

TEST_CASE("usage errors exit nonzero") {
  CliResult none = run_cli("");
  CHECK(none.code != 0);
  CHECK(!none.err.empty());
  CliResult unknown = run_cli("frobnicate");
  CHECK(unknown.code != 0);
  CliResult noconf = run_cli("train");
  CHECK(noconf.code != 0);
  CHECK(noconf.err.find("--config") != std::string::npos);
}

TEST_CASE("config failure paths produce one error line each") {
  Workspace ws("cfgerr");
  check_error_line(run_cli("train --config " + (ws.dir / "absent.json").string()), "cannot open");

  std::ofstream(ws.dir / "bad.json") << "{not json";
  check_error_line(run_cli("train --config " + (ws.dir / "bad.json").string()), "not valid JSON");

  std::ofstream(ws.dir / "unknown.json")
      << R"({"dataset":{"kind":"synth"},"typo_key":1})";
  check_error_line(run_cli("train --config " + (ws.dir / "unknown.json").string()),
                   "unknown key 'typo_key'");

  std::ofstream(ws.dir / "nested.json")
      << R"({"dataset":{"kind":"synth"},"untrain":{"lambda9":1}})";
  check_error_line(run_cli("train --config " + (ws.dir / "nested.json").string()),
                   "unknown key 'untrain.lambda9'");

  std::ofstream(ws.dir / "nodata.json") << R"({"arch":"small_cnn"})";
  check_error_line(run_cli("train --config " + (ws.dir / "nodata.json").string()), "'dataset'");

  std::ofstream(ws.dir / "badarch.json")
      << R"({"arch":"resnet50","dataset":{"kind":"synth"}})";
  check_error_line(run_cli("train --config " + (ws.dir / "badarch.json").string()), "resnet50");
}

TEST_CASE("stage ordering is enforced") {
  Workspace ws("order");
  check_error_line(run_cli("untrain " + ws.flag()), "run 'train' first");
  check_error_line(run_cli("eval " + ws.flag()), "run 'untrain' first");
  check_error_line(run_cli("explain " + ws.flag()), "run 'untrain' first");
}

TEST_CASE("train writes checkpoint and report; reruns are byte-identical") {
  Workspace ws("train");
  CliResult r = run_cli("train " + ws.flag());
  CAPTURE(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("trained small_cnn") != std::string::npos);
  REQUIRE(fs::exists(ws.out("baseline.ckpt")));
  REQUIRE(fs::exists(ws.out("train_report.json")));
  json rep = json::parse(slurp(ws.out("train_report.json")));
  CHECK(rep.at("seed") == 5);
  CHECK(rep.at("arch") == "small_cnn");
  CHECK(rep.at("best_val_accuracy").get<double>() > 0.2);  // better than chance
  CHECK(rep.at("epochs_run").get<int>() >= 1);
  CHECK(rep.at("val_accuracy_history").size() == rep.at("epochs_run").get<size_t>());

  std::string first = slurp(ws.out("baseline.ckpt"));
  CliResult r2 = run_cli("train " + ws.flag());
  REQUIRE(r2.code == 0);
  CHECK(slurp(ws.out("baseline.ckpt")) == first);  // same seed, same bytes

  // seed flag beats the file value
  CliResult r3 = run_cli("train " + ws.flag() + " --seed 123");
  REQUIRE(r3.code == 0);
  json rep3 = json::parse(slurp(ws.out("train_report.json")));
  CHECK(rep3.at("seed") == 123);
  CHECK(slurp(ws.out("baseline.ckpt")) != first);

  // out flag redirects the whole run
  fs::path alt = ws.dir / "alt";
  CliResult r4 = run_cli("train " + ws.flag() + " --out " + alt.string());
  REQUIRE(r4.code == 0);
  CHECK(fs::exists(alt / "baseline.ckpt"));
}

TEST_CASE("full pipeline: untrain, eval, explain") {
  Workspace ws("pipe");
  REQUIRE(run_cli("train " + ws.flag()).code == 0);

  CliResult u = run_cli("untrain " + ws.flag());
  CAPTURE(u.err);
  REQUIRE(u.code == 0);
  CHECK(u.out.find("untrained (reciprocal loss)") != std::string::npos);
  REQUIRE(fs::exists(ws.out("unlearned.ckpt")));
  REQUIRE(fs::exists(ws.out("untrain_history.jsonl")));
  std::istringstream hist(slurp(ws.out("untrain_history.jsonl")));
  std::string line;
  int records = 0;
  while (std::getline(hist, line)) {
    json rec = json::parse(line);
    for (const char* k : {"step", "S_r", "S_u", "R", "L", "val_L"}) CHECK(rec.contains(k));
    ++records;
  }
  CHECK(records >= 1);

  CliResult e = run_cli("eval " + ws.flag());
  CAPTURE(e.err);
  REQUIRE(e.code == 0);
  REQUIRE(fs::exists(ws.out("metrics.json")));
  json m = json::parse(slurp(ws.out("metrics.json")));
  REQUIRE(m.at("classes").size() == 5);
  for (const json& row : m.at("classes")) {
    CHECK(row.contains("acc_retain"));
    CHECK(row.contains("acc_forget"));
    CHECK(row.contains("zrf"));
    CHECK(row.contains("insertion_auc"));
    CHECK(row.contains("deletion_auc"));
    // no oracles supplied: the oracle-relative columns must be absent
    CHECK_FALSE(row.contains("activation_distance"));
    CHECK_FALSE(row.contains("js_divergence"));
  }
  for (int c = 0; c < 5; ++c)
    for (const char* kind : {"deletion", "insertion", "other_class"}) {
      fs::path csv = ws.out(std::string("curve_") + kind + "_class" + std::to_string(c) + ".csv");
      REQUIRE(fs::exists(csv));
      CHECK(slurp(csv).rfind("fraction,normalized_confidence\n", 0) == 0);
    }
  // table mirrors to stdout and metrics.txt, with '-' for absent columns
  CHECK(e.out.find("class  acc_r") != std::string::npos);
  CHECK(e.out.find("-") != std::string::npos);
  CHECK(slurp(ws.out("metrics.txt")) .find("mean") != std::string::npos);

  // eval determinism: identical metrics.json on rerun
  std::string metrics1 = slurp(ws.out("metrics.json"));
  REQUIRE(run_cli("eval " + ws.flag()).code == 0);
  CHECK(slurp(ws.out("metrics.json")) == metrics1);

  // single-class eval produces exactly one row
  CliResult e1 = run_cli("eval " + ws.flag() + " --class 3");
  REQUIRE(e1.code == 0);
  json m1 = json::parse(slurp(ws.out("metrics.json")));
  REQUIRE(m1.at("classes").size() == 1);
  CHECK(m1.at("classes")[0].at("class") == 3);

  check_error_line(run_cli("eval " + ws.flag() + " --class frog"), "integer or 'all'");
  check_error_line(run_cli("eval " + ws.flag() + " --class 9"), "out of range");

  CliResult x = run_cli("explain " + ws.flag() + " --top-k 4 --min-classes 2");
  CAPTURE(x.err);
  REQUIRE(x.code == 0);
  REQUIRE(fs::exists(ws.out("associations.csv")));
  CHECK(slurp(ws.out("associations.csv")).rfind("layer,class,filter_index,relevance\n", 0) == 0);
  json g = json::parse(slurp(ws.out("association_graph.json")));
  CHECK(g.at("layer") == "conv1");
  CHECK(g.at("top_k") == 4);
  CHECK(g.at("min_classes") == 2);
  check_error_line(run_cli("explain " + ws.flag() + " --layer fc"), "not a gated layer");
}

TEST_CASE("oracle-backed eval fills the comparison columns") {
  Workspace ws("oracle");
  REQUIRE(run_cli("train " + ws.flag()).code == 0);
  REQUIRE(run_cli("untrain " + ws.flag()).code == 0);
  CliResult ra = run_cli("retrain-all " + ws.flag());
  CAPTURE(ra.err);
  REQUIRE(ra.code == 0);
  for (int c = 0; c < 5; ++c)
    REQUIRE(fs::exists(ws.out("oracle_class" + std::to_string(c) + ".ckpt")));

  CliResult e = run_cli("eval " + ws.flag() + " --oracles " + (ws.dir / "run").string());
  CAPTURE(e.err);
  REQUIRE(e.code == 0);
  json m = json::parse(slurp(ws.out("metrics.json")));
  for (const json& row : m.at("classes")) {
    CHECK(row.at("activation_distance").get<double>() >= 0.0);
    CHECK(row.at("js_divergence").get<double>() >= 0.0);
    CHECK(row.at("js_divergence").get<double>() <= 1.0);
  }
  check_error_line(run_cli("eval " + ws.flag() + " --oracles " + (ws.dir).string()),
                   "missing oracle checkpoint");
}

TEST_CASE("gradcheck subcommand reports per-op rows and passes") {
  CliResult r = run_cli("gradcheck --seed 1");
  CAPTURE(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("ops checked") != std::string::npos);
  CHECK(r.out.find("0 failures") != std::string::npos);
  CHECK(r.out.find("FAIL") == std::string::npos);
  // at least the core op families show up by name
  for (const char* op : {"matmul", "conv2d", "softmax_cross_entropy", "attention"})
    CHECK(r.out.find(op) != std::string::npos);
}
