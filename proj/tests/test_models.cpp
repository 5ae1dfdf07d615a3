#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "wf/models.hpp"
#include "wf/ops.hpp"
#include "wf/train.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

using namespace wf;

namespace {

Tensor rand_images(Index b, Index s, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t({b, 1, s, s});
  for (Index i = 0; i < t.numel(); ++i) t[i] = u(rng);
  return t;
}

double sample_std(const Tensor& t) {
  double mean = t.array().mean();
  return std::sqrt((t.array() - mean).square().mean());
}

SynthSpec small_spec() {
  SynthSpec spec;
  spec.per_class_train = 96;
  spec.per_class_val = 24;
  spec.per_class_test = 24;
  return spec;
}

}  // namespace

TEST_CASE("make_network dispatches and validates the architecture id") {
  auto cnn = make_network("small_cnn", 5, 16, 1);
  CHECK(cnn->architecture() == "small_cnn");
  CHECK(cnn->n_classes() == 5);
  CHECK(cnn->image_size() == 16);
  auto vit = make_network("tiny_vit", 3, 16, 1);
  CHECK(vit->architecture() == "tiny_vit");
  CHECK_THROWS_AS(make_network("resnet50", 5, 16, 1), std::invalid_argument);
}

TEST_CASE("small_cnn parameter inventory") {
  SmallCnn m(5, 16, 7);
  auto ps = m.parameters();
  REQUIRE(ps.size() == 6);
  CHECK(ps[0]->value.shape() == Shape{8, 1, 3, 3});
  CHECK(ps[1]->value.shape() == Shape{8});
  CHECK(ps[2]->value.shape() == Shape{16, 8, 3, 3});
  CHECK(ps[3]->value.shape() == Shape{16});
  CHECK(ps[4]->value.shape() == Shape{16 * 4 * 4, 5});  // 16 -> pool -> 8 -> pool -> 4
  CHECK(ps[5]->value.shape() == Shape{5});
  // kaiming fan-in: std ~ sqrt(2/fan_in)
  CHECK(sample_std(ps[0]->value) == doctest::Approx(std::sqrt(2.0 / 9.0)).epsilon(0.35));
  CHECK(sample_std(ps[2]->value) == doctest::Approx(std::sqrt(2.0 / 72.0)).epsilon(0.25));
  CHECK(ps[1]->value.array().abs().maxCoeff() == 0.0);  // zero bias init
}

TEST_CASE("tiny_vit parameter inventory") {
  TinyVit m(5, 16, 7);
  auto ps = m.parameters();
  bool saw_qkv = false, saw_head = false;
  for (Parameter* p : ps) {
    if (p->value.ndim() == 2 && p->value.dim(1) == 96 && p->value.dim(0) == 32) saw_qkv = true;
    if (p->value.ndim() == 2 && p->value.dim(1) == 5) saw_head = true;
  }
  CHECK(saw_qkv);
  CHECK(saw_head);
  // trunc-normal-ish init: projection std close to 0.02
  for (Parameter* p : ps)
    if (p->value.ndim() == 2 && p->value.dim(1) == 96)
      CHECK(sample_std(p->value) == doctest::Approx(0.02).epsilon(0.3));
}

TEST_CASE("logits are [B, n_classes] for both architectures") {
  for (const char* arch : {"small_cnn", "tiny_vit"}) {
    auto m = make_network(arch, 4, 16, 3);
    Tensor x = rand_images(3, 16, 5);
    Tape t;
    CHECK(m->forward(t, x).value().shape() == Shape{3, 4});
    Tensor bad = rand_images(3, 12, 5);
    Tape t2;
    CHECK_THROWS_AS(m->forward(t2, bad), std::invalid_argument);
  }
}

TEST_CASE("seeded construction is deterministic") {
  for (const char* arch : {"small_cnn", "tiny_vit"}) {
    auto a = make_network(arch, 5, 16, 11);
    auto b = make_network(arch, 5, 16, 11);
    auto c = make_network(arch, 5, 16, 12);
    auto pa = a->parameters(), pb = b->parameters(), pc = c->parameters();
    bool all_equal = true, any_diff_seed = false;
    for (size_t i = 0; i < pa.size(); ++i) {
      all_equal = all_equal && (pa[i]->value.array() == pb[i]->value.array()).all();
      any_diff_seed = any_diff_seed || !(pa[i]->value.array() == pc[i]->value.array()).all();
    }
    CHECK(all_equal);
    CHECK(any_diff_seed);
  }
}

TEST_CASE("eval_logits matches a taped forward") {
  auto m = make_network("small_cnn", 5, 16, 13);
  Tensor x = rand_images(70, 16, 15);  // forces chunking
  Tensor chunked = eval_logits(*m, x);
  Tape t;
  Tensor full = m->forward(t, x).value();
  CHECK((chunked.array() - full.array()).abs().maxCoeff() < 1e-12);
}

TEST_CASE("train_baseline reaches high accuracy quickly on the synthetic set") {
  DataSplits s = synth_dataset(small_spec());
  auto m = make_network("small_cnn", 5, 16, 21);
  TrainConfig cfg;
  cfg.max_epochs = 20;
  cfg.patience = 20;
  cfg.seed = 4;
  TrainResult r = train_baseline(*m, s.train, s.val, cfg);
  CHECK(r.best_val_accuracy >= 0.95);
  CHECK(r.epochs_run <= 20);
  CHECK(dataset_accuracy(*m, s.test) >= 0.9);
  CHECK(static_cast<int>(r.val_accuracy_history.size()) == r.epochs_run);
}

TEST_CASE("train_baseline is deterministic given the seed") {
  DataSplits s = synth_dataset(small_spec());
  TrainConfig cfg;
  cfg.max_epochs = 2;
  cfg.seed = 9;
  auto a = make_network("small_cnn", 5, 16, 31);
  auto b = make_network("small_cnn", 5, 16, 31);
  train_baseline(*a, s.train, s.val, cfg);
  train_baseline(*b, s.train, s.val, cfg);
  auto pa = a->parameters(), pb = b->parameters();
  for (size_t i = 0; i < pa.size(); ++i)
    CHECK((pa[i]->value.array() == pb[i]->value.array()).all());
}

TEST_CASE("train_baseline refuses a wrapped model") {
  DataSplits s = synth_dataset(small_spec());
  SmallCnn base(5, 16, 1);
  auto w = wf_wrap(base);
  TrainConfig cfg;
  cfg.max_epochs = 1;
  CHECK_THROWS_AS(train_baseline(*w, s.train, s.val, cfg), std::invalid_argument);
}

TEST_CASE("retrain_without_class never sees the excluded class") {
  DataSplits s = synth_dataset(small_spec());
  const int excluded = 2;
  TrainConfig cfg;
  cfg.max_epochs = 12;
  cfg.patience = 12;
  cfg.seed = 5;
  auto ref = make_network("small_cnn", 5, 16, 41);
  auto oracle = retrain_without_class(*ref, s.train, s.val, excluded, cfg, /*init_seed=*/43);
  // head keeps all logits
  Tensor x = rand_images(2, 16, 45);
  Tape t;
  CHECK(oracle->forward(t, x).value().shape() == Shape{2, 5});
  // excluded-class test images: mean softmax probability of the class < 0.3
  Dataset forget = subset_of_class(s.test, excluded);
  Tensor logits = eval_logits(*oracle, forget.images);
  double mean_p = 0.0;
  for (Index i = 0; i < logits.dim(0); ++i) {
    double mx = -1e300, z = 0.0;
    for (Index j = 0; j < 5; ++j) mx = std::max(mx, logits.at({i, j}));
    for (Index j = 0; j < 5; ++j) z += std::exp(logits.at({i, j}) - mx);
    mean_p += std::exp(logits.at({i, excluded}) - mx) / z;
  }
  mean_p /= static_cast<double>(logits.dim(0));
  CHECK(mean_p < 0.3);
  // retain accuracy stays strong
  Dataset retain = subset_excluding_class(s.test, excluded);
  CHECK(dataset_accuracy(*oracle, retain) >= 0.9);
  CHECK_THROWS_AS(retrain_without_class(*ref, s.train, s.val, 7, cfg, 43), std::invalid_argument);
}

TEST_CASE("clone copies parameters and gate state") {
  SmallCnn base(4, 8, 51);
  auto w = wf_wrap(base);
  w->wf_layers()[0].weight_gate.raw.value.at({1, 2}) = -1.25;
  auto c = w->clone();
  CHECK(c->wrapped());
  CHECK(c->wf_layers()[0].weight_gate.raw.value.at({1, 2}) == -1.25);
  // clones are detached: mutating the copy leaves the original alone
  c->wf_layers()[0].weight_gate.raw.value.at({1, 2}) = 2.0;
  CHECK(w->wf_layers()[0].weight_gate.raw.value.at({1, 2}) == -1.25);
  Tensor x = rand_images(2, 8, 53);
  Tape t1, t2;
  CHECK((w->forward(t1, x, 0).value().array() == c->clone()->forward(t2, x, 0).value().array()).all());
}
