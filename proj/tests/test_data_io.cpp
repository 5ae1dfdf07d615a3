#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "wf/data.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <vector>

using namespace wf;
namespace fs = std::filesystem;

namespace {

void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

std::vector<uint8_t> idx_images(uint32_t n, uint32_t rows, uint32_t cols,
                                const std::vector<uint8_t>& pixels, uint32_t magic = 2051) {
  std::vector<uint8_t> out;
  put_u32be(out, magic);
  put_u32be(out, n);
  put_u32be(out, rows);
  put_u32be(out, cols);
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

std::vector<uint8_t> idx_labels(uint32_t n, const std::vector<uint8_t>& labels,
                                uint32_t magic = 2049) {
  std::vector<uint8_t> out;
  put_u32be(out, magic);
  put_u32be(out, n);
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

fs::path write_tmp(const std::string& name, const std::vector<uint8_t>& bytes) {
  fs::path p = fs::temp_directory_path() / name;
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  return p;
}

}  // namespace

TEST_CASE("load_idx parses a well-formed pair and scales pixels") {
  std::vector<uint8_t> px = {0, 255, 128, 64,   255, 0, 0, 1,   9, 9, 9, 9};
  fs::path ip = write_tmp("t_imgs.idx", idx_images(3, 2, 2, px));
  fs::path lp = write_tmp("t_lbls.idx", idx_labels(3, {2, 0, 1}));
  Dataset ds = load_idx(ip, lp);
  CHECK(ds.size() == 3);
  CHECK(ds.image_size() == 2);
  CHECK(ds.images.shape() == Shape{3, 1, 2, 2});
  CHECK(ds.labels == std::vector<int>{2, 0, 1});
  CHECK(ds.n_classes == 3);  // max label + 1
  CHECK(ds.images[0] == 0.0);
  CHECK(ds.images[1] == 1.0);
  CHECK(ds.images[2] == doctest::Approx(128.0 / 255.0));
  CHECK(ds.images[4] == 1.0);  // second image, first pixel
}

TEST_CASE("load_idx error paths") {
  std::vector<uint8_t> px(12, 7);
  fs::path good_i = write_tmp("t_gi.idx", idx_images(3, 2, 2, px));
  fs::path good_l = write_tmp("t_gl.idx", idx_labels(3, {0, 1, 2}));

  // labels file offered as images: magic 2049 where 2051 expected
  CHECK_THROWS_WITH_AS(load_idx(good_l, good_l), doctest::Contains("bad image magic"),
                       std::runtime_error);
  // images file offered as labels
  CHECK_THROWS_WITH_AS(load_idx(good_i, good_i), doctest::Contains("bad label magic"),
                       std::runtime_error);
  // count mismatch between the two files
  fs::path l2 = write_tmp("t_l2.idx", idx_labels(2, {0, 1}));
  CHECK_THROWS_WITH_AS(load_idx(good_i, l2), doctest::Contains("!="), std::runtime_error);
  // truncated image payload
  std::vector<uint8_t> short_px(11, 7);
  fs::path ti = write_tmp("t_ti.idx", idx_images(3, 2, 2, short_px));
  CHECK_THROWS_WITH_AS(load_idx(ti, good_l), doctest::Contains("truncated"), std::runtime_error);
  // truncated label payload
  fs::path tl = write_tmp("t_tl.idx", idx_labels(3, {0, 1}));
  CHECK_THROWS_WITH_AS(load_idx(good_i, tl), doctest::Contains("truncated"), std::runtime_error);
  // non-square images
  std::vector<uint8_t> px23(3 * 2 * 3, 7);
  fs::path ns = write_tmp("t_ns.idx", idx_images(3, 2, 3, px23));
  CHECK_THROWS_WITH_AS(load_idx(ns, good_l), doctest::Contains("square"), std::runtime_error);
  // missing file
  CHECK_THROWS_WITH_AS(load_idx(fs::temp_directory_path() / "nope.idx", good_l),
                       doctest::Contains("cannot open"), std::runtime_error);
}

TEST_CASE("synth_dataset split sizes and label layout") {
  SynthSpec spec;
  spec.per_class_train = 100;
  spec.per_class_val = 20;
  spec.per_class_test = 20;
  DataSplits s = synth_dataset(spec);
  CHECK(s.train.size() == 500);
  CHECK(s.val.size() == 100);
  CHECK(s.test.size() == 100);
  CHECK(s.train.split == "train");
  CHECK(s.val.split == "val");
  CHECK(s.test.split == "test");
  for (const Dataset* d : {&s.train, &s.val, &s.test}) {
    CHECK(d->n_classes == 5);
    std::vector<int> counts(5, 0);
    for (int y : d->labels) counts[static_cast<size_t>(y)]++;
    for (int c = 0; c < 5; ++c) CHECK(counts[static_cast<size_t>(c)] == d->size() / 5);
    CHECK(d->images.array().minCoeff() >= 0.0);
    CHECK(d->images.array().maxCoeff() <= 1.0);
  }
}

TEST_CASE("synth_dataset is deterministic in the seed and varies with it") {
  SynthSpec spec;
  spec.per_class_train = 8;
  spec.per_class_val = 2;
  spec.per_class_test = 2;
  DataSplits a = synth_dataset(spec);
  DataSplits b = synth_dataset(spec);
  CHECK((a.train.images.array() == b.train.images.array()).all());
  CHECK((a.test.images.array() == b.test.images.array()).all());
  spec.seed = 8;
  DataSplits c = synth_dataset(spec);
  CHECK_FALSE((a.train.images.array() == c.train.images.array()).all());
  // splits are disjoint draws: train block of class 0 differs from val block
  CHECK_FALSE((a.train.images.array().head(256) == a.val.images.array().head(256)).all());
}

TEST_CASE("synth_dataset validates its spec") {
  SynthSpec spec;
  spec.per_class_train = 0;
  CHECK_THROWS_AS(synth_dataset(spec), std::invalid_argument);
  spec.per_class_train = 4;
  spec.noise_sigma = -0.1;
  CHECK_THROWS_AS(synth_dataset(spec), std::invalid_argument);
  spec.noise_sigma = 0.1;
  spec.n_classes = 1;
  CHECK_THROWS_AS(synth_dataset(spec), std::invalid_argument);
}

TEST_CASE("nearest class pattern classifies the noisy test set almost perfectly") {
  SynthSpec spec;
  spec.per_class_train = 4;
  spec.per_class_val = 2;
  spec.per_class_test = 40;
  DataSplits s = synth_dataset(spec);
  std::vector<Tensor> patterns;
  for (int c = 0; c < spec.n_classes; ++c) patterns.push_back(class_pattern(spec, c));
  const Index px = spec.image_size * spec.image_size;
  int hits = 0;
  for (Index i = 0; i < s.test.size(); ++i) {
    Eigen::Map<const Eigen::ArrayXd> img(s.test.images.data() + i * px, px);
    int best = -1;
    double best_d = 1e300;
    for (int c = 0; c < spec.n_classes; ++c) {
      double d = (img - patterns[static_cast<size_t>(c)].array()).matrix().squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    hits += (best == s.test.labels[static_cast<size_t>(i)]);
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(s.test.size()) >= 0.99);
}

TEST_CASE("class_pattern is noiseless, bounded, and class-distinct") {
  SynthSpec spec;
  for (int c = 0; c < spec.n_classes; ++c) {
    Tensor p1 = class_pattern(spec, c);
    Tensor p2 = class_pattern(spec, c);
    CHECK(p1.shape() == Shape{1, 1, spec.image_size, spec.image_size});
    CHECK((p1.array() == p2.array()).all());
    CHECK(p1.array().minCoeff() >= 0.0);
    CHECK(p1.array().maxCoeff() <= 1.0);
    CHECK(p1.array().maxCoeff() > 0.5);  // the bar is visible
  }
  for (int a = 0; a < spec.n_classes; ++a)
    for (int b = a + 1; b < spec.n_classes; ++b) {
      double d = (class_pattern(spec, a).array() - class_pattern(spec, b).array())
                     .matrix()
                     .norm();
      CHECK(d > 1.0);  // far apart in pixel space
    }
  CHECK_THROWS_AS(class_pattern(spec, 5), std::invalid_argument);
  CHECK_THROWS_AS(class_pattern(spec, -1), std::invalid_argument);
}

TEST_CASE("batches drop the short tail and cover a permutation") {
  Dataset ds;
  ds.n_classes = 5;
  const Index n = 500;
  ds.images = Tensor({n, 1, 2, 2});
  ds.labels.resize(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) {
    ds.images[i * 4] = static_cast<double>(i);  // tag each sample in pixel 0
    ds.labels[static_cast<size_t>(i)] = static_cast<int>(i % 5);
  }
  auto bs = batches(ds, 128, /*seed=*/3);
  CHECK(bs.size() == 3);  // 500/128 -> 3 full batches, 116 dropped
  std::set<double> seen;
  for (const auto& b : bs) {
    CHECK(b.images.dim(0) == 128);
    CHECK(b.labels.size() == 128);
    for (Index i = 0; i < 128; ++i) {
      double tag = b.images[i * 4];
      CHECK(seen.insert(tag).second);  // no duplicates across batches
      CHECK(b.labels[static_cast<size_t>(i)] == static_cast<int>(tag) % 5);
    }
  }
  CHECK(seen.size() == 384);

  auto again = batches(ds, 128, /*seed=*/3);
  CHECK((again[0].images.array() == bs[0].images.array()).all());
  auto other = batches(ds, 128, /*seed=*/4);
  CHECK_FALSE((other[0].images.array() == bs[0].images.array()).all());

  CHECK_THROWS_AS(batches(ds, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(batches(ds, 501, 1), std::invalid_argument);
}

TEST_CASE("subset filters keep images aligned with labels") {
  SynthSpec spec;
  spec.per_class_train = 6;
  spec.per_class_val = 2;
  spec.per_class_test = 2;
  DataSplits s = synth_dataset(spec);
  Dataset only2 = subset_of_class(s.train, 2);
  CHECK(only2.size() == 6);
  for (int y : only2.labels) CHECK(y == 2);
  Dataset no2 = subset_excluding_class(s.train, 2);
  CHECK(no2.size() == 24);
  for (int y : no2.labels) CHECK(y != 2);
  CHECK(no2.n_classes == 5);  // label space unchanged
  // pixel rows must follow their labels: compare against a fresh render
  const Index px = spec.image_size * spec.image_size;
  Eigen::Map<const Eigen::ArrayXd> a(s.train.images.data() + 2 * 6 * px, px);
  Eigen::Map<const Eigen::ArrayXd> b(only2.images.data(), px);
  CHECK((a == b).all());
}
