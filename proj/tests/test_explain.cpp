#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "wf/explain.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

using namespace wf;

namespace {

std::unique_ptr<Network> scattered_model(uint64_t gate_seed) {
  SmallCnn base(5, 16, 3);
  auto m = wf_wrap(base);
  std::mt19937_64 rng(gate_seed);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (auto& l : m->wf_layers()) {
    for (Index i = 0; i < l.weight_gate.raw.value.numel(); ++i)
      l.weight_gate.raw.value[i] = u(rng);
    for (Index i = 0; i < l.bias_gate.raw.value.numel(); ++i) l.bias_gate.raw.value[i] = u(rng);
  }
  return m;
}

}  // namespace

TEST_CASE("filter_relevance inverts the weight-gate sigmoid per element") {
  auto m = scattered_model(7);
  FilterRelevance rel = filter_relevance(*m, "conv2");
  const auto& gate = m->wf_layers()[1].weight_gate.raw.value;
  REQUIRE(rel.relevance.shape() == gate.shape());
  CHECK(rel.layer_id == "conv2");
  for (Index i = 0; i < gate.numel(); ++i)
    CHECK(rel.relevance[i] == doctest::Approx(1.0 - 1.0 / (1.0 + std::exp(-gate[i]))).epsilon(1e-14));
  // relevance + sigma(raw) == 1 identically
  for (Index i = 0; i < gate.numel(); ++i)
    CHECK(rel.relevance[i] + sigmoid_scalar(gate[i]) == doctest::Approx(1.0).epsilon(1e-15));
  // pinned anchors either side of neutral
  m->wf_layers()[0].weight_gate.raw.value.at({0, 0}) = 3.0;
  m->wf_layers()[0].weight_gate.raw.value.at({0, 1}) = -3.0;
  FilterRelevance r0 = filter_relevance(*m, "conv1");
  CHECK(r0.relevance.at({0, 0}) == doctest::Approx(0.04742587317756678).epsilon(1e-12));
  CHECK(r0.relevance.at({0, 1}) == doctest::Approx(0.95257412682243322).epsilon(1e-12));

  CHECK_THROWS_WITH_AS(filter_relevance(*m, "fc"), doctest::Contains("not a gated layer"),
                       std::invalid_argument);
  SmallCnn plain(5, 16, 3);
  CHECK_THROWS_WITH_AS(filter_relevance(plain, "conv1"), doctest::Contains("no gates"),
                       std::invalid_argument);
}

TEST_CASE("top_filters equals a full sort oracle") {
  auto m = scattered_model(11);
  FilterRelevance rel = filter_relevance(*m, "conv2");
  const Index k_filters = rel.relevance.dim(1);
  TopFilters top = top_filters(rel, 5);
  CHECK(top.k == 5);
  CHECK(top.layer_id == "conv2");
  REQUIRE(top.per_class.size() == 5);
  for (Index c = 0; c < 5; ++c) {
    // oracle: index sort by (-weight, index)
    std::vector<Index> idx(static_cast<size_t>(k_filters));
    for (Index f = 0; f < k_filters; ++f) idx[static_cast<size_t>(f)] = f;
    std::sort(idx.begin(), idx.end(), [&](Index a, Index b) {
      double wa = rel.relevance.at({c, a}), wb = rel.relevance.at({c, b});
      if (wa != wb) return wa > wb;
      return a < b;
    });
    const auto& row = top.per_class[static_cast<size_t>(c)];
    REQUIRE(row.size() == 5);
    for (size_t j = 0; j < row.size(); ++j) {
      CHECK(row[j].filter == idx[j]);
      CHECK(row[j].weight == rel.relevance.at({c, idx[j]}));
    }
    // descending weights within the list
    for (size_t j = 1; j < row.size(); ++j) CHECK(row[j - 1].weight >= row[j].weight);
  }
  CHECK_THROWS_AS(top_filters(rel, 0), std::invalid_argument);
  CHECK_THROWS_AS(top_filters(rel, static_cast<int>(k_filters) + 1), std::invalid_argument);
  CHECK_NOTHROW(top_filters(rel, static_cast<int>(k_filters)));
}

TEST_CASE("top_filters breaks exact ties by ascending filter index") {
  FilterRelevance rel;
  rel.layer_id = "conv1";
  rel.relevance = Tensor({2, 6});
  // class 0: three-way tie at 0.8 among filters 5, 2, 0
  double row0[6] = {0.8, 0.1, 0.8, 0.2, 0.3, 0.8};
  double row1[6] = {0.0, 0.5, 0.5, 0.5, 0.5, 1.0};
  for (Index f = 0; f < 6; ++f) {
    rel.relevance.at({0, f}) = row0[f];
    rel.relevance.at({1, f}) = row1[f];
  }
  TopFilters top = top_filters(rel, 4);
  const auto& r0 = top.per_class[0];
  CHECK(r0[0].filter == 0);
  CHECK(r0[1].filter == 2);
  CHECK(r0[2].filter == 5);
  CHECK(r0[3].filter == 4);  // 0.3 is the next-best weight
  const auto& r1 = top.per_class[1];
  CHECK(r1[0].filter == 5);
  CHECK(r1[1].filter == 1);
  CHECK(r1[2].filter == 2);
  CHECK(r1[3].filter == 3);
}

TEST_CASE("shared_filter_graph keeps only filters common to enough classes") {
  FilterRelevance rel;
  rel.layer_id = "conv1";
  rel.relevance = Tensor({3, 4});
  // top-2 lists: class 0 -> {f0, f1}, class 1 -> {f0, f2}, class 2 -> {f0, f3}
  double vals[3][4] = {{0.9, 0.8, 0.0, 0.1}, {0.9, 0.0, 0.8, 0.1}, {0.9, 0.1, 0.0, 0.8}};
  for (Index c = 0; c < 3; ++c)
    for (Index f = 0; f < 4; ++f) rel.relevance.at({c, f}) = vals[c][f];
  TopFilters top = top_filters(rel, 2);

  AssociationGraph g2 = shared_filter_graph(top, 2);
  CHECK(g2.filters == std::vector<Index>{0});  // only f0 appears twice or more
  REQUIRE(g2.edges.size() == 3);
  for (int c = 0; c < 3; ++c) {
    CHECK(g2.edges[static_cast<size_t>(c)].cls == c);
    CHECK(g2.edges[static_cast<size_t>(c)].filter == 0);
    CHECK(g2.edges[static_cast<size_t>(c)].relevance == 0.9);
  }

  AssociationGraph g1 = shared_filter_graph(top, 1);  // keeps everything
  CHECK(g1.filters == std::vector<Index>{0, 1, 2, 3});
  CHECK(g1.edges.size() == 6);
  // class-major, then by top-k rank within the class
  CHECK(g1.edges[0].cls == 0);
  CHECK(g1.edges[0].filter == 0);
  CHECK(g1.edges[1].cls == 0);
  CHECK(g1.edges[1].filter == 1);

  AssociationGraph g3 = shared_filter_graph(top, 3);
  CHECK(g3.filters == std::vector<Index>{0});
  AssociationGraph g4 = shared_filter_graph(top, 4);  // more than n_classes: nothing survives
  CHECK(g4.filters.empty());
  CHECK(g4.edges.empty());
  CHECK_THROWS_AS(shared_filter_graph(top, 0), std::invalid_argument);
}

TEST_CASE("graph ignores gate state of layers other than the queried one") {
  auto a = scattered_model(13);
  auto b = scattered_model(13);
  // mangle conv1 grossly in b; conv2 relevance must be unaffected
  b->wf_layers()[0].weight_gate.raw.value.array().setConstant(-3.0);
  FilterRelevance ra = filter_relevance(*a, "conv2");
  FilterRelevance rb = filter_relevance(*b, "conv2");
  CHECK((ra.relevance.array() == rb.relevance.array()).all());
}

TEST_CASE("association csv format and round trip") {
  auto m = scattered_model(17);
  FilterRelevance rel = filter_relevance(*m, "conv1");
  AssociationGraph g = shared_filter_graph(top_filters(rel, 3), 2);
  std::string csv = association_csv(g);
  REQUIRE(csv.rfind("layer,class,filter_index,relevance\n", 0) == 0);
  // one line per edge plus the header
  size_t lines = static_cast<size_t>(std::count(csv.begin(), csv.end(), '\n'));
  CHECK(lines == g.edges.size() + 1);
  // deterministic: same gates, same csv
  auto m2 = scattered_model(17);
  AssociationGraph g2 = shared_filter_graph(top_filters(filter_relevance(*m2, "conv1"), 3), 2);
  CHECK(association_csv(g2) == csv);
  // every line carries the layer id and parses back to the edge values
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  size_t e = 0;
  while (std::getline(in, line)) {
    REQUIRE(line.rfind("conv1,", 0) == 0);
    int cls;
    long long filter;
    double w;
    REQUIRE(std::sscanf(line.c_str() + 6, "%d,%lld,%lf", &cls, &filter, &w) == 3);
    CHECK(cls == g.edges[e].cls);
    CHECK(filter == g.edges[e].filter);
    CHECK(w == g.edges[e].relevance);  // %.17g survives the round trip
    ++e;
  }
  CHECK(e == g.edges.size());

  auto tmp = std::filesystem::temp_directory_path() / "wf_assoc_test.csv";
  write_association_csv(g, tmp.string());
  std::ifstream f(tmp, std::ios::binary);
  std::string disk((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  CHECK(disk == csv);
  std::filesystem::remove(tmp);
  CHECK_THROWS_AS(write_association_csv(g, "/nonexistent-dir/x.csv"), std::runtime_error);
}

TEST_CASE("forced two-class shared filter shows up as a shared node") {
  auto m = scattered_model(23);
  // make filter 4 maximally relevant for classes 1 and 3 only
  auto& gate = m->wf_layers()[0].weight_gate.raw.value;
  gate.array().setConstant(3.0);  // everything irrelevant (relevance ~0.047)
  gate.at({1, 4}) = -3.0;
  gate.at({3, 4}) = -3.0;
  // unshared peaks for the other classes so no tie-break filter recurs
  gate.at({0, 0}) = -1.0;
  gate.at({2, 1}) = -1.0;
  gate.at({4, 2}) = -1.0;
  FilterRelevance rel = filter_relevance(*m, "conv1");
  AssociationGraph g = shared_filter_graph(top_filters(rel, 1), 2);
  REQUIRE(g.filters == std::vector<Index>{4});
  REQUIRE(g.edges.size() == 2);
  CHECK(g.edges[0].cls == 1);
  CHECK(g.edges[1].cls == 3);
  CHECK(g.edges[0].relevance == doctest::Approx(0.95257412682243322).epsilon(1e-12));
}
