#include "wf/explain.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

namespace wf {

FilterRelevance filter_relevance(const Network& model, const std::string& layer_id) {
  for (const WFLayer& l : model.wf_layers()) {
    if (l.id != layer_id) continue;
    FilterRelevance rel;
    rel.layer_id = layer_id;
    rel.relevance = Tensor(l.weight_gate.raw.value.shape());
    rel.relevance.array() = 1.0 - l.weight_gate.raw.value.array().unaryExpr(
                                      [](double x) { return sigmoid_scalar(x); });
    return rel;
  }
  std::string known;
  for (const WFLayer& l : model.wf_layers()) {
    if (!known.empty()) known += ", ";
    known += l.id;
  }
  throw std::invalid_argument("filter_relevance: '" + layer_id + "' is not a gated layer" +
                              (known.empty() ? " (model has no gates)" : "; gated layers: " + known));
}

TopFilters top_filters(const FilterRelevance& rel, int k) {
  const Index n_classes = rel.relevance.dim(0);
  const Index n_filters = rel.relevance.dim(1);
  if (k < 1 || k > n_filters)
    throw std::invalid_argument("top_filters: k " + std::to_string(k) + " outside [1, " +
                                std::to_string(n_filters) + "]");
  TopFilters out;
  out.layer_id = rel.layer_id;
  out.k = k;
  out.per_class.resize(static_cast<size_t>(n_classes));
  for (Index c = 0; c < n_classes; ++c) {
    std::vector<TopFilter> row(static_cast<size_t>(n_filters));
    for (Index f = 0; f < n_filters; ++f) row[static_cast<size_t>(f)] = {f, rel.relevance.at({c, f})};
    std::sort(row.begin(), row.end(), [](const TopFilter& a, const TopFilter& b) {
      if (a.weight != b.weight) return a.weight > b.weight;
      return a.filter < b.filter;
    });
    row.resize(static_cast<size_t>(k));
    out.per_class[static_cast<size_t>(c)] = std::move(row);
  }
  return out;
}

AssociationGraph shared_filter_graph(const TopFilters& topk, int min_classes) {
  if (min_classes < 1)
    throw std::invalid_argument("shared_filter_graph: min_classes must be >= 1, got " +
                                std::to_string(min_classes));
  std::map<Index, int> appearances;
  for (const std::vector<TopFilter>& row : topk.per_class)
    for (const TopFilter& tf : row) ++appearances[tf.filter];

  AssociationGraph g;
  g.layer_id = topk.layer_id;
  g.k = topk.k;
  g.min_classes = min_classes;
  for (const auto& [filter, count] : appearances)
    if (count >= min_classes) g.filters.push_back(filter);
  for (size_t c = 0; c < topk.per_class.size(); ++c)
    for (const TopFilter& tf : topk.per_class[c])
      if (appearances[tf.filter] >= min_classes)
        g.edges.push_back({static_cast<int>(c), tf.filter, tf.weight});
  return g;
}

std::string association_csv(const AssociationGraph& g) {
  std::string out = "layer,class,filter_index,relevance\n";
  char buf[64];
  for (const AssociationEdge& e : g.edges) {
    std::snprintf(buf, sizeof(buf), ",%d,%lld,%.17g\n", e.cls, static_cast<long long>(e.filter),
                  e.relevance);
    out += g.layer_id;
    out += buf;
  }
  return out;
}

void write_association_csv(const AssociationGraph& g, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << association_csv(g);
  if (!f) throw std::runtime_error("write to '" + path + "' failed");
}

}  // namespace wf
