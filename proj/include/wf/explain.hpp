#pragma once

#include "wf/models.hpp"

#include <string>
#include <vector>

namespace wf {

// Inverted gate scores for one wrapped layer: 1 - sigma(raw weight-gate
// logits), shape [N_c, K]. Higher = the filter matters more to that class
// (suppressing it was worth more). Bias gates carry no filter identity and
// are excluded.
struct FilterRelevance {
  std::string layer_id;
  Tensor relevance;
};

FilterRelevance filter_relevance(const Network& model, const std::string& layer_id);

struct TopFilter {
  Index filter = 0;
  double weight = 0.0;
};

// Per-class top-k relevance lists, each sorted by descending weight with
// ties broken by ascending filter index.
struct TopFilters {
  std::string layer_id;
  int k = 0;
  std::vector<std::vector<TopFilter>> per_class;
};

TopFilters top_filters(const FilterRelevance& rel, int k);

struct AssociationEdge {
  int cls = 0;
  Index filter = 0;
  double relevance = 0.0;
};

// Bipartite class <-> filter graph: filters appearing in fewer than
// min_classes of the top-k lists are dropped, surviving edges keep their
// relevance weights.
struct AssociationGraph {
  std::string layer_id;
  int k = 0;
  int min_classes = 0;
  std::vector<Index> filters;          // surviving filter nodes, ascending
  std::vector<AssociationEdge> edges;  // class-major, then by top-k rank
};

AssociationGraph shared_filter_graph(const TopFilters& topk, int min_classes);

// Edge list with the mandatory header "layer,class,filter_index,relevance".
std::string association_csv(const AssociationGraph& g);
void write_association_csv(const AssociationGraph& g, const std::string& path);

}  // namespace wf
