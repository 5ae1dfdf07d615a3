#pragma once

#include "wf/tape.hpp"

#include <functional>
#include <string>
#include <vector>

namespace wf {

// Rebuilds the scalar loss on a fresh tape from the parameters' current
// values. Must be deterministic in those values.
using LossBuilder = std::function<Var(Tape&)>;

// Worst relative error |analytic - numeric| / max(1e-6, |analytic|, |numeric|)
// between the tape gradient and central finite differences, over up to
// max_coords_per_param sampled coordinates of each parameter (all coordinates
// when a parameter is small enough). eps must lie in [1e-7, 1e-3].
double grad_check(const LossBuilder& build, const std::vector<Parameter*>& params,
                  double eps = 1e-5, int max_coords_per_param = 25, uint64_t seed = 0);

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

// Finite-difference battery: every differentiable op kind on at least three
// randomized shapes, gate paths through raw logits, and both full
// architectures under a cross-entropy head.
std::vector<GradCheckRow> gradcheck_table(uint64_t seed = 0, double tolerance = 1e-4);

}  // namespace wf
