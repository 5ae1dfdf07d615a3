#include "wf/wf_layer.hpp"

#include <cmath>
#include <stdexcept>

namespace wf {

double sigmoid_scalar(double x) { return 0.5 * (1.0 + std::tanh(0.5 * x)); }

AlphaMatrix make_alpha(const std::string& name, Index n_classes, Index k, double init_logit,
                       double clip_lo, double clip_hi) {
  if (n_classes < 2)
    throw std::invalid_argument("alpha matrix '" + name + "': n_classes must be >= 2, got " +
                                std::to_string(n_classes));
  if (k < 1)
    throw std::invalid_argument("alpha matrix '" + name + "': K must be >= 1, got " + std::to_string(k));
  if (!(clip_lo < clip_hi))
    throw std::invalid_argument("alpha matrix '" + name + "': clip_lo must be < clip_hi");
  if (init_logit < clip_lo || init_logit > clip_hi)
    throw std::invalid_argument("alpha matrix '" + name + "': init logit " + std::to_string(init_logit) +
                                " outside clip range");
  AlphaMatrix a;
  a.raw = Parameter(name, Tensor::full({n_classes, k}, init_logit), true);
  a.clip_lo = clip_lo;
  a.clip_hi = clip_hi;
  a.init_logit = init_logit;
  return a;
}

Tensor effective_mask(const AlphaMatrix& a, Index row) {
  if (row < 0 || row >= a.n_classes())
    throw std::invalid_argument("effective_mask: row " + std::to_string(row) + " out of range [0," +
                                std::to_string(a.n_classes()) + ")");
  Index k = a.k();
  Tensor m({k});
  m.array() = 0.5 * (1.0 + (0.5 * a.raw.value.array().segment(row * k, k)).tanh());
  return m;
}

void clip_alpha(AlphaMatrix& a) {
  a.raw.value.array() = a.raw.value.array().max(a.clip_lo).min(a.clip_hi);
}

Var gate_weights(Tape& t, WFLayer& layer, Var w, Index row) {
  Var mask = sigmoid(select_row(t.leaf(layer.weight_gate.raw), row));
  switch (layer.granularity) {
    case GateGranularity::ConvOutChannel:
      return scale_axis0(w, mask);
    case GateGranularity::ProjectionOutFeature:
      return scale_last(w, mask);
  }
  throw std::logic_error("gate_weights: unhandled granularity");
}

Var gate_bias(Tape& t, WFLayer& layer, Var b, Index row) {
  Var mask = sigmoid(select_row(t.leaf(layer.bias_gate.raw), row));
  return mul(b, mask);
}

}  // namespace wf
