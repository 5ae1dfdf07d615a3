#pragma once

#include "wf/ops.hpp"

#include <string>

namespace wf {

// What one gate element scales: a conv layer's output channel (kernel slab +
// bias entry) or one output feature of a fused projection (column + bias).
enum class GateGranularity { ConvOutChannel, ProjectionOutFeature };

// Per-class gate bank: raw logits [n_classes, K]. Row r squashed through a
// sigmoid multiplies the layer's K output slices when classifying under
// class r. Raw logits are clamped to [clip_lo, clip_hi] after every update,
// so a gate can attenuate to sigma(clip_lo) but never hard-zero a weight.
struct AlphaMatrix {
  Parameter raw;
  double clip_lo = -3.0;
  double clip_hi = 3.0;
  double init_logit = 3.0;

  Index n_classes() const { return raw.value.dim(0); }
  Index k() const { return raw.value.dim(1); }
};

AlphaMatrix make_alpha(const std::string& name, Index n_classes, Index k, double init_logit = 3.0,
                       double clip_lo = -3.0, double clip_hi = 3.0);

// sigma(raw[row]) as a plain tensor [K]; the multiplier actually applied.
Tensor effective_mask(const AlphaMatrix& a, Index row);

// Clamp raw logits into [clip_lo, clip_hi] in place.
void clip_alpha(AlphaMatrix& a);

double sigmoid_scalar(double x);

// Gate bank attached to one wrapped layer.
struct WFLayer {
  std::string id;
  GateGranularity granularity = GateGranularity::ConvOutChannel;
  AlphaMatrix weight_gate;
  AlphaMatrix bias_gate;
  bool masking_enabled = true;
};

// Tape-side gate application while classifying under `row`. Kernel tensors
// are scaled along output channels (conv, [Cout,..]) or output features
// (projection, [Fin,Fout]); biases elementwise.
Var gate_weights(Tape& t, WFLayer& layer, Var w, Index row);
Var gate_bias(Tape& t, WFLayer& layer, Var b, Index row);

}  // namespace wf
