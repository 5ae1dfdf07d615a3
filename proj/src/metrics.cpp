#include "wf/metrics.hpp"

#include "wf/train.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace wf {
namespace {

constexpr double kNormTol = 1e-9;
constexpr double kConfClampHi = 10.0;

bool masking_active(const Network& m) {
  for (const WFLayer& l : m.wf_layers())
    if (l.masking_enabled) return true;
  return false;
}

// 2^-based KL(p || m); contributions with p_i == 0 are 0 by convention.
double kl_bits(const Eigen::VectorXd& p, const Eigen::VectorXd& m) {
  double s = 0.0;
  for (Index i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * std::log2(p[i] / m[i]);
  return s;
}

Tensor images_of_class(const Dataset& ds, int cls) {
  Dataset sub = subset_of_class(ds, cls);
  if (sub.size() == 0)
    throw std::invalid_argument("curve: no samples of class " + std::to_string(cls) + " in the dataset");
  return sub.images;
}

// Mean confidence assigned to `cls` over `images` by the bypassed baseline.
double baseline_mean_conf(Network& baseline, const Tensor& images, int cls) {
  bool was_active = masking_active(baseline);
  if (was_active) baseline.set_masking_enabled(false);
  Tensor probs = eval_probs(baseline, images);
  if (was_active) baseline.set_masking_enabled(true);
  const Index n = probs.dim(0);
  double s = 0.0;
  for (Index i = 0; i < n; ++i) s += probs.at({i, static_cast<Index>(cls)});
  return s / static_cast<double>(n);
}

double model_mean_conf(Network& m, const Tensor& images, int cls, int selector) {
  Tensor probs = eval_probs(m, images, selector);
  const Index n = probs.dim(0);
  double s = 0.0;
  for (Index i = 0; i < n; ++i) s += probs.at({i, static_cast<Index>(cls)});
  return s / static_cast<double>(n);
}

long curve_iterations(double step_fraction) {
  if (!(step_fraction > 0.0) || step_fraction > 1.0)
    throw std::invalid_argument("curve: step fraction must be in (0,1], got " +
                                std::to_string(step_fraction));
  return std::lround(1.0 / step_fraction);
}

void check_curve_inputs(const Network& wf_model, int cls) {
  if (!wf_model.wrapped()) throw std::invalid_argument("curve: model has no gates");
  if (cls < 0 || cls >= wf_model.n_classes())
    throw std::invalid_argument("curve: class " + std::to_string(cls) + " out of range [0," +
                                std::to_string(wf_model.n_classes()) + ")");
}

// Set the first `count` ranked row-`cls` elements of `m` to `edge`
// (interpreted per-gate: +1 -> clip_hi, -1 -> clip_lo).
void force_ranked(Network& m, const std::vector<GateRef>& ranking, int cls, size_t count, int edge) {
  std::vector<WFLayer>& layers = m.wf_layers();
  for (size_t i = 0; i < count; ++i) {
    const GateRef& r = ranking[i];
    WFLayer& l = layers[static_cast<size_t>(r.layer)];
    AlphaMatrix& a = r.gate_bank == 0 ? l.weight_gate : l.bias_gate;
    a.raw.value.at({static_cast<Index>(cls), r.element}) = edge > 0 ? a.clip_hi : a.clip_lo;
  }
}

double trapezoid_auc(const std::vector<CurvePoint>& pts) {
  double auc = 0.0;
  for (size_t i = 1; i < pts.size(); ++i)
    auc += (pts[i].fraction - pts[i - 1].fraction) * 0.5 * (pts[i].value + pts[i - 1].value);
  return auc;
}

}  // namespace

ProbVector::ProbVector(Eigen::VectorXd p) : p_(std::move(p)) {
  if (p_.size() < 1) throw std::invalid_argument("ProbVector: empty vector");
  double sum = 0.0;
  for (Index i = 0; i < p_.size(); ++i) {
    if (!std::isfinite(p_[i]) || p_[i] < 0.0)
      throw std::invalid_argument("ProbVector: entry " + std::to_string(i) +
                                  " is negative or non-finite");
    sum += p_[i];
  }
  if (std::abs(sum - 1.0) > kNormTol)
    throw std::invalid_argument("ProbVector: entries sum to " + std::to_string(sum) +
                                ", expected 1 within 1e-9");
}

double js_divergence(const ProbVector& a, const ProbVector& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("js_divergence: sizes " + std::to_string(a.size()) + " and " +
                                std::to_string(b.size()) + " differ");
  Eigen::VectorXd m = 0.5 * (a.p() + b.p());
  return 0.5 * kl_bits(a.p(), m) + 0.5 * kl_bits(b.p(), m);
}

double accuracy(Network& m, const Dataset& ds, int selector_row) {
  if (ds.size() == 0) throw std::invalid_argument("accuracy: empty sample set");
  if (masking_active(m) && selector_row == Network::kNoSelector)
    throw std::invalid_argument("accuracy: selector row required for a gated model");
  return dataset_accuracy(m, ds, selector_row);
}

double activation_distance(Network& a, Network& b, const Tensor& images, int selector_a,
                           int selector_b) {
  if (images.ndim() != 4 || images.dim(0) < 1)
    throw std::invalid_argument("activation_distance: empty sample set");
  Tensor pa = eval_probs(a, images, selector_a);
  Tensor pb = eval_probs(b, images, selector_b);
  const Index n = pa.dim(0), c = pa.dim(1);
  if (pb.dim(1) != c)
    throw std::invalid_argument("activation_distance: class counts " + std::to_string(c) + " and " +
                                std::to_string(pb.dim(1)) + " differ");
  double s = 0.0;
  for (Index i = 0; i < n; ++i)
    s += std::sqrt((pa.array().segment(i * c, c) - pb.array().segment(i * c, c)).square().sum());
  return s / static_cast<double>(n);
}

double mean_js(Network& a, Network& b, const Tensor& images, int selector_a, int selector_b) {
  if (images.ndim() != 4 || images.dim(0) < 1)
    throw std::invalid_argument("mean_js: empty sample set");
  Tensor pa = eval_probs(a, images, selector_a);
  Tensor pb = eval_probs(b, images, selector_b);
  const Index n = pa.dim(0), c = pa.dim(1);
  double s = 0.0;
  for (Index i = 0; i < n; ++i) {
    Eigen::VectorXd va = pa.array().segment(i * c, c).matrix();
    Eigen::VectorXd vb = pb.array().segment(i * c, c).matrix();
    s += js_divergence(ProbVector(std::move(va)), ProbVector(std::move(vb)));
  }
  return s / static_cast<double>(n);
}

double zrf(Network& m, Network& random_twin, const Tensor& forget_images, int selector_m,
           int selector_twin) {
  if (forget_images.ndim() != 4 || forget_images.dim(0) < 1)
    throw std::invalid_argument("zrf: empty forget set");
  return 1.0 - mean_js(m, random_twin, forget_images, selector_m, selector_twin);
}

std::vector<GateRef> ranked_gate_elements(const Network& wf_model, int cls) {
  check_curve_inputs(wf_model, cls);
  std::vector<GateRef> out;
  const std::vector<WFLayer>& layers = wf_model.wf_layers();
  for (size_t li = 0; li < layers.size(); ++li) {
    for (int bank = 0; bank < 2; ++bank) {
      const AlphaMatrix& a = bank == 0 ? layers[li].weight_gate : layers[li].bias_gate;
      for (Index e = 0; e < a.k(); ++e) {
        double raw = a.raw.value.at({static_cast<Index>(cls), e});
        out.push_back({static_cast<int>(li), bank, e, sigmoid_scalar(raw)});
      }
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const GateRef& x, const GateRef& y) {
    if (x.score != y.score) return x.score < y.score;
    if (x.layer != y.layer) return x.layer < y.layer;
    if (x.gate_bank != y.gate_bank) return x.gate_bank < y.gate_bank;
    return x.element < y.element;
  });
  return out;
}

namespace {

// Shared skeleton: prepare the start-state clone, then sweep the ranked
// row-c elements toward `edge`, recording normalized confidences.
Curve sweep_curve(const Network& wf_model, Network& baseline, const Dataset& test, int cls,
                  double step_fraction, CurveKind kind) {
  check_curve_inputs(wf_model, cls);
  if (test.size() == 0) throw std::invalid_argument("curve: empty evaluation dataset");
  const long iters = curve_iterations(step_fraction);
  std::vector<GateRef> ranking = ranked_gate_elements(wf_model, cls);
  const size_t total = ranking.size();

  std::unique_ptr<Network> probe = wf_model.clone();
  probe->set_masking_enabled(true);
  if (kind != CurveKind::Insertion) {
    // Deletion and other-class sweeps start from a non-unlearned state.
    for (WFLayer& l : probe->wf_layers()) {
      l.weight_gate.raw.value.array().setConstant(l.weight_gate.init_logit);
      l.bias_gate.raw.value.array().setConstant(l.bias_gate.init_logit);
    }
  }
  const int edge = kind == CurveKind::Insertion ? +1 : -1;

  // Confidence targets: class c on class-c images, or true-class confidence
  // on non-c images for the flatness sweep.
  struct EvalSet {
    int cls;
    Tensor images;
    double base_conf;
    double weight;  // sample count
  };
  std::vector<EvalSet> sets;
  if (kind == CurveKind::OtherClass) {
    for (int r = 0; r < wf_model.n_classes(); ++r) {
      if (r == cls) continue;
      Dataset sub = subset_of_class(test, r);
      if (sub.size() == 0) continue;
      double base = baseline_mean_conf(baseline, sub.images, r);
      double n = static_cast<double>(sub.size());  // before the move below
      sets.push_back({r, std::move(sub.images), base, n});
    }
    if (sets.empty())
      throw std::invalid_argument("curve: no samples outside class " + std::to_string(cls));
  } else {
    Tensor imgs = images_of_class(test, cls);
    double base = baseline_mean_conf(baseline, imgs, cls);
    double n = static_cast<double>(imgs.dim(0));
    sets.push_back({cls, std::move(imgs), base, n});
  }

  Curve curve;
  curve.kind = kind;
  curve.cls = cls;
  curve.step_fraction = step_fraction;
  size_t applied = 0;
  for (long i = 0; i <= iters; ++i) {
    const double f = static_cast<double>(i) / static_cast<double>(iters);
    const size_t count = static_cast<size_t>(std::llround(f * static_cast<double>(total)));
    if (count > applied) {
      // force_ranked is idempotent per element; only touch the new slice
      std::vector<GateRef> slice(ranking.begin() + static_cast<long>(applied),
                                 ranking.begin() + static_cast<long>(count));
      force_ranked(*probe, slice, cls, slice.size(), edge);
      applied = count;
    }
    double num = 0.0, den = 0.0;
    for (const EvalSet& s : sets) {
      // Deletion/insertion probe class c under row c; the flatness sweep
      // probes non-c images under their own rows, which full row-c deletion
      // must leave intact (forcing row c under selector c would also collapse
      // every shared channel, which is architecture destruction, not
      // class-targeted removal).
      num += s.weight * model_mean_conf(*probe, s.images, s.cls, s.cls);
      den += s.weight * s.base_conf;
    }
    double v = num / den;
    if (v > kConfClampHi) {
      v = kConfClampHi;
      ++curve.clamped_points;
    }
    if (v < 0.0) v = 0.0;
    curve.points.push_back({f, v});
  }
  curve.auc = trapezoid_auc(curve.points);
  return curve;
}

}  // namespace

Curve deletion_curve(const Network& wf_model, Network& baseline, const Dataset& test, int cls,
                     double step_fraction) {
  return sweep_curve(wf_model, baseline, test, cls, step_fraction, CurveKind::Deletion);
}

Curve insertion_curve(const Network& wf_model, Network& baseline, const Dataset& test, int cls,
                      double step_fraction) {
  return sweep_curve(wf_model, baseline, test, cls, step_fraction, CurveKind::Insertion);
}

Curve other_class_curve(const Network& wf_model, Network& baseline, const Dataset& test, int cls,
                        double step_fraction) {
  return sweep_curve(wf_model, baseline, test, cls, step_fraction, CurveKind::OtherClass);
}

void finalize_means(MetricsReport& report) {
  if (report.classes.empty()) {
    report.mean_acc_retain = report.mean_acc_forget = report.mean_zrf = 0.0;
    return;
  }
  double ar = 0.0, af = 0.0, z = 0.0;
  for (const ClassMetricsRow& r : report.classes) {
    ar += r.acc_retain;
    af += r.acc_forget;
    z += r.zrf;
  }
  const double n = static_cast<double>(report.classes.size());
  report.mean_acc_retain = ar / n;
  report.mean_acc_forget = af / n;
  report.mean_zrf = z / n;
}

}  // namespace wf
