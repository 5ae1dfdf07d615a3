#pragma once

#include "wf/data.hpp"
#include "wf/models.hpp"

#include <optional>
#include <string>
#include <vector>

namespace wf {

// Point on the probability simplex: nonnegative, sums to 1 within 1e-9.
class ProbVector {
 public:
  explicit ProbVector(Eigen::VectorXd p);
  const Eigen::VectorXd& p() const { return p_; }
  Index size() const { return p_.size(); }

 private:
  Eigen::VectorXd p_;
};

// Jensen-Shannon divergence, base-2 logarithm so the range is [0,1];
// 0*log(0) is taken as 0.
double js_divergence(const ProbVector& a, const ProbVector& b);

// Argmax accuracy. A gated model with masking enabled requires a selector.
double accuracy(Network& m, const Dataset& ds, int selector_row = Network::kNoSelector);

// Mean L2 distance between the two models' softmax outputs on `images`.
double activation_distance(Network& a, Network& b, const Tensor& images,
                           int selector_a = Network::kNoSelector,
                           int selector_b = Network::kNoSelector);

// Mean base-2 JS divergence between softmax outputs, same conventions.
double mean_js(Network& a, Network& b, const Tensor& images, int selector_a = Network::kNoSelector,
               int selector_b = Network::kNoSelector);

// Zero-retrain forgetting: 1 - mean JS between M (under selector_m) and a
// randomly initialized twin of the base architecture.
double zrf(Network& m, Network& random_twin, const Tensor& forget_images,
           int selector_m = Network::kNoSelector, int selector_twin = Network::kNoSelector);

// ---- insertion / deletion curves ------------------------------------------

enum class CurveKind { Deletion, Insertion, OtherClass };

struct CurvePoint {
  double fraction;  // of row-c gate elements manipulated
  double value;     // normalized confidence, clamped to [0,10]
};

struct Curve {
  CurveKind kind = CurveKind::Deletion;
  int cls = -1;
  double step_fraction = 0.05;
  std::vector<CurvePoint> points;  // fractions 0..1 inclusive
  double auc = 0.0;                // trapezoid over the fraction axis
  int clamped_points = 0;          // normalization clamp events
};

// Row-c gate elements pooled across layers and both gate banks, ranked by
// ascending sigma(raw) (most suppressed first); ties by (layer, gate bank,
// element index). gate_bank: 0 = weight gate, 1 = bias gate.
struct GateRef {
  int layer = 0;
  int gate_bank = 0;
  Index element = 0;
  double score = 0.0;  // sigma(raw)
};
std::vector<GateRef> ranked_gate_elements(const Network& wf_model, int cls);

// All three curves rank by the untrained wf_model's row c and normalize
// confidence against `baseline` evaluated with masking bypassed. Deletion
// and other-class start from gates at init; insertion starts from the
// untrained state and reactivates to +clip_hi.
Curve deletion_curve(const Network& wf_model, Network& baseline, const Dataset& test, int cls,
                     double step_fraction = 0.05);
Curve insertion_curve(const Network& wf_model, Network& baseline, const Dataset& test, int cls,
                      double step_fraction = 0.05);
// True-class confidence on non-c images (each under its own row) while row c
// is progressively deleted; asserts flatness.
Curve other_class_curve(const Network& wf_model, Network& baseline, const Dataset& test, int cls,
                        double step_fraction = 0.05);

// ---- aggregated report ------------------------------------------------------

struct ClassMetricsRow {
  int cls = -1;
  double acc_retain = 0.0;
  double acc_forget = 0.0;
  double zrf = 0.0;
  std::optional<double> activation_distance;  // vs the class-c retrained oracle
  std::optional<double> js_divergence;        // vs the class-c retrained oracle
  std::optional<double> insertion_auc;
  std::optional<double> deletion_auc;
};

struct MetricsReport {
  std::string model_id;
  std::string dataset_id;
  std::string arch;
  uint64_t seed = 0;
  std::vector<ClassMetricsRow> classes;
  double mean_acc_retain = 0.0;
  double mean_acc_forget = 0.0;
  double mean_zrf = 0.0;
};

// Fills the mean_* fields from the per-class rows.
void finalize_means(MetricsReport& report);

}  // namespace wf
