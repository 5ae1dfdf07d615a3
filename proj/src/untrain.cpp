#include "wf/untrain.hpp"

#include "wf/ops.hpp"
#include "wf/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace wf {
namespace {

uint64_t mix(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

struct SelectorGroup {
  int row;
  Tensor images;
  std::vector<int> labels;
};

// Partition a half-batch by the row each sample is forwarded under, so one
// taped forward serves every sample sharing a selector.
std::vector<SelectorGroup> group_by_row(const Tensor& images, const std::vector<int>& labels,
                                        const std::vector<int>& rows) {
  const Index n = images.dim(0);
  const Index stride = images.numel() / n;
  std::map<int, std::vector<Index>> buckets;
  for (Index i = 0; i < n; ++i) buckets[rows[static_cast<size_t>(i)]].push_back(i);
  std::vector<SelectorGroup> out;
  out.reserve(buckets.size());
  for (auto& [row, idx] : buckets) {
    SelectorGroup g;
    g.row = row;
    g.images = Tensor({static_cast<Index>(idx.size()), images.dim(1), images.dim(2), images.dim(3)});
    g.labels.resize(idx.size());
    for (size_t j = 0; j < idx.size(); ++j) {
      g.images.array().segment(static_cast<Index>(j) * stride, stride) =
          images.array().segment(idx[j] * stride, stride);
      g.labels[j] = labels[static_cast<size_t>(idx[j])];
    }
    out.push_back(std::move(g));
  }
  return out;
}

Var zero_scalar(Tape& t) { return t.constant(Tensor::scalar(0.0)); }

// Temporarily bypass the gates (for frozen-base logit targets).
struct MaskingBypass {
  explicit MaskingBypass(Network& m) : m_(m) { m_.set_masking_enabled(false); }
  ~MaskingBypass() { m_.set_masking_enabled(true); }
  Network& m_;
};

}  // namespace

UntrainLossMode parse_loss_mode(const std::string& name) {
  if (name == "reciprocal") return UntrainLossMode::Reciprocal;
  if (name == "difference") return UntrainLossMode::Difference;
  if (name == "logit_target") return UntrainLossMode::LogitTarget;
  throw std::invalid_argument("unknown loss mode '" + name +
                              "'; known: reciprocal, difference, logit_target");
}

std::string loss_mode_name(UntrainLossMode mode) {
  switch (mode) {
    case UntrainLossMode::Reciprocal: return "reciprocal";
    case UntrainLossMode::Difference: return "difference";
    case UntrainLossMode::LogitTarget: return "logit_target";
  }
  throw std::logic_error("loss_mode_name: unhandled mode");
}

void check_untrain_config(const UntrainConfig& cfg) {
  if (cfg.lambda0 < 0.0 || cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0)
    throw std::invalid_argument("untrain: lambda weights must be >= 0");
  if (cfg.chi < 1) throw std::invalid_argument("untrain: chi must be >= 1, got " + std::to_string(cfg.chi));
  if (!(cfg.learning_rate > 0.0)) throw std::invalid_argument("untrain: learning rate must be > 0");
  if (cfg.batch_size < 2 || cfg.batch_size % 2 != 0)
    throw std::invalid_argument("untrain: batch size must be even and >= 2, got " +
                                std::to_string(cfg.batch_size));
  if (cfg.accumulation_steps < 1) throw std::invalid_argument("untrain: accumulation_steps must be >= 1");
  if (cfg.patience < 1) throw std::invalid_argument("untrain: patience must be >= 1");
  if (cfg.validations_per_epoch < 1)
    throw std::invalid_argument("untrain: validations_per_epoch must be >= 1");
  if (!(cfg.epsilon_guard > 0.0)) throw std::invalid_argument("untrain: epsilon_guard must be > 0");
  if (cfg.max_epochs < 1) throw std::invalid_argument("untrain: max_epochs must be >= 1");
  if (cfg.max_val_batches < 1) throw std::invalid_argument("untrain: max_val_batches must be >= 1");
}

std::pair<Batch, Batch> split_batch(const Batch& b) {
  const Index n = b.images.dim(0);
  if (n < 2 || n % 2 != 0)
    throw std::invalid_argument("split_batch: batch size must be even and >= 2, got " + std::to_string(n));
  if (static_cast<Index>(b.labels.size()) != n)
    throw std::invalid_argument("split_batch: " + std::to_string(b.labels.size()) + " labels for batch of " +
                                std::to_string(n));
  const Index half = n / 2;
  const Index stride = b.images.numel() / n;
  auto take = [&](Index start) {
    Batch out;
    out.images = Tensor({half, b.images.dim(1), b.images.dim(2), b.images.dim(3)});
    out.images.array() = b.images.array().segment(start * stride, half * stride);
    out.labels.assign(b.labels.begin() + start, b.labels.begin() + start + half);
    return out;
  };
  return {take(0), take(half)};
}

Var forget_term(Tape& t, Network& m, const Batch& unlearn_half) {
  const Index n = unlearn_half.images.dim(0);
  if (n < 1) throw std::invalid_argument("forget_term: empty half-batch");
  Var total = zero_scalar(t);
  for (SelectorGroup& g : group_by_row(unlearn_half.images, unlearn_half.labels, unlearn_half.labels)) {
    Var ce = softmax_cross_entropy(m.forward(t, g.images, g.row), g.labels);
    total = add(total, affine(ce, static_cast<double>(g.labels.size()) / static_cast<double>(n), 0.0));
  }
  return total;
}

Var retain_term(Tape& t, Network& m, const Batch& retain_half, int chi, std::mt19937_64& rng) {
  const Index n = retain_half.images.dim(0);
  if (n < 1) throw std::invalid_argument("retain_term: empty half-batch");
  if (chi < 1) throw std::invalid_argument("retain_term: chi must be >= 1");
  std::uniform_int_distribution<int> pick(0, m.n_classes() - 1);
  const double denom = static_cast<double>(chi) * static_cast<double>(n);
  Var total = zero_scalar(t);
  for (int rep = 0; rep < chi; ++rep) {
    std::vector<int> rows(static_cast<size_t>(n));
    for (Index j = 0; j < n; ++j) rows[static_cast<size_t>(j)] = pick(rng);
    for (SelectorGroup& g : group_by_row(retain_half.images, retain_half.labels, rows)) {
      Var ce = softmax_cross_entropy(m.forward(t, g.images, g.row), g.labels);
      total = add(total, affine(ce, static_cast<double>(g.labels.size()) / denom, 0.0));
    }
  }
  return total;
}

Var retain_term_logit(Tape& t, Network& m, const Batch& retain_half) {
  const Index n = retain_half.images.dim(0);
  if (n < 1) throw std::invalid_argument("retain_term_logit: empty half-batch");
  Tensor target;
  {
    MaskingBypass bypass(m);
    target = eval_logits(m, retain_half.images);
  }
  const Index nc = m.n_classes();
  const Index stride = retain_half.images.numel() / n;
  Var total = zero_scalar(t);
  // Group like the CE path: every sample under its own label row.
  std::map<int, std::vector<Index>> buckets;
  for (Index i = 0; i < n; ++i) buckets[retain_half.labels[static_cast<size_t>(i)]].push_back(i);
  for (auto& [row, idx] : buckets) {
    const Index gn = static_cast<Index>(idx.size());
    Tensor imgs({gn, retain_half.images.dim(1), retain_half.images.dim(2), retain_half.images.dim(3)});
    Tensor tgt({gn, nc});
    for (Index j = 0; j < gn; ++j) {
      imgs.array().segment(j * stride, stride) = retain_half.images.array().segment(idx[static_cast<size_t>(j)] * stride, stride);
      tgt.array().segment(j * nc, nc) = target.array().segment(idx[static_cast<size_t>(j)] * nc, nc);
    }
    Var diff = sub(m.forward(t, imgs, row), t.constant(std::move(tgt)));
    total = add(total, affine(sum_all(mul(diff, diff)), 1.0 / static_cast<double>(n), 0.0));
  }
  return total;
}

Var gate_regularizer(Tape& t, Network& m) {
  if (!m.wrapped()) throw std::invalid_argument("gate_regularizer: model has no gates");
  std::vector<WFLayer>& layers = m.wf_layers();
  Var acc = zero_scalar(t);
  for (WFLayer& l : layers) {
    Var open = add(sum_all(sigmoid(t.leaf(l.weight_gate.raw))), sum_all(sigmoid(t.leaf(l.bias_gate.raw))));
    const double count = static_cast<double>(l.weight_gate.raw.value.numel() + l.bias_gate.raw.value.numel());
    // mean(1 - sigma) over the layer's pooled gate elements
    acc = add(acc, affine(open, -1.0 / count, 1.0));
  }
  return affine(acc, 1.0 / static_cast<double>(layers.size()), 0.0);
}

Var untrain_loss(Tape& t, Network& m, const Batch& batch, const UntrainConfig& cfg,
                 std::mt19937_64& selector_rng, UntrainStats* stats) {
  auto [unlearn_half, retain_half] = split_batch(batch);
  Var s_u = forget_term(t, m, unlearn_half);
  Var s_r = cfg.loss_mode == UntrainLossMode::LogitTarget
                ? retain_term_logit(t, m, retain_half)
                : retain_term(t, m, retain_half, cfg.chi, selector_rng);
  Var reg = gate_regularizer(t, m);

  Var total;
  if (cfg.loss_mode == UntrainLossMode::Difference) {
    total = add(add(affine(s_r, cfg.lambda0, 0.0), affine(s_u, -cfg.lambda1, 0.0)),
                affine(reg, cfg.lambda2, 0.0));
  } else {
    Var inv = reciprocal(affine(s_u, 1.0, cfg.epsilon_guard));
    total = add(add(affine(s_r, cfg.lambda0, 0.0), affine(inv, cfg.lambda1, 0.0)),
                affine(reg, cfg.lambda2, 0.0));
  }
  if (stats != nullptr) {
    stats->s_u = s_u.scalar();
    stats->s_r = s_r.scalar();
    stats->reg = reg.scalar();
    stats->total = total.scalar();
  }
  return total;
}

UntrainResult untrain(Network& m, const Dataset& stream, const Dataset& val, const UntrainConfig& cfg) {
  check_untrain_config(cfg);
  if (!m.wrapped()) throw std::invalid_argument("untrain: model must be wrapped with gates");
  if (stream.size() < cfg.batch_size)
    throw std::invalid_argument("untrain: stream has " + std::to_string(stream.size()) +
                                " samples, need at least one batch of " + std::to_string(cfg.batch_size));
  if (val.size() < cfg.batch_size)
    throw std::invalid_argument("untrain: validation split has " + std::to_string(val.size()) +
                                " samples, need at least one batch of " + std::to_string(cfg.batch_size));
  m.set_masking_enabled(true);

  std::vector<Parameter*> gate_params;
  for (WFLayer& l : m.wf_layers()) {
    gate_params.push_back(&l.weight_gate.raw);
    gate_params.push_back(&l.bias_gate.raw);
  }
  for (Parameter* p : gate_params) p->zero_grad();

  auto validation_loss = [&]() {
    std::vector<Batch> vb = batches(val, cfg.batch_size, mix(cfg.validation_seed, 0));
    const int take = std::min<int>(cfg.max_val_batches, static_cast<int>(vb.size()));
    std::mt19937_64 vrng(mix(cfg.validation_seed, 1));
    double sum = 0.0;
    for (int i = 0; i < take; ++i) {
      Tape t;
      UntrainStats st;
      untrain_loss(t, m, vb[static_cast<size_t>(i)], cfg, vrng, &st);
      sum += st.total;
    }
    return sum / take;
  };

  UntrainResult res;
  std::vector<Tensor> best = snapshot_values(gate_params);
  double best_val = std::numeric_limits<double>::infinity();
  int stale = 0;
  bool stop = false;
  std::mt19937_64 selector_rng(mix(cfg.seed, 0xA11A));

  for (int epoch = 0; epoch < cfg.max_epochs && !stop; ++epoch) {
    std::vector<Batch> bs = batches(stream, cfg.batch_size, mix(cfg.seed, static_cast<uint64_t>(epoch)));
    const long val_every = std::max<long>(1, static_cast<long>(bs.size()) / cfg.validations_per_epoch);
    for (size_t i = 0; i < bs.size() && !stop; ++i) {
      Tape t;
      UntrainStats st;
      Var loss = untrain_loss(t, m, bs[i], cfg, selector_rng, &st);
      if (!std::isfinite(st.total))
        throw std::runtime_error("untrain: non-finite loss at batch " + std::to_string(res.batches_seen));
      t.backward(loss);
      ++res.batches_seen;

      if (res.batches_seen % cfg.accumulation_steps == 0) {
        const double scale = cfg.learning_rate / static_cast<double>(cfg.accumulation_steps);
        for (Parameter* p : gate_params) {
          p->value.array() -= scale * p->grad.array();
          p->zero_grad();
        }
        for (WFLayer& l : m.wf_layers()) {
          clip_alpha(l.weight_gate);
          clip_alpha(l.bias_gate);
        }
        ++res.optimizer_steps;
      }

      if ((static_cast<long>(i) + 1) % val_every == 0) {
        double vl = validation_loss();
        res.history.push_back({res.batches_seen, st.s_r, st.s_u, st.reg, st.total, vl});
        if (vl < best_val) {
          best_val = vl;
          best = snapshot_values(gate_params);
          stale = 0;
        } else if (++stale >= cfg.patience) {
          res.early_stopped = true;
          stop = true;
        }
      }
    }
    res.epochs_run = epoch + 1;
  }

  if (!res.history.empty()) restore_values(gate_params, best);
  res.best_val_loss = std::isfinite(best_val) ? best_val : 0.0;
  return res;
}

}  // namespace wf
