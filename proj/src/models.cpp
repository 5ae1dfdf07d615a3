#include "wf/models.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace wf {
namespace {

Tensor normal_init(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (Index i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

const std::string kSmallCnnArch = "small_cnn";
const std::string kTinyVitArch = "tiny_vit";

}  // namespace

std::vector<Parameter*> Network::all_parameters() {
  std::vector<Parameter*> out = parameters();
  for (WFLayer& l : gates_) {
    out.push_back(&l.weight_gate.raw);
    out.push_back(&l.bias_gate.raw);
  }
  return out;
}

void Network::set_masking_enabled(bool on) {
  for (WFLayer& l : gates_) l.masking_enabled = on;
}

WFLayer* Network::find_gate(const std::string& id) {
  for (WFLayer& l : gates_)
    if (l.id == id) return &l;
  return nullptr;
}

std::pair<Var, Var> Network::maybe_gate(Tape& t, const std::string& id, Var w, Var b, int selector_row) {
  WFLayer* g = find_gate(id);
  if (g == nullptr || !g->masking_enabled) return {w, b};
  if (selector_row < 0 || selector_row >= n_classes_)
    throw std::invalid_argument("forward: selector row " + std::to_string(selector_row) +
                                " out of range [0," + std::to_string(n_classes_) + ") for gated layer '" +
                                id + "'");
  return {gate_weights(t, *g, w, selector_row), gate_bias(t, *g, b, selector_row)};
}

void Network::check_images(const Tensor& images) const {
  if (images.ndim() != 4 || images.dim(1) != 1 || images.dim(2) != image_size_ ||
      images.dim(3) != image_size_)
    throw std::invalid_argument("forward: images must be [batch,1," + std::to_string(image_size_) + "," +
                                std::to_string(image_size_) + "], got " + shape_str(images.shape()));
  if (images.dim(0) < 1) throw std::invalid_argument("forward: empty image batch");
}

void Network::attach_gates(const std::vector<std::string>& layer_ids, double init_logit, double clip_lo,
                           double clip_hi) {
  if (wrapped()) throw std::logic_error("attach_gates: model already has gates attached");
  std::vector<GateSite> sites = gate_sites();
  auto site_list = [&sites] {
    std::string s;
    for (size_t i = 0; i < sites.size(); ++i) s += (i ? ", " : "") + sites[i].id;
    return s;
  };

  std::vector<std::string> wanted = layer_ids;
  if (wanted.empty())
    for (const GateSite& s : sites) wanted.push_back(s.id);
  for (const std::string& id : wanted) {
    bool known = std::any_of(sites.begin(), sites.end(), [&](const GateSite& s) { return s.id == id; });
    if (!known)
      throw std::invalid_argument("layer '" + id + "' cannot carry gates; gateable layers: " + site_list());
    if (std::count(wanted.begin(), wanted.end(), id) != 1)
      throw std::invalid_argument("duplicate gate layer id '" + id + "'");
  }

  for (const GateSite& s : sites) {
    if (std::find(wanted.begin(), wanted.end(), s.id) == wanted.end()) continue;
    WFLayer l;
    l.id = s.id;
    l.granularity = s.granularity;
    l.weight_gate = make_alpha(s.id + ".alpha_weights", n_classes_, s.k, init_logit, clip_lo, clip_hi);
    l.bias_gate = make_alpha(s.id + ".alpha_biases", n_classes_, s.k, init_logit, clip_lo, clip_hi);
    gates_.push_back(std::move(l));
  }
}

void Network::freeze_base() {
  for (Parameter* p : parameters()) p->trainable = false;
}

SmallCnn::SmallCnn(int n_classes, int image_size, uint64_t seed) : Network(n_classes, image_size) {
  if (n_classes < 2)
    throw std::invalid_argument("small_cnn: n_classes must be >= 2, got " + std::to_string(n_classes));
  if (image_size < 8)
    throw std::invalid_argument("small_cnn: image size must be >= 8, got " + std::to_string(image_size));
  Index s2 = (image_size / 2) / 2;
  flat_dim_ = 16 * s2 * s2;
  std::mt19937_64 rng(seed);
  conv1_w_ = Parameter("conv1.weight", normal_init({8, 1, 3, 3}, std::sqrt(2.0 / 9.0), rng));
  conv1_b_ = Parameter("conv1.bias", Tensor::zeros({8}));
  conv2_w_ = Parameter("conv2.weight", normal_init({16, 8, 3, 3}, std::sqrt(2.0 / 72.0), rng));
  conv2_b_ = Parameter("conv2.bias", Tensor::zeros({16}));
  fc_w_ = Parameter("fc.weight", normal_init({flat_dim_, n_classes}, std::sqrt(2.0 / flat_dim_), rng));
  fc_b_ = Parameter("fc.bias", Tensor::zeros({n_classes}));
}

const std::string& SmallCnn::architecture() const { return kSmallCnnArch; }

Var SmallCnn::forward(Tape& t, const Tensor& images, int selector_row) {
  check_images(images);
  Index batch = images.dim(0);
  Var x = t.constant(images);

  auto [k1, b1] = maybe_gate(t, "conv1", t.leaf(conv1_w_), t.leaf(conv1_b_), selector_row);
  Var h = maxpool2d(relu(conv2d(x, k1, b1, 1, 1)), 2);
  auto [k2, b2] = maybe_gate(t, "conv2", t.leaf(conv2_w_), t.leaf(conv2_b_), selector_row);
  h = maxpool2d(relu(conv2d(h, k2, b2, 1, 1)), 2);
  h = reshape(h, {batch, flat_dim_});
  return linear(h, t.leaf(fc_w_), t.leaf(fc_b_));
}

std::vector<Parameter*> SmallCnn::parameters() {
  return {&conv1_w_, &conv1_b_, &conv2_w_, &conv2_b_, &fc_w_, &fc_b_};
}

std::vector<Network::GateSite> SmallCnn::gate_sites() const {
  return {{"conv1", GateGranularity::ConvOutChannel, 8}, {"conv2", GateGranularity::ConvOutChannel, 16}};
}

TinyVit::TinyVit(int n_classes, int image_size, uint64_t seed) : Network(n_classes, image_size) {
  if (n_classes < 2)
    throw std::invalid_argument("tiny_vit: n_classes must be >= 2, got " + std::to_string(n_classes));
  if (image_size < kPatch || image_size % kPatch != 0)
    throw std::invalid_argument("tiny_vit: image size " + std::to_string(image_size) +
                                " not divisible by patch " + std::to_string(kPatch));
  Index grid = image_size / kPatch;
  grid_tokens_ = grid * grid;
  const Index patch_dim = kPatch * kPatch;

  std::mt19937_64 rng(seed);
  auto w02 = [&rng](Shape s) { return normal_init(std::move(s), 0.02, rng); };

  embed_w_ = Parameter("embed.weight", w02({patch_dim, kDim}));
  embed_b_ = Parameter("embed.bias", Tensor::zeros({kDim}));
  cls_ = Parameter("cls_token", w02({1, kDim}));
  pos_ = Parameter("pos_embed", w02({grid_tokens_ + 1, kDim}));
  for (int i = 0; i < kBlocks; ++i) {
    std::string p = "block" + std::to_string(i) + ".";
    Block& b = blocks_[i];
    b.ln1_g = Parameter(p + "ln1.gamma", Tensor::full({kDim}, 1.0));
    b.ln1_b = Parameter(p + "ln1.beta", Tensor::zeros({kDim}));
    b.qkv_w = Parameter(p + "qkv.weight", w02({kDim, 3 * kDim}));
    b.qkv_b = Parameter(p + "qkv.bias", Tensor::zeros({3 * kDim}));
    b.proj_w = Parameter(p + "proj.weight", w02({kDim, kDim}));
    b.proj_b = Parameter(p + "proj.bias", Tensor::zeros({kDim}));
    b.ln2_g = Parameter(p + "ln2.gamma", Tensor::full({kDim}, 1.0));
    b.ln2_b = Parameter(p + "ln2.beta", Tensor::zeros({kDim}));
    b.mlp1_w = Parameter(p + "mlp1.weight", w02({kDim, kMlpHidden}));
    b.mlp1_b = Parameter(p + "mlp1.bias", Tensor::zeros({kMlpHidden}));
    b.mlp2_w = Parameter(p + "mlp2.weight", w02({kMlpHidden, kDim}));
    b.mlp2_b = Parameter(p + "mlp2.bias", Tensor::zeros({kDim}));
  }
  lnf_g_ = Parameter("ln_f.gamma", Tensor::full({kDim}, 1.0));
  lnf_b_ = Parameter("ln_f.beta", Tensor::zeros({kDim}));
  head_w_ = Parameter("head.weight", w02({kDim, n_classes}));
  head_b_ = Parameter("head.bias", Tensor::zeros({n_classes}));
}

const std::string& TinyVit::architecture() const { return kTinyVitArch; }

Var TinyVit::forward(Tape& t, const Tensor& images, int selector_row) {
  check_images(images);
  const Index tokens = grid_tokens_ + 1;  // patches + cls

  Var tok = patchify(t.constant(images), kPatch);
  tok = linear(tok, t.leaf(embed_w_), t.leaf(embed_b_));
  tok = prepend_cls(tok, t.leaf(cls_), grid_tokens_);
  tok = add_pos(tok, t.leaf(pos_), tokens);

  for (int i = 0; i < kBlocks; ++i) {
    Block& b = blocks_[i];
    const std::string id = "block" + std::to_string(i) + ".qkv";
    Var h = layer_norm(tok, t.leaf(b.ln1_g), t.leaf(b.ln1_b));
    auto [qw, qb] = maybe_gate(t, id, t.leaf(b.qkv_w), t.leaf(b.qkv_b), selector_row);
    Var att = attention(linear(h, qw, qb), kHeads, tokens);
    att = linear(att, t.leaf(b.proj_w), t.leaf(b.proj_b));
    tok = add(tok, att);
    Var m = layer_norm(tok, t.leaf(b.ln2_g), t.leaf(b.ln2_b));
    m = gelu(linear(m, t.leaf(b.mlp1_w), t.leaf(b.mlp1_b)));
    m = linear(m, t.leaf(b.mlp2_w), t.leaf(b.mlp2_b));
    tok = add(tok, m);
  }
  tok = layer_norm(tok, t.leaf(lnf_g_), t.leaf(lnf_b_));
  Var cls = take_cls(tok, tokens);
  return linear(cls, t.leaf(head_w_), t.leaf(head_b_));
}

std::vector<Parameter*> TinyVit::parameters() {
  std::vector<Parameter*> out{&embed_w_, &embed_b_, &cls_, &pos_};
  for (int i = 0; i < kBlocks; ++i) {
    Block& b = blocks_[i];
    for (Parameter* p : {&b.ln1_g, &b.ln1_b, &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.ln2_g, &b.ln2_b,
                         &b.mlp1_w, &b.mlp1_b, &b.mlp2_w, &b.mlp2_b})
      out.push_back(p);
  }
  out.push_back(&lnf_g_);
  out.push_back(&lnf_b_);
  out.push_back(&head_w_);
  out.push_back(&head_b_);
  return out;
}

std::vector<Network::GateSite> TinyVit::gate_sites() const {
  std::vector<GateSite> out;
  for (int i = 0; i < kBlocks; ++i)
    out.push_back({"block" + std::to_string(i) + ".qkv", GateGranularity::ProjectionOutFeature, 3 * kDim});
  return out;
}

std::unique_ptr<Network> make_network(const std::string& arch, int n_classes, int image_size,
                                      uint64_t seed) {
  if (arch == kSmallCnnArch) return std::make_unique<SmallCnn>(n_classes, image_size, seed);
  if (arch == kTinyVitArch) return std::make_unique<TinyVit>(n_classes, image_size, seed);
  throw std::invalid_argument("unknown architecture '" + arch + "'; known: small_cnn, tiny_vit");
}

std::unique_ptr<Network> wf_wrap(const Network& base, const std::vector<std::string>& layer_ids,
                                 double init_logit, double clip_lo, double clip_hi) {
  if (base.wrapped()) throw std::invalid_argument("wf_wrap: model already wrapped");
  std::unique_ptr<Network> m = base.clone();
  m->attach_gates(layer_ids, init_logit, clip_lo, clip_hi);
  m->freeze_base();
  return m;
}

Tensor eval_logits(Network& m, const Tensor& images, int selector_row) {
  if (images.ndim() != 4 || images.dim(0) < 1)
    throw std::invalid_argument("eval_logits: images must be a non-empty [batch,1,S,S] tensor, got " +
                                shape_str(images.shape()));
  const Index batch = images.dim(0);
  const Index nc = m.n_classes();
  const Index stride = images.numel() / batch;
  Tensor out({batch, nc});
  const Index chunk = 256;
  for (Index start = 0; start < batch; start += chunk) {
    Index n = std::min(chunk, batch - start);
    Tensor sub({n, images.dim(1), images.dim(2), images.dim(3)});
    sub.array() = images.array().segment(start * stride, n * stride);
    Tape t;
    Var logits = m.forward(t, sub, selector_row);
    out.array().segment(start * nc, n * nc) = logits.value().array();
  }
  return out;
}

Tensor eval_probs(Network& m, const Tensor& images, int selector_row) {
  Tensor logits = eval_logits(m, images, selector_row);
  Index rows = logits.dim(0);
  auto lm = logits.mat();
  for (Index r = 0; r < rows; ++r) {
    Eigen::ArrayXd e = (lm.row(r).array() - lm.row(r).maxCoeff()).exp();
    lm.row(r) = (e / e.sum()).matrix().transpose();
  }
  return logits;
}

std::vector<int> predict(Network& m, const Tensor& images, int selector_row) {
  Tensor logits = eval_logits(m, images, selector_row);
  Index rows = logits.dim(0);
  std::vector<int> out(static_cast<size_t>(rows));
  auto lm = logits.mat();
  for (Index r = 0; r < rows; ++r) {
    Index best = 0;
    lm.row(r).maxCoeff(&best);
    out[static_cast<size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

Index param_count(Network& m) {
  Index n = 0;
  for (Parameter* p : m.all_parameters()) n += p->value.numel();
  return n;
}

}  // namespace wf
