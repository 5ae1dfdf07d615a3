#pragma once

#include "wf/wf_layer.hpp"

#include <memory>
#include <string>
#include <vector>

namespace wf {

// Image classifier with optional per-class weight gates on selected layers.
// One object serves training, untraining, and plain evaluation; forward
// passes are recorded on a caller-supplied tape.
class Network {
 public:
  static constexpr int kNoSelector = -1;

  virtual ~Network() = default;

  virtual const std::string& architecture() const = 0;
  int n_classes() const { return n_classes_; }
  int image_size() const { return image_size_; }

  // images must be [B,1,S,S]. When the model is wrapped and masking is
  // enabled, selector_row picks the gate row (the class the input is
  // classified "under"); otherwise pass kNoSelector.
  virtual Var forward(Tape& t, const Tensor& images, int selector_row = kNoSelector) = 0;

  virtual std::vector<Parameter*> parameters() = 0;  // base weights only
  std::vector<Parameter*> all_parameters();          // base weights + gate logits

  std::vector<WFLayer>& wf_layers() { return gates_; }
  const std::vector<WFLayer>& wf_layers() const { return gates_; }
  bool wrapped() const { return !gates_.empty(); }
  void set_masking_enabled(bool on);

  virtual std::unique_ptr<Network> clone() const = 0;

  // Layers able to carry gates, in forward order.
  struct GateSite {
    std::string id;
    GateGranularity granularity;
    Index k;
  };
  virtual std::vector<GateSite> gate_sites() const = 0;

  // Installation used by wf_wrap(); ids must name gate_sites entries.
  void attach_gates(const std::vector<std::string>& layer_ids, double init_logit, double clip_lo,
                    double clip_hi);
  void freeze_base();

 protected:
  Network(int n_classes, int image_size) : n_classes_(n_classes), image_size_(image_size) {}

  WFLayer* find_gate(const std::string& id);
  // Applies the layer's gates to kernel/bias leaves when present+enabled.
  std::pair<Var, Var> maybe_gate(Tape& t, const std::string& id, Var w, Var b, int selector_row);
  void check_images(const Tensor& images) const;

  int n_classes_ = 0;
  int image_size_ = 0;
  std::vector<WFLayer> gates_;
};

// conv(1->8,3x3,pad1) relu pool2 | conv(8->16,3x3,pad1) relu pool2 | fc.
class SmallCnn final : public Network {
 public:
  SmallCnn(int n_classes, int image_size, uint64_t seed);
  const std::string& architecture() const override;
  Var forward(Tape& t, const Tensor& images, int selector_row) override;
  std::vector<Parameter*> parameters() override;
  std::vector<GateSite> gate_sites() const override;
  std::unique_ptr<Network> clone() const override { return std::make_unique<SmallCnn>(*this); }

 private:
  Parameter conv1_w_, conv1_b_, conv2_w_, conv2_b_, fc_w_, fc_b_;
  Index flat_dim_ = 0;
};

// patchify(4) -> linear embed (d=32) -> cls token + learned positions ->
// 2 pre-norm blocks (2-head fused-QKV attention, MLP 32-64-32 gelu) ->
// final norm -> head on the cls token.
class TinyVit final : public Network {
 public:
  TinyVit(int n_classes, int image_size, uint64_t seed);
  const std::string& architecture() const override;
  Var forward(Tape& t, const Tensor& images, int selector_row) override;
  std::vector<Parameter*> parameters() override;
  std::vector<GateSite> gate_sites() const override;
  std::unique_ptr<Network> clone() const override { return std::make_unique<TinyVit>(*this); }

  static constexpr int kPatch = 4;
  static constexpr Index kDim = 32;
  static constexpr int kHeads = 2;
  static constexpr Index kMlpHidden = 64;
  static constexpr int kBlocks = 2;

 private:
  struct Block {
    Parameter ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    Parameter ln2_g, ln2_b, mlp1_w, mlp1_b, mlp2_w, mlp2_b;
  };
  Parameter embed_w_, embed_b_, cls_, pos_, lnf_g_, lnf_b_, head_w_, head_b_;
  Block blocks_[kBlocks];
  Index grid_tokens_ = 0;  // patches per image, excluding the cls token
};

// arch is "small_cnn" or "tiny_vit".
std::unique_ptr<Network> make_network(const std::string& arch, int n_classes, int image_size,
                                      uint64_t seed);

// Clone `base`, freeze its weights, and attach per-class gates (raw logits
// init_logit, clamped to [clip_lo, clip_hi]) to the given layers — all
// gateable layers when `layer_ids` is empty. The classification head is not
// a gate site and cannot be wrapped.
std::unique_ptr<Network> wf_wrap(const Network& base, const std::vector<std::string>& layer_ids = {},
                                 double init_logit = 3.0, double clip_lo = -3.0, double clip_hi = 3.0);

// Plain (untaped) evaluation helpers; chunk internally to bound memory.
Tensor eval_logits(Network& m, const Tensor& images, int selector_row = Network::kNoSelector);
Tensor eval_probs(Network& m, const Tensor& images, int selector_row = Network::kNoSelector);
std::vector<int> predict(Network& m, const Tensor& images, int selector_row = Network::kNoSelector);
Index param_count(Network& m);

}  // namespace wf
