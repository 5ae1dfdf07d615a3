#pragma once

#include "wf/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

namespace wf {

struct Dataset {
  Tensor images;            // [N,1,S,S], values in [0,1]
  std::vector<int> labels;  // size N, values in [0, n_classes)
  int n_classes = 0;
  std::string split;        // "train" | "val" | "test" | ""

  Index size() const { return images.ndim() == 4 ? images.dim(0) : 0; }
  Index image_size() const { return images.ndim() == 4 ? images.dim(2) : 0; }
};

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

// Synthetic classification corpus. Each class renders a fixed signature —
// a Gaussian bump at a class-specific grid position plus an oriented bar
// segment through that position at a class-specific angle — then adds pixel
// noise and +-1px jitter and clamps to [0,1]. Deterministic given the seed.
struct SynthSpec {
  int n_classes = 5;
  int image_size = 16;
  int per_class_train = 128;
  int per_class_val = 32;
  int per_class_test = 32;
  double noise_sigma = 0.1;
  uint64_t seed = 7;
};

struct DataSplits {
  Dataset train, val, test;
};

DataSplits synth_dataset(const SynthSpec& spec);

// Noiseless, jitter-free class signature [1,1,S,S]; test oracle material.
Tensor class_pattern(const SynthSpec& spec, int cls);

// IDX (big-endian) image/label pair, e.g. the MNIST files. Pixels are
// scaled to [0,1]; images must be square.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

// Full batches in a seed-determined shuffled order; a short trailing batch
// is dropped.
std::vector<Batch> batches(const Dataset& ds, Index batch_size, uint64_t seed);

Dataset subset_where(const Dataset& ds, const std::function<bool(int label)>& keep);
inline Dataset subset_of_class(const Dataset& ds, int cls) {
  return subset_where(ds, [cls](int y) { return y == cls; });
}
inline Dataset subset_excluding_class(const Dataset& ds, int cls) {
  return subset_where(ds, [cls](int y) { return y != cls; });
}

}  // namespace wf
