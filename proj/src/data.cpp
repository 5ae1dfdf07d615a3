#include "wf/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace wf {
namespace {

constexpr double kPi = 3.14159265358979323846;

struct ClassSignature {
  double bump_x, bump_y;  // bump center
  double theta;           // bar angle
  double amplitude;       // bar brightness
  double dash_period;     // on/off texture along the bar; 0 = solid
};

ClassSignature signature(const SynthSpec& spec, int cls) {
  const double s = spec.image_size;
  const double cx = 0.5 * (s - 1.0);
  const double ring = 0.28 * s;
  const double phase = 2.0 * kPi * cls / spec.n_classes;
  ClassSignature sig;
  sig.bump_x = cx + ring * std::cos(phase);
  sig.bump_y = cx + ring * std::sin(phase);
  sig.theta = kPi * cls / spec.n_classes;
  sig.amplitude = 1.0;
  sig.dash_period = 0.0;
  return sig;
}

void render(const SynthSpec& spec, const ClassSignature& sig, double jx, double jy, double* out) {
  const Index s = spec.image_size;
  const double bump_sigma = 0.09 * s;
  const double bar_across = 0.8;
  const double bar_along = 0.15 * s;  // segment half-length scale
  const double sin_t = std::sin(sig.theta);
  const double cos_t = std::cos(sig.theta);
  for (Index y = 0; y < s; ++y) {
    for (Index x = 0; x < s; ++x) {
      const double dxb = x - (sig.bump_x + jx);
      const double dyb = y - (sig.bump_y + jy);
      const double bump = 0.15 * std::exp(-(dxb * dxb + dyb * dyb) / (2.0 * bump_sigma * bump_sigma));
      // oriented ridge segment centered on the (jittered) class position
      const double d_across = dxb * sin_t - dyb * cos_t;
      const double d_along = dxb * cos_t + dyb * sin_t;
      double bar = std::exp(-(d_across * d_across) / (2.0 * bar_across * bar_across) -
                            (d_along * d_along) / (2.0 * bar_along * bar_along));
      if (sig.dash_period > 0.0) bar *= 0.5 + 0.5 * std::cos(2.0 * kPi * d_along / sig.dash_period);
      out[y * s + x] = bump + sig.amplitude * bar;
    }
  }
}

Dataset make_split(const SynthSpec& spec, int per_class, uint64_t seed) {
  const Index s = spec.image_size;
  const Index n = static_cast<Index>(spec.n_classes) * per_class;
  Dataset ds;
  ds.n_classes = spec.n_classes;
  ds.images = Tensor({n, 1, s, s});
  ds.labels.resize(static_cast<size_t>(n));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  std::uniform_int_distribution<int> jitter(-1, 1);
  Index i = 0;
  for (int c = 0; c < spec.n_classes; ++c) {
    ClassSignature sig = signature(spec, c);
    for (int k = 0; k < per_class; ++k, ++i) {
      double* img = ds.images.data() + i * s * s;
      const double jx = jitter(rng);
      const double jy = jitter(rng);
      render(spec, sig, jx, jy, img);
      for (Index p = 0; p < s * s; ++p) img[p] = std::clamp(img[p] + noise(rng), 0.0, 1.0);
      ds.labels[static_cast<size_t>(i)] = c;
    }
  }
  return ds;
}

uint64_t mix(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

uint32_t read_be_u32(std::istream& in, const std::filesystem::path& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error("idx: truncated header in " + path.string());
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

}  // namespace

DataSplits synth_dataset(const SynthSpec& spec) {
  if (spec.n_classes < 2)
    throw std::invalid_argument("synth_dataset: n_classes must be >= 2, got " +
                                std::to_string(spec.n_classes));
  if (spec.image_size < 8)
    throw std::invalid_argument("synth_dataset: image size must be >= 8, got " +
                                std::to_string(spec.image_size));
  if (spec.per_class_train < 1 || spec.per_class_val < 1 || spec.per_class_test < 1)
    throw std::invalid_argument("synth_dataset: per-class sample counts must be >= 1");
  if (spec.noise_sigma < 0.0) throw std::invalid_argument("synth_dataset: noise sigma must be >= 0");
  DataSplits d;
  d.train = make_split(spec, spec.per_class_train, mix(spec.seed, 0));
  d.train.split = "train";
  d.val = make_split(spec, spec.per_class_val, mix(spec.seed, 1));
  d.val.split = "val";
  d.test = make_split(spec, spec.per_class_test, mix(spec.seed, 2));
  d.test.split = "test";
  return d;
}

Tensor class_pattern(const SynthSpec& spec, int cls) {
  if (cls < 0 || cls >= spec.n_classes)
    throw std::invalid_argument("class_pattern: class " + std::to_string(cls) + " out of range [0," +
                                std::to_string(spec.n_classes) + ")");
  const Index s = spec.image_size;
  Tensor img({1, 1, s, s});
  render(spec, signature(spec, cls), 0.0, 0.0, img.data());
  for (Index p = 0; p < img.numel(); ++p) img[p] = std::clamp(img[p], 0.0, 1.0);
  return img;
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw std::runtime_error("idx: cannot open " + images_path.string());
  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw std::runtime_error("idx: cannot open " + labels_path.string());

  uint32_t magic_i = read_be_u32(fi, images_path);
  if (magic_i != 0x00000803u)
    throw std::runtime_error("idx: bad image magic in " + images_path.string() + " (got " +
                             std::to_string(magic_i) + ", want 2051)");
  uint32_t n_img = read_be_u32(fi, images_path);
  uint32_t rows = read_be_u32(fi, images_path);
  uint32_t cols = read_be_u32(fi, images_path);
  if (rows != cols)
    throw std::runtime_error("idx: images must be square, got " + std::to_string(rows) + "x" +
                             std::to_string(cols));

  uint32_t magic_l = read_be_u32(fl, labels_path);
  if (magic_l != 0x00000801u)
    throw std::runtime_error("idx: bad label magic in " + labels_path.string() + " (got " +
                             std::to_string(magic_l) + ", want 2049)");
  uint32_t n_lab = read_be_u32(fl, labels_path);
  if (n_img != n_lab)
    throw std::runtime_error("idx: image count " + std::to_string(n_img) + " != label count " +
                             std::to_string(n_lab));

  Dataset ds;
  const Index n = static_cast<Index>(n_img);
  const Index s = static_cast<Index>(rows);
  ds.images = Tensor({n, 1, s, s});
  ds.labels.resize(static_cast<size_t>(n));

  std::vector<unsigned char> buf(static_cast<size_t>(s * s));
  for (Index i = 0; i < n; ++i) {
    if (!fi.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
      throw std::runtime_error("idx: truncated image data in " + images_path.string());
    double* dst = ds.images.data() + i * s * s;
    for (size_t p = 0; p < buf.size(); ++p) dst[p] = buf[p] / 255.0;
  }
  int max_label = 0;
  for (Index i = 0; i < n; ++i) {
    char c;
    if (!fl.get(c)) throw std::runtime_error("idx: truncated label data in " + labels_path.string());
    int y = static_cast<unsigned char>(c);
    ds.labels[static_cast<size_t>(i)] = y;
    max_label = std::max(max_label, y);
  }
  ds.n_classes = max_label + 1;
  return ds;
}

std::vector<Batch> batches(const Dataset& ds, Index batch_size, uint64_t seed) {
  if (batch_size < 2 || batch_size % 2 != 0)
    throw std::invalid_argument("batches: batch size must be even and >= 2, got " +
                                std::to_string(batch_size));
  const Index n = ds.size();
  std::vector<Index> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  const Index stride = n > 0 ? ds.images.numel() / n : 0;
  const Index n_batches = n / batch_size;
  std::vector<Batch> out;
  out.reserve(static_cast<size_t>(n_batches));
  for (Index b = 0; b < n_batches; ++b) {
    Batch batch;
    batch.images = Tensor({batch_size, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
    batch.labels.resize(static_cast<size_t>(batch_size));
    for (Index j = 0; j < batch_size; ++j) {
      Index src = perm[static_cast<size_t>(b * batch_size + j)];
      batch.images.array().segment(j * stride, stride) = ds.images.array().segment(src * stride, stride);
      batch.labels[static_cast<size_t>(j)] = ds.labels[static_cast<size_t>(src)];
    }
    out.push_back(std::move(batch));
  }
  return out;
}

Dataset subset_where(const Dataset& ds, const std::function<bool(int label)>& keep) {
  const Index n = ds.size();
  const Index stride = n > 0 ? ds.images.numel() / n : 0;
  std::vector<Index> idx;
  for (Index i = 0; i < n; ++i)
    if (keep(ds.labels[static_cast<size_t>(i)])) idx.push_back(i);
  Dataset out;
  out.n_classes = ds.n_classes;
  out.split = ds.split;
  out.images = Tensor({static_cast<Index>(idx.size()), ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
  out.labels.resize(idx.size());
  for (size_t j = 0; j < idx.size(); ++j) {
    out.images.array().segment(static_cast<Index>(j) * stride, stride) =
        ds.images.array().segment(idx[j] * stride, stride);
    out.labels[j] = ds.labels[static_cast<size_t>(idx[j])];
  }
  return out;
}

}  // namespace wf
