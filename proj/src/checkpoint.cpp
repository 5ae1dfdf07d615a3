#include "wf/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts need byte swaps");

namespace wf {
namespace {

using nlohmann::json;

constexpr int kFormatVersion = 1;

uint64_t fnv1a64(const uint8_t* p, size_t n) {
  uint64_t h = 1469598103934665603ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

[[noreturn]] void fail(const std::string& what) {
  throw std::runtime_error("checkpoint: " + what);
}

}  // namespace

std::vector<uint8_t> save_checkpoint(Network& model) {
  std::vector<Parameter*> params = model.all_parameters();

  json dir = json::array();
  size_t offset = 0;
  for (Parameter* p : params) {
    json entry;
    entry["name"] = p->name;
    entry["shape"] = json::array();
    for (Index d : p->value.shape()) entry["shape"].push_back(d);
    entry["offset"] = offset;
    dir.push_back(std::move(entry));
    offset += static_cast<size_t>(p->value.numel()) * sizeof(double);
  }

  std::vector<uint8_t> blob(offset);
  for (size_t i = 0, pos = 0; i < params.size(); ++i) {
    const size_t bytes = static_cast<size_t>(params[i]->value.numel()) * sizeof(double);
    std::memcpy(blob.data() + pos, params[i]->value.data(), bytes);
    pos += bytes;
  }

  json m;
  m["format_version"] = kFormatVersion;
  m["arch"] = model.architecture();
  m["n_classes"] = model.n_classes();
  m["image_size"] = model.image_size();
  m["wrapped"] = model.wrapped();
  if (model.wrapped()) {
    const std::vector<WFLayer>& gates = model.wf_layers();
    json ids = json::array();
    for (const WFLayer& l : gates) {
      ids.push_back(l.id);
      if (l.weight_gate.clip_lo != gates[0].weight_gate.clip_lo ||
          l.weight_gate.clip_hi != gates[0].weight_gate.clip_hi ||
          l.weight_gate.init_logit != gates[0].weight_gate.init_logit)
        throw std::logic_error("checkpoint: gate layers disagree on clip/init settings");
    }
    m["gate_layers"] = std::move(ids);
    m["gate_init_logit"] = gates[0].weight_gate.init_logit;
    m["gate_clip_lo"] = gates[0].weight_gate.clip_lo;
    m["gate_clip_hi"] = gates[0].weight_gate.clip_hi;
  }
  m["tensors"] = std::move(dir);
  m["blob_bytes"] = blob.size();
  m["checksum_fnv1a64"] = hex64(fnv1a64(blob.data(), blob.size()));

  const std::string manifest = m.dump();
  if (manifest.size() > 0xffffffffULL) fail("manifest too large");

  std::vector<uint8_t> out;
  out.reserve(4 + manifest.size() + blob.size());
  const uint32_t mlen = static_cast<uint32_t>(manifest.size());
  out.resize(4);
  std::memcpy(out.data(), &mlen, 4);
  out.insert(out.end(), manifest.begin(), manifest.end());
  out.insert(out.end(), blob.begin(), blob.end());
  return out;
}

std::unique_ptr<Network> load_checkpoint(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 4) fail("truncated: shorter than the manifest length header");
  uint32_t mlen = 0;
  std::memcpy(&mlen, bytes.data(), 4);
  if (bytes.size() < 4 + static_cast<size_t>(mlen))
    fail("truncated: manifest length " + std::to_string(mlen) + " exceeds file size");

  json m;
  try {
    m = json::parse(bytes.begin() + 4, bytes.begin() + 4 + mlen);
  } catch (const json::parse_error& e) {
    fail(std::string("manifest is not valid JSON: ") + e.what());
  }

  const int version = m.at("format_version").get<int>();
  if (version != kFormatVersion)
    fail("format version " + std::to_string(version) + " unsupported (expected " +
         std::to_string(kFormatVersion) + ")");

  const size_t blob_bytes = m.at("blob_bytes").get<size_t>();
  const size_t blob_start = 4 + static_cast<size_t>(mlen);
  if (bytes.size() - blob_start != blob_bytes)
    fail("truncated blob: manifest declares " + std::to_string(blob_bytes) + " bytes, found " +
         std::to_string(bytes.size() - blob_start));

  const uint8_t* blob = bytes.data() + blob_start;
  const std::string declared = m.at("checksum_fnv1a64").get<std::string>();
  const std::string actual = hex64(fnv1a64(blob, blob_bytes));
  if (declared != actual)
    fail("checksum failure: manifest declares " + declared + ", blob hashes to " + actual);

  std::unique_ptr<Network> model = make_network(
      m.at("arch").get<std::string>(), m.at("n_classes").get<int>(), m.at("image_size").get<int>(),
      /*seed=*/0);
  if (m.at("wrapped").get<bool>()) {
    model->attach_gates(m.at("gate_layers").get<std::vector<std::string>>(),
                        m.at("gate_init_logit").get<double>(), m.at("gate_clip_lo").get<double>(),
                        m.at("gate_clip_hi").get<double>());
    model->freeze_base();
  }

  std::vector<Parameter*> params = model->all_parameters();
  const json& dir = m.at("tensors");
  if (dir.size() != params.size())
    fail("tensor directory has " + std::to_string(dir.size()) + " entries, model needs " +
         std::to_string(params.size()));
  size_t expected_offset = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    const json& entry = dir[i];
    const std::string name = entry.at("name").get<std::string>();
    if (name != params[i]->name)
      fail("tensor " + std::to_string(i) + " is '" + name + "', model expects '" +
           params[i]->name + "'");
    Shape shape;
    for (const json& d : entry.at("shape")) shape.push_back(d.get<Index>());
    if (shape != params[i]->value.shape())
      fail("tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
           shape_str(params[i]->value.shape()));
    const size_t offset = entry.at("offset").get<size_t>();
    if (offset != expected_offset)
      fail("tensor '" + name + "' offset " + std::to_string(offset) + " breaks the contiguous " +
           "layout (expected " + std::to_string(expected_offset) + ")");
    const size_t nbytes = static_cast<size_t>(params[i]->value.numel()) * sizeof(double);
    if (offset + nbytes > blob_bytes)
      fail("tensor '" + name + "' overflows the blob (" + std::to_string(offset + nbytes) + " > " +
           std::to_string(blob_bytes) + ")");
    std::memcpy(params[i]->value.data(), blob + offset, nbytes);
    expected_offset = offset + nbytes;
  }
  if (expected_offset != blob_bytes)
    fail("blob has " + std::to_string(blob_bytes - expected_offset) + " unclaimed trailing bytes");
  return model;
}

void save_checkpoint_file(Network& model, const std::string& path) {
  std::vector<uint8_t> bytes = save_checkpoint(model);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write to '" + path + "' failed");
}

std::unique_ptr<Network> load_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  const std::streamsize size = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  if (size > 0) f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) throw std::runtime_error("read of '" + path + "' failed");
  return load_checkpoint(bytes);
}

}  // namespace wf
