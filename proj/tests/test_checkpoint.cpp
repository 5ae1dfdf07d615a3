#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "wf/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <random>
#include <stdexcept>

using namespace wf;
using nlohmann::json;

namespace {

// Manifest slice of a serialized checkpoint, for structural assertions.
json manifest_of(const std::vector<uint8_t>& bytes) {
  uint32_t mlen = 0;
  std::memcpy(&mlen, bytes.data(), 4);
  return json::parse(bytes.begin() + 4, bytes.begin() + 4 + mlen);
}

std::unique_ptr<Network> scrambled_wrapped(uint64_t seed) {
  TinyVit base(5, 16, seed);
  auto m = wf_wrap(base);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (auto& l : m->wf_layers()) {
    for (Index i = 0; i < l.weight_gate.raw.value.numel(); ++i)
      l.weight_gate.raw.value[i] = u(rng);
    for (Index i = 0; i < l.bias_gate.raw.value.numel(); ++i) l.bias_gate.raw.value[i] = u(rng);
  }
  return m;
}

}  // namespace

TEST_CASE("save -> load -> save is byte-identical, tensors bit-exact") {
  for (const char* arch : {"small_cnn", "tiny_vit"}) {
    CAPTURE(arch);
    auto plain = make_network(arch, 5, 16, 7);
    std::vector<uint8_t> b1 = save_checkpoint(*plain);
    auto loaded = load_checkpoint(b1);
    std::vector<uint8_t> b2 = save_checkpoint(*loaded);
    CHECK(b1 == b2);
    CHECK(loaded->architecture() == plain->architecture());
    CHECK(loaded->n_classes() == 5);
    CHECK(loaded->image_size() == 16);
    CHECK_FALSE(loaded->wrapped());
    auto pa = plain->all_parameters();
    auto pb = loaded->all_parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i]->name == pb[i]->name);
      CHECK((pa[i]->value.array() == pb[i]->value.array()).all());
    }
  }
}

TEST_CASE("wrapped round trip preserves raw gate logits and freeze state") {
  auto m = scrambled_wrapped(11);
  std::vector<uint8_t> bytes = save_checkpoint(*m);
  auto loaded = load_checkpoint(bytes);
  REQUIRE(loaded->wrapped());
  REQUIRE(loaded->wf_layers().size() == m->wf_layers().size());
  for (size_t i = 0; i < m->wf_layers().size(); ++i) {
    const WFLayer& a = m->wf_layers()[i];
    const WFLayer& b = loaded->wf_layers()[i];
    CHECK(a.id == b.id);
    CHECK(a.granularity == b.granularity);
    CHECK((a.weight_gate.raw.value.array() == b.weight_gate.raw.value.array()).all());
    CHECK((a.bias_gate.raw.value.array() == b.bias_gate.raw.value.array()).all());
    CHECK(b.weight_gate.clip_lo == a.weight_gate.clip_lo);
    CHECK(b.weight_gate.clip_hi == a.weight_gate.clip_hi);
    CHECK(b.weight_gate.raw.trainable);
  }
  for (Parameter* p : loaded->parameters()) CHECK_FALSE(p->trainable);  // base frozen
  // save(load(x)) == x for the wrapped flavor too
  CHECK(save_checkpoint(*loaded) == bytes);
  // and the loaded model computes the same function
  Tensor x({2, 1, 16, 16});
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Index i = 0; i < x.numel(); ++i) x[i] = u(rng);
  Tensor la = eval_logits(*m, x, 2);
  Tensor lb = eval_logits(*loaded, x, 2);
  CHECK((la.array() == lb.array()).all());
}

TEST_CASE("manifest structure and size arithmetic") {
  auto m = scrambled_wrapped(13);
  std::vector<uint8_t> bytes = save_checkpoint(*m);
  json man = manifest_of(bytes);
  CHECK(man.at("format_version") == 1);
  CHECK(man.at("arch") == "tiny_vit");
  CHECK(man.at("wrapped") == true);
  CHECK(man.at("gate_layers").size() == m->wf_layers().size());
  CHECK(man.at("gate_clip_lo") == -3.0);
  CHECK(man.at("gate_clip_hi") == 3.0);
  CHECK(man.at("gate_init_logit") == 3.0);

  size_t total = 0;
  auto params = m->all_parameters();
  REQUIRE(man.at("tensors").size() == params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const json& entry = man.at("tensors")[i];
    CHECK(entry.at("name") == params[i]->name);
    CHECK(entry.at("offset") == total);
    total += static_cast<size_t>(params[i]->value.numel()) * sizeof(double);
  }
  CHECK(man.at("blob_bytes") == total);
  uint32_t mlen = 0;
  std::memcpy(&mlen, bytes.data(), 4);
  CHECK(bytes.size() == 4 + static_cast<size_t>(mlen) + total);
}

TEST_CASE("corruption and truncation are rejected with specific messages") {
  auto m = make_network("small_cnn", 5, 16, 3);
  std::vector<uint8_t> good = save_checkpoint(*m);

  SUBCASE("short header") {
    std::vector<uint8_t> b(good.begin(), good.begin() + 3);
    CHECK_THROWS_WITH_AS(load_checkpoint(b), doctest::Contains("truncated"), std::runtime_error);
  }
  SUBCASE("manifest length beyond file") {
    std::vector<uint8_t> b = good;
    uint32_t huge = 0x7fffffff;
    std::memcpy(b.data(), &huge, 4);
    CHECK_THROWS_WITH_AS(load_checkpoint(b), doctest::Contains("exceeds file size"),
                         std::runtime_error);
  }
  SUBCASE("manifest not json") {
    std::vector<uint8_t> b = good;
    b[4] = '!';
    CHECK_THROWS_WITH_AS(load_checkpoint(b), doctest::Contains("not valid JSON"),
                         std::runtime_error);
  }
  SUBCASE("blob truncated") {
    std::vector<uint8_t> b(good.begin(), good.end() - 8);
    CHECK_THROWS_WITH_AS(load_checkpoint(b), doctest::Contains("truncated blob"),
                         std::runtime_error);
  }
  SUBCASE("blob bit flip fails the checksum") {
    std::vector<uint8_t> b = good;
    b.back() ^= 0x01;
    CHECK_THROWS_WITH_AS(load_checkpoint(b), doctest::Contains("checksum"), std::runtime_error);
  }
  SUBCASE("unsupported version") {
    json man = manifest_of(good);
    man["format_version"] = 99;
    std::string ms = man.dump();
    std::vector<uint8_t> b(4);
    uint32_t mlen = static_cast<uint32_t>(ms.size());
    std::memcpy(b.data(), &mlen, 4);
    b.insert(b.end(), ms.begin(), ms.end());
    uint32_t oldlen = 0;
    std::memcpy(&oldlen, good.data(), 4);
    b.insert(b.end(), good.begin() + 4 + oldlen, good.end());
    CHECK_THROWS_WITH_AS(load_checkpoint(b), doctest::Contains("version"), std::runtime_error);
  }
  SUBCASE("non-contiguous offsets") {
    json man = manifest_of(good);
    man["tensors"][1]["offset"] = 4;  // overlaps tensor 0
    std::string ms = man.dump();
    std::vector<uint8_t> b(4);
    uint32_t mlen = static_cast<uint32_t>(ms.size());
    std::memcpy(b.data(), &mlen, 4);
    b.insert(b.end(), ms.begin(), ms.end());
    uint32_t oldlen = 0;
    std::memcpy(&oldlen, good.data(), 4);
    b.insert(b.end(), good.begin() + 4 + oldlen, good.end());
    CHECK_THROWS_WITH_AS(load_checkpoint(b), doctest::Contains("contiguous"), std::runtime_error);
  }
  SUBCASE("tensor name mismatch") {
    json man = manifest_of(good);
    man["tensors"][0]["name"] = "bogus";
    std::string ms = man.dump();
    std::vector<uint8_t> b(4);
    uint32_t mlen = static_cast<uint32_t>(ms.size());
    std::memcpy(b.data(), &mlen, 4);
    b.insert(b.end(), ms.begin(), ms.end());
    uint32_t oldlen = 0;
    std::memcpy(&oldlen, good.data(), 4);
    b.insert(b.end(), good.begin() + 4 + oldlen, good.end());
    CHECK_THROWS_WITH_AS(load_checkpoint(b), doctest::Contains("bogus"), std::runtime_error);
  }
  SUBCASE("shape mismatch") {
    json man = manifest_of(good);
    man["tensors"][0]["shape"] = {1, 2, 3};
    std::string ms = man.dump();
    std::vector<uint8_t> b(4);
    uint32_t mlen = static_cast<uint32_t>(ms.size());
    std::memcpy(b.data(), &mlen, 4);
    b.insert(b.end(), ms.begin(), ms.end());
    uint32_t oldlen = 0;
    std::memcpy(&oldlen, good.data(), 4);
    b.insert(b.end(), good.begin() + 4 + oldlen, good.end());
    CHECK_THROWS_WITH_AS(load_checkpoint(b), doctest::Contains("shape"), std::runtime_error);
  }
}

TEST_CASE("file round trip and io errors") {
  auto m = scrambled_wrapped(17);
  auto tmp = std::filesystem::temp_directory_path() / "wf_ckpt_test.bin";
  save_checkpoint_file(*m, tmp.string());
  auto loaded = load_checkpoint_file(tmp.string());
  CHECK(save_checkpoint(*loaded) == save_checkpoint(*m));
  std::filesystem::remove(tmp);
  CHECK_THROWS_WITH_AS(load_checkpoint_file(tmp.string()), doctest::Contains("cannot open"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(save_checkpoint_file(*m, "/nonexistent-dir/x.bin"),
                       doctest::Contains("cannot open"), std::runtime_error);
}
