#pragma once

#include "wf/models.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace wf {

// Checkpoint layout: [u32 LE manifest length][JSON manifest][float64 LE blob].
// The manifest carries the architecture, gate configuration, and a tensor
// directory (name, shape, byte offset into the blob) plus an FNV-1a-64 blob
// checksum; the blob is every parameter of all_parameters() in order, raw
// gate logits included pre-sigmoid. Round trips are bit-exact.
std::vector<uint8_t> save_checkpoint(Network& model);
std::unique_ptr<Network> load_checkpoint(const std::vector<uint8_t>& bytes);

void save_checkpoint_file(Network& model, const std::string& path);
std::unique_ptr<Network> load_checkpoint_file(const std::string& path);

}  // namespace wf
