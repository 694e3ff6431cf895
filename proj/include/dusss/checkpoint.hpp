#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dusss/tensor.hpp"

namespace dusss {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Checkpoint layout: `<stem>.json` holds {"format","tensors":[{name, shape,
// offset}]} with offsets in float elements; `<stem>.bin` holds the values as
// little-endian IEEE-754 binary32, concatenated in manifest order.
void save_checkpoint(const std::filesystem::path& stem, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& stem);

// Copies values from `loaded` into the same-named tensors of `into`; every
// name in `into` must be present with an identical shape.
void assign_checkpoint(const NamedTensors& loaded, const NamedTensors& into,
                       const std::string& prefix = "");

// Rounds every value to the nearest binary32, so a save/load cycle is exact.
void round_to_float(const NamedTensors& tensors);

std::filesystem::path manifest_path(const std::filesystem::path& stem);
std::filesystem::path blob_path(const std::filesystem::path& stem);

}  // namespace dusss
