#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dssl/tensor.hpp"

namespace dssl {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Binary parameter file: magic "DSSL1", then one record per parameter:
/// u64 name length, name bytes, u64 rank, rank x u64 extents, f64 values.
/// All integers and floats little-endian.
void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> params);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Loads values into existing parameters. Names, order and shapes must match
/// exactly, otherwise std::runtime_error is thrown and nothing is modified.
void load_checkpoint_into(const std::filesystem::path& path, std::span<NamedTensor> params);

}  // namespace dssl
