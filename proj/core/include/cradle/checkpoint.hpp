#pragma once

#include <string>
#include <vector>

#include "cradle/nn.hpp"
#include "cradle/tensor.hpp"

namespace cradle {

struct NamedTensor {
  std::string name;
  Array value;
};

/// Binary tensor archive. Layout (little-endian, documented in
/// docs/checkpoint_format.md): magic "CRADLECK", u32 version, u32 tensor
/// count, per-tensor header (u32 name length, name bytes, u32 ndim=2,
/// u64 rows, u64 cols), then all values as row-major f64 in table order.
/// Writes go through a temp file and rename, so a reader never sees a
/// partial archive.
void write_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensor_file(const std::string& path);

/// Loads an archive into an existing store; every store entry must be present
/// with a matching shape. Extra archive entries are ignored (optimizer state
/// rides in the same file under its own prefix).
void load_into_store(const std::vector<NamedTensor>& tensors, ParamStore& store);

std::vector<NamedTensor> store_to_tensors(const ParamStore& store);

}  // namespace cradle
