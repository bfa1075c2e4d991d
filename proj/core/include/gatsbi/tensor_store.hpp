#pragma once

#include <map>
#include <string>

#include <torch/torch.h>

#include "gatsbi/common.hpp"

namespace gatsbi {

/// Named float32 tensors serialized to the GTSR container format:
///   "GTSR" | u16 version=1 | u16 count |
///   per entry: u16 name_len | name | u8 ndim | u32 dims[ndim] | u8 dtype(0=f32) | payload (LE)
/// Entries are written in name order, so equal maps produce identical bytes.
using TensorMap = std::map<std::string, torch::Tensor>;

inline constexpr uint16_t kTensorStoreVersion = 1;

/// Serialize to disk. Rejects empty maps and non-finite values.
void save_tensors(const std::string& path, const TensorMap& tensors);

/// Parse from disk. Throws FormatError on bad magic, version, or truncation.
TensorMap load_tensors(const std::string& path);

}  // namespace gatsbi
