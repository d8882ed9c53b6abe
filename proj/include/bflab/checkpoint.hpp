// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "bflab/model.hpp"
#include "bflab/quant.hpp"

namespace bflab::checkpoint {

// Little-endian layout:
//   "BFLP" | u32 version=1 | u32 tensor_count
//   per tensor: u16 name_len | name | u8 kind (0 int8, 1 f64) | u8 ndim |
//               u32 dims[ndim] | kind 0: f64 scale + int8 codes
//                              | kind 1: f64 values
//   u32 CRC-32 of every preceding byte.
// The model config travels as a float64 tensor named "meta.config".
inline constexpr char kMagic[4] = {'B', 'F', 'L', 'P'};
inline constexpr std::uint32_t kVersion = 1;

std::vector<std::uint8_t> serialize(const model::ParamSet& params);
model::ParamSet deserialize(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const model::ParamSet& params,
                     const std::filesystem::path& path);
model::ParamSet load_checkpoint(const std::filesystem::path& path);

// Every bit that differs between two checkpoints of the same shape, in
// (tensor, index, bit) order. Scales and float tensors must match exactly.
std::vector<quant::BitLocation> diff(const model::ParamSet& a,
                                     const model::ParamSet& b);

}  // namespace bflab::checkpoint
