// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "bflab/tensor.hpp"

namespace bflab::quant {

inline constexpr int kBitsPerCode = 8;
inline constexpr int kMaxCode = 127;

// Symmetric per-tensor int8 weights: value[i] = codes[i] * scale.
// quantize() never produces -128, but a bit flip can, and everything
// downstream treats it as an ordinary code.
struct QuantTensor {
  std::string name;
  std::vector<std::size_t> dims;
  std::vector<std::int8_t> codes;
  double scale = 1.0;

  std::size_t size() const { return codes.size(); }
  num::DenseTensor dequantize() const;
  double value(std::size_t i) const { return codes[i] * scale; }

  friend bool operator==(const QuantTensor&, const QuantTensor&) = default;
};

// scale = max|w| / 127 (1 when w is all zero); codes are w/scale rounded half
// away from zero and clamped to [-127, 127].
QuantTensor quantize(const num::DenseTensor& w, std::string name = {});
num::DenseTensor dequantize(const QuantTensor& q);

// One attackable bit. Ordering is (tensor name, index, bit), which is the
// canonical tie-break everywhere in the search.
struct BitLocation {
  std::string tensor;
  std::size_t index = 0;
  int bit = 0;  // 0..7, bit 7 is the two's-complement sign bit

  auto operator<=>(const BitLocation&) const = default;
};

std::string to_string(const BitLocation& loc);

// code XOR (1 << bit), in two's complement.
std::int8_t flip_code(std::int8_t code, int bit);

}  // namespace bflab::quant
