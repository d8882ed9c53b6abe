// SPDX-License-Identifier: Apache-2.0

#include "bflab/quant.hpp"

#include <algorithm>
#include <cmath>

#include "bflab/error.hpp"

namespace bflab::quant {

num::DenseTensor QuantTensor::dequantize() const {
  return quant::dequantize(*this);
}

QuantTensor quantize(const num::DenseTensor& w, std::string name) {
  QuantTensor q;
  q.name = std::move(name);
  q.dims = w.dims();
  double max_abs = 0.0;
  for (double v : w.values()) {
    if (!std::isfinite(v)) {
      throw ContractError("cannot quantize non-finite tensor " + q.name);
    }
    max_abs = std::max(max_abs, std::abs(v));
  }
  q.scale = max_abs > 0.0 ? max_abs / kMaxCode : 1.0;
  q.codes.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    // std::round rounds half away from zero.
    double c = std::round(w[i] / q.scale);
    c = std::clamp(c, -static_cast<double>(kMaxCode),
                   static_cast<double>(kMaxCode));
    q.codes[i] = static_cast<std::int8_t>(c);
  }
  return q;
}

num::DenseTensor dequantize(const QuantTensor& q) {
  std::vector<double> values(q.codes.size());
  for (std::size_t i = 0; i < q.codes.size(); ++i) {
    values[i] = q.codes[i] * q.scale;
  }
  return num::DenseTensor(q.dims, std::move(values));
}

std::string to_string(const BitLocation& loc) {
  return loc.tensor + "[" + std::to_string(loc.index) + "].b" +
         std::to_string(loc.bit);
}

std::int8_t flip_code(std::int8_t code, int bit) {
  if (bit < 0 || bit >= kBitsPerCode) {
    throw LocationError("bit position " + std::to_string(bit) +
                        " outside [0,7]");
  }
  const auto raw = static_cast<std::uint8_t>(code);
  return static_cast<std::int8_t>(
      static_cast<std::uint8_t>(raw ^ (1u << bit)));
}

}  // namespace bflab::quant
