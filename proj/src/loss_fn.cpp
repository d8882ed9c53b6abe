// SPDX-License-Identifier: Apache-2.0

#include "bflab/loss_fn.hpp"

#include <algorithm>

#include "bflab/error.hpp"

namespace bflab {

CoordinateMap::CoordinateMap(const model::ParamSet& params) {
  for (const auto& q : params.quantized) {
    names_.push_back(q.name);
    offsets_.push_back(total_);
    sizes_.push_back(q.codes.size());
    total_ += q.codes.size();
  }
}

quant::BitLocation CoordinateMap::location(std::size_t coord, int bit) const {
  if (coord >= total_) throw LocationError("coordinate out of range");
  auto it = std::upper_bound(offsets_.begin(), offsets_.end(), coord);
  const std::size_t t = static_cast<std::size_t>(it - offsets_.begin()) - 1;
  return {names_[t], coord - offsets_[t], bit};
}

std::size_t CoordinateMap::coordinate(const quant::BitLocation& loc) const {
  auto it = std::lower_bound(names_.begin(), names_.end(), loc.tensor);
  if (it == names_.end() || *it != loc.tensor) {
    throw LocationError("unknown tensor '" + loc.tensor + "'");
  }
  const std::size_t t = static_cast<std::size_t>(it - names_.begin());
  if (loc.index >= sizes_[t]) throw LocationError("index out of range");
  return offsets_[t] + loc.index;
}

}  // namespace bflab
