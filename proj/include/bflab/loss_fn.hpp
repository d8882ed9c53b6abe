// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "bflab/model.hpp"
#include "bflab/quant.hpp"

namespace bflab {

// Flat coordinates over the attackable codes of a ParamSet: tensors in name
// order, elements in row-major order. Flat order therefore equals
// (tensor name, index) order.
class CoordinateMap {
 public:
  explicit CoordinateMap(const model::ParamSet& params);

  std::size_t size() const { return total_; }
  std::size_t tensor_count() const { return offsets_.size(); }
  quant::BitLocation location(std::size_t coord, int bit) const;
  std::size_t coordinate(const quant::BitLocation& loc) const;
  std::size_t offset(std::size_t tensor) const { return offsets_[tensor]; }
  const std::string& name(std::size_t tensor) const { return names_[tensor]; }

 private:
  std::vector<std::string> names_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> sizes_;
  std::size_t total_ = 0;
};

// Loss evaluation bound to one parameter state. loss_with_flip must be
// side-effect free from the caller's point of view and must equal a fresh
// evaluation of the flipped parameters bit for bit.
class FlipEvaluator {
 public:
  virtual ~FlipEvaluator() = default;
  virtual double loss() const = 0;
  virtual double loss_with_flip(const quant::BitLocation& loc) = 0;
};

// What the bit search optimizes.
class LossFunction {
 public:
  virtual ~LossFunction() = default;
  // Straight-through gradient w.r.t. every attackable code, in flat order.
  virtual std::vector<double> gradient(const model::ParamSet& params) const = 0;
  virtual std::unique_ptr<FlipEvaluator> evaluator(
      const model::ParamSet& params) const = 0;
  double loss(const model::ParamSet& params) const {
    return evaluator(params)->loss();
  }
};

}  // namespace bflab
