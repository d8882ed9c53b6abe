// SPDX-License-Identifier: Apache-2.0
//
// Small randomly initialised models and hand-built optimization sets shared
// by the unit tests and the acceptance binary.

#pragma once

#include <cstdint>
#include <vector>

#include "bflab/model.hpp"
#include "bflab/objective.hpp"

namespace bflab::testing {

// 1 layer by default, d_model 16, vocab 96, context 48: well under 0.1M
// parameters.
model::ModelConfig micro_config(std::uint64_t seed, std::size_t n_layer = 1);

// Random init with weights scaled up so logits are not flat.
model::ParamSet micro_params(std::uint64_t seed, std::size_t n_layer = 1);
model::ModelWeights micro_weights(std::uint64_t seed, std::size_t n_layer = 1);

// n triggered + n clean samples over random tokens. The trigger token 7
// sits inside each triggered input, the target token 9 follows the input,
// and a short continuation follows the target. Clean samples never contain
// token 7 and carry reference logits of `reference`.
objective::OptSet micro_opt_set(const model::ParamSet& reference,
                                std::uint64_t seed, std::size_t n = 4);

}  // namespace bflab::testing
