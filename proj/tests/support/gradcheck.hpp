#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "toxattr/model.hpp"

namespace toxattr::testsupport {

struct OpCheckResult {
  std::string op;
  double worst_rel_error = 0.0;
  std::size_t cases = 0;
};

// Random finite-difference sweeps over every primitive op: random small
// tensors (dims <= 5, entries in [-1,1]), a random scalar output coordinate,
// checks against every differentiable input.
std::vector<OpCheckResult> check_all_primitive_ops(std::size_t cases_per_op, std::uint64_t seed,
                                                   double step);

// Finite-difference check of d(loss)/d(every parameter tensor) on a small
// model over random examples. Returns the worst relative error seen.
double check_model_gradients(const model::ModelConfig& config, std::size_t n_examples,
                             std::uint64_t seed, double step);

}  // namespace toxattr::testsupport
