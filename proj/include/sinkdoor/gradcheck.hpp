#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sinkdoor/rng.hpp"
#include "sinkdoor/tensor.hpp"

namespace sinkdoor {

using GradFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Relative error between the taped gradient and central finite differences
// of sum(f(inputs) * w) for a fixed random weighting w, over every input
// element: |g_a - g_n|_2 / max(|g_a|_2 + |g_n|_2, 1e-12).
double gradcheck(const GradFn& f, const std::vector<Tensor>& inputs, Rng& rng, double h = 1e-6);

struct OpCheck {
  std::string op;
  int trials = 0;
  double max_rel_error = 0.0;
};

// Names of every differentiable operation covered by run_gradchecks.
std::vector<std::string> gradcheck_ops();

// `trials` randomized shape/value draws per operation.
std::vector<OpCheck> run_gradchecks(std::uint64_t seed, int trials);

// Largest |row sum - 1| of softmax_rows over `trials` random matrices,
// including rows with large logits.
double softmax_row_sum_error(std::uint64_t seed, int trials);

}  // namespace sinkdoor
