#pragma once

// Central finite-difference gradient checks shared by the unit tests and the
// acceptance suite.

#include <functional>
#include <string>
#include <vector>

#include "radicalign/tensor.hpp"

namespace radicalign::testing {

using DVar = tensor::Var<double>;

struct GradCheck {
  std::string name;
  double max_rel_error = 0;
  int checked = 0;
};

/// Random parameter tensor with values in [lo, hi].
DVar random_param(tensor::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0);

/// sum_i w_i * out_i with fixed random weights, as a scalar node.
DVar weighted_sum(const DVar& out, std::uint64_t seed);

/// Compares backward() gradients of `loss(inputs)` against central
/// differences (step h) for every element of every input.
GradCheck check_gradients(const std::string& name, std::vector<DVar> inputs,
                          const std::function<DVar(const std::vector<DVar>&)>& loss, double h = 1e-5);

/// Every differentiable op plus both contrastive losses, their combination
/// and the recognizer loss, on minimal shapes.
std::vector<GradCheck> run_all_gradient_checks();

}  // namespace radicalign::testing
