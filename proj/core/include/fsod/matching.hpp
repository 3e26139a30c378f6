#pragma once

#include <vector>

#include "fsod/tensor.hpp"

namespace fsod {

// Minimum-cost injective assignment of predictions (rows) to targets
// (columns). Returns per-column: assignment[g] = matched row. Requires
// rows >= cols and finite costs.
std::vector<int> hungarian_match(const Tensor& cost);

// Total cost of an assignment under a cost matrix.
double assignment_cost(const Tensor& cost, const std::vector<int>& assignment);

}  // namespace fsod
