#pragma once

#include <functional>
#include <vector>

#include "fsod/param.hpp"
#include "fsod/tape.hpp"

namespace fsod {

// Verifies analytic gradients against central finite differences. `build`
// must reconstruct the computation from the current param values on the
// given tape and return the scalar root. Returns the max over every
// coordinate of every param of |analytic - numeric| / max(1, |analytic|).
// Param values are restored on exit; gradients are left cleared.
double grad_check(const std::function<Var(Tape&)>& build, const std::vector<Param*>& params,
                  double eps = 1e-5);

}  // namespace fsod
