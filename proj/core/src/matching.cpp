#include "fsod/matching.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace fsod {

// Assignment by shortest augmenting paths with row/column potentials,
// O(G^2 * P). Internally the target side plays the row role since G <= P.
std::vector<int> hungarian_match(const Tensor& cost) {
  if (cost.ndim() != 2) {
    throw std::runtime_error("hungarian_match: cost must be 2D, got " + shape_str(cost.shape));
  }
  int P = cost.shape[0], G = cost.shape[1];
  if (P < G) {
    throw std::runtime_error("hungarian_match: " + std::to_string(P) + " predictions for " +
                             std::to_string(G) + " targets; need predictions >= targets");
  }
  if (!cost.all_finite()) throw std::runtime_error("hungarian_match: non-finite cost entry");

  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based potentials; p[j] = target currently matched to prediction j.
  std::vector<double> u(G + 1, 0.0), v(P + 1, 0.0);
  std::vector<int> p(P + 1, 0), way(P + 1, 0);
  for (int i = 1; i <= G; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(P + 1, kInf);
    std::vector<char> used(P + 1, 0);
    do {
      used[j0] = 1;
      int i0 = p[j0], j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= P; ++j) {
        if (used[j]) continue;
        double cur = cost.at2(j - 1, i0 - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= P; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assignment(G, -1);
  for (int j = 1; j <= P; ++j) {
    if (p[j] != 0) assignment[p[j] - 1] = j - 1;
  }
  return assignment;
}

double assignment_cost(const Tensor& cost, const std::vector<int>& assignment) {
  double total = 0.0;
  for (int g = 0; g < static_cast<int>(assignment.size()); ++g) {
    total += cost.at2(assignment[g], g);
  }
  return total;
}

}  // namespace fsod
