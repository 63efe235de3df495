#pragma once

#include "icl/nets.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace icl {

struct LaserTarget {
  std::string matrix;  // e.g. "ff2.u_in", "attn1.wo"
  double rho = 1.0;
};

// floor(rho * min(rows, cols)); rho in [0, 1].
int laser_rank(int rows, int cols, double rho);

Matrix truncate(const Matrix& a, double rho);

// Functional update: only the named matrix changes. Unknown names throw
// std::invalid_argument listing the available ones.
Transformer apply_laser(const Transformer& m, const LaserTarget& target);
Simplified apply_laser(const Simplified& m, const LaserTarget& target);

using Metrics = std::map<std::string, double>;

struct SweepRow {
  double rho = 0.0;
  int rank = 0;
  Metrics metrics;
  std::string error;  // non-empty when the evaluator failed for this row
};

std::vector<SweepRow> rank_sweep(const Transformer& m, const std::string& matrix,
                                 const std::vector<double>& rhos,
                                 const std::function<Metrics(const Transformer&)>& evaluator);

}  // namespace icl
