#include "icl/laser.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace icl {

int laser_rank(int rows, int cols, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw std::invalid_argument("laser: rho outside [0,1]");
  const int r = std::min(rows, cols);
  // The slack absorbs representation error in products such as 0.3 * 10.
  return std::min(r, static_cast<int>(std::floor(rho * r + 1e-9)));
}

Matrix truncate(const Matrix& a, double rho) {
  return low_rank(a, laser_rank(static_cast<int>(a.rows()), static_cast<int>(a.cols()), rho));
}

namespace {

template <class Params>
Matrix* find_matrix(Params& p, const std::string& name) {
  std::string names;
  for (auto& nm : named(p)) {
    if (nm.name == name) return nm.m;
    names += (names.empty() ? "" : ", ") + nm.name;
  }
  throw std::invalid_argument("laser: unknown matrix '" + name + "'; available: " + names);
}

}  // namespace

Transformer apply_laser(const Transformer& m, const LaserTarget& target) {
  Transformer out = m;
  Matrix* w = find_matrix(out.p, target.matrix);
  *w = truncate(*w, target.rho);
  return out;
}

Simplified apply_laser(const Simplified& m, const LaserTarget& target) {
  Simplified out = m;
  Matrix* w = find_matrix(out.p, target.matrix);
  *w = truncate(*w, target.rho);
  return out;
}

std::vector<SweepRow> rank_sweep(const Transformer& m, const std::string& matrix,
                                 const std::vector<double>& rhos,
                                 const std::function<Metrics(const Transformer&)>& evaluator) {
  std::vector<SweepRow> rows;
  for (double rho : rhos) {
    SweepRow row;
    row.rho = rho;
    const Transformer cut = apply_laser(m, {matrix, rho});
    for (const auto& nm : named(cut.p))
      if (nm.name == matrix) row.rank = laser_rank(static_cast<int>(nm.m->rows()), static_cast<int>(nm.m->cols()), rho);
    try {
      row.metrics = evaluator(cut);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace icl
