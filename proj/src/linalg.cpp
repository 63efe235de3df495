#include "icl/linalg.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>

namespace icl {

namespace {

std::uint64_t to_little(std::uint64_t x) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r = (r << 8) | ((x >> (8 * i)) & 0xffu);
    return r;
  }
  return x;
}

}  // namespace

bool all_finite(const Matrix& a) { return a.allFinite(); }

void require_finite(const Matrix& a, const char* what) {
  if (!a.allFinite())
    throw NumericError(std::string(what) + ": non-finite entry");
}

namespace {

// Columns of A stored as rows of W so that each rotation touches two
// contiguous rows. Requires W.rows() <= W.cols() (n <= m).
SvdFactors jacobi_tall(const Matrix& a) {
  const int m = static_cast<int>(a.rows());
  const int n = static_cast<int>(a.cols());
  Matrix w = a.transpose();
  Matrix v = Matrix::Identity(n, n);  // rows are columns of V

  int sweep = 0;
  bool converged = (n <= 1);
  while (!converged) {
    if (sweep == kSvdMaxSweeps)
      throw NumericError("svd: no convergence after " + std::to_string(kSvdMaxSweeps) +
                         " sweeps for " + std::to_string(m) + "x" + std::to_string(n) +
                         " matrix");
    ++sweep;
    converged = true;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double alpha = w.row(p).squaredNorm();
        const double beta = w.row(q).squaredNorm();
        const double gamma = w.row(p).dot(w.row(q));
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= kSvdTolerance * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        Eigen::RowVectorXd wp = w.row(p);
        w.row(p) = c * wp - s * w.row(q);
        w.row(q) = s * wp + c * w.row(q);
        Eigen::RowVectorXd vp = v.row(p);
        v.row(p) = c * vp - s * v.row(q);
        v.row(q) = s * vp + c * v.row(q);
      }
    }
  }

  Vector norms(n);
  for (int i = 0; i < n; ++i) norms(i) = w.row(i).norm();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int i, int j) { return norms(i) > norms(j); });

  SvdFactors f;
  f.sweeps = sweep;
  f.S.resize(n);
  f.U = Matrix::Zero(m, n);
  f.V.resize(n, n);
  const double scale = norms.size() ? norms.maxCoeff() : 0.0;
  // Columns of U for numerically null singular values are rebuilt below.
  const double null_tol = std::max(scale, 1.0) * 1e-14 * std::max(m, n);
  for (int r = 0; r < n; ++r) {
    const int i = order[r];
    f.S(r) = norms(i);
    f.V.col(r) = v.row(i).transpose();
    if (norms(i) > null_tol) f.U.col(r) = w.row(i).transpose() / norms(i);
  }

  int probe = 0;
  for (int r = 0; r < n; ++r) {
    if (f.S(r) > null_tol) continue;
    Eigen::VectorXd cand;
    for (;;) {
      if (probe >= m) throw NumericError("svd: cannot complete null space basis");
      cand = Eigen::VectorXd::Unit(m, probe++);
      for (int pass = 0; pass < 2; ++pass)
        for (int j = 0; j < n; ++j)
          if (j != r && f.U.col(j).squaredNorm() > 0.0) cand -= f.U.col(j).dot(cand) * f.U.col(j);
      if (cand.norm() > 1e-8) break;
    }
    f.U.col(r) = cand / cand.norm();
  }
  return f;
}

}  // namespace

SvdFactors svd(const Matrix& a) {
  if (a.rows() < 1 || a.cols() < 1) throw std::invalid_argument("svd: empty matrix");
  require_finite(a, "svd input");
  if (a.rows() >= a.cols()) return jacobi_tall(a);
  SvdFactors t = jacobi_tall(a.transpose());
  std::swap(t.U, t.V);
  return t;
}

Matrix reconstruct(const SvdFactors& f) { return reconstruct(f, static_cast<int>(f.S.size())); }

Matrix reconstruct(const SvdFactors& f, int k) {
  Matrix out = Matrix::Zero(f.U.rows(), f.V.rows());
  if (k > 0)
    out.noalias() = f.U.leftCols(k) * f.S.head(k).asDiagonal() * f.V.leftCols(k).transpose();
  return out;
}

Matrix low_rank(const Matrix& a, int k) {
  const int r = static_cast<int>(std::min(a.rows(), a.cols()));
  if (k < 0 || k > r)
    throw std::invalid_argument("low_rank: k=" + std::to_string(k) + " outside [0," +
                                std::to_string(r) + "]");
  if (k == 0) return Matrix::Zero(a.rows(), a.cols());
  return reconstruct(svd(a), k);
}

Vector softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

CrossEntropy cross_entropy(const Vector& logits, int label) {
  if (label < 0 || label >= logits.size())
    throw std::invalid_argument("cross_entropy: label out of range");
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix();
  const double z = e.sum();
  CrossEntropy ce;
  ce.loss = std::log(z) - (logits(label) - mx);
  ce.grad = e / z;
  ce.grad(label) -= 1.0;
  return ce;
}

Matrix orthonormalize_rows(const Matrix& a) {
  if (a.rows() > a.cols())
    throw std::invalid_argument("orthonormalize_rows: " + std::to_string(a.rows()) +
                                " rows need dimension >= " + std::to_string(a.rows()) +
                                ", have " + std::to_string(a.cols()));
  Matrix q = a;
  for (int i = 0; i < q.rows(); ++i) {
    for (int pass = 0; pass < 2; ++pass)
      for (int j = 0; j < i; ++j) q.row(i) -= q.row(j).dot(q.row(i)) * q.row(j);
    const double nrm = q.row(i).norm();
    if (!(nrm > 1e-10)) throw NumericError("orthonormalize_rows: degenerate row");
    q.row(i) /= nrm;
  }
  return q;
}

void write_matrix(std::ostream& os, const Matrix& a, const std::string& name) {
  nlohmann::json h = {{"rows", a.rows()}, {"cols", a.cols()}, {"name", name}};
  os << h.dump() << '\n';
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(a.data()[i]));
    char buf[8];
    std::memcpy(buf, &bits, 8);
    os.write(buf, 8);
  }
}

std::pair<std::string, Matrix> read_matrix(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("read_matrix: missing header");
  const auto h = nlohmann::json::parse(line);
  const auto rows = h.at("rows").get<Eigen::Index>();
  const auto cols = h.at("cols").get<Eigen::Index>();
  Matrix a(rows, cols);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    char buf[8];
    if (!is.read(buf, 8)) throw std::runtime_error("read_matrix: truncated payload");
    std::uint64_t bits;
    std::memcpy(&bits, buf, 8);
    a.data()[i] = std::bit_cast<double>(to_little(bits));
  }
  return {h.at("name").get<std::string>(), a};
}

}  // namespace icl
