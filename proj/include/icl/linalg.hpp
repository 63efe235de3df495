#pragma once

#include <Eigen/Dense>

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace icl {

// Row-major so that a token's embedding is a contiguous row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Raised for numeric breakdowns (divergence, SVD non-convergence).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SvdFactors {
  Matrix U;  // m x r, orthonormal columns
  Vector S;  // r, descending, non-negative
  Matrix V;  // n x r, orthonormal columns
  int sweeps = 0;
};

inline constexpr int kSvdMaxSweeps = 100;
inline constexpr double kSvdTolerance = 1e-12;

bool all_finite(const Matrix& a);
void require_finite(const Matrix& a, const char* what);

// One-sided Jacobi. Throws NumericError after kSvdMaxSweeps sweeps.
SvdFactors svd(const Matrix& a);
Matrix reconstruct(const SvdFactors& f);
Matrix reconstruct(const SvdFactors& f, int k);

// Best rank-k approximation; k = 0 gives the zero matrix.
Matrix low_rank(const Matrix& a, int k);

Vector softmax(const Vector& logits);

struct CrossEntropy {
  double loss;
  Vector grad;  // softmax(logits) - onehot(label)
};
CrossEntropy cross_entropy(const Vector& logits, int label);

// Gram-Schmidt on rows (two passes). Throws if rows > cols or a row degenerates.
Matrix orthonormalize_rows(const Matrix& a);

// Serialized as one JSON header line {"rows","cols","name"} then rows*cols
// little-endian f64 values.
void write_matrix(std::ostream& os, const Matrix& a, const std::string& name);
std::pair<std::string, Matrix> read_matrix(std::istream& is);

}  // namespace icl
