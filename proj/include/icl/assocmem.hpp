#pragma once

#include "icl/linalg.hpp"
#include "icl/rng.hpp"

#include <cstdint>
#include <vector>

namespace icl {

enum class AssocEmbed { Orthonormal, Random };

// Inputs 0..n-1, outputs 0..n with n the noise output. Logit of output j for
// input i is <u_j, W e_i>.
struct AssocMemState {
  int n = 0;
  int d = 0;
  double alpha = 0.0;
  double lr = 0.05;
  long step = 0;
  Matrix W;  // d x d
  Matrix E;  // n x d, rows e_i
  Matrix U;  // (n+1) x d, rows u_j
};

// Orthonormal: E and U each have orthonormal rows, W = 0 (needs d >= n+1).
// Random: rows uniform on the unit sphere, W entries N(0, 1/d).
AssocMemState assoc_init(int n, int d, double alpha, double lr, AssocEmbed mode, std::uint64_t seed);

// Probabilities over the n+1 outputs; rank > 0 uses the rank-k truncation of W.
Vector predict(const AssocMemState& s, int i, int rank = 0);
Vector predict(const AssocMemState& s, const Matrix& W, int i);

// Population cross-entropy under p_alpha, averaged over uniform inputs.
double population_loss(const AssocMemState& s, const Matrix& W);
// Cross-entropy against y = x (alpha = 0).
double pure_label_loss(const AssocMemState& s, const Matrix& W);

Matrix population_gradient(const AssocMemState& s);
Matrix sampled_gradient(const AssocMemState& s, int m, Rng& rng);

// W <- W - lr grad. m = 0 uses the population gradient.
void gd_step(AssocMemState& s, int m = 0, Rng* rng = nullptr);

// Gradient-flow references in (a, b) coordinates: beta' = -dL/dbeta for
// W = beta1 B1 + beta2 B2, or W' = -grad L (mean over inputs). B1 and B2 are
// orthogonal with squared norms 4 and 12, so the W flow is beta1' = BetaMetric/4,
// beta2' = BetaMetric/12.
enum class OdeField { BetaMetric, WMetric };

struct OdePoint {
  double t = 0.0;
  double a = 0.0;
  double b = 0.0;
};

struct OdeDerivative {
  double da = 0.0;
  double db = 0.0;
};
OdeDerivative ode_field(double a, double b, double alpha, OdeField field);

struct OdeOptions {
  double dt = 1e-2;          // largest step
  double tolerance = 1e-8;   // local error per step, from step doubling
  OdeField field = OdeField::BetaMetric;
};

// RK4 from a = b = 0, recorded at each requested time (ascending). Steps whose
// local error estimate exceeds the tolerance are rejected and halved.
std::vector<OdePoint> ode_integrate(double alpha, const std::vector<double>& times,
                                    const OdeOptions& opt = {});

// Closed-form limits of the BetaMetric flow: b -> log(alpha/(1-alpha));
// a + log t -> the leading constant -log((1-alpha)(4-2alpha)), or the constant
// including the first-order relaxation of b.
double ode_b_limit(double alpha);
double ode_a_offset_leading(double alpha);
double ode_a_offset_corrected(double alpha);

struct BasisCoeffs {
  double beta1 = 0.0;
  double beta2 = 0.0;
  double a = 0.0;  // -2 beta1
  double b = 0.0;  // -beta1 - 3 beta2
  double residual = 0.0;  // ||W - beta1 B1 - beta2 B2||_F
};

// B1 = (u_0 - u_1)(e_0 - e_1)^T, B2 = (u_0 + u_1 - 2 u_2)(e_0 + e_1)^T.
Matrix basis_matrix(const AssocMemState& s, int which);
// Least-squares projection onto span{B1, B2}; requires n = 2.
BasisCoeffs decompose(const AssocMemState& s);

struct AssocRecord {
  long step = 0;
  double loss = 0.0;
  std::vector<double> pure_loss;   // index k-1 for rank k = 1..n+1
  std::vector<double> noise_prob;  // mean P(i, c) per rank, same indexing
  double pure_full = 0.0;          // untruncated W
  double noise_full = 0.0;
  double grad_norm = 0.0;
  BasisCoeffs coeffs;  // only for n = 2
};

AssocRecord record(const AssocMemState& s);

struct AssocRunOptions {
  long max_steps = 1000000;
  double grad_tol = 1e-6;
  int sampled_m = 0;   // 0: population gradient
  long record_every = 0;  // 0: no periodic records
  bool log_spaced = false;  // also record at 10^(k/10)
};

struct AssocRun {
  std::vector<AssocRecord> records;  // always includes step 0 and the final step
  bool converged = false;            // gradient norm reached grad_tol
};

AssocRun train_assoc(AssocMemState& s, const AssocRunOptions& opt, std::uint64_t seed = 0);

// Least-squares slope of log y on log x.
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace icl
