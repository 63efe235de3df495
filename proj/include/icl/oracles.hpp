#pragma once

#include "icl/datagen.hpp"
#include "icl/linalg.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace icl {

// Token convention throughout: ordinary tokens 0..N-1, tau = N, trigger q.

struct MomentEntry {
  double mu = 0.0;
  double sigma2 = 0.0;
  double range = 0.0;
};

// W_U(k)^T grad(W_F) W_E(q) at zero init, one sample.
MomentEntry wf_moments(int k, int N, double alpha);

enum class WvCase { TauTau, TauQ, TauOther, QTau, QQ, QOther, JTau, JQ, JJ, JOther };

WvCase wv_case(int j, int k, int q, int N);
std::string to_string(WvCase c);
inline constexpr int kWvCases = 10;

// 20 cells covering every case: one for each single-cell case, three each for
// TauOther, QOther, JTau, JQ and two each for JJ, JOther, drawn with `seed`.
std::vector<std::pair<int, int>> stratified_wv_cells(int N, int q, std::uint64_t seed);

// W_U(j)^T grad(W_V) W_E(k) at zero init, one sample.
MomentEntry wv_moments(int j, int k, int q, int N, int T, double alpha);

// Exact finite-T mean and variance of the same per-sample projection for the
// recall sampler (uniform ybar, forced z_T), computed by forward recursion.
MomentEntry exact_wv_moments(const TaskSpec& spec, int j, int k);
// Exact mean of 1/(N+1) - 1{y = k}: differs from wf_moments at k = tau by 1/(N+1).
MomentEntry exact_wf_moments(const TaskSpec& spec, int k);

enum class CountCase { YqKq, YqKtau, YqKother, YnKq, YnKtau, YnKy, YnKother };
inline constexpr int kCountCases = 7;
std::string to_string(CountCase c);

struct CountMoments {
  double m1 = 0.0;  // E[C]
  double m2 = 0.0;  // E[C^2]
  bool asymptotic = true;  // false when N < 16 or T < 4N
};

// Leading-order closed forms for C = #{t <= T : z_t = k} under the chain.
CountMoments count_moments(CountCase c, int N, int T, double alpha);

// (ybar, k) realizing a case with trigger q = triggers[0]; ybar != q picks the
// smallest such token, k the smallest token outside {q, ybar, tau} when needed.
std::pair<int, int> count_case_tokens(CountCase c, const TaskSpec& spec);

// Exact moments of the count of token k over the first `length` chain
// positions given ybar (z_1 ~ pi_u, then the trigger/bigram transitions).
CountMoments exact_count_moments(const TaskSpec& spec, int ybar, int k, int length);

struct EmpiricalMoments {
  double m1 = 0.0;
  double m2 = 0.0;
  double var = 0.0;  // sample variance
  int m = 0;
};

// Counts over z_1..z_{T-1} of sampled sequences (the forced z_T is excluded).
EmpiricalMoments empirical_count_moments(const TaskSpec& spec, int ybar, int k, int m,
                                         std::uint64_t seed, int threads = 1);

// Delta(xi) = xi_tau - max_{j < N} xi_j for logits of length N+1.
double margin(const Vector& logits);

struct MarginReport {
  double delta_ff = 0.0;
  double delta_attn = 0.0;
  double qhat = 0.0;       // noise fraction of the test sequence
  double alpha_hat = 0.0;  // alpha^2 qhat + alpha (1 - qhat)
  double predicted_ff = 0.0;    // eta_f alpha
  double predicted_attn = 0.0;  // eta_v alpha_hat / N
};

enum class BoundKind { Exact, Lower, Upper };

struct WqkProjection {
  int b1 = 0;
  int b2 = 0;
  double value = 0.0;
  BoundKind kind = BoundKind::Exact;
  double beta1 = 0.0;
  double beta2 = 0.0;
  std::string warning;  // set when alpha > 1.5 - sqrt(5)/2
};

// W_E(q)^T (-grad W_QK) (W_E(b1) + W~_E(b2)) after the feed-forward has fit the
// noise rate and W_V = sum_{j<N} W_U(j) (beta1 W_E(j) + beta2 W~_E(j))^T.
WqkProjection wqk_projection(int b1, int b2, int q, double beta1, double beta2, int N, double alpha);
double wqk_alpha_limit();

struct EarlySign {
  int k = 0;          // key direction W_E(k)
  double value = 0.0; // predicted W_E(q)^T (-grad W_QK) W_E(k)
  int sign = 0;
};

struct EarlySignTable {
  std::vector<EarlySign> rows;  // k = 0..N
  std::vector<std::string> flags;
};

// Before W_V is structured beyond its noise row: W_V = c W_U(tau) (sum_{k<N}
// W_E(k) + alpha W_E(tau))^T and the feed-forward predicts tau with p_ff.
EarlySignTable early_wqk_signs(int N, double alpha, double p_ff, double c);

// Feed-forward logit on tau that makes p(tau) = p with all other logits 0.
double noise_logit(int N, double p);

// ---- Empirical counterparts (the subjects the oracles are checked against) ----

struct OneStepEmpirical {
  Matrix wf;  // (N+1) x (N+1): [k][k'] = W_U(k)^T grad(W_F) W_E(k')
  Matrix wv;  // (N+1) x (N+1): W_U(j)^T grad(W_V) W_E(k)
  double max_abs_wqk = 0.0;
  double loss = 0.0;
  int m = 0;
};

// Mean gradients of the zero-initialized simplified model with orthonormal
// embeddings over m sampled recall sequences, via the model's backward pass.
OneStepEmpirical one_step_gradients(const TaskSpec& spec, int m, std::uint64_t seed, int threads = 1);

struct OneStepMargins {
  std::vector<MarginReport> rows;  // one per test sequence
  double mean_ff = 0.0;
  double mean_attn = 0.0;
  double ratio = 0.0;  // mean_ff / mean_attn
};

// One gradient step from zero with eta_f = eta_v = eta on m training sequences
// (streams (seed, i+1)), then margins on n_test noisy sequences drawn from
// test_seed.
OneStepMargins one_step_margins(const TaskSpec& spec, double eta, int m, std::uint64_t seed, int n_test,
                                std::uint64_t test_seed, int threads = 1);

// Gamma-hat(j, k) computed straight from token counts, without the model.
Matrix empirical_gamma(const TaskSpec& spec, int m, std::uint64_t seed);

struct WqkEmpirical {
  int b1 = 0;
  int b2 = 0;
  double value = 0.0;
  double se = 0.0;  // standard error over sequences
};

// Projections of -grad W_QK for the simplified model with W_V and W_F set as
// in wqk_projection; `pairs` lists (b1, b2).
std::vector<WqkEmpirical> wqk_gradient_projections(const TaskSpec& spec, double beta1, double beta2,
                                                   const std::vector<std::pair<int, int>>& pairs,
                                                   int m, std::uint64_t seed, int threads = 1);

// Per-direction projections W_E(q)^T (-grad W_QK) W_E(k) under the early-sign setup.
std::vector<WqkEmpirical> early_wqk_gradient(const TaskSpec& spec, double p_ff, double c, int m,
                                             std::uint64_t seed, int threads = 1);

}  // namespace icl
