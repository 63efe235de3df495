#include "icl/oracles.hpp"

#include "icl/nets.hpp"
#include "icl/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <thread>

namespace icl {

namespace {

constexpr int kOracleChunk = 1024;

void check_token(int k, int N, const char* what) {
  if (k < 0 || k > N) throw std::invalid_argument(std::string(what) + ": token out of range");
}

int single_trigger(const TaskSpec& spec) { return spec.triggers.front(); }

// One step of the chain's state distribution: v <- v K.
Vector chain_step(const TaskSpec& spec, int ybar, const Vector& v) {
  const int N = spec.N;
  Vector out = Vector::Zero(N + 1);
  for (int s = 0; s <= N; ++s) {
    const double w = v[s];
    if (w == 0.0) continue;
    if (s == N) {
      for (int t = 0; t < N; ++t) out[t] += w * spec.pi_u[t];
    } else if (spec.is_trigger(s)) {
      out[N] += w * spec.alpha;
      out[ybar] += w * (1.0 - spec.alpha);
    } else {
      out.head(N) += w * spec.pi_b.row(s).transpose();
    }
  }
  return out;
}

double label_prob(const TaskSpec& spec, int ybar, int j) {
  if (j == spec.N) return spec.alpha;
  return j == ybar ? 1.0 - spec.alpha : 0.0;
}

double trigger_share(const TaskSpec& spec, int k) {
  return spec.is_trigger(k) ? 1.0 / spec.triggers.size() : 0.0;
}

// Batch-means standard error from per-chunk means weighted by chunk size.
double batch_means_se(const std::vector<double>& means, const std::vector<int>& sizes) {
  const int n = static_cast<int>(means.size());
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0, mean = 0.0;
  for (int i = 0; i < n; ++i) {
    total += sizes[i];
    mean += sizes[i] * means[i];
  }
  mean /= total;
  double ss = 0.0;
  for (int i = 0; i < n; ++i) ss += sizes[i] * (means[i] - mean) * (means[i] - mean);
  // Var of the overall mean: sum w_i^2 var_i with var_i = s^2 / size_i.
  const double s2 = ss / (n - 1);
  return std::sqrt(s2 / total);
}

Simplified oracle_model(const TaskSpec& spec, std::uint64_t seed) {
  return build_simplified(spec.N, 3 * (spec.N + 1), EmbedScheme::Orthonormal, seed);
}

}  // namespace

MomentEntry wf_moments(int k, int N, double alpha) {
  check_token(k, N, "wf_moments");
  if (k == N) return {-alpha, alpha * (1.0 - alpha), std::max(alpha, 1.0 - alpha)};
  return {1.0 / (N + 1) - (1.0 - alpha) / N, (1.0 - alpha) / N, 1.0};
}

WvCase wv_case(int j, int k, int q, int N) {
  check_token(j, N, "wv_case");
  check_token(k, N, "wv_case");
  if (q < 0 || q >= N) throw std::invalid_argument("wv_case: trigger out of range");
  if (j == N) {
    if (k == N) return WvCase::TauTau;
    return k == q ? WvCase::TauQ : WvCase::TauOther;
  }
  if (j == q) {
    if (k == N) return WvCase::QTau;
    return k == q ? WvCase::QQ : WvCase::QOther;
  }
  if (k == N) return WvCase::JTau;
  if (k == q) return WvCase::JQ;
  return k == j ? WvCase::JJ : WvCase::JOther;
}

std::string to_string(WvCase c) {
  switch (c) {
    case WvCase::TauTau: return "tau,tau";
    case WvCase::TauQ: return "tau,q";
    case WvCase::TauOther: return "tau,other";
    case WvCase::QTau: return "q,tau";
    case WvCase::QQ: return "q,q";
    case WvCase::QOther: return "q,other";
    case WvCase::JTau: return "j,tau";
    case WvCase::JQ: return "j,q";
    case WvCase::JJ: return "j,j";
    case WvCase::JOther: return "j,other";
  }
  return "?";
}

std::vector<std::pair<int, int>> stratified_wv_cells(int N, int q, std::uint64_t seed) {
  if (N < 4) throw std::invalid_argument("stratified_wv_cells: needs N >= 4");
  std::vector<std::vector<std::pair<int, int>>> by_case(kWvCases);
  for (int j = 0; j <= N; ++j)
    for (int k = 0; k <= N; ++k) by_case[static_cast<int>(wv_case(j, k, q, N))].push_back({j, k});
  const std::vector<std::pair<WvCase, int>> quota = {
      {WvCase::TauTau, 1}, {WvCase::TauQ, 1},   {WvCase::TauOther, 3}, {WvCase::QTau, 1},
      {WvCase::QQ, 1},     {WvCase::QOther, 3}, {WvCase::JTau, 3},     {WvCase::JQ, 3},
      {WvCase::JJ, 2},     {WvCase::JOther, 2}};
  Rng rng = make_rng(seed, 0);
  std::vector<std::pair<int, int>> out;
  for (const auto& [c, n] : quota) {
    auto cells = by_case[static_cast<int>(c)];
    std::shuffle(cells.begin(), cells.end(), rng);
    for (int i = 0; i < n; ++i) out.push_back(cells[i]);
  }
  return out;
}

MomentEntry wv_moments(int j, int k, int q, int N, int T, double alpha) {
  const double a = alpha, n = N, t = T;
  const double n2 = n * n, n3 = n2 * n;
  switch (wv_case(j, k, q, N)) {
    case WvCase::TauTau:
      return {-a * a / n, a * a / (t * n) + (a * a * a - a * a * a * a) / n2, 0.5};
    case WvCase::TauQ:
    case WvCase::TauOther:
      return {-a / n, a / (t * n) + (a - a * a) / n2, 1.0};
    case WvCase::QTau:
      return {(2 * a - 1) / n2, 1.0 / (t * n2) + (a * a - a + 1) / n3, 0.5};
    case WvCase::QQ:
      return {(2 * a - 1) / (a * n2),
              (a * a * a - a * a - a + 2) / (a * a * a * t * n2) + (a * a - a + 1) / (a * a * n3), 1.0};
    case WvCase::QOther:
      return {a / n2, (2 - a) * (1.0 / (t * n2) + 1.0 / n3), 1.0};
    case WvCase::JTau:
      return {a * a / n2, (2 - a) * (a / (t * n2) + a * a / n3), 1.0 / 3.0};
    case WvCase::JQ:
      return {a / n2, (2 - a) * (1.0 / (t * n2) + 1.0 / n3), 0.5};
    case WvCase::JJ: {
      const double b = 1 + (1 - a) * (2 - a);
      const double c = 1 + (1 - a) * (2 - a) * (2 - a);
      return {(-a * a + 3 * a - 1) / n2, b / (t * n2) + c / n3, 1.0};
    }
    case WvCase::JOther:
      return {a / n2, (2 - a) * (1.0 / (t * n2) + 1.0 / n3), 1.0};
  }
  return {};
}

MomentEntry exact_wf_moments(const TaskSpec& spec, int k) {
  check_token(k, spec.N, "exact_wf_moments");
  const double p = k == spec.N ? spec.alpha : (1.0 - spec.alpha) / spec.N;
  return {1.0 / (spec.N + 1) - p, p * (1.0 - p), std::max(p, 1.0 - p)};
}

MomentEntry exact_wv_moments(const TaskSpec& spec, int j, int k) {
  const int N = spec.N;
  check_token(j, N, "exact_wv_moments");
  check_token(k, N, "exact_wv_moments");
  const double inv = 1.0 / (N + 1);
  const double iota = trigger_share(spec, k);
  const double T = spec.T;
  double mean = 0.0, second = 0.0;
  for (int ybar = 0; ybar < N; ++ybar) {
    const CountMoments c = exact_count_moments(spec, ybar, k, spec.T - 1);
    const double ef = (c.m1 + iota) / T;
    const double ef2 = (c.m2 + 2.0 * c.m1 * iota + iota) / (T * T);
    const double p = label_prob(spec, ybar, j);
    const double eg = inv - p;
    const double eg2 = inv * inv - 2.0 * p * inv + p;
    mean += eg * ef;
    second += eg2 * ef2;
  }
  mean /= N;
  second /= N;
  return {mean, std::max(0.0, second - mean * mean), 1.0 - inv};
}

std::string to_string(CountCase c) {
  switch (c) {
    case CountCase::YqKq: return "ybar=q,k=q";
    case CountCase::YqKtau: return "ybar=q,k=tau";
    case CountCase::YqKother: return "ybar=q,k=other";
    case CountCase::YnKq: return "ybar!=q,k=q";
    case CountCase::YnKtau: return "ybar!=q,k=tau";
    case CountCase::YnKy: return "ybar!=q,k=ybar";
    case CountCase::YnKother: return "ybar!=q,k=other";
  }
  return "?";
}

CountMoments count_moments(CountCase c, int N, int T, double alpha) {
  const double n = N, t = T, a = alpha;
  CountMoments out;
  out.asymptotic = !(N < 16 || T < 4 * N);
  auto poissonish = [&](double m1) {
    out.m1 = m1;
    out.m2 = m1 + m1 * m1;
  };
  switch (c) {
    case CountCase::YqKq: {
      const double r = t / (a * n);
      out.m1 = r;
      out.m2 = r * (-1.0 + 2.0 / (a * a)) + r * r;
      break;
    }
    case CountCase::YqKtau:
    case CountCase::YqKother:
    case CountCase::YnKq:
    case CountCase::YnKother:
      poissonish(t / n);
      break;
    case CountCase::YnKtau:
      poissonish(a * t / n);
      break;
    case CountCase::YnKy:
      poissonish((2.0 - a) * t / n);
      break;
  }
  return out;
}

std::pair<int, int> count_case_tokens(CountCase c, const TaskSpec& spec) {
  const int N = spec.N;
  const int q = single_trigger(spec);
  auto first_outside = [&](std::initializer_list<int> banned) {
    for (int t = 0; t < N; ++t)
      if (!spec.is_trigger(t) && std::find(banned.begin(), banned.end(), t) == banned.end()) return t;
    throw std::invalid_argument("count_case_tokens: vocabulary too small");
  };
  const int other_y = first_outside({});
  switch (c) {
    case CountCase::YqKq: return {q, q};
    case CountCase::YqKtau: return {q, N};
    case CountCase::YqKother: return {q, first_outside({})};
    case CountCase::YnKq: return {other_y, q};
    case CountCase::YnKtau: return {other_y, N};
    case CountCase::YnKy: return {other_y, other_y};
    case CountCase::YnKother: return {other_y, first_outside({other_y})};
  }
  return {q, q};
}

CountMoments exact_count_moments(const TaskSpec& spec, int ybar, int k, int length) {
  const int N = spec.N;
  check_token(k, N, "exact_count_moments");
  if (ybar < 0 || ybar >= N) throw std::invalid_argument("exact_count_moments: ybar out of range");
  if (length < 1) throw std::invalid_argument("exact_count_moments: length must be >= 1");
  // P(z_t = s), E[C_t 1{z_t = s}], E[C_t^2 1{z_t = s}].
  Vector P = Vector::Zero(N + 1);
  for (int t = 0; t < N; ++t) P[t] = spec.pi_u[t];
  Vector A = Vector::Zero(N + 1), B = Vector::Zero(N + 1);
  A[k] = P[k];
  B[k] = P[k];
  for (int t = 1; t < length; ++t) {
    P = chain_step(spec, ybar, P);
    const Vector AK = chain_step(spec, ybar, A);
    B = chain_step(spec, ybar, B);
    A = AK;
    A[k] += P[k];
    B[k] += 2.0 * AK[k] + P[k];
  }
  CountMoments out;
  out.m1 = A.sum();
  out.m2 = B.sum();
  out.asymptotic = !(N < 16 || length < 4 * N);
  return out;
}

EmpiricalMoments empirical_count_moments(const TaskSpec& spec, int ybar, int k, int m,
                                         std::uint64_t seed, int threads) {
  if (m < 1) throw std::invalid_argument("empirical_count_moments: m must be >= 1");
  threads = std::max(1, threads);
  std::vector<double> counts(m);
  auto work = [&](int w) {
    for (int i = w; i < m; i += threads) {
      Rng rng = make_rng(seed, static_cast<std::uint64_t>(i));
      const TokenSequence s = sample_recall_given(spec, ybar, rng);
      int c = 0;
      for (int t = 0; t + 1 < spec.T; ++t) c += s.z[t] == k;
      counts[i] = c;
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) pool.emplace_back(work, w);
    for (auto& th : pool) th.join();
  }
  EmpiricalMoments out;
  out.m = m;
  for (double c : counts) {
    out.m1 += c;
    out.m2 += c * c;
  }
  out.m1 /= m;
  out.m2 /= m;
  double ss = 0.0;
  for (double c : counts) ss += (c - out.m1) * (c - out.m1);
  out.var = m > 1 ? ss / (m - 1) : 0.0;
  return out;
}

double margin(const Vector& logits) {
  const Eigen::Index n = logits.size();
  if (n < 2) throw std::invalid_argument("margin: need at least two logits");
  return logits[n - 1] - logits.head(n - 1).maxCoeff();
}

double wqk_alpha_limit() { return 1.5 - std::sqrt(5.0) / 2.0; }

WqkProjection wqk_projection(int b1, int b2, int q, double beta1, double beta2, int N, double alpha) {
  check_token(b1, N, "wqk_projection");
  check_token(b2, N, "wqk_projection");
  WqkProjection out;
  out.b1 = b1;
  out.b2 = b2;
  out.beta1 = beta1;
  out.beta2 = beta2;
  const double s = (1.0 - alpha) * (1.0 - alpha);
  const double n = N;
  if (b2 != q) {
    out.kind = BoundKind::Upper;
    out.value = s * (beta1 + 2.0 * beta2) / (n * n);
  } else if (b1 == q) {
    out.kind = BoundKind::Lower;
    out.value = s * (beta1 + beta2 / n) / n;
  } else if (b1 == N) {
    out.value = s * beta1 / n;
  } else {
    out.value = s * beta1 * (1.0 + 1.0 / n) / n;
  }
  if (alpha > wqk_alpha_limit())
    out.warning = "alpha above 1.5 - sqrt(5)/2; the W_V sign structure behind this value is not guaranteed";
  return out;
}

EarlySignTable early_wqk_signs(int N, double alpha, double p_ff, double c) {
  EarlySignTable out;
  const double n = N;
  const double base = (alpha - p_ff) * (alpha / n) * c * (alpha - 1.0);
  for (int k = 0; k <= N; ++k) {
    EarlySign e;
    e.k = k;
    e.value = k == N ? base * (1.0 - alpha / n) : base * (-1.0 / n);
    e.sign = (e.value > 0) - (e.value < 0);
    out.rows.push_back(e);
  }
  if (p_ff >= alpha) out.flags.push_back("feed-forward noise probability is not below alpha; signs reverse");
  if (alpha >= 1.0) out.flags.push_back("noise token is not rarer than ordinary tokens");
  if (c <= 0.0) out.flags.push_back("value noise row coefficient is not positive");
  return out;
}

double noise_logit(int N, double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("noise_logit: p outside (0,1)");
  return std::log(p * N / (1.0 - p));
}

namespace {

SimplifiedParams mean_gradient(const Simplified& model, const TaskSpec& spec, int m, std::uint64_t seed,
                               int threads, double& loss) {
  SimplifiedParams sum = zeros_like(model.p);
  loss = 0.0;
  for (int lo = 0; lo < m; lo += kOracleChunk) {
    const int n = std::min(kOracleChunk, m - lo);
    const auto batch = recall_batch(spec, seed, static_cast<std::uint64_t>(lo) + 1, n);
    const SimplifiedLossGrad lg = backward(model, batch, threads);
    sum.wf += n * lg.grad.wf;
    sum.wv += n * lg.grad.wv;
    sum.wqk += n * lg.grad.wqk;
    loss += n * lg.loss;
  }
  loss /= m;
  sum.wf /= m;
  sum.wv /= m;
  sum.wqk /= m;
  return sum;
}

}  // namespace

OneStepEmpirical one_step_gradients(const TaskSpec& spec, int m, std::uint64_t seed, int threads) {
  if (m < 1) throw std::invalid_argument("one_step_gradients: m must be >= 1");
  const Simplified model = oracle_model(spec, seed);
  OneStepEmpirical out;
  const SimplifiedParams g = mean_gradient(model, spec, m, seed, threads, out.loss);
  const Matrix& wu = model.emb.wu;
  const Matrix& we = model.emb.we;
  out.m = m;
  out.wf = wu * g.wf * we.transpose();
  out.wv = wu * g.wv * we.transpose();
  out.max_abs_wqk = g.wqk.cwiseAbs().maxCoeff();
  return out;
}

OneStepMargins one_step_margins(const TaskSpec& spec, double eta, int m, std::uint64_t seed, int n_test,
                                std::uint64_t test_seed, int threads) {
  if (m < 1 || n_test < 1) throw std::invalid_argument("one_step_margins: m and n_test must be >= 1");
  Simplified model = oracle_model(spec, seed);
  double loss = 0.0;
  const SimplifiedParams g = mean_gradient(model, spec, m, seed, threads, loss);
  model.p.wf = -eta * g.wf;
  model.p.wv = -eta * g.wv;
  const auto test = recall_batch(spec, test_seed, 0, n_test);
  const SimplifiedTrace tr = forward_simplified(model, test);
  OneStepMargins out;
  const double a = spec.alpha;
  for (int b = 0; b < n_test; ++b) {
    MarginReport r;
    r.delta_ff = margin(tr.xi_ff.row(b).transpose());
    r.delta_attn = margin(tr.xi_attn.row(b).transpose());
    r.qhat = static_cast<double>(std::count(test[b].z.begin(), test[b].z.end(), spec.tau())) / spec.T;
    r.alpha_hat = a * a * r.qhat + a * (1.0 - r.qhat);
    r.predicted_ff = eta * a;
    r.predicted_attn = eta * r.alpha_hat / spec.N;
    out.mean_ff += r.delta_ff / n_test;
    out.mean_attn += r.delta_attn / n_test;
    out.rows.push_back(r);
  }
  out.ratio = out.mean_ff / out.mean_attn;
  return out;
}

Matrix empirical_gamma(const TaskSpec& spec, int m, std::uint64_t seed) {
  if (m < 1) throw std::invalid_argument("empirical_gamma: m must be >= 1");
  const int V = spec.N + 1;
  Vector F = Vector::Zero(V);
  Matrix R = Matrix::Zero(V, V);
  Vector f(V);
  for (int i = 0; i < m; ++i) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(i) + 1);
    const TokenSequence s = sample_recall(spec, rng);
    f.setZero();
    for (int z : s.z) f[z] += 1.0;
    f /= spec.T;
    F += f;
    R.row(s.y) += f.transpose();
  }
  Matrix G = Vector::Constant(V, 1.0 / V) * F.transpose() - R;
  return G / m;
}

namespace {

// Chunked -grad W_QK projections with batch-means standard errors.
std::vector<WqkEmpirical> project_wqk(const Simplified& model, const TaskSpec& spec,
                                      const std::vector<Vector>& keys,
                                      const std::vector<std::pair<int, int>>& labels, int m,
                                      std::uint64_t seed, int threads) {
  const int q = single_trigger(spec);
  const Vector eq = model.emb.we.row(q).transpose();
  const std::size_t n = keys.size();
  std::vector<std::vector<double>> means(n);
  std::vector<int> sizes;
  for (int lo = 0; lo < m; lo += kOracleChunk) {
    const int cnt = std::min(kOracleChunk, m - lo);
    const auto batch = recall_batch(spec, seed, static_cast<std::uint64_t>(lo) + 1, cnt);
    const SimplifiedLossGrad lg = backward(model, batch, threads);
    const Vector left = -(eq.transpose() * lg.grad.wqk).transpose();
    for (std::size_t i = 0; i < n; ++i) means[i].push_back(left.dot(keys[i]));
    sizes.push_back(cnt);
  }
  std::vector<WqkEmpirical> out;
  for (std::size_t i = 0; i < n; ++i) {
    WqkEmpirical e;
    e.b1 = labels[i].first;
    e.b2 = labels[i].second;
    double total = 0.0;
    for (std::size_t c = 0; c < sizes.size(); ++c) {
      e.value += sizes[c] * means[i][c];
      total += sizes[c];
    }
    e.value /= total;
    e.se = batch_means_se(means[i], sizes);
    out.push_back(e);
  }
  return out;
}

}  // namespace

std::vector<WqkEmpirical> wqk_gradient_projections(const TaskSpec& spec, double beta1, double beta2,
                                                   const std::vector<std::pair<int, int>>& pairs,
                                                   int m, std::uint64_t seed, int threads) {
  const int N = spec.N;
  const int q = single_trigger(spec);
  Simplified model = oracle_model(spec, seed);
  const auto& e = model.emb;
  model.p.wv = e.wu.topRows(N).transpose() * (beta1 * e.we.topRows(N) + beta2 * e.we_prev.topRows(N));
  model.p.wf = noise_logit(N, spec.alpha) * e.wu.row(N).transpose() * e.we.row(q);
  std::vector<Vector> keys;
  for (const auto& [b1, b2] : pairs) {
    check_token(b1, N, "wqk_gradient_projections");
    check_token(b2, N, "wqk_gradient_projections");
    keys.push_back((e.we.row(b1) + e.we_prev.row(b2)).transpose());
  }
  return project_wqk(model, spec, keys, pairs, m, seed, threads);
}

std::vector<WqkEmpirical> early_wqk_gradient(const TaskSpec& spec, double p_ff, double c, int m,
                                             std::uint64_t seed, int threads) {
  const int N = spec.N;
  const int q = single_trigger(spec);
  Simplified model = oracle_model(spec, seed);
  const auto& e = model.emb;
  const Eigen::RowVectorXd dir = e.we.topRows(N).colwise().sum() + spec.alpha * e.we.row(N);
  model.p.wv = c * e.wu.row(N).transpose() * dir;
  model.p.wf = noise_logit(N, p_ff) * e.wu.row(N).transpose() * e.we.row(q);
  std::vector<Vector> keys;
  std::vector<std::pair<int, int>> labels;
  for (int k = 0; k <= N; ++k) {
    keys.push_back(e.we.row(k).transpose());
    labels.push_back({k, -1});
  }
  return project_wqk(model, spec, keys, labels, m, seed, threads);
}

}  // namespace icl
