#include "icl/assocmem.hpp"

#include "icl/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace icl {

namespace {

Matrix gaussian(int rows, int cols, double sd, Rng& rng) {
  std::normal_distribution<double> g(0.0, sd);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

Vector target(const AssocMemState& s, int i) {
  Vector t = Vector::Zero(s.n + 1);
  t[i] += 1.0 - s.alpha;
  t[s.n] += s.alpha;
  return t;
}

}  // namespace

AssocMemState assoc_init(int n, int d, double alpha, double lr, AssocEmbed mode, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("assocmem: n must be >= 1");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("assocmem: alpha outside [0,1]");
  if (!(lr > 0.0)) throw std::invalid_argument("assocmem: lr must be > 0");
  AssocMemState s;
  s.n = n;
  s.d = d;
  s.alpha = alpha;
  s.lr = lr;
  Rng rng = make_rng(seed, 0);
  if (mode == AssocEmbed::Orthonormal) {
    if (d < n + 1)
      throw std::invalid_argument("assocmem: orthonormal embeddings need d >= " + std::to_string(n + 1));
    s.E = orthonormalize_rows(gaussian(n, d, 1.0, rng));
    s.U = orthonormalize_rows(gaussian(n + 1, d, 1.0, rng));
    s.W = Matrix::Zero(d, d);
  } else {
    if (d < 1) throw std::invalid_argument("assocmem: d must be >= 1");
    s.E = gaussian(n, d, 1.0, rng);
    s.U = gaussian(n + 1, d, 1.0, rng);
    s.E.rowwise().normalize();
    s.U.rowwise().normalize();
    s.W = gaussian(d, d, 1.0 / std::sqrt(double(d)), rng);
  }
  return s;
}

Vector predict(const AssocMemState& s, const Matrix& W, int i) {
  if (i < 0 || i >= s.n) throw std::invalid_argument("assocmem: input token out of range");
  return softmax(s.U * (W * s.E.row(i).transpose()));
}

Vector predict(const AssocMemState& s, int i, int rank) {
  if (rank <= 0) return predict(s, s.W, i);
  return predict(s, low_rank(s.W, std::min<int>(rank, s.d)), i);
}

double population_loss(const AssocMemState& s, const Matrix& W) {
  double loss = 0.0;
  for (int i = 0; i < s.n; ++i) {
    const Vector p = predict(s, W, i);
    loss -= (1.0 - s.alpha) * std::log(p[i]);
    if (s.alpha > 0.0) loss -= s.alpha * std::log(p[s.n]);
  }
  return loss / s.n;
}

double pure_label_loss(const AssocMemState& s, const Matrix& W) {
  double loss = 0.0;
  for (int i = 0; i < s.n; ++i) loss -= std::log(predict(s, W, i)[i]);
  return loss / s.n;
}

Matrix population_gradient(const AssocMemState& s) {
  Matrix g = Matrix::Zero(s.d, s.d);
  for (int i = 0; i < s.n; ++i) {
    const Vector r = predict(s, s.W, i) - target(s, i);
    g.noalias() += (s.U.transpose() * r) * s.E.row(i);
  }
  return g / s.n;
}

Matrix sampled_gradient(const AssocMemState& s, int m, Rng& rng) {
  if (m < 1) throw std::invalid_argument("assocmem: m must be >= 1");
  // Counts per (input, output) pair suffice: the per-sample term depends on nothing else.
  Matrix counts = Matrix::Zero(s.n, s.n + 1);
  for (int k = 0; k < m; ++k) {
    const AssocSample a = sample_assoc(s.n, s.alpha, rng);
    counts(a.x, a.y) += 1.0;
  }
  Matrix g = Matrix::Zero(s.d, s.d);
  for (int i = 0; i < s.n; ++i) {
    const double ni = counts.row(i).sum();
    if (ni == 0.0) continue;
    const Vector r = ni * predict(s, s.W, i) - counts.row(i).transpose();
    g.noalias() += (s.U.transpose() * r) * s.E.row(i);
  }
  return g / m;
}

void gd_step(AssocMemState& s, int m, Rng* rng) {
  if (m > 0 && rng == nullptr) throw std::invalid_argument("assocmem: sampled step needs a generator");
  const Matrix g = m > 0 ? sampled_gradient(s, m, *rng) : population_gradient(s);
  s.W.noalias() -= s.lr * g;
  require_finite(s.W, "assocmem weights");
  ++s.step;
}

OdeDerivative ode_field(double a, double b, double alpha, OdeField field) {
  const double ea = std::exp(a), eb = std::exp(b);
  const double z = ea + eb + 1.0;
  const double da = (2.0 - 2.0 * ea) / z - 2.0 + 2.0 * alpha;
  const double db = (2.0 - 8.0 * eb) / z - 2.0 + 10.0 * alpha;
  if (field == OdeField::BetaMetric) return {da, db};
  // beta1' = -da/2, beta2' = (da/2 - db)/3, rescaled by 1/||B1||^2 = 1/4 and 1/||B2||^2 = 1/12.
  return {da / 4.0, (da + db) / 12.0};
}

namespace {

struct Ab {
  double a, b;
};

Ab rk4(Ab y, double h, double alpha, OdeField field) {
  auto f = [&](Ab v) { return ode_field(v.a, v.b, alpha, field); };
  const OdeDerivative k1 = f(y);
  const OdeDerivative k2 = f({y.a + 0.5 * h * k1.da, y.b + 0.5 * h * k1.db});
  const OdeDerivative k3 = f({y.a + 0.5 * h * k2.da, y.b + 0.5 * h * k2.db});
  const OdeDerivative k4 = f({y.a + h * k3.da, y.b + h * k3.db});
  return {y.a + h / 6.0 * (k1.da + 2 * k2.da + 2 * k3.da + k4.da),
          y.b + h / 6.0 * (k1.db + 2 * k2.db + 2 * k3.db + k4.db)};
}

}  // namespace

std::vector<OdePoint> ode_integrate(double alpha, const std::vector<double>& times, const OdeOptions& opt) {
  if (!(opt.dt > 0.0)) throw std::invalid_argument("ode: dt must be > 0");
  if (!std::is_sorted(times.begin(), times.end()) || (!times.empty() && times.front() < 0.0))
    throw std::invalid_argument("ode: times must be ascending and non-negative");
  std::vector<OdePoint> out;
  Ab y{0.0, 0.0};
  double t = 0.0, h = opt.dt;
  for (double target : times) {
    while (t < target) {
      const double step = std::min(h, target - t);
      const Ab full = rk4(y, step, alpha, opt.field);
      const Ab half = rk4(rk4(y, 0.5 * step, alpha, opt.field), 0.5 * step, alpha, opt.field);
      const double err = std::max(std::abs(full.a - half.a), std::abs(full.b - half.b));
      if (err > opt.tolerance) {
        h = 0.5 * step;
        if (h < 1e-12) throw NumericError("ode: step size underflow at t=" + std::to_string(t));
        continue;
      }
      y = half;
      t += step;
      if (err < opt.tolerance / 64.0) h = std::min(opt.dt, 2.0 * h);
    }
    out.push_back({target, y.a, y.b});
  }
  return out;
}

double ode_b_limit(double alpha) { return std::log(alpha / (1.0 - alpha)); }

double ode_a_offset_leading(double alpha) { return -std::log((1.0 - alpha) * (4.0 - 2.0 * alpha)); }

double ode_a_offset_corrected(double alpha) {
  // b relaxes to its limit plus a term proportional to e^a, which feeds back into a'.
  const double k = 2.0 * (1.0 - alpha) * (2.0 - alpha) - (1.0 - alpha) * (2.0 - 10.0 * alpha) / 5.0;
  return -std::log(k);
}

Matrix basis_matrix(const AssocMemState& s, int which) {
  if (s.n != 2) throw std::invalid_argument("assocmem: basis decomposition needs n = 2");
  if (which == 1) return (s.U.row(0) - s.U.row(1)).transpose() * (s.E.row(0) - s.E.row(1));
  if (which == 2)
    return (s.U.row(0) + s.U.row(1) - 2.0 * s.U.row(2)).transpose() * (s.E.row(0) + s.E.row(1));
  throw std::invalid_argument("assocmem: basis index must be 1 or 2");
}

BasisCoeffs decompose(const AssocMemState& s) {
  const Matrix b1 = basis_matrix(s, 1), b2 = basis_matrix(s, 2);
  Eigen::Matrix2d g;
  g << b1.cwiseProduct(b1).sum(), b1.cwiseProduct(b2).sum(), b1.cwiseProduct(b2).sum(),
      b2.cwiseProduct(b2).sum();
  const Eigen::Vector2d rhs(s.W.cwiseProduct(b1).sum(), s.W.cwiseProduct(b2).sum());
  const Eigen::Vector2d beta = g.ldlt().solve(rhs);
  BasisCoeffs c;
  c.beta1 = beta[0];
  c.beta2 = beta[1];
  c.a = -2.0 * c.beta1;
  c.b = -c.beta1 - 3.0 * c.beta2;
  c.residual = (s.W - c.beta1 * b1 - c.beta2 * b2).norm();
  return c;
}

AssocRecord record(const AssocMemState& s) {
  AssocRecord r;
  r.step = s.step;
  r.loss = population_loss(s, s.W);
  const SvdFactors f = svd(s.W);
  for (int k = 1; k <= s.n + 1; ++k) {
    const Matrix wk = reconstruct(f, std::min<int>(k, static_cast<int>(f.S.size())));
    r.pure_loss.push_back(pure_label_loss(s, wk));
    double pc = 0.0;
    for (int i = 0; i < s.n; ++i) pc += predict(s, wk, i)[s.n];
    r.noise_prob.push_back(pc / s.n);
  }
  r.pure_full = pure_label_loss(s, s.W);
  for (int i = 0; i < s.n; ++i) r.noise_full += predict(s, s.W, i)[s.n] / s.n;
  r.grad_norm = population_gradient(s).norm();
  if (s.n == 2) r.coeffs = decompose(s);
  return r;
}

AssocRun train_assoc(AssocMemState& s, const AssocRunOptions& opt, std::uint64_t seed) {
  std::set<long> marks;
  if (opt.log_spaced)
    for (int j = 0;; ++j) {
      const long st = std::lround(std::pow(10.0, j / 10.0));
      if (st > opt.max_steps) break;
      marks.insert(st);
    }
  Rng rng = make_rng(seed, 1);
  AssocRun run;
  const long start = s.step;
  for (;;) {
    const long done = s.step - start;
    const bool due = done == 0 || (opt.record_every > 0 && done % opt.record_every == 0) || marks.count(done);
    const Matrix g = population_gradient(s);
    const double gnorm = g.norm();
    const bool stop = gnorm <= opt.grad_tol || done >= opt.max_steps;
    if (due || stop) run.records.push_back(record(s));
    if (stop) {
      run.converged = gnorm <= opt.grad_tol;
      break;
    }
    if (opt.sampled_m > 0) {
      gd_step(s, opt.sampled_m, &rng);
    } else {
      s.W.noalias() -= s.lr * g;
      ++s.step;
    }
  }
  return run;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("loglog_slope: need >= 2 points");
  double mx = 0, my = 0;
  const double n = x.size();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0 && y[i] > 0)) throw std::invalid_argument("loglog_slope: non-positive value");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

}  // namespace icl
