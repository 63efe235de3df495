#include "icl/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace icl {

Categorical::Categorical(const std::vector<double>& probs) {
  cdf_.resize(probs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    cdf_[i] = acc;
  }
  if (!cdf_.empty()) {
    for (auto& c : cdf_) c /= acc;
    cdf_.back() = 1.0;
  }
}

int Categorical::operator()(Rng& rng) const {
  const double u = uniform01(rng);
  auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  if (it == cdf_.end()) --it;
  return static_cast<int>(it - cdf_.begin());
}

bool TaskSpec::is_trigger(int tok) const {
  return std::binary_search(triggers.begin(), triggers.end(), tok);
}

void TaskSpec::validate() const {
  if (N < 1) throw std::invalid_argument("task: N must be >= 1");
  if (T < 2) throw std::invalid_argument("task: T must be >= 2");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("task: alpha outside [0,1]");
  if (triggers.empty()) throw std::invalid_argument("task: trigger set is empty");
  if (!std::is_sorted(triggers.begin(), triggers.end()) ||
      std::adjacent_find(triggers.begin(), triggers.end()) != triggers.end())
    throw std::invalid_argument("task: triggers must be sorted and distinct");
  for (int q : triggers)
    if (q < 0 || q >= N) throw std::invalid_argument("task: trigger outside vocabulary");
  if (static_cast<int>(pi_u.size()) != N) throw std::invalid_argument("task: pi_u length != N");
  double s = 0.0;
  for (double p : pi_u) {
    if (!(p >= 0.0)) throw std::invalid_argument("task: negative pi_u entry");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument("task: pi_u does not sum to 1");
  if (pi_b.rows() != N || pi_b.cols() != N) throw std::invalid_argument("task: pi_b must be N x N");
  for (int i = 0; i < N; ++i) {
    if ((pi_b.row(i).array() < 0.0).any()) throw std::invalid_argument("task: negative pi_b entry");
    if (std::abs(pi_b.row(i).sum() - 1.0) > 1e-12)
      throw std::invalid_argument("task: pi_b row " + std::to_string(i) + " does not sum to 1");
  }
}

void TaskSpec::prepare() {
  validate();
  unigram_sampler = Categorical(pi_u);
  row_samplers.clear();
  if (uniform) return;
  row_samplers.reserve(N);
  for (int i = 0; i < N; ++i) {
    std::vector<double> row(pi_b.row(i).data(), pi_b.row(i).data() + N);
    row_samplers.emplace_back(row);
  }
}

TaskSpec uniform_task(int N, int T, double alpha, std::vector<int> triggers) {
  TaskSpec s;
  s.N = N;
  s.T = T;
  s.alpha = alpha;
  std::sort(triggers.begin(), triggers.end());
  s.triggers = std::move(triggers);
  s.pi_u.assign(N, 1.0 / N);
  s.pi_b = Matrix::Constant(N, N, 1.0 / N);
  s.uniform = true;
  s.prepare();
  return s;
}

BigramModel estimate_bigrams(std::string_view text) {
  if (text.empty()) throw std::invalid_argument("estimate_bigrams: empty corpus");
  bool seen[256] = {};
  for (unsigned char c : text) seen[c] = true;
  BigramModel m;
  int id[256];
  for (int c = 0; c < 256; ++c) {
    id[c] = -1;
    if (seen[c]) {
      id[c] = static_cast<int>(m.charset.size());
      m.charset.push_back(static_cast<char>(c));
    }
  }
  const int n = static_cast<int>(m.charset.size());
  std::vector<double> uni(n, 1.0);
  Matrix bi = Matrix::Ones(n, n);
  for (std::size_t i = 0; i < text.size(); ++i) {
    const int a = id[static_cast<unsigned char>(text[i])];
    uni[a] += 1.0;
    if (i + 1 < text.size()) bi(a, id[static_cast<unsigned char>(text[i + 1])]) += 1.0;
  }
  double total = 0.0;
  for (double u : uni) total += u;
  for (double& u : uni) u /= total;
  for (int i = 0; i < n; ++i) bi.row(i) /= bi.row(i).sum();
  m.pi_u = std::move(uni);
  m.pi_b = std::move(bi);
  return m;
}

TaskSpec corpus_task(const BigramModel& model, int T, double alpha, std::vector<int> triggers) {
  TaskSpec s;
  s.N = static_cast<int>(model.charset.size());
  s.T = T;
  s.alpha = alpha;
  std::sort(triggers.begin(), triggers.end());
  s.triggers = std::move(triggers);
  s.pi_u = model.pi_u;
  s.pi_b = model.pi_b;
  s.uniform = false;
  s.prepare();
  return s;
}

namespace {

int draw_unigram(const TaskSpec& spec, Rng& rng) {
  return spec.uniform ? uniform_int(rng, 0, spec.N - 1) : spec.unigram_sampler(rng);
}

// The successor of tau is drawn from pi_u (pi_b has no tau row).
int draw_successor(const TaskSpec& spec, int prev, Rng& rng) {
  if (spec.uniform || prev == spec.tau()) return draw_unigram(spec, rng);
  return spec.row_samplers[prev](rng);
}

int draw_trigger(const TaskSpec& spec, Rng& rng) {
  const int n = static_cast<int>(spec.triggers.size());
  return n == 1 ? spec.triggers[0] : spec.triggers[uniform_int(rng, 0, n - 1)];
}

int noisy_label(const TaskSpec& spec, int ybar, Rng& rng) {
  return uniform01(rng) < spec.alpha ? spec.tau() : ybar;
}

}  // namespace

TokenSequence sample_recall_given(const TaskSpec& spec, int ybar, Rng& rng) {
  TokenSequence s;
  s.ybar = ybar;
  s.z.resize(spec.T);
  s.z[0] = draw_unigram(spec, rng);
  for (int t = 0; t + 1 < spec.T - 1; ++t) {
    const int cur = s.z[t];
    s.z[t + 1] = spec.is_trigger(cur) ? noisy_label(spec, ybar, rng) : draw_successor(spec, cur, rng);
  }
  s.z[spec.T - 1] = draw_trigger(spec, rng);
  s.y = noisy_label(spec, ybar, rng);
  return s;
}

TokenSequence sample_recall(const TaskSpec& spec, Rng& rng) {
  const int ybar = uniform_int(rng, 0, spec.N - 1);
  return sample_recall_given(spec, ybar, rng);
}

IoiSequence sample_ioi(const TaskSpec& spec, Rng& rng) {
  const int T = spec.T;
  if (T < 12) throw std::invalid_argument("sample_ioi: T must be >= 12");
  std::vector<int> plain;  // [N] minus triggers
  for (int k = 0; k < spec.N; ++k)
    if (!spec.is_trigger(k)) plain.push_back(k);
  if (plain.size() < 2) throw std::invalid_argument("sample_ioi: need two non-trigger tokens");

  IoiSequence s;
  const int np = static_cast<int>(plain.size());
  s.ybar = plain[uniform_int(rng, 0, np - 1)];
  do {
    s.ydist = plain[uniform_int(rng, 0, np - 1)];
  } while (s.ydist == s.ybar);

  // Positions 0..T-3 (the first T-2 slots); successors stay below T-1.
  constexpr int kMaxRejections = 10000;
  int attempts = 0;
  for (;;) {
    for (auto& p : s.pos) p = uniform_int(rng, 0, T - 3);
    std::sort(s.pos.begin(), s.pos.end());
    if (s.pos[1] - s.pos[0] >= 2 && s.pos[2] - s.pos[1] >= 2) break;
    if (++attempts > kMaxRejections)
      throw std::runtime_error("sample_ioi: index rejection cap exceeded");
  }

  s.z.assign(T, -1);
  const int pick = uniform_int(rng, 0, 2);
  for (int k = 0; k < 3; ++k) {
    s.z[s.pos[k]] = draw_trigger(spec, rng);
    s.z[s.pos[k] + 1] = (k == pick) ? s.ybar : s.ydist;
  }
  s.z[T - 1] = draw_trigger(spec, rng);

  // Filler alphabet: the full vocabulary (tau included) minus triggers.
  plain.push_back(spec.tau());
  const int nf = static_cast<int>(plain.size());
  for (int t = 0; t < T; ++t)
    if (s.z[t] < 0) s.z[t] = plain[uniform_int(rng, 0, nf - 1)];
  s.y = noisy_label(spec, s.ybar, rng);
  return s;
}

AssocSample sample_assoc(int n, double alpha, Rng& rng) {
  AssocSample a;
  a.x = uniform_int(rng, 0, n - 1);
  a.y = uniform01(rng) < alpha ? n : a.x;
  return a;
}

std::vector<TokenSequence> recall_batch(const TaskSpec& spec, std::uint64_t seed,
                                        std::uint64_t first, int count) {
  std::vector<TokenSequence> out(count);
  for (int i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, first + i);
    out[i] = sample_recall(spec, rng);
  }
  return out;
}

TokenSequence as_sequence(const IoiSequence& s) {
  TokenSequence t;
  t.z = s.z;
  t.y = s.y;
  t.ybar = s.ybar;
  return t;
}

std::vector<TokenSequence> ioi_batch(const TaskSpec& spec, std::uint64_t seed,
                                     std::uint64_t first, int count) {
  std::vector<TokenSequence> out(count);
  for (int i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, first + i);
    out[i] = as_sequence(sample_ioi(spec, rng));
  }
  return out;
}

}  // namespace icl
