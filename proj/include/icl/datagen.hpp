#pragma once

#include "icl/linalg.hpp"
#include "icl/rng.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace icl {

// Tokens are 0-based: 0..N-1 are ordinary, N is the noise token tau.
struct TaskSpec {
  int N = 0;
  std::vector<int> triggers;  // sorted, non-empty, each in [0, N)
  double alpha = 0.0;
  int T = 0;
  std::vector<double> pi_u;  // length N
  Matrix pi_b;               // N x N, row-stochastic
  bool uniform = true;       // pi_u, pi_b uniform; enables the fast path

  int tau() const { return N; }
  int vocab() const { return N + 1; }
  bool is_trigger(int tok) const;

  // Throws std::invalid_argument naming the violated invariant.
  void validate() const;
  // Rebuilds sampling tables; call after editing pi_u / pi_b.
  void prepare();

  std::vector<Categorical> row_samplers;
  Categorical unigram_sampler;
};

TaskSpec uniform_task(int N, int T, double alpha, std::vector<int> triggers = {0});

struct BigramModel {
  std::vector<double> pi_u;
  Matrix pi_b;
  std::string charset;  // token id -> byte
};

// Character-level counts with add-one smoothing.
BigramModel estimate_bigrams(std::string_view text);
TaskSpec corpus_task(const BigramModel& model, int T, double alpha, std::vector<int> triggers = {0});

struct TokenSequence {
  std::vector<int> z;
  int y = 0;
  int ybar = 0;
};

struct IoiSequence {
  std::vector<int> z;
  int y = 0;
  int ybar = 0;
  int ydist = 0;
  std::array<int, 3> pos{};  // 0-based trigger positions, ascending
};

struct AssocSample {
  int x = 0;
  int y = 0;  // x, or n for the noise output
};

TokenSequence sample_recall(const TaskSpec& spec, Rng& rng);
// Same process with the correct token fixed.
TokenSequence sample_recall_given(const TaskSpec& spec, int ybar, Rng& rng);
IoiSequence sample_ioi(const TaskSpec& spec, Rng& rng);
AssocSample sample_assoc(int n, double alpha, Rng& rng);

// Sequence i of a batch uses stream (seed, first + i).
std::vector<TokenSequence> recall_batch(const TaskSpec& spec, std::uint64_t seed,
                                        std::uint64_t first, int count);
std::vector<TokenSequence> ioi_batch(const TaskSpec& spec, std::uint64_t seed,
                                     std::uint64_t first, int count);

// Drops IOI bookkeeping so both tasks feed the same model code.
TokenSequence as_sequence(const IoiSequence& s);

}  // namespace icl
