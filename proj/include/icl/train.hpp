#pragma once

#include "icl/datagen.hpp"
#include "icl/nets.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace icl {

// Sequences per gradient chunk. Chunk sums are reduced in index order, so
// results do not depend on the thread count.
inline constexpr int kGradChunk = 64;

struct LossGrad {
  double loss = 0.0;  // mean cross-entropy at the final position
  TransformerParams grad;
};

struct SimplifiedLossGrad {
  double loss = 0.0;
  SimplifiedParams grad;
};

LossGrad backward(const Transformer& m, const std::vector<TokenSequence>& batch, int threads = 1);
SimplifiedLossGrad backward(const Simplified& m, const std::vector<TokenSequence>& batch,
                            int threads = 1);

// Mean loss only.
double mean_loss(const Transformer& m, const std::vector<TokenSequence>& batch);
double mean_loss(const Simplified& m, const std::vector<TokenSequence>& batch);

enum class OptKind { Sgd, Adam };

struct OptimizerConfig {
  OptKind kind = OptKind::Sgd;
  double lr = 0.03;
  double momentum = 0.0;  // SGD heavy ball: buf = momentum buf + g, w -= lr buf
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::map<std::string, double> lr_overrides;  // matrix name -> lr
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(std::move(cfg)) {}
  void step(const std::vector<NamedMatrix>& params, const std::vector<ConstNamedMatrix>& grads);
  const OptimizerConfig& config() const { return cfg_; }
  int steps_taken() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  int t_ = 0;
};

// From exact zero: W_F = -eta_f grad W_F, W_V = -eta_v grad W_V; W_QK keeps its
// zero gradient. Throws std::invalid_argument if any weight is non-zero.
Simplified one_step(const Simplified& m, const std::vector<TokenSequence>& data, double eta_f,
                    double eta_v);

struct Phase {
  int steps = 0;
  double alpha = 0.0;
};

enum class TaskKind { Recall, Ioi };

struct TrainConfig {
  OptimizerConfig opt;
  int batch_size = 256;
  std::vector<Phase> phases;
  int eval_every = 0;  // 0 disables the metric sink
  std::uint64_t seed = 0;
  int threads = 1;
  TaskKind task = TaskKind::Recall;

  int total_steps() const;
  void validate() const;
};

struct StepInfo {
  int step = 0;  // completed optimizer steps
  int phase = 0;
  double alpha = 0.0;
  double loss = 0.0;  // training loss of the latest batch (NaN before the first step)
};

using TransformerSink = std::function<void(const StepInfo&, const Transformer&)>;
using SimplifiedSink = std::function<void(const StepInfo&, const Simplified&)>;

// Phases run in order with fresh batches each step; the sink fires at step 0,
// every eval_every steps, and after the last step. Throws NumericError on a
// non-finite loss, naming the step.
void fit(Transformer& m, const TaskSpec& spec, const TrainConfig& cfg, const TransformerSink& sink = {});
void fit(Simplified& m, const TaskSpec& spec, const TrainConfig& cfg, const SimplifiedSink& sink = {});

// Batch drawn at a given step, so evaluation code can reproduce training data.
std::vector<TokenSequence> training_batch(const TaskSpec& spec, const TrainConfig& cfg, int step,
                                          double alpha);

}  // namespace icl
