#pragma once

#include "icl/datagen.hpp"
#include "icl/nets.hpp"
#include "icl/train.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace icl {

inline constexpr const char* kMetricsSchema = "# icl-lab metrics v1";

struct EvalReport {
  double pure_label_loss = 0.0;  // cross-entropy against ybar on clean data
  double p_correct = 0.0;
  double p_noise = 0.0;
  double accuracy = 0.0;        // argmax == ybar
  double noise_argmax = 0.0;    // argmax == tau
  double ff2_margin = 0.0;      // NaN when the last layer has no feed-forward
  int count = 0;
};

// Clean (alpha = 0) test stream of m_test sequences from streams (seed, i).
EvalReport evaluate(const Transformer& m, const TaskSpec& spec, TaskKind task, int m_test,
                    std::uint64_t seed);
// Same statistics on a given batch (labels ignored; ybar is the target).
EvalReport evaluate_on(const Transformer& m, const std::vector<TokenSequence>& batch);

// [W_U F_L(W_E(q))]_tau - max_{k<N} [...] for the last layer's feed-forward.
double ff_margin(const Transformer& m, int q);

struct AttnMap {
  int layer = 0;  // 0-based
  int query = 0;  // 0-based query position (T-1)
  std::vector<double> scores;
  std::vector<int> prev;  // z_{t-1}, -1 at t = 0
  std::vector<int> cur;
};

AttnMap attention_map(const Transformer& m, const TokenSequence& s, int layer);

struct TriggerMass {
  double correct = 0.0;  // positions with z_{t-1} in Q, z_t = ybar
  double noise = 0.0;    // positions with z_{t-1} in Q, z_t = tau
  int n_correct = 0;
  int n_noise = 0;
};
TriggerMass trigger_mass(const AttnMap& a, const TaskSpec& spec, int ybar);

enum class Probe { Ff2Noise, Wv2Signal, QkMatch };
Probe parse_probe(const std::string& s);
std::string to_string(Probe p);

// (N+1) x (N+1) grid indexed [i][j]:
//   ff2_noise  <F_L(W_E(i)), W_U(j)>
//   wv2_signal <V_L W_E(i), W_U(j)>
//   qk_match   W_E(j)^T W_QK^L (V_1 W_E(i)), query token j against a key carrying i.
Matrix memory_probe(const Transformer& m, Probe p);

// ---- experiment runner ----

struct LaserSpec {
  std::string matrix;
  std::vector<double> rhos;
};

struct ExperimentConfig {
  std::string name;
  std::string kind = "transformer";  // or "assocmem"
  nlohmann::json raw;                // the parsed file, echoed into the manifest

  // transformer pipeline
  TaskKind task = TaskKind::Recall;
  int N = 32;
  int T = 64;
  std::vector<int> triggers{0};
  std::string corpus;  // optional path; switches pi_u, pi_b to corpus estimates
  ModelConfig model;
  TrainConfig train;
  std::vector<double> lr_sweep;  // empty: train.opt.lr only
  int m_test = 512;
  std::uint64_t test_seed = 999;
  std::vector<LaserSpec> laser;
  int attn_count = 0;  // attention maps to write
  double attn_alpha = -1.0;  // alpha for attention sequences; <0 means last phase alpha
  std::vector<Probe> probes;
  bool save_checkpoint = true;

  // assocmem pipeline
  int am_n = 3;
  int am_d = 12;
  double am_alpha = 0.03;
  double am_lr = 0.05;
  std::string am_mode = "random";
  int am_seeds = 20;
  long am_max_steps = 1000000;
  long am_record_every = 1000;
  std::uint64_t am_seed = 0;
};

// Throws std::invalid_argument naming the offending field.
ExperimentConfig parse_experiment(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::string& path);

TaskSpec experiment_task(const ExperimentConfig& cfg);

struct ExperimentResult {
  std::string out_dir;
  nlohmann::json report;
};

// Writes metrics.csv, attn_*.csv, probes_*.csv, report.json and manifest.json
// under out_dir. On failure the partial directory is moved under
// out_dir/failed/ and the error is rethrown prefixed with the stage name.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

std::string config_hash(const nlohmann::json& j);
std::string git_describe();

}  // namespace icl
