#include "icl/cli.hpp"

#include "icl/checkpoint.hpp"
#include "icl/datagen.hpp"
#include "icl/laser.hpp"
#include "icl/linalg.hpp"
#include "icl/metrics.hpp"
#include "icl/oracles.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>
#include <thread>

namespace icl {

namespace fs = std::filesystem;
using nlohmann::json;

int resolve_threads(int requested, bool deterministic) {
  if (deterministic) return 1;
  int t = requested;
  if (const char* env = std::getenv("ICL_LAB_THREADS")) {
    try {
      t = std::stoi(env);
    } catch (const std::exception&) {
      throw std::invalid_argument("ICL_LAB_THREADS: expected an integer");
    }
  }
  if (t < 0) throw std::invalid_argument("threads: must be >= 0");
  if (t == 0) t = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return t;
}

namespace {

constexpr double kZTolerance = 5.0;
constexpr double kMomentRelTolerance = 0.10;

struct Global {
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
  bool deterministic = false;
  std::string out;
  std::string log_level = "info";

  void info(const std::string& msg) const {
    if (log_level != "quiet") std::cerr << "icl_lab: " << msg << "\n";
  }
};

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

fs::path out_dir(const Global& g, const std::string& fallback) {
  const fs::path p = g.out.empty() ? fs::path(fallback) : fs::path(g.out);
  fs::create_directories(p);
  return p;
}

// ---- gen-data ----

struct GenData {
  std::string task = "recall";
  int n = 32;
  int t = 64;
  double alpha = 0.5;
  int count = 10;
  std::string corpus;
  std::vector<int> triggers{0};
};

TaskSpec make_task(int n, int t, double alpha, const std::vector<int>& triggers, const std::string& corpus) {
  if (corpus.empty()) return uniform_task(n, t, alpha, triggers);
  std::ifstream in(corpus, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot read corpus " + corpus);
  std::stringstream ss;
  ss << in.rdbuf();
  return corpus_task(estimate_bigrams(ss.str()), t, alpha, triggers);
}

void gen_data(const Global& g, const GenData& o) {
  std::ofstream file;
  std::ostream* os = &std::cout;
  if (!g.out.empty()) {
    file.open(out_dir(g, ".") / "data.jsonl");
    if (!file) throw std::runtime_error("cannot write " + g.out + "/data.jsonl");
    os = &file;
  }
  if (o.task == "assoc") {
    for (int i = 0; i < o.count; ++i) {
      Rng rng = make_rng(g.seed, static_cast<std::uint64_t>(i));
      const AssocSample s = sample_assoc(o.n, o.alpha, rng);
      *os << json{{"x", s.x}, {"y", s.y}}.dump() << "\n";
    }
    return;
  }
  const TaskSpec spec = make_task(o.n, o.t, o.alpha, o.triggers, o.corpus);
  for (int i = 0; i < o.count; ++i) {
    Rng rng = make_rng(g.seed, static_cast<std::uint64_t>(i));
    if (o.task == "recall") {
      const TokenSequence s = sample_recall(spec, rng);
      *os << json{{"z", s.z}, {"y", s.y}, {"ybar", s.ybar}}.dump() << "\n";
    } else {
      const IoiSequence s = sample_ioi(spec, rng);
      *os << json{{"z", s.z}, {"y", s.y}, {"ybar", s.ybar}, {"ydist", s.ydist}, {"pos", s.pos}}.dump() << "\n";
    }
  }
}

// ---- config-driven runs ----

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("malformed JSON in " + path + ": " + e.what());
  }
}

// Applies --seed and the thread count to a raw config so the manifest records
// what actually ran.
json apply_globals(json raw, const Global& g) {
  const bool am = raw.value("kind", std::string("transformer")) == "assocmem";
  if (g.seed_set) {
    if (am) {
      raw["assocmem"]["seed"] = g.seed;
    } else {
      raw["model"]["seed"] = g.seed;
      raw["train"]["seed"] = g.seed;
    }
  }
  if (!am) raw["train"]["threads"] = resolve_threads(g.threads, g.deterministic);
  return raw;
}

void print_run(const Global& g, const ExperimentResult& r) {
  g.info("wrote " + r.out_dir);
  std::cout << json{{"out", r.out_dir}, {"report", r.out_dir + "/report.json"}}.dump() << "\n";
}

void run_config(const Global& g, const std::string& path, bool train_only) {
  json raw = apply_globals(read_json(path), g);
  if (train_only && raw.contains("eval")) {
    raw["eval"].erase("probes");
    raw["eval"].erase("attn_count");
  }
  const ExperimentConfig cfg = parse_experiment(raw);
  print_run(g, run_experiment(cfg, out_dir(g, "runs/" + cfg.name).string()));
}

// ---- checkpoint tools ----

struct EvalOpts {
  std::string ckpt;
  std::string task = "recall";
  std::vector<int> triggers{0};
  int m_test = 512;
};

Transformer load_transformer(const std::string& dir) {
  Checkpoint ck = load_checkpoint(dir);
  if (ck.arch != "transformer") throw std::invalid_argument("checkpoint " + dir + " is not a transformer");
  return std::move(ck.transformer);
}

TaskKind parse_task(const std::string& s) {
  if (s == "recall") return TaskKind::Recall;
  if (s == "ioi") return TaskKind::Ioi;
  throw std::invalid_argument("--eval/--task: expected recall or ioi");
}

EvalReport eval_checkpoint(const Transformer& m, const EvalOpts& o, std::uint64_t seed) {
  const TaskSpec spec = uniform_task(m.cfg.N, m.cfg.T, 0.0, o.triggers);
  return evaluate(m, spec, parse_task(o.task), o.m_test, seed);
}

json report_json(const EvalReport& r) {
  return {{"pure_label_loss", num(r.pure_label_loss)}, {"p_correct", num(r.p_correct)},
          {"p_noise", num(r.p_noise)},                 {"accuracy", num(r.accuracy)},
          {"noise_argmax", num(r.noise_argmax)},       {"ff2_margin", num(r.ff2_margin)},
          {"count", r.count}};
}

void laser_cmd(const Global& g, const EvalOpts& o, const std::string& matrix, const std::vector<double>& rhos) {
  const Transformer m = load_transformer(o.ckpt);
  const TaskSpec spec = uniform_task(m.cfg.N, m.cfg.T, 0.0, o.triggers);
  const TaskKind task = parse_task(o.task);
  const auto rows = rank_sweep(m, matrix, rhos, [&](const Transformer& cut) {
    const EvalReport r = evaluate(cut, spec, task, o.m_test, g.seed);
    return Metrics{{"pure_label_loss", r.pure_label_loss}, {"p_correct", r.p_correct},
                   {"p_noise", r.p_noise},                 {"accuracy", r.accuracy},
                   {"noise_argmax", r.noise_argmax},       {"ff2_margin", r.ff2_margin}};
  });
  const fs::path path = out_dir(g, ".") / "sweep.csv";
  std::ofstream csv(path);
  if (!csv) throw std::runtime_error("cannot write " + path.string());
  csv << kMetricsSchema << "\nmatrix,rho,rank,pure_label_loss,p_correct,p_noise,accuracy,noise_argmax,ff2_margin,error\n";
  for (const auto& r : rows) {
    auto get = [&](const char* k) {
      auto it = r.metrics.find(k);
      return it == r.metrics.end() ? std::nan("") : it->second;
    };
    csv << matrix << ',' << fmt(r.rho) << ',' << r.rank << ',' << fmt(get("pure_label_loss")) << ','
        << fmt(get("p_correct")) << ',' << fmt(get("p_noise")) << ',' << fmt(get("accuracy")) << ','
        << fmt(get("noise_argmax")) << ',' << fmt(get("ff2_margin")) << ',' << r.error << '\n';
  }
  g.info("wrote " + path.string());
}

void probe_cmd(const Global& g, const std::string& ckpt, const std::vector<std::string>& names) {
  const Transformer m = load_transformer(ckpt);
  const fs::path dir = out_dir(g, ".");
  for (const auto& name : names) {
    const Probe p = parse_probe(name);
    const Matrix grid = memory_probe(m, p);
    const fs::path path = dir / ("probes_" + to_string(p) + ".csv");
    std::ofstream csv(path);
    csv << "# icl-lab probe v1 name=" << to_string(p) << "\ni";
    for (Eigen::Index j = 0; j < grid.cols(); ++j) csv << ',' << j;
    csv << '\n';
    for (Eigen::Index i = 0; i < grid.rows(); ++i) {
      csv << i;
      for (Eigen::Index j = 0; j < grid.cols(); ++j) csv << ',' << fmt(grid(i, j));
      csv << '\n';
    }
    g.info("wrote " + path.string());
  }
}

// ---- oracle reports ----

struct OracleOpts {
  int n = 64;
  int t = 128;
  double alpha = 0.3;
  int m = 10000;
  double beta1 = 2e-3;
  double beta2 = 1e-3;
  double p_ff = -1.0;  // <0: alpha / 2
  double c = 0.01;  // small enough that attention barely moves p(tau)
};

json z_cell(double emp, const MomentEntry& e, int m) {
  const double z = (emp - e.mu) / std::sqrt(e.sigma2 / m);
  return {{"empirical", emp}, {"mu", e.mu}, {"sigma2", e.sigma2}, {"z", num(z)}, {"pass", std::abs(z) <= kZTolerance}};
}

json oracle_one_step(const OracleOpts& o, std::uint64_t seed, int threads) {
  const TaskSpec spec = uniform_task(o.n, o.t, o.alpha);
  const int q = spec.triggers.front();
  const OneStepEmpirical emp = one_step_gradients(spec, o.m, seed, threads);
  json wf = json::array();
  for (int k = 0; k <= o.n; ++k) {
    json c = z_cell(emp.wf(k, q), wf_moments(k, o.n, o.alpha), o.m);
    c["k"] = k;
    wf.push_back(c);
  }
  json wv = json::array();
  int wv_pass = 0;
  for (const auto& [j, k] : stratified_wv_cells(o.n, q, seed)) {
    json c = z_cell(emp.wv(j, k), wv_moments(j, k, q, o.n, o.t, o.alpha), o.m);
    c["j"] = j;
    c["k"] = k;
    c["case"] = to_string(wv_case(j, k, q, o.n));
    wv_pass += c["pass"].get<bool>();
    wv.push_back(c);
  }
  const OneStepMargins mg = one_step_margins(spec, 1.0, o.m, seed, 100, seed + 1, threads);
  const bool ratio_pass = mg.ratio > o.n / 2.0;
  const bool tau_pass = wf[o.n]["pass"].get<bool>();
  return {{"oracle", "one-step"},
          {"N", o.n}, {"T", o.t}, {"alpha", o.alpha}, {"m", o.m}, {"seed", seed},
          {"wf", wf},
          {"wf_tau_pass", tau_pass},
          {"wv", wv},
          {"wv_pass_count", wv_pass},
          {"max_abs_wqk_grad", emp.max_abs_wqk},
          {"margin_ff", mg.mean_ff},
          {"margin_attn", mg.mean_attn},
          {"margin_ratio", num(mg.ratio)},
          {"margin_ratio_pass", ratio_pass},
          {"pass", tau_pass && wv_pass >= 18 && ratio_pass}};
}

json oracle_moments(const OracleOpts& o, std::uint64_t seed, int threads) {
  const TaskSpec spec = uniform_task(o.n, o.t, o.alpha);
  json cases = json::array();
  bool all = true;
  for (int i = 0; i < kCountCases; ++i) {
    const auto c = static_cast<CountCase>(i);
    const auto [ybar, k] = count_case_tokens(c, spec);
    const CountMoments th = count_moments(c, o.n, o.t, o.alpha);
    const EmpiricalMoments e = empirical_count_moments(spec, ybar, k, o.m, seed, threads);
    const double rel1 = std::abs(e.m1 - th.m1) / std::abs(th.m1);
    const double rel2 = std::abs(e.m2 - th.m2) / std::abs(th.m2);
    const double z1 = (e.m1 - th.m1) / std::sqrt(e.var / o.m);
    const bool pass = rel1 <= kMomentRelTolerance && rel2 <= kMomentRelTolerance;
    all = all && pass;
    cases.push_back({{"case", to_string(c)}, {"ybar", ybar}, {"k", k}, {"m1", th.m1}, {"m2", th.m2},
                     {"empirical_m1", e.m1}, {"empirical_m2", e.m2}, {"rel_err_m1", rel1},
                     {"rel_err_m2", rel2}, {"z_m1", num(z1)}, {"asymptotic_regime", th.asymptotic},
                     {"pass", pass}});
  }
  return {{"oracle", "moments"}, {"N", o.n}, {"T", o.t}, {"alpha", o.alpha}, {"m", o.m}, {"seed", seed},
          {"cases", cases}, {"pass", all}};
}

json oracle_wqk(const OracleOpts& o, std::uint64_t seed, int threads) {
  const TaskSpec spec = uniform_task(o.n, o.t, o.alpha);
  const int q = spec.triggers.front();
  const int other = q == 1 ? 2 : 1;
  const int other2 = other + 1 == q ? other + 2 : other + 1;
  const std::vector<std::pair<int, int>> pairs = {{other, q}, {q, q}, {spec.tau(), q}, {other, other2}};
  const auto emp = wqk_gradient_projections(spec, o.beta1, o.beta2, pairs, o.m, seed, threads);
  json rows = json::array();
  bool all = true;
  std::string warning;
  // Leading-order magnitudes are reported, not asserted; pass means sign and ordering.
  double min_trigger_key = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (pairs[i].second == q) min_trigger_key = std::min(min_trigger_key, emp[i].value);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const WqkProjection th = wqk_projection(pairs[i].first, pairs[i].second, q, o.beta1, o.beta2, o.n, o.alpha);
    warning = th.warning;
    const double z = (emp[i].value - th.value) / emp[i].se;
    bool pass = false;
    std::string kind;
    switch (th.kind) {
      case BoundKind::Exact: pass = emp[i].value > 0.0; kind = "exact"; break;
      case BoundKind::Lower: pass = emp[i].value > 0.0; kind = "lower"; break;
      case BoundKind::Upper: pass = emp[i].value < min_trigger_key; kind = "upper"; break;
    }
    all = all && pass;
    rows.push_back({{"b1", pairs[i].first}, {"b2", pairs[i].second}, {"kind", kind}, {"predicted", th.value},
                    {"empirical", emp[i].value}, {"se", emp[i].se}, {"z", num(z)}, {"pass", pass}});
  }
  const json ordering = {{"correct_minus_noise", emp[0].value - emp[2].value},
                         {"predicted", wqk_projection(other, q, q, o.beta1, o.beta2, o.n, o.alpha).value -
                                           wqk_projection(spec.tau(), q, q, o.beta1, o.beta2, o.n, o.alpha).value},
                         {"holds", emp[0].value > emp[2].value}};
  const double p_ff = o.p_ff < 0.0 ? o.alpha / 2.0 : o.p_ff;
  const EarlySignTable table = early_wqk_signs(o.n, o.alpha, p_ff, o.c);
  const auto early = early_wqk_gradient(spec, p_ff, o.c, o.m, seed, threads);
  json signs = json::array();
  int matched = 0;
  for (int k = 0; k <= o.n; ++k) {
    const int sign = early[k].value > 0 ? 1 : early[k].value < 0 ? -1 : 0;
    matched += sign == table.rows[k].sign;
    signs.push_back({{"k", k}, {"predicted", table.rows[k].value}, {"predicted_sign", table.rows[k].sign},
                     {"empirical", early[k].value}, {"se", early[k].se}, {"sign_match", sign == table.rows[k].sign}});
  }
  all = all && matched == o.n + 1;
  return {{"oracle", "wqk"}, {"N", o.n}, {"T", o.t}, {"alpha", o.alpha}, {"m", o.m}, {"seed", seed},
          {"beta1", o.beta1}, {"beta2", o.beta2}, {"projections", rows}, {"ordering", ordering},
          {"early", {{"p_ff", p_ff}, {"c", o.c}, {"rows", signs}, {"flags", table.flags},
                     {"signs_matched", matched}}},
          {"warning", warning}, {"pass", all}};
}

// ---- assocmem ----

struct AssocOpts {
  int n = 3;
  int d = 12;
  double alpha = 0.03;
  double lr = 0.05;
  long steps = 1000000;
  std::string mode = "random";
  int seeds = 20;
  long record_every = 1000;
};

void assoc_cmd(const Global& g, const AssocOpts& o) {
  json raw = {{"name", "assocmem"},
              {"kind", "assocmem"},
              {"assocmem",
               {{"n", o.n}, {"d", o.d}, {"alpha", o.alpha}, {"lr", o.lr}, {"mode", o.mode}, {"seeds", o.seeds},
                {"max_steps", o.steps}, {"record_every", o.record_every}, {"seed", g.seed}}}};
  const ExperimentConfig cfg = parse_experiment(raw);
  print_run(g, run_experiment(cfg, out_dir(g, "runs/assocmem").string()));
}

// ---- report ----

void report_cmd(const std::string& dir) {
  const json r = read_json((fs::path(dir) / "report.json").string());
  std::cout << "name: " << r.value("name", std::string("?")) << "\n";
  if (r.value("kind", std::string()) == "assocmem") {
    std::cout << "seeds: " << r.at("seeds").size() << "\nrank-2 below full: " << r.at("rank2_below_full") << "\n";
    return;
  }
  std::cout << "selected lr: " << r.at("selected_lr") << "\nsteps: " << r.at("total_steps") << "\n"
            << "first positive ff2 margin step: " << r.at("first_positive_ff2_margin_step") << "\n";
  std::cout << "final:";
  for (const auto& [k, v] : r.at("final").items()) std::cout << " " << k << "=" << v.dump();
  std::cout << "\n";
  for (const auto& l : r.value("laser", json::array())) {
    std::cout << "laser " << l.at("matrix").get<std::string>() << ":\n";
    for (const auto& row : l.at("rows"))
      std::cout << "  rho=" << row.at("rho") << " rank=" << row.at("rank") << " p_correct=" << row.value("p_correct", json())
                << " p_noise=" << row.value("p_noise", json()) << "\n";
  }
}

void print_error(const std::string& kind, const std::string& msg, const std::string& sub) {
  std::cerr << json{{"error", msg}, {"kind", kind}, {"subcommand", sub}}.dump() << "\n";
}

}  // namespace

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"icl_lab: in-context recall versus distributional association experiments"};
  app.require_subcommand(1);
  Global g;
  app.add_option("--seed", g.seed, "Root seed for every random stream")->each([&](const std::string&) {
    g.seed_set = true;
  });
  app.add_option("--threads", g.threads, "Worker threads (0 = auto); ICL_LAB_THREADS overrides");
  app.add_flag("--deterministic", g.deterministic, "Force one thread");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--log-level", g.log_level, "quiet or info")->check(CLI::IsMember({"quiet", "info"}));
  app.fallthrough();

  GenData gd;
  auto* gen = app.add_subcommand("gen-data", "Sample sequences as newline-delimited JSON");
  gen->add_option("--task", gd.task)->check(CLI::IsMember({"recall", "ioi", "assoc"}));
  gen->add_option("--n", gd.n, "Ordinary tokens (assoc: inputs)");
  gen->add_option("--t", gd.t, "Sequence length");
  gen->add_option("--alpha", gd.alpha);
  gen->add_option("--count", gd.count);
  gen->add_option("--corpus", gd.corpus, "Text file whose bigram statistics replace the uniform ones");
  gen->add_option("--triggers", gd.triggers);

  std::string config;
  auto* train = app.add_subcommand("train", "Train from a config; writes checkpoint and metrics.csv");
  train->add_option("--config", config)->required();
  auto* run = app.add_subcommand("run", "Run a full config pipeline");
  run->add_option("config", config)->required();

  EvalOpts eo;
  std::string matrix;
  std::vector<double> rhos;
  auto* laser = app.add_subcommand("laser", "Rank-sweep one matrix of a checkpoint; writes sweep.csv");
  laser->add_option("--ckpt", eo.ckpt)->required();
  laser->add_option("--matrix", matrix)->required();
  laser->add_option("--rho", rhos)->required();
  laser->add_option("--eval", eo.task);
  laser->add_option("--triggers", eo.triggers);
  laser->add_option("--m-test", eo.m_test);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a clean test stream");
  eval->add_option("--ckpt", eo.ckpt)->required();
  eval->add_option("--task", eo.task);
  eval->add_option("--triggers", eo.triggers);
  eval->add_option("--m-test", eo.m_test);

  std::vector<std::string> probes;
  auto* probe = app.add_subcommand("probe", "Write memory-probe grids of a checkpoint");
  probe->add_option("--ckpt", eo.ckpt)->required();
  probe->add_option("--probe", probes, "ff2_noise, wv2_signal, qk_match")->required();

  OracleOpts oo;
  auto* oracle = app.add_subcommand("oracle", "Compare closed-form moments with Monte Carlo");
  oracle->require_subcommand(1);
  std::vector<CLI::App*> oracle_subs;
  for (const char* name : {"one-step", "moments", "wqk"}) {
    auto* s = oracle->add_subcommand(name);
    s->add_option("--n", oo.n);
    s->add_option("--t", oo.t);
    s->add_option("--alpha", oo.alpha);
    s->add_option("--m", oo.m);
    s->fallthrough();
    oracle_subs.push_back(s);
  }
  oracle_subs[2]->add_option("--beta1", oo.beta1);
  oracle_subs[2]->add_option("--beta2", oo.beta2);
  oracle_subs[2]->add_option("--p-ff", oo.p_ff);
  oracle_subs[2]->add_option("--c", oo.c);
  oracle->fallthrough();

  AssocOpts ao;
  auto* assoc = app.add_subcommand("assocmem", "Train noisy associative memories; writes trajectory.csv per seed");
  assoc->add_option("--n", ao.n);
  assoc->add_option("--d", ao.d);
  assoc->add_option("--alpha", ao.alpha);
  assoc->add_option("--lr", ao.lr);
  assoc->add_option("--steps", ao.steps);
  assoc->add_option("--mode", ao.mode)->check(CLI::IsMember({"ortho", "random"}));
  assoc->add_option("--seeds", ao.seeds);
  assoc->add_option("--record-every", ao.record_every);

  std::string run_dir;
  auto* report = app.add_subcommand("report", "Summarize a run directory");
  report->add_option("--run", run_dir)->required();

  for (auto* s : app.get_subcommands({})) s->fallthrough();

  std::string sub = "dispatch";
  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      std::cerr << app.help();
      std::string msg = e.what();
      for (const auto& extra : app.remaining()) msg = "unknown subcommand or argument '" + extra + "'";
      print_error("usage", msg, sub);
      return kExitConfig;
    }
    sub = app.get_subcommands().front()->get_name();
    const int threads = resolve_threads(g.threads, g.deterministic);
    if (*gen) {
      gen_data(g, gd);
    } else if (*train) {
      run_config(g, config, true);
    } else if (*run) {
      run_config(g, config, false);
    } else if (*laser) {
      laser_cmd(g, eo, matrix, rhos);
    } else if (*eval) {
      const EvalReport r = eval_checkpoint(load_transformer(eo.ckpt), eo, g.seed);
      std::cout << report_json(r).dump(2) << "\n";
    } else if (*probe) {
      probe_cmd(g, eo.ckpt, probes);
    } else if (*oracle) {
      const std::string name = oracle->get_subcommands().front()->get_name();
      sub = "oracle " + name;
      json r = name == "one-step" ? oracle_one_step(oo, g.seed, threads)
               : name == "moments" ? oracle_moments(oo, g.seed, threads)
                                   : oracle_wqk(oo, g.seed, threads);
      std::cout << r.dump(2) << "\n";
      if (!g.out.empty()) std::ofstream(out_dir(g, ".") / ("oracle_" + name + ".json")) << r.dump(2) << "\n";
    } else if (*assoc) {
      assoc_cmd(g, ao);
    } else if (*report) {
      report_cmd(run_dir);
    }
    return kExitOk;
  } catch (const NumericError& e) {
    print_error("numeric", e.what(), sub);
    return kExitNumeric;
  } catch (const std::exception& e) {
    print_error("config", e.what(), sub);
    return kExitConfig;
  }
}

}  // namespace icl
