#include "icl/metrics.hpp"

#include "icl/assocmem.hpp"
#include "icl/checkpoint.hpp"
#include "icl/laser.hpp"
#include "icl/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>

namespace icl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kEvalChunk = 256;
const double kNaN = std::numeric_limits<double>::quiet_NaN();

Vector ff_apply(const LayerParams& lp, FfType type, const Vector& u) {
  switch (type) {
    case FfType::Mlp: return lp.u_out * (lp.u_in * u).cwiseMax(0.0);
    case FfType::Linear: return lp.wf * u;
    case FfType::None: break;
  }
  throw std::invalid_argument("feed-forward probe on a layer without feed-forward");
}

std::vector<TokenSequence> test_stream(const TaskSpec& spec, TaskKind task, int count, std::uint64_t seed) {
  return task == TaskKind::Ioi ? ioi_batch(spec, seed, 0, count) : recall_batch(spec, seed, 0, count);
}

}  // namespace

EvalReport evaluate_on(const Transformer& m, const std::vector<TokenSequence>& batch) {
  if (batch.empty()) throw std::invalid_argument("evaluate: empty test set");
  EvalReport r;
  const int tau = m.cfg.N;
  for (std::size_t lo = 0; lo < batch.size(); lo += kEvalChunk) {
    const std::size_t hi = std::min(batch.size(), lo + kEvalChunk);
    const std::vector<TokenSequence> sub(batch.begin() + lo, batch.begin() + hi);
    const ForwardTrace tr = forward(m, sub);
    for (Eigen::Index b = 0; b < tr.logits.rows(); ++b) {
      const Vector p = softmax(tr.logits.row(b).transpose());
      const int ybar = sub[b].ybar;
      r.pure_label_loss -= std::log(std::max(p[ybar], std::numeric_limits<double>::min()));
      r.p_correct += p[ybar];
      r.p_noise += p[tau];
      Eigen::Index am;
      p.maxCoeff(&am);
      r.accuracy += am == ybar;
      r.noise_argmax += am == tau;
    }
  }
  const double n = batch.size();
  r.count = static_cast<int>(batch.size());
  r.pure_label_loss /= n;
  r.p_correct /= n;
  r.p_noise /= n;
  r.accuracy /= n;
  r.noise_argmax /= n;
  return r;
}

double ff_margin(const Transformer& m, int q) {
  const int L = m.cfg.layers;
  const FfType type = m.cfg.ff[L - 1].type;
  if (type == FfType::None) return kNaN;
  const Vector f = ff_apply(m.p.layers[L - 1], type, m.emb.we.row(q).transpose());
  return margin(m.emb.wu * f);
}

EvalReport evaluate(const Transformer& m, const TaskSpec& spec, TaskKind task, int m_test,
                    std::uint64_t seed) {
  if (m_test < 1) throw std::invalid_argument("evaluate: m_test must be >= 1");
  TaskSpec clean = spec;
  clean.alpha = 0.0;
  EvalReport r = evaluate_on(m, test_stream(clean, task, m_test, seed));
  r.ff2_margin = ff_margin(m, spec.triggers.front());
  return r;
}

AttnMap attention_map(const Transformer& m, const TokenSequence& s, int layer) {
  if (layer < 0 || layer >= m.cfg.layers) throw std::invalid_argument("attention_map: no such layer");
  const ForwardTrace tr = forward(m, {s});
  const Vector row = attention_row(tr, layer, 0);
  AttnMap a;
  a.layer = layer;
  a.query = m.cfg.T - 1;
  a.scores.assign(row.data(), row.data() + row.size());
  for (int t = 0; t < m.cfg.T; ++t) {
    a.prev.push_back(t == 0 ? -1 : s.z[t - 1]);
    a.cur.push_back(s.z[t]);
  }
  return a;
}

TriggerMass trigger_mass(const AttnMap& a, const TaskSpec& spec, int ybar) {
  TriggerMass m;
  for (std::size_t t = 0; t < a.scores.size(); ++t) {
    if (a.prev[t] < 0 || !spec.is_trigger(a.prev[t])) continue;
    if (static_cast<int>(t) == a.query) continue;
    if (a.cur[t] == ybar) {
      m.correct += a.scores[t];
      ++m.n_correct;
    } else if (a.cur[t] == spec.tau()) {
      m.noise += a.scores[t];
      ++m.n_noise;
    }
  }
  return m;
}

Probe parse_probe(const std::string& s) {
  if (s == "ff2_noise") return Probe::Ff2Noise;
  if (s == "wv2_signal") return Probe::Wv2Signal;
  if (s == "qk_match") return Probe::QkMatch;
  throw std::invalid_argument("unknown probe '" + s + "' (ff2_noise, wv2_signal, qk_match)");
}

std::string to_string(Probe p) {
  switch (p) {
    case Probe::Ff2Noise: return "ff2_noise";
    case Probe::Wv2Signal: return "wv2_signal";
    case Probe::QkMatch: return "qk_match";
  }
  return "?";
}

Matrix memory_probe(const Transformer& m, Probe p) {
  const int L = m.cfg.layers;
  const LayerParams& last = m.p.layers[L - 1];
  const Matrix& we = m.emb.we;
  const Matrix& wu = m.emb.wu;
  switch (p) {
    case Probe::Ff2Noise: {
      const FfType type = m.cfg.ff[L - 1].type;
      if (type == FfType::None) throw std::invalid_argument("memory_probe: last layer has no feed-forward");
      Matrix g(we.rows(), wu.rows());
      for (Eigen::Index i = 0; i < we.rows(); ++i)
        g.row(i) = (wu * ff_apply(last, type, we.row(i).transpose())).transpose();
      return g;
    }
    case Probe::Wv2Signal:
      return we * value_map(last).transpose() * wu.transpose();
    case Probe::QkMatch: {
      if (L < 2) throw std::invalid_argument("memory_probe: qk_match needs two layers");
      const Matrix keys = we * value_map(m.p.layers[0]).transpose();  // row i: V_1 W_E(i)
      return keys * last.wqk.transpose() * we.transpose();
    }
  }
  return {};
}

// ---- configuration ----

namespace {

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw std::invalid_argument(where + ": unknown field '" + it.key() + "'");
  }
}

template <class T>
T field(const json& j, const char* key, const std::string& where, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument(where + "." + key + ": wrong type");
  }
}

}  // namespace

ExperimentConfig parse_experiment(const json& j) {
  ExperimentConfig c;
  c.raw = j;
  check_keys(j, "config", {"name", "kind", "task", "model", "train", "eval", "save_checkpoint", "assocmem"});
  c.name = field<std::string>(j, "name", "config", "experiment");
  c.kind = field<std::string>(j, "kind", "config", "transformer");
  if (c.kind == "assocmem") {
    const json a = j.value("assocmem", json::object());
    check_keys(a, "assocmem", {"n", "d", "alpha", "lr", "mode", "seeds", "max_steps", "record_every", "seed"});
    c.am_n = field(a, "n", "assocmem", c.am_n);
    c.am_d = field(a, "d", "assocmem", c.am_d);
    c.am_alpha = field(a, "alpha", "assocmem", c.am_alpha);
    c.am_lr = field(a, "lr", "assocmem", c.am_lr);
    c.am_mode = field(a, "mode", "assocmem", c.am_mode);
    c.am_seeds = field(a, "seeds", "assocmem", c.am_seeds);
    c.am_max_steps = field(a, "max_steps", "assocmem", c.am_max_steps);
    c.am_record_every = field(a, "record_every", "assocmem", c.am_record_every);
    c.am_seed = field(a, "seed", "assocmem", c.am_seed);
    if (c.am_mode != "ortho" && c.am_mode != "random")
      throw std::invalid_argument("assocmem.mode: expected ortho or random");
    if (c.am_seeds < 1) throw std::invalid_argument("assocmem.seeds: must be >= 1");
    return c;
  }
  if (c.kind != "transformer") throw std::invalid_argument("config.kind: expected transformer or assocmem");

  const json t = j.value("task", json::object());
  check_keys(t, "task", {"type", "N", "T", "triggers", "corpus"});
  const std::string type = field<std::string>(t, "type", "task", "recall");
  if (type == "recall") c.task = TaskKind::Recall;
  else if (type == "ioi") c.task = TaskKind::Ioi;
  else throw std::invalid_argument("task.type: expected recall or ioi");
  c.N = field(t, "N", "task", c.N);
  c.T = field(t, "T", "task", c.T);
  c.triggers = field(t, "triggers", "task", c.triggers);
  c.corpus = field<std::string>(t, "corpus", "task", "");

  const json m = j.value("model", json::object());
  check_keys(m, "model", {"d", "layers", "ff", "factor_v1", "embed", "init_sigma", "seed"});
  c.model.N = c.N;
  c.model.T = c.T;
  c.model.d = field(m, "d", "model", 128);
  c.model.layers = field(m, "layers", "model", 2);
  const auto ff = field<std::vector<std::string>>(m, "ff", "model", {});
  if (ff.empty()) c.model.ff.assign(c.model.layers, FfKind::mlp());
  for (const auto& f : ff) c.model.ff.push_back(parse_ffkind(f));
  c.model.factor_v1 = field(m, "factor_v1", "model", false);
  c.model.embed = parse_embed_scheme(field<std::string>(m, "embed", "model", "gaussian"));
  c.model.init_sigma = field(m, "init_sigma", "model", 0.0);
  c.model.seed = field<std::uint64_t>(m, "seed", "model", 0);

  const json tr = j.value("train", json::object());
  check_keys(tr, "train", {"optimizer", "lr", "momentum", "lr_sweep", "beta1", "beta2", "eps", "lr_overrides", "batch_size",
                           "phases", "eval_every", "seed", "threads"});
  const std::string opt = field<std::string>(tr, "optimizer", "train", "sgd");
  if (opt == "sgd") c.train.opt.kind = OptKind::Sgd;
  else if (opt == "adam") c.train.opt.kind = OptKind::Adam;
  else throw std::invalid_argument("train.optimizer: expected sgd or adam");
  c.train.opt.lr = field(tr, "lr", "train", c.train.opt.lr);
  c.train.opt.momentum = field(tr, "momentum", "train", c.train.opt.momentum);
  c.lr_sweep = field(tr, "lr_sweep", "train", c.lr_sweep);
  c.train.opt.beta1 = field(tr, "beta1", "train", c.train.opt.beta1);
  c.train.opt.beta2 = field(tr, "beta2", "train", c.train.opt.beta2);
  c.train.opt.eps = field(tr, "eps", "train", c.train.opt.eps);
  c.train.opt.lr_overrides = field(tr, "lr_overrides", "train", c.train.opt.lr_overrides);
  c.train.batch_size = field(tr, "batch_size", "train", c.train.batch_size);
  if (tr.contains("phases")) {
    for (const auto& p : tr.at("phases")) {
      check_keys(p, "train.phases[]", {"steps", "alpha"});
      c.train.phases.push_back({field(p, "steps", "train.phases[]", 0), field(p, "alpha", "train.phases[]", 0.0)});
    }
  } else {
    c.train.phases.push_back({1000, 0.5});
  }
  c.train.eval_every = field(tr, "eval_every", "train", 100);
  c.train.seed = field<std::uint64_t>(tr, "seed", "train", 0);
  c.train.threads = field(tr, "threads", "train", 1);
  c.train.task = c.task;

  const json e = j.value("eval", json::object());
  check_keys(e, "eval", {"m_test", "seed", "laser", "attn_count", "attn_alpha", "probes"});
  c.m_test = field(e, "m_test", "eval", c.m_test);
  c.test_seed = field<std::uint64_t>(e, "seed", "eval", c.test_seed);
  if (e.contains("laser")) {
    for (const auto& l : e.at("laser")) {
      check_keys(l, "eval.laser[]", {"matrix", "rhos"});
      c.laser.push_back({field<std::string>(l, "matrix", "eval.laser[]", ""),
                         field<std::vector<double>>(l, "rhos", "eval.laser[]", {})});
    }
  }
  c.attn_count = field(e, "attn_count", "eval", 0);
  c.attn_alpha = field(e, "attn_alpha", "eval", -1.0);
  for (const auto& p : field<std::vector<std::string>>(e, "probes", "eval", {})) c.probes.push_back(parse_probe(p));
  c.save_checkpoint = field(j, "save_checkpoint", "config", true);

  c.model.validate();
  c.train.validate();
  for (double lr : c.lr_sweep)
    if (!(lr > 0.0)) throw std::invalid_argument("train.lr_sweep: learning rates must be > 0");
  if (c.m_test < 1) throw std::invalid_argument("eval.m_test: must be >= 1");
  for (const auto& l : c.laser)
    for (double r : l.rhos)
      if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("eval.laser[].rhos: outside [0,1]");
  return c;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::invalid_argument("malformed config " + path + ": " + e.what());
  }
  return parse_experiment(j);
}

TaskSpec experiment_task(const ExperimentConfig& cfg) {
  const double alpha = cfg.train.phases.empty() ? 0.0 : cfg.train.phases.back().alpha;
  if (cfg.corpus.empty()) return uniform_task(cfg.N, cfg.T, alpha, cfg.triggers);
  std::ifstream in(cfg.corpus, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot read corpus " + cfg.corpus);
  std::stringstream ss;
  ss << in.rdbuf();
  const BigramModel bm = estimate_bigrams(ss.str());
  if (static_cast<int>(bm.pi_u.size()) != cfg.N)
    throw std::invalid_argument("task.N must equal the corpus charset size (" + std::to_string(bm.pi_u.size()) + ")");
  return corpus_task(bm, cfg.T, alpha, cfg.triggers);
}

std::string config_hash(const json& j) {
  // FNV-1a over the canonical dump (keys are sorted by nlohmann::json).
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string git_describe() {
#ifdef ICL_SOURCE_DIR
  const std::string cmd = std::string("git -C \"") + ICL_SOURCE_DIR + "\" describe --always --dirty 2>/dev/null";
  std::unique_ptr<FILE, int (*)(FILE*)> p(popen(cmd.c_str(), "r"), pclose);
  if (p) {
    char buf[256];
    std::string out;
    while (fgets(buf, sizeof buf, p.get())) out += buf;
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    if (!out.empty()) return out;
  }
#endif
  return "unknown";
}

// ---- runner ----

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

json to_json(const EvalReport& r) {
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  return {{"pure_label_loss", num(r.pure_label_loss)}, {"p_correct", num(r.p_correct)},
          {"p_noise", num(r.p_noise)},                 {"accuracy", num(r.accuracy)},
          {"noise_argmax", num(r.noise_argmax)},       {"ff2_margin", num(r.ff2_margin)},
          {"count", r.count}};
}

std::string lr_tag(double lr) {
  std::ostringstream os;
  os << "lr_" << lr;
  return os.str();
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << "\n";
}

struct Stage {
  std::string name = "setup";
};

struct TrainedRun {
  double lr = 0.0;
  Transformer model;
  json curve = json::array();  // per eval point
  double selection_loss = 0.0;
  long first_positive_margin = -1;
};

// Trains one model, writing metrics rows (one per eval step and rho) to `csv`.
TrainedRun train_one(const ExperimentConfig& cfg, const TaskSpec& spec, double lr, std::ostream& csv) {
  TrainedRun run;
  run.lr = lr;
  run.model = build_transformer(cfg.model);
  TrainConfig tc = cfg.train;
  tc.opt.lr = lr;
  const LaserSpec track = cfg.laser.empty() ? LaserSpec{"", {1.0}} : cfg.laser.front();
  const int q = spec.triggers.front();
  TaskSpec clean = spec;
  clean.alpha = 0.0;
  const auto test = test_stream(clean, cfg.task, cfg.m_test, cfg.test_seed);
  auto sink = [&](const StepInfo& si, const Transformer& m) {
    json point = {{"step", si.step}, {"phase", si.phase}, {"alpha", si.alpha},
                  {"train_loss", std::isnan(si.loss) ? json(nullptr) : json(si.loss)}};
    json rows = json::array();
    for (double rho : track.rhos) {
      const Transformer cut = track.matrix.empty() || rho >= 1.0 ? m : apply_laser(m, {track.matrix, rho});
      EvalReport r = evaluate_on(cut, test);
      r.ff2_margin = ff_margin(cut, q);
      csv << si.step << ',' << si.phase << ',' << fmt(si.alpha) << ',' << fmt(si.loss) << ','
          << (track.matrix.empty() ? "-" : track.matrix) << ',' << fmt(rho) << ',' << fmt(r.pure_label_loss)
          << ',' << fmt(r.p_correct) << ',' << fmt(r.p_noise) << ',' << fmt(r.accuracy) << ','
          << fmt(r.noise_argmax) << ',' << fmt(r.ff2_margin) << '\n';
      json row = to_json(r);
      row["rho"] = rho;
      rows.push_back(row);
    }
    csv.flush();
    point["rows"] = rows;
    const double full_margin = ff_margin(m, q);
    point["ff2_margin"] = std::isnan(full_margin) ? json(nullptr) : json(full_margin);
    if (run.first_positive_margin < 0 && full_margin > 0.0) run.first_positive_margin = si.step;
    run.curve.push_back(point);
  };
  fit(run.model, spec, tc, sink);
  // Selection criterion: loss on fresh sequences from the final training distribution.
  const auto sel = test_stream(spec, cfg.task, cfg.m_test, cfg.test_seed + 2);
  run.selection_loss = mean_loss(run.model, sel);
  return run;
}

void write_metrics_header(std::ostream& os) {
  os << kMetricsSchema << "\n"
     << "step,phase,alpha,train_loss,matrix,rho,pure_label_loss,p_correct,p_noise,accuracy,noise_argmax,"
        "ff2_margin\n";
}

json run_transformer(const ExperimentConfig& cfg, const fs::path& out, Stage& stage) {
  stage.name = "datagen";
  const TaskSpec spec = experiment_task(cfg);
  json report = {{"name", cfg.name}, {"kind", "transformer"}};

  stage.name = "train";
  std::vector<double> lrs = cfg.lr_sweep.empty() ? std::vector<double>{cfg.train.opt.lr} : cfg.lr_sweep;
  std::unique_ptr<TrainedRun> best;
  json sweep = json::array();
  for (double lr : lrs) {
    const fs::path dir = lrs.size() > 1 ? out / lr_tag(lr) : out;
    fs::create_directories(dir);
    std::ofstream csv(dir / "metrics.csv");
    write_metrics_header(csv);
    auto run = std::make_unique<TrainedRun>(train_one(cfg, spec, lr, csv));
    sweep.push_back({{"lr", lr}, {"selection_loss", run->selection_loss}, {"dir", dir.filename().string()},
                     {"first_positive_ff2_margin_step", run->first_positive_margin}, {"curve", run->curve}});
    if (!best || run->selection_loss < best->selection_loss) best = std::move(run);
  }
  if (lrs.size() > 1) fs::copy_file(out / lr_tag(best->lr) / "metrics.csv", out / "metrics.csv",
                                    fs::copy_options::overwrite_existing);
  report["lr_sweep"] = sweep;
  report["selected_lr"] = best->lr;
  report["total_steps"] = cfg.train.total_steps();
  report["first_positive_ff2_margin_step"] = best->first_positive_margin;
  const Transformer& model = best->model;
  if (cfg.save_checkpoint) save_checkpoint((out / "checkpoint").string(), model, cfg.train.total_steps());

  stage.name = "evaluate";
  report["final"] = to_json(evaluate(model, spec, cfg.task, cfg.m_test, cfg.test_seed));

  stage.name = "laser";
  json laser = json::array();
  for (const auto& l : cfg.laser) {
    const int q = spec.triggers.front();
    TaskSpec clean = spec;
    clean.alpha = 0.0;
    const auto test = test_stream(clean, cfg.task, cfg.m_test, cfg.test_seed);
    const auto rows = rank_sweep(model, l.matrix, l.rhos, [&](const Transformer& cut) {
      const EvalReport r = evaluate_on(cut, test);
      return Metrics{{"pure_label_loss", r.pure_label_loss}, {"p_correct", r.p_correct},
                     {"p_noise", r.p_noise},                 {"accuracy", r.accuracy},
                     {"noise_argmax", r.noise_argmax},       {"ff2_margin", ff_margin(cut, q)}};
    });
    std::string stem = l.matrix;
    std::replace(stem.begin(), stem.end(), '.', '_');
    const std::string fname = "sweep_" + stem + ".csv";
    std::ofstream csv(out / fname);
    csv << kMetricsSchema << "\nrho,rank,pure_label_loss,p_correct,p_noise,accuracy,noise_argmax,ff2_margin,error\n";
    json jrows = json::array();
    for (const auto& r : rows) {
      auto get = [&](const char* k) { auto it = r.metrics.find(k); return it == r.metrics.end() ? kNaN : it->second; };
      csv << fmt(r.rho) << ',' << r.rank << ',' << fmt(get("pure_label_loss")) << ',' << fmt(get("p_correct")) << ','
          << fmt(get("p_noise")) << ',' << fmt(get("accuracy")) << ',' << fmt(get("noise_argmax")) << ','
          << fmt(get("ff2_margin")) << ',' << r.error << '\n';
      json jr = {{"rho", r.rho}, {"rank", r.rank}, {"error", r.error}};
      for (const auto& [k, v] : r.metrics) jr[k] = std::isnan(v) ? json(nullptr) : json(v);
      jrows.push_back(jr);
    }
    laser.push_back({{"matrix", l.matrix}, {"rows", jrows}});
  }
  report["laser"] = laser;

  stage.name = "attention";
  if (cfg.attn_count > 0) {
    TaskSpec aspec = spec;
    if (cfg.attn_alpha >= 0.0) aspec.alpha = cfg.attn_alpha;
    const auto seqs = test_stream(aspec, cfg.task, cfg.attn_count, cfg.test_seed + 1);
    json attn = json::array();
    for (int i = 0; i < cfg.attn_count; ++i) {
      std::ofstream csv(out / ("attn_" + std::to_string(i) + ".csv"));
      csv << "# icl-lab attention v1 ybar=" << seqs[i].ybar << " triggers=";
      for (std::size_t k = 0; k < spec.triggers.size(); ++k) csv << (k ? ";" : "") << spec.triggers[k];
      csv << "\nt,prev,cur";
      for (int l = 0; l < cfg.model.layers; ++l) csv << ",layer" << l + 1;
      csv << '\n';
      std::vector<AttnMap> maps;
      for (int l = 0; l < cfg.model.layers; ++l) maps.push_back(attention_map(model, seqs[i], l));
      for (int t = 0; t < cfg.T; ++t) {
        csv << t << ',' << maps[0].prev[t] << ',' << maps[0].cur[t];
        for (const auto& a : maps) csv << ',' << fmt(a.scores[t]);
        csv << '\n';
      }
      const TriggerMass tm = trigger_mass(maps.back(), spec, seqs[i].ybar);
      attn.push_back({{"index", i}, {"ybar", seqs[i].ybar}, {"mass_correct", tm.correct}, {"mass_noise", tm.noise},
                      {"n_correct", tm.n_correct}, {"n_noise", tm.n_noise}});
    }
    report["attention"] = attn;
  }

  stage.name = "probes";
  json probes = json::array();
  for (Probe p : cfg.probes) {
    const Matrix g = memory_probe(model, p);
    std::ofstream csv(out / ("probes_" + to_string(p) + ".csv"));
    csv << "# icl-lab probe v1 name=" << to_string(p) << "\ni";
    for (Eigen::Index j = 0; j < g.cols(); ++j) csv << ',' << j;
    csv << '\n';
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      csv << i;
      for (Eigen::Index j = 0; j < g.cols(); ++j) csv << ',' << fmt(g(i, j));
      csv << '\n';
    }
    probes.push_back(to_string(p));
  }
  report["probes"] = probes;
  return report;
}

json run_assocmem(const ExperimentConfig& cfg, const fs::path& out, Stage& stage) {
  stage.name = "assocmem";
  const AssocEmbed mode = cfg.am_mode == "ortho" ? AssocEmbed::Orthonormal : AssocEmbed::Random;
  json seeds = json::array();
  int rank2_better = 0;
  for (int k = 0; k < cfg.am_seeds; ++k) {
    const std::uint64_t seed = cfg.am_seed + k;
    AssocMemState s = assoc_init(cfg.am_n, cfg.am_d, cfg.am_alpha, cfg.am_lr, mode, seed);
    AssocRunOptions opt;
    opt.max_steps = cfg.am_max_steps;
    opt.record_every = cfg.am_record_every;
    const AssocRun run = train_assoc(s, opt, seed);
    const fs::path dir = out / ("seed_" + std::to_string(k));
    fs::create_directories(dir);
    std::ofstream csv(dir / "trajectory.csv");
    csv << "# icl-lab assocmem v1\nstep,loss,pure_full";
    for (int r = 1; r <= cfg.am_n + 1; ++r) csv << ",pure_r" << r;
    for (int r = 1; r <= cfg.am_n + 1; ++r) csv << ",noise_r" << r;
    csv << ",beta1,beta2,a,b,residual,grad_norm\n";
    for (const auto& rec : run.records) {
      csv << rec.step << ',' << fmt(rec.loss) << ',' << fmt(rec.pure_full);
      for (double v : rec.pure_loss) csv << ',' << fmt(v);
      for (double v : rec.noise_prob) csv << ',' << fmt(v);
      const bool basis = cfg.am_n == 2;
      csv << ',' << (basis ? fmt(rec.coeffs.beta1) : "nan") << ',' << (basis ? fmt(rec.coeffs.beta2) : "nan") << ','
          << (basis ? fmt(rec.coeffs.a) : "nan") << ',' << (basis ? fmt(rec.coeffs.b) : "nan") << ','
          << (basis ? fmt(rec.coeffs.residual) : "nan") << ',' << fmt(rec.grad_norm) << '\n';
    }
    const AssocRecord& last = run.records.back();
    const double r2 = cfg.am_n >= 2 ? last.pure_loss[1] : kNaN;
    if (r2 < last.pure_full) ++rank2_better;
    seeds.push_back({{"seed", seed}, {"steps", last.step}, {"converged", run.converged},
                     {"pure_full", last.pure_full}, {"pure_by_rank", last.pure_loss}, {"grad_norm", last.grad_norm}});
  }
  return {{"name", cfg.name}, {"kind", "assocmem"}, {"seeds", seeds}, {"rank2_below_full", rank2_better}};
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  const fs::path out(out_dir);
  fs::create_directories(out);
  Stage stage;
  const json manifest = {{"name", cfg.name},
                         {"config", cfg.raw},
                         {"config_hash", config_hash(cfg.raw)},
                         {"git_describe", git_describe()},
                         {"model_seed", cfg.model.seed},
                         {"train_seed", cfg.train.seed},
                         {"test_seed", cfg.test_seed},
                         {"assocmem_seed", cfg.am_seed},
                         {"threads", cfg.train.threads}};
  try {
    write_json(out / "manifest.json", manifest);
    json report = cfg.kind == "assocmem" ? run_assocmem(cfg, out, stage) : run_transformer(cfg, out, stage);
    stage.name = "report";
    report["config_hash"] = manifest["config_hash"];
    write_json(out / "report.json", report);
    return {out.string(), report};
  } catch (const std::exception& e) {
    const fs::path failed = out / "failed";
    std::error_code ec;
    fs::create_directories(failed, ec);
    for (const auto& entry : fs::directory_iterator(out, ec)) {
      if (entry.path() == failed) continue;
      fs::rename(entry.path(), failed / entry.path().filename(), ec);
    }
    std::ofstream(failed / "error.json") << json{{"stage", stage.name}, {"error", e.what()}}.dump(2) << "\n";
    const std::string msg = "stage " + stage.name + ": " + e.what();
    if (dynamic_cast<const NumericError*>(&e)) throw NumericError(msg);
    if (dynamic_cast<const std::invalid_argument*>(&e)) throw std::invalid_argument(msg);
    throw std::runtime_error(msg);
  }
}

}  // namespace icl
