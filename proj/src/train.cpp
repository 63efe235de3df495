#include "icl/train.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <thread>

namespace icl {

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <class Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += threads) fn(i);
    });
  for (auto& th : pool) th.join();
}

// Softmax minus one-hot per row; returns the summed loss.
double logit_grad(const Matrix& logits, const std::vector<TokenSequence>& batch, Matrix& g) {
  g.resize(logits.rows(), logits.cols());
  double loss = 0.0;
  for (Eigen::Index b = 0; b < logits.rows(); ++b) {
    const CrossEntropy ce = cross_entropy(logits.row(b).transpose(), batch[b].y);
    loss += ce.loss;
    g.row(b) = ce.grad.transpose();
  }
  return loss;
}

// Back through x' = u + F(u); returns dL/du.
Matrix ff_backward(const LayerParams& lp, FfType type, const Matrix& u, const Matrix& act,
                   const Matrix& dout, LayerParams& g) {
  switch (type) {
    case FfType::Mlp: {
      g.u_out.noalias() += dout.transpose() * act;
      Matrix dpre = dout * lp.u_out;
      dpre = dpre.cwiseProduct((act.array() > 0.0).cast<double>().matrix());
      g.u_in.noalias() += dpre.transpose() * u;
      Matrix du = dout;
      du.noalias() += dpre * lp.u_in;
      return du;
    }
    case FfType::Linear: {
      g.wf.noalias() += dout.transpose() * u;
      Matrix du = dout;
      du.noalias() += dout * lp.wf;
      return du;
    }
    case FfType::None: break;
  }
  return dout;
}

// Unnormalized (summed) gradient of one chunk.
double chunk_backward(const Transformer& m, const std::vector<TokenSequence>& batch,
                      TransformerParams& g) {
  const auto& c = m.cfg;
  const ForwardTrace tr = forward(m, batch);
  const int B = tr.B;
  const int T = tr.T;
  const int d = c.d;

  Matrix glog;
  const double loss = logit_grad(tr.logits, batch, glog);

  // Final layer.
  const int Lidx = c.layers - 1;
  const LayerParams& lp = m.p.layers[Lidx];
  LayerParams& gl = g.layers[Lidx];
  const LastLayerTrace& L = tr.last;
  Matrix dout = glog * m.emb.wu;
  Matrix du = ff_backward(lp, c.ff[Lidx].type, L.u, L.act, dout, gl);

  Matrix dvbar;
  if (lp.wo.size() > 0) {
    gl.wo.noalias() += du.transpose() * L.vw;
    const Matrix dvw = du * lp.wo;
    gl.wv.noalias() += dvw.transpose() * L.vbar;
    dvbar = dvw * lp.wv;
  } else {
    gl.wv.noalias() += du.transpose() * L.vbar;
    dvbar = du * lp.wv;
  }

  Matrix dx = Matrix::Zero(static_cast<Eigen::Index>(B) * T, d);
  Matrix dq(B, d);
  for (int b = 0; b < B; ++b) {
    const auto Xb = L.x.middleRows(b * T, T);
    auto dXb = dx.middleRows(b * T, T);
    const Eigen::RowVectorXd a = L.att.row(b);
    Eigen::RowVectorXd da = dvbar.row(b) * Xb.transpose();
    dXb.noalias() += a.transpose() * dvbar.row(b);
    const double mean = a.dot(da);
    const Eigen::RowVectorXd ds = a.cwiseProduct((da.array() - mean).matrix());
    dXb.noalias() += ds.transpose() * L.q.row(b);
    dq.row(b).noalias() = ds * Xb;
  }
  gl.wqk.noalias() += L.xq.transpose() * dq;
  Matrix dxq = du;
  dxq.noalias() += dq * lp.wqk.transpose();
  for (int b = 0; b < B; ++b) dx.row(b * T + T - 1) += dxq.row(b);

  // Full layers, last to first.
  for (int l = c.layers - 2; l >= 0; --l) {
    const LayerParams& p = m.p.layers[l];
    LayerParams& gp = g.layers[l];
    const FullLayerTrace& F = tr.full[l];
    Matrix dU = ff_backward(p, c.ff[l].type, F.u, F.act, dx, gp);
    dx = dU;
    Matrix dvv(static_cast<Eigen::Index>(B) * T, d);
    Matrix dqm(static_cast<Eigen::Index>(B) * T, d);
    for (int b = 0; b < B; ++b) {
      const Matrix& A = F.att[b];
      const auto dUb = dU.middleRows(b * T, T);
      Matrix dA = dUb * F.vv.middleRows(b * T, T).transpose();
      dvv.middleRows(b * T, T).noalias() = A.transpose() * dUb;
      const Eigen::VectorXd rs = dA.cwiseProduct(A).rowwise().sum();
      Matrix dS = A.cwiseProduct(dA - rs.replicate(1, T));
      dqm.middleRows(b * T, T).noalias() = dS * F.x.middleRows(b * T, T);
      dx.middleRows(b * T, T).noalias() += dS.transpose() * F.qm.middleRows(b * T, T);
    }
    if (p.wo.size() > 0) {
      gp.wo.noalias() += dvv.transpose() * F.vw;
      const Matrix dvw = dvv * p.wo;
      gp.wv.noalias() += dvw.transpose() * F.x;
      dx.noalias() += dvw * p.wv;
    } else {
      gp.wv.noalias() += dvv.transpose() * F.x;
      dx.noalias() += dvv * p.wv;
    }
    gp.wqk.noalias() += F.x.transpose() * dqm;
    dx.noalias() += dqm * p.wqk.transpose();
  }
  return loss;
}

double chunk_backward(const Simplified& m, const std::vector<TokenSequence>& batch,
                      SimplifiedParams& g) {
  const SimplifiedTrace tr = forward_simplified(m, batch);
  const int B = tr.B;
  Matrix glog;
  const double loss = logit_grad(tr.xi_attn + tr.xi_ff, batch, glog);
  const Matrix dphi = glog * m.emb.wu;  // B x d
  g.wv.noalias() += dphi.transpose() * tr.xbar;
  g.wf.noalias() += dphi.transpose() * tr.xq;
  const Matrix r = dphi * m.p.wv;  // row b: (W_V^T dphi_b)^T
  Matrix dq(B, m.d);
  for (int b = 0; b < B; ++b) {
    const Eigen::RowVectorXd a = tr.att.row(b);
    const Eigen::RowVectorXd da = r.row(b) * tr.x[b].transpose();
    const double mean = a.dot(da);
    const Eigen::RowVectorXd ds = a.cwiseProduct((da.array() - mean).matrix());
    dq.row(b).noalias() = ds * tr.x[b];
  }
  g.wqk.noalias() += tr.xq.transpose() * dq;
  return loss;
}

template <class Model, class Params>
double chunked_backward(const Model& m, const std::vector<TokenSequence>& batch, int threads,
                        Params& total) {
  const int B = static_cast<int>(batch.size());
  if (B == 0) throw std::invalid_argument("backward: empty batch");
  const int nchunks = (B + kGradChunk - 1) / kGradChunk;
  std::vector<Params> parts(nchunks, zeros_like(m.p));
  std::vector<double> losses(nchunks, 0.0);
  parallel_for(nchunks, threads, [&](int c) {
    const int lo = c * kGradChunk;
    const int hi = std::min(B, lo + kGradChunk);
    std::vector<TokenSequence> sub(batch.begin() + lo, batch.begin() + hi);
    losses[c] = chunk_backward(m, sub, parts[c]);
  });
  total = std::move(parts[0]);
  double loss = losses[0];
  for (int c = 1; c < nchunks; ++c) {
    auto dst = named(total);
    auto src = named(static_cast<const Params&>(parts[c]));
    for (std::size_t i = 0; i < dst.size(); ++i) *dst[i].m += *src[i].m;
    loss += losses[c];
  }
  for (auto& nm : named(total)) *nm.m /= double(B);
  return loss / B;
}

}  // namespace

LossGrad backward(const Transformer& m, const std::vector<TokenSequence>& batch, int threads) {
  LossGrad out;
  out.loss = chunked_backward(m, batch, threads, out.grad);
  return out;
}

SimplifiedLossGrad backward(const Simplified& m, const std::vector<TokenSequence>& batch, int threads) {
  SimplifiedLossGrad out;
  out.loss = chunked_backward(m, batch, threads, out.grad);
  return out;
}

double mean_loss(const Transformer& m, const std::vector<TokenSequence>& batch) {
  double loss = 0.0;
  for (std::size_t lo = 0; lo < batch.size(); lo += kGradChunk) {
    const std::size_t hi = std::min(batch.size(), lo + kGradChunk);
    std::vector<TokenSequence> sub(batch.begin() + lo, batch.begin() + hi);
    const ForwardTrace tr = forward(m, sub);
    for (Eigen::Index b = 0; b < tr.logits.rows(); ++b)
      loss += cross_entropy(tr.logits.row(b).transpose(), sub[b].y).loss;
  }
  return loss / batch.size();
}

double mean_loss(const Simplified& m, const std::vector<TokenSequence>& batch) {
  const SimplifiedTrace tr = forward_simplified(m, batch);
  const Matrix xi = tr.xi_attn + tr.xi_ff;
  double loss = 0.0;
  for (Eigen::Index b = 0; b < xi.rows(); ++b)
    loss += cross_entropy(xi.row(b).transpose(), batch[b].y).loss;
  return loss / batch.size();
}

void Optimizer::step(const std::vector<NamedMatrix>& params, const std::vector<ConstNamedMatrix>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("optimizer: parameter/gradient mismatch");
  ++t_;
  const bool stateful = cfg_.kind == OptKind::Adam || cfg_.momentum > 0.0;
  if (stateful && m_.empty()) {
    for (const auto& g : grads) {
      m_.push_back(Matrix::Zero(g.m->rows(), g.m->cols()));
      v_.push_back(Matrix::Zero(g.m->rows(), g.m->cols()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto it = cfg_.lr_overrides.find(params[i].name);
    const double lr = it == cfg_.lr_overrides.end() ? cfg_.lr : it->second;
    Matrix& w = *params[i].m;
    const Matrix& g = *grads[i].m;
    if (cfg_.kind == OptKind::Sgd) {
      if (cfg_.momentum > 0.0) {
        m_[i] = cfg_.momentum * m_[i] + g;
        w -= lr * m_[i];
      } else {
        w -= lr * g;
      }
      continue;
    }
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    w.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
  }
}

Simplified one_step(const Simplified& m, const std::vector<TokenSequence>& data, double eta_f,
                    double eta_v) {
  for (const auto& nm : named(m.p))
    if (!nm.m->isZero(0.0)) throw std::invalid_argument("one_step: weight " + nm.name + " is not zero");
  const SimplifiedLossGrad lg = backward(m, data);
  Simplified out = m;
  out.p.wf = -eta_f * lg.grad.wf;
  out.p.wv = -eta_v * lg.grad.wv;
  return out;
}

int TrainConfig::total_steps() const {
  int n = 0;
  for (const auto& p : phases) n += p.steps;
  return n;
}

void TrainConfig::validate() const {
  if (!(opt.lr > 0.0)) throw std::invalid_argument("train: lr must be > 0");
  if (!(opt.momentum >= 0.0 && opt.momentum < 1.0)) throw std::invalid_argument("train: momentum outside [0,1)");
  for (const auto& [name, lr] : opt.lr_overrides)
    if (!(lr >= 0.0)) throw std::invalid_argument("train: negative lr override for " + name);
  if (phases.empty()) throw std::invalid_argument("train: no phases");
  for (const auto& p : phases) {
    if (p.steps < 0) throw std::invalid_argument("train: negative phase length");
    if (!(p.alpha >= 0.0 && p.alpha <= 1.0)) throw std::invalid_argument("train: phase alpha outside [0,1]");
  }
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (eval_every < 0) throw std::invalid_argument("train: eval_every must be >= 0");
}

std::vector<TokenSequence> training_batch(const TaskSpec& spec, const TrainConfig& cfg, int step,
                                          double alpha) {
  TaskSpec s = spec;
  s.alpha = alpha;
  const std::uint64_t first = static_cast<std::uint64_t>(step) * cfg.batch_size;
  return cfg.task == TaskKind::Ioi ? ioi_batch(s, cfg.seed, first, cfg.batch_size)
                                   : recall_batch(s, cfg.seed, first, cfg.batch_size);
}

namespace {

template <class Model, class Sink>
void fit_impl(Model& m, const TaskSpec& spec, const TrainConfig& cfg, const Sink& sink) {
  cfg.validate();
  spec.validate();
  Optimizer opt(cfg.opt);
  const int total = cfg.total_steps();
  StepInfo info;
  info.loss = std::nan("");
  info.alpha = cfg.phases.front().alpha;
  auto maybe_emit = [&](bool force) {
    if (sink && cfg.eval_every > 0 && (force || info.step % cfg.eval_every == 0)) sink(info, m);
  };
  maybe_emit(true);
  int step = 0;
  for (std::size_t ph = 0; ph < cfg.phases.size(); ++ph) {
    const Phase& phase = cfg.phases[ph];
    for (int k = 0; k < phase.steps; ++k) {
      const auto batch = training_batch(spec, cfg, step, phase.alpha);
      auto lg = backward(m, batch, cfg.threads);
      if (!std::isfinite(lg.loss)) throw NumericError("training diverged at step " + std::to_string(step));
      opt.step(named(m.p), named(static_cast<const decltype(lg.grad)&>(lg.grad)));
      for (const auto& nm : named(static_cast<const decltype(m.p)&>(m.p)))
        if (!nm.m->allFinite())
          throw NumericError("training diverged at step " + std::to_string(step) + " (" + nm.name + ")");
      ++step;
      info.step = step;
      info.phase = static_cast<int>(ph);
      info.alpha = phase.alpha;
      info.loss = lg.loss;
      if (step < total) maybe_emit(false);
    }
  }
  if (total > 0) maybe_emit(true);
}

}  // namespace

void fit(Transformer& m, const TaskSpec& spec, const TrainConfig& cfg, const TransformerSink& sink) {
  fit_impl(m, spec, cfg, sink);
}

void fit(Simplified& m, const TaskSpec& spec, const TrainConfig& cfg, const SimplifiedSink& sink) {
  fit_impl(m, spec, cfg, sink);
}

}  // namespace icl
