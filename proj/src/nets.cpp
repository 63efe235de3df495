#include "icl/nets.hpp"

#include <cmath>
#include <stdexcept>

namespace icl {

FfKind parse_ffkind(const std::string& s) {
  if (s == "mlp") return FfKind::mlp();
  if (s.rfind("mlp:", 0) == 0) {
    const int h = std::stoi(s.substr(4));
    if (h < 1) throw std::invalid_argument("ffkind: MLP width must be >= 1");
    return FfKind::mlp(h);
  }
  if (s == "linear") return FfKind::linear();
  if (s == "none") return FfKind::none();
  throw std::invalid_argument("ffkind: unknown kind '" + s + "'");
}

std::string to_string(const FfKind& f) {
  switch (f.type) {
    case FfType::Mlp: return f.hidden ? "mlp:" + std::to_string(f.hidden) : "mlp";
    case FfType::Linear: return "linear";
    case FfType::None: return "none";
  }
  return "?";
}

EmbedScheme parse_embed_scheme(const std::string& s) {
  if (s == "gaussian") return EmbedScheme::Gaussian;
  if (s == "orthonormal") return EmbedScheme::Orthonormal;
  throw std::invalid_argument("embed scheme: unknown '" + s + "'");
}

std::string to_string(EmbedScheme s) {
  return s == EmbedScheme::Gaussian ? "gaussian" : "orthonormal";
}

namespace {

Matrix gaussian(int rows, int cols, double sigma, Rng& rng) {
  std::normal_distribution<double> nd(0.0, sigma);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

}  // namespace

Embeddings embed_init(const EmbedRequest& req, Rng& rng) {
  if (req.d < 1 || req.N < 1 || (req.pos && req.T < 1))
    throw std::invalid_argument("embed_init: non-positive dimension");
  const int V = req.N + 1;
  const int rows = V * (req.prev ? 3 : 2) + (req.pos ? req.T : 0);
  const double sigma = req.sigma > 0.0 ? req.sigma : 1.0 / std::sqrt(double(req.d));
  if (req.scheme == EmbedScheme::Orthonormal && req.d < rows)
    throw std::invalid_argument("embed_init: orthonormal embeddings need d >= " +
                                std::to_string(rows) + ", got d = " + std::to_string(req.d));
  Matrix all = gaussian(rows, req.d, sigma, rng);
  if (req.scheme == EmbedScheme::Orthonormal) all = orthonormalize_rows(all);
  Embeddings e;
  int r = 0;
  e.we = all.middleRows(r, V);
  r += V;
  if (req.prev) {
    e.we_prev = all.middleRows(r, V);
    r += V;
  }
  e.wu = all.middleRows(r, V);
  r += V;
  if (req.pos) e.pos = all.middleRows(r, req.T);
  return e;
}

int ModelConfig::hidden(int layer) const {
  const FfKind& f = ff.at(layer);
  return f.hidden > 0 ? f.hidden : 4 * d;
}

void ModelConfig::validate() const {
  if (N < 1 || T < 1 || d < 1) throw std::invalid_argument("model: N, T, d must be positive");
  if (layers < 1) throw std::invalid_argument("model: need at least one layer");
  if (static_cast<int>(ff.size()) != layers)
    throw std::invalid_argument("model: need one feed-forward kind per layer");
}

std::vector<NamedMatrix> named(TransformerParams& p) {
  std::vector<NamedMatrix> out;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& lp = p.layers[l];
    const std::string i = std::to_string(l + 1);
    for (auto [n, m] : {std::pair{"attn" + i + ".wqk", &lp.wqk}, {"attn" + i + ".wv", &lp.wv},
                        {"attn" + i + ".wo", &lp.wo}, {"ff" + i + ".u_in", &lp.u_in},
                        {"ff" + i + ".u_out", &lp.u_out}, {"ff" + i + ".w", &lp.wf}})
      if (m->size() > 0) out.push_back({n, m});
  }
  return out;
}

std::vector<ConstNamedMatrix> named(const TransformerParams& p) {
  std::vector<ConstNamedMatrix> out;
  for (auto& nm : named(const_cast<TransformerParams&>(p))) out.push_back({nm.name, nm.m});
  return out;
}

std::vector<NamedMatrix> named(SimplifiedParams& p) {
  return {{"wqk", &p.wqk}, {"wv", &p.wv}, {"wf", &p.wf}};
}

std::vector<ConstNamedMatrix> named(const SimplifiedParams& p) {
  return {{"wqk", &p.wqk}, {"wv", &p.wv}, {"wf", &p.wf}};
}

TransformerParams zeros_like(const TransformerParams& p) {
  TransformerParams z = p;
  for (auto& nm : named(z)) nm.m->setZero();
  return z;
}

SimplifiedParams zeros_like(const SimplifiedParams& p) {
  SimplifiedParams z = p;
  for (auto& nm : named(z)) nm.m->setZero();
  return z;
}

Transformer build_transformer(const ModelConfig& cfg) {
  cfg.validate();
  Transformer m;
  m.cfg = cfg;
  Rng rng = make_rng(cfg.seed, 0);
  EmbedRequest req;
  req.d = cfg.d;
  req.N = cfg.N;
  req.T = cfg.T;
  req.scheme = cfg.embed;
  req.prev = false;
  req.pos = true;
  m.emb = embed_init(req, rng);

  const double s = cfg.init_sigma > 0.0 ? cfg.init_sigma : 1.0 / std::sqrt(double(cfg.d));
  const int d = cfg.d;
  m.p.layers.resize(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    LayerParams& lp = m.p.layers[l];
    lp.wqk = gaussian(d, d, s, rng);
    lp.wv = gaussian(d, d, s, rng);
    if (l == 0 && cfg.factor_v1) lp.wo = gaussian(d, d, s, rng);
    switch (cfg.ff[l].type) {
      case FfType::Mlp: {
        const int h = cfg.hidden(l);
        lp.u_in = gaussian(h, d, s, rng);
        lp.u_out = gaussian(d, h, s, rng);
        break;
      }
      case FfType::Linear: lp.wf = gaussian(d, d, s, rng); break;
      case FfType::None: break;
    }
  }
  return m;
}

Simplified build_simplified(int N, int d, EmbedScheme scheme, std::uint64_t seed, double sigma) {
  Simplified m;
  m.N = N;
  m.d = d;
  Rng rng = make_rng(seed, 0);
  EmbedRequest req;
  req.d = d;
  req.N = N;
  req.scheme = scheme;
  req.sigma = sigma;
  req.prev = true;
  req.pos = false;
  m.emb = embed_init(req, rng);
  m.p.wqk = Matrix::Zero(d, d);
  m.p.wv = Matrix::Zero(d, d);
  m.p.wf = Matrix::Zero(d, d);
  return m;
}

Matrix value_map(const LayerParams& lp) {
  if (lp.wo.size() > 0) return lp.wo * lp.wv;
  return lp.wv;
}

namespace {

void check_sequence(const TokenSequence& s, int T, int V) {
  if (static_cast<int>(s.z.size()) != T)
    throw std::invalid_argument("sequence length " + std::to_string(s.z.size()) +
                                " != context length " + std::to_string(T));
  for (int tok : s.z)
    if (tok < 0 || tok >= V) throw std::invalid_argument("token " + std::to_string(tok) + " out of range");
}

// Row-wise causal softmax of a square score block; entries above the diagonal become 0.
void causal_softmax(Matrix& s) {
  const Eigen::Index T = s.rows();
  for (Eigen::Index t = 0; t < T; ++t) {
    auto row = s.row(t);
    const double mx = row.head(t + 1).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j <= t; ++j) {
      row(j) = std::exp(row(j) - mx);
      z += row(j);
    }
    row.head(t + 1) /= z;
    row.tail(T - t - 1).setZero();
  }
}

void softmax_inplace(Eigen::Ref<Eigen::RowVectorXd> r) {
  const double mx = r.maxCoeff();
  r = (r.array() - mx).exp().matrix();
  r /= r.sum();
}

void apply_ff(const LayerParams& lp, FfType type, const Matrix& u, Matrix& act, Matrix& out) {
  switch (type) {
    case FfType::Mlp:
      act.noalias() = u * lp.u_in.transpose();
      act = act.cwiseMax(0.0);
      out = u;
      out.noalias() += act * lp.u_out.transpose();
      break;
    case FfType::Linear:
      out = u;
      out.noalias() += u * lp.wf.transpose();
      break;
    case FfType::None: out = u; break;
  }
}

}  // namespace

ForwardTrace forward(const Transformer& m, const std::vector<TokenSequence>& batch) {
  const auto& c = m.cfg;
  const int B = static_cast<int>(batch.size());
  const int T = c.T;
  const int d = c.d;
  for (const auto& s : batch) check_sequence(s, T, c.N + 1);

  ForwardTrace tr;
  tr.B = B;
  tr.T = T;
  Matrix x(static_cast<Eigen::Index>(B) * T, d);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t) x.row(b * T + t) = m.emb.we.row(batch[b].z[t]) + m.emb.pos.row(t);

  tr.full.resize(c.layers - 1);
  for (int l = 0; l + 1 < c.layers; ++l) {
    const LayerParams& lp = m.p.layers[l];
    FullLayerTrace& L = tr.full[l];
    L.x = std::move(x);
    L.qm.noalias() = L.x * lp.wqk;
    if (lp.wo.size() > 0) {
      L.vw.noalias() = L.x * lp.wv.transpose();
      L.vv.noalias() = L.vw * lp.wo.transpose();
    } else {
      L.vv.noalias() = L.x * lp.wv.transpose();
    }
    L.att.resize(B);
    L.u = L.x;
    for (int b = 0; b < B; ++b) {
      const auto Xb = L.x.middleRows(b * T, T);
      Matrix S(T, T);
      S.noalias() = L.qm.middleRows(b * T, T) * Xb.transpose();
      causal_softmax(S);
      L.u.middleRows(b * T, T).noalias() += S * L.vv.middleRows(b * T, T);
      L.att[b] = std::move(S);
    }
    Matrix out;
    apply_ff(lp, c.ff[l].type, L.u, L.act, out);
    x = std::move(out);
  }

  const LayerParams& lp = m.p.layers[c.layers - 1];
  LastLayerTrace& L = tr.last;
  L.x = std::move(x);
  L.xq.resize(B, d);
  for (int b = 0; b < B; ++b) L.xq.row(b) = L.x.row(b * T + T - 1);
  L.q.noalias() = L.xq * lp.wqk;
  L.att.resize(B, T);
  L.vbar.resize(B, d);
  for (int b = 0; b < B; ++b) {
    const auto Xb = L.x.middleRows(b * T, T);
    L.att.row(b).noalias() = L.q.row(b) * Xb.transpose();
    softmax_inplace(L.att.row(b));
    L.vbar.row(b).noalias() = L.att.row(b) * Xb;
  }
  L.u = L.xq;
  if (lp.wo.size() > 0) {
    L.vw.noalias() = L.vbar * lp.wv.transpose();
    L.u.noalias() += L.vw * lp.wo.transpose();
  } else {
    L.u.noalias() += L.vbar * lp.wv.transpose();
  }
  apply_ff(lp, c.ff[c.layers - 1].type, L.u, L.act, L.out);
  tr.logits.noalias() = L.out * m.emb.wu.transpose();
  return tr;
}

Vector forward_logits(const Transformer& m, const TokenSequence& s) {
  return forward(m, {s}).logits.row(0).transpose();
}

Vector attention_row(const ForwardTrace& tr, int layer, int b) {
  const int L = static_cast<int>(tr.full.size()) + 1;
  if (layer < 0 || layer >= L) throw std::invalid_argument("attention_row: no such layer");
  if (b < 0 || b >= tr.B) throw std::invalid_argument("attention_row: no such sequence");
  if (layer == L - 1) return tr.last.att.row(b).transpose();
  return tr.full[layer].att[b].row(tr.T - 1).transpose();
}

Matrix simplified_inputs(const Simplified& m, const std::vector<int>& z) {
  const int T = static_cast<int>(z.size());
  Matrix x(T, m.d);
  for (int t = 0; t < T; ++t) {
    x.row(t) = m.emb.we.row(z[t]);
    if (t > 0) x.row(t) += m.emb.we_prev.row(z[t - 1]);
  }
  return x;
}

SimplifiedTrace forward_simplified(const Simplified& m, const std::vector<TokenSequence>& batch) {
  SimplifiedTrace tr;
  const int B = static_cast<int>(batch.size());
  tr.B = B;
  tr.T = B ? static_cast<int>(batch[0].z.size()) : 0;
  const int T = tr.T;
  for (const auto& s : batch) check_sequence(s, T, m.N + 1);
  tr.x.resize(B);
  tr.xq.resize(B, m.d);
  tr.att.resize(B, T);
  tr.xbar.resize(B, m.d);
  for (int b = 0; b < B; ++b) {
    tr.x[b] = simplified_inputs(m, batch[b].z);
    tr.xq.row(b) = tr.x[b].row(T - 1);
  }
  const Matrix q = tr.xq * m.p.wqk;
  for (int b = 0; b < B; ++b) {
    tr.att.row(b).noalias() = q.row(b) * tr.x[b].transpose();
    softmax_inplace(tr.att.row(b));
    tr.xbar.row(b).noalias() = tr.att.row(b) * tr.x[b];
  }
  tr.xi_attn.noalias() = (tr.xbar * m.p.wv.transpose()) * m.emb.wu.transpose();
  tr.xi_ff.noalias() = (tr.xq * m.p.wf.transpose()) * m.emb.wu.transpose();
  return tr;
}

SimplifiedOut forward_simplified(const Simplified& m, const TokenSequence& s) {
  const SimplifiedTrace tr = forward_simplified(m, std::vector<TokenSequence>{s});
  return {tr.xi_attn.row(0).transpose(), tr.xi_ff.row(0).transpose()};
}

}  // namespace icl
