#pragma once

#include "icl/datagen.hpp"
#include "icl/linalg.hpp"
#include "icl/rng.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace icl {

enum class FfType { Mlp, Linear, None };

struct FfKind {
  FfType type = FfType::Mlp;
  int hidden = 0;  // MLP width; 0 means 4d

  static FfKind mlp(int hidden = 0) { return {FfType::Mlp, hidden}; }
  static FfKind linear() { return {FfType::Linear, 0}; }
  static FfKind none() { return {FfType::None, 0}; }
};

// "mlp", "mlp:<h>", "linear", "none".
FfKind parse_ffkind(const std::string& s);
std::string to_string(const FfKind& f);

enum class EmbedScheme { Gaussian, Orthonormal };

EmbedScheme parse_embed_scheme(const std::string& s);
std::string to_string(EmbedScheme s);

// Frozen tables. Rows: we, we_prev, wu have N+1 rows; pos has T rows.
// Either we_prev or pos may be empty depending on the architecture.
struct Embeddings {
  Matrix we;
  Matrix we_prev;
  Matrix wu;
  Matrix pos;
};

struct EmbedRequest {
  int d = 0;
  int N = 0;
  int T = 0;
  EmbedScheme scheme = EmbedScheme::Gaussian;
  double sigma = 0.0;  // Gaussian std; 0 means 1/sqrt(d)
  bool prev = false;   // allocate we_prev
  bool pos = true;     // allocate pos
};

// Orthonormal: all allocated rows mutually orthonormal (requires d >= total rows).
Embeddings embed_init(const EmbedRequest& req, Rng& rng);

struct ModelConfig {
  int N = 0;
  int T = 0;
  int d = 0;
  int layers = 2;
  std::vector<FfKind> ff;  // one per layer
  bool factor_v1 = false;  // first-layer value map is W_O W_V
  EmbedScheme embed = EmbedScheme::Gaussian;
  double init_sigma = 0.0;  // learnable init std; 0 means 1/sqrt(d)
  std::uint64_t seed = 0;

  int hidden(int layer) const;
  void validate() const;
};

// Empty matrices mark absent parameters.
struct LayerParams {
  Matrix wqk;    // d x d
  Matrix wv;     // d x d
  Matrix wo;     // d x d, only with factor_v1 on layer 0
  Matrix u_in;   // h x d
  Matrix u_out;  // d x h
  Matrix wf;     // d x d, LINEAR feed-forward
};

struct TransformerParams {
  std::vector<LayerParams> layers;
};

struct Transformer {
  ModelConfig cfg;
  Embeddings emb;
  TransformerParams p;
};

struct SimplifiedParams {
  Matrix wqk;
  Matrix wv;
  Matrix wf;
};

// One attention layer plus a linear feed-forward on the last token, with
// previous-token embeddings instead of positions. Learnable weights start at 0.
struct Simplified {
  int N = 0;
  int d = 0;
  Embeddings emb;
  SimplifiedParams p;
};

// Names are "attn<l>.wqk", "attn<l>.wv", "attn<l>.wo", "ff<l>.u_in",
// "ff<l>.u_out", "ff<l>.w" with 1-based l; simplified: "wqk", "wv", "wf".
struct NamedMatrix {
  std::string name;
  Matrix* m;
};
struct ConstNamedMatrix {
  std::string name;
  const Matrix* m;
};
std::vector<NamedMatrix> named(TransformerParams& p);
std::vector<ConstNamedMatrix> named(const TransformerParams& p);
std::vector<NamedMatrix> named(SimplifiedParams& p);
std::vector<ConstNamedMatrix> named(const SimplifiedParams& p);

// Zero-valued parameter set with the same shapes.
TransformerParams zeros_like(const TransformerParams& p);
SimplifiedParams zeros_like(const SimplifiedParams& p);

Transformer build_transformer(const ModelConfig& cfg);
Simplified build_simplified(int N, int d, EmbedScheme scheme, std::uint64_t seed, double sigma = 0.0);

// Effective value map of a layer (W_O W_V when factorized).
Matrix value_map(const LayerParams& lp);

struct FullLayerTrace {
  Matrix x;                 // input, row b*T+t
  Matrix qm;                // x * W_QK
  std::vector<Matrix> att;  // per sequence, T x T lower triangular
  Matrix vv;                // x * V^T
  Matrix vw;                // x * W_V^T when factorized
  Matrix u;                 // x + attention output
  Matrix act;               // relu(u * U_in^T)
};

// Final layer: only the query at position T is evaluated.
struct LastLayerTrace {
  Matrix x;     // keys/values, row b*T+t
  Matrix xq;    // B x d, x at position T
  Matrix q;     // B x d, (W_QK^T x_T)^T
  Matrix att;   // B x T
  Matrix vbar;  // B x d, sum_s a_s x_s
  Matrix vw;    // B x d, vbar * W_V^T when factorized
  Matrix u;     // B x d
  Matrix act;   // B x h
  Matrix out;   // B x d
};

struct ForwardTrace {
  int B = 0;
  int T = 0;
  std::vector<FullLayerTrace> full;  // layers 1..L-1
  LastLayerTrace last;
  Matrix logits;  // B x (N+1)
};

// Throws std::invalid_argument on bad length or token.
ForwardTrace forward(const Transformer& m, const std::vector<TokenSequence>& batch);
Vector forward_logits(const Transformer& m, const TokenSequence& s);

// Query-position attention row of a layer (0-based layer index).
Vector attention_row(const ForwardTrace& tr, int layer, int b);

struct SimplifiedOut {
  Vector xi_attn;
  Vector xi_ff;
};

struct SimplifiedTrace {
  int B = 0;
  int T = 0;
  std::vector<Matrix> x;  // per sequence, T x d
  Matrix xq;              // B x d
  Matrix att;             // B x T
  Matrix xbar;            // B x d, attention-weighted input
  Matrix xi_attn;         // B x (N+1)
  Matrix xi_ff;           // B x (N+1)
};

SimplifiedTrace forward_simplified(const Simplified& m, const std::vector<TokenSequence>& batch);
SimplifiedOut forward_simplified(const Simplified& m, const TokenSequence& s);

// Input rows of the simplified model: W_E(z_t) + W~_E(z_{t-1}), null row for t = 1.
Matrix simplified_inputs(const Simplified& m, const std::vector<int>& z);

}  // namespace icl
