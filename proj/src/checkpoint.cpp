#include "icl/checkpoint.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

namespace icl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_all(const std::string& dir, const json& manifest,
               const std::vector<ConstNamedMatrix>& mats) {
  fs::create_directories(dir);
  std::ofstream w(fs::path(dir) / "weights.bin", std::ios::binary);
  if (!w) throw std::runtime_error("checkpoint: cannot write " + dir + "/weights.bin");
  for (const auto& nm : mats) write_matrix(w, *nm.m, nm.name);
  std::ofstream m(fs::path(dir) / "manifest.json");
  if (!m) throw std::runtime_error("checkpoint: cannot write " + dir + "/manifest.json");
  m << manifest.dump(2) << "\n";
}

std::vector<ConstNamedMatrix> embedding_mats(const Embeddings& e) {
  std::vector<ConstNamedMatrix> out;
  for (auto [n, m] : {std::pair{"emb.we", &e.we}, {"emb.we_prev", &e.we_prev}, {"emb.wu", &e.wu},
                      {"emb.pos", &e.pos}})
    if (m->size() > 0) out.push_back({n, m});
  return out;
}

std::map<std::string, Matrix> read_all(const std::string& dir) {
  const auto path = fs::path(dir) / "weights.bin";
  std::ifstream r(path, std::ios::binary);
  if (!r) throw std::runtime_error("checkpoint: cannot read " + path.string());
  std::map<std::string, Matrix> out;
  while (r.peek() != std::char_traits<char>::eof()) {
    auto [name, m] = read_matrix(r);
    out[name] = std::move(m);
  }
  return out;
}

void assign(std::map<std::string, Matrix>& src, const std::string& name, Matrix& dst) {
  auto it = src.find(name);
  if (it == src.end()) throw std::runtime_error("checkpoint: missing matrix " + name);
  if (it->second.rows() != dst.rows() || it->second.cols() != dst.cols())
    throw std::runtime_error("checkpoint: shape mismatch for " + name);
  dst = std::move(it->second);
}

void assign_embeddings(std::map<std::string, Matrix>& src, Embeddings& e) {
  for (auto [n, m] : {std::pair{"emb.we", &e.we}, {"emb.we_prev", &e.we_prev}, {"emb.wu", &e.wu},
                      {"emb.pos", &e.pos}})
    if (m->size() > 0) assign(src, n, *m);
}

}  // namespace

void save_checkpoint(const std::string& dir, const Transformer& m, long step) {
  const ModelConfig& c = m.cfg;
  json ff = json::array();
  for (const auto& f : c.ff) ff.push_back(to_string(f));
  json manifest = {{"arch", "transformer"}, {"d", c.d},       {"N", c.N},
                   {"T", c.T},              {"ffkind", ff},   {"layers", c.layers},
                   {"factor_v1", c.factor_v1}, {"embed", to_string(c.embed)},
                   {"init_sigma", c.init_sigma}, {"seed", c.seed}, {"step", step}};
  auto mats = embedding_mats(m.emb);
  for (const auto& nm : named(m.p)) mats.push_back(nm);
  write_all(dir, manifest, mats);
}

void save_checkpoint(const std::string& dir, const Simplified& m, long step) {
  json manifest = {{"arch", "simplified"}, {"d", m.d}, {"N", m.N}, {"T", 0},
                   {"ffkind", "linear"},   {"seed", 0}, {"step", step}};
  auto mats = embedding_mats(m.emb);
  for (const auto& nm : named(m.p)) mats.push_back(nm);
  write_all(dir, manifest, mats);
}

Checkpoint load_checkpoint(const std::string& dir) {
  const auto mpath = fs::path(dir) / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + mpath.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint: malformed " + mpath.string() + ": " + e.what());
  }
  auto mats = read_all(dir);
  Checkpoint ck;
  try {
    ck.arch = j.at("arch").get<std::string>();
    ck.step = j.at("step").get<long>();
    if (ck.arch == "transformer") {
      ModelConfig c;
      c.N = j.at("N").get<int>();
      c.T = j.at("T").get<int>();
      c.d = j.at("d").get<int>();
      c.layers = j.at("layers").get<int>();
      for (const auto& f : j.at("ffkind")) c.ff.push_back(parse_ffkind(f.get<std::string>()));
      c.factor_v1 = j.at("factor_v1").get<bool>();
      c.embed = parse_embed_scheme(j.at("embed").get<std::string>());
      c.init_sigma = j.value("init_sigma", 0.0);
      c.seed = j.at("seed").get<std::uint64_t>();
      ck.transformer = build_transformer(c);
      assign_embeddings(mats, ck.transformer.emb);
      for (auto& nm : named(ck.transformer.p)) assign(mats, nm.name, *nm.m);
    } else if (ck.arch == "simplified") {
      Simplified& s = ck.simplified;
      s.N = j.at("N").get<int>();
      s.d = j.at("d").get<int>();
      s.emb.we = mats.at("emb.we");
      s.emb.we_prev = mats.at("emb.we_prev");
      s.emb.wu = mats.at("emb.wu");
      s.p = {Matrix::Zero(s.d, s.d), Matrix::Zero(s.d, s.d), Matrix::Zero(s.d, s.d)};
      for (auto& nm : named(s.p)) assign(mats, nm.name, *nm.m);
    } else {
      throw std::runtime_error("checkpoint: unknown arch '" + ck.arch + "'");
    }
  } catch (const json::exception& e) {
    throw std::runtime_error("checkpoint: bad manifest field in " + mpath.string() + ": " + e.what());
  } catch (const std::out_of_range&) {
    throw std::runtime_error("checkpoint: missing embedding in " + dir);
  }
  return ck;
}

}  // namespace icl
