#pragma once

#include "icl/nets.hpp"

#include <string>

namespace icl {

// A directory holding manifest.json {arch, d, N, T, ffkind, seed, step, ...}
// and weights.bin, the named matrices in linalg serialization.
struct Checkpoint {
  std::string arch;  // "transformer" or "simplified"
  Transformer transformer;
  Simplified simplified;
  long step = 0;
};

void save_checkpoint(const std::string& dir, const Transformer& m, long step);
void save_checkpoint(const std::string& dir, const Simplified& m, long step);

// Throws std::runtime_error naming the file on missing or malformed input.
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace icl
