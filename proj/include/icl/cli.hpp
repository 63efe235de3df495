#pragma once

#include <string>

namespace icl {

// Exit codes: 0 success, 1 precondition or configuration error, 2 numeric
// failure. Errors are written to stderr as one JSON object.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitNumeric = 2;

int dispatch(int argc, const char* const* argv);

// Resolves the worker count: ICL_LAB_THREADS wins over `requested`; 0 means
// hardware concurrency; `deterministic` forces 1.
int resolve_threads(int requested, bool deterministic);

}  // namespace icl
