#pragma once

#include <string>

#include "fsod/param.hpp"

namespace fsod {

// Binary checkpoint: magic + version, an opaque manifest string (callers put
// self-describing JSON there), then per param its name, group tag, trainable
// flag, shape and little-endian f64 values. Round-trips are bitwise exact.
// Optimizer moments are not persisted; each stage starts a fresh optimizer.
void save_checkpoint(const std::string& path, const ParamStore& params,
                     const std::string& manifest);

// Reads a checkpoint into `params`: existing names are overwritten (tensor,
// trainable flag; group must agree), unknown names are created. Returns the
// stored manifest.
std::string load_checkpoint(const std::string& path, ParamStore& params);

// Reads only the manifest string.
std::string read_checkpoint_manifest(const std::string& path);

}  // namespace fsod
