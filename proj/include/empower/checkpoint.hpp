#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "empower/tensor.hpp"

namespace empower {

/// Binary layout (little-endian host order):
///   "EMPWCKPT" u32 version, manifest string, u32 block count,
///   per block: name string, u64 rows, u64 cols, values, adam_m, adam_v (f64), i64 step_count.
/// Strings are u32 length + bytes. Gradients are not stored.
inline constexpr std::uint32_t checkpoint_version = 1;

void save_checkpoint(std::ostream& out, const std::string& manifest, const std::vector<const ParamBlock*>& blocks);
void save_checkpoint_file(const std::string& path, const std::string& manifest,
                          const std::vector<const ParamBlock*>& blocks);

/// Restores into blocks matched by name and shape; returns the stored manifest.
/// Throws ParseError(line 0) on a bad header, unknown block, or shape mismatch.
std::string load_checkpoint(std::istream& in, const std::vector<ParamBlock*>& blocks);
std::string load_checkpoint_file(const std::string& path, const std::vector<ParamBlock*>& blocks);

/// Reads only the header and returns the manifest, e.g. "algo=alg1;heads=...".
std::string read_checkpoint_manifest(const std::string& path);

}  // namespace empower
