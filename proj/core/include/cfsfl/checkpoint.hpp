#pragma once

// Binary parameter snapshots: "CFSF" magic, u32 version, u32 tensor count,
// then per tensor u16 name length, name, u8 dtype (0 = float32 LE), u8 rank,
// u32 dims and row-major data; finally a u64-length-prefixed JSON blob.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "cfsfl/diffcore.hpp"

namespace cfsfl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ParamSet params;
  std::string metadata_json;  // opaque to core
};

// Tensors are stored as float32; values must already be representable
// (see round_to_storage_precision) for the round trip to be exact.
void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

// Throws FormatError on a bad magic, unknown version or dtype, or truncation.
Checkpoint read_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Owner implied by a parameter name prefix ("theta.", "phi.", "psi.", "fusion.").
Owner owner_for_name(const std::string& name);

}  // namespace cfsfl
