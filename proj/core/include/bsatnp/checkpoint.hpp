#pragma once

#include <iosfwd>
#include <string>

#include "bsatnp/model.hpp"
#include "bsatnp/param_store.hpp"

namespace bsatnp {

// Layout: "BSATNP1\n", u64 length + model config text, u64 parameter count,
// then per parameter (u32 name length, name, u8 dtype = 1 for f32, u32 rank,
// u64 dims...), then every payload in manifest order as little-endian f32.
// Integers are little-endian.
struct Checkpoint {
  ModelConfig model;
  ParamStore<float> params;
};

void write_checkpoint(std::ostream& out, const ModelConfig& model, const ParamStore<float>& params);
Checkpoint read_checkpoint(std::istream& in);

// Writes to a sibling temporary file and renames it into place.
void save_checkpoint(const std::string& path, const ModelConfig& model, const ParamStore<float>& params);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace bsatnp
