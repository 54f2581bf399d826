#pragma once

#include <filesystem>
#include <iosfwd>

#include "cfl/backbone.hpp"
#include "cfl/head.hpp"

namespace cfl {

// Flat binary records, all integers and reals little-endian.
//
// backbone: "CFLB" u32 version | u8 activation | u8 parameterization |
//           u64 n_dims | u64 dims[n_dims] | f64 params[...] (MlpBackbone::parameters order)
// head:     "CFLH" u32 version | u64 rows | u64 cols | u8 has_bias | u8 init_policy |
//           u8 reg_kind | f64 reg_strength | f64 W[rows * cols] (row-major)

inline constexpr std::uint32_t kSnapshotVersion = 1;

void save_backbone(std::ostream& os, const MlpBackbone& bb);
MlpBackbone load_backbone(std::istream& is);
void save_head(std::ostream& os, const HeadState& head);
HeadState load_head(std::istream& is);

void save_backbone(const std::filesystem::path& path, const MlpBackbone& bb);
MlpBackbone load_backbone(const std::filesystem::path& path);
void save_head(const std::filesystem::path& path, const HeadState& head);
HeadState load_head(const std::filesystem::path& path);

}  // namespace cfl
