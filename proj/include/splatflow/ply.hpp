#pragma once

#include <string>

#include "splatflow/gaussian.hpp"

namespace splatflow {

// Binary little-endian PLY in the de-facto splat-viewer layout:
// vertex properties x, y, z, f_dc_0..2, opacity, scale_0..2, rot_0..3,
// all float32. Values are truncated to float32 on write; a set that has
// already been through one write/read cycle round-trips bit-exactly.
void write_ply(const GaussianSet& set, const std::string& path);
GaussianSet read_ply(const std::string& path);

}  // namespace splatflow
