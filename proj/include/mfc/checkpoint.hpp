#pragma once

#include <string>

#include "mfc/mfnn.hpp"

namespace mfc {

/// Binary checkpoint of a mean-field network. Little-endian layout:
///   bytes 0-3   magic "MFN1"
///   u32         format version (1)
///   u8          variant (0 = bin, 1 = cylindrical)
///   u8          time_input flag
///   u8          hidden activation tag (0 = tanh)
///   u8          reserved (0)
///   i32         output_dim, k_bins, latent_dim
///   i32         outer layer count, then that many i32 layer sizes
///   i32         inner layer count (0 for bin), then sizes
///   u64         parameter count
///   f64[...]    flat parameters (outer network first)
void save_checkpoint(const MeanFieldNet& net, const std::string& path);
MeanFieldNet load_checkpoint(const std::string& path);

}  // namespace mfc
