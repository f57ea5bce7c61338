#pragma once

#include <filesystem>

#include "quik/runtime.hpp"

namespace quik {

// Layer bundle directory layout (a TensorContainer):
//   weight_base     i4p/i8  [n_out, n_base]
//   weight_scales   f32     [n_out]
//   wreduced        f32     [n_out]
//   outlier_weights f32     [n_out, n_outlier]
//   bias            f32     [n_out]            (optional)
//   weight_fp32     f32     [n_out, n_in]      (optional; enables reference mode)
//   sparsity_mask   i8      [n_out, n_base]    (optional; 1 = kept)
// metadata: format, act_bits, in_features, outlier_indices.
void save_layer(const QuikLinearLayer &layer, const std::filesystem::path &dir);
QuikLinearLayer load_layer(const std::filesystem::path &dir);

} // namespace quik
