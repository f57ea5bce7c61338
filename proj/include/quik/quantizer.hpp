#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "quik/calibration.hpp"
#include "quik/matrix.hpp"
#include "quik/packed.hpp"

namespace quik {

// Layer-wise second order statistic H = sum_tokens x x^T over calibration
// inputs, accumulated in FP64. Damping (damping_frac * mean diagonal) is added
// to the diagonal before inversion; it is defined relative to the diagonal so
// scaling H by a constant does not change downstream quantization.
struct Hessian {
  int64_t dim = 0;
  int64_t token_count = 0;
  std::vector<double> sum; // row-major dim x dim, before damping
  double damping_frac = 0.01;

  void accumulate(const FpMatrix &batch);
  double lambda() const;
  double at(int64_t i, int64_t j) const { return sum[static_cast<size_t>(i * dim + j)]; }

  static Hessian identity(int64_t dim, double damping_frac = 0.01);
};

Hessian build_hessian(std::span<const FpMatrix> batches, double damping_frac = 0.01);

// 2:4 structured mask over base weight positions. kept[r*cols + c] is 1 for a
// retained weight, 0 for a pruned one; every aligned complete group of four
// base columns holds exactly two retained weights.
struct SparsityMask {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<uint8_t> kept;

  bool empty() const { return kept.empty(); }
  bool kept_at(int64_t r, int64_t c) const { return kept[static_cast<size_t>(r * cols + c)] != 0; }
};

// Quantized layer weights in permuted column order: packed base columns, the
// full-precision outlier columns at the tail, per-output-row symmetric scales,
// and the precomputed zero-point correction wReduced[r] = scale[r] * sum_j q[r][j].
struct QuantizedWeights {
  PackedIntMatrix base;        // n_out x n_base
  std::vector<float> scales;   // n_out
  FpMatrix outlier_weights;    // n_out x n_outlier, post-compensation values
  std::vector<float> wreduced; // n_out
  SparsityMask mask;           // empty unless produced by sparsegpt_joint

  int bits() const { return base.bits; }
  int64_t out_features() const { return base.rows; }
  int64_t base_features() const { return base.cols; }
};

// Round-to-nearest symmetric row quantization.
// scale = clip_factor * max|w| / (2^(bits-1) - 1); q = clamp(round(w / scale))
// with ties away from zero and the grid clamped to +-(2^(bits-1)-1).
// An all-zero row yields scale 1 and q = 0.
std::pair<std::vector<int8_t>, float> rtn_quantize_row(std::span<const float> row, int bits,
                                                       float clip_factor = 1.0f);

// Linear search over c in {0.50, 0.51, ..., 1.00} minimizing the squared
// round-trip error of rtn_quantize_row; ties resolved toward larger c.
float clip_search(std::span<const float> row, int bits);

// Outlier-aware GPTQ. Columns are permuted so outliers sit at the tail and the
// Hessian is permuted the same way; base columns are quantized left to right
// with the error of each column propagated to everything on its right through
// the Cholesky factor of the damped inverse Hessian. Outlier columns are
// returned in full precision as they stand after all updates.
QuantizedWeights gptq_quantize(const FpMatrix &w, const Hessian &h, const OutlierSet &outliers,
                               int bits, bool use_clipping = false);

// Joint 2:4 sparsification + quantization. In each aligned group of four base
// columns the two weights per row with smallest saliency w^2 / C_jj^2 are
// pruned; pruning and quantization errors propagate through the same
// compensation rule as gptq_quantize. Outlier columns stay dense FP. A
// trailing group of fewer than four base columns is left dense.
QuantizedWeights sparsegpt_joint(const FpMatrix &w, const Hessian &h, const OutlierSet &outliers,
                                 int bits, bool use_clipping = false);

// Plain RTN over the base columns, outlier columns kept at their original FP
// values; the no-compensation baseline (equals gptq_quantize with H = I).
QuantizedWeights rtn_quantize_weights(const FpMatrix &w, const OutlierSet &outliers, int bits,
                                      bool use_clipping = false);

// Recomputes wReduced from the packed base and scales; exact reproduction of
// the stored values.
std::vector<float> compute_wreduced(const QuantizedWeights &q);

// De-permuted FP32 reconstruction [dequantized base | outliers] in original
// column order (zero-point-free; weights are symmetric).
FpMatrix dequantize_weights(const QuantizedWeights &q, const OutlierSet &outliers);

} // namespace quik
