#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "quik/calibration.hpp"
#include "quik/matrix.hpp"
#include "quik/packed.hpp"
#include "quik/quantizer.hpp"

namespace quik {

// Per-token asymmetric activation quantization result. zero is the row
// minimum kept in FP; stored codes are round((v - zero) / scale) - halfRange,
// clamped to the signed range. A constant row encodes exactly with scale 1.
struct ActQuantResult {
  PackedIntMatrix packed;   // tokens x base_features
  std::vector<float> scale; // per token
  std::vector<float> zero;  // per token (row minimum)
  int half_range = 8;       // 2^(bits-1)
};

enum class LayerMode { Quik, WeightOnly, FpReference };

// Kernel fusion levels; all three produce bit-identical outputs.
//   V1: separate split / quantize / matmul / dequantize / add passes
//   V2: split + activation quantization fused into one pass over the input
//   V3: V2 plus the dequantization epilogue fused into the output accumulation
enum class PipelineVariant { V1Unfused, V2FusedQuant, V3FusedEpilogue };

struct QuikLinearLayer {
  QuantizedWeights weights;
  OutlierSet outliers;
  std::vector<float> bias;    // empty means no bias
  int act_bits = 4;
  LayerMode mode = LayerMode::Quik;
  FpMatrix reference_weights; // original FP weights; needed for FpReference mode

  int64_t in_features() const { return outliers.feature_count; }
  int64_t out_features() const { return weights.out_features(); }
  void validate() const;
};

// x_outlier = outlier columns in ascending index order; x_base = the remaining
// columns in the order induced by the weight permutation.
std::pair<FpMatrix, FpMatrix> split_activations(const FpMatrix &x, const OutlierSet &o);

// Unfused reference activation quantization of an already-split base matrix.
ActQuantResult quantize_activations(const FpMatrix &x_base, int bits);

// Single-pass equivalent of split_activations followed by quantize_activations;
// bit-identical to the unfused pair by construction.
std::pair<ActQuantResult, FpMatrix> quantize_activations_fused(const FpMatrix &x,
                                                               const OutlierSet &o, int bits);

// Per-element FP reconstruction of the activation quantization (test support
// and weight-only dequantization share it).
inline float dequantize_activation(int q, float scale, float zero, int half_range) {
  return (static_cast<float>(q) + static_cast<float>(half_range)) * scale + zero;
}

// out[t][r] = acc * scaleAct[t] * scaleWeight[r]
//           + (zeroAct[t] + halfRange * scaleAct[t]) * wReduced[r]
FpMatrix dequantize_epilogue(const Int32Matrix &acc, const ActQuantResult &a,
                             std::span<const float> weight_scales,
                             std::span<const float> wreduced);

// Timings (milliseconds) for one forward pass, for the bench harness. A fused
// stage reports under the first field it covers and flags itself fused.
struct StageTimes {
  double split_ms = 0, quantize_ms = 0, int_matmul_ms = 0, fp_matmul_ms = 0, dequantize_ms = 0,
         add_ms = 0;
  bool quantize_fused = false;  // split+quantize in one pass (reported as quantize_ms)
  bool dequantize_fused = false; // dequantize+add in one pass (reported as dequantize_ms)
  double total_ms() const {
    return split_ms + quantize_ms + int_matmul_ms + fp_matmul_ms + dequantize_ms + add_ms;
  }
};

// The full forward pass: quantized base matmul, dequantization epilogue,
// full-precision outlier matmul and bias. WeightOnly keeps activations in FP;
// FpReference runs the original weights.
FpMatrix quik_matmul(const QuikLinearLayer &layer, const FpMatrix &x,
                     PipelineVariant variant = PipelineVariant::V3FusedEpilogue,
                     StageTimes *times = nullptr);

// ------------------------------------------------------------------ model graphs

// Small feed-forward block graphs: value 0 is the model input, op i produces
// value i+1. Linear consumes value `a` through layers[layer]; Silu and the
// binary ops consume values `a` (and `b`).
struct BlockOp {
  enum class Kind { Linear, Silu, Multiply, Add };
  Kind kind = Kind::Linear;
  int a = 0;
  int b = -1;
  int layer = -1;
};

FpMatrix forward_model(std::span<const QuikLinearLayer> layers, std::span<const BlockOp> ops,
                       const FpMatrix &x);

// All intermediate values: element 0 is the input, element i+1 the output of
// op i. forward_model returns the last entry.
std::vector<FpMatrix> forward_model_trace(std::span<const QuikLinearLayer> layers,
                                          std::span<const BlockOp> ops, const FpMatrix &x);

// up/gate/SiLU/Hadamard/down wiring over layers {0: up, 1: gate, 2: down}.
std::vector<BlockOp> gated_mlp_ops();

// Per-layer precision assignment (bits 4, 8, or 0 for FP) plus outlier counts.
struct LayerPrecisionPolicy {
  std::vector<int> bits;
  std::vector<int64_t> outlier_counts;

  static LayerPrecisionPolicy from_sensitivity(const SensitivityReport &report,
                                               int64_t default_outliers);
};

} // namespace quik
