#include "quik/runtime.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace quik {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

inline void packed_store(uint8_t *row_bytes, int64_t c, int bits, int stored) {
  if (bits == 8) {
    row_bytes[c] = static_cast<uint8_t>(static_cast<int8_t>(stored));
    return;
  }
  const uint8_t biased = static_cast<uint8_t>(stored + 8);
  uint8_t &b = row_bytes[c / 2];
  b = (c % 2 == 0) ? static_cast<uint8_t>((b & 0xF0) | biased)
                   : static_cast<uint8_t>((b & 0x0F) | (biased << 4));
}

// One token row: min/max reduction, then quantize-and-pack. `idx` selects the
// base columns of `vals` (nullptr means the row is already base-only). Both
// the fused and the unfused path funnel through this function so their float
// operation sequences are identical.
inline void quantize_token_row(const float *vals, const int64_t *idx, int64_t n, int bits,
                               uint8_t *packed_row, float &scale_out, float &zero_out) {
  const int levels = (1 << bits) - 1;
  const int half_range = 1 << (bits - 1);
  float vmin = 0.0f, vmax = 0.0f;
  bool finite = true;
  for (int64_t i = 0; i < n; ++i) {
    const float v = idx ? vals[idx[i]] : vals[i];
    finite = finite && std::isfinite(v);
    if (i == 0) {
      vmin = vmax = v;
    } else {
      if (v < vmin) vmin = v;
      if (v > vmax) vmax = v;
    }
  }
  if (!finite) throw NumericalError("activation quantization: non-finite input value");

  const float range = vmax - vmin;
  const float scale = range == 0.0f ? 1.0f : range / static_cast<float>(levels);
  for (int64_t i = 0; i < n; ++i) {
    const float v = idx ? vals[idx[i]] : vals[i];
    const long q = std::lround((v - vmin) / scale); // ties away from zero
    int stored = static_cast<int>(q) - half_range;
    if (stored < -half_range) stored = -half_range;
    if (stored > half_range - 1) stored = half_range - 1;
    packed_store(packed_row, i, bits, stored);
  }
  scale_out = scale;
  zero_out = vmin;
}

// out[t][r] for the dequantization epilogue; the single definition keeps all
// pipeline variants bit-identical.
inline float dequant_element(int32_t acc, float scale_act, float scale_w, float zero_act,
                             float half_range, float wreduced) {
  float v = static_cast<float>(acc) * scale_act;
  v *= scale_w;
  float shift = zero_act + half_range * scale_act;
  shift *= wreduced;
  return v + shift;
}

void check_bits(int bits) {
  if (bits != 4 && bits != 8) throw std::invalid_argument("activation bits must be 4 or 8");
}

ActQuantResult make_act_result(int64_t tokens, int64_t base, int bits) {
  ActQuantResult r;
  r.packed.rows = tokens;
  r.packed.cols = base;
  r.packed.bits = bits;
  r.packed.data.assign(static_cast<size_t>(tokens * r.packed.row_bytes()), 0);
  r.scale.resize(static_cast<size_t>(tokens));
  r.zero.resize(static_cast<size_t>(tokens));
  r.half_range = 1 << (bits - 1);
  return r;
}

// x_out * W_out^T + bias, FP32 accumulation.
FpMatrix fp_linear(const FpMatrix &x_outlier, const FpMatrix &w_outlier,
                   std::span<const float> bias, int64_t n_out) {
  FpMatrix out(x_outlier.rows, n_out);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (x_outlier.rows * n_out > 4096)
#endif
  for (int64_t t = 0; t < x_outlier.rows; ++t) {
    float *orow = out.row(t);
    const float *xr = x_outlier.row(t);
    for (int64_t r = 0; r < n_out; ++r) {
      float acc = bias.empty() ? 0.0f : bias[r];
      const float *wr = w_outlier.row(r);
      for (int64_t i = 0; i < x_outlier.cols; ++i) acc += xr[i] * wr[i];
      orow[r] = acc;
    }
  }
  return out;
}

FpMatrix weight_only_forward(const QuikLinearLayer &layer, const FpMatrix &x) {
  const auto [xb, xo] = split_activations(x, layer.outliers);
  const std::vector<int8_t> qvals = unpack_values(layer.weights.base);
  const int64_t n_out = layer.out_features();
  const int64_t n_base = layer.weights.base_features();
  FpMatrix out = fp_linear(xo, layer.weights.outlier_weights, layer.bias, n_out);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (x.rows * n_out > 4096)
#endif
  for (int64_t t = 0; t < x.rows; ++t) {
    const float *xr = xb.row(t);
    float *orow = out.row(t);
    for (int64_t r = 0; r < n_out; ++r) {
      const int8_t *qr = qvals.data() + r * n_base;
      const float scale = layer.weights.scales[r];
      float acc = 0.0f;
      for (int64_t j = 0; j < n_base; ++j) acc += xr[j] * (static_cast<float>(qr[j]) * scale);
      orow[r] += acc;
    }
  }
  return out;
}

FpMatrix reference_forward(const QuikLinearLayer &layer, const FpMatrix &x) {
  if (layer.reference_weights.empty()) {
    throw std::invalid_argument("FpReference mode requires the original FP weights");
  }
  if (layer.reference_weights.cols != x.cols) {
    throw std::invalid_argument("reference weights do not match input features");
  }
  return fp_linear(x, layer.reference_weights, layer.bias, layer.reference_weights.rows);
}

} // namespace

void QuikLinearLayer::validate() const {
  if (static_cast<int64_t>(outliers.indices.size()) != weights.outlier_weights.cols) {
    throw std::invalid_argument("layer: outlier index count " +
                                std::to_string(outliers.indices.size()) +
                                " != outlier weight columns " +
                                std::to_string(weights.outlier_weights.cols));
  }
  if (outliers.base_count() != weights.base_features()) {
    throw std::invalid_argument("layer: base column count mismatch");
  }
  if (!bias.empty() && static_cast<int64_t>(bias.size()) != out_features()) {
    throw std::invalid_argument("layer: bias length != out_features");
  }
  if (mode == LayerMode::Quik && act_bits != weights.bits()) {
    throw std::invalid_argument("layer: activation bits must match weight bits in quik mode");
  }
  check_bits(act_bits);
}

std::pair<FpMatrix, FpMatrix> split_activations(const FpMatrix &x, const OutlierSet &o) {
  if (x.cols != o.feature_count) {
    throw std::invalid_argument("split_activations: input has " + std::to_string(x.cols) +
                                " features, outlier set covers " +
                                std::to_string(o.feature_count));
  }
  const int64_t n_base = o.base_count();
  const int64_t n_outlier = o.outlier_count();
  FpMatrix base(x.rows, n_base), outlier(x.rows, n_outlier);
  for (int64_t t = 0; t < x.rows; ++t) {
    const float *src = x.row(t);
    float *b = base.row(t);
    float *u = outlier.row(t);
    for (int64_t j = 0; j < n_base; ++j) b[j] = src[o.permutation[j]];
    for (int64_t j = 0; j < n_outlier; ++j) u[j] = src[o.indices[j]];
  }
  return {std::move(base), std::move(outlier)};
}

ActQuantResult quantize_activations(const FpMatrix &x_base, int bits) {
  check_bits(bits);
  ActQuantResult r = make_act_result(x_base.rows, x_base.cols, bits);
  const int64_t row_bytes = r.packed.row_bytes();
  for (int64_t t = 0; t < x_base.rows; ++t) {
    quantize_token_row(x_base.row(t), nullptr, x_base.cols, bits,
                       r.packed.data.data() + t * row_bytes, r.scale[t], r.zero[t]);
  }
  return r;
}

std::pair<ActQuantResult, FpMatrix> quantize_activations_fused(const FpMatrix &x,
                                                               const OutlierSet &o, int bits) {
  check_bits(bits);
  if (x.cols != o.feature_count) {
    throw std::invalid_argument("fused quantization: input features do not match outlier set");
  }
  const int64_t n_base = o.base_count();
  const int64_t n_outlier = o.outlier_count();
  ActQuantResult r = make_act_result(x.rows, n_base, bits);
  FpMatrix outlier(x.rows, n_outlier);
  const int64_t row_bytes = r.packed.row_bytes();
  // One pass per input row: meta reduction + quantization over the base
  // columns, and the outlier gather.
  for (int64_t t = 0; t < x.rows; ++t) {
    const float *src = x.row(t);
    quantize_token_row(src, o.permutation.data(), n_base, bits,
                       r.packed.data.data() + t * row_bytes, r.scale[t], r.zero[t]);
    float *u = outlier.row(t);
    for (int64_t j = 0; j < n_outlier; ++j) u[j] = src[o.indices[j]];
  }
  return {std::move(r), std::move(outlier)};
}

FpMatrix dequantize_epilogue(const Int32Matrix &acc, const ActQuantResult &a,
                             std::span<const float> weight_scales,
                             std::span<const float> wreduced) {
  if (acc.rows != static_cast<int64_t>(a.scale.size())) {
    throw std::invalid_argument("dequantize_epilogue: token count mismatch");
  }
  if (static_cast<int64_t>(weight_scales.size()) != acc.cols ||
      static_cast<int64_t>(wreduced.size()) != acc.cols) {
    throw std::invalid_argument("dequantize_epilogue: per-row vector length mismatch");
  }
  const float hr = static_cast<float>(a.half_range);
  FpMatrix out(acc.rows, acc.cols);
  for (int64_t t = 0; t < acc.rows; ++t) {
    const float sa = a.scale[t];
    const float za = a.zero[t];
    const int32_t *arow = acc.data.data() + t * acc.cols;
    float *orow = out.row(t);
    for (int64_t r = 0; r < acc.cols; ++r) {
      orow[r] = dequant_element(arow[r], sa, weight_scales[r], za, hr, wreduced[r]);
    }
  }
  return out;
}

FpMatrix quik_matmul(const QuikLinearLayer &layer, const FpMatrix &x, PipelineVariant variant,
                     StageTimes *times) {
  layer.validate();
  if (x.cols != layer.in_features()) {
    throw std::invalid_argument("quik_matmul: input has " + std::to_string(x.cols) +
                                " features, layer expects " +
                                std::to_string(layer.in_features()));
  }
  if (layer.mode == LayerMode::FpReference) return reference_forward(layer, x);
  if (layer.mode == LayerMode::WeightOnly) return weight_only_forward(layer, x);

  StageTimes local;
  StageTimes &st = times ? *times : local;

  ActQuantResult aq;
  FpMatrix x_outlier;
  if (variant == PipelineVariant::V1Unfused) {
    auto t0 = Clock::now();
    auto [xb, xo] = split_activations(x, layer.outliers);
    st.split_ms = ms_since(t0);
    t0 = Clock::now();
    aq = quantize_activations(xb, layer.act_bits);
    st.quantize_ms = ms_since(t0);
    x_outlier = std::move(xo);
  } else {
    const auto t0 = Clock::now();
    auto [a, xo] = quantize_activations_fused(x, layer.outliers, layer.act_bits);
    st.quantize_ms = ms_since(t0);
    st.quantize_fused = true;
    aq = std::move(a);
    x_outlier = std::move(xo);
  }

  auto t0 = Clock::now();
  const Int32Matrix acc = int_matmul(aq.packed, layer.weights.base);
  st.int_matmul_ms = ms_since(t0);

  t0 = Clock::now();
  FpMatrix out = fp_linear(x_outlier, layer.weights.outlier_weights, layer.bias,
                           layer.out_features());
  st.fp_matmul_ms = ms_since(t0);

  if (variant == PipelineVariant::V3FusedEpilogue) {
    // dequantize directly into the FP result
    t0 = Clock::now();
    const float hr = static_cast<float>(aq.half_range);
    for (int64_t t = 0; t < out.rows; ++t) {
      const float sa = aq.scale[t];
      const float za = aq.zero[t];
      const int32_t *arow = acc.data.data() + t * acc.cols;
      float *orow = out.row(t);
      for (int64_t r = 0; r < out.cols; ++r) {
        orow[r] = orow[r] + dequant_element(arow[r], sa, layer.weights.scales[r], za, hr,
                                            layer.weights.wreduced[r]);
      }
    }
    st.dequantize_ms = ms_since(t0);
    st.dequantize_fused = true;
  } else {
    t0 = Clock::now();
    const FpMatrix deq = dequantize_epilogue(acc, aq, layer.weights.scales,
                                             layer.weights.wreduced);
    st.dequantize_ms = ms_since(t0);
    t0 = Clock::now();
    for (int64_t t = 0; t < out.rows; ++t) {
      float *orow = out.row(t);
      const float *drow = deq.row(t);
      for (int64_t r = 0; r < out.cols; ++r) orow[r] = orow[r] + drow[r];
    }
    st.add_ms = ms_since(t0);
  }
  return out;
}

FpMatrix forward_model(std::span<const QuikLinearLayer> layers, std::span<const BlockOp> ops,
                       const FpMatrix &x) {
  return std::move(forward_model_trace(layers, ops, x).back());
}

std::vector<FpMatrix> forward_model_trace(std::span<const QuikLinearLayer> layers,
                                          std::span<const BlockOp> ops, const FpMatrix &x) {
  std::vector<FpMatrix> values;
  values.reserve(ops.size() + 1);
  values.push_back(x);
  auto value_at = [&](int i) -> const FpMatrix & {
    if (i < 0 || i >= static_cast<int>(values.size())) {
      throw std::invalid_argument("forward_model: op references undefined value " +
                                  std::to_string(i));
    }
    return values[static_cast<size_t>(i)];
  };
  for (const BlockOp &op : ops) {
    switch (op.kind) {
    case BlockOp::Kind::Linear: {
      if (op.layer < 0 || op.layer >= static_cast<int>(layers.size())) {
        throw std::invalid_argument("forward_model: op references undefined layer " +
                                    std::to_string(op.layer));
      }
      values.push_back(quik_matmul(layers[static_cast<size_t>(op.layer)], value_at(op.a)));
      break;
    }
    case BlockOp::Kind::Silu: {
      FpMatrix v = value_at(op.a);
      for (float &e : v.data) e = e / (1.0f + std::exp(-e));
      values.push_back(std::move(v));
      break;
    }
    case BlockOp::Kind::Multiply:
    case BlockOp::Kind::Add: {
      const FpMatrix &a = value_at(op.a);
      const FpMatrix &b = value_at(op.b);
      check_same_shape(a, b, "forward_model elementwise op");
      FpMatrix v(a.rows, a.cols);
      if (op.kind == BlockOp::Kind::Multiply) {
        for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = a.data[i] * b.data[i];
      } else {
        for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = a.data[i] + b.data[i];
      }
      values.push_back(std::move(v));
      break;
    }
    }
  }
  if (values.size() == 1) throw std::invalid_argument("forward_model: empty op list");
  return values;
}

std::vector<BlockOp> gated_mlp_ops() {
  using K = BlockOp::Kind;
  return {
      {K::Linear, 0, -1, 0},   // v1 = up(x)
      {K::Linear, 0, -1, 1},   // v2 = gate(x)
      {K::Silu, 2, -1, -1},    // v3 = silu(v2)
      {K::Multiply, 3, 1, -1}, // v4 = v3 .* v1
      {K::Linear, 4, -1, 2},   // v5 = down(v4)
  };
}

LayerPrecisionPolicy LayerPrecisionPolicy::from_sensitivity(const SensitivityReport &report,
                                                            int64_t default_outliers) {
  LayerPrecisionPolicy p;
  p.bits = report.recommended_bits;
  p.outlier_counts.assign(report.recommended_bits.size(), default_outliers);
  return p;
}

} // namespace quik
