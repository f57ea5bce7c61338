#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "quik/matrix.hpp"
#include "quik/runtime.hpp"

namespace quik {

// Declarative architecture description driving the FLOP / memory / roofline
// analyzers. Layer classes: attn, mlp-up, mlp-gate, mlp-down, fc.
struct LayerSpec {
  std::string name;
  std::string cls;
  int64_t in_features = 0;
  int64_t out_features = 0;
  int64_t count = 1; // replication across blocks
};

struct ClassPolicy {
  std::string precision = "int4"; // int4 | int8 | fp
  int64_t outliers = 0;
};

struct ModelArchSpec {
  std::string name;
  std::vector<LayerSpec> layers;
  std::map<std::string, ClassPolicy> policy; // keyed by layer class

  static ModelArchSpec from_json(const nlohmann::json &j);
  static ModelArchSpec load_file(const std::filesystem::path &path);
  const ClassPolicy &policy_for(const std::string &cls) const;
  void validate() const;
};

// Per-precision share of the linear-layer multiply-accumulates. MAC counts are
// exact integers (outlier MACs per layer are count * out * k), so the three
// fractions share one denominator and sum to 1.
struct FlopBreakdown {
  double int4_frac = 0, int8_frac = 0, fp_frac = 0;
  uint64_t int4_macs = 0, int8_macs = 0, fp_macs = 0;
  uint64_t total_macs = 0;
};
FlopBreakdown flop_breakdown(const ModelArchSpec &arch);

// Weight-storage estimate: packed base + FP outlier columns + scales/wReduced.
// Full-precision values are counted at 2 bytes (FP16-equivalent accounting).
struct MemoryEstimate {
  uint64_t base_bytes = 0;
  uint64_t outlier_bytes = 0;
  uint64_t scale_bytes = 0;
  uint64_t total_bytes() const { return base_bytes + outlier_bytes + scale_bytes; }
};
MemoryEstimate memory_estimate(const ModelArchSpec &arch);

// Peak throughput per precision plus memory bandwidth.
struct DeviceSpec {
  std::map<std::string, double> peak_ops; // ops/s keyed by precision name
  double bandwidth = 0;                   // bytes/s

  double peak_for(const std::string &precision) const;
  // Commodity-GPU defaults in the RTX 3090 range.
  static DeviceSpec commodity_gpu();
};

// AI = 2*m*n*k / bytes(A, B, C each touched once); compute-bound iff
// AI >= peak / bandwidth.
struct RooflineResult {
  double arithmetic_intensity = 0;
  double machine_balance = 0;
  bool compute_bound = false;
};
RooflineResult roofline_classify(int64_t m_tokens, int64_t n, int64_t k,
                                 double bytes_per_element, const DeviceSpec &device,
                                 const std::string &precision = "fp32");

// Relative Frobenius error ||A - R||_F / ||R||_F (0 when both are zero,
// +infinity when only the reference is zero) plus the max elementwise error.
struct ErrorReport {
  double rel_frobenius = 0;
  double max_abs_err = 0;
  std::vector<std::pair<std::string, double>> per_layer; // optional breakdown
};
ErrorReport error_report(const FpMatrix &reference, const FpMatrix &actual);

// Runs a block graph in its configured modes and again in FpReference mode
// (every layer needs its original weights), reporting the final error plus a
// per-linear-op breakdown of where the error has accumulated.
ErrorReport model_error_report(std::span<const QuikLinearLayer> layers,
                               std::span<const BlockOp> ops, const FpMatrix &x);

} // namespace quik
