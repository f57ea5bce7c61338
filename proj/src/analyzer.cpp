#include "quik/analyzer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <stdexcept>

namespace quik {

namespace {

const std::set<std::string> kLayerClasses = {"attn", "mlp-up", "mlp-gate", "mlp-down", "fc"};
const std::set<std::string> kPrecisions = {"int4", "int8", "fp"};

int64_t outlier_cols(const LayerSpec &layer, const ClassPolicy &policy) {
  return std::min(policy.outliers, layer.in_features);
}

} // namespace

ModelArchSpec ModelArchSpec::from_json(const nlohmann::json &j) {
  ModelArchSpec arch;
  try {
    if (j.contains("name")) arch.name = j["name"].get<std::string>();
    for (const auto &jl : j.at("layers")) {
      LayerSpec l;
      l.name = jl.at("name").get<std::string>();
      l.cls = jl.at("class").get<std::string>();
      l.in_features = jl.at("in_features").get<int64_t>();
      l.out_features = jl.at("out_features").get<int64_t>();
      l.count = jl.value("count", int64_t{1});
      arch.layers.push_back(std::move(l));
    }
    for (const auto &[cls, jp] : j.at("policy").items()) {
      ClassPolicy p;
      p.precision = jp.at("precision").get<std::string>();
      p.outliers = jp.value("outliers", int64_t{0});
      arch.policy[cls] = p;
    }
  } catch (const nlohmann::json::exception &e) {
    throw FormatError(std::string("invalid arch spec: ") + e.what());
  }
  arch.validate();
  return arch;
}

ModelArchSpec ModelArchSpec::load_file(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open arch spec: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception &e) {
    throw FormatError(std::string("invalid arch spec JSON: ") + e.what());
  }
  return from_json(j);
}

const ClassPolicy &ModelArchSpec::policy_for(const std::string &cls) const {
  const auto it = policy.find(cls);
  if (it == policy.end()) throw FormatError("arch spec has no policy for class '" + cls + "'");
  return it->second;
}

void ModelArchSpec::validate() const {
  if (layers.empty()) throw FormatError("arch spec has no layers");
  for (const LayerSpec &l : layers) {
    if (l.in_features <= 0 || l.out_features <= 0 || l.count <= 0) {
      throw FormatError("arch layer '" + l.name + "' has non-positive dimensions");
    }
    if (!kLayerClasses.count(l.cls)) {
      throw FormatError("arch layer '" + l.name + "' has unknown class '" + l.cls + "'");
    }
    policy_for(l.cls);
  }
  for (const auto &[cls, p] : policy) {
    if (!kLayerClasses.count(cls)) throw FormatError("policy references unknown class '" + cls + "'");
    if (!kPrecisions.count(p.precision)) {
      throw FormatError("policy for '" + cls + "' has unknown precision '" + p.precision + "'");
    }
    if (p.outliers < 0) throw FormatError("policy for '" + cls + "' has negative outlier count");
  }
}

FlopBreakdown flop_breakdown(const ModelArchSpec &arch) {
  arch.validate();
  FlopBreakdown b;
  for (const LayerSpec &l : arch.layers) {
    const ClassPolicy &p = arch.policy_for(l.cls);
    const uint64_t macs = static_cast<uint64_t>(l.count) * l.in_features * l.out_features;
    b.total_macs += macs;
    if (p.precision == "fp") {
      b.fp_macs += macs;
      continue;
    }
    // Outlier columns run in FP; the rest in the layer's base precision. The
    // per-layer split count * out * k is exact.
    const uint64_t fp = static_cast<uint64_t>(l.count) * l.out_features * outlier_cols(l, p);
    b.fp_macs += fp;
    if (p.precision == "int4") {
      b.int4_macs += macs - fp;
    } else {
      b.int8_macs += macs - fp;
    }
  }
  const double total = static_cast<double>(b.total_macs);
  b.int4_frac = static_cast<double>(b.int4_macs) / total;
  b.int8_frac = static_cast<double>(b.int8_macs) / total;
  b.fp_frac = static_cast<double>(b.fp_macs) / total;
  return b;
}

MemoryEstimate memory_estimate(const ModelArchSpec &arch) {
  arch.validate();
  MemoryEstimate m;
  for (const LayerSpec &l : arch.layers) {
    const ClassPolicy &p = arch.policy_for(l.cls);
    const uint64_t count = static_cast<uint64_t>(l.count);
    if (p.precision == "fp") {
      m.base_bytes += count * l.in_features * l.out_features * 2;
      continue;
    }
    const int64_t k = outlier_cols(l, p);
    const int64_t base_cols = l.in_features - k;
    const uint64_t row_bytes =
        p.precision == "int4" ? static_cast<uint64_t>((base_cols + 1) / 2)
                              : static_cast<uint64_t>(base_cols);
    m.base_bytes += count * l.out_features * row_bytes;
    m.outlier_bytes += count * l.out_features * static_cast<uint64_t>(k) * 2;
    m.scale_bytes += count * l.out_features * 2 * 2; // scale + wReduced, FP16-equivalent
  }
  return m;
}

double DeviceSpec::peak_for(const std::string &precision) const {
  const auto it = peak_ops.find(precision);
  if (it == peak_ops.end()) {
    throw std::invalid_argument("device spec has no peak for precision '" + precision + "'");
  }
  return it->second;
}

DeviceSpec DeviceSpec::commodity_gpu() {
  DeviceSpec d;
  d.peak_ops["fp32"] = 35.6e12;
  d.peak_ops["fp16"] = 71e12;
  d.peak_ops["int8"] = 142e12;
  d.peak_ops["int4"] = 284e12;
  d.bandwidth = 936e9;
  return d;
}

RooflineResult roofline_classify(int64_t m_tokens, int64_t n, int64_t k,
                                 double bytes_per_element, const DeviceSpec &device,
                                 const std::string &precision) {
  if (m_tokens <= 0 || n <= 0 || k <= 0 || bytes_per_element <= 0) {
    throw std::invalid_argument("roofline_classify: dimensions must be positive");
  }
  if (device.bandwidth <= 0) throw std::invalid_argument("device bandwidth must be positive");
  const double flops = 2.0 * static_cast<double>(m_tokens) * static_cast<double>(n) *
                       static_cast<double>(k);
  const double elems = static_cast<double>(m_tokens) * k + static_cast<double>(n) * k +
                       static_cast<double>(m_tokens) * n;
  RooflineResult r;
  r.arithmetic_intensity = flops / (elems * bytes_per_element);
  r.machine_balance = device.peak_for(precision) / device.bandwidth;
  r.compute_bound = r.arithmetic_intensity >= r.machine_balance;
  return r;
}

ErrorReport error_report(const FpMatrix &reference, const FpMatrix &actual) {
  check_same_shape(reference, actual, "error_report");
  double diff2 = 0, ref2 = 0, maxd = 0;
  for (size_t i = 0; i < reference.data.size(); ++i) {
    const double d = static_cast<double>(actual.data[i]) - reference.data[i];
    diff2 += d * d;
    ref2 += static_cast<double>(reference.data[i]) * reference.data[i];
    maxd = std::max(maxd, std::fabs(d));
  }
  ErrorReport r;
  r.max_abs_err = maxd;
  if (ref2 == 0.0) {
    r.rel_frobenius = diff2 == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  } else {
    r.rel_frobenius = std::sqrt(diff2) / std::sqrt(ref2);
  }
  return r;
}

ErrorReport model_error_report(std::span<const QuikLinearLayer> layers,
                               std::span<const BlockOp> ops, const FpMatrix &x) {
  std::vector<QuikLinearLayer> ref_layers(layers.begin(), layers.end());
  for (QuikLinearLayer &l : ref_layers) {
    if (l.reference_weights.empty()) {
      throw std::invalid_argument("model_error_report: every layer needs reference weights");
    }
    l.mode = LayerMode::FpReference;
  }
  const std::vector<FpMatrix> got = forward_model_trace(layers, ops, x);
  const std::vector<FpMatrix> ref = forward_model_trace(ref_layers, ops, x);

  ErrorReport report = error_report(ref.back(), got.back());
  for (size_t i = 0; i < ops.size(); ++i) {
    if (ops[i].kind != BlockOp::Kind::Linear) continue;
    const ErrorReport layer_err = error_report(ref[i + 1], got[i + 1]);
    report.per_layer.emplace_back("op" + std::to_string(i) + "/layer" +
                                      std::to_string(ops[i].layer),
                                  layer_err.rel_frobenius);
  }
  return report;
}

} // namespace quik
