// Command-line front end: offline weight quantization, forward-pass checks,
// calibration, FLOP/memory/roofline analysis, and the kernel-variant bench.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "quik/analyzer.hpp"
#include "quik/bench.hpp"
#include "quik/container.hpp"
#include "quik/layer_io.hpp"
#include "quik/quantizer.hpp"
#include "quik/runtime.hpp"

namespace {

using nlohmann::json;

std::vector<quik::FpMatrix> load_activation_batches(const std::filesystem::path &dir) {
  const quik::TensorContainer c = quik::TensorContainer::read(dir);
  std::vector<quik::FpMatrix> batches;
  for (const quik::TensorEntry &e : c.tensors) {
    if (e.dtype == quik::Dtype::F32 && e.shape.size() == 2) {
      batches.push_back(c.get_f32(e.name));
    }
  }
  if (batches.empty()) {
    throw quik::FormatError("no 2-d f32 activation tensors in " + dir.string());
  }
  return batches;
}

double gb(uint64_t bytes) { return static_cast<double>(bytes) / 1e9; }

// ----------------------------------------------------------------- quantize

struct QuantizeArgs {
  std::string input, output, calib;
  int bits = 4;
  int64_t outliers = 256;
  double outlier_pct = -1.0;
  double threshold = -1.0;
  bool clip = false;
  std::string sparsity = "none";
  double damping = 0.01;
};

int cmd_quantize(const QuantizeArgs &args) {
  const quik::TensorContainer in = quik::TensorContainer::read(args.input);
  const quik::FpMatrix w = in.get_f32("weight");
  const auto batches = load_activation_batches(args.calib);

  quik::CalibStats stats;
  for (const auto &b : batches) stats.accumulate(b);
  if (stats.feature_count != w.cols) {
    throw quik::FormatError("calibration features (" + std::to_string(stats.feature_count) +
                            ") do not match weight columns (" + std::to_string(w.cols) + ")");
  }

  int64_t k = args.outliers;
  if (args.outlier_pct >= 0.0) {
    k = quik::outlier_count_from_pct(w.cols, args.outlier_pct / 100.0);
  }
  if (args.threshold >= 0.0) {
    float scale_max = 0.0f;
    for (const auto &b : batches) {
      const quik::ActQuantResult aq = quik::quantize_activations(b, args.bits);
      for (float s : aq.scale) scale_max = std::max(scale_max, s);
    }
    k = quik::zero_outlier_rule({&scale_max, 1}, static_cast<float>(args.threshold), k)[0];
    std::cout << "activation scale max " << scale_max << " vs threshold " << args.threshold
              << " -> " << k << " outliers\n";
  }
  if (k >= w.cols) {
    throw quik::FormatError("outlier count " + std::to_string(k) +
                            " must stay below the feature count " + std::to_string(w.cols));
  }

  const quik::OutlierSet oset = quik::select_outliers(stats, k);
  const quik::Hessian h = quik::build_hessian(batches, args.damping);

  quik::QuikLinearLayer layer;
  layer.weights = args.sparsity == "2:4"
                      ? quik::sparsegpt_joint(w, h, oset, args.bits, args.clip)
                      : quik::gptq_quantize(w, h, oset, args.bits, args.clip);
  layer.outliers = oset;
  layer.act_bits = args.bits;
  if (in.contains("bias")) layer.bias = in.get_f32_vector("bias");
  layer.reference_weights = w;
  quik::save_layer(layer, args.output);

  std::cout << "quantized " << w.rows << "x" << w.cols << " layer to " << args.bits
            << "-bit with " << k << " outliers"
            << (args.sparsity == "2:4" ? ", 2:4 sparse" : "") << " -> " << args.output << "\n";
  return 0;
}

// ----------------------------------------------------------------- run

int cmd_run(const std::string &layer_dir, const std::string &input_dir,
            const std::string &mode_name, const std::string &output_dir, bool as_json) {
  quik::QuikLinearLayer layer = quik::load_layer(layer_dir);
  if (mode_name == "weight-only") {
    layer.mode = quik::LayerMode::WeightOnly;
  } else if (mode_name == "reference") {
    layer.mode = quik::LayerMode::FpReference;
  }

  const quik::TensorContainer in = quik::TensorContainer::read(input_dir);
  const quik::FpMatrix x = in.get_f32(in.contains("input") ? "input" : in.tensors.front().name);

  const quik::FpMatrix out = quik::quik_matmul(layer, x);

  quik::QuikLinearLayer ref_layer = layer;
  ref_layer.mode = quik::LayerMode::FpReference;
  const quik::FpMatrix ref = quik::quik_matmul(ref_layer, x);
  const quik::ErrorReport report = quik::error_report(ref, out);

  if (!output_dir.empty()) {
    quik::TensorContainer oc;
    oc.add_f32("output", out);
    oc.metadata["mode"] = mode_name;
    oc.write(output_dir);
  }
  if (as_json) {
    json j;
    j["mode"] = mode_name;
    j["rel_frobenius"] = report.rel_frobenius;
    j["max_abs_err"] = report.max_abs_err;
    std::cout << j.dump(2) << "\n";
  } else {
    std::printf("mode %-12s rel_frobenius %.6e  max_abs_err %.6e\n", mode_name.c_str(),
                report.rel_frobenius, report.max_abs_err);
  }
  return 0;
}

// ----------------------------------------------------------------- calibrate

int cmd_calibrate(const std::string &acts_dir, const std::string &out_dir) {
  const auto batches = load_activation_batches(acts_dir);
  quik::CalibStats stats;
  for (const auto &b : batches) stats.accumulate(b);

  const auto var = stats.variance();
  std::vector<float> mean_f(stats.mean.begin(), stats.mean.end());
  std::vector<float> var_f(var.begin(), var.end());

  quik::TensorContainer c;
  c.add_f32("max_abs", stats.max_abs);
  c.add_f32("mean", mean_f);
  c.add_f32("variance", var_f);
  c.metadata["format"] = "quik-calib-stats";
  c.metadata["token_count"] = stats.token_count;
  c.metadata["feature_count"] = stats.feature_count;
  c.write(out_dir);
  std::cout << "calibrated " << stats.token_count << " tokens x " << stats.feature_count
            << " features -> " << out_dir << "\n";
  return 0;
}

// ----------------------------------------------------------------- analyze

int cmd_analyze_flops(const std::string &arch_file, bool as_json) {
  const auto arch = quik::ModelArchSpec::load_file(arch_file);
  const quik::FlopBreakdown b = quik::flop_breakdown(arch);
  if (as_json) {
    json j;
    j["arch"] = arch.name;
    j["int4_frac"] = b.int4_frac;
    j["int8_frac"] = b.int8_frac;
    j["fp_frac"] = b.fp_frac;
    j["total_macs"] = b.total_macs;
    std::cout << j.dump(2) << "\n";
  } else {
    std::printf("INT4 %6.2f%%  (%" PRIu64 " MACs)\n", 100.0 * b.int4_frac, b.int4_macs);
    std::printf("INT8 %6.2f%%  (%" PRIu64 " MACs)\n", 100.0 * b.int8_frac, b.int8_macs);
    std::printf("FP   %6.2f%%  (%" PRIu64 " MACs)\n", 100.0 * b.fp_frac, b.fp_macs);
  }
  return 0;
}

int cmd_analyze_memory(const std::string &arch_file, bool as_json) {
  const auto arch = quik::ModelArchSpec::load_file(arch_file);
  const quik::MemoryEstimate m = quik::memory_estimate(arch);
  if (as_json) {
    json j;
    j["arch"] = arch.name;
    j["base_bytes"] = m.base_bytes;
    j["outlier_bytes"] = m.outlier_bytes;
    j["scale_bytes"] = m.scale_bytes;
    j["total_bytes"] = m.total_bytes();
    std::cout << j.dump(2) << "\n";
  } else {
    std::printf("base weights    %10.3f GB\n", gb(m.base_bytes));
    std::printf("outlier weights %10.3f GB\n", gb(m.outlier_bytes));
    std::printf("scales/wReduced %10.3f GB\n", gb(m.scale_bytes));
    std::printf("total           %10.3f GB\n", gb(m.total_bytes()));
  }
  return 0;
}

struct RooflineArgs {
  int64_t m = 1, n = 0, k = 0;
  double bytes_per_element = 4.0;
  double peak = 0.0, bandwidth = 0.0;
  std::string precision = "fp32";
  std::string arch_file;
};

int cmd_analyze_roofline(const RooflineArgs &args, bool as_json) {
  quik::DeviceSpec device = quik::DeviceSpec::commodity_gpu();
  if (args.peak > 0) device.peak_ops[args.precision] = args.peak;
  if (args.bandwidth > 0) device.bandwidth = args.bandwidth;

  std::vector<std::pair<std::string, quik::RooflineResult>> rows;
  if (!args.arch_file.empty()) {
    const auto arch = quik::ModelArchSpec::load_file(args.arch_file);
    for (const auto &l : arch.layers) {
      rows.emplace_back(l.name, quik::roofline_classify(args.m, l.out_features, l.in_features,
                                                        args.bytes_per_element, device,
                                                        args.precision));
    }
  } else {
    if (args.n <= 0 || args.k <= 0) {
      throw CLI::ValidationError("roofline", "--n and --k are required without --arch");
    }
    rows.emplace_back("matmul", quik::roofline_classify(args.m, args.n, args.k,
                                                        args.bytes_per_element, device,
                                                        args.precision));
  }

  if (as_json) {
    json out = json::array();
    for (const auto &[name, r] : rows) {
      out.push_back({{"name", name},
                     {"arithmetic_intensity", r.arithmetic_intensity},
                     {"machine_balance", r.machine_balance},
                     {"bound", r.compute_bound ? "compute" : "memory"}});
    }
    std::cout << out.dump(2) << "\n";
  } else {
    for (const auto &[name, r] : rows) {
      std::printf("%-16s m=%-6" PRId64 " AI %8.2f FLOP/B  balance %7.2f  -> %s-bound\n",
                  name.c_str(), args.m, r.arithmetic_intensity, r.machine_balance,
                  r.compute_bound ? "compute" : "memory");
    }
  }
  return 0;
}

// ----------------------------------------------------------------- bench

std::vector<quik::BenchSize> parse_sizes(const std::vector<std::string> &specs) {
  std::vector<quik::BenchSize> sizes;
  for (const std::string &s : specs) {
    quik::BenchSize b;
    if (std::sscanf(s.c_str(), "%" SCNd64 "x%" SCNd64 "x%" SCNd64, &b.tokens, &b.in_features,
                    &b.out_features) != 3 ||
        b.tokens <= 0 || b.in_features <= 0 || b.out_features <= 0) {
      throw CLI::ValidationError("--sizes", "expected TOKENSxIN_FEATURESxOUT_FEATURES, got '" +
                                                s + "'");
    }
    sizes.push_back(b);
  }
  return sizes;
}

int cmd_bench(const std::vector<std::string> &size_specs, int bits, int64_t outliers,
              int repeats, bool as_json) {
  const auto sizes = parse_sizes(size_specs);
  const auto results = quik::run_bench(sizes, bits, outliers, repeats);

  if (as_json) {
    json out = json::array();
    for (const auto &r : results) {
      json jr;
      jr["tokens"] = r.size.tokens;
      jr["in_features"] = r.size.in_features;
      jr["out_features"] = r.size.out_features;
      for (int v = 0; v < 3; ++v) {
        const quik::StageTimes &t = r.variant_times[static_cast<size_t>(v)];
        jr["v" + std::to_string(v + 1)] = {
            {"split_ms", t.split_ms},         {"quantize_ms", t.quantize_ms},
            {"int_matmul_ms", t.int_matmul_ms}, {"fp_matmul_ms", t.fp_matmul_ms},
            {"dequantize_ms", t.dequantize_ms}, {"add_ms", t.add_ms},
            {"total_ms", r.total_ms[static_cast<size_t>(v)]}};
      }
      out.push_back(jr);
    }
    std::cout << out.dump(2) << "\n";
    return 0;
  }

  for (const auto &r : results) {
    std::printf("%" PRId64 "x%" PRId64 "x%" PRId64 "  (%d-bit, %" PRId64 " outliers, medians in ms)\n",
                r.size.tokens, r.size.in_features, r.size.out_features, r.bits, r.outliers);
    std::printf("  %-10s %10s %10s %10s %10s %10s %10s %10s\n", "variant", "split", "quantize",
                "int_mm", "fp_mm", "dequant", "add", "total");
    const char *names[3] = {"v1", "v2 fusedQ", "v3 fusedQD"};
    for (int v = 0; v < 3; ++v) {
      const quik::StageTimes &t = r.variant_times[static_cast<size_t>(v)];
      std::printf("  %-10s %10.3f %10.3f %10.3f %10.3f %10.3f %10.3f %10.3f\n", names[v],
                  t.split_ms, t.quantize_ms, t.int_matmul_ms, t.fp_matmul_ms, t.dequantize_ms,
                  t.add_ms, r.total_ms[static_cast<size_t>(v)]);
    }
  }
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"QUIK mixed-precision quantization toolkit"};
  app.require_subcommand(1);
  app.fallthrough(); // let --json appear after a subcommand
  bool as_json = false;
  app.add_flag("--json", as_json, "emit machine-readable JSON reports");

  QuantizeArgs qa;
  auto *quantize = app.add_subcommand("quantize", "quantize a weight container into a layer bundle");
  quantize->add_option("input", qa.input, "container directory holding 'weight' (f32)")->required();
  quantize->add_option("-o,--output", qa.output, "output layer bundle directory")->required();
  quantize->add_option("--bits", qa.bits, "base precision")->check(CLI::IsMember({4, 8}));
  quantize->add_option("--outliers", qa.outliers, "outlier column count")
      ->check(CLI::NonNegativeNumber);
  quantize->add_option("--outlier-pct", qa.outlier_pct,
                       "outlier percentage of input features (overrides --outliers)");
  quantize->add_option("--threshold", qa.threshold,
                       "zero-outlier threshold on the max activation scale");
  quantize->add_flag("--clip-search", qa.clip, "per-row linear search over clipping factors");
  quantize->add_option("--sparsity", qa.sparsity, "none or 2:4")
      ->check(CLI::IsMember({"none", "2:4"}));
  quantize->add_option("--calib", qa.calib, "calibration activations container")->required();
  quantize->add_option("--damping", qa.damping, "Hessian damping fraction");

  std::string run_layer, run_input, run_mode = "quik", run_output;
  auto *run = app.add_subcommand("run", "forward a layer bundle and report error vs FP reference");
  run->add_option("layer", run_layer, "layer bundle directory")->required();
  run->add_option("--input", run_input, "container directory holding 'input' (f32)")->required();
  run->add_option("--mode", run_mode, "quik | weight-only | reference")
      ->check(CLI::IsMember({"quik", "weight-only", "reference"}));
  run->add_option("-o,--output", run_output, "optional output container directory");

  std::string cal_in, cal_out;
  auto *calibrate = app.add_subcommand("calibrate", "accumulate activation statistics");
  calibrate->add_option("acts", cal_in, "activations container directory")->required();
  calibrate->add_option("-o,--output", cal_out, "stats container directory")->required();

  auto *analyze = app.add_subcommand("analyze", "FLOP / memory / roofline accounting");
  analyze->require_subcommand(1);
  std::string flops_arch, mem_arch;
  auto *flops = analyze->add_subcommand("flops", "per-precision FLOP breakdown");
  flops->add_option("--arch", flops_arch, "architecture spec JSON")->required();
  auto *memory = analyze->add_subcommand("memory", "weight storage estimate");
  memory->add_option("--arch", mem_arch, "architecture spec JSON")->required();
  RooflineArgs ra;
  auto *roofline = analyze->add_subcommand("roofline", "arithmetic-intensity classification");
  roofline->add_option("--m", ra.m, "token count (rows of the activation matrix)");
  roofline->add_option("--n", ra.n, "output features");
  roofline->add_option("--k", ra.k, "input features");
  roofline->add_option("--bytes-per-element", ra.bytes_per_element, "element size in bytes");
  roofline->add_option("--peak", ra.peak, "device peak ops/s for --precision");
  roofline->add_option("--bandwidth", ra.bandwidth, "device memory bandwidth bytes/s");
  roofline->add_option("--precision", ra.precision, "precision key (fp32, fp16, int8, int4)");
  roofline->add_option("--arch", ra.arch_file, "classify every layer of an arch spec instead");

  std::vector<std::string> bench_sizes;
  int bench_bits = 4, bench_repeats = 5;
  int64_t bench_outliers = 256;
  auto *bench = app.add_subcommand("bench", "time the v1/v2/v3 kernel variants");
  bench->add_option("--sizes", bench_sizes, "problem sizes, TOKENSxIN_FEATURESxOUT_FEATURES")
      ->required()
      ->delimiter(',');
  bench->add_option("--bits", bench_bits, "base precision")->check(CLI::IsMember({4, 8}));
  bench->add_option("--outliers", bench_outliers, "outlier column count");
  bench->add_option("--repeats", bench_repeats, "timed repetitions per variant")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*quantize) return cmd_quantize(qa);
    if (*run) return cmd_run(run_layer, run_input, run_mode, run_output, as_json);
    if (*calibrate) return cmd_calibrate(cal_in, cal_out);
    if (*flops) return cmd_analyze_flops(flops_arch, as_json);
    if (*memory) return cmd_analyze_memory(mem_arch, as_json);
    if (*roofline) return cmd_analyze_roofline(ra, as_json);
    if (*bench) return cmd_bench(bench_sizes, bench_bits, bench_outliers, bench_repeats, as_json);
  } catch (const quik::NumericalError &e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const CLI::ParseError &e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
