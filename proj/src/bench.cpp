#include "quik/bench.hpp"

#include <algorithm>
#include <cstring>
#include <random>

namespace quik {

namespace {

FpMatrix random_matrix(std::mt19937 &rng, int64_t rows, int64_t cols, float scale) {
  std::normal_distribution<float> dist(0.0f, scale);
  FpMatrix m(rows, cols);
  for (float &v : m.data) v = dist(rng);
  return m;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

StageTimes median_times(const std::vector<StageTimes> &runs) {
  auto collect = [&](double StageTimes::*field) {
    std::vector<double> v;
    v.reserve(runs.size());
    for (const StageTimes &t : runs) v.push_back(t.*field);
    return median(std::move(v));
  };
  StageTimes m;
  m.split_ms = collect(&StageTimes::split_ms);
  m.quantize_ms = collect(&StageTimes::quantize_ms);
  m.int_matmul_ms = collect(&StageTimes::int_matmul_ms);
  m.fp_matmul_ms = collect(&StageTimes::fp_matmul_ms);
  m.dequantize_ms = collect(&StageTimes::dequantize_ms);
  m.add_ms = collect(&StageTimes::add_ms);
  m.quantize_fused = runs.front().quantize_fused;
  m.dequantize_fused = runs.front().dequantize_fused;
  return m;
}

} // namespace

BenchResult bench_case(const BenchSize &size, int bits, int64_t outliers, int repeats,
                       uint64_t seed) {
  if (repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");
  if (outliers >= size.in_features) {
    throw std::invalid_argument("bench: outlier count must stay below in_features");
  }
  std::mt19937 rng(static_cast<uint32_t>(seed * 0x9e3779b9ull + size.in_features));

  const FpMatrix w = random_matrix(rng, size.out_features, size.in_features, 1.0f);
  FpMatrix x = random_matrix(rng, size.tokens, size.in_features, 1.0f);
  // a few heavy columns so the outlier split does real work
  std::uniform_int_distribution<int64_t> col(0, size.in_features - 1);
  std::vector<int64_t> heavy;
  for (int64_t i = 0; i < std::max<int64_t>(outliers, 1); ++i) heavy.push_back(col(rng));
  std::sort(heavy.begin(), heavy.end());
  heavy.erase(std::unique(heavy.begin(), heavy.end()), heavy.end());
  if (outliers > 0) {
    for (int64_t t = 0; t < x.rows; ++t) {
      for (int64_t c : heavy) x.at(t, c) *= 50.0f;
    }
  }

  CalibStats stats;
  stats.accumulate(x);
  const OutlierSet oset = select_outliers(stats, outliers);

  QuikLinearLayer layer;
  layer.weights = rtn_quantize_weights(w, oset, bits);
  layer.outliers = oset;
  layer.act_bits = bits;

  // correctness gate: refuse to time variants that are not bit-identical
  const FpMatrix out1 = quik_matmul(layer, x, PipelineVariant::V1Unfused);
  const FpMatrix out2 = quik_matmul(layer, x, PipelineVariant::V2FusedQuant);
  const FpMatrix out3 = quik_matmul(layer, x, PipelineVariant::V3FusedEpilogue);
  if (std::memcmp(out1.data.data(), out2.data.data(), out1.data.size() * 4) != 0 ||
      std::memcmp(out1.data.data(), out3.data.data(), out1.data.size() * 4) != 0) {
    throw NumericalError("bench: pipeline variants disagree; refusing to time them");
  }

  BenchResult result;
  result.size = size;
  result.bits = bits;
  result.outliers = oset.outlier_count();
  const std::array<PipelineVariant, 3> variants = {
      PipelineVariant::V1Unfused, PipelineVariant::V2FusedQuant,
      PipelineVariant::V3FusedEpilogue};
  for (size_t vi = 0; vi < variants.size(); ++vi) {
    std::vector<StageTimes> runs;
    quik_matmul(layer, x, variants[vi]); // warm-up
    for (int rep = 0; rep < repeats; ++rep) {
      StageTimes t;
      quik_matmul(layer, x, variants[vi], &t);
      runs.push_back(t);
    }
    result.variant_times[vi] = median_times(runs);
    result.total_ms[vi] = result.variant_times[vi].total_ms();
  }
  return result;
}

std::vector<BenchResult> run_bench(const std::vector<BenchSize> &sizes, int bits,
                                   int64_t outliers, int repeats, uint64_t seed) {
  std::vector<BenchResult> out;
  out.reserve(sizes.size());
  for (size_t i = 0; i < sizes.size(); ++i) {
    out.push_back(bench_case(sizes[i], bits, outliers, repeats, seed + i));
  }
  return out;
}

} // namespace quik
