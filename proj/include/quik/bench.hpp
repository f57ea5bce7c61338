#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "quik/runtime.hpp"

namespace quik {

struct BenchSize {
  int64_t tokens = 0;
  int64_t in_features = 0;
  int64_t out_features = 0;
};

// Median stage timings per pipeline variant for one problem size. The harness
// verifies v1/v2/v3 outputs byte-for-byte before timing and refuses to time
// mismatching variants.
struct BenchResult {
  BenchSize size;
  int bits = 4;
  int64_t outliers = 0;
  std::array<StageTimes, 3> variant_times; // indexed by PipelineVariant
  std::array<double, 3> total_ms{};
};

BenchResult bench_case(const BenchSize &size, int bits, int64_t outliers, int repeats,
                       uint64_t seed);

std::vector<BenchResult> run_bench(const std::vector<BenchSize> &sizes, int bits,
                                   int64_t outliers, int repeats, uint64_t seed = 0);

} // namespace quik
