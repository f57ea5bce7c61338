#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "quik/matrix.hpp"

namespace quik {

// Streaming per-feature activation statistics over a calibration set.
// Batches may be accumulated in any order or in parallel and merged; the merge
// is associative (max exactly, mean/variance up to floating-point roundoff).
struct CalibStats {
  int64_t feature_count = 0;
  int64_t token_count = 0;
  std::vector<float> max_abs;  // l-infinity norm per feature over all tokens
  std::vector<double> mean;    // running per-feature mean
  std::vector<double> m2;      // sum of squared deviations from the mean

  CalibStats() = default;
  explicit CalibStats(int64_t features)
      : feature_count(features), max_abs(features, 0.0f), mean(features, 0.0),
        m2(features, 0.0) {}

  void accumulate(const FpMatrix &batch);
  static CalibStats merge(const CalibStats &a, const CalibStats &b);

  // Population variance per feature (m2 / token_count).
  std::vector<double> variance() const;
  double mean_variance() const;
};

// Outlier feature columns and the induced column permutation that moves them
// to the tail. permutation[new_index] = old_index; the relative order of
// non-outliers and of outliers is preserved.
struct OutlierSet {
  int64_t feature_count = 0;
  std::vector<int64_t> indices;     // sorted ascending
  std::vector<int64_t> permutation; // size feature_count

  static OutlierSet from_indices(int64_t feature_count, std::vector<int64_t> indices);
  static OutlierSet none(int64_t feature_count) { return from_indices(feature_count, {}); }

  int64_t outlier_count() const { return static_cast<int64_t>(indices.size()); }
  int64_t base_count() const { return feature_count - outlier_count(); }
  std::vector<int64_t> inverse_permutation() const;
};

// The k columns with largest max-abs; ties broken by lower index first.
OutlierSet select_outliers(const CalibStats &stats, int64_t k);

// A layer keeps zero outliers iff its activation-scale maximum is below the
// threshold; otherwise it keeps default_k.
std::vector<int64_t> zero_outlier_rule(std::span<const float> per_layer_scale_max,
                                       float threshold, int64_t default_k);

// Per-layer 4-bit/8-bit recommendation from mean input variance.
struct SensitivityReport {
  std::vector<double> mean_variance; // one value per layer, for plotting
  std::vector<int> recommended_bits; // 4 or 8 per layer
};
SensitivityReport sensitivity_report(std::span<const CalibStats> per_layer_stats,
                                     double variance_threshold);

// Output column i = input column perm(i); with inverse set, perm^-1 instead.
FpMatrix permute_columns(const FpMatrix &m, const OutlierSet &o, bool inverse);

// ceil(pct * features), rounded up to a multiple of 16 for packing friendliness.
int64_t outlier_count_from_pct(int64_t features, double pct);

} // namespace quik
