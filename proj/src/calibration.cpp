#include "quik/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace quik {

void CalibStats::accumulate(const FpMatrix &batch) {
  if (feature_count == 0 && token_count == 0) {
    *this = CalibStats(batch.cols);
  }
  if (batch.cols != feature_count) {
    throw std::invalid_argument("CalibStats: batch has " + std::to_string(batch.cols) +
                                " features, stats track " + std::to_string(feature_count));
  }
  // Welford per token; merging whole batches via merge() gives the same result
  // up to roundoff.
  for (int64_t t = 0; t < batch.rows; ++t) {
    const float *row = batch.row(t);
    ++token_count;
    const double inv_n = 1.0 / static_cast<double>(token_count);
    for (int64_t f = 0; f < feature_count; ++f) {
      const float a = std::fabs(row[f]);
      if (a > max_abs[f]) max_abs[f] = a;
      const double delta = static_cast<double>(row[f]) - mean[f];
      mean[f] += delta * inv_n;
      m2[f] += delta * (static_cast<double>(row[f]) - mean[f]);
    }
  }
}

CalibStats CalibStats::merge(const CalibStats &a, const CalibStats &b) {
  if (a.token_count == 0) return b;
  if (b.token_count == 0) return a;
  if (a.feature_count != b.feature_count) {
    throw std::invalid_argument("CalibStats::merge: feature counts differ");
  }
  CalibStats out(a.feature_count);
  out.token_count = a.token_count + b.token_count;
  const double na = static_cast<double>(a.token_count);
  const double nb = static_cast<double>(b.token_count);
  const double n = na + nb;
  for (int64_t f = 0; f < a.feature_count; ++f) {
    out.max_abs[f] = std::max(a.max_abs[f], b.max_abs[f]);
    const double delta = b.mean[f] - a.mean[f];
    out.mean[f] = a.mean[f] + delta * nb / n;
    out.m2[f] = a.m2[f] + b.m2[f] + delta * delta * na * nb / n;
  }
  return out;
}

std::vector<double> CalibStats::variance() const {
  std::vector<double> v(feature_count, 0.0);
  if (token_count == 0) return v;
  for (int64_t f = 0; f < feature_count; ++f) {
    v[f] = m2[f] / static_cast<double>(token_count);
  }
  return v;
}

double CalibStats::mean_variance() const {
  if (feature_count == 0 || token_count == 0) return 0.0;
  const auto v = variance();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(feature_count);
}

OutlierSet OutlierSet::from_indices(int64_t feature_count, std::vector<int64_t> indices) {
  std::sort(indices.begin(), indices.end());
  for (size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= feature_count) {
      throw std::invalid_argument("OutlierSet: index " + std::to_string(indices[i]) +
                                  " outside feature range");
    }
    if (i > 0 && indices[i] == indices[i - 1]) {
      throw std::invalid_argument("OutlierSet: duplicate index " + std::to_string(indices[i]));
    }
  }
  OutlierSet o;
  o.feature_count = feature_count;
  o.indices = std::move(indices);
  o.permutation.reserve(feature_count);
  std::vector<bool> is_outlier(feature_count, false);
  for (int64_t idx : o.indices) is_outlier[idx] = true;
  for (int64_t f = 0; f < feature_count; ++f) {
    if (!is_outlier[f]) o.permutation.push_back(f);
  }
  for (int64_t idx : o.indices) o.permutation.push_back(idx);
  return o;
}

std::vector<int64_t> OutlierSet::inverse_permutation() const {
  std::vector<int64_t> inv(permutation.size());
  for (size_t i = 0; i < permutation.size(); ++i) {
    inv[static_cast<size_t>(permutation[i])] = static_cast<int64_t>(i);
  }
  return inv;
}

OutlierSet select_outliers(const CalibStats &stats, int64_t k) {
  if (k < 0 || k > stats.feature_count) {
    throw std::invalid_argument("select_outliers: k=" + std::to_string(k) + " outside [0, " +
                                std::to_string(stats.feature_count) + "]");
  }
  std::vector<int64_t> order(stats.feature_count);
  std::iota(order.begin(), order.end(), 0);
  // descending max-abs, ties broken by lower index
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return stats.max_abs[a] > stats.max_abs[b];
  });
  order.resize(static_cast<size_t>(k));
  return OutlierSet::from_indices(stats.feature_count, std::move(order));
}

std::vector<int64_t> zero_outlier_rule(std::span<const float> per_layer_scale_max,
                                       float threshold, int64_t default_k) {
  if (threshold < 0.0f) {
    throw std::invalid_argument("zero_outlier_rule: threshold must be >= 0");
  }
  std::vector<int64_t> out(per_layer_scale_max.size());
  for (size_t i = 0; i < per_layer_scale_max.size(); ++i) {
    out[i] = per_layer_scale_max[i] < threshold ? 0 : default_k;
  }
  return out;
}

SensitivityReport sensitivity_report(std::span<const CalibStats> per_layer_stats,
                                     double variance_threshold) {
  if (per_layer_stats.empty()) {
    throw std::invalid_argument("sensitivity_report: no layer stats given");
  }
  SensitivityReport r;
  for (const CalibStats &s : per_layer_stats) {
    const double mv = s.mean_variance();
    r.mean_variance.push_back(mv);
    r.recommended_bits.push_back(mv > variance_threshold ? 8 : 4);
  }
  return r;
}

FpMatrix permute_columns(const FpMatrix &m, const OutlierSet &o, bool inverse) {
  if (m.cols != o.feature_count) {
    throw std::invalid_argument("permute_columns: matrix has " + std::to_string(m.cols) +
                                " cols, permutation covers " + std::to_string(o.feature_count));
  }
  FpMatrix out(m.rows, m.cols);
  for (int64_t r = 0; r < m.rows; ++r) {
    const float *src = m.row(r);
    float *dst = out.row(r);
    if (!inverse) {
      for (int64_t c = 0; c < m.cols; ++c) dst[c] = src[o.permutation[c]];
    } else {
      for (int64_t c = 0; c < m.cols; ++c) dst[o.permutation[c]] = src[c];
    }
  }
  return out;
}

int64_t outlier_count_from_pct(int64_t features, double pct) {
  if (pct < 0.0 || pct > 1.0) {
    throw std::invalid_argument("outlier percentage must be in [0, 1]");
  }
  const int64_t raw = static_cast<int64_t>(std::ceil(pct * static_cast<double>(features)));
  const int64_t rounded = (raw + 15) / 16 * 16;
  return std::min(rounded, features);
}

} // namespace quik
