#include "quik/quantizer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace quik {

namespace {

// Nearest integer, ties away from zero, clamped to the symmetric grid.
inline int8_t quantize_to_grid(double value, double inv_scale, int maxq) {
  const double t = value * inv_scale;
  double q = std::floor(std::fabs(t) + 0.5);
  if (q > maxq) q = maxq;
  return static_cast<int8_t>(t < 0.0 ? -q : q);
}

inline double row_amax(std::span<const float> row) {
  double amax = 0.0;
  for (float v : row) amax = std::max(amax, static_cast<double>(std::fabs(v)));
  return amax;
}

// Lower Cholesky factor in place (row-major n x n); returns false when the
// matrix is not numerically positive definite.
bool cholesky_lower(std::vector<double> &a, int64_t n) {
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j <= i; ++j) {
      double s = a[i * n + j];
      for (int64_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      if (i == j) {
        if (s <= 0.0 || !std::isfinite(s)) return false;
        a[i * n + i] = std::sqrt(s);
      } else {
        a[i * n + j] = s / a[j * n + j];
      }
    }
    for (int64_t j = i + 1; j < n; ++j) a[i * n + j] = 0.0;
  }
  return true;
}

// Inverse from a lower Cholesky factor: solves L L^T X = I column by column.
std::vector<double> cholesky_inverse(const std::vector<double> &l, int64_t n) {
  std::vector<double> inv(static_cast<size_t>(n * n), 0.0);
  std::vector<double> y(static_cast<size_t>(n));
#ifdef _OPENMP
#pragma omp parallel for schedule(static) firstprivate(y)
#endif
  for (int64_t col = 0; col < n; ++col) {
    for (int64_t i = 0; i < n; ++i) {
      double s = (i == col) ? 1.0 : 0.0;
      for (int64_t k = 0; k < i; ++k) s -= l[i * n + k] * y[k];
      y[i] = s / l[i * n + i];
    }
    for (int64_t i = n - 1; i >= 0; --i) {
      double s = y[i];
      for (int64_t k = i + 1; k < n; ++k) s -= l[k * n + i] * inv[k * n + col];
      inv[i * n + col] = s / l[i * n + i];
    }
  }
  return inv;
}

// Upper Cholesky factor C of the damped, permuted inverse Hessian, so that
// H^-1 = C^T C. Row j of C drives the GPTQ update for column j.
std::vector<double> inverse_hessian_chol(const Hessian &h, std::span<const int64_t> perm) {
  const int64_t n = h.dim;
  const double lam = h.lambda();
  std::vector<double> hd(static_cast<size_t>(n * n));
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      hd[i * n + j] = h.at(perm[i], perm[j]);
    }
    hd[i * n + i] += lam;
  }
  if (!cholesky_lower(hd, n)) {
    throw NumericalError("Hessian is not positive definite after damping (lambda=" +
                         std::to_string(lam) + "); increase the damping fraction");
  }
  std::vector<double> hinv = cholesky_inverse(hd, n);
  if (!cholesky_lower(hinv, n)) {
    throw NumericalError("inverse Hessian lost positive definiteness; increase damping");
  }
  // transpose the lower factor of H^-1 into the upper factor C
  std::vector<double> c(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j <= i; ++j) c[j * n + i] = hinv[i * n + j];
  }
  return c;
}

// Shared state for the column-sequential quantizers.
struct ColumnQuantState {
  int64_t n_out = 0, n_in = 0, n_base = 0;
  int maxq = 7;
  std::vector<double> w;      // n_out x n_in, permuted, updated in place
  std::vector<double> chol;   // n_in x n_in upper factor C
  std::vector<double> scales; // n_out
  std::vector<int8_t> q;      // n_out x n_base
};

ColumnQuantState prepare_state(const FpMatrix &w, const Hessian &h, const OutlierSet &outliers,
                               int bits, bool use_clipping) {
  if (bits != 4 && bits != 8) throw std::invalid_argument("weight bits must be 4 or 8");
  if (h.dim != w.cols) {
    throw std::invalid_argument("Hessian dim " + std::to_string(h.dim) +
                                " does not match weight columns " + std::to_string(w.cols));
  }
  if (outliers.feature_count != w.cols) {
    throw std::invalid_argument("outlier set covers " + std::to_string(outliers.feature_count) +
                                " features, weights have " + std::to_string(w.cols));
  }

  ColumnQuantState st;
  st.n_out = w.rows;
  st.n_in = w.cols;
  st.n_base = outliers.base_count();
  st.maxq = (1 << (bits - 1)) - 1;
  st.w.resize(static_cast<size_t>(st.n_out * st.n_in));
  for (int64_t r = 0; r < st.n_out; ++r) {
    for (int64_t j = 0; j < st.n_in; ++j) {
      st.w[r * st.n_in + j] = w.at(r, outliers.permutation[j]);
    }
  }
  st.chol = inverse_hessian_chol(h, outliers.permutation);

  // Per-row scales over the (clipped) base columns, fixed before the column
  // recursion starts.
  st.scales.resize(static_cast<size_t>(st.n_out));
  std::vector<float> base_row(static_cast<size_t>(st.n_base));
  for (int64_t r = 0; r < st.n_out; ++r) {
    for (int64_t j = 0; j < st.n_base; ++j) {
      base_row[j] = static_cast<float>(st.w[r * st.n_in + j]);
    }
    const double amax = row_amax(base_row);
    if (amax == 0.0) {
      st.scales[r] = 1.0;
      continue;
    }
    const double clip = use_clipping ? clip_search(base_row, bits) : 1.0;
    st.scales[r] = clip * amax / st.maxq;
  }
  st.q.assign(static_cast<size_t>(st.n_out * st.n_base), 0);
  return st;
}

QuantizedWeights finish_state(ColumnQuantState &st, int bits, SparsityMask mask = {}) {
  QuantizedWeights out;
  out.base = pack_values(st.q, st.n_out, st.n_base, bits);
  out.scales.resize(static_cast<size_t>(st.n_out));
  out.wreduced.resize(static_cast<size_t>(st.n_out));
  for (int64_t r = 0; r < st.n_out; ++r) {
    out.scales[r] = static_cast<float>(st.scales[r]);
    int64_t qsum = 0;
    for (int64_t j = 0; j < st.n_base; ++j) qsum += st.q[r * st.n_base + j];
    out.wreduced[r] =
        static_cast<float>(static_cast<double>(out.scales[r]) * static_cast<double>(qsum));
  }
  const int64_t n_outlier = st.n_in - st.n_base;
  out.outlier_weights = FpMatrix(st.n_out, n_outlier);
  for (int64_t r = 0; r < st.n_out; ++r) {
    for (int64_t j = 0; j < n_outlier; ++j) {
      out.outlier_weights.at(r, j) = static_cast<float>(st.w[r * st.n_in + st.n_base + j]);
    }
  }
  out.mask = std::move(mask);
  return out;
}

// Quantizes column j across all rows and propagates (w - dq) / C_jj onto the
// columns to its right. prune_row, when set, zeroes a weight instead of
// quantizing it.
void quantize_column(ColumnQuantState &st, int64_t j, const std::vector<uint8_t> *keep = nullptr) {
  const double *crow = st.chol.data() + j * st.n_in;
  const double d = crow[j];
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (st.n_out * (st.n_in - j) > (int64_t{1} << 14))
#endif
  for (int64_t r = 0; r < st.n_out; ++r) {
    double *wrow = st.w.data() + r * st.n_in;
    const double scale = st.scales[r];
    double dq = 0.0;
    if (keep == nullptr || (*keep)[r] != 0) {
      const int8_t q = quantize_to_grid(wrow[j], 1.0 / scale, st.maxq);
      st.q[r * st.n_base + j] = q;
      dq = static_cast<double>(q) * scale;
    }
    const double err = (wrow[j] - dq) / d;
    for (int64_t t = j + 1; t < st.n_in; ++t) wrow[t] -= err * crow[t];
  }
}

} // namespace

void Hessian::accumulate(const FpMatrix &batch) {
  if (dim == 0 && token_count == 0) {
    dim = batch.cols;
    sum.assign(static_cast<size_t>(dim * dim), 0.0);
  }
  if (batch.cols != dim) {
    throw std::invalid_argument("Hessian: batch has " + std::to_string(batch.cols) +
                                " features, expected " + std::to_string(dim));
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t i = 0; i < dim; ++i) {
    double *row = sum.data() + i * dim;
    for (int64_t t = 0; t < batch.rows; ++t) {
      const float *x = batch.row(t);
      const double xi = x[i];
      for (int64_t j = 0; j < dim; ++j) row[j] += xi * static_cast<double>(x[j]);
    }
  }
  token_count += batch.rows;
}

double Hessian::lambda() const {
  double trace = 0.0;
  for (int64_t i = 0; i < dim; ++i) trace += at(i, i);
  return damping_frac * trace / static_cast<double>(dim);
}

Hessian Hessian::identity(int64_t dim, double damping_frac) {
  Hessian h;
  h.dim = dim;
  h.token_count = 1;
  h.damping_frac = damping_frac;
  h.sum.assign(static_cast<size_t>(dim * dim), 0.0);
  for (int64_t i = 0; i < dim; ++i) h.sum[i * dim + i] = 1.0;
  return h;
}

Hessian build_hessian(std::span<const FpMatrix> batches, double damping_frac) {
  Hessian h;
  h.damping_frac = damping_frac;
  for (const FpMatrix &b : batches) h.accumulate(b);
  if (h.token_count == 0) {
    throw std::invalid_argument("build_hessian: no calibration tokens");
  }
  return h;
}

std::pair<std::vector<int8_t>, float> rtn_quantize_row(std::span<const float> row, int bits,
                                                       float clip_factor) {
  if (bits != 4 && bits != 8) throw std::invalid_argument("weight bits must be 4 or 8");
  const int maxq = (1 << (bits - 1)) - 1;
  std::vector<int8_t> q(row.size(), 0);
  const double amax = row_amax(row);
  if (amax == 0.0) return {std::move(q), 1.0f};
  const double scale = static_cast<double>(clip_factor) * amax / maxq;
  const double inv_scale = 1.0 / scale;
  for (size_t i = 0; i < row.size(); ++i) {
    q[i] = quantize_to_grid(row[i], inv_scale, maxq);
  }
  return {std::move(q), static_cast<float>(scale)};
}

float clip_search(std::span<const float> row, int bits) {
  if (row.empty()) throw std::invalid_argument("clip_search: empty row");
  const int maxq = (1 << (bits - 1)) - 1;
  const double amax = row_amax(row);
  if (amax == 0.0) return 1.0f;

  double best_err = std::numeric_limits<double>::infinity();
  float best_c = 1.0f;
  for (int step = 0; step <= 50; ++step) {
    const float c = static_cast<float>(0.50 + 0.01 * step);
    const double scale = static_cast<double>(c) * amax / maxq;
    const double inv_scale = 1.0 / scale;
    double err = 0.0;
    for (float v : row) {
      const double dq = static_cast<double>(quantize_to_grid(v, inv_scale, maxq)) * scale;
      const double d = static_cast<double>(v) - dq;
      err += d * d;
    }
    if (err <= best_err) { // ties resolve toward larger c
      best_err = err;
      best_c = c;
    }
  }
  return best_c;
}

QuantizedWeights gptq_quantize(const FpMatrix &w, const Hessian &h, const OutlierSet &outliers,
                               int bits, bool use_clipping) {
  ColumnQuantState st = prepare_state(w, h, outliers, bits, use_clipping);
  for (int64_t j = 0; j < st.n_base; ++j) quantize_column(st, j);
  return finish_state(st, bits);
}

QuantizedWeights sparsegpt_joint(const FpMatrix &w, const Hessian &h, const OutlierSet &outliers,
                                 int bits, bool use_clipping) {
  ColumnQuantState st = prepare_state(w, h, outliers, bits, use_clipping);

  SparsityMask mask;
  mask.rows = st.n_out;
  mask.cols = st.n_base;
  mask.kept.assign(static_cast<size_t>(st.n_out * st.n_base), 1);

  const int64_t full_groups = st.n_base / 4;
  std::vector<uint8_t> keep(static_cast<size_t>(st.n_out), 1);
  for (int64_t j = 0; j < st.n_base; ++j) {
    const bool in_full_group = (j / 4) < full_groups;
    if (in_full_group && j % 4 == 0) {
      // Decide the group mask from the current (compensated) weights:
      // prune the two entries with smallest w^2 / C_gg^2 per row.
      for (int64_t r = 0; r < st.n_out; ++r) {
        std::array<double, 4> sal;
        for (int64_t g = 0; g < 4; ++g) {
          const double cgg = st.chol[(j + g) * st.n_in + (j + g)];
          const double wv = st.w[r * st.n_in + j + g];
          sal[g] = wv * wv / (cgg * cgg);
        }
        std::array<int, 4> order = {0, 1, 2, 3};
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return sal[a] < sal[b]; });
        mask.kept[r * st.n_base + j + order[0]] = 0;
        mask.kept[r * st.n_base + j + order[1]] = 0;
      }
    }
    if (in_full_group) {
      for (int64_t r = 0; r < st.n_out; ++r) keep[r] = mask.kept[r * st.n_base + j];
      quantize_column(st, j, &keep);
    } else {
      quantize_column(st, j); // trailing remainder group stays dense
    }
  }
  return finish_state(st, bits, std::move(mask));
}

QuantizedWeights rtn_quantize_weights(const FpMatrix &w, const OutlierSet &outliers, int bits,
                                      bool use_clipping) {
  if (outliers.feature_count != w.cols) {
    throw std::invalid_argument("outlier set covers " + std::to_string(outliers.feature_count) +
                                " features, weights have " + std::to_string(w.cols));
  }
  const int64_t n_out = w.rows;
  const int64_t n_base = outliers.base_count();
  const int64_t n_outlier = outliers.outlier_count();

  QuantizedWeights out;
  out.scales.resize(static_cast<size_t>(n_out));
  out.wreduced.resize(static_cast<size_t>(n_out));
  out.outlier_weights = FpMatrix(n_out, n_outlier);
  std::vector<int8_t> q(static_cast<size_t>(n_out * n_base));
  std::vector<float> base_row(static_cast<size_t>(n_base));
  for (int64_t r = 0; r < n_out; ++r) {
    for (int64_t j = 0; j < n_base; ++j) base_row[j] = w.at(r, outliers.permutation[j]);
    const float clip = use_clipping && n_base > 0 ? clip_search(base_row, bits) : 1.0f;
    auto [qr, scale] = rtn_quantize_row(base_row, bits, clip);
    std::copy(qr.begin(), qr.end(), q.begin() + r * n_base);
    out.scales[r] = scale;
    int64_t qsum = 0;
    for (int8_t v : qr) qsum += v;
    out.wreduced[r] =
        static_cast<float>(static_cast<double>(scale) * static_cast<double>(qsum));
    for (int64_t j = 0; j < n_outlier; ++j) {
      out.outlier_weights.at(r, j) = w.at(r, outliers.permutation[n_base + j]);
    }
  }
  out.base = pack_values(q, n_out, n_base, bits);
  return out;
}

std::vector<float> compute_wreduced(const QuantizedWeights &q) {
  const std::vector<int8_t> vals = unpack_values(q.base);
  std::vector<float> out(static_cast<size_t>(q.base.rows));
  for (int64_t r = 0; r < q.base.rows; ++r) {
    int64_t qsum = 0;
    for (int64_t j = 0; j < q.base.cols; ++j) qsum += vals[r * q.base.cols + j];
    out[r] = static_cast<float>(static_cast<double>(q.scales[r]) * static_cast<double>(qsum));
  }
  return out;
}

FpMatrix dequantize_weights(const QuantizedWeights &q, const OutlierSet &outliers) {
  const int64_t n_out = q.out_features();
  const int64_t n_base = q.base_features();
  if (outliers.base_count() != n_base ||
      outliers.outlier_count() != q.outlier_weights.cols) {
    throw std::invalid_argument("dequantize_weights: outlier set does not match weights");
  }
  const std::vector<int8_t> vals = unpack_values(q.base);
  FpMatrix out(n_out, outliers.feature_count);
  for (int64_t r = 0; r < n_out; ++r) {
    for (int64_t j = 0; j < n_base; ++j) {
      out.at(r, outliers.permutation[j]) =
          static_cast<float>(vals[r * n_base + j]) * q.scales[r];
    }
    for (int64_t j = 0; j < q.outlier_weights.cols; ++j) {
      out.at(r, outliers.permutation[n_base + j]) = q.outlier_weights.at(r, j);
    }
  }
  return out;
}

} // namespace quik
