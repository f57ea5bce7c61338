#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "quik/calibration.hpp"
#include "test_helpers.hpp"

using namespace quik;

TEST_CASE("accumulate_stats single row") {
  CalibStats s;
  s.accumulate(FpMatrix::from_rows({{1.0f, -3.0f}}));
  CHECK(s.token_count == 1);
  CHECK(s.max_abs == std::vector<float>{1.0f, 3.0f});
  CHECK(s.mean[0] == doctest::Approx(1.0));
  CHECK(s.mean[1] == doctest::Approx(-3.0));
}

TEST_CASE("max-abs is independent of batch order, exactly") {
  std::mt19937 rng(5);
  const FpMatrix a = oracle::random_matrix(rng, 13, 8);
  const FpMatrix b = oracle::random_matrix(rng, 7, 8);

  CalibStats ab, ba;
  ab.accumulate(a);
  ab.accumulate(b);
  ba.accumulate(b);
  ba.accumulate(a);
  CHECK(ab.max_abs == ba.max_abs);
  for (int64_t f = 0; f < 8; ++f) {
    CHECK(ab.mean[f] == doctest::Approx(ba.mean[f]).epsilon(1e-9));
  }
}

TEST_CASE("streaming variance matches the two-pass oracle within 1e-6 relative") {
  std::mt19937 rng(17);
  const int64_t n = 1000, f = 16;
  const FpMatrix all = oracle::random_matrix(rng, n, f, 3.0f);

  // stream in uneven batches, also exercising the parallel merge
  CalibStats left, right;
  int64_t row = 0;
  for (int64_t chunk : {137, 263, 100}) {
    FpMatrix b(chunk, f);
    std::copy_n(all.row(row), chunk * f, b.data.begin());
    left.accumulate(b);
    row += chunk;
  }
  {
    FpMatrix b(n - row, f);
    std::copy_n(all.row(row), (n - row) * f, b.data.begin());
    right.accumulate(b);
  }
  const CalibStats merged = CalibStats::merge(left, right);
  CHECK(merged.token_count == n);

  // two-pass oracle
  for (int64_t c = 0; c < f; ++c) {
    double mean = 0;
    for (int64_t r = 0; r < n; ++r) mean += all.at(r, c);
    mean /= n;
    double var = 0;
    for (int64_t r = 0; r < n; ++r) {
      const double d = all.at(r, c) - mean;
      var += d * d;
    }
    var /= n;
    CHECK(merged.variance()[c] == doctest::Approx(var).epsilon(1e-6));
    CHECK(merged.mean[c] == doctest::Approx(mean).epsilon(1e-6));
  }
}

TEST_CASE("select_outliers picks the largest max-abs columns") {
  CalibStats s(4);
  s.token_count = 1;
  s.max_abs = {1.0f, 100.0f, 2.0f, 50.0f};
  const OutlierSet o = select_outliers(s, 2);
  CHECK(o.indices == std::vector<int64_t>{1, 3});
  CHECK(o.permutation == std::vector<int64_t>{0, 2, 1, 3});
}

TEST_CASE("select_outliers k=0 gives the identity permutation") {
  CalibStats s(3);
  s.token_count = 1;
  s.max_abs = {5.0f, 1.0f, 2.0f};
  const OutlierSet o = select_outliers(s, 0);
  CHECK(o.indices.empty());
  CHECK(o.permutation == std::vector<int64_t>{0, 1, 2});
  CHECK_THROWS_AS(select_outliers(s, 4), std::invalid_argument);
}

TEST_CASE("select_outliers ties break toward the lower index") {
  CalibStats s(4);
  s.token_count = 1;
  s.max_abs = {3.0f, 7.0f, 7.0f, 3.0f};
  CHECK(select_outliers(s, 1).indices == std::vector<int64_t>{1});
  CHECK(select_outliers(s, 3).indices == std::vector<int64_t>{0, 1, 2});
}

TEST_CASE("select_outliers matches a full-sort oracle on 512 dims") {
  std::mt19937 rng(23);
  CalibStats s(512);
  s.token_count = 1;
  std::uniform_real_distribution<float> dist(0.0f, 100.0f);
  for (auto &v : s.max_abs) v = dist(rng);

  std::vector<int64_t> order(512);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return s.max_abs[a] != s.max_abs[b] ? s.max_abs[a] > s.max_abs[b] : a < b;
  });
  std::vector<int64_t> expect(order.begin(), order.begin() + 16);
  std::sort(expect.begin(), expect.end());
  CHECK(select_outliers(s, 16).indices == expect);
}

TEST_CASE("outlier selection is invariant to calibration batch order") {
  std::mt19937 rng(29);
  const FpMatrix a = oracle::random_matrix(rng, 9, 32);
  const FpMatrix b = oracle::random_matrix(rng, 5, 32);
  CalibStats ab, ba;
  ab.accumulate(a);
  ab.accumulate(b);
  ba.accumulate(b);
  ba.accumulate(a);
  CHECK(select_outliers(ab, 8).indices == select_outliers(ba, 8).indices);
}

TEST_CASE("zero_outlier_rule") {
  const std::vector<float> maxima = {1.5f, 3.0f};
  CHECK(zero_outlier_rule(maxima, 2.0f, 256) == std::vector<int64_t>{0, 256});
  CHECK(zero_outlier_rule(maxima, 0.0f, 256) == std::vector<int64_t>{256, 256});
  CHECK(zero_outlier_rule(maxima, 10.0f, 256) == std::vector<int64_t>{0, 0});
}

TEST_CASE("zero_outlier_rule is monotone in the threshold") {
  std::mt19937 rng(31);
  std::uniform_real_distribution<float> dist(0.0f, 8.0f);
  std::vector<float> maxima(40);
  for (auto &v : maxima) v = dist(rng);
  int64_t prev_zero = -1;
  for (float t : {0.0f, 1.0f, 2.0f, 4.0f, 8.0f, 16.0f}) {
    const auto counts = zero_outlier_rule(maxima, t, 256);
    const int64_t zeros = std::count(counts.begin(), counts.end(), 0);
    CHECK(zeros >= prev_zero);
    prev_zero = zeros;
  }
}

TEST_CASE("sensitivity_report flags high-variance layers as 8-bit") {
  CalibStats low(2), high(2);
  low.token_count = high.token_count = 10;
  low.m2 = {1.0, 1.0};   // variance 0.1
  high.m2 = {500.0, 500.0}; // variance 50
  const std::vector<CalibStats> layers = {low, high};
  const SensitivityReport r = sensitivity_report(layers, 10.0);
  CHECK(r.recommended_bits == std::vector<int>{4, 8});
  CHECK(r.mean_variance[0] == doctest::Approx(0.1));
  CHECK(r.mean_variance[1] == doctest::Approx(50.0));

  const SensitivityReport all4 = sensitivity_report(layers, 100.0);
  CHECK(all4.recommended_bits == std::vector<int>{4, 4});
}

TEST_CASE("Hadamard product of correlated unit-Gaussian branches is flagged") {
  // The product of two branches sharing an input has variance near the product
  // of the variances plus cross-moment terms; with unit-Gaussian inputs the
  // empirical variance lands near 2 while the plain input stays near 1.
  std::mt19937 rng(37);
  const FpMatrix x = oracle::random_matrix(rng, 2000, 32);
  FpMatrix prod(x.rows, x.cols);
  for (size_t i = 0; i < x.data.size(); ++i) prod.data[i] = x.data[i] * x.data[i];

  CalibStats plain, product;
  plain.accumulate(x);
  product.accumulate(prod);
  CHECK(product.mean_variance() > 1.5 * plain.mean_variance());

  const std::vector<CalibStats> layers = {plain, product};
  const double threshold = 0.5 * (plain.mean_variance() + product.mean_variance());
  const SensitivityReport r = sensitivity_report(layers, threshold);
  CHECK(r.recommended_bits == std::vector<int>{4, 8});
}

TEST_CASE("permute_columns definition and inverse") {
  const FpMatrix m = FpMatrix::from_rows({{10.0f, 11.0f, 12.0f, 13.0f}});
  const OutlierSet o = OutlierSet::from_indices(4, {1, 3});

  const FpMatrix p = permute_columns(m, o, false);
  CHECK(p.data == std::vector<float>{10.0f, 12.0f, 11.0f, 13.0f});

  const FpMatrix back = permute_columns(p, o, true);
  CHECK(back.data == m.data);

  const OutlierSet none = OutlierSet::none(4);
  CHECK(permute_columns(m, none, false).data == m.data);

  CHECK_THROWS_AS(permute_columns(m, OutlierSet::from_indices(3, {}), false),
                  std::invalid_argument);
}

TEST_CASE("permute then inverse on random 8x8 is bit-identical") {
  std::mt19937 rng(41);
  const FpMatrix m = oracle::random_matrix(rng, 8, 8);
  const OutlierSet o = OutlierSet::from_indices(8, {0, 3, 6});
  const FpMatrix round = permute_columns(permute_columns(m, o, false), o, true);
  CHECK(round.data == m.data);
}

TEST_CASE("non-outlier relative order is preserved for every k") {
  std::mt19937 rng(43);
  CalibStats s(24);
  s.token_count = 1;
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  for (auto &v : s.max_abs) v = dist(rng);
  for (int64_t k = 0; k <= 24; ++k) {
    const OutlierSet o = select_outliers(s, k);
    for (int64_t i = 1; i < o.base_count(); ++i) {
      CHECK(o.permutation[i] > o.permutation[i - 1]); // stability
    }
    for (int64_t i = 1; i < o.outlier_count(); ++i) {
      CHECK(o.permutation[o.base_count() + i] > o.permutation[o.base_count() + i - 1]);
    }
    // permutation is a bijection
    auto inv = o.inverse_permutation();
    for (int64_t i = 0; i < 24; ++i) CHECK(o.permutation[inv[i]] == i);
  }
}

TEST_CASE("outlier_count_from_pct rounds up to multiples of 16") {
  CHECK(outlier_count_from_pct(8192, 0.03125) == 256);
  CHECK(outlier_count_from_pct(1000, 0.001) == 16);
  CHECK(outlier_count_from_pct(1000, 0.0) == 0);
  CHECK(outlier_count_from_pct(20, 1.0) == 20); // capped at the feature count
}
