#include <doctest.h>

#include <cmath>
#include <random>

#include "quik/quantizer.hpp"
#include "test_helpers.hpp"

using namespace quik;

namespace {

// RTN reconstruction error, recomputed from scratch.
double rtn_error(std::span<const float> row, int bits, float clip) {
  const auto [q, scale] = rtn_quantize_row(row, bits, clip);
  double err = 0.0;
  for (size_t i = 0; i < row.size(); ++i) {
    const double d = static_cast<double>(row[i]) - static_cast<double>(q[i]) * scale;
    err += d * d;
  }
  return err;
}

} // namespace

TEST_CASE("rtn_quantize_row basic example with tie away from zero") {
  const std::vector<float> row = {-0.7f, 0.35f, 0.7f};
  const auto [q, scale] = rtn_quantize_row(row, 4);
  CHECK(scale == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(q == std::vector<int8_t>{-7, 4, 7}); // 0.35/0.1 = 3.5 rounds away from zero
}

TEST_CASE("rtn_quantize_row degenerate all-zero row") {
  const std::vector<float> row = {0.0f, 0.0f, 0.0f};
  const auto [q, scale] = rtn_quantize_row(row, 4);
  CHECK(scale == 1.0f);
  CHECK(q == std::vector<int8_t>{0, 0, 0});
}

TEST_CASE("rtn_quantize_row reproduces grid-aligned values") {
  std::vector<float> row;
  for (int i = -7; i <= 7; ++i) row.push_back(0.1f * static_cast<float>(i));
  const auto [q, scale] = rtn_quantize_row(row, 4);
  for (size_t i = 0; i < row.size(); ++i) {
    CHECK(q[i] == static_cast<int>(i) - 7);
    CHECK(static_cast<float>(q[i]) * scale == doctest::Approx(row[i]).epsilon(1e-6));
  }
}

TEST_CASE("rtn_quantize_row int8 grid") {
  // max 127 makes the scale exactly 1, so 2.5 is a representable tie
  const std::vector<float> row = {-127.0f, 127.0f, 2.5f, -2.5f};
  const auto [q, scale] = rtn_quantize_row(row, 8);
  CHECK(scale == 1.0f);
  CHECK(q == std::vector<int8_t>{-127, 127, 3, -3}); // ties away from zero
}

TEST_CASE("clip_search keeps the full range when one value dominates") {
  const std::vector<float> row = {0.1f, 0.1f, 10.0f};
  CHECK(clip_search(row, 4) == 1.0f); // clamping the 10.0 dominates any bulk gain
}

TEST_CASE("clip_search on a single-element row is exact at full range") {
  const std::vector<float> row = {3.7f};
  CHECK(clip_search(row, 4) == 1.0f);
  CHECK_THROWS_AS(clip_search({}, 4), std::invalid_argument);
}

TEST_CASE("clip_search never does worse than no clipping") {
  std::mt19937 rng(51);
  for (int trial = 0; trial < 10; ++trial) {
    const FpMatrix m = oracle::random_matrix(rng, 1, 512);
    std::span<const float> row(m.data);
    const float c = clip_search(row, 4);
    CHECK(rtn_error(row, 4, c) <= rtn_error(row, 4, 1.0f));
    // and it really is the grid argmin (exhaustive re-evaluation)
    double best = 1e300;
    for (int step = 0; step <= 50; ++step) {
      best = std::min(best, rtn_error(row, 4, static_cast<float>(0.50 + 0.01 * step)));
    }
    CHECK(rtn_error(row, 4, c) == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("build_hessian sums outer products before damping") {
  const FpMatrix x = FpMatrix::from_rows({{1.0f, 0.0f}, {0.0f, 2.0f}});
  const std::vector<FpMatrix> batches = {x};
  const Hessian h = build_hessian(batches);
  CHECK(h.at(0, 0) == doctest::Approx(1.0));
  CHECK(h.at(0, 1) == doctest::Approx(0.0));
  CHECK(h.at(1, 1) == doctest::Approx(4.0));
  CHECK(h.token_count == 2);

  CHECK_THROWS_AS(build_hessian({}), std::invalid_argument);
}

TEST_CASE("build_hessian matches a naive two-pass oracle to 1e-10 relative") {
  std::mt19937 rng(57);
  const int64_t dim = 24, tokens = 300;
  const FpMatrix all = oracle::random_matrix(rng, tokens, dim, 2.0f);

  Hessian h;
  for (int64_t start = 0; start < tokens; start += 77) {
    const int64_t len = std::min<int64_t>(77, tokens - start);
    FpMatrix b(len, dim);
    std::copy_n(all.row(start), len * dim, b.data.begin());
    h.accumulate(b);
  }
  for (int64_t i = 0; i < dim; ++i) {
    for (int64_t j = 0; j < dim; ++j) {
      double want = 0.0;
      for (int64_t t = 0; t < tokens; ++t) {
        want += static_cast<double>(all.at(t, i)) * static_cast<double>(all.at(t, j));
      }
      CHECK(h.at(i, j) == doctest::Approx(want).epsilon(1e-10));
      CHECK(h.at(i, j) == doctest::Approx(h.at(j, i)).epsilon(1e-6)); // symmetry
    }
  }
}

TEST_CASE("gptq with identity Hessian equals RTN bit-exactly") {
  std::mt19937 rng(61);
  const FpMatrix w = oracle::random_matrix(rng, 8, 24);
  const OutlierSet o = OutlierSet::from_indices(24, {2, 9, 17, 23});
  const Hessian h = Hessian::identity(24);

  const QuantizedWeights gptq = gptq_quantize(w, h, o, 4);
  const QuantizedWeights rtn = rtn_quantize_weights(w, o, 4);
  CHECK(gptq.base.data == rtn.base.data);
  CHECK(gptq.scales == rtn.scales);
  CHECK(gptq.wreduced == rtn.wreduced);
  // outlier columns come back bit-identical to the originals
  for (int64_t r = 0; r < w.rows; ++r) {
    CHECK(gptq.outlier_weights.at(r, 0) == w.at(r, 2));
    CHECK(gptq.outlier_weights.at(r, 3) == w.at(r, 23));
  }
}

TEST_CASE("gptq two-column recursion matches the hand-executed oracle") {
  // W = [[0.26, 1.0]], H = [[1, 0.9], [0.9, 1]], lambda = 0.01 * mean(diag).
  const FpMatrix w = FpMatrix::from_rows({{0.26f, 1.0f}});
  Hessian h;
  h.dim = 2;
  h.token_count = 1;
  h.sum = {1.0, 0.9, 0.9, 1.0};

  // Hand recursion in closed form: Hd = [[1.01, .9], [.9, 1.01]],
  // Hinv = adj(Hd)/det, C = upper Cholesky factor of Hinv.
  const double det = 1.01 * 1.01 - 0.9 * 0.9;
  const double hinv00 = 1.01 / det, hinv01 = -0.9 / det;
  const double c00 = std::sqrt(hinv00);
  const double c01 = hinv01 / c00;
  CHECK(c00 == doctest::Approx(2.1925406838110413).epsilon(1e-12));
  CHECK(c01 == doctest::Approx(-1.9537491241880565).epsilon(1e-12));

  const double scale = 1.0 / 7.0; // max|row| / 7, no clipping
  const double q0 = std::round(0.26 / scale);
  CHECK(q0 == 2.0);
  const double err0 = (0.26 - q0 * scale) / c00;
  const double w1_updated = 1.0 - err0 * c01;
  CHECK(w1_updated == doctest::Approx(0.9770862800565772).epsilon(1e-12));
  const double q1 = std::round(w1_updated / scale);
  CHECK(q1 == 7.0);

  const QuantizedWeights got = gptq_quantize(w, h, OutlierSet::none(2), 4);
  const auto qvals = unpack_int4(got.base);
  CHECK(qvals == std::vector<int8_t>{2, 7});
  CHECK(got.scales[0] == doctest::Approx(scale).epsilon(1e-6));
  CHECK(got.wreduced[0] == doctest::Approx(scale * 9.0).epsilon(1e-6));
}

TEST_CASE("gptq is invariant to Hessian scaling") {
  std::mt19937 rng(67);
  const FpMatrix w = oracle::random_matrix(rng, 6, 16);
  const OutlierSet o = OutlierSet::from_indices(16, {5, 11});
  const Hessian h = oracle::random_psd_hessian(rng, 16, 64);

  Hessian h4 = h;
  for (double &v : h4.sum) v *= 4.0; // exact power-of-two scaling
  const QuantizedWeights a = gptq_quantize(w, h, o, 4);
  const QuantizedWeights b = gptq_quantize(w, h4, o, 4);
  CHECK(a.base.data == b.base.data);
  CHECK(a.scales == b.scales);
  CHECK(a.outlier_weights.data == b.outlier_weights.data);
}

TEST_CASE("gptq output from doubled calibration inputs is identical") {
  std::mt19937 rng(71);
  const FpMatrix x = oracle::random_matrix(rng, 48, 12);
  FpMatrix x2 = x;
  for (float &v : x2.data) v *= 2.0f;
  const FpMatrix w = oracle::random_matrix(rng, 4, 12);

  Hessian h, h2;
  h.accumulate(x);
  h2.accumulate(x2);
  const OutlierSet o = OutlierSet::none(12);
  CHECK(gptq_quantize(w, h, o, 4).base.data == gptq_quantize(w, h2, o, 4).base.data);
}

TEST_CASE("gptq proxy loss beats RTN on at least 95 of 100 seeded instances") {
  int wins = 0;
  for (uint32_t seed = 0; seed < 100; ++seed) {
    std::mt19937 rng(seed);
    const FpMatrix w = oracle::random_matrix(rng, 16, 32);
    const Hessian h = oracle::random_psd_hessian(rng, 32, 64);
    const OutlierSet o = OutlierSet::none(32);

    const FpMatrix gptq_recon = dequantize_weights(gptq_quantize(w, h, o, 4), o);
    const FpMatrix rtn_recon = dequantize_weights(rtn_quantize_weights(w, o, 4), o);
    if (oracle::proxy_loss(w, gptq_recon, h) <= oracle::proxy_loss(w, rtn_recon, h)) ++wins;
  }
  CHECK(wins >= 95);
}

TEST_CASE("dequantized reconstruction carries exactly the pipeline's values") {
  std::mt19937 rng(73);
  const FpMatrix w = oracle::random_matrix(rng, 5, 20);
  const OutlierSet o = OutlierSet::from_indices(20, {1, 8, 19});
  const Hessian h = oracle::random_psd_hessian(rng, 20, 50);
  const QuantizedWeights q = gptq_quantize(w, h, o, 4);

  const FpMatrix recon = dequantize_weights(q, o);
  const auto qvals = unpack_int4(q.base);
  for (int64_t r = 0; r < w.rows; ++r) {
    for (int64_t j = 0; j < o.base_count(); ++j) {
      const float expect = static_cast<float>(qvals[r * o.base_count() + j]) * q.scales[r];
      CHECK(recon.at(r, o.permutation[j]) == expect); // bit-for-bit
    }
    for (int64_t j = 0; j < o.outlier_count(); ++j) {
      CHECK(recon.at(r, o.indices[j]) == q.outlier_weights.at(r, j));
    }
  }
}

TEST_CASE("gptq rejects inconsistent inputs and non-PSD Hessians") {
  const FpMatrix w = FpMatrix::from_rows({{1.0f, 2.0f}});
  CHECK_THROWS_AS(gptq_quantize(w, Hessian::identity(3), OutlierSet::none(2), 4),
                  std::invalid_argument);
  CHECK_THROWS_AS(gptq_quantize(w, Hessian::identity(2), OutlierSet::none(2), 5),
                  std::invalid_argument);

  Hessian bad;
  bad.dim = 2;
  bad.token_count = 1;
  bad.sum = {1.0, 2.0, 2.0, 1.0}; // indefinite; tiny damping cannot rescue it
  CHECK_THROWS_AS(gptq_quantize(w, bad, OutlierSet::none(2), 4), NumericalError);
}

TEST_CASE("sparsegpt with identity Hessian keeps the two largest magnitudes") {
  const FpMatrix w = FpMatrix::from_rows({{3.0f, 1.0f, -4.0f, 2.0f}});
  const QuantizedWeights q = sparsegpt_joint(w, Hessian::identity(4), OutlierSet::none(4), 4);
  REQUIRE_FALSE(q.mask.empty());
  CHECK(q.mask.kept == std::vector<uint8_t>{1, 0, 1, 0});
  // survivors land on the grid: scale = 4/7, round(3 / scale) = 5, -4 / scale = -7
  const auto vals = unpack_int4(q.base);
  CHECK(vals == std::vector<int8_t>{5, 0, -7, 0});
  CHECK(q.scales[0] == doctest::Approx(4.0 / 7.0).epsilon(1e-6));
}

TEST_CASE("sparsegpt masks satisfy 2:4 on random instances") {
  std::mt19937 rng(79);
  for (int trial = 0; trial < 10; ++trial) {
    const FpMatrix w = oracle::random_matrix(rng, 6, 26); // 24 base cols + 2 outliers
    const OutlierSet o = OutlierSet::from_indices(26, {3, 12});
    const Hessian h = oracle::random_psd_hessian(rng, 26, 64);
    const QuantizedWeights q = sparsegpt_joint(w, h, o, 4);

    REQUIRE(q.mask.rows == 6);
    REQUIRE(q.mask.cols == 24);
    const auto vals = unpack_int4(q.base);
    for (int64_t r = 0; r < 6; ++r) {
      for (int64_t g = 0; g + 4 <= 24; g += 4) {
        int kept = 0;
        for (int64_t j = g; j < g + 4; ++j) {
          kept += q.mask.kept_at(r, j) ? 1 : 0;
          if (!q.mask.kept_at(r, j)) CHECK(vals[r * 24 + j] == 0);
        }
        CHECK(kept == 2);
      }
    }
  }
}

TEST_CASE("sparsegpt leaves a trailing remainder group dense") {
  std::mt19937 rng(83);
  const FpMatrix w = oracle::random_matrix(rng, 3, 10); // base 10: two groups + remainder of 2
  const QuantizedWeights q = sparsegpt_joint(w, Hessian::identity(10), OutlierSet::none(10), 4);
  for (int64_t r = 0; r < 3; ++r) {
    CHECK(q.mask.kept_at(r, 8));
    CHECK(q.mask.kept_at(r, 9));
  }
}

TEST_CASE("joint sparsification costs at least as much proxy loss as plain gptq") {
  std::mt19937 rng(89);
  for (int trial = 0; trial < 10; ++trial) {
    const FpMatrix w = oracle::random_matrix(rng, 8, 32);
    const OutlierSet o = OutlierSet::none(32);
    const Hessian h = oracle::random_psd_hessian(rng, 32, 96);
    const double dense = oracle::proxy_loss(w, dequantize_weights(gptq_quantize(w, h, o, 4), o), h);
    const double sparse =
        oracle::proxy_loss(w, dequantize_weights(sparsegpt_joint(w, h, o, 4), o), h);
    CHECK(sparse >= dense * (1.0 - 1e-9));
  }
}

TEST_CASE("compute_wreduced") {
  const std::vector<int8_t> q = {2, -1};
  QuantizedWeights w;
  w.base = pack_int4(q, 1, 2);
  w.scales = {0.5f};
  w.wreduced = {0.5f};
  w.outlier_weights = FpMatrix(1, 0);
  CHECK(compute_wreduced(w) == std::vector<float>{0.5f}); // 0.5 * (2 - 1)

  QuantizedWeights zero;
  zero.base = pack_int4(std::vector<int8_t>{0, 0, 0}, 1, 3);
  zero.scales = {1.0f};
  CHECK(compute_wreduced(zero) == std::vector<float>{0.0f});
}

TEST_CASE("wReduced is recomputable from base and scales, exactly") {
  std::mt19937 rng(97);
  const FpMatrix w = oracle::random_matrix(rng, 7, 33);
  const OutlierSet o = OutlierSet::from_indices(33, {0, 16});
  for (int bits : {4, 8}) {
    const QuantizedWeights q = gptq_quantize(w, oracle::random_psd_hessian(rng, 33, 80), o, bits);
    CHECK(compute_wreduced(q) == q.wreduced);
  }
}

TEST_CASE("clipping reduces or preserves the proxy loss on heavy-tailed rows") {
  std::mt19937 rng(101);
  FpMatrix w = oracle::random_matrix(rng, 12, 64);
  // sprinkle rare large weights so clipping has something to trade off
  std::uniform_int_distribution<int64_t> pick(0, 63);
  for (int64_t r = 0; r < w.rows; ++r) w.at(r, pick(rng)) *= 6.0f;

  const OutlierSet o = OutlierSet::none(64);
  double err_clip = 0, err_plain = 0;
  for (int64_t r = 0; r < w.rows; ++r) {
    std::span<const float> row(w.row(r), 64);
    err_plain += rtn_error(row, 4, 1.0f);
    err_clip += rtn_error(row, 4, clip_search(row, 4));
  }
  CHECK(err_clip <= err_plain);

  // the full pipeline accepts the flag
  const QuantizedWeights q = gptq_quantize(w, Hessian::identity(64), o, 4, true);
  CHECK(q.base.rows == 12);
}
