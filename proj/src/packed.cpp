#include "quik/packed.hpp"

#include <cstring>
#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace quik {

namespace {

void check_value_count(std::span<const int8_t> values, int64_t rows, int64_t cols) {
  if (static_cast<int64_t>(values.size()) != rows * cols) {
    throw std::invalid_argument("pack: expected " + std::to_string(rows * cols) +
                                " values, got " + std::to_string(values.size()));
  }
}

[[noreturn]] void throw_range(int value, int64_t r, int64_t c, int lo, int hi) {
  throw std::out_of_range("pack: value " + std::to_string(value) + " at row " +
                          std::to_string(r) + ", col " + std::to_string(c) +
                          " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
}

} // namespace

PackedIntMatrix pack_int4(std::span<const int8_t> values, int64_t rows, int64_t cols) {
  check_value_count(values, rows, cols);
  PackedIntMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.bits = 4;
  const int64_t row_bytes = (cols + 1) / 2;
  m.data.assign(static_cast<size_t>(rows * row_bytes), 0);
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) {
      const int v = values[static_cast<size_t>(r * cols + c)];
      if (v < -8 || v > 7) throw_range(v, r, c, -8, 7);
      const uint8_t biased = static_cast<uint8_t>(v + 8);
      uint8_t &byte = m.data[static_cast<size_t>(r * row_bytes + c / 2)];
      byte = (c % 2 == 0) ? static_cast<uint8_t>((byte & 0xF0) | biased)
                          : static_cast<uint8_t>((byte & 0x0F) | (biased << 4));
    }
  }
  return m;
}

PackedIntMatrix pack_int8(std::span<const int8_t> values, int64_t rows, int64_t cols) {
  check_value_count(values, rows, cols);
  PackedIntMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.bits = 8;
  m.data.resize(values.size());
  std::memcpy(m.data.data(), values.data(), values.size());
  return m;
}

PackedIntMatrix pack_values(std::span<const int8_t> values, int64_t rows, int64_t cols, int bits) {
  if (bits == 4) return pack_int4(values, rows, cols);
  if (bits == 8) return pack_int8(values, rows, cols);
  throw std::invalid_argument("pack_values: bits must be 4 or 8");
}

std::vector<int8_t> unpack_int4(const PackedIntMatrix &m) {
  if (m.bits != 4) {
    throw std::invalid_argument("unpack_int4: matrix has bits=" + std::to_string(m.bits));
  }
  std::vector<int8_t> out(static_cast<size_t>(m.rows * m.cols));
  const int64_t row_bytes = m.row_bytes();
  for (int64_t r = 0; r < m.rows; ++r) {
    const uint8_t *src = m.data.data() + r * row_bytes;
    int8_t *dst = out.data() + r * m.cols;
    for (int64_t c = 0; c < m.cols; ++c) {
      const uint8_t byte = src[c / 2];
      const uint8_t nibble = (c % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
      dst[c] = static_cast<int8_t>(static_cast<int>(nibble) - 8);
    }
  }
  return out;
}

std::vector<int8_t> unpack_values(const PackedIntMatrix &m) {
  if (m.bits == 4) return unpack_int4(m);
  std::vector<int8_t> out(static_cast<size_t>(m.rows * m.cols));
  std::memcpy(out.data(), m.data.data(), out.size());
  return out;
}

Int32Matrix int_matmul(const PackedIntMatrix &x, const PackedIntMatrix &w) {
  if (x.bits != w.bits) {
    throw std::invalid_argument("int_matmul: operand bit widths differ (" +
                                std::to_string(x.bits) + " vs " + std::to_string(w.bits) + ")");
  }
  if (x.cols != w.cols) {
    throw std::invalid_argument("int_matmul: inner dimensions differ (" +
                                std::to_string(x.cols) + " vs " + std::to_string(w.cols) + ")");
  }
  // |acc| <= k * (2^(bits-1))^2 must stay below INT32 range.
  const int64_t half = int64_t{1} << (x.bits - 1);
  if (x.cols > (int64_t{1} << 31) / (half * half)) {
    throw std::invalid_argument("int_matmul: inner dimension risks INT32 accumulator overflow");
  }

  // Unpack once into flat int8 buffers; for bits==8 the stored bytes already are
  // the logical values.
  const std::vector<int8_t> xbuf = x.bits == 4 ? unpack_int4(x) : std::vector<int8_t>();
  const std::vector<int8_t> wbuf = w.bits == 4 ? unpack_int4(w) : std::vector<int8_t>();
  const int8_t *xv = x.bits == 4 ? xbuf.data() : reinterpret_cast<const int8_t *>(x.data.data());
  const int8_t *wv = w.bits == 4 ? wbuf.data() : reinterpret_cast<const int8_t *>(w.data.data());

  const int64_t t = x.rows, n = w.rows, k = x.cols;
  Int32Matrix out(t, n);
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static) if (t * n * k > (int64_t{1} << 16))
#endif
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      const int8_t *xr = xv + i * k;
      const int8_t *wr = wv + j * k;
      int32_t acc = 0;
      for (int64_t kk = 0; kk < k; ++kk) {
        acc += static_cast<int32_t>(xr[kk]) * static_cast<int32_t>(wr[kk]);
      }
      out.data[static_cast<size_t>(i * n + j)] = acc;
    }
  }
  return out;
}

} // namespace quik
