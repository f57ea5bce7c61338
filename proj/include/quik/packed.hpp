#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "quik/matrix.hpp"

namespace quik {

// Row-major packed signed-integer matrix.
//
// bits == 4: two elements per byte, low nibble holds the even column index,
//            values stored biased to unsigned (stored = value + 8). Rows are
//            padded to whole bytes; padding nibbles are zero.
// bits == 8: one plain two's-complement byte per element, no bias.
struct PackedIntMatrix {
  int64_t rows = 0;
  int64_t cols = 0;
  int bits = 4;
  std::vector<uint8_t> data;

  int64_t row_bytes() const { return bits == 4 ? (cols + 1) / 2 : cols; }

  // Logical signed value at (r, c).
  int get(int64_t r, int64_t c) const {
    if (bits == 8) {
      return static_cast<int8_t>(data[static_cast<size_t>(r * cols + c)]);
    }
    const uint8_t byte = data[static_cast<size_t>(r * row_bytes() + c / 2)];
    const uint8_t nibble = (c % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
    return static_cast<int>(nibble) - 8;
  }

  bool empty() const { return rows == 0 || cols == 0; }
};

// Packs `rows*cols` row-major signed values, each in [-8, 7].
// Throws std::out_of_range naming the offending row/column otherwise.
PackedIntMatrix pack_int4(std::span<const int8_t> values, int64_t rows, int64_t cols);

// Packs `rows*cols` row-major signed values, each in [-128, 127].
PackedIntMatrix pack_int8(std::span<const int8_t> values, int64_t rows, int64_t cols);

PackedIntMatrix pack_values(std::span<const int8_t> values, int64_t rows, int64_t cols, int bits);

// Inverse of pack_int4; requires m.bits == 4 (std::invalid_argument otherwise).
std::vector<int8_t> unpack_int4(const PackedIntMatrix &m);

// Unpacks either bit width to row-major signed values.
std::vector<int8_t> unpack_values(const PackedIntMatrix &m);

// out[i][j] = sum_k x[i][k] * w[j][k], exact INT32 accumulation.
//
// x is tokens x k, w is n x k; both operands must share `bits`. The kernel is
// tiled and may run rows in parallel; output is bit-identical to the naive
// triple loop for any tiling or thread count (integer addition is exact).
Int32Matrix int_matmul(const PackedIntMatrix &x, const PackedIntMatrix &w);

} // namespace quik
