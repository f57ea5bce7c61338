#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace quik {

// Malformed container / manifest / bundle data. CLI maps this to exit code 2.
class FormatError : public std::runtime_error {
public:
  explicit FormatError(const std::string &msg) : std::runtime_error(msg) {}
};

// Numerical failure (Cholesky breakdown, non-finite inputs). CLI exit code 3.
class NumericalError : public std::runtime_error {
public:
  explicit NumericalError(const std::string &msg) : std::runtime_error(msg) {}
};

// Dense row-major FP32 matrix.
struct FpMatrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<float> data;

  FpMatrix() = default;
  FpMatrix(int64_t r, int64_t c) : rows(r), cols(c), data(static_cast<size_t>(r * c), 0.0f) {}

  static FpMatrix from_rows(std::initializer_list<std::initializer_list<float>> init) {
    FpMatrix m;
    m.rows = static_cast<int64_t>(init.size());
    m.cols = m.rows > 0 ? static_cast<int64_t>(init.begin()->size()) : 0;
    m.data.reserve(static_cast<size_t>(m.rows * m.cols));
    for (const auto &row : init) {
      if (static_cast<int64_t>(row.size()) != m.cols) {
        throw std::invalid_argument("FpMatrix::from_rows: ragged rows");
      }
      m.data.insert(m.data.end(), row.begin(), row.end());
    }
    return m;
  }

  float &at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols + c)]; }
  float at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols + c)]; }
  const float *row(int64_t r) const { return data.data() + static_cast<size_t>(r * cols); }
  float *row(int64_t r) { return data.data() + static_cast<size_t>(r * cols); }
  bool empty() const { return rows == 0 || cols == 0; }
  int64_t size() const { return rows * cols; }
};

// Row-major INT32 accumulator matrix produced by the integer GEMM.
struct Int32Matrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<int32_t> data;

  Int32Matrix() = default;
  Int32Matrix(int64_t r, int64_t c) : rows(r), cols(c), data(static_cast<size_t>(r * c), 0) {}

  int32_t &at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols + c)]; }
  int32_t at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols + c)]; }
};

inline void check_same_shape(const FpMatrix &a, const FpMatrix &b, const char *what) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch (" +
                                std::to_string(a.rows) + "x" + std::to_string(a.cols) + " vs " +
                                std::to_string(b.rows) + "x" + std::to_string(b.cols) + ")");
  }
}

} // namespace quik
