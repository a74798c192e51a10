#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace cnc {

// Dense row-major matrix of doubles. Every numeric quantity in the library
// (features, weights, biases, logits, probabilities) lives in one of these.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  [[nodiscard]] std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  [[nodiscard]] std::span<double> data() noexcept { return data_; }
  [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& values() const noexcept { return data_; }

  void fill(double v) noexcept;
  [[nodiscard]] bool all_finite() const noexcept;

  // Rows picked by index, in the given order.
  [[nodiscard]] Matrix gather_rows(std::span<const std::size_t> idx) const;

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// out[b][o] = sum_i x[b][i] * w[o][i]   (x: B x in, w: out x in)
[[nodiscard]] Matrix matmul_transposed(const Matrix& x, const Matrix& w);

[[nodiscard]] double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace cnc
