#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "cnc/matrix.hpp"

namespace cnc {

struct Dataset;

// Row l holds the mean softmax vector over examples whose true label is l.
// Off-diagonal mass measures how often label l is mistaken for label i.
struct AffinityMatrix {
  Matrix mass;                       // C x C
  std::vector<std::size_t> counts;   // examples seen per true label; 0 marks an empty row

  [[nodiscard]] std::size_t size() const noexcept { return counts.size(); }
  [[nodiscard]] bool empty_row(std::size_t l) const { return counts.at(l) == 0; }

  // Non-empty rows sum to 1 within 1e-9, entries lie in [0, 1], empty rows are zero.
  void validate() const;

  // Treats every row as observed once; zero rows become empty rows.
  static AffinityMatrix from_mass(Matrix mass);
};

// Streaming (sum, count) accumulator. Partial accumulators merge exactly, so
// the dataset may be sharded.
class AffinityAccumulator {
 public:
  explicit AffinityAccumulator(std::size_t num_labels);

  // Rejects vectors of the wrong length or that do not sum to 1 within 1e-6.
  void add(std::span<const double> probs, std::uint32_t label);
  void add_batch(const Matrix& probs, std::span<const std::uint32_t> labels);
  void merge(const AffinityAccumulator& other);

  [[nodiscard]] std::size_t total() const noexcept { return total_; }
  // Throws InputError if nothing was added.
  [[nodiscard]] AffinityMatrix finish() const;

 private:
  Matrix sums_;
  std::vector<std::size_t> counts_;
  std::size_t total_ = 0;
};

[[nodiscard]] AffinityMatrix accumulate_affinity(const Matrix& probs, std::span<const std::uint32_t> labels,
                                                 std::size_t num_labels);

// Runs `predict` (features -> softmax rows) over the dataset in fixed-size batches.
using Predictor = std::function<Matrix(const Matrix&)>;
[[nodiscard]] AffinityMatrix accumulate_affinity(const Predictor& predict, const Dataset& data,
                                                 std::size_t batch_size = 256);

// Sum of absolute differences between rows p and q, in [0, 2].
[[nodiscard]] double affinity_row_l1(const AffinityMatrix& a, std::size_t p, std::size_t q);

// C lines of C comma-separated values, 17 significant digits.
void write_affinity_csv(std::ostream& out, const AffinityMatrix& a);
[[nodiscard]] AffinityMatrix read_affinity_csv(std::istream& in);

}  // namespace cnc
