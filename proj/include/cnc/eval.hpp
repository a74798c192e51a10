#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cnc/dataset.hpp"
#include "cnc/heads.hpp"
#include "cnc/matrix.hpp"
#include "cnc/pipeline.hpp"

namespace cnc {

struct EvalResult {
  double top1_error = 0.0;
  // NaN for labels with no examples.
  std::vector<double> per_class_error;
  Matrix confusion;  // [true][predicted] counts
  std::size_t n = 0;
};

// Index of the largest entry; ties go to the lowest index.
[[nodiscard]] std::size_t argmax(std::span<const double> row);

[[nodiscard]] EvalResult evaluate_predictions(const Matrix& scores, std::span<const std::uint32_t> labels,
                                              std::size_t num_labels);

// Argmax of the model's softmax. A step-2 model is scored against clustered
// labels. Throws ConfigError if the model and dataset label spaces differ.
[[nodiscard]] EvalResult evaluate(const CncModel& model, const Dataset& data);

struct AblationPoint {
  std::size_t count = 0;
  std::uint64_t seed = 0;
  double top1 = 0.0;
};

struct AblationResult {
  std::vector<std::size_t> label_counts;
  std::vector<double> errors;  // mean top-1 error per count
  std::size_t seeds_per_point = 0;
  std::vector<AblationPoint> points;  // ordered by (count, seed)
};

// For each count and seed: draw `count` labels uniformly, restrict the data,
// train a flat baseline and record its top-1 error (on `test` when given,
// otherwise on the validation split).
[[nodiscard]] AblationResult label_count_ablation(const Dataset& data, const Dataset* test,
                                                  std::span<const std::size_t> counts, const StageConfig& config,
                                                  std::span<const std::uint64_t> seeds, std::size_t jobs = 1);

struct CompareRow {
  std::uint64_t seed = 0;
  std::string arm;  // "flat" or "cnc"
  double top1 = 0.0;
  std::size_t params = 0;
  std::size_t epochs = 0;
  std::vector<std::string> flags;
};

struct CompareResult {
  std::vector<CompareRow> rows;  // per seed: flat then cnc
  double mean_flat = 0.0;
  double mean_cnc = 0.0;
};

// Flat baseline vs full CnC with the same seeds and the same epoch cap
// (StageConfig::epoch_budget).
[[nodiscard]] CompareResult compare_cnc_vs_flat(const Dataset& data, const Dataset* test, const StageConfig& config,
                                                std::span<const std::uint64_t> seeds, std::size_t jobs = 1);

// ablation.csv: count,seed,top1     compare.csv: seed,arm,top1,params
void write_ablation_csv(const AblationResult& r, const std::filesystem::path& path);
void write_compare_csv(const CompareResult& r, const std::filesystem::path& path);

}  // namespace cnc
