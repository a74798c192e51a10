#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cnc/affinity.hpp"
#include "cnc/clustering.hpp"
#include "cnc/dataset.hpp"
#include "cnc/heads.hpp"
#include "cnc/nn.hpp"

namespace cnc {

struct StageConfig {
  std::size_t step1_epochs = 1;
  std::size_t max_epochs = 60;
  std::size_t patience = 10;
  // A validation loss counts as an improvement only if it beats the best so
  // far by more than this.
  double min_delta = 1e-3;
  double validation_fraction = 0.1;
  SgdConfig optimizer;
  ClusterRule rule;
  // Per-level trsd overrides; level t uses entry t when present and set,
  // otherwise rule.trsd (2 / C when that is unset too).
  std::vector<std::optional<double>> level_trsd;
  double hidden_ratio = 4.0;
  std::size_t levels = 1;
  std::vector<std::size_t> extractor_widths{128};

  void validate() const;
  [[nodiscard]] ClusterRule rule_for_level(std::size_t level) const;
  // Upper bound on epochs a full CnC run may spend; the flat arm of a
  // comparison gets the same cap.
  [[nodiscard]] std::size_t epoch_budget() const noexcept { return step1_epochs + 2 * levels * max_epochs; }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_top1 = 0.0;  // error rate over the epoch's batches
  double val_loss = 0.0;
  double val_top1 = 0.0;
};

struct StageRecord {
  std::string name;  // "step1", "step2", "step3", "flat"; rounds >= 2 get a ".r<n>" suffix
  int stage = 0;
  std::size_t round = 0;
  std::size_t num_outputs = 0;
  std::vector<EpochRecord> curve;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;  // epoch whose weights were kept
  double best_val_loss = 0.0;
  std::size_t param_count = 0;
  double seconds = 0.0;
  std::vector<std::string> flags;
};

struct RunReport {
  std::uint64_t seed = 0;
  StageConfig config;
  std::vector<StageRecord> stages;  // execution order
  Hierarchy hierarchy;
  std::vector<std::string> flags;
  std::size_t total_epochs = 0;
  std::size_t final_param_count = 0;
  double final_val_top1 = 0.0;
  std::optional<double> final_test_top1;
  double wall_seconds = 0.0;
};

// Trains `model` on `targets` (which may be clustered labels). With
// early_stop, stops after `patience` epochs without validation-loss
// improvement and restores the best weights; otherwise runs exactly
// max_epochs. An empty validation set falls back to the training loss.
StageRecord train_stage(CncModel& model, const Matrix& train_x, std::span<const std::uint32_t> train_y,
                        const Matrix& val_x, std::span<const std::uint32_t> val_y, const StageConfig& config,
                        std::size_t max_epochs, bool early_stop, const Rng& stream);

struct Step1Result {
  CncModel model;
  AffinityMatrix affinity;
  StageRecord record;
};

// Extractor + flat head trained for step1_epochs; affinity over `train` in
// evaluation mode.
Step1Result step1(const StageConfig& config, const Dataset& train, const Dataset& val, const Rng& stream);

// Discards the current head, fits a fresh d -> K head on clustered labels
// jointly with the extractor until convergence. `clustering` maps original labels.
StageRecord step2(CncModel& model, const Clustering& clustering, const Dataset& train, const Dataset& val,
                  const StageConfig& config, const Rng& stream);

// Discards the step-2 head and trains masked branch heads on original labels.
// `level` partitions the label space of the newest level in `previous` (or
// the original labels when `previous` is empty); earlier levels are kept.
StageRecord step3(CncModel& model, const Clustering& level, CncStack previous, const Dataset& train,
                  const Dataset& val, const StageConfig& config, const Rng& stream);

struct CncRun {
  CncModel model;
  Hierarchy hierarchy;
  RunReport report;
  std::vector<AffinityMatrix> affinities;   // one per attempted level
  std::vector<CncModel> stage_models;       // latest model of stage 1, 2, 3
};

// Step 1 once, then up to `levels` rounds of cluster -> step 2 -> step 3. From
// round 2 on, the affinity comes from the previous round's step-2 model over
// the previous level's cluster ids. Stops early when a level has no merges.
CncRun run_cnc(const StageConfig& config, const Dataset& data, const Dataset* test, std::uint64_t seed);

struct FlatRun {
  CncModel model;
  RunReport report;
};

// Extractor + flat head trained with the convergence rule, capped at `max_epochs`.
FlatRun run_flat(const StageConfig& config, const Dataset& data, const Dataset* test, std::uint64_t seed,
                 std::size_t max_epochs);

// Run directory artifacts.
void write_report_json(const RunReport& report, const std::filesystem::path& path);
void write_metrics_csv(const RunReport& report, const std::filesystem::path& path);
void write_cnc_run(const CncRun& run, const std::string& config_echo, const std::filesystem::path& dir);
void write_flat_run(const FlatRun& run, const std::string& config_echo, const std::filesystem::path& dir);

}  // namespace cnc
