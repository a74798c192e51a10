#include "cnc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "cnc/error.hpp"
#include "cnc/rng.hpp"

namespace cnc {

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

EvalResult evaluate_predictions(const Matrix& scores, std::span<const std::uint32_t> labels, std::size_t num_labels) {
  if (scores.rows() != labels.size()) throw DimensionError("one prediction row per label required");
  if (scores.cols() != num_labels) throw ConfigError("prediction width does not match the label space");
  EvalResult r;
  r.n = labels.size();
  r.confusion = Matrix(num_labels, num_labels);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] >= num_labels) throw LabelError("label out of range in evaluation");
    r.confusion(labels[b], argmax(scores.row(b))) += 1.0;
  }
  double correct = 0.0;
  r.per_class_error.assign(num_labels, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t l = 0; l < num_labels; ++l) {
    double total = 0.0;
    for (double v : r.confusion.row(l)) total += v;
    correct += r.confusion(l, l);
    if (total > 0.0) r.per_class_error[l] = 1.0 - r.confusion(l, l) / total;
  }
  r.top1_error = r.n == 0 ? 0.0 : 1.0 - correct / static_cast<double>(r.n);
  return r;
}

EvalResult evaluate(const CncModel& model, const Dataset& data) {
  if (model.num_labels() != data.num_labels) {
    throw ConfigError("model predicts " + std::to_string(model.num_labels()) + " labels but the dataset has " +
                      std::to_string(data.num_labels));
  }
  const Matrix probs = model.predict_proba(data.features);
  if (const auto* h = std::get_if<ClusteredHead>(&model.head())) {
    return evaluate_predictions(probs, relabel(data.labels, h->clustering), h->clustering.num_clusters());
  }
  return evaluate_predictions(probs, data.labels, data.num_labels);
}

namespace {

// Runs task(i) for i in [0, n) on up to `jobs` threads. Results are written by
// index, so the output does not depend on scheduling.
template <typename Task>
void parallel_for(std::size_t n, std::size_t jobs, Task task) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < jobs; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += jobs) {
        try {
          task(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

double mean(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

AblationResult label_count_ablation(const Dataset& data, const Dataset* test, std::span<const std::size_t> counts,
                                    const StageConfig& config, std::span<const std::uint64_t> seeds,
                                    std::size_t jobs) {
  config.validate();
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] < 2) throw ConfigError("ablation label counts must be >= 2");
    if (counts[k] > data.num_labels) {
      throw ConfigError("ablation label count " + std::to_string(counts[k]) + " exceeds C=" +
                        std::to_string(data.num_labels));
    }
    if (k > 0 && counts[k] <= counts[k - 1]) throw ConfigError("ablation label counts must be strictly increasing");
  }
  AblationResult result;
  result.label_counts.assign(counts.begin(), counts.end());
  result.seeds_per_point = seeds.size();
  result.points.resize(counts.size() * seeds.size());
  parallel_for(result.points.size(), jobs, [&](std::size_t i) {
    const std::size_t count = counts[i / seeds.size()];
    const std::uint64_t seed = seeds[i % seeds.size()];
    std::vector<std::uint32_t> labels(data.num_labels);
    std::iota(labels.begin(), labels.end(), 0U);
    Rng rng = Rng(seed).fork("ablation").fork(count);
    rng.shuffle(labels);
    labels.resize(count);
    const Dataset sub = restrict_labels(data, labels);
    std::optional<Dataset> sub_test;
    if (test != nullptr) sub_test = restrict_labels(*test, labels);
    const FlatRun run = run_flat(config, sub, sub_test ? &*sub_test : nullptr, seed, config.max_epochs);
    result.points[i] = {count, seed, run.report.final_test_top1.value_or(run.report.final_val_top1)};
  });
  for (std::size_t k = 0; k < counts.size(); ++k) {
    std::vector<double> errs;
    for (std::size_t s = 0; s < seeds.size(); ++s) errs.push_back(result.points[k * seeds.size() + s].top1);
    result.errors.push_back(mean(errs));
  }
  return result;
}

CompareResult compare_cnc_vs_flat(const Dataset& data, const Dataset* test, const StageConfig& config,
                                  std::span<const std::uint64_t> seeds, std::size_t jobs) {
  config.validate();
  if (seeds.empty()) throw ConfigError("comparison needs at least one seed");
  CompareResult result;
  result.rows.resize(2 * seeds.size());
  parallel_for(result.rows.size(), jobs, [&](std::size_t i) {
    const std::uint64_t seed = seeds[i / 2];
    CompareRow row;
    row.seed = seed;
    if (i % 2 == 0) {
      const FlatRun run = run_flat(config, data, test, seed, config.epoch_budget());
      row.arm = "flat";
      row.top1 = run.report.final_test_top1.value_or(run.report.final_val_top1);
      row.params = run.report.final_param_count;
      row.epochs = run.report.total_epochs;
      row.flags = run.report.flags;
    } else {
      const CncRun run = run_cnc(config, data, test, seed);
      row.arm = "cnc";
      row.top1 = run.report.final_test_top1.value_or(run.report.final_val_top1);
      row.params = run.report.final_param_count;
      row.epochs = run.report.total_epochs;
      row.flags = run.report.flags;
      for (const auto& s : run.report.stages) row.flags.insert(row.flags.end(), s.flags.begin(), s.flags.end());
    }
    result.rows[i] = std::move(row);
  });
  std::vector<double> flat;
  std::vector<double> cnc;
  for (const auto& r : result.rows) (r.arm == "flat" ? flat : cnc).push_back(r.top1);
  result.mean_flat = mean(flat);
  result.mean_cnc = mean(cnc);
  return result;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void write_ablation_csv(const AblationResult& r, const std::filesystem::path& path) {
  std::ostringstream out;
  out << std::setprecision(17) << "count,seed,top1\n";
  for (const auto& p : r.points) out << p.count << ',' << p.seed << ',' << p.top1 << '\n';
  write_text(path, out.str());
}

void write_compare_csv(const CompareResult& r, const std::filesystem::path& path) {
  std::ostringstream out;
  out << std::setprecision(17) << "seed,arm,top1,params\n";
  for (const auto& row : r.rows) out << row.seed << ',' << row.arm << ',' << row.top1 << ',' << row.params << '\n';
  write_text(path, out.str());
}

}  // namespace cnc
