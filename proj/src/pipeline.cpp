#include "cnc/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cnc/error.hpp"
#include "cnc/eval.hpp"

namespace cnc {

void StageConfig::validate() const {
  if (step1_epochs < 1) throw ConfigError("step1_epochs must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (!(validation_fraction > 0.0 && validation_fraction <= 0.5)) {
    throw ConfigError("validation_fraction must lie in (0, 0.5]");
  }
  if (!(hidden_ratio > 0.0) || !std::isfinite(hidden_ratio)) throw ConfigError("hidden_ratio must be > 0");
  if (!(min_delta >= 0.0) || !std::isfinite(min_delta)) throw ConfigError("min_delta must be >= 0");
  if (levels < 1) throw ConfigError("levels must be >= 1");
  for (auto w : extractor_widths) {
    if (w < 1) throw ConfigError("extractor widths must be >= 1");
  }
  optimizer.validate();
  rule.validate();
  for (std::size_t t = 0; t < level_trsd.size(); ++t) rule_for_level(t).validate();
}

ClusterRule StageConfig::rule_for_level(std::size_t level) const {
  ClusterRule r = rule;
  if (level < level_trsd.size() && level_trsd[level]) r.trsd = level_trsd[level];
  return r;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Scores {
  double loss = 0.0;
  double top1 = 0.0;
};

Scores score(const CncModel& model, const Matrix& x, std::span<const std::uint32_t> y) {
  const Matrix logits = model.logits(x);
  const XentResult r = softmax_xent(logits, y);
  std::size_t wrong = 0;
  for (std::size_t b = 0; b < y.size(); ++b) wrong += argmax(r.probs.row(b)) != y[b];
  return {r.loss, static_cast<double>(wrong) / static_cast<double>(y.size())};
}

std::vector<Matrix> snapshot(const std::vector<ParamRef>& params) {
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(*p.value);
  return out;
}

void restore(const std::vector<ParamRef>& params, const std::vector<Matrix>& saved) {
  for (std::size_t k = 0; k < params.size(); ++k) *params[k].value = saved[k];
}

std::string round_suffix(std::size_t round) { return round <= 1 ? "" : ".r" + std::to_string(round); }

CncModel init_flat_model(const StageConfig& config, std::size_t input_dim, std::size_t num_labels, const Rng& stream) {
  Rng rng = stream.fork("init");
  FeatureExtractor ex(input_dim, config.extractor_widths, rng);
  const std::size_t d = ex.output_dim();
  return CncModel(std::move(ex), FlatHead{DenseLayer::glorot(d, num_labels, rng)});
}

}  // namespace

StageRecord train_stage(CncModel& model, const Matrix& train_x, std::span<const std::uint32_t> train_y,
                        const Matrix& val_x, std::span<const std::uint32_t> val_y, const StageConfig& config,
                        std::size_t max_epochs, bool early_stop, const Rng& stream) {
  if (train_y.empty()) throw InputError("training set is empty");
  const auto start = Clock::now();
  Sgd opt(config.optimizer);
  const auto params = model.params();
  const std::size_t n = train_y.size();
  const std::size_t batch = config.optimizer.batch_size;
  const bool have_val = !val_y.empty();

  StageRecord rec;
  rec.num_outputs = model.num_outputs();
  rec.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<Matrix> best;
  std::size_t stale = 0;
  std::vector<std::size_t> order(n);
  std::vector<std::uint32_t> by(batch);
  CncModel::Cache cache;

  for (std::size_t epoch = 1; epoch <= max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng epoch_rng = stream.fork(epoch);
    epoch_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t wrong = 0;
    for (std::size_t s = 0; s < n; s += batch) {
      const std::span<const std::size_t> idx(order.data() + s, std::min(batch, n - s));
      by.resize(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) by[i] = train_y[idx[i]];
      const Matrix x = train_x.gather_rows(idx);
      model.zero_grad();
      const Matrix logits = model.forward(x, cache);
      const XentResult r = softmax_xent(logits, by);
      if (!std::isfinite(r.loss)) throw NumericError("training loss is not finite");
      model.backward(cache, r.grad);
      opt.step(params);
      loss_sum += r.loss * static_cast<double>(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) wrong += argmax(r.probs.row(i)) != by[i];
    }
    EpochRecord e;
    e.epoch = epoch;
    e.train_loss = loss_sum / static_cast<double>(n);
    e.train_top1 = static_cast<double>(wrong) / static_cast<double>(n);
    if (have_val) {
      const Scores v = score(model, val_x, val_y);
      e.val_loss = v.loss;
      e.val_top1 = v.top1;
    } else {
      e.val_loss = e.train_loss;
      e.val_top1 = e.train_top1;
    }
    rec.curve.push_back(e);
    rec.epochs_run = epoch;
    if (e.val_loss < rec.best_val_loss - config.min_delta || rec.best_epoch == 0) {
      rec.best_val_loss = e.val_loss;
      rec.best_epoch = epoch;
      if (early_stop) best = snapshot(params);
      stale = 0;
    } else if (early_stop && ++stale >= config.patience) {
      break;
    }
  }
  if (early_stop && !best.empty()) restore(params, best);
  if (!early_stop) {
    rec.best_epoch = rec.epochs_run;
    rec.best_val_loss = rec.curve.back().val_loss;
  }
  rec.param_count = model.param_count();
  rec.seconds = seconds_since(start);
  return rec;
}

Step1Result step1(const StageConfig& config, const Dataset& train, const Dataset& val, const Rng& stream) {
  train.validate();
  CncModel model = init_flat_model(config, train.dim(), train.num_labels, stream);
  StageRecord rec = train_stage(model, train.features, train.labels, val.features, val.labels, config,
                                config.step1_epochs, false, stream.fork("train"));
  rec.name = "step1";
  rec.stage = 1;
  std::size_t present = 0;
  for (auto n : train.label_counts()) present += n > 0;
  if (present < 2) rec.flags.emplace_back("degenerate dataset: fewer than two labels present");
  AffinityMatrix a = accumulate_affinity([&model](const Matrix& x) { return model.predict_proba(x); }, train);
  return {std::move(model), std::move(a), std::move(rec)};
}

StageRecord step2(CncModel& model, const Clustering& clustering, const Dataset& train, const Dataset& val,
                  const StageConfig& config, const Rng& stream) {
  clustering.validate();
  if (clustering.num_labels() != train.num_labels) throw ConfigError("clustering does not cover the dataset labels");
  const auto train_y = relabel(train.labels, clustering);
  const auto val_y = relabel(val.labels, clustering);
  Rng rng = stream.fork("head");
  const std::size_t d = model.extractor().output_dim();
  model.replace_head(ClusteredHead{DenseLayer::glorot(d, clustering.num_clusters(), rng), clustering});
  StageRecord rec = train_stage(model, train.features, train_y, val.features, val_y, config, config.max_epochs, true,
                                stream.fork("train"));
  rec.stage = 2;
  if (!clustering.has_merges()) rec.flags.emplace_back("degenerate clustering: K = C");
  return rec;
}

StageRecord step3(CncModel& model, const Clustering& level, CncStack previous, const Dataset& train,
                  const Dataset& val, const StageConfig& config, const Rng& stream) {
  Rng rng = stream.fork("head");
  previous.push_level(build_step3_head(level, model.extractor().output_dim(), config.hidden_ratio, rng));
  if (previous.num_labels() != train.num_labels) throw ConfigError("step-3 head does not cover the dataset labels");
  model.replace_head(std::move(previous));
  StageRecord rec = train_stage(model, train.features, train.labels, val.features, val.labels, config,
                                config.max_epochs, true, stream.fork("train"));
  rec.stage = 3;
  if (!level.has_merges()) rec.flags.emplace_back("degenerate clustering: K = C");
  if (level.num_clusters() == 1) rec.flags.emplace_back("single cluster: branch head is a two-layer flat classifier");
  return rec;
}

namespace {

void finish_report(RunReport& report, const CncModel& model, const Dataset& val, const Dataset* test,
                   Clock::time_point start) {
  report.total_epochs = 0;
  for (const auto& s : report.stages) report.total_epochs += s.epochs_run;
  report.final_param_count = model.param_count();
  report.final_val_top1 = val.size() > 0 ? evaluate(model, val).top1_error : 0.0;
  if (test != nullptr) report.final_test_top1 = evaluate(model, *test).top1_error;
  report.wall_seconds = seconds_since(start);
}

}  // namespace

CncRun run_cnc(const StageConfig& config, const Dataset& data, const Dataset* test, std::uint64_t seed) {
  config.validate();
  data.validate();
  const auto start = Clock::now();
  const Rng root(seed);
  const Split parts = split(data, config.validation_fraction, seed);
  const Dataset& train = parts.train;
  const Dataset& val = parts.validation;

  CncRun run;
  run.report.seed = seed;
  run.report.config = config;
  run.report.flags = parts.warnings;

  Step1Result s1 = step1(config, train, val, root.fork("step1"));
  run.report.stages.push_back(s1.record);
  run.stage_models.push_back(s1.model);
  CncModel model = std::move(s1.model);
  AffinityMatrix affinity = std::move(s1.affinity);

  CncStack stack;
  std::optional<CncModel> last_step2;
  for (std::size_t round = 1; round <= config.levels; ++round) {
    const Rng round_rng = root.fork("round").fork(round);
    if (round > 1) {
      // Score the previous level's cluster ids with the previous step-2 model.
      const Clustering composed = Clustering::from_groups(
          [&] {
            const auto map = run.hierarchy.label_map(run.hierarchy.levels.size() - 1);
            return std::vector<std::size_t>(map.begin(), map.end());
          }());
      if (composed.num_clusters() < 2) {
        run.report.flags.push_back("stopped before level " + std::to_string(round - 1) + ": one cluster left");
        break;
      }
      Dataset coarse = train;
      coarse.labels = relabel(train.labels, composed);
      coarse.num_labels = static_cast<std::uint32_t>(composed.num_clusters());
      const CncModel& scorer = *last_step2;
      affinity = accumulate_affinity([&scorer](const Matrix& x) { return scorer.predict_proba(x); }, coarse);
    }
    run.affinities.push_back(affinity);
    const Clustering level = cluster(affinity, config.rule_for_level(round - 1));
    if (round > 1 && !level.has_merges()) {
      run.report.flags.push_back("stopped at level " + std::to_string(round - 1) + ": no merges");
      break;
    }
    if (!level.has_merges()) run.report.flags.emplace_back("level 0 has no merges");
    run.hierarchy.levels.push_back(level);
    const auto map = run.hierarchy.label_map(run.hierarchy.levels.size() - 1);
    const Clustering composed = Clustering::from_groups(std::vector<std::size_t>(map.begin(), map.end()));

    StageRecord r2 = step2(model, composed, train, val, config, round_rng.fork("step2"));
    r2.name = "step2" + round_suffix(round);
    r2.round = round;
    run.report.stages.push_back(std::move(r2));
    last_step2 = model;

    StageRecord r3 = step3(model, level, stack, train, val, config, round_rng.fork("step3"));
    r3.name = "step3" + round_suffix(round);
    r3.round = round;
    run.report.stages.push_back(std::move(r3));
    stack = std::get<CncStack>(model.head());
  }
  if (run.hierarchy.levels.size() < config.levels) run.report.flags.emplace_back("hierarchy shorter than requested");
  if (last_step2) run.stage_models.push_back(*last_step2);
  run.stage_models.push_back(model);
  run.report.hierarchy = run.hierarchy;
  finish_report(run.report, model, val, test, start);
  run.model = std::move(model);
  return run;
}

FlatRun run_flat(const StageConfig& config, const Dataset& data, const Dataset* test, std::uint64_t seed,
                 std::size_t max_epochs) {
  config.validate();
  data.validate();
  const auto start = Clock::now();
  const Rng root(seed);
  const Split parts = split(data, config.validation_fraction, seed);
  // Same initialization stream as step 1 of run_cnc, so paired runs start alike.
  const Rng stream = root.fork("step1");
  CncModel model = init_flat_model(config, data.dim(), data.num_labels, stream);
  StageRecord rec = train_stage(model, parts.train.features, parts.train.labels, parts.validation.features,
                                parts.validation.labels, config, max_epochs, true, root.fork("flat"));
  rec.name = "flat";
  rec.stage = 1;
  FlatRun run;
  run.report.seed = seed;
  run.report.config = config;
  run.report.flags = parts.warnings;
  run.report.stages.push_back(std::move(rec));
  finish_report(run.report, model, parts.validation, test, start);
  run.model = std::move(model);
  return run;
}

namespace {

nlohmann::ordered_json config_json(const StageConfig& c) {
  nlohmann::ordered_json j;
  j["step1_epochs"] = c.step1_epochs;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["min_delta"] = c.min_delta;
  j["validation_fraction"] = c.validation_fraction;
  j["learning_rate"] = c.optimizer.learning_rate;
  j["momentum"] = c.optimizer.momentum;
  j["weight_decay"] = c.optimizer.weight_decay;
  j["batch_size"] = c.optimizer.batch_size;
  j["strategy"] = to_string(c.rule.strategy);
  j["trsd"] = c.rule.trsd ? nlohmann::ordered_json(*c.rule.trsd) : nlohmann::ordered_json("auto");
  j["tau"] = c.rule.tau;
  j["min_cluster_size"] = c.rule.min_cluster_size;
  j["all_above"] = c.rule.all_above;
  j["level_trsd"] = nlohmann::ordered_json::array();
  for (const auto& t : c.level_trsd) j["level_trsd"].push_back(t ? nlohmann::ordered_json(*t) : nlohmann::ordered_json("auto"));
  j["hidden_ratio"] = c.hidden_ratio;
  j["levels"] = c.levels;
  j["extractor"] = c.extractor_widths;
  return j;
}

nlohmann::ordered_json clustering_json(const Clustering& c) {
  nlohmann::ordered_json j;
  j["num_labels"] = c.num_labels();
  j["num_clusters"] = c.num_clusters();
  j["members"] = c.members();
  return j;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void write_report_json(const RunReport& report, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["seed"] = report.seed;
  j["config"] = config_json(report.config);
  j["stages"] = nlohmann::ordered_json::array();
  for (const auto& s : report.stages) {
    nlohmann::ordered_json st;
    st["name"] = s.name;
    st["stage"] = s.stage;
    st["round"] = s.round;
    st["num_outputs"] = s.num_outputs;
    st["epochs_run"] = s.epochs_run;
    st["best_epoch"] = s.best_epoch;
    st["best_val_loss"] = s.best_val_loss;
    st["param_count"] = s.param_count;
    st["flags"] = s.flags;
    st["seconds"] = s.seconds;
    auto& curve = st["curve"] = nlohmann::ordered_json::array();
    for (const auto& e : s.curve) {
      curve.push_back({{"epoch", e.epoch},
                       {"train_loss", e.train_loss},
                       {"train_top1", e.train_top1},
                       {"val_loss", e.val_loss},
                       {"val_top1", e.val_top1}});
    }
    j["stages"].push_back(std::move(st));
  }
  j["hierarchy"] = nlohmann::ordered_json::array();
  for (const auto& level : report.hierarchy.levels) j["hierarchy"].push_back(clustering_json(level));
  j["flags"] = report.flags;
  j["total_epochs"] = report.total_epochs;
  j["final_param_count"] = report.final_param_count;
  j["final_val_top1"] = report.final_val_top1;
  j["final_test_top1"] = report.final_test_top1 ? nlohmann::ordered_json(*report.final_test_top1) : nlohmann::ordered_json();
  j["wall_seconds"] = report.wall_seconds;
  write_text(path, j.dump(2) + "\n");
}

void write_metrics_csv(const RunReport& report, const std::filesystem::path& path) {
  std::ostringstream out;
  out << std::setprecision(17) << "epoch,stage,split,loss,top1\n";
  for (const auto& s : report.stages) {
    for (const auto& e : s.curve) {
      out << e.epoch << ',' << s.name << ",train," << e.train_loss << ',' << e.train_top1 << '\n';
      out << e.epoch << ',' << s.name << ",val," << e.val_loss << ',' << e.val_top1 << '\n';
    }
  }
  write_text(path, out.str());
}

void write_cnc_run(const CncRun& run, const std::string& config_echo, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "config.echo", config_echo);
  for (std::size_t t = 0; t < run.hierarchy.levels.size(); ++t) {
    save_clustering(run.hierarchy.levels[t], dir / ("clustering.L" + std::to_string(t) + ".txt"));
  }
  {
    std::ostringstream h;
    write_hierarchy(h, run.hierarchy);
    write_text(dir / "hierarchy.txt", h.str());
  }
  for (std::size_t t = 0; t < run.affinities.size(); ++t) {
    std::ostringstream a;
    write_affinity_csv(a, run.affinities[t]);
    write_text(dir / ("affinity.L" + std::to_string(t) + ".csv"), a.str());
  }
  for (const auto& m : run.stage_models) {
    save_checkpoint(m, dir / ("checkpoint.stage" + std::to_string(m.stage()) + ".cnc"));
  }
  write_report_json(run.report, dir / "report.json");
  write_metrics_csv(run.report, dir / "metrics.csv");
}

void write_flat_run(const FlatRun& run, const std::string& config_echo, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "config.echo", config_echo);
  save_checkpoint(run.model, dir / "checkpoint.stage1.cnc");
  write_report_json(run.report, dir / "report.json");
  write_metrics_csv(run.report, dir / "metrics.csv");
}

}  // namespace cnc
