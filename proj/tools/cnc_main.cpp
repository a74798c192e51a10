// cnc: command-line driver for planted-data generation, CnC runs, clustering,
// ablations, comparisons and evaluation.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cnc/affinity.hpp"
#include "cnc/clustering.hpp"
#include "cnc/dataset.hpp"
#include "cnc/error.hpp"
#include "cnc/eval.hpp"
#include "cnc/heads.hpp"
#include "cnc/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kIo = 2, kNumeric = 3 };

struct CliConfig {
  std::uint64_t seed = 0;
  std::string out = "cnc_out";
  std::size_t jobs = 1;
  std::string data;
  std::string test;

  // planted data
  std::string tiers = "4,4";
  std::size_t dim = 16;
  std::size_t per_class = 50;
  std::size_t test_per_class = 100;
  double inter_spread = 10.0;
  double intra_spread = 1.0;
  double noise_sigma = 1.0;

  // training
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  std::size_t batch_size = 16;
  std::size_t step1_epochs = 1;
  std::size_t max_epochs = 60;
  std::size_t patience = 10;
  double min_delta = 1e-3;
  double validation_fraction = 0.1;
  std::string extractor = "128";
  double hidden_ratio = 4.0;
  std::size_t levels = 1;

  // clustering
  std::string strategy = "threshold-argmax";
  std::string trsd = "auto";
  double tau = 0.5;
  std::size_t min_cluster_size = 1;
  bool all_above = false;
  std::string level_trsd;

  // experiments
  std::string counts = "4,8,16";
  std::size_t seeds = 0;  // 0: per-command default

  // cluster / eval inputs
  std::string affinity;
  std::string checkpoint;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& s, const std::string& key) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw cnc::ConfigError(key + ": '" + item + "' is not a non-negative integer");
    }
  }
  return out;
}

std::optional<double> parse_trsd(const std::string& s, const std::string& key) {
  if (s == "auto") return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw cnc::ConfigError(key + ": '" + s + "' is neither 'auto' nor a number");
  }
}

cnc::PlantedSpec planted_spec(const CliConfig& c) {
  cnc::PlantedSpec spec;
  spec.tiers = parse_sizes(c.tiers, "tiers");
  spec.dim = c.dim;
  spec.per_class = c.per_class;
  spec.inter_spread = c.inter_spread;
  spec.intra_spread = c.intra_spread;
  spec.noise_sigma = c.noise_sigma;
  spec.seed = c.seed;
  spec.validate();
  if (c.test_per_class < 1) throw cnc::ConfigError("test_per_class must be >= 1");
  return spec;
}

cnc::StageConfig stage_config(const CliConfig& c) {
  cnc::StageConfig s;
  s.step1_epochs = c.step1_epochs;
  s.max_epochs = c.max_epochs;
  s.patience = c.patience;
  s.min_delta = c.min_delta;
  s.validation_fraction = c.validation_fraction;
  s.optimizer.learning_rate = c.lr;
  s.optimizer.momentum = c.momentum;
  s.optimizer.weight_decay = c.weight_decay;
  s.optimizer.batch_size = c.batch_size;
  s.optimizer.seed = c.seed;
  s.rule.strategy = cnc::parse_strategy(c.strategy);
  s.rule.trsd = parse_trsd(c.trsd, "trsd");
  s.rule.tau = c.tau;
  s.rule.min_cluster_size = c.min_cluster_size;
  s.rule.all_above = c.all_above;
  for (const auto& t : split_list(c.level_trsd)) s.level_trsd.push_back(parse_trsd(t, "level_trsd"));
  s.hidden_ratio = c.hidden_ratio;
  s.levels = c.levels;
  s.extractor_widths = parse_sizes(c.extractor, "extractor");
  s.validate();
  return s;
}

struct Data {
  cnc::Dataset train;
  std::optional<cnc::Dataset> test;
};

// --data/--test when given, otherwise planted data generated from the config.
Data load_or_generate(const CliConfig& c) {
  Data d;
  if (!c.data.empty()) {
    d.train = cnc::load_dataset(c.data);
    d.train.validate();
    if (!c.test.empty()) d.test = cnc::load_dataset(c.test);
    return d;
  }
  const auto spec = planted_spec(c);
  d.train = cnc::gen_planted(spec);
  d.test = c.test.empty() ? cnc::gen_planted_holdout(spec, c.test_per_class) : cnc::load_dataset(c.test);
  return d;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw cnc::IoError("cannot write " + path.string());
  out << text;
}

std::vector<std::uint64_t> seed_list(std::uint64_t first, std::size_t n) {
  std::vector<std::uint64_t> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = first + i;
  return s;
}

void add_options(CLI::App& app, CliConfig& c) {
  app.add_option("--seed", c.seed, "Seed for every stochastic choice")->capture_default_str();
  app.add_option("--out", c.out, "Output directory; nothing is written elsewhere")->capture_default_str();
  app.add_option("--jobs", c.jobs, "Parallel workers for ablate/compare points")->capture_default_str();
  app.add_option("--data", c.data, "Training dataset (.cncd binary or .csv); generated when omitted");
  app.add_option("--test", c.test, "Held-out dataset for final top-1 error");

  app.add_option("--tiers", c.tiers, "Planted branching factors, root first (comma list)")->capture_default_str();
  app.add_option("--dim", c.dim, "Planted feature dimension")->capture_default_str();
  app.add_option("--per_class", c.per_class, "Planted training examples per label")->capture_default_str();
  app.add_option("--test_per_class", c.test_per_class, "Planted held-out examples per label")->capture_default_str();
  app.add_option("--inter_spread", c.inter_spread, "Center offset scale at the root tier")->capture_default_str();
  app.add_option("--intra_spread", c.intra_spread, "Center offset scale at the leaf tier")->capture_default_str();
  app.add_option("--noise_sigma", c.noise_sigma, "Per-coordinate sample noise")->capture_default_str();

  app.add_option("--lr", c.lr, "SGD learning rate")->capture_default_str();
  app.add_option("--momentum", c.momentum, "SGD momentum in [0, 1)")->capture_default_str();
  app.add_option("--weight_decay", c.weight_decay, "L2 weight decay")->capture_default_str();
  app.add_option("--batch_size", c.batch_size, "Mini-batch size")->capture_default_str();
  app.add_option("--step1_epochs", c.step1_epochs, "Epochs of flat training before clustering")->capture_default_str();
  app.add_option("--max_epochs", c.max_epochs, "Epoch cap per fine-tuned stage")->capture_default_str();
  app.add_option("--patience", c.patience, "Epochs without validation improvement before stopping")
      ->capture_default_str();
  app.add_option("--min_delta", c.min_delta, "Smallest validation-loss drop that counts as improvement")
      ->capture_default_str();
  app.add_option("--validation_fraction", c.validation_fraction, "Stratified validation share in (0, 0.5]")
      ->capture_default_str();
  app.add_option("--extractor", c.extractor, "Feature extractor layer widths (comma list)")->capture_default_str();
  app.add_option("--hidden_ratio", c.hidden_ratio, "Feature dim / branch hidden width")->capture_default_str();
  app.add_option("--levels", c.levels, "Rounds of step 2 + step 3 (hierarchy depth)")->capture_default_str();

  app.add_option("--strategy", c.strategy, "threshold-argmax or l1-agglomerative")->capture_default_str();
  app.add_option("--trsd", c.trsd, "Merge threshold in (0, 1), or 'auto' for 2/C")->capture_default_str();
  app.add_option("--tau", c.tau, "L1 link distance in (0, 2]")->capture_default_str();
  app.add_option("--min_cluster_size", c.min_cluster_size, "Fold smaller clusters into their closest neighbour")
      ->capture_default_str();
  app.add_option("--all_above", c.all_above, "Link every entry above trsd, not only the row argmax")
      ->capture_default_str();
  app.add_option("--level_trsd", c.level_trsd, "Per-level trsd overrides (comma list of numbers or 'auto')");

  app.add_option("--counts", c.counts, "Label counts for the ablation (comma list)")->capture_default_str();
  app.add_option("--seeds", c.seeds, "Seeds per point (ablate: default 5, compare: default 10)");
  app.add_option("--affinity", c.affinity, "Affinity CSV for the cluster command");
  app.add_option("--checkpoint", c.checkpoint, "Model checkpoint for cluster/eval");
}

std::string config_echo(const CLI::App& app) { return app.config_to_str(true, false); }

int cmd_gen(const CliConfig& c, const std::string& echo) {
  const auto spec = planted_spec(c);
  const fs::path out(c.out);
  fs::create_directories(out);
  cnc::save_binary(cnc::gen_planted(spec), out / "train.cncd");
  cnc::save_binary(cnc::gen_planted_holdout(spec, c.test_per_class), out / "test.cncd");
  std::ostringstream h;
  cnc::write_hierarchy(h, cnc::planted_hierarchy(spec));
  write_file(out / "planted.txt", h.str());
  write_file(out / "config.echo", echo);
  std::cout << "wrote " << (out / "train.cncd").string() << " and " << (out / "test.cncd").string() << '\n';
  return kOk;
}

void print_summary(const cnc::RunReport& r) {
  std::cout << std::setprecision(6);
  for (const auto& s : r.stages) {
    std::cout << s.name << ": outputs " << s.num_outputs << ", epochs " << s.epochs_run << " (best " << s.best_epoch
              << "), params " << s.param_count << '\n';
  }
  std::cout << "final validation top-1 error " << r.final_val_top1 << '\n';
  if (r.final_test_top1) std::cout << "final test top-1 error " << *r.final_test_top1 << '\n';
  for (const auto& f : r.flags) std::cout << "flag: " << f << '\n';
}

int cmd_train(const CliConfig& c, const std::string& echo) {
  const auto cfg = stage_config(c);
  const Data d = load_or_generate(c);
  const auto run = cnc::run_flat(cfg, d.train, d.test ? &*d.test : nullptr, c.seed, cfg.epoch_budget());
  cnc::write_flat_run(run, echo, c.out);
  print_summary(run.report);
  return kOk;
}

int cmd_cnc(const CliConfig& c, const std::string& echo) {
  const auto cfg = stage_config(c);
  const Data d = load_or_generate(c);
  const auto run = cnc::run_cnc(cfg, d.train, d.test ? &*d.test : nullptr, c.seed);
  cnc::write_cnc_run(run, echo, c.out);
  for (std::size_t t = 0; t < run.hierarchy.levels.size(); ++t) {
    std::cout << "level " << t << ": " << run.hierarchy.levels[t].num_labels() << " -> "
              << run.hierarchy.levels[t].num_clusters() << " clusters\n";
  }
  print_summary(run.report);
  return kOk;
}

int cmd_cluster(const CliConfig& c, const std::string& echo) {
  auto cfg = stage_config(c);
  cnc::AffinityMatrix a;
  if (!c.affinity.empty()) {
    std::ifstream in(c.affinity);
    if (!in) throw cnc::IoError("cannot open " + c.affinity);
    a = cnc::read_affinity_csv(in);
  } else if (!c.checkpoint.empty()) {
    const cnc::CncModel model = cnc::load_checkpoint(c.checkpoint);
    cnc::Dataset data = load_or_generate(c).train;
    if (const auto* h = std::get_if<cnc::ClusteredHead>(&model.head())) {
      data.labels = cnc::relabel(data.labels, h->clustering);
      data.num_labels = static_cast<std::uint32_t>(h->clustering.num_clusters());
    }
    if (model.num_outputs() != data.num_labels) throw cnc::ConfigError("checkpoint and dataset label spaces differ");
    a = cnc::accumulate_affinity([&model](const cnc::Matrix& x) { return model.predict_proba(x); }, data);
  } else {
    throw cnc::ConfigError("cluster needs --affinity or --checkpoint");
  }
  const cnc::Clustering cl = cnc::cluster(a, cfg.rule_for_level(0));
  const fs::path out(c.out);
  fs::create_directories(out);
  cnc::save_clustering(cl, out / "clustering.txt");
  std::ostringstream csv;
  cnc::write_affinity_csv(csv, a);
  write_file(out / "affinity.csv", csv.str());
  write_file(out / "config.echo", echo);
  std::cout << cl.num_labels() << " labels -> " << cl.num_clusters() << " clusters\n";
  return kOk;
}

int cmd_ablate(const CliConfig& c, const std::string& echo) {
  const auto cfg = stage_config(c);
  const Data d = load_or_generate(c);
  const auto counts = parse_sizes(c.counts, "counts");
  const auto seeds = seed_list(c.seed, c.seeds == 0 ? 5 : c.seeds);
  const auto r = cnc::label_count_ablation(d.train, d.test ? &*d.test : nullptr, counts, cfg, seeds, c.jobs);
  const fs::path out(c.out);
  fs::create_directories(out);
  cnc::write_ablation_csv(r, out / "ablation.csv");
  write_file(out / "config.echo", echo);
  std::cout << std::setprecision(6);
  for (std::size_t k = 0; k < r.label_counts.size(); ++k) {
    std::cout << r.label_counts[k] << " labels: mean top-1 error " << r.errors[k] << '\n';
  }
  return kOk;
}

int cmd_compare(const CliConfig& c, const std::string& echo) {
  const auto cfg = stage_config(c);
  const Data d = load_or_generate(c);
  const auto seeds = seed_list(c.seed, c.seeds == 0 ? 10 : c.seeds);
  const auto r = cnc::compare_cnc_vs_flat(d.train, d.test ? &*d.test : nullptr, cfg, seeds, c.jobs);
  const fs::path out(c.out);
  fs::create_directories(out);
  cnc::write_compare_csv(r, out / "compare.csv");
  write_file(out / "config.echo", echo);
  std::cout << std::setprecision(6) << "mean top-1 error: flat " << r.mean_flat << ", cnc " << r.mean_cnc << '\n';
  return kOk;
}

int cmd_eval(const CliConfig& c) {
  if (c.checkpoint.empty()) throw cnc::ConfigError("eval needs --checkpoint");
  if (c.data.empty()) throw cnc::ConfigError("eval needs --data");
  const cnc::CncModel model = cnc::load_checkpoint(c.checkpoint);
  const cnc::Dataset data = cnc::load_dataset(c.data);
  data.validate();
  const cnc::EvalResult r = cnc::evaluate(model, data);
  nlohmann::ordered_json j;
  j["stage"] = model.stage();
  j["n"] = r.n;
  j["top1_error"] = r.top1_error;
  j["per_class_error"] = nlohmann::ordered_json::array();
  for (double e : r.per_class_error) j["per_class_error"].push_back(std::isnan(e) ? nlohmann::ordered_json() : nlohmann::ordered_json(e));
  j["param_count"] = model.param_count();
  std::cout << j.dump(2) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Clustering-and-classification training on dense features"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_config("--config", "", "Key = value configuration file; command-line flags override it");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  CliConfig config;
  add_options(app, config);

  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"gen", "Generate planted train/test datasets"},
      {"train", "Train the flat baseline only"},
      {"cnc", "Run the full clustering-and-classification pipeline"},
      {"cluster", "Cluster labels from an affinity CSV or a checkpoint"},
      {"ablate", "Label-count ablation with flat baselines"},
      {"compare", "Flat baseline vs CnC over several seeds"},
      {"eval", "Evaluate a checkpoint on a dataset"},
  };
  for (const auto& cmd : commands) app.add_subcommand(cmd.name, cmd.help)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    const std::string echo = config_echo(app);
    if (name == "gen") return cmd_gen(config, echo);
    if (name == "train") return cmd_train(config, echo);
    if (name == "cnc") return cmd_cnc(config, echo);
    if (name == "cluster") return cmd_cluster(config, echo);
    if (name == "ablate") return cmd_ablate(config, echo);
    if (name == "compare") return cmd_compare(config, echo);
    if (name == "eval") return cmd_eval(config);
  } catch (const cnc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const cnc::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const cnc::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return kIo;
  } catch (const cnc::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const cnc::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  }
  return kUsage;
}
