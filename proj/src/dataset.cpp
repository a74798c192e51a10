#include "cnc/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cnc/binary_io.hpp"
#include "cnc/error.hpp"
#include "cnc/rng.hpp"

namespace cnc {

void Dataset::validate() const {
  if (labels.empty()) throw InputError("dataset is empty");
  if (features.rows() != labels.size()) throw DimensionError("dataset has a feature row count unequal to its label count");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_labels) {
      throw LabelError("example " + std::to_string(i) + " has label " + std::to_string(labels[i]) + " >= C=" +
                       std::to_string(num_labels));
    }
  }
  if (!features.all_finite()) throw InputError("dataset has non-finite features");
}

Dataset Dataset::subset(std::span<const std::size_t> idx) const {
  Dataset out;
  out.features = features.gather_rows(idx);
  out.labels.reserve(idx.size());
  for (std::size_t i : idx) out.labels.push_back(labels.at(i));
  out.num_labels = num_labels;
  out.planted = planted;
  return out;
}

std::vector<std::size_t> Dataset::label_counts() const {
  std::vector<std::size_t> counts(num_labels, 0);
  for (auto l : labels) ++counts.at(l);
  return counts;
}

void PlantedSpec::validate() const {
  if (tiers.empty()) throw ConfigError("tiers must list at least one branching factor");
  for (auto t : tiers) {
    if (t < 1) throw ConfigError("every tier branching factor must be >= 1");
  }
  if (num_labels() < 2) throw ConfigError("planted data needs at least 2 labels");
  if (dim < 1) throw ConfigError("dim must be >= 1");
  if (per_class < 1) throw ConfigError("per_class must be >= 1");
  if (!(intra_spread > 0.0)) throw ConfigError("intra_spread must be > 0");
  if (!(inter_spread > intra_spread)) throw ConfigError("inter_spread must exceed intra_spread");
  if (!(noise_sigma > 0.0)) throw ConfigError("noise_sigma must be > 0");
}

std::size_t PlantedSpec::num_labels() const {
  std::size_t c = 1;
  for (auto t : tiers) c *= t;
  return c;
}

Matrix planted_centers(const PlantedSpec& spec) {
  spec.validate();
  Rng rng = Rng(spec.seed).fork("centers");
  const std::size_t depth = spec.tiers.size();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(spec.dim));
  // Offsets shrink geometrically from inter_spread at the root tier to
  // intra_spread at the leaf tier.
  Matrix level(1, spec.dim, 0.0);
  for (std::size_t t = 0; t < depth; ++t) {
    const double frac = depth == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(depth - 1);
    const double scale = spec.inter_spread * std::pow(spec.intra_spread / spec.inter_spread, frac);
    Matrix next(level.rows() * spec.tiers[t], spec.dim);
    for (std::size_t p = 0; p < level.rows(); ++p) {
      for (std::size_t k = 0; k < spec.tiers[t]; ++k) {
        auto row = next.row(p * spec.tiers[t] + k);
        for (std::size_t j = 0; j < spec.dim; ++j) row[j] = level(p, j) + scale * inv_sqrt_d * rng.normal();
      }
    }
    level = std::move(next);
  }
  return level;
}

Hierarchy planted_hierarchy(const PlantedSpec& spec) {
  spec.validate();
  Hierarchy h;
  std::size_t space = spec.num_labels();
  for (std::size_t t = spec.tiers.size(); t-- > 1;) {
    std::vector<std::size_t> groups(space);
    for (std::size_t i = 0; i < space; ++i) groups[i] = i / spec.tiers[t];
    h.levels.push_back(Clustering::from_groups(groups));
    space /= spec.tiers[t];
  }
  return h;
}

namespace {

Dataset sample_planted(const PlantedSpec& spec, std::size_t per_class, std::string_view stream) {
  const Matrix centers = planted_centers(spec);
  Rng rng = Rng(spec.seed).fork(stream);
  const std::size_t c = centers.rows();
  Dataset d;
  d.num_labels = static_cast<std::uint32_t>(c);
  d.features = Matrix(c * per_class, spec.dim);
  d.labels.resize(c * per_class);
  for (std::size_t l = 0; l < c; ++l) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t n = l * per_class + i;
      auto row = d.features.row(n);
      for (std::size_t j = 0; j < spec.dim; ++j) row[j] = centers(l, j) + spec.noise_sigma * rng.normal();
      d.labels[n] = static_cast<std::uint32_t>(l);
    }
  }
  d.planted = planted_hierarchy(spec);
  return d;
}

std::string line_error(std::size_t line, const std::string& what) {
  return "CSV line " + std::to_string(line) + ": " + what;
}

}  // namespace

Dataset gen_planted(const PlantedSpec& spec) { return sample_planted(spec, spec.per_class, "train"); }

Dataset gen_planted_holdout(const PlantedSpec& spec, std::size_t per_class) {
  if (per_class < 1) throw ConfigError("holdout per_class must be >= 1");
  return sample_planted(spec, per_class, "holdout");
}

Dataset read_csv(std::istream& in, std::optional<std::uint32_t> num_labels) {
  std::vector<double> values;
  std::vector<std::uint32_t> labels;
  std::size_t dim = 0;
  bool have_dim = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() < 2) throw ParseError(line_error(line_no, "need at least one feature and a label"));
    if (!have_dim) {
      dim = cells.size() - 1;
      have_dim = true;
    } else if (cells.size() - 1 != dim) {
      throw ParseError(line_error(line_no, "expected " + std::to_string(dim) + " features, found " +
                                               std::to_string(cells.size() - 1)));
    }
    for (std::size_t j = 0; j < dim; ++j) {
      try {
        std::size_t used = 0;
        const double v = std::stod(cells[j], &used);
        if (used != cells[j].size() || !std::isfinite(v)) throw std::invalid_argument("bad");
        values.push_back(v);
      } catch (const std::exception&) {
        throw ParseError(line_error(line_no, "bad feature value '" + cells[j] + "'"));
      }
    }
    const std::string& lab = cells.back();
    std::uint32_t label = 0;
    const auto [ptr, ec] = std::from_chars(lab.data(), lab.data() + lab.size(), label);
    if (ec != std::errc() || ptr != lab.data() + lab.size()) {
      throw ParseError(line_error(line_no, "bad label '" + lab + "'"));
    }
    if (num_labels && label >= *num_labels) {
      throw ParseError(line_error(line_no, "label " + std::to_string(label) + " >= C=" + std::to_string(*num_labels)));
    }
    labels.push_back(label);
  }
  if (labels.empty()) throw ParseError("CSV holds no examples");
  Dataset d;
  d.features = Matrix(labels.size(), dim, std::move(values));
  d.num_labels = num_labels ? *num_labels : *std::max_element(labels.begin(), labels.end()) + 1;
  d.labels = std::move(labels);
  return d;
}

void write_csv(std::ostream& out, const Dataset& data) {
  const auto old_precision = out.precision();
  out << std::setprecision(17);
  for (std::size_t n = 0; n < data.size(); ++n) {
    for (double v : data.features.row(n)) out << v << ',';
    out << data.labels[n] << '\n';
  }
  out.precision(old_precision);
}

Dataset load_csv(const std::filesystem::path& path, std::optional<std::uint32_t> num_labels) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return read_csv(in, num_labels);
}

void save_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  write_csv(out, data);
  if (!out) throw IoError("write failed for " + path.string());
}

Dataset read_binary(std::istream& in) {
  binio::Reader r(in, "dataset");
  r.magic("CNCD");
  const std::uint32_t n = r.u32();
  const std::uint32_t dim = r.u32();
  const std::uint32_t c = r.u32();
  Dataset d;
  d.num_labels = c;
  std::vector<double> values(static_cast<std::size_t>(n) * dim);
  for (double& v : values) v = r.f64();
  d.features = Matrix(n, dim, std::move(values));
  d.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t at = r.offset();
    d.labels[i] = r.u32();
    if (d.labels[i] >= c) r.fail("label " + std::to_string(d.labels[i]) + " >= C=" + std::to_string(c), at);
  }
  r.expect_end();
  return d;
}

void write_binary(std::ostream& out, const Dataset& data) {
  out.write("CNCD", 4);
  binio::put_u32(out, static_cast<std::uint32_t>(data.size()));
  binio::put_u32(out, static_cast<std::uint32_t>(data.dim()));
  binio::put_u32(out, data.num_labels);
  for (double v : data.features.data()) binio::put_f64(out, v);
  for (auto l : data.labels) binio::put_u32(out, l);
}

Dataset load_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_binary(in);
}

void save_binary(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_binary(out, data);
  if (!out) throw IoError("write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  if (path.extension() == ".csv") return load_csv(path);
  return load_binary(path);
}

Split split(const Dataset& data, double validation_fraction, std::uint64_t seed) {
  if (!(validation_fraction > 0.0 && validation_fraction <= 0.5)) {
    throw ConfigError("validation fraction must lie in (0, 0.5]");
  }
  Split s;
  std::vector<std::vector<std::size_t>> by_label(data.num_labels);
  for (std::size_t i = 0; i < data.size(); ++i) by_label.at(data.labels[i]).push_back(i);
  Rng rng = Rng(seed).fork("split");
  std::vector<std::uint8_t> is_val(data.size(), 0);
  for (std::size_t l = 0; l < by_label.size(); ++l) {
    auto& members = by_label[l];
    if (members.empty()) continue;
    if (members.size() == 1) {
      s.warnings.push_back("label " + std::to_string(l) + " has a single example; kept in train");
      continue;
    }
    Rng class_rng = rng.fork(l);
    class_rng.shuffle(members);
    auto take = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(members.size())));
    take = std::min(take, members.size() - 1);
    for (std::size_t k = 0; k < take; ++k) is_val[members[k]] = 1;
  }
  for (std::size_t i = 0; i < data.size(); ++i) (is_val[i] ? s.validation_index : s.train_index).push_back(i);
  s.train = data.subset(s.train_index);
  s.validation = data.subset(s.validation_index);
  return s;
}

Dataset restrict_labels(const Dataset& data, std::span<const std::uint32_t> keep) {
  std::vector<std::uint32_t> sorted(keep.begin(), keep.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw ConfigError("duplicate label in keep set");
  std::vector<std::int64_t> rank(data.num_labels, -1);
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    if (sorted[k] >= data.num_labels) throw LabelError("keep label out of range");
    rank[sorted[k]] = static_cast<std::int64_t>(k);
  }
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (rank[data.labels[i]] >= 0) idx.push_back(i);
  }
  Dataset out;
  out.features = data.features.gather_rows(idx);
  for (std::size_t i : idx) out.labels.push_back(static_cast<std::uint32_t>(rank[data.labels[i]]));
  out.num_labels = static_cast<std::uint32_t>(sorted.size());
  return out;
}

}  // namespace cnc
