#include "cnc/clustering.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <tuple>

#include "cnc/affinity.hpp"
#include "cnc/error.hpp"
#include "cnc/union_find.hpp"

namespace cnc {

std::string to_string(ClusterStrategy s) {
  switch (s) {
    case ClusterStrategy::ThresholdArgmax:
      return "threshold-argmax";
    case ClusterStrategy::L1Agglomerative:
      return "l1-agglomerative";
  }
  return "unknown";
}

ClusterStrategy parse_strategy(const std::string& name) {
  if (name == "threshold-argmax") return ClusterStrategy::ThresholdArgmax;
  if (name == "l1-agglomerative") return ClusterStrategy::L1Agglomerative;
  throw ConfigError("unknown clustering strategy '" + name + "'");
}

double ClusterRule::resolved_trsd(std::size_t num_labels) const {
  if (trsd) return *trsd;
  return num_labels == 0 ? 1.0 : 2.0 / static_cast<double>(num_labels);
}

void ClusterRule::validate() const {
  if (trsd && !(*trsd > 0.0 && *trsd < 1.0)) throw ConfigError("trsd must lie in (0, 1)");
  if (!(tau > 0.0 && tau <= 2.0)) throw ConfigError("tau must lie in (0, 2]");
  if (min_cluster_size < 1) throw ConfigError("min_cluster_size must be >= 1");
}

Clustering Clustering::from_groups(std::span<const std::size_t> group_of_label) {
  Clustering c;
  c.assign_.resize(group_of_label.size());
  std::map<std::size_t, std::uint32_t> renumber;
  // Scanning labels in ascending order numbers groups by their smallest member.
  for (std::size_t l = 0; l < group_of_label.size(); ++l) {
    auto [it, inserted] = renumber.try_emplace(group_of_label[l], static_cast<std::uint32_t>(renumber.size()));
    if (inserted) c.members_.emplace_back();
    c.assign_[l] = it->second;
    c.members_[it->second].push_back(static_cast<std::uint32_t>(l));
  }
  return c;
}

Clustering Clustering::singletons(std::size_t num_labels) {
  std::vector<std::size_t> g(num_labels);
  for (std::size_t i = 0; i < num_labels; ++i) g[i] = i;
  return from_groups(g);
}

Clustering Clustering::single(std::size_t num_labels) {
  std::vector<std::size_t> g(num_labels, 0);
  return from_groups(g);
}

void Clustering::validate() const {
  std::vector<std::uint8_t> seen(assign_.size(), 0);
  std::uint32_t expected_next = 0;
  for (std::size_t k = 0; k < members_.size(); ++k) {
    const auto& m = members_[k];
    if (m.empty()) throw InputError("cluster " + std::to_string(k) + " is empty");
    if (!std::is_sorted(m.begin(), m.end())) throw InputError("cluster members must be sorted");
    if (k > 0 && members_[k - 1].front() >= m.front()) throw InputError("cluster ids not ordered by smallest member");
    for (std::uint32_t l : m) {
      if (l >= assign_.size()) throw InputError("cluster member out of range");
      if (seen[l]++) throw InputError("label " + std::to_string(l) + " in more than one cluster");
      if (assign_[l] != k) throw InputError("assign and members disagree for label " + std::to_string(l));
    }
  }
  for (std::size_t l = 0; l < assign_.size(); ++l) {
    if (!seen[l]) throw InputError("label " + std::to_string(l) + " not covered");
    if (assign_[l] > expected_next) throw InputError("cluster ids not ordered by smallest member");
    if (assign_[l] == expected_next) ++expected_next;
  }
}

std::size_t ClusterMask::popcount() const noexcept {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

void Hierarchy::validate() const {
  std::size_t space = levels.empty() ? 0 : levels.front().num_labels();
  for (std::size_t t = 0; t < levels.size(); ++t) {
    levels[t].validate();
    if (levels[t].num_labels() != space) {
      throw InputError("hierarchy level " + std::to_string(t) + " does not partition the previous level");
    }
    space = levels[t].num_clusters();
  }
}

std::vector<std::uint32_t> Hierarchy::label_map(std::size_t level) const {
  if (level >= levels.size()) throw InputError("hierarchy level out of range");
  std::vector<std::uint32_t> map = levels.front().assign();
  for (std::size_t t = 1; t <= level; ++t) {
    for (auto& v : map) v = levels[t].cluster_of(v);
  }
  return map;
}

namespace {

void check_affinity(const AffinityMatrix& a, const ClusterRule& rule) {
  rule.validate();
  if (a.mass.rows() != a.size() || a.mass.cols() != a.size()) throw DimensionError("affinity matrix must be C x C");
}

// Repeatedly folds the smallest undersized cluster into the cluster it shares
// the most symmetric affinity mass with.
Clustering enforce_min_size(const AffinityMatrix& a, Clustering c, std::size_t min_size) {
  while (min_size > 1 && c.num_clusters() > 1) {
    const auto& members = c.members();
    std::size_t small = members.size();
    for (std::size_t k = 0; k < members.size(); ++k) {
      if (members[k].size() < min_size && (small == members.size() || members[k].size() < members[small].size())) {
        small = k;
      }
    }
    if (small == members.size()) break;
    std::size_t best = members.size();
    double best_score = -1.0;
    for (std::size_t k = 0; k < members.size(); ++k) {
      if (k == small) continue;
      double score = 0.0;
      for (std::uint32_t p : members[small]) {
        for (std::uint32_t q : members[k]) score += a.mass(p, q) + a.mass(q, p);
      }
      score /= static_cast<double>(members[small].size() * members[k].size());
      if (score > best_score) {
        best_score = score;
        best = k;
      }
    }
    std::vector<std::size_t> groups(c.assign().begin(), c.assign().end());
    for (auto& g : groups) {
      if (g == small) g = best;
    }
    c = Clustering::from_groups(groups);
  }
  return c;
}

Clustering from_union_find(UnionFind& uf) {
  std::vector<std::size_t> groups(uf.size());
  for (std::size_t l = 0; l < uf.size(); ++l) groups[l] = uf.find(l);
  return Clustering::from_groups(groups);
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> merge_pairs(const AffinityMatrix& a, const ClusterRule& rule) {
  check_affinity(a, rule);
  const std::size_t c = a.size();
  const double trsd = rule.resolved_trsd(c);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t l = 0; l < c; ++l) {
    if (a.empty_row(l)) continue;
    if (rule.all_above) {
      for (std::size_t i = 0; i < c; ++i) {
        if (i != l && !a.empty_row(i) && a.mass(l, i) > trsd) pairs.emplace_back(l, i);
      }
      continue;
    }
    // Best off-diagonal partner; ties go to the lowest label.
    std::size_t partner = c;
    for (std::size_t i = 0; i < c; ++i) {
      if (i == l || a.empty_row(i)) continue;
      if (partner == c || a.mass(l, i) > a.mass(l, partner)) partner = i;
    }
    if (partner != c && a.mass(l, partner) > trsd) pairs.emplace_back(l, partner);
  }
  return pairs;
}

Clustering cluster_threshold_argmax(const AffinityMatrix& a, const ClusterRule& rule) {
  const auto pairs = merge_pairs(a, rule);
  UnionFind uf(a.size());
  for (const auto& [p, q] : pairs) uf.unite(p, q);
  Clustering c = enforce_min_size(a, from_union_find(uf), rule.min_cluster_size);
  c.validate();
  return c;
}

Clustering cluster_l1(const AffinityMatrix& a, const ClusterRule& rule) {
  check_affinity(a, rule);
  const std::size_t c = a.size();
  // Processing candidate links by ascending (distance, p, q) and skipping those
  // inside an existing cluster is exactly single-linkage agglomeration.
  std::vector<std::tuple<double, std::size_t, std::size_t>> links;
  for (std::size_t p = 0; p < c; ++p) {
    if (a.empty_row(p)) continue;
    for (std::size_t q = p + 1; q < c; ++q) {
      if (a.empty_row(q)) continue;
      const double d = affinity_row_l1(a, p, q);
      if (d < rule.tau) links.emplace_back(d, p, q);
    }
  }
  std::sort(links.begin(), links.end());
  UnionFind uf(c);
  for (const auto& [d, p, q] : links) uf.unite(p, q);
  Clustering out = enforce_min_size(a, from_union_find(uf), rule.min_cluster_size);
  out.validate();
  return out;
}

Clustering cluster(const AffinityMatrix& a, const ClusterRule& rule) {
  switch (rule.strategy) {
    case ClusterStrategy::ThresholdArgmax:
      return cluster_threshold_argmax(a, rule);
    case ClusterStrategy::L1Agglomerative:
      return cluster_l1(a, rule);
  }
  throw ConfigError("unknown clustering strategy");
}

std::vector<ClusterMask> masks(const Clustering& c) {
  std::vector<ClusterMask> out;
  out.reserve(c.num_clusters());
  for (std::size_t k = 0; k < c.num_clusters(); ++k) {
    ClusterMask m;
    m.cluster = static_cast<std::uint32_t>(k);
    m.bits.assign(c.num_labels(), 0);
    for (std::uint32_t l : c.members()[k]) m.bits[l] = 1;
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<std::uint32_t> relabel(std::span<const std::uint32_t> labels, const Clustering& c) {
  std::vector<std::uint32_t> out;
  out.reserve(labels.size());
  for (std::uint32_t l : labels) {
    if (l >= c.num_labels()) {
      throw LabelError("label " + std::to_string(l) + " out of range for a clustering over " +
                       std::to_string(c.num_labels()) + " labels");
    }
    out.push_back(c.cluster_of(l));
  }
  return out;
}

void write_clustering(std::ostream& out, const Clustering& c) {
  out << "cnc-clustering v1\n" << c.num_labels() << ' ' << c.num_clusters() << '\n';
  for (std::size_t l = 0; l < c.num_labels(); ++l) out << l << ' ' << c.cluster_of(l) << '\n';
}

namespace {

Clustering read_block(const std::vector<std::string>& lines, std::size_t first_line) {
  auto fail = [&](std::size_t offset, const std::string& what) -> ParseError {
    return ParseError("clustering line " + std::to_string(first_line + offset) + ": " + what);
  };
  if (lines.empty() || lines[0] != "cnc-clustering v1") throw fail(0, "expected header 'cnc-clustering v1'");
  if (lines.size() < 2) throw fail(1, "missing 'C K' line");
  std::size_t num_labels = 0;
  std::size_t num_clusters = 0;
  {
    std::istringstream ss(lines[1]);
    std::string extra;
    if (!(ss >> num_labels >> num_clusters) || (ss >> extra)) throw fail(1, "expected 'C K'");
  }
  if (lines.size() != num_labels + 2) throw fail(lines.size(), "expected " + std::to_string(num_labels) + " label lines");
  std::vector<std::size_t> groups(num_labels);
  for (std::size_t l = 0; l < num_labels; ++l) {
    std::istringstream ss(lines[l + 2]);
    std::size_t label = 0;
    std::size_t cl = 0;
    std::string extra;
    if (!(ss >> label >> cl) || (ss >> extra)) throw fail(l + 2, "expected 'label cluster'");
    if (label != l) throw fail(l + 2, "labels must appear in ascending order");
    if (cl >= num_clusters) throw fail(l + 2, "cluster id out of range");
    groups[l] = cl;
  }
  Clustering c = Clustering::from_groups(groups);
  if (c.num_clusters() != num_clusters) throw fail(1, "cluster count does not match assignments");
  for (std::size_t l = 0; l < num_labels; ++l) {
    if (c.cluster_of(l) != groups[l]) throw fail(l + 2, "cluster ids must be ordered by smallest member");
  }
  return c;
}

std::vector<std::vector<std::string>> split_blocks(std::istream& in, std::vector<std::size_t>& starts) {
  std::vector<std::vector<std::string>> blocks(1);
  starts.assign(1, 1);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line == "---") {
      blocks.emplace_back();
      starts.push_back(line_no + 1);
      continue;
    }
    blocks.back().push_back(line);
  }
  return blocks;
}

}  // namespace

Clustering read_clustering(std::istream& in) {
  std::vector<std::size_t> starts;
  auto blocks = split_blocks(in, starts);
  if (blocks.size() != 1) throw ParseError("clustering file holds a hierarchy; expected a single level");
  return read_block(blocks[0], starts[0]);
}

void write_hierarchy(std::ostream& out, const Hierarchy& h) {
  for (std::size_t t = 0; t < h.levels.size(); ++t) {
    if (t > 0) out << "---\n";
    write_clustering(out, h.levels[t]);
  }
}

Hierarchy read_hierarchy(std::istream& in) {
  std::vector<std::size_t> starts;
  auto blocks = split_blocks(in, starts);
  Hierarchy h;
  for (std::size_t b = 0; b < blocks.size(); ++b) h.levels.push_back(read_block(blocks[b], starts[b]));
  try {
    h.validate();
  } catch (const InputError& e) {
    throw ParseError(e.what());
  }
  return h;
}

void save_clustering(const Clustering& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_clustering(out, c);
  if (!out) throw IoError("write failed for " + path.string());
}

Clustering load_clustering(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_clustering(in);
}

}  // namespace cnc
