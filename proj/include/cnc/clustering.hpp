#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cnc {

struct AffinityMatrix;

enum class ClusterStrategy { ThresholdArgmax, L1Agglomerative };

[[nodiscard]] std::string to_string(ClusterStrategy s);
[[nodiscard]] ClusterStrategy parse_strategy(const std::string& name);

struct ClusterRule {
  ClusterStrategy strategy = ClusterStrategy::ThresholdArgmax;
  // Merge threshold on cross-prediction mass; unset means 2 / C.
  std::optional<double> trsd;
  // L1 distance below which two rows link (L1Agglomerative only).
  double tau = 0.5;
  std::size_t min_cluster_size = 1;
  // Link every off-diagonal entry above trsd instead of only the row's argmax.
  bool all_above = false;

  [[nodiscard]] double resolved_trsd(std::size_t num_labels) const;
  void validate() const;
};

// A partition of labels 0..C-1. Cluster ids are ordered by smallest member.
class Clustering {
 public:
  Clustering() = default;

  // Accepts any group ids per label and renumbers them canonically.
  static Clustering from_groups(std::span<const std::size_t> group_of_label);
  static Clustering singletons(std::size_t num_labels);
  static Clustering single(std::size_t num_labels);

  [[nodiscard]] std::size_t num_labels() const noexcept { return assign_.size(); }
  [[nodiscard]] std::size_t num_clusters() const noexcept { return members_.size(); }
  [[nodiscard]] std::uint32_t cluster_of(std::size_t label) const { return assign_.at(label); }
  [[nodiscard]] const std::vector<std::uint32_t>& assign() const noexcept { return assign_; }
  [[nodiscard]] const std::vector<std::vector<std::uint32_t>>& members() const noexcept { return members_; }

  // True when some cluster has more than one label.
  [[nodiscard]] bool has_merges() const noexcept { return num_clusters() < num_labels(); }

  // Throws InputError unless disjoint, covering, nonempty and canonically numbered.
  void validate() const;

  bool operator==(const Clustering& other) const = default;

 private:
  std::vector<std::uint32_t> assign_;
  std::vector<std::vector<std::uint32_t>> members_;
};

struct ClusterMask {
  std::uint32_t cluster = 0;
  std::vector<std::uint8_t> bits;  // length C, 1 iff the label belongs to the cluster

  [[nodiscard]] std::size_t popcount() const noexcept;
};

// Level t partitions the cluster ids of level t-1; level 0 partitions labels.
struct Hierarchy {
  std::vector<Clustering> levels;

  void validate() const;
  // Map from original label to its id at `level` (composition of levels 0..level).
  [[nodiscard]] std::vector<std::uint32_t> label_map(std::size_t level) const;

  bool operator==(const Hierarchy& other) const = default;
};

// Off-diagonal (l, partner) pairs selected by the threshold rule, sorted.
[[nodiscard]] std::vector<std::pair<std::size_t, std::size_t>> merge_pairs(const AffinityMatrix& a,
                                                                           const ClusterRule& rule);

[[nodiscard]] Clustering cluster_threshold_argmax(const AffinityMatrix& a, const ClusterRule& rule);
[[nodiscard]] Clustering cluster_l1(const AffinityMatrix& a, const ClusterRule& rule);
// Dispatches on rule.strategy.
[[nodiscard]] Clustering cluster(const AffinityMatrix& a, const ClusterRule& rule);

[[nodiscard]] std::vector<ClusterMask> masks(const Clustering& c);

[[nodiscard]] std::vector<std::uint32_t> relabel(std::span<const std::uint32_t> labels, const Clustering& c);

// Text format:
//   cnc-clustering v1
//   C K
//   <label> <cluster>     (C lines)
// Hierarchies write one such block per level separated by a "---" line.
void write_clustering(std::ostream& out, const Clustering& c);
[[nodiscard]] Clustering read_clustering(std::istream& in);
void write_hierarchy(std::ostream& out, const Hierarchy& h);
[[nodiscard]] Hierarchy read_hierarchy(std::istream& in);

void save_clustering(const Clustering& c, const std::filesystem::path& path);
[[nodiscard]] Clustering load_clustering(const std::filesystem::path& path);

}  // namespace cnc
