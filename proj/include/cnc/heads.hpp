#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <variant>
#include <vector>

#include "cnc/clustering.hpp"
#include "cnc/matrix.hpp"
#include "cnc/nn.hpp"

namespace cnc {

// Step 1: one FC layer onto the original labels.
struct FlatHead {
  DenseLayer fc;  // d -> C
};

// Step 2: one FC layer onto clustered labels. `clustering` maps original
// labels to the K outputs (composed through every level built so far).
struct ClusteredHead {
  DenseLayer fc;  // d -> K
  Clustering clustering;
};

// One parallel branch: fc2(relu(fc1(features))), read only at its mask.
struct BranchHead {
  std::uint32_t cluster = 0;
  DenseLayer fc1;  // d -> h
  DenseLayer fc2;  // h -> C
  ClusterMask mask;

  [[nodiscard]] Matrix forward(const Matrix& features, Matrix* pre = nullptr) const;
  // Returns dL/dfeatures; `pre` is fc1's pre-activation from the forward pass.
  Matrix backward(const Matrix& features, const Matrix& pre, const Matrix& upstream);
  [[nodiscard]] std::size_t param_count() const noexcept { return fc1.param_count() + fc2.param_count(); }
};

// Disjoint scatter: logits[b][i] is taken from the branch whose mask owns i.
// Throws InputError if the masks overlap or leave a label uncovered.
[[nodiscard]] Matrix combine_masked(std::span<const Matrix> branch_outputs, std::span<const ClusterMask> masks);

// Step 3 for one level: K branches over a label space of `num_labels` entries.
struct CncHead {
  std::vector<BranchHead> branches;
  std::size_t num_labels = 0;
  Clustering clustering;

  [[nodiscard]] std::vector<ClusterMask> branch_masks() const;
  [[nodiscard]] std::size_t param_count() const noexcept;
};

// h = max(1, round(d / hidden_ratio)); one freshly initialized branch per cluster.
[[nodiscard]] CncHead build_step3_head(const Clustering& c, std::size_t feature_dim, double hidden_ratio, Rng& rng);

// Step 3 across all hierarchy levels. Level t scores the id space of
// hierarchy level t-1 (original labels for t = 0); the logit of original label
// i is the sum over levels of level t's logit at `label_maps[t][i]`.
struct CncStack {
  std::vector<CncHead> levels;
  std::vector<std::vector<std::uint32_t>> label_maps;

  [[nodiscard]] std::size_t num_labels() const noexcept { return label_maps.empty() ? 0 : label_maps.front().size(); }

  // Appends a level whose label space is the previous level's cluster ids.
  void push_level(CncHead level);
};

using Head = std::variant<FlatHead, ClusteredHead, CncStack>;

class CncModel {
 public:
  struct Cache {
    FeatureExtractor::Cache extractor;
    Matrix features;
    std::vector<std::vector<Matrix>> branch_pre;  // [level][branch]
  };

  CncModel() = default;
  CncModel(FeatureExtractor extractor, Head head);

  [[nodiscard]] int stage() const noexcept { return static_cast<int>(head_.index()) + 1; }
  // Size of the original label space.
  [[nodiscard]] std::size_t num_labels() const;
  // Width of the softmax the head produces (K for a clustered head, C otherwise).
  [[nodiscard]] std::size_t num_outputs() const;

  [[nodiscard]] Matrix logits(const Matrix& x) const;
  [[nodiscard]] Matrix predict_proba(const Matrix& x) const { return softmax(logits(x)); }

  Matrix forward(const Matrix& x, Cache& cache) const;
  // Accumulates gradients for every parameter from dL/dlogits.
  void backward(const Cache& cache, const Matrix& grad_logits);

  void zero_grad() noexcept;
  // Extractor parameters first, then head parameters, in declaration order.
  [[nodiscard]] std::vector<ParamRef> params();
  // Same order as params().
  [[nodiscard]] std::vector<const Matrix*> param_values() const;
  [[nodiscard]] std::size_t param_count() const noexcept;

  [[nodiscard]] FeatureExtractor& extractor() noexcept { return extractor_; }
  [[nodiscard]] const FeatureExtractor& extractor() const noexcept { return extractor_; }
  [[nodiscard]] Head& head() noexcept { return head_; }
  [[nodiscard]] const Head& head() const noexcept { return head_; }

  // Swaps in a new head; the extractor is left untouched.
  void replace_head(Head head);

 private:
  void check_head() const;

  FeatureExtractor extractor_;
  Head head_;
};

[[nodiscard]] std::size_t param_count(const CncModel& model);

// Binary checkpoint: "CNC1", u32 stage, u32 input dim, u32 layer count, u32
// widths, head descriptor, then every parameter as a little-endian f64 in
// params() order. Head descriptors:
//   stage 1: u32 C
//   stage 2: u32 C, u32 K, C x u32 cluster id
//   stage 3: u32 C, u32 levels, per level: u32 space, u32 K, space x u32 cluster id,
//            K x u32 branch hidden width
// Level label maps are rebuilt from the level clusterings on load.
void write_checkpoint(std::ostream& out, const CncModel& model);
[[nodiscard]] CncModel read_checkpoint(std::istream& in);
void save_checkpoint(const CncModel& model, const std::filesystem::path& path);
[[nodiscard]] CncModel load_checkpoint(const std::filesystem::path& path);

}  // namespace cnc
