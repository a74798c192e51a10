#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cnc/clustering.hpp"
#include "cnc/matrix.hpp"

namespace cnc {

struct Dataset {
  Matrix features;  // N x D
  std::vector<std::uint32_t> labels;
  std::uint32_t num_labels = 0;
  // Ground-truth label hierarchy, present for generated data.
  std::optional<Hierarchy> planted;

  [[nodiscard]] std::size_t size() const noexcept { return labels.size(); }
  [[nodiscard]] std::size_t dim() const noexcept { return features.cols(); }

  // Throws InputError / LabelError if the invariants do not hold.
  void validate() const;

  // Examples picked by index, in order. The planted hierarchy is carried along.
  [[nodiscard]] Dataset subset(std::span<const std::size_t> idx) const;

  // Per-label example counts.
  [[nodiscard]] std::vector<std::size_t> label_counts() const;

  bool operator==(const Dataset& other) const = default;
};

// Gaussian blobs arranged as a tree. `tiers` lists branching factors from the
// root down; their product is the number of labels, and labels enumerate the
// leaves with the last tier varying fastest.
struct PlantedSpec {
  std::vector<std::size_t> tiers{4, 4};
  std::size_t dim = 16;
  std::size_t per_class = 50;
  double inter_spread = 10.0;
  double intra_spread = 1.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] std::size_t num_labels() const;
};

// Leaf class centers (C x D). Depends only on (tiers, dim, spreads, seed).
[[nodiscard]] Matrix planted_centers(const PlantedSpec& spec);

// Hierarchy implied by the tiers: level 0 groups leaves by parent, and so on up.
[[nodiscard]] Hierarchy planted_hierarchy(const PlantedSpec& spec);

[[nodiscard]] Dataset gen_planted(const PlantedSpec& spec);
// Fresh samples around the same centers, from a separate random stream.
[[nodiscard]] Dataset gen_planted_holdout(const PlantedSpec& spec, std::size_t per_class);

// CSV: one example per line, D feature columns then an integer label. When
// num_labels is not given it is inferred as max label + 1.
[[nodiscard]] Dataset read_csv(std::istream& in, std::optional<std::uint32_t> num_labels = std::nullopt);
void write_csv(std::ostream& out, const Dataset& data);
[[nodiscard]] Dataset load_csv(const std::filesystem::path& path,
                               std::optional<std::uint32_t> num_labels = std::nullopt);
void save_csv(const Dataset& data, const std::filesystem::path& path);

// Binary: "CNCD", u32 N, u32 D, u32 C, N*D f64, N u32, all little-endian.
[[nodiscard]] Dataset read_binary(std::istream& in);
void write_binary(std::ostream& out, const Dataset& data);
[[nodiscard]] Dataset load_binary(const std::filesystem::path& path);
void save_binary(const Dataset& data, const std::filesystem::path& path);

// Picks the loader by extension: .csv is text, anything else binary.
[[nodiscard]] Dataset load_dataset(const std::filesystem::path& path);

struct Split {
  Dataset train;
  Dataset validation;
  std::vector<std::size_t> train_index;
  std::vector<std::size_t> validation_index;
  std::vector<std::string> warnings;
};

// Seeded, stratified by label. Each class contributes round(fraction * n_c)
// examples to validation, but always keeps at least one in train.
[[nodiscard]] Split split(const Dataset& data, double validation_fraction, std::uint64_t seed);

// Keeps only examples whose label is in `keep` and renumbers labels to their
// rank within the sorted `keep`.
[[nodiscard]] Dataset restrict_labels(const Dataset& data, std::span<const std::uint32_t> keep);

}  // namespace cnc
