// Independent reference implementations used only by the tests. None of these
// call into the library code they are checked against.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "cnc/affinity.hpp"
#include "cnc/clustering.hpp"
#include "cnc/matrix.hpp"
#include "cnc/rng.hpp"

namespace oracle {

using Partition = std::vector<std::vector<std::uint32_t>>;

// y = x W^T + b, triple loop.
inline cnc::Matrix dense(const cnc::Matrix& x, const cnc::Matrix& w, const cnc::Matrix& b) {
  cnc::Matrix y(x.rows(), w.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t o = 0; o < w.rows(); ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < x.cols(); ++i) s += x(r, i) * w(o, i);
      y(r, o) = s + b(0, o);
    }
  }
  return y;
}

inline cnc::Matrix relu(cnc::Matrix x) {
  for (auto& v : x.data()) v = v > 0.0 ? v : 0.0;
  return x;
}

// Canonical form: members sorted, clusters ordered by smallest member.
inline Partition canonical(Partition p) {
  for (auto& g : p) std::sort(g.begin(), g.end());
  std::sort(p.begin(), p.end());
  return p;
}

inline Partition partition_of(const cnc::Clustering& c) { return canonical(c.members()); }

inline Partition partition_from_reach(const std::vector<std::vector<bool>>& reach) {
  const std::size_t n = reach.size();
  std::vector<bool> used(n, false);
  Partition out;
  for (std::size_t i = 0; i < n; ++i) {
    if (used[i]) continue;
    std::vector<std::uint32_t> g;
    for (std::size_t j = 0; j < n; ++j) {
      if (!used[j] && (j == i || reach[i][j])) {
        g.push_back(static_cast<std::uint32_t>(j));
        used[j] = true;
      }
    }
    out.push_back(g);
  }
  return canonical(out);
}

// Exhaustive version of the threshold/argmax rule: every ordered pair (l, i)
// is tested directly, then the symmetric relation is closed by repeated
// passes until nothing changes.
inline Partition brute_force_partition(const cnc::AffinityMatrix& a, const cnc::ClusterRule& rule) {
  const std::size_t c = a.size();
  if (c > 12) throw std::length_error("brute_force_partition supports at most 12 labels");
  const double trsd = rule.trsd ? *rule.trsd : 2.0 / static_cast<double>(c);
  std::vector<std::vector<bool>> rel(c, std::vector<bool>(c, false));
  for (std::size_t l = 0; l < c; ++l) {
    if (a.counts[l] == 0) continue;
    for (std::size_t i = 0; i < c; ++i) {
      if (i == l || a.counts[i] == 0) continue;
      bool linked = a.mass(l, i) > trsd;
      if (linked && !rule.all_above) {
        // i must be the first maximum among the other non-empty labels.
        for (std::size_t j = 0; j < c; ++j) {
          if (j == l || j == i || a.counts[j] == 0) continue;
          if (a.mass(l, j) > a.mass(l, i) || (a.mass(l, j) == a.mass(l, i) && j < i)) linked = false;
        }
      }
      if (linked) rel[l][i] = rel[i][l] = true;
    }
  }
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t i = 0; i < c; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        if (!rel[i][j]) continue;
        for (std::size_t k = 0; k < c; ++k) {
          if (rel[j][k] && !rel[i][k] && i != k) {
            rel[i][k] = rel[k][i] = true;
            changed = true;
          }
        }
      }
    }
  }
  return partition_from_reach(rel);
}

inline double l1(const cnc::Matrix& m, std::size_t p, std::size_t q) {
  double s = 0.0;
  for (std::size_t i = 0; i < m.cols(); ++i) s += std::abs(m(p, i) - m(q, i));
  return s;
}

// Literal single-linkage: recompute the closest pair of clusters from scratch
// after every merge.
inline Partition single_linkage(const cnc::AffinityMatrix& a, double tau) {
  const std::size_t c = a.size();
  Partition clusters;
  for (std::size_t l = 0; l < c; ++l) clusters.push_back({static_cast<std::uint32_t>(l)});
  while (true) {
    double best = std::numeric_limits<double>::infinity();
    std::tuple<std::uint32_t, std::uint32_t> best_pair{0, 0};
    std::size_t bi = 0, bj = 0;
    bool found = false;
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      for (std::size_t j = i + 1; j < clusters.size(); ++j) {
        for (auto p : clusters[i]) {
          for (auto q : clusters[j]) {
            if (a.counts[p] == 0 || a.counts[q] == 0) continue;
            const double d = l1(a.mass, p, q);
            const auto pair = std::make_tuple(std::min(p, q), std::max(p, q));
            if (d < tau && (d < best || (d == best && pair < best_pair))) {
              best = d;
              best_pair = pair;
              bi = i;
              bj = j;
              found = true;
            }
          }
        }
      }
    }
    if (!found) break;
    clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(), clusters[bj].end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
  }
  return canonical(clusters);
}

// Row-stochastic C x C matrix with a few dominant off-diagonal entries so that
// thresholds in the usual range produce nontrivial merges.
inline cnc::Matrix random_stochastic(std::size_t c, cnc::Rng& rng) {
  cnc::Matrix m(c, c);
  for (std::size_t r = 0; r < c; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      double v = rng.uniform();
      if (rng.uniform() < 0.15) v += 4.0 * rng.uniform();
      if (i == r) v += 2.0 * rng.uniform();
      m(r, i) = v;
      s += v;
    }
    for (std::size_t i = 0; i < c; ++i) m(r, i) /= s;
  }
  return m;
}

inline cnc::Matrix random_matrix(std::size_t rows, std::size_t cols, cnc::Rng& rng, double scale = 1.0) {
  cnc::Matrix m(rows, cols);
  for (auto& v : m.data()) v = scale * rng.normal();
  return m;
}

// Closed-form scalar count of a stage-3 level: sum over branches of
// d*h + h + h*C + C.
inline std::size_t branch_params(std::size_t d, std::size_t h, std::size_t c, std::size_t k) {
  return k * (d * h + h + h * c + c);
}

inline std::size_t extractor_params(std::size_t in, const std::vector<std::size_t>& widths) {
  std::size_t n = 0;
  for (std::size_t w : widths) {
    n += in * w + w;
    in = w;
  }
  return n;
}

}  // namespace oracle
