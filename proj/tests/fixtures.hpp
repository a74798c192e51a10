// Random models and problems shared by the unit tests and the acceptance gate.
#pragma once

#include <cstdint>
#include <vector>

#include "cnc/clustering.hpp"
#include "cnc/heads.hpp"
#include "cnc/nn.hpp"
#include "cnc/rng.hpp"
#include "oracles.hpp"

namespace fixture {

inline cnc::Clustering random_clustering(std::size_t c, std::size_t max_k, cnc::Rng& rng) {
  const std::size_t k = 1 + rng.below(std::min(c, max_k));
  std::vector<std::size_t> groups(c);
  for (auto& g : groups) g = rng.below(k);
  return cnc::Clustering::from_groups(groups);
}

inline std::vector<std::uint32_t> random_labels(std::size_t n, std::size_t c, cnc::Rng& rng) {
  std::vector<std::uint32_t> y(n);
  for (auto& v : y) v = static_cast<std::uint32_t>(rng.below(c));
  return y;
}

inline cnc::FeatureExtractor random_extractor(std::size_t in, cnc::Rng& rng, std::size_t max_layers = 2) {
  std::vector<std::size_t> widths(rng.below(max_layers + 1));
  for (auto& w : widths) w = 4 + rng.below(6);
  return cnc::FeatureExtractor(in, widths, rng);
}

// stage 3 uses 1 or 2 stacked levels.
inline cnc::CncModel random_model(int stage, std::size_t c, cnc::Rng& rng) {
  const std::size_t in = 3 + rng.below(4);
  cnc::FeatureExtractor ex = random_extractor(in, rng);
  if (ex.output_dim() < 4) {
    std::vector<std::size_t> w{4 + rng.below(4)};
    ex = cnc::FeatureExtractor(in, w, rng);
  }
  const std::size_t d = ex.output_dim();
  if (stage == 1) return cnc::CncModel(std::move(ex), cnc::FlatHead{cnc::DenseLayer::glorot(d, c, rng)});
  const cnc::Clustering cl = random_clustering(c, c, rng);
  if (stage == 2) {
    return cnc::CncModel(std::move(ex), cnc::ClusteredHead{cnc::DenseLayer::glorot(d, cl.num_clusters(), rng), cl});
  }
  cnc::CncStack stack;
  const double ratio = 1.0 + 3.0 * rng.uniform();
  stack.push_level(cnc::build_step3_head(cl, d, ratio, rng));
  if (cl.num_clusters() > 1 && rng.below(2) == 1) {
    stack.push_level(cnc::build_step3_head(random_clustering(cl.num_clusters(), cl.num_clusters(), rng), d, ratio, rng));
  }
  return cnc::CncModel(std::move(ex), std::move(stack));
}

// Random biases so ReLU units are not all on one side.
inline void jitter(cnc::CncModel& m, cnc::Rng& rng) {
  for (const auto& p : m.params()) {
    for (auto& v : p.value->data()) v += 0.1 * rng.normal();
  }
}

struct Problem {
  cnc::CncModel model;
  cnc::Matrix x;
  std::vector<std::uint32_t> y;
};

inline Problem random_problem(int stage, cnc::Rng& rng) {
  const std::size_t c = 2 + rng.below(6);
  Problem p{random_model(stage, c, rng), {}, {}};
  jitter(p.model, rng);
  const std::size_t b = 1 + rng.below(5);
  p.x = oracle::random_matrix(b, p.model.extractor().input_dim(), rng);
  p.y = random_labels(b, p.model.num_outputs(), rng);
  return p;
}

// Central-difference check of every parameter of a full model under softmax
// cross-entropy, which exercises dense, ReLU, branch heads and the masked combine.
inline cnc::GradCheckReport model_grad_check(Problem& p, double floor = 1e-5) {
  auto loss = [&p] { return cnc::softmax_xent(p.model.logits(p.x), p.y).loss; };
  auto grads = [&p] {
    p.model.zero_grad();
    cnc::CncModel::Cache cache;
    const cnc::Matrix logits = p.model.forward(p.x, cache);
    p.model.backward(cache, cnc::softmax_xent(logits, p.y).grad);
  };
  const auto params = p.model.params();
  return cnc::grad_check(params, loss, grads, 1e-6, floor);
}

}  // namespace fixture
