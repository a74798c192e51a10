#include "cnc/heads.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "cnc/binary_io.hpp"
#include "cnc/error.hpp"

namespace cnc {

Matrix BranchHead::forward(const Matrix& features, Matrix* pre) const {
  Matrix z = fc1.forward(features);
  Matrix out = fc2.forward(relu(z));
  if (pre != nullptr) *pre = std::move(z);
  return out;
}

Matrix BranchHead::backward(const Matrix& features, const Matrix& pre, const Matrix& upstream) {
  Matrix g = fc2.backward(relu(pre), upstream);
  g = relu_backward(pre, g);
  return fc1.backward(features, g);
}

namespace {

// owner[i] = index of the mask covering label i.
std::vector<std::size_t> mask_owners(std::span<const ClusterMask> masks) {
  if (masks.empty()) throw InputError("masked combine needs at least one mask");
  const std::size_t c = masks.front().bits.size();
  std::vector<std::size_t> owner(c, masks.size());
  for (std::size_t k = 0; k < masks.size(); ++k) {
    if (masks[k].bits.size() != c) throw InputError("masks have different lengths");
    for (std::size_t i = 0; i < c; ++i) {
      if (!masks[k].bits[i]) continue;
      if (owner[i] != masks.size()) throw InputError("label " + std::to_string(i) + " is owned by two masks");
      owner[i] = k;
    }
  }
  for (std::size_t i = 0; i < c; ++i) {
    if (owner[i] == masks.size()) throw InputError("label " + std::to_string(i) + " is owned by no mask");
  }
  return owner;
}

}  // namespace

Matrix combine_masked(std::span<const Matrix> branch_outputs, std::span<const ClusterMask> masks) {
  if (branch_outputs.size() != masks.size()) throw InputError("one branch output per mask required");
  const auto owner = mask_owners(masks);
  const std::size_t c = owner.size();
  const std::size_t batch = branch_outputs.front().rows();
  for (const auto& o : branch_outputs) {
    if (o.rows() != batch || o.cols() != c) throw DimensionError("branch output shape does not match the masks");
  }
  Matrix logits(batch, c);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < c; ++i) logits(b, i) = branch_outputs[owner[i]](b, i);
  }
  return logits;
}

std::vector<ClusterMask> CncHead::branch_masks() const {
  std::vector<ClusterMask> out;
  out.reserve(branches.size());
  for (const auto& b : branches) out.push_back(b.mask);
  return out;
}

std::size_t CncHead::param_count() const noexcept {
  std::size_t n = 0;
  for (const auto& b : branches) n += b.param_count();
  return n;
}

CncHead build_step3_head(const Clustering& c, std::size_t feature_dim, double hidden_ratio, Rng& rng) {
  if (!(hidden_ratio > 0.0) || !std::isfinite(hidden_ratio)) throw ConfigError("hidden_ratio must be a positive number");
  if (feature_dim < 4) throw DimensionError("step-3 head needs a feature dimension of at least 4");
  c.validate();
  const auto hidden = static_cast<std::size_t>(
      std::max(1LL, std::llround(static_cast<double>(feature_dim) / hidden_ratio)));
  CncHead head;
  head.num_labels = c.num_labels();
  head.clustering = c;
  for (auto& m : masks(c)) {
    BranchHead b;
    b.cluster = m.cluster;
    b.fc1 = DenseLayer::glorot(feature_dim, hidden, rng);
    b.fc2 = DenseLayer::glorot(hidden, c.num_labels(), rng);
    b.mask = std::move(m);
    head.branches.push_back(std::move(b));
  }
  return head;
}

void CncStack::push_level(CncHead level) {
  if (levels.empty()) {
    std::vector<std::uint32_t> identity(level.num_labels);
    for (std::size_t i = 0; i < identity.size(); ++i) identity[i] = static_cast<std::uint32_t>(i);
    label_maps.push_back(std::move(identity));
  } else {
    const CncHead& prev = levels.back();
    if (level.num_labels != prev.clustering.num_clusters()) {
      throw DimensionError("stacked level must score the previous level's cluster ids");
    }
    std::vector<std::uint32_t> map = label_maps.back();
    for (auto& v : map) v = prev.clustering.cluster_of(v);
    label_maps.push_back(std::move(map));
  }
  levels.push_back(std::move(level));
}

CncModel::CncModel(FeatureExtractor extractor, Head head) : extractor_(std::move(extractor)), head_(std::move(head)) {
  check_head();
}

void CncModel::replace_head(Head head) {
  head_ = std::move(head);
  check_head();
}

void CncModel::check_head() const {
  const std::size_t d = extractor_.output_dim();
  auto check = [d](const DenseLayer& l) {
    if (l.in_dim() != d) throw DimensionError("head input dim does not match extractor output dim");
  };
  std::visit(
      [&](const auto& h) {
        using T = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<T, FlatHead>) {
          check(h.fc);
        } else if constexpr (std::is_same_v<T, ClusteredHead>) {
          check(h.fc);
          if (h.fc.out_dim() != h.clustering.num_clusters()) throw DimensionError("clustered head width must equal K");
        } else {
          if (h.levels.empty()) throw DimensionError("step-3 head has no levels");
          for (const auto& level : h.levels) {
            if (level.branches.size() != level.clustering.num_clusters()) throw DimensionError("one branch per cluster required");
            for (const auto& b : level.branches) {
              check(b.fc1);
              if (b.fc2.out_dim() != level.num_labels) throw DimensionError("branch output must span the level's labels");
            }
          }
        }
      },
      head_);
}

std::size_t CncModel::num_labels() const {
  return std::visit(
      [](const auto& h) -> std::size_t {
        using T = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<T, FlatHead>) return h.fc.out_dim();
        else if constexpr (std::is_same_v<T, ClusteredHead>) return h.clustering.num_labels();
        else return h.num_labels();
      },
      head_);
}

std::size_t CncModel::num_outputs() const {
  if (const auto* h = std::get_if<ClusteredHead>(&head_)) return h->fc.out_dim();
  return num_labels();
}

Matrix CncModel::logits(const Matrix& x) const {
  Cache cache;
  return forward(x, cache);
}

Matrix CncModel::forward(const Matrix& x, Cache& cache) const {
  cache.features = extractor_.forward(x, &cache.extractor);
  const Matrix& f = cache.features;
  if (const auto* h = std::get_if<FlatHead>(&head_)) return h->fc.forward(f);
  if (const auto* h = std::get_if<ClusteredHead>(&head_)) return h->fc.forward(f);
  const auto& stack = std::get<CncStack>(head_);
  const std::size_t c = stack.num_labels();
  Matrix out(f.rows(), c);
  cache.branch_pre.assign(stack.levels.size(), {});
  for (std::size_t t = 0; t < stack.levels.size(); ++t) {
    const auto& level = stack.levels[t];
    std::vector<Matrix> outputs;
    outputs.reserve(level.branches.size());
    auto& pre = cache.branch_pre[t];
    pre.resize(level.branches.size());
    for (std::size_t k = 0; k < level.branches.size(); ++k) outputs.push_back(level.branches[k].forward(f, &pre[k]));
    const Matrix level_logits = combine_masked(outputs, level.branch_masks());
    const auto& map = stack.label_maps[t];
    for (std::size_t b = 0; b < f.rows(); ++b) {
      for (std::size_t i = 0; i < c; ++i) out(b, i) += level_logits(b, map[i]);
    }
  }
  return out;
}

void CncModel::backward(const Cache& cache, const Matrix& grad_logits) {
  const Matrix& f = cache.features;
  Matrix grad_features;
  if (auto* h = std::get_if<FlatHead>(&head_)) {
    grad_features = h->fc.backward(f, grad_logits);
  } else if (auto* h = std::get_if<ClusteredHead>(&head_)) {
    grad_features = h->fc.backward(f, grad_logits);
  } else {
    auto& stack = std::get<CncStack>(head_);
    grad_features = Matrix(f.rows(), f.cols());
    for (std::size_t t = 0; t < stack.levels.size(); ++t) {
      auto& level = stack.levels[t];
      const auto& map = stack.label_maps[t];
      Matrix level_grad(f.rows(), level.num_labels);
      for (std::size_t b = 0; b < f.rows(); ++b) {
        for (std::size_t i = 0; i < map.size(); ++i) level_grad(b, map[i]) += grad_logits(b, i);
      }
      // Branch k only sees the gradient at the positions it owns; feature
      // gradients are reduced in branch order.
      for (std::size_t k = 0; k < level.branches.size(); ++k) {
        auto& branch = level.branches[k];
        Matrix upstream(f.rows(), level.num_labels);
        for (std::size_t b = 0; b < f.rows(); ++b) {
          for (std::size_t i = 0; i < level.num_labels; ++i) {
            if (branch.mask.bits[i]) upstream(b, i) = level_grad(b, i);
          }
        }
        const Matrix g = branch.backward(f, cache.branch_pre[t][k], upstream);
        for (std::size_t i = 0; i < g.size(); ++i) grad_features.data()[i] += g.data()[i];
      }
    }
  }
  extractor_.backward(cache.extractor, grad_features);
}

void CncModel::zero_grad() noexcept {
  extractor_.zero_grad();
  std::visit(
      [](auto& h) {
        using T = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<T, CncStack>) {
          for (auto& level : h.levels) {
            for (auto& b : level.branches) {
              b.fc1.zero_grad();
              b.fc2.zero_grad();
            }
          }
        } else {
          h.fc.zero_grad();
        }
      },
      head_);
}

std::vector<ParamRef> CncModel::params() {
  std::vector<ParamRef> out;
  extractor_.collect(out);
  std::visit(
      [&out](auto& h) {
        using T = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<T, CncStack>) {
          for (auto& level : h.levels) {
            for (auto& b : level.branches) {
              b.fc1.collect(out);
              b.fc2.collect(out);
            }
          }
        } else {
          h.fc.collect(out);
        }
      },
      head_);
  return out;
}

std::vector<const Matrix*> CncModel::param_values() const {
  std::vector<const Matrix*> out;
  const auto add = [&out](const DenseLayer& l) {
    out.push_back(&l.weights);
    out.push_back(&l.bias);
  };
  for (const auto& l : extractor_.layers()) add(l);
  std::visit(
      [&add](const auto& h) {
        using T = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<T, CncStack>) {
          for (const auto& level : h.levels) {
            for (const auto& b : level.branches) {
              add(b.fc1);
              add(b.fc2);
            }
          }
        } else {
          add(h.fc);
        }
      },
      head_);
  return out;
}

std::size_t CncModel::param_count() const noexcept {
  std::size_t n = extractor_.param_count();
  std::visit(
      [&n](const auto& h) {
        using T = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<T, CncStack>) {
          for (const auto& level : h.levels) n += level.param_count();
        } else {
          n += h.fc.param_count();
        }
      },
      head_);
  return n;
}

std::size_t param_count(const CncModel& model) { return model.param_count(); }

namespace {

void put_clustering(std::ostream& out, const Clustering& c) {
  binio::put_u32(out, static_cast<std::uint32_t>(c.num_clusters()));
  for (auto v : c.assign()) binio::put_u32(out, v);
}

Clustering get_clustering(binio::Reader& r, std::size_t num_labels) {
  const std::size_t at = r.offset();
  const std::uint32_t k = r.u32();
  std::vector<std::size_t> groups(num_labels);
  for (auto& g : groups) g = r.u32();
  Clustering c = Clustering::from_groups(groups);
  if (c.num_clusters() != k) r.fail("clustering does not match its cluster count", at);
  for (std::size_t l = 0; l < num_labels; ++l) {
    if (c.cluster_of(l) != groups[l]) r.fail("clustering ids are not canonical", at);
  }
  return c;
}

}  // namespace

void write_checkpoint(std::ostream& out, const CncModel& model) {
  out.write("CNC1", 4);
  binio::put_u32(out, static_cast<std::uint32_t>(model.stage()));
  const auto& ex = model.extractor();
  binio::put_u32(out, static_cast<std::uint32_t>(ex.input_dim()));
  binio::put_u32(out, static_cast<std::uint32_t>(ex.layers().size()));
  for (auto w : ex.widths()) binio::put_u32(out, static_cast<std::uint32_t>(w));
  binio::put_u32(out, static_cast<std::uint32_t>(model.num_labels()));
  if (const auto* h = std::get_if<ClusteredHead>(&model.head())) {
    put_clustering(out, h->clustering);
  } else if (const auto* h = std::get_if<CncStack>(&model.head())) {
    binio::put_u32(out, static_cast<std::uint32_t>(h->levels.size()));
    for (const auto& level : h->levels) {
      binio::put_u32(out, static_cast<std::uint32_t>(level.num_labels));
      put_clustering(out, level.clustering);
      for (const auto& b : level.branches) binio::put_u32(out, static_cast<std::uint32_t>(b.fc1.out_dim()));
    }
  }
  for (const Matrix* m : model.param_values()) {
    for (double v : m->data()) binio::put_f64(out, v);
  }
}

CncModel read_checkpoint(std::istream& in) {
  binio::Reader r(in, "checkpoint");
  r.magic("CNC1");
  std::size_t at = r.offset();
  const std::uint32_t stage = r.u32();
  if (stage < 1 || stage > 3) r.fail("unknown stage tag " + std::to_string(stage), at);
  FeatureExtractor ex(r.u32());
  const std::uint32_t layers = r.u32();
  for (std::uint32_t k = 0; k < layers; ++k) {
    at = r.offset();
    const std::uint32_t w = r.u32();
    if (w == 0) r.fail("zero-width extractor layer", at);
    ex.push_layer(DenseLayer(ex.output_dim(), w));
  }
  const std::size_t d = ex.output_dim();
  at = r.offset();
  const std::uint32_t c = r.u32();
  if (c == 0) r.fail("zero labels", at);
  Head head;
  if (stage == 1) {
    head = FlatHead{DenseLayer(d, c)};
  } else if (stage == 2) {
    Clustering cl = get_clustering(r, c);
    head = ClusteredHead{DenseLayer(d, cl.num_clusters()), std::move(cl)};
  } else {
    CncStack stack;
    at = r.offset();
    const std::uint32_t n_levels = r.u32();
    if (n_levels == 0) r.fail("step-3 head without levels", at);
    for (std::uint32_t t = 0; t < n_levels; ++t) {
      at = r.offset();
      CncHead level;
      level.num_labels = r.u32();
      const std::size_t expected = t == 0 ? c : stack.levels.back().clustering.num_clusters();
      if (level.num_labels != expected) r.fail("level label space does not chain", at);
      level.clustering = get_clustering(r, level.num_labels);
      for (auto& m : masks(level.clustering)) {
        at = r.offset();
        const std::uint32_t hidden = r.u32();
        if (hidden == 0) r.fail("zero-width branch", at);
        BranchHead b;
        b.cluster = m.cluster;
        b.fc1 = DenseLayer(d, hidden);
        b.fc2 = DenseLayer(hidden, level.num_labels);
        b.mask = std::move(m);
        level.branches.push_back(std::move(b));
      }
      stack.push_level(std::move(level));
    }
    head = std::move(stack);
  }
  CncModel model(std::move(ex), std::move(head));
  for (const auto& p : model.params()) {
    for (double& v : p.value->data()) v = r.f64();
  }
  r.expect_end();
  return model;
}

void save_checkpoint(const CncModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_checkpoint(out, model);
  if (!out) throw IoError("write failed for " + path.string());
}

CncModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace cnc
