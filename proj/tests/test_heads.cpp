#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "cnc/error.hpp"
#include "cnc/heads.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using cnc::Matrix;

namespace {

cnc::BranchHead make_branch(std::size_t d, std::size_t h, std::size_t c, cnc::Rng& rng) {
  cnc::BranchHead b;
  b.fc1 = cnc::DenseLayer::glorot(d, h, rng);
  b.fc2 = cnc::DenseLayer::glorot(h, c, rng);
  b.mask.bits.assign(c, 1);
  return b;
}

cnc::CncModel two_branch_model(cnc::Rng& rng) {
  cnc::FeatureExtractor ex(5, std::vector<std::size_t>{6}, rng);
  const auto cl = cnc::Clustering::from_groups(std::vector<std::size_t>{0, 0, 1, 1, 1});
  cnc::CncStack stack;
  stack.push_level(cnc::build_step3_head(cl, 6, 2.0, rng));
  cnc::CncModel m(std::move(ex), std::move(stack));
  fixture::jitter(m, rng);
  return m;
}

}  // namespace

TEST_CASE("branch forward examples") {
  cnc::BranchHead zero;
  zero.fc1 = cnc::DenseLayer(4, 2);
  zero.fc2 = cnc::DenseLayer(2, 3);
  CHECK(zero.forward(Matrix(2, 4, 1.5)) == Matrix(2, 3));

  cnc::Rng rng(4);
  auto b = make_branch(3, 3, 4, rng);
  b.fc1.weights = Matrix{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const Matrix x{{0.5, 2, 0}, {1, 1, 3}};
  CHECK(b.forward(x) == b.fc2.forward(x));

  for (int t = 0; t < 10; ++t) {
    auto r = make_branch(5, 3, 4, rng);
    for (auto& v : r.fc1.bias.data()) v = rng.normal();
    for (auto& v : r.fc2.bias.data()) v = rng.normal();
    const Matrix f = oracle::random_matrix(3, 5, rng);
    const Matrix want =
        oracle::dense(oracle::relu(oracle::dense(f, r.fc1.weights, r.fc1.bias)), r.fc2.weights, r.fc2.bias);
    CHECK(cnc::max_abs_diff(r.forward(f), want) < 1e-12);
  }
  CHECK_THROWS_AS((void)b.forward(Matrix(1, 4)), cnc::DimensionError);
}

TEST_CASE("combine_masked is a disjoint scatter") {
  const Matrix a{{1, 2, 3, 4}};
  const Matrix b{{10, 20, 30, 40}};
  const auto one = cnc::masks(cnc::Clustering::single(4));
  CHECK(cnc::combine_masked(std::vector<Matrix>{a}, one) == a);

  const auto two = cnc::masks(cnc::Clustering::from_groups(std::vector<std::size_t>{0, 0, 1, 1}));
  CHECK(cnc::combine_masked(std::vector<Matrix>{a, b}, two) == Matrix{{1, 2, 30, 40}});

  auto overlap = two;
  overlap[1].bits[1] = 1;
  CHECK_THROWS_AS((void)cnc::combine_masked(std::vector<Matrix>{a, b}, overlap), cnc::InputError);
  auto hole = two;
  hole[1].bits[3] = 0;
  CHECK_THROWS_AS((void)cnc::combine_masked(std::vector<Matrix>{a, b}, hole), cnc::InputError);
}

TEST_CASE("combine then read back each branch's own positions exactly") {
  cnc::Rng rng(41);
  for (int t = 0; t < 30; ++t) {
    const std::size_t c = 2 + rng.below(10);
    const auto ms = cnc::masks(fixture::random_clustering(c, c, rng));
    std::vector<Matrix> outs;
    for (std::size_t k = 0; k < ms.size(); ++k) outs.push_back(oracle::random_matrix(3, c, rng));
    const Matrix z = cnc::combine_masked(outs, ms);
    for (std::size_t k = 0; k < ms.size(); ++k) {
      for (std::size_t b = 0; b < 3; ++b) {
        for (std::size_t i = 0; i < c; ++i) {
          if (ms[k].bits[i]) CHECK(z(b, i) == outs[k](b, i));
        }
      }
    }
    const Matrix p = cnc::softmax(z);
    for (std::size_t b = 0; b < 3; ++b) {
      const auto r = p.row(b);
      CHECK(std::abs(std::accumulate(r.begin(), r.end(), 0.0) - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("non-owning positions carry exactly zero gradient") {
  cnc::Rng rng(42);
  for (int t = 0; t < 20; ++t) {
    auto m = two_branch_model(rng);
    const Matrix x = oracle::random_matrix(4, 5, rng);
    const auto y = fixture::random_labels(4, 5, rng);
    m.zero_grad();
    cnc::CncModel::Cache cache;
    m.backward(cache, cnc::softmax_xent(m.forward(x, cache), y).grad);
    const auto& level = std::get<cnc::CncStack>(m.head()).levels[0];
    for (const auto& br : level.branches) {
      for (std::size_t i = 0; i < 5; ++i) {
        if (br.mask.bits[i]) continue;
        CHECK(br.fc2.grad_bias(0, i) == 0.0);
        for (double g : br.fc2.grad_weights.row(i)) CHECK(g == 0.0);
      }
    }
    // Numerically, an unowned fc2 entry has no effect on the loss at all.
    auto& br = std::get<cnc::CncStack>(m.head()).levels[0].branches[0];
    const double before = cnc::softmax_xent(m.logits(x), y).loss;
    br.fc2.bias(0, 4) += 1.0;
    br.fc2.weights(3, 0) += 1.0;
    CHECK(cnc::softmax_xent(m.logits(x), y).loss == before);
  }
}

TEST_CASE("changing a target inside one cluster only moves that branch and the extractor") {
  cnc::Rng rng(43);
  for (int t = 0; t < 20; ++t) {
    auto m = two_branch_model(rng);
    const Matrix x = oracle::random_matrix(3, 5, rng);
    std::vector<std::uint32_t> y{2, 0, 3};
    auto grads = [&](const std::vector<std::uint32_t>& labels) {
      m.zero_grad();
      cnc::CncModel::Cache cache;
      m.backward(cache, cnc::softmax_xent(m.forward(x, cache), labels).grad);
      std::vector<Matrix> g;
      for (const auto& p : m.params()) g.push_back(*p.grad);
      return g;
    };
    const auto g0 = grads(y);
    y[0] = 4;  // 2 -> 4, both owned by cluster 1
    const auto g1 = grads(y);
    // params: extractor (2), branch 0 fc1/fc2 (4), branch 1 fc1/fc2 (4)
    REQUIRE(g0.size() == 10);
    for (std::size_t i = 2; i < 6; ++i) CHECK(g0[i] == g1[i]);
    bool moved = false;
    for (std::size_t i = 6; i < 10; ++i) moved = moved || !(g0[i] == g1[i]);
    CHECK(moved);
  }
}

TEST_CASE("step-3 head sizes") {
  cnc::Rng rng(44);
  const auto cl = cnc::Clustering::from_groups(std::vector<std::size_t>{0, 1, 0, 1, 2});
  const auto h64 = cnc::build_step3_head(cl, 64, 4.0, rng);
  REQUIRE(h64.branches.size() == 3);
  for (const auto& b : h64.branches) {
    CHECK(b.fc1.out_dim() == 16);
    CHECK(b.fc2.out_dim() == 5);
    CHECK(b.mask.cluster == b.cluster);
  }
  CHECK(cnc::build_step3_head(cl, 4, 8.0, rng).branches[0].fc1.out_dim() == 1);
  CHECK(cnc::build_step3_head(cl, 4, 16.0, rng).branches[0].fc1.out_dim() == 1);
  CHECK_THROWS_AS((void)cnc::build_step3_head(cl, 8, 0.0, rng), cnc::ConfigError);
  CHECK_THROWS_AS((void)cnc::build_step3_head(cl, 8, -2.0, rng), cnc::ConfigError);
  CHECK_THROWS_AS((void)cnc::build_step3_head(cl, 3, 4.0, rng), cnc::DimensionError);
}

TEST_CASE("parameter counts") {
  cnc::Rng rng(45);
  const auto one = cnc::build_step3_head(cnc::Clustering::single(4), 8, 4.0, rng);
  CHECK(one.param_count() == 30);
  CHECK(oracle::branch_params(8, 2, 4, 1) == 30);

  cnc::CncModel flat(cnc::FeatureExtractor(10), cnc::FlatHead{cnc::DenseLayer(10, 5)});
  CHECK(cnc::param_count(flat) == 55);
  cnc::CncStack s;
  s.push_level(one);
  CHECK(cnc::param_count(cnc::CncModel(cnc::FeatureExtractor(8), std::move(s))) == 30);

  for (int t = 0; t < 20; ++t) {
    const std::size_t c = 3 + rng.below(8);
    auto ex = fixture::random_extractor(4 + rng.below(4), rng);
    const std::size_t d = ex.output_dim();
    const auto cl = fixture::random_clustering(c, c - 1, rng);
    const cnc::CncModel two(ex, cnc::ClusteredHead{cnc::DenseLayer(d, cl.num_clusters()), cl});
    cnc::CncStack st;
    st.push_level(cnc::build_step3_head(cl, d, 4.0, rng));
    const cnc::CncModel three(ex, std::move(st));
    CHECK(cnc::param_count(three) > cnc::param_count(two));
  }
}

TEST_CASE("stacked levels add their logits through the label maps") {
  cnc::Rng rng(46);
  const auto l0 = cnc::Clustering::from_groups(std::vector<std::size_t>{0, 0, 1, 1, 2, 2});
  const auto l1 = cnc::Clustering::from_groups(std::vector<std::size_t>{0, 0, 1});
  cnc::CncStack s;
  s.push_level(cnc::build_step3_head(l0, 4, 2.0, rng));
  s.push_level(cnc::build_step3_head(l1, 4, 2.0, rng));
  CHECK(s.label_maps[1] == std::vector<std::uint32_t>{0, 0, 1, 1, 2, 2});
  CHECK_THROWS_AS(s.push_level(cnc::build_step3_head(cnc::Clustering::single(6), 4, 2.0, rng)), cnc::DimensionError);

  const cnc::CncModel m(cnc::FeatureExtractor(4), s);
  const Matrix x = oracle::random_matrix(3, 4, rng);
  const Matrix z = m.logits(x);
  std::vector<Matrix> lv;
  for (const auto& level : s.levels) {
    std::vector<Matrix> outs;
    for (const auto& b : level.branches) outs.push_back(b.forward(x));
    lv.push_back(cnc::combine_masked(outs, level.branch_masks()));
  }
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < 6; ++i) CHECK(z(b, i) == lv[0](b, i) + lv[1](b, s.label_maps[1][i]));
  }
}

TEST_CASE("replacing the head keeps the extractor bit-identical") {
  cnc::Rng rng(47);
  auto m = fixture::random_model(1, 6, rng);
  const auto before = m.extractor().layers();
  const std::size_t d = m.extractor().output_dim();
  const auto cl = cnc::Clustering::from_groups(std::vector<std::size_t>{0, 0, 1, 1, 2, 2});
  m.replace_head(cnc::ClusteredHead{cnc::DenseLayer::glorot(d, 3, rng), cl});
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(m.extractor().layers()[i].weights == before[i].weights);
    CHECK(m.extractor().layers()[i].bias == before[i].bias);
  }
  CHECK(m.stage() == 2);
  CHECK(m.num_outputs() == 3);
  CHECK(m.num_labels() == 6);
  CHECK_THROWS_AS(m.replace_head(cnc::FlatHead{cnc::DenseLayer(d + 1, 6)}), cnc::DimensionError);
}

TEST_CASE("checkpoints round-trip bit-exactly for every stage") {
  cnc::Rng rng(48);
  for (int t = 0; t < 15; ++t) {
    auto m = fixture::random_model(1 + t % 3, 3 + rng.below(6), rng);
    fixture::jitter(m, rng);
    std::stringstream ss;
    cnc::write_checkpoint(ss, m);
    const std::string bytes = ss.str();
    const auto back = cnc::read_checkpoint(ss);
    CHECK(back.stage() == m.stage());
    const auto a = m.param_values(), b = back.param_values();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == *b[i]);
    std::stringstream again;
    cnc::write_checkpoint(again, back);
    CHECK(again.str() == bytes);
  }
}

TEST_CASE("corrupt checkpoints report where they broke") {
  cnc::Rng rng(49);
  const auto m = fixture::random_model(3, 5, rng);
  std::stringstream ss;
  cnc::write_checkpoint(ss, m);
  std::string bytes = ss.str();

  std::istringstream cut(bytes.substr(0, bytes.size() - 3));
  try {
    (void)cnc::read_checkpoint(cut);
    FAIL("truncated checkpoint accepted");
  } catch (const cnc::ParseError& e) {
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }
  bytes[0] = 'X';
  std::istringstream bad(bytes);
  CHECK_THROWS_AS((void)cnc::read_checkpoint(bad), cnc::ParseError);
}
