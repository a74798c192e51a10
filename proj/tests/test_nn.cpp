#include <doctest.h>

#include <cmath>
#include <numbers>

#include "cnc/error.hpp"
#include "cnc/nn.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using cnc::Matrix;

TEST_CASE("matmul_transposed agrees with the triple loop") {
  cnc::Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    const auto x = oracle::random_matrix(1 + rng.below(6), 1 + rng.below(7), rng);
    const auto w = oracle::random_matrix(1 + rng.below(5), x.cols(), rng);
    const Matrix zero(1, w.rows());
    CHECK(cnc::max_abs_diff(cnc::matmul_transposed(x, w), oracle::dense(x, w, zero)) < 1e-12);
  }
  CHECK_THROWS_AS((void)cnc::matmul_transposed(Matrix(2, 3), Matrix(2, 4)), cnc::DimensionError);
}

TEST_CASE("dense forward on a hand fixture") {
  cnc::DenseLayer l(3, 2);
  l.weights = Matrix{{1, 2, 3}, {-1, 0, 1}};
  l.bias = Matrix{{0.5, -0.5}};
  const Matrix y = l.forward(Matrix{{1, 1, 1}, {2, 0, -1}});
  CHECK(y == Matrix{{6.5, -0.5}, {-0.5, -3.5}});
  CHECK_THROWS_AS((void)l.forward(Matrix(1, 2)), cnc::DimensionError);
}

TEST_CASE("glorot init stays inside its bound and zeroes the bias") {
  cnc::Rng rng(3);
  const auto l = cnc::DenseLayer::glorot(10, 6, rng);
  const double a = std::sqrt(6.0 / 16.0);
  for (double w : l.weights.data()) CHECK(std::abs(w) < a);
  for (double b : l.bias.data()) CHECK(b == 0.0);
  CHECK(l.param_count() == 66);
}

TEST_CASE("relu examples") {
  CHECK(cnc::relu(Matrix{{-1, 0, 2}}) == Matrix{{0, 0, 2}});
  CHECK(cnc::relu_backward(Matrix{{-1, 2}}, Matrix{{5, 5}}) == Matrix{{0, 5}});
  CHECK(cnc::relu_backward(Matrix{{0.0}}, Matrix{{1.0}}) == Matrix{{0.0}});
}

TEST_CASE("relu gradient away from the kink") {
  cnc::Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    Matrix x = oracle::random_matrix(3, 4, rng);
    for (auto& v : x.data()) {
      if (std::abs(v) < 1e-3) v = 0.5;
    }
    const Matrix up = oracle::random_matrix(3, 4, rng);
    Matrix gx(3, 4);
    cnc::ParamRef p{&x, &gx};
    auto loss = [&] {
      const Matrix r = cnc::relu(x);
      double s = 0.0;
      for (std::size_t i = 0; i < r.size(); ++i) s += r.data()[i] * up.data()[i];
      return s;
    };
    auto grads = [&] { gx = cnc::relu_backward(x, up); };
    CHECK(cnc::grad_check({&p, 1}, loss, grads).max_rel_error < 1e-6);
  }
}

TEST_CASE("softmax_xent examples") {
  const std::vector<std::uint32_t> y{2};
  const auto r = cnc::softmax_xent(Matrix{{3, 3, 3, 3}}, y);
  for (double p : r.probs.data()) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(r.loss == doctest::Approx(std::log(4.0)).epsilon(1e-14));

  const std::vector<std::uint32_t> y0{0};
  const auto big = cnc::softmax_xent(Matrix{{1000, 0}}, y0);
  CHECK(big.probs.all_finite());
  CHECK(big.probs(0, 0) == doctest::Approx(1.0));
  CHECK(big.probs(0, 1) < 1e-300);
  CHECK(std::isfinite(big.loss));

  const std::vector<std::uint32_t> bad{4};
  CHECK_THROWS_AS((void)cnc::softmax_xent(Matrix{{1, 2, 3, 4}}, bad), cnc::LabelError);
}

TEST_CASE("softmax rows sum to one and stay positive") {
  cnc::Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    const Matrix p = cnc::softmax(oracle::random_matrix(4, 2 + rng.below(10), rng, 20.0));
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0.0;
      for (double v : p.row(r)) {
        CHECK(v > 0.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("softmax_xent gradient matches finite differences") {
  cnc::Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    Matrix z = oracle::random_matrix(1 + rng.below(4), 2 + rng.below(5), rng);
    const auto y = fixture::random_labels(z.rows(), z.cols(), rng);
    Matrix gz(z.rows(), z.cols());
    cnc::ParamRef p{&z, &gz};
    const auto rep = cnc::grad_check({&p, 1}, [&] { return cnc::softmax_xent(z, y).loss; },
                                     [&] { gz = cnc::softmax_xent(z, y).grad; });
    CHECK(rep.max_rel_error < 1e-5);
  }
}

TEST_CASE("sgd without momentum or decay is plain gradient descent") {
  Matrix w{{1.0, -2.0}};
  Matrix g{{0.5, 0.25}};
  cnc::Sgd opt({.learning_rate = 0.1, .momentum = 0.0, .weight_decay = 0.0});
  cnc::ParamRef p{&w, &g};
  opt.step({&p, 1});
  CHECK(w(0, 0) == doctest::Approx(0.95));
  CHECK(w(0, 1) == doctest::Approx(-2.025));
}

TEST_CASE("sgd with zero gradient and zero velocity leaves weights alone") {
  Matrix w{{1.5, -0.5}};
  Matrix g(1, 2);
  cnc::Sgd opt({.learning_rate = 0.1, .momentum = 0.9, .weight_decay = 0.0});
  cnc::ParamRef p{&w, &g};
  opt.step({&p, 1});
  CHECK(w == Matrix{{1.5, -0.5}});
}

TEST_CASE("two momentum steps follow the unrolled recurrence") {
  const double lr = 0.1, mu = 0.9, wd = 0.01, g1 = 0.3, g2 = -0.2, w0 = 1.0;
  // v1 = -lr (g1 + wd w0);          w1 = w0 + v1
  // v2 = mu v1 - lr (g2 + wd w1);   w2 = w1 + v2
  const double v1 = -lr * (g1 + wd * w0);
  const double w1 = w0 + v1;
  const double v2 = mu * v1 - lr * (g2 + wd * w1);
  const double w2 = w1 + v2;
  CHECK(w2 == doctest::Approx(0.960131).epsilon(1e-12));

  Matrix w{{w0}};
  Matrix g{{g1}};
  cnc::Sgd opt({.learning_rate = lr, .momentum = mu, .weight_decay = wd});
  cnc::ParamRef p{&w, &g};
  opt.step({&p, 1});
  g(0, 0) = g2;
  opt.step({&p, 1});
  CHECK(w(0, 0) == doctest::Approx(w2).epsilon(1e-15));
}

TEST_CASE("sgd refuses a NaN gradient without touching anything") {
  Matrix a{{1.0}}, ga{{0.1}};
  Matrix b{{2.0}}, gb{{std::nan("")}};
  cnc::Sgd opt({.learning_rate = 0.1, .momentum = 0.0, .weight_decay = 0.0});
  std::vector<cnc::ParamRef> ps{{&a, &ga}, {&b, &gb}};
  CHECK_THROWS_AS(opt.step(ps), cnc::NumericError);
  CHECK(a(0, 0) == 1.0);
  CHECK(b(0, 0) == 2.0);
}

TEST_CASE("frozen parameters are not updated and not grad-checked") {
  Matrix w{{1.0}}, g{{1.0}};
  cnc::Sgd opt({.learning_rate = 0.1, .momentum = 0.0, .weight_decay = 0.0});
  cnc::ParamRef p{&w, &g, true};
  opt.step({&p, 1});
  CHECK(w(0, 0) == 1.0);

  cnc::Rng rng(1);
  auto layer = cnc::DenseLayer::glorot(3, 2, rng);
  const Matrix x = oracle::random_matrix(2, 3, rng);
  std::vector<cnc::ParamRef> ps;
  layer.collect(ps);
  ps[0].frozen = true;
  const auto rep = cnc::grad_check(
      ps, [&] { return cnc::softmax_xent(layer.forward(x), std::vector<std::uint32_t>{0, 1}).loss; },
      [&] {
        layer.zero_grad();
        layer.backward(x, cnc::softmax_xent(layer.forward(x), std::vector<std::uint32_t>{0, 1}).grad);
      });
  CHECK(rep.checked == 2);
}

TEST_CASE("single dense layer passes grad_check, inputs included") {
  cnc::Rng rng(21);
  for (int t = 0; t < 10; ++t) {
    auto layer = cnc::DenseLayer::glorot(2 + rng.below(5), 2 + rng.below(5), rng);
    Matrix x = oracle::random_matrix(3, layer.in_dim(), rng);
    Matrix gx(x.rows(), x.cols());
    const auto y = fixture::random_labels(3, layer.out_dim(), rng);
    std::vector<cnc::ParamRef> ps;
    layer.collect(ps);
    ps.push_back({&x, &gx});
    const auto rep = cnc::grad_check(
        ps, [&] { return cnc::softmax_xent(layer.forward(x), y).loss; },
        [&] {
          layer.zero_grad();
          gx = layer.backward(x, cnc::softmax_xent(layer.forward(x), y).grad);
        });
    CHECK(rep.max_rel_error < 1e-4);
  }
}

TEST_CASE("dense + relu + dense passes grad_check") {
  cnc::Rng rng(22);
  for (int t = 0; t < 10; ++t) {
    auto a = cnc::DenseLayer::glorot(4, 6, rng);
    auto b = cnc::DenseLayer::glorot(6, 3, rng);
    for (auto& v : a.bias.data()) v = 0.1 * rng.normal();
    const Matrix x = oracle::random_matrix(4, 4, rng);
    const auto y = fixture::random_labels(4, 3, rng);
    std::vector<cnc::ParamRef> ps;
    a.collect(ps);
    b.collect(ps);
    auto loss = [&] { return cnc::softmax_xent(b.forward(cnc::relu(a.forward(x))), y).loss; };
    auto grads = [&] {
      a.zero_grad();
      b.zero_grad();
      const Matrix pre = a.forward(x);
      const Matrix h = cnc::relu(pre);
      const auto r = cnc::softmax_xent(b.forward(h), y);
      a.backward(x, cnc::relu_backward(pre, b.backward(h, r.grad)));
    };
    CHECK(cnc::grad_check(ps, loss, grads).max_rel_error < 1e-4);
  }
}

TEST_CASE("full models pass grad_check across random configurations") {
  cnc::Rng rng(2024);
  double worst = 0.0;
  for (int t = 0; t < 60; ++t) {
    auto p = fixture::random_problem(1 + static_cast<int>(t % 3), rng);
    worst = std::max(worst, fixture::model_grad_check(p).max_rel_error);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("extractor with no layers is the identity") {
  cnc::FeatureExtractor ex(3);
  const Matrix x{{-1, 2, 0.5}};
  CHECK(ex.forward(x) == x);
  CHECK(ex.param_count() == 0);
  CHECK(ex.output_dim() == 3);
}

TEST_CASE("one small step at lr 1e-4 lowers the loss on a fixed batch") {
  cnc::Rng rng(77);
  for (int t = 0; t < 10; ++t) {
    auto p = fixture::random_problem(1 + static_cast<int>(t % 3), rng);
    const double before = cnc::softmax_xent(p.model.logits(p.x), p.y).loss;
    p.model.zero_grad();
    cnc::CncModel::Cache cache;
    p.model.backward(cache, cnc::softmax_xent(p.model.forward(p.x, cache), p.y).grad);
    cnc::Sgd opt({.learning_rate = 1e-4, .momentum = 0.0, .weight_decay = 0.0});
    const auto ps = p.model.params();
    opt.step(ps);
    CHECK(cnc::softmax_xent(p.model.logits(p.x), p.y).loss < before);
  }
}

TEST_CASE("rng streams are reproducible and forks are independent") {
  cnc::Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  cnc::Rng root(42);
  CHECK(root.fork("x").next_u64() != root.fork("y").next_u64());
  CHECK(root.fork(1).next_u64() == cnc::Rng(42).fork(1).next_u64());
  cnc::Rng r(5);
  for (int i = 0; i < 1000; ++i) CHECK(r.below(7) < 7);
  double m = 0.0;
  for (int i = 0; i < 20000; ++i) m += r.normal();
  CHECK(std::abs(m / 20000) < 0.05);
}
