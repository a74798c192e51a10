#include "cnc/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cnc/error.hpp"

namespace cnc {

DenseLayer::DenseLayer(std::size_t in_dim, std::size_t out_dim)
    : weights(out_dim, in_dim),
      bias(1, out_dim),
      grad_weights(out_dim, in_dim),
      grad_bias(1, out_dim) {}

DenseLayer DenseLayer::glorot(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
  DenseLayer layer(in_dim, out_dim);
  const double a = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
  for (double& w : layer.weights.data()) w = rng.uniform(-a, a);
  return layer;
}

Matrix DenseLayer::forward(const Matrix& x) const {
  Matrix out = matmul_transposed(x, weights);
  for (std::size_t b = 0; b < out.rows(); ++b) {
    auto r = out.row(b);
    for (std::size_t o = 0; o < r.size(); ++o) r[o] += bias(0, o);
  }
  return out;
}

Matrix DenseLayer::backward(const Matrix& x, const Matrix& upstream) {
  if (x.cols() != in_dim() || upstream.cols() != out_dim() || x.rows() != upstream.rows()) {
    throw DimensionError("dense backward: shapes do not match the forward pass");
  }
  Matrix input_grad(x.rows(), in_dim());
  for (std::size_t b = 0; b < x.rows(); ++b) {
    const auto xr = x.row(b);
    const auto ur = upstream.row(b);
    auto gr = input_grad.row(b);
    for (std::size_t o = 0; o < out_dim(); ++o) {
      const double u = ur[o];
      if (u == 0.0) continue;
      grad_bias(0, o) += u;
      auto gw = grad_weights.row(o);
      const auto w = weights.row(o);
      for (std::size_t i = 0; i < xr.size(); ++i) {
        gw[i] += u * xr[i];
        gr[i] += u * w[i];
      }
    }
  }
  return input_grad;
}

void DenseLayer::zero_grad() noexcept {
  grad_weights.fill(0.0);
  grad_bias.fill(0.0);
}

void DenseLayer::collect(std::vector<ParamRef>& out) {
  out.push_back({&weights, &grad_weights});
  out.push_back({&bias, &grad_bias});
}

Matrix relu(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

Matrix relu_backward(const Matrix& x, const Matrix& upstream) {
  if (x.rows() != upstream.rows() || x.cols() != upstream.cols()) {
    throw DimensionError("relu backward: shape mismatch");
  }
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] > 0.0 ? upstream.data()[i] : 0.0;
  return out;
}

Matrix softmax(const Matrix& logits) {
  Matrix probs(logits.rows(), logits.cols());
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    const auto z = logits.row(b);
    auto p = probs.row(b);
    const double m = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      p[i] = std::exp(z[i] - m);
      sum += p[i];
    }
    for (double& v : p) v /= sum;
  }
  return probs;
}

XentResult softmax_xent(const Matrix& logits, std::span<const std::uint32_t> labels) {
  if (labels.size() != logits.rows()) throw DimensionError("softmax_xent: one label per row required");
  const std::size_t classes = logits.cols();
  XentResult r;
  r.probs = Matrix(logits.rows(), classes);
  r.grad = Matrix(logits.rows(), classes);
  const double inv_b = 1.0 / static_cast<double>(logits.rows());
  double total = 0.0;
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    const std::uint32_t y = labels[b];
    if (y >= classes) {
      throw LabelError("label " + std::to_string(y) + " out of range for " + std::to_string(classes) +
                       " classes");
    }
    const auto z = logits.row(b);
    auto p = r.probs.row(b);
    const double m = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < classes; ++i) {
      p[i] = std::exp(z[i] - m);
      sum += p[i];
    }
    for (double& v : p) v /= sum;
    // log p_y computed from the shifted logits keeps large margins finite.
    total += std::log(sum) - (z[y] - m);
    auto g = r.grad.row(b);
    for (std::size_t i = 0; i < classes; ++i) g[i] = (p[i] - (i == y ? 1.0 : 0.0)) * inv_b;
  }
  r.loss = total * inv_b;
  return r;
}

void SgdConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

Sgd::Sgd(SgdConfig config) : config_(config) { config_.validate(); }

void Sgd::step(std::span<const ParamRef> params) {
  for (const auto& p : params) {
    if (!p.frozen && !p.grad->all_finite()) throw NumericError("non-finite gradient; optimizer step aborted");
  }
  if (velocity_.size() != params.size()) {
    velocity_.clear();
    for (const auto& p : params) velocity_.emplace_back(p.value->rows(), p.value->cols());
  }
  const double lr = config_.learning_rate;
  const double mu = config_.momentum;
  const double wd = config_.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    if (p.frozen) continue;
    auto w = p.value->data();
    auto g = p.grad->data();
    auto v = velocity_[k].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = mu * v[i] - lr * (g[i] + wd * w[i]);
      w[i] += v[i];
    }
  }
}

FeatureExtractor::FeatureExtractor(std::size_t input_dim, std::span<const std::size_t> widths, Rng& rng)
    : input_dim_(input_dim) {
  std::size_t in = input_dim;
  for (std::size_t w : widths) {
    if (w == 0) throw ConfigError("extractor layer width must be >= 1");
    layers_.push_back(DenseLayer::glorot(in, w, rng));
    in = w;
  }
}

void FeatureExtractor::push_layer(DenseLayer layer) {
  if (layer.in_dim() != output_dim()) throw DimensionError("extractor layer does not chain");
  layers_.push_back(std::move(layer));
}

std::size_t FeatureExtractor::param_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.param_count();
  return n;
}

std::vector<std::size_t> FeatureExtractor::widths() const {
  std::vector<std::size_t> w;
  for (const auto& l : layers_) w.push_back(l.out_dim());
  return w;
}

Matrix FeatureExtractor::forward(const Matrix& x, Cache* cache) const {
  if (x.cols() != input_dim_) {
    throw DimensionError("extractor expects " + std::to_string(input_dim_) + " input features, got " +
                         std::to_string(x.cols()));
  }
  if (cache != nullptr) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Matrix h = x;
  for (const auto& layer : layers_) {
    Matrix pre = layer.forward(h);
    Matrix post = relu(pre);
    if (cache != nullptr) {
      cache->inputs.push_back(std::move(h));
      cache->pre.push_back(std::move(pre));
    }
    h = std::move(post);
  }
  return h;
}

Matrix FeatureExtractor::backward(const Cache& cache, const Matrix& upstream) {
  Matrix g = upstream;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    g = relu_backward(cache.pre[k], g);
    g = layers_[k].backward(cache.inputs[k], g);
  }
  return g;
}

void FeatureExtractor::zero_grad() noexcept {
  for (auto& l : layers_) l.zero_grad();
}

void FeatureExtractor::collect(std::vector<ParamRef>& out) {
  for (auto& l : layers_) l.collect(out);
}

GradCheckReport grad_check(std::span<const ParamRef> params, const std::function<double()>& loss,
                           const std::function<void()>& compute_grads, double h, double floor) {
  compute_grads();
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(*p.grad);

  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].frozen) continue;
    auto w = params[k].value->data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + h;
      const double up = loss();
      w[i] = saved - h;
      const double down = loss();
      w[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k].data()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++report.checked;
      report.max_abs_error = std::max(report.max_abs_error, std::abs(a - numeric));
      if (std::max(std::abs(a), std::abs(numeric)) < floor) ++report.below_floor;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = k;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace cnc
