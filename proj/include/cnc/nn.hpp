#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cnc/matrix.hpp"
#include "cnc/rng.hpp"

namespace cnc {

// A trainable tensor and its gradient buffer. Frozen parameters are skipped by
// the optimizer and by grad_check.
struct ParamRef {
  Matrix* value = nullptr;
  Matrix* grad = nullptr;
  bool frozen = false;
};

// Fully connected layer, y = W x + b with W stored out x in.
class DenseLayer {
 public:
  DenseLayer() = default;
  DenseLayer(std::size_t in_dim, std::size_t out_dim);

  // Glorot-uniform weights in (-a, a), a = sqrt(6 / (in + out)); zero bias.
  static DenseLayer glorot(std::size_t in_dim, std::size_t out_dim, Rng& rng);

  [[nodiscard]] std::size_t in_dim() const noexcept { return weights.cols(); }
  [[nodiscard]] std::size_t out_dim() const noexcept { return weights.rows(); }
  [[nodiscard]] std::size_t param_count() const noexcept { return weights.size() + bias.size(); }

  [[nodiscard]] Matrix forward(const Matrix& x) const;

  // Accumulates dL/dW and dL/db for the batch and returns dL/dx.
  Matrix backward(const Matrix& x, const Matrix& upstream);

  void zero_grad() noexcept;
  void collect(std::vector<ParamRef>& out);

  Matrix weights;  // out x in
  Matrix bias;     // 1 x out
  Matrix grad_weights;
  Matrix grad_bias;
};

[[nodiscard]] Matrix relu(const Matrix& x);
// Gates upstream by x > 0; the subgradient at 0 is 0.
[[nodiscard]] Matrix relu_backward(const Matrix& x, const Matrix& upstream);

// Row-wise softmax with max subtraction.
[[nodiscard]] Matrix softmax(const Matrix& logits);

struct XentResult {
  double loss = 0.0;  // mean negative log-likelihood over the batch
  Matrix grad;        // (probs - onehot) / B
  Matrix probs;
};

[[nodiscard]] XentResult softmax_xent(const Matrix& logits, std::span<const std::uint32_t> labels);

struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

// SGD with heavy-ball momentum:
//   v <- momentum * v - lr * (g + wd * w);  w <- w + v
// Velocity buffers are bound to the parameter list on the first step.
class Sgd {
 public:
  explicit Sgd(SgdConfig config);

  // Throws NumericError without touching any parameter if a gradient is not finite.
  void step(std::span<const ParamRef> params);
  void reset() { velocity_.clear(); }

  [[nodiscard]] const SgdConfig& config() const noexcept { return config_; }

 private:
  SgdConfig config_;
  std::vector<Matrix> velocity_;
};

// Stack of dense layers, each followed by ReLU. With no layers it is the identity.
class FeatureExtractor {
 public:
  struct Cache {
    std::vector<Matrix> inputs;
    std::vector<Matrix> pre;
  };

  FeatureExtractor() = default;
  explicit FeatureExtractor(std::size_t input_dim) : input_dim_(input_dim) {}
  FeatureExtractor(std::size_t input_dim, std::span<const std::size_t> widths, Rng& rng);

  [[nodiscard]] std::size_t input_dim() const noexcept { return input_dim_; }
  [[nodiscard]] std::size_t output_dim() const noexcept {
    return layers_.empty() ? input_dim_ : layers_.back().out_dim();
  }
  [[nodiscard]] std::size_t param_count() const noexcept;
  [[nodiscard]] std::vector<std::size_t> widths() const;

  [[nodiscard]] Matrix forward(const Matrix& x, Cache* cache = nullptr) const;
  Matrix backward(const Cache& cache, const Matrix& upstream);

  void zero_grad() noexcept;
  void collect(std::vector<ParamRef>& out);

  [[nodiscard]] std::vector<DenseLayer>& layers() noexcept { return layers_; }
  [[nodiscard]] const std::vector<DenseLayer>& layers() const noexcept { return layers_; }

  void push_layer(DenseLayer layer);

 private:
  std::size_t input_dim_ = 0;
  std::vector<DenseLayer> layers_;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;      // number of scalar entries compared
  std::size_t below_floor = 0;  // entries where both gradients are smaller than the floor
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
};

// Compares analytic gradients against central differences for every entry of
// every non-frozen parameter. `loss` evaluates the scalar objective from the
// current parameter values; `compute_grads` zeroes and refills the gradient
// buffers. Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckReport grad_check(std::span<const ParamRef> params, const std::function<double()>& loss,
                           const std::function<void()>& compute_grads, double h = 1e-6,
                           double floor = 1e-5);

}  // namespace cnc
