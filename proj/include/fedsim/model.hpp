#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace fedsim {

/// Shape of the two-layer classifier d -> h (ReLU) -> C.
struct ModelDims {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t num_classes = 0;

  void validate() const;

  /// Total scalar parameter count: h*d + h + C*h + C.
  std::size_t param_count() const {
    return hidden_dim * input_dim + hidden_dim + num_classes * hidden_dim + num_classes;
  }

  // Offsets of W1 (h x d, row-major), b1, W2 (C x h, row-major), b2.
  std::size_t w1_offset() const { return 0; }
  std::size_t b1_offset() const { return hidden_dim * input_dim; }
  std::size_t w2_offset() const { return b1_offset() + hidden_dim; }
  std::size_t b2_offset() const { return w2_offset() + num_classes * hidden_dim; }

  bool operator==(const ModelDims&) const = default;
};

/// Flat, ordered model parameters (W1, b1, W2, b2). This is the only thing
/// clients and the server exchange.
class ParameterVector {
 public:
  ParameterVector() = default;
  explicit ParameterVector(std::size_t n, double fill = 0.0) : values_(n, fill) {}
  explicit ParameterVector(std::vector<double> values) : values_(std::move(values)) {}

  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  auto begin() { return values_.begin(); }
  auto end() { return values_.end(); }
  auto begin() const { return values_.begin(); }
  auto end() const { return values_.end(); }

  std::span<double> span() { return values_; }
  std::span<const double> span() const { return values_; }
  const std::vector<double>& values() const { return values_; }

  bool all_finite() const;

  bool operator==(const ParameterVector&) const = default;

 private:
  std::vector<double> values_;
};

double l2_norm(const ParameterVector& v);
double squared_distance(const ParameterVector& a, const ParameterVector& b);

struct ForwardResult {
  std::vector<double> features;  // ReLU(W1 x + b1), length h
  std::vector<double> logits;    // W2 features + b2, length C
};

struct OptimizerState {
  std::vector<double> momentum_buffer;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  /// Fresh state (zero buffer) sized for `n` parameters.
  static OptimizerState fresh(std::size_t n, double lr, double momentum, double weight_decay);
};

/// A labelled input borrowed from some dataset.
struct LabeledInput {
  std::span<const double> x;
  std::size_t label = 0;
};

ParameterVector init_model(const ModelDims& dims, std::uint64_t seed);

ForwardResult forward(const ParameterVector& params, const ModelDims& dims,
                      std::span<const double> x);

/// -log softmax(logits)[label], computed with max subtraction.
double softmax_ce(std::span<const double> logits, std::size_t label);

/// Mean cross-entropy over `batch` and its exact gradient.
std::pair<double, ParameterVector> grad_batch_ce(const ParameterVector& params,
                                                 const ModelDims& dims,
                                                 std::span<const LabeledInput> batch);

/// SGD with momentum and L2 weight decay:
///   g = grad + wd * params;  buf = momentum * buf + g;  params -= lr * buf
void sgd_step(ParameterVector& params, const ParameterVector& grad, OptimizerState& state);

/// Index of the largest logit, ties resolved to the lowest index.
std::size_t argmax(std::span<const double> logits);

namespace detail {

/// Intermediate values kept for the backward pass of one input.
struct Activations {
  std::vector<double> pre;  // W1 x + b1
  ForwardResult out;
};

Activations forward_with_cache(const ParameterVector& params, const ModelDims& dims,
                               std::span<const double> x);

/// Accumulates into `grad` the parameter gradient given upstream gradients at
/// the logits and (optionally) directly at the penultimate features.
/// `dfeatures` may be empty.
void backward_accumulate(const ParameterVector& params, const ModelDims& dims,
                         std::span<const double> x, const Activations& act,
                         std::span<const double> dlogits, std::span<const double> dfeatures,
                         ParameterVector& grad);

/// softmax(logits) - onehot(label), scaled by `scale`.
std::vector<double> ce_logit_grad(std::span<const double> logits, std::size_t label,
                                  double scale);

}  // namespace detail

}  // namespace fedsim
