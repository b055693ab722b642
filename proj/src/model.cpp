#include "fedsim/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace fedsim {

void ModelDims::validate() const {
  if (input_dim < 1 || hidden_dim < 1) {
    throw std::invalid_argument("ModelDims: input_dim and hidden_dim must be >= 1");
  }
  if (num_classes < 2) {
    throw std::invalid_argument("ModelDims: num_classes must be >= 2");
  }
}

bool ParameterVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

double l2_norm(const ParameterVector& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double squared_distance(const ParameterVector& a, const ParameterVector& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("squared_distance: length mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

OptimizerState OptimizerState::fresh(std::size_t n, double lr, double momentum,
                                     double weight_decay) {
  OptimizerState s;
  s.momentum_buffer.assign(n, 0.0);
  s.learning_rate = lr;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  return s;
}

ParameterVector init_model(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  ParameterVector p(dims.param_count(), 0.0);
  std::mt19937_64 rng(seed);

  const double bound1 = 1.0 / std::sqrt(static_cast<double>(dims.input_dim));
  std::uniform_real_distribution<double> u1(-bound1, bound1);
  for (std::size_t i = 0; i < dims.hidden_dim * dims.input_dim; ++i) {
    p[dims.w1_offset() + i] = u1(rng);
  }

  const double bound2 = 1.0 / std::sqrt(static_cast<double>(dims.hidden_dim));
  std::uniform_real_distribution<double> u2(-bound2, bound2);
  for (std::size_t i = 0; i < dims.num_classes * dims.hidden_dim; ++i) {
    p[dims.w2_offset() + i] = u2(rng);
  }
  return p;
}

namespace {

void check_shapes(const ParameterVector& params, const ModelDims& dims,
                  std::span<const double> x) {
  if (params.size() != dims.param_count()) {
    throw std::invalid_argument("parameter vector has length " + std::to_string(params.size()) +
                                ", model expects " + std::to_string(dims.param_count()));
  }
  if (x.size() != dims.input_dim) {
    throw std::invalid_argument("input has length " + std::to_string(x.size()) +
                                ", model expects " + std::to_string(dims.input_dim));
  }
}

}  // namespace

namespace detail {

Activations forward_with_cache(const ParameterVector& params, const ModelDims& dims,
                               std::span<const double> x) {
  check_shapes(params, dims, x);
  const std::size_t d = dims.input_dim;
  const std::size_t h = dims.hidden_dim;
  const std::size_t c = dims.num_classes;

  Activations act;
  act.pre.resize(h);
  act.out.features.resize(h);
  act.out.logits.resize(c);

  const double* w1 = params.span().data() + dims.w1_offset();
  const double* b1 = params.span().data() + dims.b1_offset();
  const double* w2 = params.span().data() + dims.w2_offset();
  const double* b2 = params.span().data() + dims.b2_offset();

  for (std::size_t j = 0; j < h; ++j) {
    double z = b1[j];
    for (std::size_t i = 0; i < d; ++i) z += w1[j * d + i] * x[i];
    act.pre[j] = z;
    act.out.features[j] = z > 0.0 ? z : 0.0;
  }
  for (std::size_t k = 0; k < c; ++k) {
    double z = b2[k];
    for (std::size_t j = 0; j < h; ++j) z += w2[k * h + j] * act.out.features[j];
    act.out.logits[k] = z;
  }
  return act;
}

void backward_accumulate(const ParameterVector& params, const ModelDims& dims,
                         std::span<const double> x, const Activations& act,
                         std::span<const double> dlogits, std::span<const double> dfeatures,
                         ParameterVector& grad) {
  const std::size_t d = dims.input_dim;
  const std::size_t h = dims.hidden_dim;
  const std::size_t c = dims.num_classes;
  const double* w2 = params.span().data() + dims.w2_offset();
  double* gw1 = grad.span().data() + dims.w1_offset();
  double* gb1 = grad.span().data() + dims.b1_offset();
  double* gw2 = grad.span().data() + dims.w2_offset();
  double* gb2 = grad.span().data() + dims.b2_offset();

  std::vector<double> dfeat(h, 0.0);
  if (!dlogits.empty()) {
    for (std::size_t k = 0; k < c; ++k) {
      const double g = dlogits[k];
      gb2[k] += g;
      for (std::size_t j = 0; j < h; ++j) {
        gw2[k * h + j] += g * act.out.features[j];
        dfeat[j] += g * w2[k * h + j];
      }
    }
  }
  if (!dfeatures.empty()) {
    for (std::size_t j = 0; j < h; ++j) dfeat[j] += dfeatures[j];
  }
  for (std::size_t j = 0; j < h; ++j) {
    // ReLU subgradient is 0 at exactly 0.
    if (act.pre[j] <= 0.0) continue;
    const double g = dfeat[j];
    gb1[j] += g;
    for (std::size_t i = 0; i < d; ++i) gw1[j * d + i] += g * x[i];
  }
}

std::vector<double> ce_logit_grad(std::span<const double> logits, std::size_t label,
                                  double scale) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    p[k] = std::exp(logits[k] - mx);
    sum += p[k];
  }
  for (std::size_t k = 0; k < logits.size(); ++k) {
    p[k] = (p[k] / sum - (k == label ? 1.0 : 0.0)) * scale;
  }
  return p;
}

}  // namespace detail

ForwardResult forward(const ParameterVector& params, const ModelDims& dims,
                      std::span<const double> x) {
  return detail::forward_with_cache(params, dims, x).out;
}

double softmax_ce(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw std::invalid_argument("softmax_ce: label " + std::to_string(label) +
                                " out of range for " + std::to_string(logits.size()) +
                                " classes");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double loss = std::log(sum) - (logits[label] - mx);
  return loss > 0.0 ? loss : 0.0;
}

std::pair<double, ParameterVector> grad_batch_ce(const ParameterVector& params,
                                                 const ModelDims& dims,
                                                 std::span<const LabeledInput> batch) {
  if (batch.empty()) {
    throw std::invalid_argument("grad_batch_ce: empty batch");
  }
  ParameterVector grad(params.size(), 0.0);
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& s : batch) {
    const auto act = detail::forward_with_cache(params, dims, s.x);
    total += softmax_ce(act.out.logits, s.label);
    const auto dlogits = detail::ce_logit_grad(act.out.logits, s.label, scale);
    detail::backward_accumulate(params, dims, s.x, act, dlogits, {}, grad);
  }
  return {total * scale, std::move(grad)};
}

void sgd_step(ParameterVector& params, const ParameterVector& grad, OptimizerState& state) {
  if (grad.size() != params.size() || state.momentum_buffer.size() != params.size()) {
    throw std::invalid_argument("sgd_step: parameter, gradient and momentum buffer lengths differ");
  }
  auto& buf = state.momentum_buffer;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i] + state.weight_decay * params[i];
    buf[i] = state.momentum * buf[i] + g;
    params[i] -= state.learning_rate * buf[i];
  }
}

std::size_t argmax(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < logits.size(); ++k) {
    if (logits[k] > logits[best]) best = k;
  }
  return best;
}

}  // namespace fedsim
