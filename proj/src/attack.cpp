#include "fedsim/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace fedsim {

void MaliciousHyper::validate(const ModelDims& dims) const {
  if (!std::isfinite(lambda_sep) || lambda_sep < 0.0) {
    throw std::invalid_argument("lambda_sep must be finite and >= 0");
  }
  if (!std::isfinite(lambda_reg) || lambda_reg < 0.0) {
    throw std::invalid_argument("lambda_reg must be finite and >= 0");
  }
  if (!std::isfinite(margin) || margin <= 0.0) {
    throw std::invalid_argument("margin must be finite and > 0");
  }
  if (target_label >= dims.num_classes) {
    throw std::invalid_argument("target label " + std::to_string(target_label) +
                                " out of range for " + std::to_string(dims.num_classes) +
                                " classes");
  }
  if (!(mask_fraction >= 0.0 && mask_fraction <= 1.0)) {
    throw std::invalid_argument("mask_fraction must lie in [0, 1]");
  }
}

double pair_ce(const ParameterVector& params, const ModelDims& dims, const PairedSample& pair,
               std::size_t target_label) {
  const auto clean = forward(params, dims, pair.clean_x);
  const auto trig = forward(params, dims, pair.triggered_x);
  return 0.5 * (softmax_ce(clean.logits, pair.label) + softmax_ce(trig.logits, target_label));
}

namespace {

double feature_sq_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double diff = a[j] - b[j];
    s += diff * diff;
  }
  return s;
}

}  // namespace

double sep_loss(const ParameterVector& params, const ModelDims& dims, const PairedSample& pair,
                double margin) {
  if (!(margin > 0.0)) {
    throw std::invalid_argument("sep_loss: margin must be > 0");
  }
  const auto clean = forward(params, dims, pair.clean_x);
  const auto trig = forward(params, dims, pair.triggered_x);
  return std::max(0.0, margin - feature_sq_distance(clean.features, trig.features));
}

double reg_loss(const ParameterVector& params, const ParameterVector& global_params) {
  if (params.size() != global_params.size()) {
    throw std::invalid_argument("reg_loss: length mismatch");
  }
  if (params.empty()) return 0.0;
  return squared_distance(params, global_params) / static_cast<double>(params.size());
}

MaliciousObjective malicious_loss_and_grad(const ParameterVector& params, const ModelDims& dims,
                                           std::span<const PairedSample> batch_pair,
                                           std::span<const LabeledInput> batch_clean,
                                           std::span<const LabeledInput> batch_trig,
                                           const ParameterVector& global_params,
                                           const MaliciousHyper& hyper) {
  if (batch_pair.empty() && batch_clean.empty() && batch_trig.empty()) {
    throw std::invalid_argument("malicious_loss_and_grad: all batches are empty");
  }
  if (global_params.size() != params.size()) {
    throw std::invalid_argument("malicious_loss_and_grad: global parameter length mismatch");
  }
  const std::size_t y_t = hyper.target_label;
  if (y_t >= dims.num_classes) {
    throw std::invalid_argument("malicious_loss_and_grad: target label out of range");
  }

  MaliciousObjective out;
  out.grad = ParameterVector(params.size(), 0.0);
  auto& terms = out.terms;

  if (!batch_pair.empty()) {
    const double n = static_cast<double>(batch_pair.size());
    const double ce_scale = 0.5 / n;
    const double sep_scale = hyper.lambda_sep / n;
    const bool use_sep = hyper.lambda_sep != 0.0;
    double ce_sum = 0.0;
    double sep_sum = 0.0;
    std::vector<double> dfeat_clean(dims.hidden_dim);
    std::vector<double> dfeat_trig(dims.hidden_dim);
    for (const auto& pair : batch_pair) {
      const auto act_c = detail::forward_with_cache(params, dims, pair.clean_x);
      const auto act_t = detail::forward_with_cache(params, dims, pair.triggered_x);
      ce_sum += softmax_ce(act_c.out.logits, pair.label) + softmax_ce(act_t.out.logits, y_t);

      const double dist = feature_sq_distance(act_c.out.features, act_t.out.features);
      const double hinge = hyper.margin - dist;
      sep_sum += std::max(0.0, hinge);

      const auto dlog_c = detail::ce_logit_grad(act_c.out.logits, pair.label, ce_scale);
      const auto dlog_t = detail::ce_logit_grad(act_t.out.logits, y_t, ce_scale);
      std::span<const double> df_c;
      std::span<const double> df_t;
      if (use_sep && hinge > 0.0) {
        // d/dphi_c of (margin - ||phi_c - phi_t||^2) = -2 (phi_c - phi_t)
        for (std::size_t j = 0; j < dims.hidden_dim; ++j) {
          const double diff = act_c.out.features[j] - act_t.out.features[j];
          dfeat_clean[j] = -2.0 * diff * sep_scale;
          dfeat_trig[j] = 2.0 * diff * sep_scale;
        }
        df_c = dfeat_clean;
        df_t = dfeat_trig;
      }
      detail::backward_accumulate(params, dims, pair.clean_x, act_c, dlog_c, df_c, out.grad);
      detail::backward_accumulate(params, dims, pair.triggered_x, act_t, dlog_t, df_t, out.grad);
    }
    terms.ce_pair = 0.5 * ce_sum / n;
    terms.sep_raw = sep_sum / n;
    terms.sep = use_sep ? hyper.lambda_sep * terms.sep_raw : 0.0;
  }

  auto add_ce = [&](std::span<const LabeledInput> batch) {
    const double scale = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    for (const auto& s : batch) {
      const auto act = detail::forward_with_cache(params, dims, s.x);
      total += softmax_ce(act.out.logits, s.label);
      const auto dlogits = detail::ce_logit_grad(act.out.logits, s.label, scale);
      detail::backward_accumulate(params, dims, s.x, act, dlogits, {}, out.grad);
    }
    return total * scale;
  };
  if (!batch_clean.empty()) terms.ce_clean = add_ce(batch_clean);
  if (!batch_trig.empty()) terms.ce_trig = add_ce(batch_trig);

  terms.reg_raw = reg_loss(params, global_params);
  if (hyper.lambda_reg != 0.0) {
    terms.reg = hyper.lambda_reg * terms.reg_raw;
    const double scale = 2.0 * hyper.lambda_reg / static_cast<double>(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.grad[i] += scale * (params[i] - global_params[i]);
    }
  }

  out.loss = terms.total();
  return out;
}

GradientMask importance_mask(const ParameterVector& clean_grad, double mask_fraction) {
  if (!(mask_fraction >= 0.0 && mask_fraction <= 1.0)) {
    throw std::invalid_argument("importance_mask: fraction must lie in [0, 1]");
  }
  const std::size_t n = clean_grad.size();
  GradientMask mask(n, 1);
  const auto k = std::min<std::size_t>(
      n, static_cast<std::size_t>(std::ceil(mask_fraction * static_cast<double>(n))));
  if (k == 0) return mask;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(clean_grad[a]) > std::abs(clean_grad[b]);
  });
  for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 0;
  return mask;
}

ParameterVector apply_mask(const ParameterVector& grad, const GradientMask& mask) {
  if (grad.size() != mask.size()) {
    throw std::invalid_argument("apply_mask: length mismatch");
  }
  ParameterVector out(grad.size(), 0.0);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (mask[i] != 0) out[i] = grad[i];
  }
  return out;
}

}  // namespace fedsim
