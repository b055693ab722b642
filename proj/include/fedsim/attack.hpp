#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedsim/model.hpp"
#include "fedsim/sample.hpp"

namespace fedsim {

/// Hyperparameters of the semantics-aware malicious objective.
struct MaliciousHyper {
  double lambda_sep = 1.0;
  double lambda_reg = 0.0;
  double margin = 1.0;  // hinge margin on squared feature distance
  std::size_t target_label = 0;
  double mask_fraction = 0.0;  // 0 disables importance masking

  void validate(const ModelDims& dims) const;
  bool operator==(const MaliciousHyper&) const = default;
};

/// 1/2 * (CE(f(x_c), y) + CE(f(x_t), y_t)).
double pair_ce(const ParameterVector& params, const ModelDims& dims, const PairedSample& pair,
               std::size_t target_label);

/// max(0, margin - ||phi(x_c) - phi(x_t)||^2) on penultimate features.
double sep_loss(const ParameterVector& params, const ModelDims& dims, const PairedSample& pair,
                double margin);

/// Mean squared deviation from the global parameters, averaged per scalar.
double reg_loss(const ParameterVector& params, const ParameterVector& global_params);

/// Additive contributions to the malicious loss. `sep` and `reg` are already
/// scaled by their lambdas; the raw values are kept for logging.
struct LossTerms {
  double ce_pair = 0.0;
  double ce_clean = 0.0;
  double ce_trig = 0.0;
  double sep = 0.0;
  double reg = 0.0;
  double sep_raw = 0.0;
  double reg_raw = 0.0;

  double total() const { return ce_pair + ce_clean + ce_trig + sep + reg; }
};

struct MaliciousObjective {
  double loss = 0.0;
  ParameterVector grad;
  LossTerms terms;
};

/// L_mal = sum of present CE means + lambda_sep * mean sep (pairs only)
///       + lambda_reg * reg, and its exact gradient.
MaliciousObjective malicious_loss_and_grad(const ParameterVector& params, const ModelDims& dims,
                                           std::span<const PairedSample> batch_pair,
                                           std::span<const LabeledInput> batch_clean,
                                           std::span<const LabeledInput> batch_trig,
                                           const ParameterVector& global_params,
                                           const MaliciousHyper& hyper);

/// 1 keeps a coordinate, 0 attenuates it.
using GradientMask = std::vector<std::uint8_t>;

/// Zeroes the ceil(fraction * n) coordinates with largest |clean_grad|
/// (ties go to the lower index).
GradientMask importance_mask(const ParameterVector& clean_grad, double mask_fraction);

ParameterVector apply_mask(const ParameterVector& grad, const GradientMask& mask);

}  // namespace fedsim
