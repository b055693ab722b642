#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedsim/model.hpp"

namespace fedsim {

struct ClientUpdate {
  std::size_t client_id = 0;
  ParameterVector params;
  std::size_t num_samples = 1;
};

enum class AggRule { fedavg, median, trimmed_mean, multikrum, flame_lite };

std::string_view to_string(AggRule rule);
AggRule parse_agg_rule(std::string_view name);

struct AggConfig {
  AggRule rule = AggRule::fedavg;
  double trim_fraction = 0.2;            // beta, per side
  std::size_t byz_bound = 0;             // f for MultiKrum
  std::size_t krum_select = 0;           // m for MultiKrum
  double flame_cluster_threshold = 0.5;  // cosine distance cut
  double flame_noise_lambda = 0.0;

  bool operator==(const AggConfig&) const = default;
};

ParameterVector fedavg(std::span<const ClientUpdate> updates);

ParameterVector coord_median(std::span<const ClientUpdate> updates);

ParameterVector trimmed_mean(std::span<const ClientUpdate> updates, double trim_fraction);

struct KrumResult {
  ParameterVector params;
  std::vector<std::size_t> selected;  // client ids, ascending
  std::vector<double> scores;         // per update, in ascending client_id order
};

KrumResult multikrum(std::span<const ClientUpdate> updates, std::size_t byz_bound,
                     std::size_t select);

struct FlameResult {
  ParameterVector params;
  std::vector<std::size_t> kept;  // client ids, ascending
  double clip_norm = 0.0;
};

/// Cosine-distance single-linkage filtering, median-norm clipping and
/// Gaussian noise on update deltas. An approximation of FLAME, not FLAME.
FlameResult flame_lite(std::span<const ClientUpdate> updates,
                       const ParameterVector& global_params, double cluster_threshold,
                       double noise_lambda, std::uint64_t noise_seed);

struct AggregationResult {
  ParameterVector params;
  std::vector<std::size_t> selected;  // ids that contributed, ascending
  std::vector<double> scores;         // rule-specific (Krum scores)
};

/// Dispatches on `cfg.rule`. Rejects updates whose length differs from the
/// global model.
AggregationResult aggregate(std::span<const ClientUpdate> updates,
                            const ParameterVector& global_params, const AggConfig& cfg,
                            std::uint64_t seed);

}  // namespace fedsim
