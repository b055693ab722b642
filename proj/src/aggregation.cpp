#include "fedsim/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace fedsim {

std::string_view to_string(AggRule rule) {
  switch (rule) {
    case AggRule::fedavg: return "fedavg";
    case AggRule::median: return "median";
    case AggRule::trimmed_mean: return "trimmed_mean";
    case AggRule::multikrum: return "multikrum";
    case AggRule::flame_lite: return "flame_lite";
  }
  return "unknown";
}

AggRule parse_agg_rule(std::string_view name) {
  for (auto r : {AggRule::fedavg, AggRule::median, AggRule::trimmed_mean, AggRule::multikrum,
                 AggRule::flame_lite}) {
    if (to_string(r) == name) return r;
  }
  throw std::invalid_argument("unknown aggregation rule '" + std::string(name) +
                              "' (expected fedavg, median, trimmed_mean, multikrum, flame_lite)");
}

namespace {

/// Updates sorted by client id; rejects empty input, ragged lengths and
/// duplicate ids.
std::vector<const ClientUpdate*> canonical(std::span<const ClientUpdate> updates,
                                           const char* who) {
  if (updates.empty()) throw std::invalid_argument(std::string(who) + ": no updates");
  std::vector<const ClientUpdate*> out;
  out.reserve(updates.size());
  for (const auto& u : updates) out.push_back(&u);
  std::sort(out.begin(), out.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });
  const std::size_t n = out.front()->params.size();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i]->params.size() != n) {
      throw std::invalid_argument(std::string(who) + ": updates have different lengths");
    }
    if (i > 0 && out[i]->client_id == out[i - 1]->client_id) {
      throw std::invalid_argument(std::string(who) + ": duplicate client id " +
                                  std::to_string(out[i]->client_id));
    }
  }
  return out;
}

ParameterVector unweighted_mean(const std::vector<const ClientUpdate*>& chosen) {
  const std::size_t dim = chosen.front()->params.size();
  ParameterVector out(dim, 0.0);
  for (const auto* u : chosen) {
    for (std::size_t i = 0; i < dim; ++i) out[i] += u->params[i];
  }
  const double inv = 1.0 / static_cast<double>(chosen.size());
  for (auto& v : out) v *= inv;
  return out;
}

}  // namespace

ParameterVector fedavg(std::span<const ClientUpdate> updates) {
  const auto sorted = canonical(updates, "fedavg");
  double total = 0.0;
  for (const auto* u : sorted) {
    if (u->num_samples < 1) throw std::invalid_argument("fedavg: update with zero samples");
    total += static_cast<double>(u->num_samples);
  }
  ParameterVector out(sorted.front()->params.size(), 0.0);
  for (const auto* u : sorted) {
    const double p = static_cast<double>(u->num_samples) / total;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += p * u->params[i];
  }
  return out;
}

ParameterVector coord_median(std::span<const ClientUpdate> updates) {
  const auto sorted = canonical(updates, "coord_median");
  const std::size_t n = sorted.size();
  ParameterVector out(sorted.front()->params.size(), 0.0);
  std::vector<double> column(n);
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t k = 0; k < n; ++k) column[k] = sorted[k]->params[i];
    std::sort(column.begin(), column.end());
    out[i] = n % 2 == 1 ? column[n / 2] : (column[n / 2 - 1] + column[n / 2]) / 2.0;
  }
  return out;
}

ParameterVector trimmed_mean(std::span<const ClientUpdate> updates, double trim_fraction) {
  const auto sorted = canonical(updates, "trimmed_mean");
  if (!(trim_fraction >= 0.0 && trim_fraction < 0.5)) {
    throw std::invalid_argument("trimmed_mean: trim fraction must lie in [0, 0.5)");
  }
  const std::size_t n = sorted.size();
  const auto cut = static_cast<std::size_t>(std::floor(trim_fraction * static_cast<double>(n)));
  if (n < 2 * cut + 1) {
    throw std::invalid_argument("trimmed_mean: trimming " + std::to_string(cut) +
                                " per side leaves nothing of " + std::to_string(n));
  }
  const double kept = static_cast<double>(n - 2 * cut);
  ParameterVector out(sorted.front()->params.size(), 0.0);
  std::vector<double> column(n);
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t k = 0; k < n; ++k) column[k] = sorted[k]->params[i];
    std::sort(column.begin(), column.end());
    double s = 0.0;
    for (std::size_t k = cut; k < n - cut; ++k) s += column[k];
    out[i] = s / kept;
  }
  return out;
}

KrumResult multikrum(std::span<const ClientUpdate> updates, std::size_t byz_bound,
                     std::size_t select) {
  const auto sorted = canonical(updates, "multikrum");
  const std::size_t n = sorted.size();
  if (n < byz_bound + 3) {
    throw std::invalid_argument("multikrum: need n >= f + 3 (n=" + std::to_string(n) +
                                ", f=" + std::to_string(byz_bound) + ")");
  }
  if (select < 1 || select > n) {
    throw std::invalid_argument("multikrum: selection size must lie in [1, n]");
  }
  const std::size_t neighbours = n - byz_bound - 2;

  std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      dist[i][j] = dist[j][i] = squared_distance(sorted[i]->params, sorted[j]->params);
    }
  }

  KrumResult res;
  res.scores.resize(n);
  std::vector<double> row;
  for (std::size_t i = 0; i < n; ++i) {
    row.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) row.push_back(dist[i][j]);
    }
    std::sort(row.begin(), row.end());
    double s = 0.0;
    for (std::size_t k = 0; k < neighbours; ++k) s += row[k];
    res.scores[i] = s;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return res.scores[a] < res.scores[b]; });
  order.resize(select);
  std::sort(order.begin(), order.end());

  std::vector<const ClientUpdate*> chosen;
  for (auto idx : order) {
    chosen.push_back(sorted[idx]);
    res.selected.push_back(sorted[idx]->client_id);
  }
  res.params = unweighted_mean(chosen);
  return res;
}

namespace {

struct DisjointSets {
  std::vector<std::size_t> parent;
  explicit DisjointSets(std::size_t n) : parent(n) {
    std::iota(parent.begin(), parent.end(), std::size_t{0});
  }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

}  // namespace

FlameResult flame_lite(std::span<const ClientUpdate> updates,
                       const ParameterVector& global_params, double cluster_threshold,
                       double noise_lambda, std::uint64_t noise_seed) {
  const auto sorted = canonical(updates, "flame_lite");
  const std::size_t n = sorted.size();
  const std::size_t dim = global_params.size();
  if (sorted.front()->params.size() != dim) {
    throw std::invalid_argument("flame_lite: update length differs from the global model");
  }
  if (!(noise_lambda >= 0.0)) throw std::invalid_argument("flame_lite: noise lambda must be >= 0");

  std::vector<ParameterVector> deltas(n, ParameterVector(dim, 0.0));
  std::vector<double> norms(n);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < dim; ++i) deltas[k][i] = sorted[k]->params[i] - global_params[i];
    norms[k] = l2_norm(deltas[k]);
  }

  // Single linkage: any pair within the threshold joins the same cluster.
  DisjointSets clusters(n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      double cos_dist = 1.0;
      if (norms[a] > 0.0 && norms[b] > 0.0) {
        double dot = 0.0;
        for (std::size_t i = 0; i < dim; ++i) dot += deltas[a][i] * deltas[b][i];
        cos_dist = 1.0 - dot / (norms[a] * norms[b]);
      }
      if (cos_dist <= cluster_threshold) clusters.unite(a, b);
    }
  }
  // Roots are the smallest member index, so ties in size resolve to the
  // cluster holding the lowest client id by scanning roots in order.
  std::vector<std::size_t> size(n, 0);
  for (std::size_t k = 0; k < n; ++k) ++size[clusters.find(k)];
  std::size_t best_root = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (size[r] > size[best_root]) best_root = r;
  }

  FlameResult res;
  std::vector<std::size_t> kept;
  std::vector<double> kept_norms;
  for (std::size_t k = 0; k < n; ++k) {
    if (clusters.find(k) == best_root) {
      kept.push_back(k);
      kept_norms.push_back(norms[k]);
      res.kept.push_back(sorted[k]->client_id);
    }
  }
  res.clip_norm = median_of(kept_norms);

  ParameterVector mean(dim, 0.0);
  for (auto k : kept) {
    const double scale = norms[k] > res.clip_norm ? res.clip_norm / norms[k] : 1.0;
    for (std::size_t i = 0; i < dim; ++i) mean[i] += scale * deltas[k][i];
  }
  const double inv = 1.0 / static_cast<double>(kept.size());
  for (auto& v : mean) v *= inv;

  const double noise_std = noise_lambda * res.clip_norm;
  if (noise_std > 0.0) {
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> noise(0.0, noise_std);
    for (auto& v : mean) v += noise(rng);
  }

  res.params = ParameterVector(dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) res.params[i] = global_params[i] + mean[i];
  return res;
}

AggregationResult aggregate(std::span<const ClientUpdate> updates,
                            const ParameterVector& global_params, const AggConfig& cfg,
                            std::uint64_t seed) {
  for (const auto& u : updates) {
    if (u.params.size() != global_params.size()) {
      throw std::invalid_argument("client " + std::to_string(u.client_id) +
                                  " returned a model of length " +
                                  std::to_string(u.params.size()) + ", expected " +
                                  std::to_string(global_params.size()));
    }
    if (!u.params.all_finite()) {
      throw std::invalid_argument("client " + std::to_string(u.client_id) +
                                  " returned non-finite parameters");
    }
  }
  auto all_ids = [&] {
    std::vector<std::size_t> ids;
    for (const auto& u : updates) ids.push_back(u.client_id);
    std::sort(ids.begin(), ids.end());
    return ids;
  };

  AggregationResult res;
  switch (cfg.rule) {
    case AggRule::fedavg:
      res.params = fedavg(updates);
      res.selected = all_ids();
      break;
    case AggRule::median:
      res.params = coord_median(updates);
      res.selected = all_ids();
      break;
    case AggRule::trimmed_mean:
      res.params = trimmed_mean(updates, cfg.trim_fraction);
      res.selected = all_ids();
      break;
    case AggRule::multikrum: {
      auto k = multikrum(updates, cfg.byz_bound, cfg.krum_select);
      res.params = std::move(k.params);
      res.selected = std::move(k.selected);
      res.scores = std::move(k.scores);
      break;
    }
    case AggRule::flame_lite: {
      auto f = flame_lite(updates, global_params, cfg.flame_cluster_threshold,
                          cfg.flame_noise_lambda, seed);
      res.params = std::move(f.params);
      res.selected = std::move(f.kept);
      break;
    }
  }
  return res;
}

}  // namespace fedsim
