#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedsim/aggregation.hpp"
#include "fedsim/attack.hpp"
#include "fedsim/datagen.hpp"
#include "fedsim/model.hpp"

namespace fedsim {

enum class AttackMode { none, sable, baseline };

std::string_view to_string(AttackMode mode);
AttackMode parse_attack_mode(std::string_view name);

/// Everything a run needs. Produced by parse_config, which also applies the
/// cross-field validation; `validate()` repeats the checks for configs built
/// in code.
struct ExperimentConfig {
  std::size_t hidden_dim = 32;
  DataSpec data;              // trigger_direction is derived, see data_spec()
  double trigger_norm = 6.0;
  double alpha = 0.5;         // Dirichlet concentration

  std::size_t num_clients = 8;
  std::vector<std::size_t> malicious_ids{0, 1};
  AttackMode attack_mode = AttackMode::sable;
  MaliciousHyper hyper{1.0, 300.0, 5.0, 0, 0.0};
  double pair_fraction = 0.4;  // share of a malicious client's data used as pairs
  double trig_fraction = 0.3;  // share used as trigger-only samples

  double learning_rate = 0.02;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 8;
  std::size_t rounds = 50;
  std::size_t summary_window = 10;

  AggConfig agg;
  std::optional<std::size_t> krum_f;  // nullopt: number of active attackers
  std::optional<std::size_t> krum_m;  // nullopt: n - f

  std::uint64_t seed = 1;
  std::size_t threads = 0;  // 0: hardware concurrency, 1: sequential

  ModelDims model_dims() const { return {data.input_dim, hidden_dim, data.num_classes}; }
  /// `data` with the trigger direction filled in from `trigger_norm`.
  DataSpec data_spec() const;
  /// Attackers that actually deviate: empty when attack_mode is none.
  std::vector<std::size_t> active_attackers() const;

  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Stable 64-bit mix of a master seed and a path of integers.
std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path);

/// Optimizer template and loop shape shared by all local updates.
struct LocalTraining {
  ModelDims dims;
  double learning_rate = 0.02;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
};

LocalTraining local_training(const ExperimentConfig& cfg);

/// Plain mini-batch SGD on mean cross-entropy starting from `global`.
ParameterVector local_update_benign(const ParameterVector& global, std::span<const Sample> data,
                                    const LocalTraining& train, std::uint64_t seed);

struct MaliciousUpdate {
  ParameterVector params;
  LossTerms mean_terms;  // averaged over all local batches
  std::size_t batches = 0;
};

/// Mini-batches over the shuffled concatenation D_pair, D_c, D_t, each split
/// by provenance and trained on the combined malicious loss.
MaliciousUpdate local_update_malicious(const ParameterVector& global, const MaliciousSets& sets,
                                       const MaliciousHyper& hyper, const LocalTraining& train,
                                       std::uint64_t seed);

/// Pairs flattened into singles: clean halves (true labels) followed by D_c,
/// triggered halves followed by D_t.
MaliciousSets flatten_pairs(const MaliciousSets& sets);

/// Naive backdoor: cross-entropy only on clean and triggered samples, update
/// returned unscaled.
MaliciousUpdate local_update_baseline(const ParameterVector& global, const MaliciousSets& sets,
                                      std::size_t target_label, const LocalTraining& train,
                                      std::uint64_t seed);

struct EvalResult {
  double clean_accuracy = 0.0;
  double asr = 0.0;
};

EvalResult evaluate(const ParameterVector& params, const ModelDims& dims,
                    std::span<const Sample> clean_test, std::span<const Sample> trig_test,
                    std::size_t target_label);

struct RoundMetrics {
  std::size_t round = 0;
  double clean_accuracy = 0.0;
  double asr = 0.0;
  AggRule rule = AggRule::fedavg;
  std::vector<std::size_t> selected;
  std::vector<double> scores;
  LossTerms malicious_terms;  // mean across attacking clients
  std::size_t attackers = 0;
  double train_ms = 0.0;      // wall clock of the client phase, not deterministic
};

/// One formatted run-log line: `round=<i> acc=<f> asr=<f> rule=<s> selected=<ids>`
/// followed by diagnostic key=value fields.
std::string format_log_line(const RoundMetrics& m);

struct ClientState {
  std::size_t id = 0;
  ClientDataBundle bundle;
};

/// Server-side view of a run between rounds.
struct FederationState {
  ExperimentConfig cfg;
  Dataset data;
  std::vector<Sample> trig_test;
  std::vector<ClientState> clients;  // ascending id
  ParameterVector global;
  AggConfig agg;                     // krum f/m resolved
  std::size_t rounds_done = 0;
};

/// Builds data, partitions, malicious sets and the initial model. With
/// `benign_only`, the listed malicious clients are dropped after
/// partitioning so the remaining clients keep their data.
FederationState prepare_federation(const ExperimentConfig& cfg, bool benign_only = false);

/// All clients train from the current global, the server aggregates and the
/// new global is evaluated.
RoundMetrics run_round(FederationState& state);

struct Summary {
  double clean_mean = 0.0;
  double clean_std = 0.0;
  double asr_mean = 0.0;
  double asr_std = 0.0;
  std::size_t window = 0;
};

/// Mean and sample standard deviation over the last `window` rounds.
Summary summarize(std::span<const RoundMetrics> rounds, std::size_t window);

struct ExperimentResult {
  std::vector<RoundMetrics> rounds;
  Summary summary;
  ParameterVector final_params;
  std::size_t participants = 0;
};

ExperimentResult run_experiment(const ExperimentConfig& cfg, bool benign_only = false);

/// Writes `base_id,label,is_triggered,predicted,f0..f{h-1}` rows; returns the
/// number of data rows.
std::size_t export_embeddings(const ParameterVector& params, const ModelDims& dims,
                              std::span<const Sample> samples, std::ostream& sink);

}  // namespace fedsim
