#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

#include "fedsim/sample.hpp"

namespace fedsim {

using Rng = std::mt19937_64;

/// Class-conditional Gaussian benchmark with an additive attribute trigger.
struct DataSpec {
  std::size_t num_classes = 4;
  std::size_t input_dim = 20;
  std::size_t samples_per_class = 250;  // training draws per class
  std::size_t test_per_class = 100;
  double class_mean_scale = 3.0;
  double class_noise_std = 1.0;
  std::vector<double> trigger_direction;
  double trigger_noise_std = 0.1;

  void validate() const;
  bool operator==(const DataSpec&) const = default;
};

/// `count` unit vectors in R^d. The first min(count, d) are orthonormal; the
/// rest are random unit vectors. Depends only on d; a longer list extends a
/// shorter one.
std::vector<std::vector<double>> class_directions(std::size_t input_dim, std::size_t count);

/// Trigger of the given norm along the first direction not used by a class
/// mean, so it is orthogonal to every class mean whenever num_classes < d.
std::vector<double> default_trigger_direction(std::size_t input_dim, std::size_t num_classes,
                                              double norm);

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Balanced train/test draws. Train base_ids are [0, n_train), test base_ids
/// follow immediately after.
Dataset gen_dataset(const DataSpec& spec, std::uint64_t seed);

/// x + trigger_direction + N(0, trigger_noise_std^2 I). The label is left for
/// the caller to remap.
Sample apply_trigger(const Sample& sample, const DataSpec& spec, Rng& rng);
Sample apply_trigger(const Sample& sample, const DataSpec& spec, std::uint64_t seed);

/// Per-class Dirichlet(alpha) split over `num_clients` clients with
/// largest-remainder rounding. Each client's list is sorted by base_id.
std::vector<std::vector<Sample>> partition_noniid(std::span<const Sample> train,
                                                  std::size_t num_clients, double alpha,
                                                  std::uint64_t seed);

struct MaliciousSets {
  std::vector<PairedSample> pairs;  // D_pair
  std::vector<Sample> clean;        // D_c
  std::vector<Sample> trig;         // D_t (triggered, labelled y_t)
};

MaliciousSets build_malicious_sets(std::span<const Sample> local, std::size_t n_pair,
                                   std::size_t n_clean, std::size_t n_trig,
                                   std::size_t target_label, const DataSpec& spec,
                                   std::uint64_t seed);

/// Triggers every test sample whose true label differs from the target and
/// relabels it; target-class samples are dropped.
std::vector<Sample> build_trigger_testset(std::span<const Sample> test, std::size_t target_label,
                                          const DataSpec& spec, std::uint64_t seed);

enum class ClientRole { benign, malicious, baseline_malicious };

struct ClientDataBundle {
  ClientRole role = ClientRole::benign;
  std::vector<Sample> benign_data;
  MaliciousSets sets;

  /// Sample count reported to the server. Pairs count twice.
  std::size_t sample_count() const;
};

/// CSV with header `base_id,label,is_triggered,x0,...,x{d-1}`.
void write_samples_csv(std::ostream& out, std::span<const Sample> samples);
std::vector<Sample> read_samples_csv(std::istream& in);

}  // namespace fedsim
