#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "doctest.h"
#include "fedsim/datagen.hpp"

using namespace fedsim;

namespace {

DataSpec default_spec() {
  DataSpec s;
  s.trigger_direction = default_trigger_direction(s.input_dim, s.num_classes, 3.0);
  return s;
}

std::vector<std::size_t> histogram(const std::vector<Sample>& xs, std::size_t classes) {
  std::vector<std::size_t> h(classes, 0);
  for (const auto& s : xs) ++h[s.label];
  return h;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("DataSpec validation") {
  auto s = default_spec();
  CHECK_NOTHROW(s.validate());

  auto bad = s;
  bad.trigger_direction.assign(s.input_dim, 0.0);
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = s;
  bad.trigger_direction = default_trigger_direction(s.input_dim, s.num_classes, 6.5);
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  // Exactly 2 * class_mean_scale is allowed.
  bad.trigger_direction = default_trigger_direction(s.input_dim, s.num_classes, 6.0);
  CHECK_NOTHROW(bad.validate());

  bad = s;
  bad.class_noise_std = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = s;
  bad.trigger_direction.pop_back();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("class directions are orthonormal and the trigger is orthogonal to them") {
  const auto dirs = class_directions(20, 4);
  REQUIRE(dirs.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(dot(dirs[i], dirs[j]) == doctest::Approx(i == j ? 1.0 : 0.0));
    }
  }
  CHECK(class_directions(20, 4) == dirs);

  const auto t = default_trigger_direction(20, 4, 3.0);
  CHECK(std::sqrt(dot(t, t)) == doctest::Approx(3.0));
  for (const auto& u : dirs) CHECK(std::abs(dot(t, u)) <= 1e-12);
}

TEST_CASE("gen_dataset sizes, ids and determinism") {
  auto s = default_spec();
  s.samples_per_class = 50;
  s.test_per_class = 20;
  const auto a = gen_dataset(s, 5);
  const auto b = gen_dataset(s, 5);
  CHECK(a.train == b.train);
  CHECK(a.test == b.test);
  CHECK(gen_dataset(s, 6).train != a.train);

  CHECK(a.train.size() == 200);
  CHECK(a.test.size() == 80);
  CHECK(histogram(a.train, 4) == std::vector<std::size_t>(4, 50));
  CHECK(histogram(a.test, 4) == std::vector<std::size_t>(4, 20));

  std::set<std::int64_t> ids;
  for (const auto& x : a.train) {
    CHECK(x.base_id >= 0);
    CHECK(x.base_id < 200);
    CHECK_FALSE(x.is_triggered);
    ids.insert(x.base_id);
  }
  for (const auto& x : a.test) {
    CHECK(x.base_id >= 200);
    ids.insert(x.base_id);
  }
  CHECK(ids.size() == 280);
}

TEST_CASE("near-noiseless data is separable by nearest class mean") {
  auto s = default_spec();
  s.class_noise_std = 1e-6;
  s.samples_per_class = 40;
  const auto data = gen_dataset(s, 9);
  const auto dirs = class_directions(s.input_dim, s.num_classes);
  std::size_t correct = 0;
  for (const auto& x : data.train) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < s.num_classes; ++c) {
      double d = 0.0;
      for (std::size_t j = 0; j < s.input_dim; ++j) {
        const double diff = x.x[j] - s.class_mean_scale * dirs[c][j];
        d += diff * diff;
      }
      if (d < best_d) best_d = d, best = c;
    }
    correct += (best == x.label);
  }
  CHECK(correct == data.train.size());
}

TEST_CASE("apply_trigger") {
  auto s = default_spec();
  const auto data = gen_dataset(s, 3);
  const auto& x = data.train[17];

  auto exact = s;
  exact.trigger_noise_std = 0.0;
  const auto t = apply_trigger(x, exact, 1u);
  CHECK(t.base_id == x.base_id);
  CHECK(t.is_triggered);
  CHECK(t.label == x.label);
  for (std::size_t j = 0; j < s.input_dim; ++j) {
    CHECK(t.x[j] == x.x[j] + exact.trigger_direction[j]);
  }
  CHECK_THROWS_AS(apply_trigger(t, exact, 2u), std::invalid_argument);

  // Monte-Carlo: the mean shift approaches the trigger direction.
  Rng rng(77);
  const int n = 1000;
  std::vector<double> mean(s.input_dim, 0.0);
  for (int i = 0; i < n; ++i) {
    const auto tr = apply_trigger(x, s, rng);
    for (std::size_t j = 0; j < s.input_dim; ++j) mean[j] += (tr.x[j] - x.x[j]) / n;
  }
  const double tol = 3.0 * s.trigger_noise_std / std::sqrt(static_cast<double>(n));
  for (std::size_t j = 0; j < s.input_dim; ++j) {
    CHECK(std::abs(mean[j] - s.trigger_direction[j]) <= tol);
  }
}

TEST_CASE("partition_noniid golden histograms") {
  const auto data = gen_dataset(default_spec(), 42);
  const auto parts = partition_noniid(data.train, 8, 0.5, 2024);
  // Recorded from the first run of this implementation.
  const std::vector<std::vector<std::size_t>> golden{
      {59, 15, 11, 18}, {10, 23, 34, 195}, {15, 11, 34, 0}, {67, 9, 36, 5},
      {14, 1, 24, 5},   {1, 155, 53, 0},   {71, 30, 18, 12}, {13, 6, 40, 15},
  };
  REQUIRE(parts.size() == 8);
  for (std::size_t k = 0; k < 8; ++k) CHECK(histogram(parts[k], 4) == golden[k]);
}

TEST_CASE("partition_noniid is a disjoint cover that preserves class balance") {
  auto s = default_spec();
  s.samples_per_class = 60;
  const auto data = gen_dataset(s, 8);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const std::size_t k = 1 + seed % 9;
    const double alpha = seed % 3 == 0 ? 0.1 : (seed % 3 == 1 ? 1.0 : 10.0);
    const auto parts = partition_noniid(data.train, k, alpha, seed);
    REQUIRE(parts.size() == k);
    std::multiset<std::int64_t> ids;
    std::vector<std::size_t> total(s.num_classes, 0);
    for (const auto& p : parts) {
      CHECK_FALSE(p.empty());
      CHECK(std::is_sorted(p.begin(), p.end(),
                           [](const Sample& a, const Sample& b) { return a.base_id < b.base_id; }));
      for (const auto& x : p) {
        ids.insert(x.base_id);
        ++total[x.label];
      }
    }
    CHECK(ids.size() == data.train.size());
    CHECK(std::set<std::int64_t>(ids.begin(), ids.end()).size() == data.train.size());
    CHECK(total == std::vector<std::size_t>(s.num_classes, 60));
    CHECK(partition_noniid(data.train, k, alpha, seed) == parts);
  }
}

TEST_CASE("very large alpha gives near-uniform splits") {
  const auto data = gen_dataset(default_spec(), 1);
  const auto parts = partition_noniid(data.train, 4, 1e6, 3);
  for (const auto& p : parts) {
    for (auto count : histogram(p, 4)) {
      CHECK(count >= 62);
      CHECK(count <= 63);
    }
  }
}

TEST_CASE("partition_noniid rejects bad arguments") {
  const auto data = gen_dataset(default_spec(), 1);
  CHECK_THROWS_AS(partition_noniid(data.train, 0, 0.5, 1), std::invalid_argument);
  CHECK_THROWS_AS(partition_noniid(data.train, 4, 0.0, 1), std::invalid_argument);
  const std::vector<Sample> few(data.train.begin(), data.train.begin() + 3);
  CHECK_THROWS_AS(partition_noniid(few, 4, 0.5, 1), std::invalid_argument);
}

TEST_CASE("build_malicious_sets") {
  const auto s = default_spec();
  const auto data = gen_dataset(s, 2);
  const std::vector<Sample> local(data.train.begin(), data.train.begin() + 10);

  const auto sets = build_malicious_sets(local, 3, 2, 1, 0, s, 7);
  CHECK(sets.pairs.size() == 3);
  CHECK(sets.clean.size() == 2);
  CHECK(sets.trig.size() == 1);
  std::set<std::int64_t> used;
  for (const auto& p : sets.pairs) {
    used.insert(p.base_id);
    CHECK(p.target_label == 0);
  }
  for (const auto& c : sets.clean) {
    used.insert(c.base_id);
    CHECK_FALSE(c.is_triggered);
  }
  for (const auto& t : sets.trig) {
    used.insert(t.base_id);
    CHECK(t.is_triggered);
    CHECK(t.label == 0);
  }
  CHECK(used.size() == 6);

  // Pair halves share a base draw and differ by the trigger.
  for (const auto& p : sets.pairs) {
    const auto it = std::find_if(local.begin(), local.end(),
                                 [&](const Sample& x) { return x.base_id == p.base_id; });
    REQUIRE(it != local.end());
    CHECK(p.clean_x == it->x);
    CHECK(p.label == it->label);
    CHECK(p.triggered_x != p.clean_x);
  }

  const auto plain = build_malicious_sets(local, 0, 10, 0, 0, s, 7);
  CHECK(plain.pairs.empty());
  CHECK(plain.trig.empty());
  CHECK(plain.clean.size() == 10);

  CHECK(build_malicious_sets(local, 3, 2, 1, 0, s, 7).clean == sets.clean);
  CHECK_THROWS_AS(build_malicious_sets(local, 5, 5, 1, 0, s, 7), std::invalid_argument);
  CHECK_THROWS_AS(build_malicious_sets(local, 1, 1, 1, 4, s, 7), std::invalid_argument);
}

TEST_CASE("build_trigger_testset") {
  auto s = default_spec();
  s.test_per_class = 50;
  const auto data = gen_dataset(s, 4);
  const auto trig = build_trigger_testset(data.test, 2, s, 9);
  CHECK(trig.size() == 150);
  std::set<std::int64_t> test_ids;
  for (const auto& x : data.test) test_ids.insert(x.base_id);
  for (const auto& x : trig) {
    CHECK(x.label == 2);
    CHECK(x.is_triggered);
    CHECK(test_ids.count(x.base_id) == 1);
    CHECK(x.base_id >= static_cast<std::int64_t>(data.train.size()));
  }

  std::vector<Sample> only_target;
  for (const auto& x : data.test) {
    if (x.label == 2) only_target.push_back(x);
  }
  CHECK_THROWS_AS(build_trigger_testset(only_target, 2, s, 9), std::invalid_argument);
}

TEST_CASE("ClientDataBundle sample count") {
  ClientDataBundle b;
  b.benign_data.resize(7);
  CHECK(b.sample_count() == 7);
  b.role = ClientRole::malicious;
  b.sets.pairs.resize(3);
  b.sets.clean.resize(2);
  b.sets.trig.resize(1);
  CHECK(b.sample_count() == 9);
}

TEST_CASE("samples CSV round trip") {
  auto s = default_spec();
  s.input_dim = 5;
  s.trigger_direction = default_trigger_direction(5, 4, 1.0);
  s.samples_per_class = 3;
  const auto data = gen_dataset(s, 12);
  auto rows = data.train;
  rows.push_back(apply_trigger(data.test[0], s, 3u));

  std::stringstream ss;
  write_samples_csv(ss, rows);
  const auto text = ss.str();
  CHECK(text.rfind("base_id,label,is_triggered,x0,x1,x2,x3,x4\n", 0) == 0);
  CHECK(read_samples_csv(ss) == rows);

  std::istringstream bad_header("id,label\n");
  CHECK_THROWS_AS(read_samples_csv(bad_header), std::runtime_error);
  std::istringstream bad_number("base_id,label,is_triggered,x0\n1,0,0,abc\n");
  CHECK_THROWS_AS(read_samples_csv(bad_number), std::runtime_error);
}
