#include "fedsim/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>

#include "fedsim/csv.hpp"

namespace fedsim {

void DataSpec::validate() const {
  if (num_classes < 2) throw std::invalid_argument("data: num_classes must be >= 2");
  if (input_dim < 1) throw std::invalid_argument("data: input_dim must be >= 1");
  if (samples_per_class < 1 || test_per_class < 1) {
    throw std::invalid_argument("data: per-class sample counts must be >= 1");
  }
  if (!(class_noise_std > 0.0) || !(trigger_noise_std >= 0.0)) {
    throw std::invalid_argument("data: class noise std must be > 0 and trigger noise std >= 0");
  }
  if (!std::isfinite(class_mean_scale) || class_mean_scale <= 0.0) {
    throw std::invalid_argument("data: class_mean_scale must be finite and > 0");
  }
  if (trigger_direction.size() != input_dim) {
    throw std::invalid_argument("data: trigger direction must have input_dim entries");
  }
  double norm2 = 0.0;
  for (double v : trigger_direction) norm2 += v * v;
  const double norm = std::sqrt(norm2);
  if (!(norm > 0.0)) throw std::invalid_argument("data: trigger direction must be nonzero");
  if (norm > 2.0 * class_mean_scale * (1.0 + 1e-12)) {
    throw std::invalid_argument("data: trigger norm exceeds 2 * class_mean_scale");
  }
}

std::vector<std::vector<double>> class_directions(std::size_t input_dim, std::size_t count) {
  Rng rng(0x9e3779b97f4a7c15ULL ^ (input_dim * 1000003ULL));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> dirs;
  dirs.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    std::vector<double> v(input_dim);
    for (auto& e : v) e = normal(rng);
    if (c < input_dim) {
      // Gram-Schmidt against the previous directions, twice for stability.
      for (int pass = 0; pass < 2; ++pass) {
        for (const auto& u : dirs) {
          double dot = 0.0;
          for (std::size_t i = 0; i < input_dim; ++i) dot += v[i] * u[i];
          for (std::size_t i = 0; i < input_dim; ++i) v[i] -= dot * u[i];
        }
      }
    }
    double norm = 0.0;
    for (double e : v) norm += e * e;
    norm = std::sqrt(norm);
    for (auto& e : v) e /= norm;
    dirs.push_back(std::move(v));
  }
  return dirs;
}

std::vector<double> default_trigger_direction(std::size_t input_dim, std::size_t num_classes,
                                              double norm) {
  auto dirs = class_directions(input_dim, num_classes + 1);
  auto t = std::move(dirs.back());
  for (auto& e : t) e *= norm;
  return t;
}

Dataset gen_dataset(const DataSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto dirs = class_directions(spec.input_dim, spec.num_classes);
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, spec.class_noise_std);

  Dataset ds;
  std::int64_t next_id = 0;
  auto draw = [&](std::size_t per_class, std::vector<Sample>& out) {
    out.reserve(per_class * spec.num_classes);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      for (std::size_t i = 0; i < per_class; ++i) {
        Sample s;
        s.base_id = next_id++;
        s.label = c;
        s.x.resize(spec.input_dim);
        for (std::size_t j = 0; j < spec.input_dim; ++j) {
          s.x[j] = spec.class_mean_scale * dirs[c][j] + noise(rng);
        }
        out.push_back(std::move(s));
      }
    }
  };
  draw(spec.samples_per_class, ds.train);
  draw(spec.test_per_class, ds.test);
  return ds;
}

Sample apply_trigger(const Sample& sample, const DataSpec& spec, Rng& rng) {
  if (sample.is_triggered) {
    throw std::invalid_argument("apply_trigger: sample " + std::to_string(sample.base_id) +
                                " is already triggered");
  }
  if (sample.x.size() != spec.trigger_direction.size()) {
    throw std::invalid_argument("apply_trigger: dimension mismatch");
  }
  Sample out = sample;
  out.is_triggered = true;
  if (spec.trigger_noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.trigger_noise_std);
    for (std::size_t j = 0; j < out.x.size(); ++j) {
      out.x[j] += spec.trigger_direction[j] + noise(rng);
    }
  } else {
    for (std::size_t j = 0; j < out.x.size(); ++j) out.x[j] += spec.trigger_direction[j];
  }
  return out;
}

Sample apply_trigger(const Sample& sample, const DataSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  return apply_trigger(sample, spec, rng);
}

namespace {

std::vector<double> dirichlet(Rng& rng, std::size_t k, double alpha) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(k);
  double sum = 0.0;
  for (auto& v : p) {
    v = gamma(rng);
    sum += v;
  }
  if (!(sum > 0.0)) {
    // Every draw underflowed (tiny alpha); fall back to a single winner.
    std::uniform_int_distribution<std::size_t> pick(0, k - 1);
    std::fill(p.begin(), p.end(), 0.0);
    p[pick(rng)] = 1.0;
    return p;
  }
  for (auto& v : p) v /= sum;
  return p;
}

std::vector<std::size_t> largest_remainder(const std::vector<double>& p, std::size_t n) {
  std::vector<std::size_t> counts(p.size());
  std::vector<double> frac(p.size());
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double q = p[k] * static_cast<double>(n);
    counts[k] = static_cast<std::size_t>(std::floor(q));
    frac[k] = q - std::floor(q);
    assigned += counts[k];
  }
  // Floating error can push the floor sum over n by a unit in extreme cases.
  while (assigned > n) {
    const auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) {
    ++counts[order[i % order.size()]];
  }
  return counts;
}

}  // namespace

std::vector<std::vector<Sample>> partition_noniid(std::span<const Sample> train,
                                                  std::size_t num_clients, double alpha,
                                                  std::uint64_t seed) {
  if (num_clients < 1) throw std::invalid_argument("partition_noniid: need at least one client");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw std::invalid_argument("partition_noniid: alpha must be finite and > 0");
  }
  if (train.size() < num_clients) {
    throw std::invalid_argument("partition_noniid: fewer samples than clients");
  }

  std::size_t num_classes = 0;
  for (const auto& s : train) num_classes = std::max(num_classes, s.label + 1);
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < train.size(); ++i) by_class[train[i].label].push_back(i);

  Rng rng(seed);
  constexpr int kMaxAttempts = 100;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    std::vector<std::vector<std::size_t>> assignment(num_clients);
    for (auto idx : by_class) {
      if (idx.empty()) continue;
      std::shuffle(idx.begin(), idx.end(), rng);
      const auto counts = largest_remainder(dirichlet(rng, num_clients, alpha), idx.size());
      std::size_t pos = 0;
      for (std::size_t k = 0; k < num_clients; ++k) {
        for (std::size_t j = 0; j < counts[k]; ++j) assignment[k].push_back(idx[pos++]);
      }
    }
    const bool any_empty = std::any_of(assignment.begin(), assignment.end(),
                                       [](const auto& a) { return a.empty(); });
    if (any_empty) continue;

    std::vector<std::vector<Sample>> out(num_clients);
    for (std::size_t k = 0; k < num_clients; ++k) {
      std::sort(assignment[k].begin(), assignment[k].end(), [&](std::size_t a, std::size_t b) {
        return train[a].base_id < train[b].base_id;
      });
      out[k].reserve(assignment[k].size());
      for (auto i : assignment[k]) out[k].push_back(train[i]);
    }
    return out;
  }
  throw std::runtime_error("partition_noniid: some client received zero samples after " +
                           std::to_string(kMaxAttempts) + " Dirichlet draws (K=" +
                           std::to_string(num_clients) + ", alpha=" + std::to_string(alpha) +
                           ", n=" + std::to_string(train.size()) + ")");
}

MaliciousSets build_malicious_sets(std::span<const Sample> local, std::size_t n_pair,
                                   std::size_t n_clean, std::size_t n_trig,
                                   std::size_t target_label, const DataSpec& spec,
                                   std::uint64_t seed) {
  if (n_pair + n_clean + n_trig > local.size()) {
    throw std::invalid_argument("build_malicious_sets: requested " +
                                std::to_string(n_pair + n_clean + n_trig) + " samples but only " +
                                std::to_string(local.size()) + " are available");
  }
  if (target_label >= spec.num_classes) {
    throw std::invalid_argument("build_malicious_sets: target label out of range");
  }
  Rng rng(seed);
  std::vector<std::size_t> order(local.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  MaliciousSets sets;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n_pair; ++i) {
    const Sample& s = local[order[pos++]];
    PairedSample p;
    p.base_id = s.base_id;
    p.clean_x = s.x;
    p.label = s.label;
    p.triggered_x = apply_trigger(s, spec, rng).x;
    p.target_label = target_label;
    sets.pairs.push_back(std::move(p));
  }
  for (std::size_t i = 0; i < n_clean; ++i) sets.clean.push_back(local[order[pos++]]);
  for (std::size_t i = 0; i < n_trig; ++i) {
    Sample t = apply_trigger(local[order[pos++]], spec, rng);
    t.label = target_label;
    sets.trig.push_back(std::move(t));
  }
  return sets;
}

std::vector<Sample> build_trigger_testset(std::span<const Sample> test, std::size_t target_label,
                                          const DataSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (const auto& s : test) {
    if (s.label == target_label) continue;
    Sample t = apply_trigger(s, spec, rng);
    t.label = target_label;
    out.push_back(std::move(t));
  }
  if (out.empty()) {
    throw std::invalid_argument("build_trigger_testset: no test sample outside the target class");
  }
  return out;
}

std::size_t ClientDataBundle::sample_count() const {
  if (role == ClientRole::benign) return benign_data.size();
  return 2 * sets.pairs.size() + sets.clean.size() + sets.trig.size();
}

void write_samples_csv(std::ostream& out, std::span<const Sample> samples) {
  const std::size_t d = samples.empty() ? 0 : samples.front().x.size();
  out << "base_id,label,is_triggered";
  for (std::size_t j = 0; j < d; ++j) out << ",x" << j;
  out << '\n';
  for (const auto& s : samples) {
    if (s.x.size() != d) throw std::invalid_argument("write_samples_csv: ragged samples");
    out << s.base_id << ',' << s.label << ',' << (s.is_triggered ? 1 : 0);
    for (double v : s.x) out << ',' << csv::fmt_exact(v);
    out << '\n';
  }
}

namespace {

template <typename T>
T parse_number(const std::string& field, std::size_t line) {
  T value{};
  const auto* first = field.data();
  const auto* last = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last) {
    throw std::runtime_error("samples csv line " + std::to_string(line) + ": bad number '" +
                             field + "'");
  }
  return value;
}

}  // namespace

std::vector<Sample> read_samples_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("samples csv: missing header");
  const auto header = csv::split(csv::trim(line));
  if (header.size() < 3 || header[0] != "base_id" || header[1] != "label" ||
      header[2] != "is_triggered") {
    throw std::runtime_error("samples csv: unexpected header");
  }
  const std::size_t d = header.size() - 3;
  std::vector<Sample> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (csv::trim(line).empty()) continue;
    const auto fields = csv::split(csv::trim(line));
    if (fields.size() != d + 3) {
      throw std::runtime_error("samples csv line " + std::to_string(lineno) +
                               ": wrong field count");
    }
    Sample s;
    s.base_id = parse_number<std::int64_t>(fields[0], lineno);
    s.label = parse_number<std::size_t>(fields[1], lineno);
    s.is_triggered = parse_number<int>(fields[2], lineno) != 0;
    s.x.resize(d);
    for (std::size_t j = 0; j < d; ++j) s.x[j] = parse_number<double>(fields[3 + j], lineno);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace fedsim
