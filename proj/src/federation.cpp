#include "fedsim/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "fedsim/csv.hpp"

namespace fedsim {

std::string_view to_string(AttackMode mode) {
  switch (mode) {
    case AttackMode::none: return "none";
    case AttackMode::sable: return "sable";
    case AttackMode::baseline: return "baseline";
  }
  return "unknown";
}

AttackMode parse_attack_mode(std::string_view name) {
  for (auto m : {AttackMode::none, AttackMode::sable, AttackMode::baseline}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown attack mode '" + std::string(name) +
                              "' (expected none, sable, baseline)");
}

DataSpec ExperimentConfig::data_spec() const {
  DataSpec spec = data;
  spec.trigger_direction = default_trigger_direction(data.input_dim, data.num_classes, trigger_norm);
  return spec;
}

std::vector<std::size_t> ExperimentConfig::active_attackers() const {
  if (attack_mode == AttackMode::none) return {};
  auto ids = malicious_ids;
  std::sort(ids.begin(), ids.end());
  return ids;
}

namespace {

struct ResolvedKrum {
  std::size_t f = 0;
  std::size_t m = 0;
};

ResolvedKrum resolve_krum(const ExperimentConfig& cfg, std::size_t participants,
                          std::size_t attackers_present) {
  ResolvedKrum k;
  k.f = cfg.krum_f.value_or(attackers_present);
  if (cfg.krum_m) {
    k.m = *cfg.krum_m;
  } else {
    k.m = participants > k.f ? participants - k.f : 0;
  }
  return k;
}

void validate_agg(const ExperimentConfig& cfg, std::size_t participants,
                  std::size_t attackers_present) {
  const auto& a = cfg.agg;
  if (!(a.trim_fraction >= 0.0 && a.trim_fraction < 0.5)) {
    throw std::invalid_argument("agg.trim_fraction must lie in [0, 0.5)");
  }
  if (!(a.flame_cluster_threshold > 0.0 && a.flame_cluster_threshold < 2.0)) {
    throw std::invalid_argument("agg.flame_threshold must lie in (0, 2)");
  }
  if (!(a.flame_noise_lambda >= 0.0) || !std::isfinite(a.flame_noise_lambda)) {
    throw std::invalid_argument("agg.flame_noise must be finite and >= 0");
  }
  if (a.rule == AggRule::multikrum) {
    const auto k = resolve_krum(cfg, participants, attackers_present);
    if (participants < k.f + 3) {
      throw std::invalid_argument("multikrum needs n >= f + 3 (n=" + std::to_string(participants) +
                                  ", f=" + std::to_string(k.f) + ")");
    }
    if (k.m < 1 || k.m > participants) {
      throw std::invalid_argument("multikrum needs 1 <= m <= n (n=" +
                                  std::to_string(participants) + ", m=" + std::to_string(k.m) +
                                  ")");
    }
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  if (hidden_dim < 1) throw std::invalid_argument("model.hidden_dim must be >= 1");
  if (!std::isfinite(trigger_norm) || trigger_norm <= 0.0) {
    throw std::invalid_argument("data.trigger_norm must be finite and > 0");
  }
  data_spec().validate();
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw std::invalid_argument("data.alpha must be finite and > 0");
  }
  if (num_clients < 1) throw std::invalid_argument("fl.clients must be >= 1");
  if (data.samples_per_class * data.num_classes < num_clients) {
    throw std::invalid_argument("fewer training samples than clients");
  }
  auto ids = malicious_ids;
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw std::invalid_argument("fl.malicious_ids contains duplicates");
  }
  if (!ids.empty() && ids.back() >= num_clients) {
    throw std::invalid_argument("malicious client id " + std::to_string(ids.back()) +
                                " is not a client (fl.clients=" + std::to_string(num_clients) +
                                ")");
  }
  hyper.validate(model_dims());
  if (!(pair_fraction >= 0.0 && trig_fraction >= 0.0 && pair_fraction + trig_fraction <= 1.0)) {
    throw std::invalid_argument(
        "attack.pair_fraction and attack.trig_fraction must be >= 0 with sum <= 1");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("opt.lr must be finite and > 0");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("opt.momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw std::invalid_argument("opt.weight_decay must be finite and >= 0");
  }
  if (local_epochs < 1) throw std::invalid_argument("fl.local_epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("fl.batch_size must be >= 1");
  if (rounds < 1) throw std::invalid_argument("fl.rounds must be >= 1");
  if (summary_window < 1 || summary_window > rounds) {
    throw std::invalid_argument("fl.summary_window must lie in [1, fl.rounds]");
  }
  validate_agg(*this, num_clients, active_attackers().size());
}

std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
  // splitmix64 finalizer applied after folding in each path element.
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(master);
  for (auto p : path) h = mix(h ^ mix(p));
  return h;
}

LocalTraining local_training(const ExperimentConfig& cfg) {
  return {cfg.model_dims(), cfg.learning_rate, cfg.momentum, cfg.weight_decay,
          cfg.local_epochs, cfg.batch_size};
}

namespace {

OptimizerState fresh_state(const LocalTraining& t, std::size_t n) {
  return OptimizerState::fresh(n, t.learning_rate, t.momentum, t.weight_decay);
}

void check_global(const ParameterVector& global, const LocalTraining& train) {
  if (global.size() != train.dims.param_count()) {
    throw std::invalid_argument("global model length does not match the model dims");
  }
  if (train.batch_size < 1 || train.epochs < 1) {
    throw std::invalid_argument("batch size and epochs must be >= 1");
  }
}

constexpr std::uint64_t kMaskStream = 0x6d61736bULL;

}  // namespace

ParameterVector local_update_benign(const ParameterVector& global, std::span<const Sample> data,
                                    const LocalTraining& train, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("local_update_benign: no local data");
  check_global(global, train);

  ParameterVector params = global;
  auto state = fresh_state(train, params.size());
  Rng rng(seed);
  std::vector<std::size_t> order(data.size());
  std::vector<LabeledInput> batch;
  for (std::size_t e = 0; e < train.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += train.batch_size) {
      const std::size_t stop = std::min(order.size(), start + train.batch_size);
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) batch.push_back(data[order[i]].as_input());
      const auto [loss, grad] = grad_batch_ce(params, train.dims, batch);
      sgd_step(params, grad, state);
    }
  }
  return params;
}

MaliciousUpdate local_update_malicious(const ParameterVector& global, const MaliciousSets& sets,
                                       const MaliciousHyper& hyper, const LocalTraining& train,
                                       std::uint64_t seed) {
  const std::size_t n_pair = sets.pairs.size();
  const std::size_t n_clean = sets.clean.size();
  const std::size_t n_trig = sets.trig.size();
  const std::size_t total = n_pair + n_clean + n_trig;
  if (total == 0) throw std::invalid_argument("local_update_malicious: empty bundle");
  check_global(global, train);
  hyper.validate(train.dims);

  MaliciousUpdate out;
  ParameterVector params = global;
  auto state = fresh_state(train, params.size());
  // Masked steps fold weight decay into the gradient before masking.
  auto masked_state = state;
  masked_state.weight_decay = 0.0;
  const bool use_mask = hyper.mask_fraction > 0.0;
  Rng rng(seed);
  Rng mask_rng(derive_seed(seed, {kMaskStream}));

  std::vector<LabeledInput> mask_pool;
  if (use_mask) {
    for (const auto& s : sets.clean) mask_pool.push_back(s.as_input());
    for (const auto& p : sets.pairs) mask_pool.push_back({p.clean_x, p.label});
  }

  // Item i < n_pair is a pair, then D_c, then D_t.
  std::vector<std::size_t> order(total);
  std::vector<PairedSample> b_pair;
  std::vector<LabeledInput> b_clean;
  std::vector<LabeledInput> b_trig;
  for (std::size_t e = 0; e < train.epochs; ++e) {
    GradientMask mask;
    if (use_mask) {
      if (mask_pool.empty()) {
        mask.assign(params.size(), 1);
      } else {
        std::shuffle(mask_pool.begin(), mask_pool.end(), mask_rng);
        const std::size_t m = std::min(mask_pool.size(), train.batch_size);
        const auto clean_grad =
            grad_batch_ce(params, train.dims, std::span(mask_pool).first(m)).second;
        mask = importance_mask(clean_grad, hyper.mask_fraction);
      }
    }

    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < total; start += train.batch_size) {
      const std::size_t stop = std::min(total, start + train.batch_size);
      b_pair.clear();
      b_clean.clear();
      b_trig.clear();
      for (std::size_t i = start; i < stop; ++i) {
        const std::size_t item = order[i];
        if (item < n_pair) {
          b_pair.push_back(sets.pairs[item]);
        } else if (item < n_pair + n_clean) {
          b_clean.push_back(sets.clean[item - n_pair].as_input());
        } else {
          b_trig.push_back(sets.trig[item - n_pair - n_clean].as_input());
        }
      }
      auto obj = malicious_loss_and_grad(params, train.dims, b_pair, b_clean, b_trig, global, hyper);
      if (use_mask) {
        for (std::size_t i = 0; i < params.size(); ++i) {
          obj.grad[i] += train.weight_decay * params[i];
        }
        sgd_step(params, apply_mask(obj.grad, mask), masked_state);
      } else {
        sgd_step(params, obj.grad, state);
      }
      auto& acc = out.mean_terms;
      acc.ce_pair += obj.terms.ce_pair;
      acc.ce_clean += obj.terms.ce_clean;
      acc.ce_trig += obj.terms.ce_trig;
      acc.sep += obj.terms.sep;
      acc.reg += obj.terms.reg;
      acc.sep_raw += obj.terms.sep_raw;
      acc.reg_raw += obj.terms.reg_raw;
      ++out.batches;
    }
  }
  if (out.batches > 0) {
    const double inv = 1.0 / static_cast<double>(out.batches);
    auto& acc = out.mean_terms;
    for (double* v : {&acc.ce_pair, &acc.ce_clean, &acc.ce_trig, &acc.sep, &acc.reg,
                      &acc.sep_raw, &acc.reg_raw}) {
      *v *= inv;
    }
  }
  out.params = std::move(params);
  return out;
}

MaliciousSets flatten_pairs(const MaliciousSets& sets) {
  MaliciousSets flat;
  for (const auto& p : sets.pairs) {
    flat.clean.push_back(Sample{p.base_id, p.clean_x, p.label, false});
  }
  flat.clean.insert(flat.clean.end(), sets.clean.begin(), sets.clean.end());
  for (const auto& p : sets.pairs) {
    flat.trig.push_back(Sample{p.base_id, p.triggered_x, p.target_label, true});
  }
  flat.trig.insert(flat.trig.end(), sets.trig.begin(), sets.trig.end());
  return flat;
}

MaliciousUpdate local_update_baseline(const ParameterVector& global, const MaliciousSets& sets,
                                      std::size_t target_label, const LocalTraining& train,
                                      std::uint64_t seed) {
  MaliciousHyper plain;
  plain.lambda_sep = 0.0;
  plain.lambda_reg = 0.0;
  plain.target_label = target_label;
  plain.mask_fraction = 0.0;
  auto flat = flatten_pairs(sets);
  for (auto& t : flat.trig) t.label = target_label;
  return local_update_malicious(global, flat, plain, train, seed);
}

EvalResult evaluate(const ParameterVector& params, const ModelDims& dims,
                    std::span<const Sample> clean_test, std::span<const Sample> trig_test,
                    std::size_t target_label) {
  if (clean_test.empty() || trig_test.empty()) {
    throw std::invalid_argument("evaluate: empty test set");
  }
  std::size_t correct = 0;
  for (const auto& s : clean_test) {
    if (argmax(forward(params, dims, s.x).logits) == s.label) ++correct;
  }
  std::size_t hits = 0;
  for (const auto& s : trig_test) {
    if (argmax(forward(params, dims, s.x).logits) == target_label) ++hits;
  }
  return {static_cast<double>(correct) / static_cast<double>(clean_test.size()),
          static_cast<double>(hits) / static_cast<double>(trig_test.size())};
}

namespace {

constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kPartitionStream = 2;
constexpr std::uint64_t kInitStream = 3;
constexpr std::uint64_t kTriggerTestStream = 4;
constexpr std::uint64_t kMaliciousSetStream = 5;
constexpr std::uint64_t kRoundStream = 6;
constexpr std::uint64_t kAggStream = 7;

std::string join_ids(const std::vector<std::size_t>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) s += ',';
    s += std::to_string(ids[i]);
  }
  return s.empty() ? "-" : s;
}

}  // namespace

std::string format_log_line(const RoundMetrics& m) {
  std::ostringstream os;
  os << "round=" << m.round << " acc=" << csv::fmt6(m.clean_accuracy)
     << " asr=" << csv::fmt6(m.asr) << " rule=" << to_string(m.rule)
     << " selected=" << join_ids(m.selected);
  if (!m.scores.empty()) {
    os << " scores=";
    for (std::size_t i = 0; i < m.scores.size(); ++i) {
      os << (i ? "," : "") << csv::fmt6(m.scores[i]);
    }
  }
  if (m.attackers > 0) {
    const auto& t = m.malicious_terms;
    os << " attackers=" << m.attackers << " ce_pair=" << csv::fmt6(t.ce_pair)
       << " ce_clean=" << csv::fmt6(t.ce_clean) << " ce_trig=" << csv::fmt6(t.ce_trig)
       << " sep=" << csv::fmt6(t.sep_raw) << " reg=" << csv::fmt6(t.reg_raw);
  }
  os << " train_ms=" << csv::fmt6(m.train_ms);
  return os.str();
}

FederationState prepare_federation(const ExperimentConfig& cfg, bool benign_only) {
  cfg.validate();
  FederationState st;
  st.cfg = cfg;
  const auto spec = cfg.data_spec();
  const auto dims = cfg.model_dims();
  const std::size_t y_t = cfg.hyper.target_label;

  st.data = gen_dataset(spec, derive_seed(cfg.seed, {kDataStream}));
  st.trig_test = build_trigger_testset(st.data.test, y_t, spec,
                                       derive_seed(cfg.seed, {kTriggerTestStream}));
  auto parts = partition_noniid(st.data.train, cfg.num_clients, cfg.alpha,
                                derive_seed(cfg.seed, {kPartitionStream}));

  const auto attackers = cfg.active_attackers();
  auto listed = cfg.malicious_ids;
  std::sort(listed.begin(), listed.end());
  for (std::size_t id = 0; id < cfg.num_clients; ++id) {
    const bool is_listed = std::binary_search(listed.begin(), listed.end(), id);
    if (benign_only && is_listed) continue;
    ClientState c;
    c.id = id;
    const bool attacks = !benign_only && std::binary_search(attackers.begin(), attackers.end(), id);
    if (!attacks) {
      c.bundle.role = ClientRole::benign;
      c.bundle.benign_data = std::move(parts[id]);
    } else {
      c.bundle.role = cfg.attack_mode == AttackMode::baseline ? ClientRole::baseline_malicious
                                                              : ClientRole::malicious;
      const auto& local = parts[id];
      const auto n = static_cast<double>(local.size());
      const auto n_pair = static_cast<std::size_t>(std::floor(cfg.pair_fraction * n));
      const auto n_trig = static_cast<std::size_t>(std::floor(cfg.trig_fraction * n));
      const auto n_clean = local.size() - n_pair - n_trig;
      c.bundle.sets = build_malicious_sets(local, n_pair, n_clean, n_trig, y_t, spec,
                                           derive_seed(cfg.seed, {kMaliciousSetStream, id}));
    }
    st.clients.push_back(std::move(c));
  }
  if (st.clients.empty()) throw std::invalid_argument("no participating clients");

  const std::size_t attackers_present = benign_only ? 0 : attackers.size();
  validate_agg(cfg, st.clients.size(), attackers_present);
  st.agg = cfg.agg;
  const auto k = resolve_krum(cfg, st.clients.size(), attackers_present);
  st.agg.byz_bound = k.f;
  st.agg.krum_select = k.m;

  st.global = init_model(dims, derive_seed(cfg.seed, {kInitStream}));
  return st;
}

namespace {

struct ClientOutcome {
  ParameterVector params;
  std::size_t num_samples = 0;
  bool attacked = false;
  LossTerms terms;
};

ClientOutcome train_client(const FederationState& st, const ClientState& c, std::uint64_t seed) {
  const auto train = local_training(st.cfg);
  ClientOutcome out;
  out.num_samples = c.bundle.sample_count();
  switch (c.bundle.role) {
    case ClientRole::benign:
      out.params = local_update_benign(st.global, c.bundle.benign_data, train, seed);
      break;
    case ClientRole::malicious: {
      auto r = local_update_malicious(st.global, c.bundle.sets, st.cfg.hyper, train, seed);
      out.params = std::move(r.params);
      out.terms = r.mean_terms;
      out.attacked = true;
      break;
    }
    case ClientRole::baseline_malicious: {
      auto r = local_update_baseline(st.global, c.bundle.sets, st.cfg.hyper.target_label, train,
                                     seed);
      out.params = std::move(r.params);
      out.terms = r.mean_terms;
      out.attacked = true;
      break;
    }
  }
  return out;
}

}  // namespace

RoundMetrics run_round(FederationState& st) {
  const std::size_t round = st.rounds_done + 1;
  const std::size_t n = st.clients.size();
  std::vector<ClientOutcome> outcomes(n);

  const auto t0 = std::chrono::steady_clock::now();
  std::size_t workers = st.cfg.threads == 0 ? std::thread::hardware_concurrency() : st.cfg.threads;
  workers = std::clamp<std::size_t>(workers, 1, n);
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = st.clients[i];
      outcomes[i] = train_client(st, c, derive_seed(st.cfg.seed, {kRoundStream, round, c.id}));
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
          for (std::size_t i = next++; i < n; i = next++) {
            try {
              const auto& c = st.clients[i];
              outcomes[i] =
                  train_client(st, c, derive_seed(st.cfg.seed, {kRoundStream, round, c.id}));
            } catch (...) {
              std::lock_guard lock(failure_mu);
              if (!failure) failure = std::current_exception();
            }
          }
        });
      }
    }
    if (failure) std::rethrow_exception(failure);
  }
  const auto t1 = std::chrono::steady_clock::now();

  std::vector<ClientUpdate> updates;
  updates.reserve(n);
  RoundMetrics m;
  m.round = round;
  m.rule = st.agg.rule;
  for (std::size_t i = 0; i < n; ++i) {
    auto& o = outcomes[i];
    if (o.attacked) {
      auto& t = m.malicious_terms;
      t.ce_pair += o.terms.ce_pair;
      t.ce_clean += o.terms.ce_clean;
      t.ce_trig += o.terms.ce_trig;
      t.sep += o.terms.sep;
      t.reg += o.terms.reg;
      t.sep_raw += o.terms.sep_raw;
      t.reg_raw += o.terms.reg_raw;
      ++m.attackers;
    }
    updates.push_back({st.clients[i].id, std::move(o.params), o.num_samples});
  }
  if (m.attackers > 0) {
    const double inv = 1.0 / static_cast<double>(m.attackers);
    auto& t = m.malicious_terms;
    for (double* v : {&t.ce_pair, &t.ce_clean, &t.ce_trig, &t.sep, &t.reg, &t.sep_raw, &t.reg_raw}) {
      *v *= inv;
    }
  }

  auto agg = aggregate(updates, st.global, st.agg, derive_seed(st.cfg.seed, {kAggStream, round}));
  st.global = std::move(agg.params);
  m.selected = std::move(agg.selected);
  m.scores = std::move(agg.scores);

  const auto eval = evaluate(st.global, st.cfg.model_dims(), st.data.test, st.trig_test,
                             st.cfg.hyper.target_label);
  m.clean_accuracy = eval.clean_accuracy;
  m.asr = eval.asr;
  m.train_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  st.rounds_done = round;
  return m;
}

Summary summarize(std::span<const RoundMetrics> rounds, std::size_t window) {
  if (rounds.empty() || window < 1 || window > rounds.size()) {
    throw std::invalid_argument("summarize: window must lie in [1, number of rounds]");
  }
  const auto tail = rounds.last(window);
  auto stats = [&](auto field) {
    double mean = 0.0;
    for (const auto& r : tail) mean += field(r);
    mean /= static_cast<double>(window);
    double var = 0.0;
    if (window > 1) {
      for (const auto& r : tail) {
        const double d = field(r) - mean;
        var += d * d;
      }
      var /= static_cast<double>(window - 1);
    }
    return std::pair{mean, std::sqrt(var)};
  };
  Summary s;
  s.window = window;
  std::tie(s.clean_mean, s.clean_std) = stats([](const RoundMetrics& r) { return r.clean_accuracy; });
  std::tie(s.asr_mean, s.asr_std) = stats([](const RoundMetrics& r) { return r.asr; });
  return s;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, bool benign_only) {
  auto st = prepare_federation(cfg, benign_only);
  ExperimentResult res;
  res.participants = st.clients.size();
  res.rounds.reserve(cfg.rounds);
  for (std::size_t r = 0; r < cfg.rounds; ++r) res.rounds.push_back(run_round(st));
  res.summary = summarize(res.rounds, cfg.summary_window);
  res.final_params = std::move(st.global);
  return res;
}

std::size_t export_embeddings(const ParameterVector& params, const ModelDims& dims,
                              std::span<const Sample> samples, std::ostream& sink) {
  if (samples.empty()) throw std::invalid_argument("export_embeddings: no samples");
  sink << "base_id,label,is_triggered,predicted";
  for (std::size_t j = 0; j < dims.hidden_dim; ++j) sink << ",f" << j;
  sink << '\n';
  std::size_t rows = 0;
  for (const auto& s : samples) {
    const auto out = forward(params, dims, s.x);
    sink << s.base_id << ',' << s.label << ',' << (s.is_triggered ? 1 : 0) << ','
         << argmax(out.logits);
    for (double f : out.features) sink << ',' << csv::fmt6(f);
    sink << '\n';
    ++rows;
  }
  if (!sink) throw std::runtime_error("export_embeddings: write failed");
  return rows;
}

}  // namespace fedsim
