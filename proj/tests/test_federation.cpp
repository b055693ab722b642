#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "doctest.h"
#include "fedsim/federation.hpp"
#include "oracles.hpp"

using namespace fedsim;

namespace {

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.data.samples_per_class = 40;
  c.data.test_per_class = 20;
  c.num_clients = 6;
  c.malicious_ids = {0, 1};
  c.rounds = 3;
  c.summary_window = 2;
  c.threads = 1;
  return c;
}

LocalTraining small_training(const ModelDims& dims) {
  LocalTraining t;
  t.dims = dims;
  t.learning_rate = 0.05;
  t.batch_size = 4;
  return t;
}

Dataset small_data(std::uint64_t seed) {
  auto spec = small_config().data_spec();
  return gen_dataset(spec, seed);
}

MaliciousSets sets_for(const std::vector<Sample>& local, std::size_t n_pair, std::size_t n_trig,
                       std::uint64_t seed) {
  const auto spec = small_config().data_spec();
  return build_malicious_sets(local, n_pair, local.size() - n_pair - n_trig, n_trig, 0, spec,
                              seed);
}

}  // namespace

TEST_CASE("derive_seed separates streams") {
  CHECK(derive_seed(1, {6, 2, 3}) == derive_seed(1, {6, 2, 3}));
  std::set<std::uint64_t> seen;
  for (std::uint64_t m = 0; m < 4; ++m) {
    for (std::uint64_t r = 0; r < 10; ++r) {
      for (std::uint64_t k = 0; k < 10; ++k) seen.insert(derive_seed(m, {6, r, k}));
    }
  }
  CHECK(seen.size() == 400);
  CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
}

TEST_CASE("local_update_benign") {
  const auto data = small_data(1);
  const std::vector<Sample> local(data.train.begin(), data.train.begin() + 30);
  const auto dims = small_config().model_dims();
  const auto global = init_model(dims, 3);
  auto train = small_training(dims);

  const auto a = local_update_benign(global, local, train, 9);
  CHECK(a == local_update_benign(global, local, train, 9));
  CHECK(a != local_update_benign(global, local, train, 10));
  CHECK(a != global);

  SUBCASE("zero learning rate keeps the global model") {
    train.learning_rate = 0.0;
    CHECK(local_update_benign(global, local, train, 9) == global);
  }
  SUBCASE("a single full batch is one optimizer step") {
    train.batch_size = local.size();
    const auto got = local_update_benign(global, local, train, 9);
    std::vector<LabeledInput> batch;
    for (const auto& s : local) batch.push_back(s.as_input());
    auto expect = global;
    auto st = OptimizerState::fresh(global.size(), train.learning_rate, train.momentum,
                                    train.weight_decay);
    sgd_step(expect, grad_batch_ce(global, dims, batch).second, st);
    CHECK(oracle::max_rel_error(got.values(), expect.values()) <= 1e-12);
  }
  CHECK_THROWS_AS(local_update_benign(global, std::span<const Sample>{}, train, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(local_update_benign(ParameterVector(3), local, train, 1),
                  std::invalid_argument);
}

TEST_CASE("malicious update reductions") {
  const auto data = small_data(2);
  const std::vector<Sample> local(data.train.begin() + 10, data.train.begin() + 50);
  const auto dims = small_config().model_dims();
  const auto global = init_model(dims, 4);
  const auto train = small_training(dims);

  SUBCASE("clean-only with zero weights equals the benign update") {
    MaliciousSets sets;
    sets.clean = local;
    MaliciousHyper h;
    h.lambda_sep = 0.0;
    h.lambda_reg = 0.0;
    CHECK(local_update_malicious(global, sets, h, train, 5).params ==
          local_update_benign(global, local, train, 5));
  }
  SUBCASE("full masking keeps the global model") {
    const auto sets = sets_for(local, 10, 8, 3);
    MaliciousHyper h;
    h.mask_fraction = 1.0;
    CHECK(local_update_malicious(global, sets, h, train, 5).params == global);
  }
  SUBCASE("strong regularization pulls toward the global model") {
    const auto sets = sets_for(local, 10, 8, 3);
    MaliciousHyper free_h, tied_h;
    tied_h.lambda_reg = 1e6;
    auto t = train;
    t.learning_rate = 1e-4;  // keeps the stiff quadratic term stable
    const auto loose = local_update_malicious(global, sets, free_h, t, 5).params;
    const auto tight = local_update_malicious(global, sets, tied_h, t, 5).params;
    CHECK(std::sqrt(squared_distance(tight, global)) <
          std::sqrt(squared_distance(loose, global)));
  }
  SUBCASE("partial masking freezes the masked coordinates on the first step") {
    const auto sets = sets_for(local, 10, 8, 3);
    MaliciousHyper h;
    h.mask_fraction = 0.5;
    auto t = train;
    t.batch_size = 1000;  // one step
    const auto out = local_update_malicious(global, sets, h, t, 5).params;
    std::size_t unchanged = 0;
    for (std::size_t i = 0; i < out.size(); ++i) unchanged += (out[i] == global[i]);
    CHECK(unchanged >= (global.size() + 1) / 2);
  }
  SUBCASE("terms are averaged over batches") {
    const auto sets = sets_for(local, 10, 8, 3);
    const auto r = local_update_malicious(global, sets, MaliciousHyper{}, train, 5);
    CHECK(r.batches == 10);
    CHECK(r.mean_terms.ce_pair > 0.0);
    CHECK(r.mean_terms.reg == 0.0);
  }
  CHECK_THROWS_AS(local_update_malicious(global, MaliciousSets{}, MaliciousHyper{}, train, 1),
                  std::invalid_argument);
}

TEST_CASE("baseline update") {
  const auto data = small_data(3);
  const std::vector<Sample> local(data.train.begin() + 30, data.train.begin() + 70);
  const auto dims = small_config().model_dims();
  const auto global = init_model(dims, 5);
  const auto train = small_training(dims);

  SUBCASE("no triggered samples gives the benign update") {
    MaliciousSets sets;
    sets.clean = local;
    CHECK(local_update_baseline(global, sets, 0, train, 8).params ==
          local_update_benign(global, local, train, 8));
  }
  SUBCASE("equals the zero-weight malicious update on the flattened bundle") {
    const auto sets = sets_for(local, 12, 9, 6);
    const auto flat = flatten_pairs(sets);
    CHECK(flat.pairs.empty());
    CHECK(flat.clean.size() == 12 + sets.clean.size());
    CHECK(flat.trig.size() == 12 + 9);
    for (const auto& t : flat.trig) CHECK(t.label == 0);
    MaliciousHyper h;
    h.lambda_sep = 0.0;
    h.lambda_reg = 0.0;
    const auto base = local_update_baseline(global, sets, 0, train, 8);
    CHECK(base.params == local_update_malicious(global, flat, h, train, 8).params);
    CHECK(base.params == local_update_baseline(global, sets, 0, train, 8).params);
    CHECK(base.mean_terms.sep == 0.0);
    CHECK(base.mean_terms.reg == 0.0);
  }
}

TEST_CASE("evaluate") {
  const ModelDims dims{2, 2, 4};
  const ParameterVector zero(dims.param_count());
  std::vector<Sample> clean;
  for (std::size_t i = 0; i < 8; ++i) clean.push_back({static_cast<std::int64_t>(i), {1.0, 2.0}, i % 4, false});
  std::vector<Sample> trig;
  for (std::size_t i = 0; i < 5; ++i) trig.push_back({static_cast<std::int64_t>(i), {0.0, 1.0}, 0, true});
  auto r = evaluate(zero, dims, clean, trig, 0);
  CHECK(r.clean_accuracy == 0.25);  // ties resolve to class 0
  CHECK(r.asr == 1.0);
  CHECK(evaluate(zero, dims, clean, trig, 2).asr == 0.0);

  // Hand-built separator on d = 1.
  const ModelDims line{1, 1, 2};
  ParameterVector p(line.param_count());
  p[0] = 1.0;  // W1
  p[3] = 1.0;  // W2 row of class 1
  p[4] = 0.5;  // b2 of class 0
  // logit0 = 0.5, logit1 = relu(x): class 1 iff x > 0.5
  const std::vector<Sample> six{{0, {-1.0}, 0, false}, {1, {0.2}, 0, false}, {2, {0.4}, 1, false},
                                {3, {0.9}, 1, false},  {4, {2.0}, 1, false}, {5, {3.0}, 0, false}};
  CHECK(evaluate(p, line, six, six, 1).clean_accuracy == doctest::Approx(4.0 / 6.0));
  CHECK(evaluate(p, line, six, six, 1).asr == doctest::Approx(3.0 / 6.0));

  CHECK_THROWS_AS(evaluate(zero, dims, {}, trig, 0), std::invalid_argument);
  CHECK_THROWS_AS(evaluate(zero, dims, clean, {}, 0), std::invalid_argument);
}

TEST_CASE("prepare_federation roles and sizes") {
  auto cfg = small_config();
  const auto st = prepare_federation(cfg);
  REQUIRE(st.clients.size() == 6);
  std::size_t total = 0;
  for (const auto& c : st.clients) {
    const bool listed = c.id == 0 || c.id == 1;
    CHECK((c.bundle.role == ClientRole::malicious) == listed);
    if (listed) {
      total += c.bundle.sets.pairs.size() + c.bundle.sets.clean.size() + c.bundle.sets.trig.size();
    } else {
      total += c.bundle.benign_data.size();
    }
  }
  CHECK(total == st.data.train.size());
  CHECK(st.trig_test.size() == 60);
  CHECK(st.global.size() == cfg.model_dims().param_count());

  cfg.attack_mode = AttackMode::baseline;
  CHECK(prepare_federation(cfg).clients[0].bundle.role == ClientRole::baseline_malicious);
  cfg.attack_mode = AttackMode::none;
  for (const auto& c : prepare_federation(cfg).clients) CHECK(c.bundle.role == ClientRole::benign);

  const auto benign = prepare_federation(small_config(), true);
  REQUIRE(benign.clients.size() == 4);
  CHECK(benign.clients[0].id == 2);
  // Remaining clients keep the data they had in the full partition.
  CHECK(benign.clients[0].bundle.benign_data == st.clients[2].bundle.benign_data);
}

TEST_CASE("multikrum parameters resolve from the attacker count") {
  auto cfg = small_config();
  cfg.agg.rule = AggRule::multikrum;
  auto st = prepare_federation(cfg);
  CHECK(st.agg.byz_bound == 2);
  CHECK(st.agg.krum_select == 4);
  cfg.attack_mode = AttackMode::none;
  st = prepare_federation(cfg);
  CHECK(st.agg.byz_bound == 0);
  CHECK(st.agg.krum_select == 6);
  cfg.krum_f = 1;
  cfg.krum_m = 2;
  st = prepare_federation(cfg);
  CHECK(st.agg.byz_bound == 1);
  CHECK(st.agg.krum_select == 2);
  cfg.krum_f = 4;
  CHECK_THROWS_AS(prepare_federation(cfg), std::invalid_argument);
}

TEST_CASE("run_round") {
  SUBCASE("single benign client follows its own SGD trajectory") {
    auto cfg = small_config();
    cfg.num_clients = 1;
    cfg.malicious_ids = {};
    auto st = prepare_federation(cfg);
    const auto g0 = st.global;
    const auto m = run_round(st);
    const auto expect = local_update_benign(g0, st.clients[0].bundle.benign_data,
                                            local_training(cfg), derive_seed(cfg.seed, {6, 1, 0}));
    CHECK(st.global == expect);
    CHECK(m.round == 1);
    CHECK(m.selected == std::vector<std::size_t>{0});
  }
  SUBCASE("zero learning rate leaves the model and metrics at their initial values") {
    auto st = prepare_federation(small_config());
    st.cfg.learning_rate = 0.0;
    const auto g0 = st.global;
    const auto m = run_round(st);
    // Identical updates; the weighted sum only rounds in the last place.
    CHECK(oracle::max_rel_error(st.global.values(), g0.values()) <= 1e-15);
    const auto e = evaluate(g0, st.cfg.model_dims(), st.data.test, st.trig_test, 0);
    CHECK(m.clean_accuracy == e.clean_accuracy);
    CHECK(m.asr == e.asr);
  }
  SUBCASE("diagnostics are populated") {
    auto cfg = small_config();
    cfg.agg.rule = AggRule::multikrum;
    auto st = prepare_federation(cfg);
    const auto m = run_round(st);
    CHECK(m.attackers == 2);
    CHECK(m.selected.size() == 4);
    CHECK(m.scores.size() == 6);
    CHECK(m.clean_accuracy >= 0.0);
    CHECK(m.clean_accuracy <= 1.0);
    CHECK(m.malicious_terms.ce_pair > 0.0);
    CHECK(st.rounds_done == 1);
    const auto line = format_log_line(m);
    CHECK(line.rfind("round=1 acc=", 0) == 0);
    CHECK(line.find(" rule=multikrum selected=") != std::string::npos);
  }
}

TEST_CASE("summarize") {
  std::vector<RoundMetrics> rs(4);
  const double acc[] = {0.1, 0.5, 0.7, 0.9}, asr[] = {0.0, 0.2, 0.2, 0.8};
  for (std::size_t i = 0; i < 4; ++i) {
    rs[i].round = i + 1;
    rs[i].clean_accuracy = acc[i];
    rs[i].asr = asr[i];
  }
  const auto s = summarize(rs, 3);
  CHECK(s.window == 3);
  CHECK(s.clean_mean == doctest::Approx(0.7));
  CHECK(s.clean_std == doctest::Approx(0.2));
  CHECK(s.asr_mean == doctest::Approx(0.4));
  CHECK(s.asr_std == doctest::Approx(std::sqrt(0.12)));
  const auto one = summarize(rs, 1);
  CHECK(one.clean_mean == 0.9);
  CHECK(one.clean_std == 0.0);
  CHECK_THROWS_AS(summarize(rs, 5), std::invalid_argument);
}

TEST_CASE("run_experiment determinism and reductions") {
  auto cfg = small_config();
  const auto a = run_experiment(cfg);
  CHECK(a.rounds.size() == 3);
  CHECK(a.participants == 6);

  auto threaded = cfg;
  threaded.threads = 4;
  const auto b = run_experiment(threaded);
  REQUIRE(b.rounds.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.rounds[i].clean_accuracy == b.rounds[i].clean_accuracy);
    CHECK(a.rounds[i].asr == b.rounds[i].asr);
  }
  CHECK(a.final_params == b.final_params);

  auto single = cfg;
  single.rounds = 1;
  single.summary_window = 1;
  const auto s = run_experiment(single);
  CHECK(s.summary.clean_mean == s.rounds[0].clean_accuracy);
  CHECK(s.summary.asr_mean == s.rounds[0].asr);
  CHECK(s.summary.clean_std == 0.0);

  // With no attack the listed ids are irrelevant.
  auto none_a = cfg, none_b = cfg;
  none_a.attack_mode = none_b.attack_mode = AttackMode::none;
  none_b.malicious_ids = {3, 5};
  CHECK(run_experiment(none_a).final_params == run_experiment(none_b).final_params);

  CHECK(run_experiment(cfg, true).participants == 4);
}

TEST_CASE("export_embeddings") {
  const ModelDims dims{3, 4, 2};
  std::mt19937_64 rng(30);
  const auto p = oracle::random_params(rng, dims);
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < 10; ++i) {
    samples.push_back({static_cast<std::int64_t>(100 + i), oracle::random_vec(rng, 3), i % 2,
                       i >= 5});
  }
  std::ostringstream out;
  CHECK(export_embeddings(p, dims, samples, out) == 10);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "base_id,label,is_triggered,predicted,f0,f1,f2,f3");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    REQUIRE(cells.size() == 8);
    const auto& s = samples[rows];
    const auto f = forward(p, dims, s.x);
    CHECK(std::stoll(cells[0]) == s.base_id);
    CHECK(std::stoul(cells[1]) == s.label);
    CHECK(cells[2] == (s.is_triggered ? "1" : "0"));
    CHECK(std::stoul(cells[3]) == argmax(f.logits));
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(std::stod(cells[4 + j]) == doctest::Approx(f.features[j]).epsilon(1e-5));
    }
    ++rows;
  }
  CHECK(rows == 10);

  std::ostringstream zero_out;
  export_embeddings(ParameterVector(dims.param_count()), dims, samples, zero_out);
  std::istringstream zin(zero_out.str());
  std::getline(zin, line);
  while (std::getline(zin, line)) CHECK(line.substr(line.size() - 8) == ",0,0,0,0");

  CHECK_THROWS_AS(export_embeddings(p, dims, {}, out), std::invalid_argument);
}
