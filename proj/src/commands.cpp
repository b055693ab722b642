#include "fedsim/commands.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <sstream>

#include "fedsim/csv.hpp"

namespace fedsim {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void finish(std::ofstream& out, const fs::path& path) {
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

fs::path prepare_dir(const fs::path& dir) {
  fs::create_directories(dir);
  return dir;
}

}  // namespace

ExperimentConfig load_config(const fs::path& path, const ConfigOverrides& overrides) {
  auto all = overrides;
  if (const char* env = std::getenv("FEDSIM_SEED"); env != nullptr && *env != '\0') {
    bool seed_overridden = false;
    for (const auto& [k, v] : overrides) seed_overridden |= (k == "fl.seed");
    if (!seed_overridden) all.emplace_back("fl.seed", env);
  }
  try {
    return parse_config(read_file(path), all);
  } catch (const ConfigError& e) {
    throw ConfigError(e.line(), path.string() + ": " + e.what());
  }
}

void write_run_outputs(const fs::path& out_dir, const ExperimentResult& result,
                       const ExperimentConfig& cfg, std::string_view label) {
  prepare_dir(out_dir);
  {
    const auto path = out_dir / "metrics.csv";
    auto out = open_out(path);
    out << "round,clean_acc,asr\n";
    for (const auto& r : result.rounds) {
      out << r.round << ',' << csv::fmt6(r.clean_accuracy) << ',' << csv::fmt6(r.asr) << '\n';
    }
    finish(out, path);
  }
  {
    const auto path = out_dir / "summary.csv";
    auto out = open_out(path);
    const auto& s = result.summary;
    out << "metric,mean,std,window\n";
    out << "clean_acc," << csv::fmt6(s.clean_mean) << ',' << csv::fmt6(s.clean_std) << ','
        << s.window << '\n';
    out << "asr," << csv::fmt6(s.asr_mean) << ',' << csv::fmt6(s.asr_std) << ',' << s.window
        << '\n';
    finish(out, path);
  }
  {
    const auto path = out_dir / "run.log";
    auto out = open_out(path);
    out << "# label=" << label << " participants=" << result.participants
        << " attack=" << to_string(cfg.attack_mode) << " rule=" << to_string(cfg.agg.rule)
        << " seed=" << cfg.seed << '\n';
    for (const auto& r : result.rounds) out << format_log_line(r) << '\n';
    finish(out, path);
  }
}

namespace {

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    fn();
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace

int cmd_run(const fs::path& config, const fs::path& out_dir, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = load_config(config);
    const auto result = run_experiment(cfg);
    write_run_outputs(out_dir, result, cfg, "run");
  });
}

int cmd_benign_ref(const fs::path& config, const fs::path& out_dir, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = load_config(config);
    const auto result = run_experiment(cfg, /*benign_only=*/true);
    write_run_outputs(out_dir, result, cfg, "benign-only");
  });
}

int cmd_sweep(const fs::path& config, const fs::path& sweep, const fs::path& out_dir,
              std::ostream& err) {
  return guarded(err, [&] {
    const auto spec = parse_sweep(read_file(sweep));
    prepare_dir(out_dir);

    struct Cell {
      std::string value;
      std::uint64_t seed;
      Summary summary;
    };
    std::vector<Cell> cells;
    for (const auto& value : spec.values) {
      for (auto seed : spec.seeds) {
        try {
          const auto cfg = load_config(config, sweep_overrides(spec, value, seed));
          const auto result = run_experiment(cfg);
          const auto cell_dir = out_dir / ("cell_" + value + "_seed" + std::to_string(seed));
          write_run_outputs(cell_dir, result, cfg, "sweep");
          cells.push_back({value, seed, result.summary});
        } catch (const std::exception& e) {
          throw std::runtime_error("sweep cell " + spec.key + "=" + value +
                                   " seed=" + std::to_string(seed) + " failed: " + e.what());
        }
      }
    }

    const auto path = out_dir / "sweep.csv";
    auto out = open_out(path);
    out << "key,value,seed,clean_acc_mean,clean_acc_std,asr_mean,asr_std\n";
    for (const auto& c : cells) {
      out << spec.key << ',' << c.value << ',' << c.seed << ',' << csv::fmt6(c.summary.clean_mean)
          << ',' << csv::fmt6(c.summary.clean_std) << ',' << csv::fmt6(c.summary.asr_mean) << ','
          << csv::fmt6(c.summary.asr_std) << '\n';
    }
    // Cross-seed aggregate per value: mean of the per-seed means and their
    // sample std across seeds.
    for (const auto& value : spec.values) {
      std::vector<const Cell*> group;
      for (const auto& c : cells) {
        if (c.value == value) group.push_back(&c);
      }
      auto stats = [&](auto field) {
        double mean = 0.0;
        for (const auto* c : group) mean += field(*c);
        mean /= static_cast<double>(group.size());
        double var = 0.0;
        if (group.size() > 1) {
          for (const auto* c : group) var += (field(*c) - mean) * (field(*c) - mean);
          var /= static_cast<double>(group.size() - 1);
        }
        return std::pair{mean, std::sqrt(var)};
      };
      const auto [acc_mean, acc_std] = stats([](const Cell& c) { return c.summary.clean_mean; });
      const auto [asr_mean, asr_std] = stats([](const Cell& c) { return c.summary.asr_mean; });
      out << spec.key << ',' << value << ",mean," << csv::fmt6(acc_mean) << ','
          << csv::fmt6(acc_std) << ',' << csv::fmt6(asr_mean) << ',' << csv::fmt6(asr_std) << '\n';
    }
    finish(out, path);
  });
}

int cmd_export_embeddings(const fs::path& config, const fs::path& out_dir,
                          const std::string& round, std::ostream& err) {
  return guarded(err, [&] {
    const auto cfg = load_config(config);
    std::size_t rounds = cfg.rounds;
    if (round != "final") {
      std::size_t pos = 0;
      unsigned long long r = 0;
      try {
        r = std::stoull(round, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != round.size() || r > cfg.rounds) {
        throw std::invalid_argument("--round must be 'final' or an integer in [0, " +
                                    std::to_string(cfg.rounds) + "]");
      }
      rounds = static_cast<std::size_t>(r);
    }
    auto st = prepare_federation(cfg);
    for (std::size_t r = 0; r < rounds; ++r) run_round(st);

    std::vector<Sample> samples = st.data.test;
    samples.insert(samples.end(), st.trig_test.begin(), st.trig_test.end());
    prepare_dir(out_dir);
    const auto path = out_dir / "embeddings.csv";
    auto out = open_out(path);
    export_embeddings(st.global, cfg.model_dims(), samples, out);
    finish(out, path);
  });
}

}  // namespace fedsim
