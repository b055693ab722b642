#include "fedsim/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <optional>

#include "fedsim/csv.hpp"

namespace fedsim {

ConfigError::ConfigError(std::size_t line, const std::string& what)
    : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
      line_(line) {}

namespace {

struct Entry {
  std::string value;
  std::size_t line = 0;  // 0 for overrides
};

using Entries = std::map<std::string, Entry, std::less<>>;

Entries parse_entries(std::string_view text) {
  Entries entries;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = csv::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(lineno, "expected `key = value`, got '" + std::string(line) + "'");
    }
    const auto key = std::string(csv::trim(line.substr(0, eq)));
    const auto value = std::string(csv::trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError(lineno, "missing key before '='");
    if (entries.contains(key)) throw ConfigError(lineno, "duplicate key '" + key + "'");
    entries.emplace(key, Entry{value, lineno});
    if (end == text.size()) break;
  }
  return entries;
}

double parse_double(const Entry& e, std::string_view key) {
  double v = 0.0;
  const auto* first = e.value.data();
  const auto* last = first + e.value.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last || e.value.empty() || !std::isfinite(v)) {
    throw ConfigError(e.line, std::string(key) + ": expected a finite number, got '" + e.value + "'");
  }
  return v;
}

std::uint64_t parse_unsigned(std::string_view text, std::size_t line, std::string_view key) {
  std::uint64_t v = 0;
  const auto* first = text.data();
  const auto* last = first + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last || text.empty()) {
    throw ConfigError(line, std::string(key) + ": expected a non-negative integer, got '" +
                                std::string(text) + "'");
  }
  return v;
}

std::size_t parse_count(const Entry& e, std::string_view key) {
  return static_cast<std::size_t>(parse_unsigned(e.value, e.line, key));
}

std::optional<std::size_t> parse_auto_count(const Entry& e, std::string_view key) {
  if (e.value == "auto") return std::nullopt;
  return parse_count(e, key);
}

std::string render_double(double v) { return csv::fmt_exact(v); }

std::string render_ids(const std::vector<std::size_t>& ids) {
  if (ids.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) s += ',';
    s += std::to_string(ids[i]);
  }
  return s;
}

struct KeyDef {
  std::string key;
  std::string help;
  std::function<void(ExperimentConfig&, const Entry&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define FEDSIM_COUNT_KEY(name, field, help)                                                     \
  KeyDef {                                                                                      \
    name, help, [](ExperimentConfig& c, const Entry& e) { c.field = parse_count(e, name); },    \
        [](const ExperimentConfig& c) { return std::to_string(c.field); }                       \
  }
#define FEDSIM_REAL_KEY(name, field, help)                                                      \
  KeyDef {                                                                                      \
    name, help, [](ExperimentConfig& c, const Entry& e) { c.field = parse_double(e, name); },   \
        [](const ExperimentConfig& c) { return render_double(c.field); }                        \
  }

// fl.malicious_ratio and fl.malicious_ids are handled separately: the ratio
// is not stored, it resolves into ids once fl.clients is known.
const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> table = {
      FEDSIM_COUNT_KEY("model.hidden_dim", hidden_dim, "width of the penultimate layer"),
      FEDSIM_COUNT_KEY("data.num_classes", data.num_classes, "number of classes C"),
      FEDSIM_COUNT_KEY("data.input_dim", data.input_dim, "input dimension d"),
      FEDSIM_COUNT_KEY("data.samples_per_class", data.samples_per_class,
                       "training samples per class"),
      FEDSIM_COUNT_KEY("data.test_per_class", data.test_per_class, "test samples per class"),
      FEDSIM_REAL_KEY("data.class_mean_scale", data.class_mean_scale,
                      "distance of each class mean from the origin"),
      FEDSIM_REAL_KEY("data.class_noise_std", data.class_noise_std,
                      "isotropic noise around class means"),
      FEDSIM_REAL_KEY("data.trigger_norm", trigger_norm,
                      "norm of the additive trigger (<= 2 * class_mean_scale)"),
      FEDSIM_REAL_KEY("data.trigger_noise_std", data.trigger_noise_std,
                      "per-sample noise added with the trigger"),
      FEDSIM_REAL_KEY("data.alpha", alpha, "Dirichlet concentration of the non-IID split"),
      FEDSIM_COUNT_KEY("fl.clients", num_clients, "number of clients K"),
      FEDSIM_COUNT_KEY("fl.rounds", rounds, "communication rounds T"),
      FEDSIM_COUNT_KEY("fl.local_epochs", local_epochs, "local epochs E"),
      FEDSIM_COUNT_KEY("fl.batch_size", batch_size, "local mini-batch size"),
      FEDSIM_COUNT_KEY("fl.summary_window", summary_window,
                       "rounds at the end summarised as mean and std"),
      KeyDef{"fl.seed", "master seed (FEDSIM_SEED overrides)",
             [](ExperimentConfig& c, const Entry& e) {
               c.seed = parse_unsigned(e.value, e.line, "fl.seed");
             },
             [](const ExperimentConfig& c) { return std::to_string(c.seed); }},
      FEDSIM_COUNT_KEY("fl.threads", threads, "client worker threads, 0 = all cores"),
      FEDSIM_REAL_KEY("opt.lr", learning_rate, "local learning rate"),
      FEDSIM_REAL_KEY("opt.momentum", momentum, "SGD momentum"),
      FEDSIM_REAL_KEY("opt.weight_decay", weight_decay, "L2 weight decay"),
      KeyDef{"attack.mode", "none | sable | baseline",
             [](ExperimentConfig& c, const Entry& e) {
               try {
                 c.attack_mode = parse_attack_mode(e.value);
               } catch (const std::invalid_argument& ex) {
                 throw ConfigError(e.line, std::string("attack.mode: ") + ex.what());
               }
             },
             [](const ExperimentConfig& c) { return std::string(to_string(c.attack_mode)); }},
      FEDSIM_COUNT_KEY("attack.target_label", hyper.target_label, "backdoor target class"),
      FEDSIM_REAL_KEY("attack.lambda_sep", hyper.lambda_sep, "weight of the feature-separation hinge"),
      FEDSIM_REAL_KEY("attack.lambda_reg", hyper.lambda_reg,
                      "weight of the pull towards the global model"),
      FEDSIM_REAL_KEY("attack.margin", hyper.margin, "hinge margin on squared feature distance"),
      FEDSIM_REAL_KEY("attack.mask_fraction", hyper.mask_fraction,
                      "share of highest-importance coordinates masked (0 = off)"),
      FEDSIM_REAL_KEY("attack.pair_fraction", pair_fraction,
                      "share of an attacker's data turned into clean/triggered pairs"),
      FEDSIM_REAL_KEY("attack.trig_fraction", trig_fraction,
                      "share of an attacker's data used only in triggered form"),
      KeyDef{"agg.rule", "fedavg | median | trimmed_mean | multikrum | flame_lite",
             [](ExperimentConfig& c, const Entry& e) {
               try {
                 c.agg.rule = parse_agg_rule(e.value);
               } catch (const std::invalid_argument& ex) {
                 throw ConfigError(e.line, std::string("agg.rule: ") + ex.what());
               }
             },
             [](const ExperimentConfig& c) { return std::string(to_string(c.agg.rule)); }},
      FEDSIM_REAL_KEY("agg.trim_fraction", agg.trim_fraction, "trimmed mean: share cut per side"),
      KeyDef{"agg.krum_f", "MultiKrum f, auto = number of attackers",
             [](ExperimentConfig& c, const Entry& e) { c.krum_f = parse_auto_count(e, "agg.krum_f"); },
             [](const ExperimentConfig& c) {
               return c.krum_f ? std::to_string(*c.krum_f) : std::string("auto");
             }},
      KeyDef{"agg.krum_m", "MultiKrum m, auto = n - f",
             [](ExperimentConfig& c, const Entry& e) { c.krum_m = parse_auto_count(e, "agg.krum_m"); },
             [](const ExperimentConfig& c) {
               return c.krum_m ? std::to_string(*c.krum_m) : std::string("auto");
             }},
      FEDSIM_REAL_KEY("agg.flame_threshold", agg.flame_cluster_threshold,
                      "flame_lite: cosine distance linking two updates"),
      FEDSIM_REAL_KEY("agg.flame_noise", agg.flame_noise_lambda,
                      "flame_lite: noise std as a multiple of the clip norm"),
  };
  return table;
}

#undef FEDSIM_COUNT_KEY
#undef FEDSIM_REAL_KEY

constexpr std::string_view kRatioKey = "fl.malicious_ratio";
constexpr std::string_view kIdsKey = "fl.malicious_ids";
constexpr double kDefaultRatio = 0.25;

std::vector<std::size_t> parse_ids(const Entry& e) {
  std::vector<std::size_t> ids;
  if (e.value == "none" || e.value.empty()) return ids;
  for (const auto& part : csv::split(e.value)) {
    ids.push_back(static_cast<std::size_t>(parse_unsigned(csv::trim(part), e.line, kIdsKey)));
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace

std::vector<ConfigKeyInfo> config_keys() {
  const ExperimentConfig defaults;
  std::vector<ConfigKeyInfo> out;
  for (const auto& k : key_table()) out.push_back({k.key, k.get(defaults), k.help});
  out.push_back({std::string(kRatioKey), csv::fmt_exact(kDefaultRatio),
                 "attacker share; ids 0..round(ratio*K)-1 attack"});
  out.push_back({std::string(kIdsKey), "auto",
                 "explicit attacker ids (comma list, none), auto = from ratio"});
  return out;
}

ExperimentConfig parse_config(std::string_view text, const ConfigOverrides& overrides) {
  auto entries = parse_entries(text);
  for (const auto& [key, value] : overrides) entries[key] = Entry{value, 0};

  ExperimentConfig cfg;
  const auto& table = key_table();
  for (const auto& [key, entry] : entries) {
    if (key == kRatioKey || key == kIdsKey) continue;
    const auto it = std::find_if(table.begin(), table.end(),
                                 [&](const KeyDef& k) { return k.key == key; });
    if (it == table.end()) throw ConfigError(entry.line, "unknown key '" + key + "'");
    it->set(cfg, entry);
  }

  const auto ratio_it = entries.find(kRatioKey);
  const auto ids_it = entries.find(kIdsKey);
  const bool explicit_ids = ids_it != entries.end() && ids_it->second.value != "auto";
  if (explicit_ids) {
    if (ratio_it != entries.end()) {
      throw ConfigError(ratio_it->second.line,
                        "fl.malicious_ratio conflicts with explicit fl.malicious_ids");
    }
    cfg.malicious_ids = parse_ids(ids_it->second);
  } else {
    double ratio = kDefaultRatio;
    if (ratio_it != entries.end()) {
      ratio = parse_double(ratio_it->second, kRatioKey);
      if (ratio < 0.0 || ratio > 1.0) {
        throw ConfigError(ratio_it->second.line, "fl.malicious_ratio must lie in [0, 1]");
      }
    }
    const auto count =
        static_cast<std::size_t>(std::lround(ratio * static_cast<double>(cfg.num_clients)));
    cfg.malicious_ids.resize(count);
    for (std::size_t i = 0; i < count; ++i) cfg.malicious_ids[i] = i;
  }

  try {
    cfg.validate();
  } catch (const std::exception& ex) {
    throw ConfigError(0, std::string("invalid configuration: ") + ex.what());
  }
  return cfg;
}

std::string render_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& k : key_table()) out += k.key + " = " + k.get(cfg) + "\n";
  out += std::string(kIdsKey) + " = " + render_ids(cfg.malicious_ids) + "\n";
  return out;
}

SweepSpec parse_sweep(std::string_view text) {
  const auto entries = parse_entries(text);
  SweepSpec spec;
  for (const auto& [key, entry] : entries) {
    if (key == "key") {
      spec.key = entry.value;
      static const std::vector<std::string> allowed = {"malicious_ratio", "attack.lambda_sep",
                                                       "attack.lambda_reg", "agg.rule"};
      if (std::find(allowed.begin(), allowed.end(), spec.key) == allowed.end()) {
        throw ConfigError(entry.line, "sweep key '" + spec.key +
                                          "' is not one of malicious_ratio, attack.lambda_sep, "
                                          "attack.lambda_reg, agg.rule");
      }
    } else if (key == "values") {
      for (const auto& v : csv::split(entry.value)) {
        const auto t = csv::trim(v);
        if (t.empty()) throw ConfigError(entry.line, "values: empty list element");
        spec.values.emplace_back(t);
      }
    } else if (key == "seeds") {
      for (const auto& v : csv::split(entry.value)) {
        spec.seeds.push_back(parse_unsigned(csv::trim(v), entry.line, "seeds"));
      }
    } else {
      throw ConfigError(entry.line, "unknown sweep key '" + key + "'");
    }
  }
  if (spec.key.empty()) throw ConfigError(0, "sweep: missing `key`");
  if (spec.values.empty()) throw ConfigError(0, "sweep: `values` must be a nonempty list");
  if (spec.seeds.empty()) throw ConfigError(0, "sweep: `seeds` must be a nonempty list");
  return spec;
}

ConfigOverrides sweep_overrides(const SweepSpec& spec, const std::string& value,
                                std::uint64_t seed) {
  ConfigOverrides o;
  if (spec.key == "malicious_ratio") {
    o.emplace_back(std::string(kRatioKey), value);
    o.emplace_back(std::string(kIdsKey), "auto");
  } else {
    o.emplace_back(spec.key, value);
  }
  o.emplace_back("fl.seed", std::to_string(seed));
  return o;
}

}  // namespace fedsim
