#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fedsim/federation.hpp"

namespace fedsim {

/// Parse or validation failure. `line` is 0 when the problem is not tied to
/// a single line (cross-field constraints).
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

using ConfigOverrides = std::vector<std::pair<std::string, std::string>>;

/// Parses a flat `key = value` document (`#` comments, dotted keys) over the
/// defaults. Overrides are applied after the document, replacing any value
/// it set. Unknown keys, type errors and constraint violations throw
/// ConfigError.
ExperimentConfig parse_config(std::string_view text, const ConfigOverrides& overrides = {});

/// Renders every key, so parse_config(render_config(c)) == c.
std::string render_config(const ExperimentConfig& cfg);

struct ConfigKeyInfo {
  std::string key;
  std::string default_value;
  std::string help;
};

/// All accepted keys with their defaults, in rendering order.
std::vector<ConfigKeyInfo> config_keys();

/// Grid for `sweep`: one run per (value, seed).
struct SweepSpec {
  std::string key;  // malicious_ratio, attack.lambda_sep, attack.lambda_reg or agg.rule
  std::vector<std::string> values;
  std::vector<std::uint64_t> seeds;
};

/// Same syntax as configs, keys `key`, `values` and `seeds` (comma lists).
SweepSpec parse_sweep(std::string_view text);

/// Config overrides for one sweep cell.
ConfigOverrides sweep_overrides(const SweepSpec& spec, const std::string& value,
                                std::uint64_t seed);

}  // namespace fedsim
