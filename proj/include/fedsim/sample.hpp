#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fedsim/model.hpp"

namespace fedsim {

struct Sample {
  std::int64_t base_id = 0;  // identifies the underlying clean draw
  std::vector<double> x;
  std::size_t label = 0;
  bool is_triggered = false;

  LabeledInput as_input() const { return {x, label}; }
  bool operator==(const Sample&) const = default;
};

/// One base draw seen twice: clean with its true label, triggered with the
/// target label.
struct PairedSample {
  std::int64_t base_id = 0;
  std::vector<double> clean_x;
  std::size_t label = 0;
  std::vector<double> triggered_x;
  std::size_t target_label = 0;

  bool operator==(const PairedSample&) const = default;
};

}  // namespace fedsim
