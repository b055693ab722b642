#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace fedsim::csv {

/// Six significant digits, `.` decimal separator, locale independent.
std::string fmt6(double v);

/// Shortest representation that parses back to the same double.
std::string fmt_exact(double v);

std::vector<std::string> split(std::string_view line, char sep = ',');

std::string_view trim(std::string_view s);

}  // namespace fedsim::csv
