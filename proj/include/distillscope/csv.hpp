#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace distillscope {

/// Shortest decimal text that reads back to the same double.
std::string format_double(double value);
double parse_double(std::string_view text);

/// Splits one CSV line on commas (no quoting; fields never contain commas).
std::vector<std::string> split_csv_line(std::string_view line);

}  // namespace distillscope
