#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace locfuse::csv {

// Shortest round-trip decimal representation ('.' separator, locale-free).
std::string format(double value);

std::vector<std::string> split(std::string_view line);

double to_double(std::string_view field);
long long to_int(std::string_view field);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

// Reads a comma separated file. When expected_header is non-empty the first
// line must match it exactly; every row must have the header's width.
Table read(const std::filesystem::path& path, const std::vector<std::string>& expected_header = {});

void write_row(std::ostream& out, const std::vector<std::string>& fields);

std::string join(const std::vector<std::string>& fields);

}  // namespace locfuse::csv
