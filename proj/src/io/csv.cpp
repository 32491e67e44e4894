#include "locfuse/csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <ostream>

#include "locfuse/error.hpp"

namespace locfuse::csv {

std::string format(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

std::vector<std::string> split(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.emplace_back(line.substr(start));
      break;
    }
    out.emplace_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

double to_double(std::string_view field) {
  while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
  while (!field.empty() && field.back() == ' ') field.remove_suffix(1);
  if (field == "nan") return std::nan("");
  if (field == "inf") return INFINITY;
  if (field == "-inf") return -INFINITY;
  double value = 0.0;
  const auto res = std::from_chars(field.data(), field.data() + field.size(), value);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
    fail(ErrorCode::kIo, "malformed number '" + std::string(field) + "'");
  }
  return value;
}

long long to_int(std::string_view field) {
  long long value = 0;
  const auto res = std::from_chars(field.data(), field.data() + field.size(), value);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
    fail(ErrorCode::kIo, "malformed integer '" + std::string(field) + "'");
  }
  return value;
}

Table read(const std::filesystem::path& path, const std::vector<std::string>& expected_header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  Table table;
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::kIo, path.string() + ": empty file");
  table.header = split(line);
  if (!expected_header.empty() && table.header != expected_header) {
    fail(ErrorCode::kIo, path.string() + ": unexpected header '" + line + "'");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto fields = split(line);
    if (fields.size() != table.header.size()) {
      fail(ErrorCode::kIo, path.string() + ":" + std::to_string(line_no) + ": wrong field count");
    }
    table.rows.push_back(std::move(fields));
  }
  return table;
}

std::string join(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += fields[i];
  }
  return out;
}

void write_row(std::ostream& out, const std::vector<std::string>& fields) { out << join(fields) << '\n'; }

}  // namespace locfuse::csv
