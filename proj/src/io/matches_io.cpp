#include <fstream>

#include "locfuse/csv.hpp"
#include "locfuse/error.hpp"
#include "locfuse/matches.hpp"

namespace locfuse {
namespace {
const std::vector<std::string> kHeader = {"img_a", "img_b", "xa", "ya", "xb", "yb"};
}

void write_matches(const std::filesystem::path& path, std::span<const Match> matches) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  csv::write_row(out, kHeader);
  for (const auto& m : matches) {
    csv::write_row(out, {std::to_string(m.img_a), std::to_string(m.img_b), csv::format(m.xa.x()), csv::format(m.xa.y()),
                         csv::format(m.xb.x()), csv::format(m.xb.y())});
  }
}

std::vector<Match> read_matches(const std::filesystem::path& path) {
  const auto table = csv::read(path, kHeader);
  std::vector<Match> out;
  out.reserve(table.rows.size());
  for (const auto& r : table.rows) {
    Match m;
    m.img_a = int(csv::to_int(r[0]));
    m.img_b = int(csv::to_int(r[1]));
    m.xa = Vec2(csv::to_double(r[2]), csv::to_double(r[3]));
    m.xb = Vec2(csv::to_double(r[4]), csv::to_double(r[5]));
    require(m.img_a >= 0 && m.img_b >= 0 && m.img_a != m.img_b, path.string() + ": bad image ids in match");
    out.push_back(m);
  }
  return out;
}

}  // namespace locfuse
