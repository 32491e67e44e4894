#include <fstream>
#include <string>

#include "locfuse/csv.hpp"
#include "locfuse/error.hpp"
#include "locfuse/sfm.hpp"

namespace locfuse::sfm {

namespace {
const std::vector<std::string> kLandmarkHeader = {"id", "x", "y", "z"};
const std::vector<std::string> kCameraHeader = {"id", "px", "py", "pz", "qw", "qx", "qy", "qz"};
const std::vector<std::string> kTrackHeader = {"landmark", "image", "x", "y"};
}  // namespace

void write_point_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  using csv::format;
  out << "LANDMARKS\n";
  csv::write_row(out, kLandmarkHeader);
  for (const auto& [id, x] : cloud.landmarks) {
    csv::write_row(out, {std::to_string(id), format(x.x()), format(x.y()), format(x.z())});
  }
  out << "CAMERAS\n";
  csv::write_row(out, kCameraHeader);
  for (const auto& c : cloud.cameras) {
    const auto& p = c.pose;
    csv::write_row(out, {std::to_string(c.image), format(p.p.x()), format(p.p.y()), format(p.p.z()), format(p.q.w()),
                         format(p.q.x()), format(p.q.y()), format(p.q.z())});
  }
}

PointCloud read_point_cloud(const std::filesystem::path& path, const Intrinsics& intrinsics) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  PointCloud cloud;
  cloud.intrinsics = intrinsics;
  enum { kNone, kLandmarks, kCameras } section = kNone;
  bool expect_header = false;
  std::string line;
  int line_no = 0;
  auto bad = [&](const std::string& why) {
    fail(ErrorCode::kIo, path.string() + ":" + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line == "LANDMARKS" || line == "CAMERAS") {
      section = line == "LANDMARKS" ? kLandmarks : kCameras;
      expect_header = true;
      continue;
    }
    const auto f = csv::split(line);
    if (section == kNone) bad("data before a section marker");
    const auto& header = section == kLandmarks ? kLandmarkHeader : kCameraHeader;
    if (expect_header) {
      if (f != header) bad("unexpected header");
      expect_header = false;
      continue;
    }
    if (f.size() != header.size()) bad("wrong field count");
    const int id = int(csv::to_int(f[0]));
    if (section == kLandmarks) {
      if (!cloud.landmarks.emplace(id, Vec3(csv::to_double(f[1]), csv::to_double(f[2]), csv::to_double(f[3]))).second)
        bad("duplicate landmark id");
    } else {
      Pose p;
      p.p = Vec3(csv::to_double(f[1]), csv::to_double(f[2]), csv::to_double(f[3]));
      p.q = quat_normalize(Vec4(csv::to_double(f[4]), csv::to_double(f[5]), csv::to_double(f[6]), csv::to_double(f[7])));
      cloud.cameras.push_back({id, p});
    }
  }
  return cloud;
}

void write_tracks(const std::filesystem::path& path, std::span<const FeatureTrack> tracks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  csv::write_row(out, kTrackHeader);
  for (const auto& t : tracks) {
    for (const auto& o : t.observations) {
      csv::write_row(out, {std::to_string(t.landmark), std::to_string(o.image), csv::format(o.pixel.x()),
                           csv::format(o.pixel.y())});
    }
  }
}

std::vector<FeatureTrack> read_tracks(const std::filesystem::path& path) {
  const auto table = csv::read(path, kTrackHeader);
  std::vector<FeatureTrack> out;
  for (const auto& r : table.rows) {
    const int id = int(csv::to_int(r[0]));
    if (out.empty() || out.back().landmark != id) {
      out.emplace_back();
      out.back().landmark = id;
    }
    out.back().observations.push_back({int(csv::to_int(r[1])), Vec2(csv::to_double(r[2]), csv::to_double(r[3]))});
  }
  return out;
}

}  // namespace locfuse::sfm
