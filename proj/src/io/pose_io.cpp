#include "locfuse/pose_io.hpp"

#include <fstream>

#include "locfuse/csv.hpp"
#include "locfuse/error.hpp"

namespace locfuse {
namespace {

const std::vector<std::string> kPoseHeader = {"t", "px", "py", "pz", "qw", "qx", "qy", "qz"};
const std::vector<std::string> kRelativeHeader = {"t", "dp_x", "dp_y", "dp_z", "dq_w", "dq_x", "dq_y", "dq_z"};

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  return out;
}

std::vector<std::string> row(double t, const Vec3& v, const Quat& q) {
  return {csv::format(t),      csv::format(v.x()), csv::format(v.y()), csv::format(v.z()),
          csv::format(q.w()),  csv::format(q.x()), csv::format(q.y()), csv::format(q.z())};
}

}  // namespace

void write_pose_stream(const std::filesystem::path& path, const PoseStream& stream) {
  require(stream.times.size() == stream.poses.size(), "pose stream: times/poses length mismatch");
  auto out = open_out(path);
  csv::write_row(out, kPoseHeader);
  for (std::size_t i = 0; i < stream.size(); ++i) {
    csv::write_row(out, row(stream.times[i], stream.poses[i].p, stream.poses[i].q));
  }
}

PoseStream read_pose_stream(const std::filesystem::path& path) {
  const auto table = csv::read(path, kPoseHeader);
  PoseStream stream;
  for (const auto& r : table.rows) {
    stream.times.push_back(csv::to_double(r[0]));
    Pose pose;
    pose.p = Vec3(csv::to_double(r[1]), csv::to_double(r[2]), csv::to_double(r[3]));
    pose.q = quat_normalize(Vec4(csv::to_double(r[4]), csv::to_double(r[5]), csv::to_double(r[6]),
                                 csv::to_double(r[7])));
    stream.poses.push_back(pose);
  }
  return stream;
}

void write_relative_stream(const std::filesystem::path& path, const RelativeStream& stream) {
  require(stream.times.size() == stream.deltas.size(), "relative stream: times/deltas length mismatch");
  auto out = open_out(path);
  csv::write_row(out, kRelativeHeader);
  for (std::size_t i = 0; i < stream.size(); ++i) {
    csv::write_row(out, row(stream.times[i], stream.deltas[i].dp, stream.deltas[i].dq));
  }
}

RelativeStream read_relative_stream(const std::filesystem::path& path) {
  const auto table = csv::read(path, kRelativeHeader);
  RelativeStream stream;
  for (const auto& r : table.rows) {
    stream.times.push_back(csv::to_double(r[0]));
    RelativePose rel;
    rel.dp = Vec3(csv::to_double(r[1]), csv::to_double(r[2]), csv::to_double(r[3]));
    rel.dq = quat_normalize(Vec4(csv::to_double(r[4]), csv::to_double(r[5]), csv::to_double(r[6]),
                                 csv::to_double(r[7])));
    stream.deltas.push_back(rel);
  }
  return stream;
}

RelativeStream make_relative_stream(const PoseStream& stream) {
  RelativeStream rel;
  rel.deltas = relative_stream(stream.poses);
  for (std::size_t i = 1; i < stream.size(); ++i) rel.times.push_back(stream.times[i]);
  return rel;
}

}  // namespace locfuse
