#pragma once

#include <filesystem>
#include <vector>

#include "locfuse/geometry.hpp"

namespace locfuse {

// Timestamped absolute poses. CSV: t,px,py,pz,qw,qx,qy,qz
struct PoseStream {
  std::vector<double> times;
  std::vector<Pose> poses;

  std::size_t size() const { return poses.size(); }
};

// Timestamped relative motions; entry i is the motion arriving at times[i].
// CSV: t,dp_x,dp_y,dp_z,dq_w,dq_x,dq_y,dq_z
struct RelativeStream {
  std::vector<double> times;
  std::vector<RelativePose> deltas;

  std::size_t size() const { return deltas.size(); }
};

void write_pose_stream(const std::filesystem::path& path, const PoseStream& stream);
PoseStream read_pose_stream(const std::filesystem::path& path);

void write_relative_stream(const std::filesystem::path& path, const RelativeStream& stream);
RelativeStream read_relative_stream(const std::filesystem::path& path);

// Relative motions between consecutive poses, stamped with the later time.
RelativeStream make_relative_stream(const PoseStream& stream);

}  // namespace locfuse
