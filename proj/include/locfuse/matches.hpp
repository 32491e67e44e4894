#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "locfuse/geometry.hpp"

namespace locfuse {

// One 2D-2D feature match between two images. label is the ground-truth
// landmark id when known (simulated data), -1 otherwise. Labels never feed
// the reconstruction itself.
struct Match {
  int img_a = 0;
  int img_b = 0;
  Vec2 xa = Vec2::Zero();
  Vec2 xb = Vec2::Zero();
  int label = -1;
};

// 2D-3D correspondence for query localization.
struct Correspondence {
  Vec3 point = Vec3::Zero();
  Vec2 pixel = Vec2::Zero();
  int label = -1;
};

// CSV: img_a,img_b,xa,ya,xb,yb
void write_matches(const std::filesystem::path& path, std::span<const Match> matches);
std::vector<Match> read_matches(const std::filesystem::path& path);

}  // namespace locfuse
