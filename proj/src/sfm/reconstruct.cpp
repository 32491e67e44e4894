#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <tuple>

#include "locfuse/error.hpp"
#include "locfuse/sfm.hpp"
#include "locfuse/sim.hpp"

namespace locfuse::sfm {

namespace {

using PixelKey = std::tuple<int, std::uint64_t, std::uint64_t>;

PixelKey key_of(int image, const Vec2& px) {
  return {image, std::bit_cast<std::uint64_t>(px.x()), std::bit_cast<std::uint64_t>(px.y())};
}

struct UnionFind {
  std::vector<int> parent;
  int add() {
    parent.push_back(int(parent.size()));
    return parent.back();
  }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

int Reconstruction::observations() const {
  int n = 0;
  for (const auto& t : tracks) {
    if (cloud.landmarks.count(t.landmark)) n += int(t.observations.size());
  }
  return n;
}

std::vector<FeatureTrack> build_tracks(std::span<const Match> matches) {
  std::map<PixelKey, int> node_of;
  std::vector<TrackObservation> nodes;
  UnionFind uf;
  auto node = [&](int image, const Vec2& px) {
    auto [it, fresh] = node_of.try_emplace(key_of(image, px), 0);
    if (fresh) {
      it->second = uf.add();
      nodes.push_back({image, px});
    }
    return it->second;
  };
  std::vector<std::pair<int, int>> edge;
  std::vector<int> degree;
  for (const auto& m : matches) {
    if (m.img_a == m.img_b) continue;
    const int a = node(m.img_a, m.xa), b = node(m.img_b, m.xb);
    degree.resize(nodes.size(), 0);
    ++degree[a];
    ++degree[b];
    uf.unite(a, b);
    edge.emplace_back(a, m.label);
  }
  std::map<int, std::vector<int>> members;
  for (int i = 0; i < int(nodes.size()); ++i) members[uf.find(i)].push_back(i);
  std::map<int, int> matches_of;
  std::map<int, std::map<int, int>> labels_of;
  for (const auto& [a, label] : edge) {
    const int r = uf.find(a);
    ++matches_of[r];
    if (label >= 0) ++labels_of[r][label];
  }

  std::vector<FeatureTrack> out;
  for (const auto& [root, ids] : members) {
    // One observation per image: the best supported node wins a clash.
    std::map<int, int> pick;
    for (int i : ids) {
      auto [it, fresh] = pick.try_emplace(nodes[i].image, i);
      if (!fresh && degree[i] > degree[it->second]) it->second = i;
    }
    if (pick.size() < 2) continue;
    FeatureTrack t;
    for (const auto& [image, i] : pick) t.observations.push_back(nodes[i]);
    t.match_count = matches_of[root];
    int best = 0;
    for (const auto& [label, count] : labels_of[root]) {
      if (count > best) {
        best = count;
        t.label = label;
      }
    }
    t.landmark = int(out.size());
    out.push_back(std::move(t));
  }
  return out;
}

namespace {

class Builder {
 public:
  Builder(const Intrinsics& k, const SfmConfig& cfg, const ReconstructOptions& opt) : cfg_(cfg), opt_(opt) {
    rec_.cloud.intrinsics = k;
  }

  Reconstruction run(std::span<const Match> matches) {
    rec_.matches_in = int(matches.size());
    auto kept = filter(matches);
    rec_.matches_kept = int(kept.size());
    if (kept.size() < 8) {
      fail(ErrorCode::kInsufficientMatches,
           "reconstruct: " + std::to_string(kept.size()) + " matches left after filtering");
    }
    rec_.tracks = build_tracks(kept);
    next_id_ = int(rec_.tracks.size());
    initialize();
    register_all();
    keep_registered_only();
    settle_rotations();
    refine();
    final_adjustment();
    align_to_priors();
    return std::move(rec_);
  }

 private:
  std::vector<Match> filter(std::span<const Match> matches) {
    std::vector<Match> in(matches.begin(), matches.end());
    if (cfg_.oc > 0.0) {
      std::map<int, std::vector<int>> vis;
      auto visible = [&](int image) -> const std::vector<int>& {
        auto it = vis.find(image);
        if (it != vis.end()) return it->second;
        const auto p = opt_.priors.find(image);
        if (p == opt_.priors.end()) {
          fail(ErrorCode::kInvalidArgument,
               "reconstruct: overlap criterion needs a reference pose for image " + std::to_string(image));
        }
        return vis[image] = visible_floor_points(p->second, rec_.cloud.intrinsics, opt_.floor, opt_.image_size);
      };
      std::map<std::pair<int, int>, bool> admit;
      std::vector<Match> out;
      for (const auto& m : in) {
        const auto key = std::minmax(m.img_a, m.img_b);
        auto it = admit.find(key);
        if (it == admit.end()) {
          const auto& va = visible(key.first);
          const auto& vb = visible(key.second);
          std::vector<int> both, either;
          std::set_intersection(va.begin(), va.end(), vb.begin(), vb.end(), std::back_inserter(both));
          std::set_union(va.begin(), va.end(), vb.begin(), vb.end(), std::back_inserter(either));
          const double pct = either.empty() ? 0.0 : 100.0 * double(both.size()) / double(either.size());
          it = admit.emplace(key, pct >= cfg_.oc).first;
        }
        if (it->second) out.push_back(m);
      }
      in = std::move(out);
    }
    return spatial_consistency_filter(in, cfg_.sc);
  }

  const TrackObservation* obs_in(const FeatureTrack& t, int image) const {
    for (const auto& o : t.observations)
      if (o.image == image) return &o;
    return nullptr;
  }

  void initialize() {
    std::map<std::pair<int, int>, int> shared;
    for (const auto& t : rec_.tracks) {
      for (std::size_t i = 0; i < t.observations.size(); ++i)
        for (std::size_t j = i + 1; j < t.observations.size(); ++j)
          ++shared[{t.observations[i].image, t.observations[j].image}];
    }
    std::vector<std::pair<int, std::pair<int, int>>> ranked;
    for (const auto& [pair, n] : shared)
      if (n >= 8) ranked.push_back({n, pair});
    std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.first > b.first; });
    if (ranked.empty()) fail(ErrorCode::kInsufficientMatches, "reconstruct: no image pair shares 8 tracks");

    const Intrinsics& k = rec_.cloud.intrinsics;
    struct Candidate {
      int a, b;
      Pose pose;
      std::map<int, Vec3> points;
      double angle;
    };
    std::optional<Candidate> best;
    constexpr double kGoodAngleDeg = 2.0;
    const int tries = std::min<int>(5, int(ranked.size()));
    for (int r = 0; r < tries; ++r) {
      const auto [a, b] = ranked[r].second;
      std::vector<Vec2> pa, pb;
      std::vector<int> ti;
      for (int t = 0; t < int(rec_.tracks.size()); ++t) {
        const auto* oa = obs_in(rec_.tracks[t], a);
        const auto* ob = obs_in(rec_.tracks[t], b);
        if (!oa || !ob) continue;
        pa.push_back(oa->pixel);
        pb.push_back(ob->pixel);
        ti.push_back(t);
      }
      TwoViewResult tv;
      try {
        tv = two_view_geometry(pa, pb, k, cfg_.init_limit(), sim::mix_seed(opt_.seed, 0x2f, a, b));
      } catch (const Error&) {
        continue;
      }
      Candidate c{a, b, tv.b, {}, 0.0};
      const Pose cams[2] = {Pose{}, tv.b};
      std::vector<double> angles;
      for (std::size_t i = 0; i < ti.size(); ++i) {
        if (!tv.inlier[i]) continue;
        const Vec2 px[2] = {pa[i], pb[i]};
        Vec3 x;
        try {
          x = triangulate(cams, px, k);
        } catch (const Error&) {
          continue;
        }
        const auto ra = reprojection_residual(cams[0], k, x, pa[i]);
        const auto rb = reprojection_residual(cams[1], k, x, pb[i]);
        if (!ra || !rb || ra->norm() >= cfg_.init_limit() || rb->norm() >= cfg_.init_limit()) continue;
        c.points[rec_.tracks[ti[i]].landmark] = x;
        const Vec3 da = (x - cams[0].p).normalized(), db = (x - cams[1].p).normalized();
        angles.push_back(std::acos(std::clamp(da.dot(db), -1.0, 1.0)) * 180.0 / std::numbers::pi);
      }
      if (c.points.size() < 8) continue;
      c.angle = median(angles);
      if (!best || (best->angle < kGoodAngleDeg && c.angle > best->angle)) best = std::move(c);
      if (best->angle >= kGoodAngleDeg) break;
    }
    if (!best) fail(ErrorCode::kInsufficientMatches, "reconstruct: two-view initialization failed");
    rec_.cloud.cameras = {{best->a, Pose{}}, {best->b, best->pose}};
    rec_.cloud.landmarks = std::move(best->points);
    adjust(BaStage::kRotationsFixed, false);
  }

  // Bundle adjustment, then drop excluded observations and unsupported points.
  // Residual exclusion is off while cameras are still being registered: each
  // pass trims the noise tail, and repeating it per registration erodes
  // good observations.
  void adjust(BaStage stage, bool exclude = true) {
    drop_weak_cameras(stage == BaStage::kFinal ? 3 : 2);
    BaOptions o;
    o.std_factor = exclude ? cfg_.std : 0.0;
    auto res = bundle_adjust(rec_.cloud, rec_.tracks, stage, o);
    std::map<int, std::set<int>> gone;
    for (const auto& [t, i] : res.excluded) gone[t].insert(i);
    for (auto& [t, idx] : gone) {
      auto& obs = rec_.tracks[t].observations;
      for (auto it = idx.rbegin(); it != idx.rend(); ++it) obs.erase(obs.begin() + *it);
    }
    rec_.ba_runs.push_back(std::move(res));
    prune();
  }

  int registered_views(const FeatureTrack& t) const {
    int n = 0;
    for (const auto& o : t.observations) n += rec_.cloud.camera(o.image) != nullptr;
    return n;
  }

  void prune() {
    for (const auto& t : rec_.tracks) {
      if (rec_.cloud.landmarks.count(t.landmark) && registered_views(t) < 2) rec_.cloud.landmarks.erase(t.landmark);
    }
  }

  // Any camera may go, gauge ones included: the next in line takes over.
  void drop_weak_cameras(int min_obs) {
    for (bool again = true; again;) {
      again = false;
      std::map<int, int> count;
      for (const auto& t : rec_.tracks) {
        if (!rec_.cloud.landmarks.count(t.landmark)) continue;
        for (const auto& o : t.observations) ++count[o.image];
      }
      auto& cams = rec_.cloud.cameras;
      for (std::size_t c = 0; c < cams.size(); ++c) {
        if (count[cams[c].image] < min_obs) {
          failed_.insert(cams[c].image);
          cams.erase(cams.begin() + c);
          again = true;
          break;
        }
      }
      if (again) prune();
    }
    if (rec_.cloud.cameras.size() < 2)
      fail(ErrorCode::kInsufficientMatches, "reconstruct: fewer than two cameras left");
  }

  void triangulate_new() {
    const Intrinsics& k = rec_.cloud.intrinsics;
    for (const auto& t : rec_.tracks) {
      if (rec_.cloud.landmarks.count(t.landmark)) continue;
      std::vector<Pose> cams;
      std::vector<Vec2> px;
      for (const auto& o : t.observations) {
        if (const Pose* p = rec_.cloud.camera(o.image)) {
          cams.push_back(*p);
          px.push_back(o.pixel);
        }
      }
      if (cams.size() < 2) continue;
      Vec3 x;
      try {
        x = triangulate(cams, px, k);
      } catch (const Error&) {
        continue;
      }
      bool ok = true;
      for (std::size_t i = 0; i < cams.size() && ok; ++i) {
        const auto r = reprojection_residual(cams[i], k, x, px[i]);
        ok = r && r->norm() < cfg_.register_limit();
      }
      if (ok) rec_.cloud.landmarks[t.landmark] = x;
    }
  }

  void register_all() {
    std::set<int> images;
    for (const auto& t : rec_.tracks)
      for (const auto& o : t.observations) images.insert(o.image);
    while (true) {
      int pick = -1;
      std::vector<Correspondence> best;
      for (int img : images) {
        if (rec_.cloud.camera(img) || failed_.count(img)) continue;
        std::vector<Correspondence> cs;
        for (const auto& t : rec_.tracks) {
          const auto it = rec_.cloud.landmarks.find(t.landmark);
          if (it == rec_.cloud.landmarks.end()) continue;
          if (const auto* o = obs_in(t, img)) cs.push_back({it->second, o->pixel, t.label});
        }
        if (cs.size() > best.size()) {
          best = std::move(cs);
          pick = img;
        }
      }
      if (pick < 0 || best.size() < 6) break;
      LocalizeOptions lo;
      lo.threshold_px = cfg_.register_limit();
      lo.seed = sim::mix_seed(opt_.seed, 0x7e9, pick);
      try {
        const auto pose = localize_query(best, rec_.cloud.intrinsics, lo);
        rec_.cloud.cameras.push_back({pick, pose});
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kLocalizationFailure) throw;
        failed_.insert(pick);
        continue;
      }
      triangulate_new();
      adjust(BaStage::kRotationsFixed, false);
    }
  }

  // Rotations only move in the final adjustment, so registration errors in
  // them would otherwise leave structured residuals for the exclusion rules
  // to eat. Alternate pose-only refinement against the fixed structure with
  // rotation-fixed adjustment to settle them first.
  void settle_rotations() {
    const Intrinsics& k = rec_.cloud.intrinsics;
    for (int pass = 0; pass < kSettlePasses; ++pass) {
      for (std::size_t c = 1; c < rec_.cloud.cameras.size(); ++c) {
        auto& cam = rec_.cloud.cameras[c];
        std::vector<Correspondence> cs;
        for (const auto& t : rec_.tracks) {
          const auto it = rec_.cloud.landmarks.find(t.landmark);
          const auto* o = it == rec_.cloud.landmarks.end() ? nullptr : obs_in(t, cam.image);
          if (!o) continue;
          const auto r = reprojection_residual(cam.pose, k, it->second, o->pixel);
          if (r && r->norm() < cfg_.register_limit()) cs.push_back({it->second, o->pixel, -1});
        }
        if (cs.size() >= 6) cam.pose = refine_pose(cam.pose, cs, k);
      }
      adjust(BaStage::kRotationsFixed, false);
    }
    keep_registered_only();
  }

  void keep_registered_only() {
    std::vector<FeatureTrack> kept;
    for (auto& t : rec_.tracks) {
      if (!rec_.cloud.landmarks.count(t.landmark)) continue;
      std::erase_if(t.observations, [&](const TrackObservation& o) { return !rec_.cloud.camera(o.image); });
      kept.push_back(std::move(t));
    }
    rec_.tracks = std::move(kept);
  }

  std::vector<Vec2> residuals(const FeatureTrack& t) const {
    std::vector<Vec2> out;
    const Vec3& x = rec_.cloud.landmarks.at(t.landmark);
    for (const auto& o : t.observations) {
      const auto r = reprojection_residual(*rec_.cloud.camera(o.image), rec_.cloud.intrinsics, x, o.pixel);
      out.push_back(r ? *r : Vec2(1e6, 1e6));
    }
    return out;
  }

  void retriangulate(const FeatureTrack& t) {
    std::vector<Pose> cams;
    std::vector<Vec2> px;
    for (const auto& o : t.observations) {
      cams.push_back(*rec_.cloud.camera(o.image));
      px.push_back(o.pixel);
    }
    try {
      rec_.cloud.landmarks[t.landmark] = triangulate(cams, px, rec_.cloud.intrinsics);
    } catch (const Error&) {
      rec_.cloud.landmarks.erase(t.landmark);
    }
  }

  void refine() {
    for (int round = 0; round < opt_.max_rounds; ++round) {
      if (residual_stats(rec_.cloud, rec_.tracks).max_px < cfg_.ex) break;
      ++rec_.rounds;
      std::vector<FeatureTrack> next;
      for (const auto& t : rec_.tracks) {
        const auto parts = cluster_separation(t, residuals(t), cfg_.mm, cfg_.ex, next_id_);
        const bool unchanged = parts.size() == 1 && parts[0].observations.size() == t.observations.size();
        if (std::none_of(parts.begin(), parts.end(), [&](const FeatureTrack& p) { return p.landmark == t.landmark; }))
          rec_.cloud.landmarks.erase(t.landmark);
        for (const auto& p : parts) {
          if (!unchanged) retriangulate(p);
          next.push_back(p);
        }
      }
      std::erase_if(next, [&](const FeatureTrack& t) { return !rec_.cloud.landmarks.count(t.landmark); });
      if (cfg_.gibbs) {
        for (auto& t : next) {
          const auto g = gibbs_exclude(rec_.cloud, t, true, cfg_.mm, cfg_.ex, sim::mix_seed(opt_.seed, 0x61b, t.landmark, round));
          if (g.removed > 0) {
            t = g.track;
            rec_.cloud.landmarks[t.landmark] = g.point;
          }
        }
      }
      rec_.tracks = std::move(next);
      adjust(BaStage::kRotationsFixed);
      keep_registered_only();
    }
    // Whatever still exceeds the separation limit is cut.
    const auto st = residual_stats(rec_.cloud, rec_.tracks);
    if (st.max_px >= cfg_.ex) {
      for (auto& t : rec_.tracks) {
        const auto r = residuals(t);
        std::vector<TrackObservation> keep;
        for (std::size_t i = 0; i < r.size(); ++i)
          if (r[i].norm() < cfg_.ex) keep.push_back(t.observations[i]);
        t.observations = std::move(keep);
      }
      prune();
      keep_registered_only();
    }
  }

  void final_adjustment() {
    adjust(BaStage::kFinal);
    keep_registered_only();
    if (rec_.cloud.landmarks.empty()) fail(ErrorCode::kInsufficientMatches, "reconstruct: no landmarks survived");
  }

  void align_to_priors() {
    std::vector<Vec3> src, dst;
    for (const auto& c : rec_.cloud.cameras) {
      const auto it = opt_.priors.find(c.image);
      if (it == opt_.priors.end()) continue;
      src.push_back(c.pose.p);
      dst.push_back(it->second.p);
    }
    if (src.size() >= 3) transform_cloud(rec_.cloud, align_similarity(src, dst));
  }

  static constexpr int kSettlePasses = 5;
  const SfmConfig& cfg_;
  const ReconstructOptions& opt_;
  Reconstruction rec_;
  std::set<int> failed_;
  int next_id_ = 0;
};

}  // namespace

Reconstruction reconstruct(std::span<const Match> matches, const Intrinsics& intrinsics, const SfmConfig& config,
                           const ReconstructOptions& options) {
  config.validate();
  intrinsics.validate();
  require(options.max_rounds >= 0, "reconstruct: max_rounds must be >= 0");
  return Builder(intrinsics, config, options).run(matches);
}

std::vector<Correspondence> query_correspondences(const Reconstruction& rec, std::span<const Match> query_matches) {
  std::map<PixelKey, int> landmark_at;
  for (const auto& t : rec.tracks) {
    if (!rec.cloud.landmarks.count(t.landmark)) continue;
    for (const auto& o : t.observations) landmark_at.emplace(key_of(o.image, o.pixel), t.landmark);
  }
  std::set<int> used;
  std::vector<Correspondence> out;
  for (const auto& m : query_matches) {
    const auto it = landmark_at.find(key_of(m.img_a, m.xa));
    if (it == landmark_at.end() || !used.insert(it->second).second) continue;
    out.push_back({rec.cloud.landmarks.at(it->second), m.xb, m.label});
  }
  return out;
}

}  // namespace locfuse::sfm
