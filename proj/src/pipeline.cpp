#include "kslam/pipeline.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "kslam/descriptor.h"
#include "kslam/motion_ba.h"
#include "kslam/pose_graph.h"
#include "kslam/robust.h"
#include "kslam/triangulation.h"

namespace kslam {

namespace {

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

double window_radius(const PipelineConfig& config, const Keypoint& kp) {
  return config.search_window * std::pow(kPyramidScale, keypoint_octave(kp));
}

/// Whitened squared reprojection error of a world point against a keypoint;
/// +inf when the point is behind the camera.
double reprojection_chi2(const Keypoint& kp, const Pose& T_wc, const Eigen::Vector3d& point_w,
                         const Intrinsics& K) {
  const Eigen::Vector3d xc = T_wc.inverse() * point_w;
  if (!(xc.z() > 0.0)) return std::numeric_limits<double>::infinity();
  const double sigma2 = octave_sigma2(keypoint_octave(kp));
  if (const auto* s = std::get_if<StereoKeypoint>(&kp)) {
    const Eigen::Vector3d proj = project_stereo(xc, K);
    const Eigen::Vector3d r(s->uL - proj.x(), s->vL - proj.y(), s->uR - proj.z());
    return r.squaredNorm() / sigma2;
  }
  const auto& m = std::get<MonoKeypoint>(kp);
  const Eigen::Vector2d proj = project_mono(xc, K);
  return (Eigen::Vector2d(m.uL, m.vL) - proj).squaredNorm() / sigma2;
}

bool chi2_accepts(const Keypoint& kp, const Pose& T_wc, const Eigen::Vector3d& point_w,
                  const Intrinsics& K) {
  return reprojection_chi2(kp, T_wc, point_w, K) <= (is_stereo(kp) ? kChi2Stereo : kChi2Mono);
}

std::vector<Descriptor> frame_descriptors(const std::vector<Observation>& observations) {
  std::vector<Descriptor> out;
  out.reserve(observations.size());
  for (const Observation& o : observations) out.push_back(o.descriptor);
  return out;
}

/// Nearest keyframe to a pose guess (ties to the lower id); the seed for the
/// tracked local map.
uint64_t nearest_keyframe(const WorldMap& map, const Pose& guess) {
  uint64_t best = map.keyframes().begin()->first;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& [id, kf] : map.keyframes()) {
    const double d = (kf.T_wc.translation() - guess.translation()).norm();
    if (d < best_d) {
      best_d = d;
      best = id;
    }
  }
  return best;
}

struct TrackCandidate {
  std::optional<uint64_t> point_id;  // nullopt: temporary visual-odometry point
  Eigen::Vector3d position;
  Descriptor descriptor;
  Provenance provenance = Provenance::Mono;
};

/// Snaps the rotation back onto SO(3). The motion model composes poses in a
/// feedback loop, which compounds rotation round-off geometrically, and LM
/// steps (proper rotations) cannot remove a non-orthonormal defect.
Pose orthonormalized(const Pose& pose) {
  return Pose(Eigen::Quaterniond(pose.rotation()).normalized().toRotationMatrix(),
              pose.translation());
}

}  // namespace

std::optional<WorldMap> bootstrap(const Frame& frame, const Intrinsics& K) {
  bool any_stereo = false;
  for (const Observation& o : frame.observations) {
    if (is_stereo(o.kp)) {
      any_stereo = true;
      break;
    }
  }
  if (!any_stereo) return std::nullopt;

  WorldMap map;
  std::vector<Observation> obs = frame.observations;
  for (Observation& o : obs) o.point_id.reset();
  const uint64_t kf = map.add_keyframe(Pose::Identity(), std::move(obs));
  for (size_t i = 0; i < frame.observations.size(); ++i) {
    const Observation& o = frame.observations[i];
    const auto* s = std::get_if<StereoKeypoint>(&o.kp);
    if (s == nullptr) continue;
    const double depth = stereo_depth(*s, K);
    const uint64_t pid =
        map.create_point(back_project_stereo(*s, K), classify_point(depth, K), o.descriptor);
    map.link(pid, kf, static_cast<int>(i));
  }
  return map;
}

TrackResult track_frame(TrackingState& state, const WorldMap& map, const Vocabulary& vocab,
                        const Frame& frame, const PipelineConfig& config) {
  TrackResult result;
  result.matches.assign(frame.observations.size(), std::nullopt);
  if (map.keyframes().empty()) {
    state.status = TrackStatus::Lost;
    state.have_last = false;
    return result;
  }

  // Pose guess: the motion model, or relocalization when tracking is not Ok.
  Pose guess;
  bool fresh = false;  // no usable velocity yet
  if (state.status == TrackStatus::Ok && state.have_last) {
    guess = orthonormalized(state.velocity * state.last_T_wc);
  } else {
    const std::optional<Pose> reloc = relocalize(frame, map, vocab, config.K, config.reloc);
    if (!reloc) {
      state.status = TrackStatus::Lost;
      state.have_last = false;
      return result;
    }
    guess = *reloc;
    fresh = true;
  }

  const uint64_t ref = nearest_keyframe(map, guess);
  result.reference_kf = ref;
  result.reference_T_wc = map.keyframe(ref).T_wc;

  // Local-map candidates, plus temporary VO points in localization mode.
  std::vector<TrackCandidate> candidates;
  const LocalWindow window = map.local_window(ref);
  candidates.reserve(window.points.size());
  for (uint64_t pid : window.points) {
    const MapPoint& p = map.point(pid);
    candidates.push_back({pid, p.position, p.descriptor, p.provenance});
  }
  if (state.mode == RunMode::LocalizationOnly && state.have_last) {
    for (const Observation& o : state.last_frame.observations) {
      const auto* s = std::get_if<StereoKeypoint>(&o.kp);
      if (s == nullptr || !(s->disparity() > 0.0)) continue;
      candidates.push_back(
          {std::nullopt, state.last_T_wc * back_project_stereo(*s, config.K), o.descriptor,
           Provenance::Close});
    }
  }

  // Projection-window matching under the pose guess, best/second per
  // observation, then one observation per map point.
  const Pose T_cw = guess.inverse();
  struct ProjectedCandidate {
    size_t candidate;
    Eigen::Vector2d pixel;
  };
  std::vector<ProjectedCandidate> projected;
  projected.reserve(candidates.size());
  for (size_t c = 0; c < candidates.size(); ++c) {
    const Eigen::Vector3d xc = T_cw * candidates[c].position;
    if (!(xc.z() > 0.0)) continue;
    projected.push_back({c, project_mono(xc, config.K)});
  }
  struct ObsMatch {
    int candidate = -1;
    int hamming = std::numeric_limits<int>::max();
  };
  std::vector<ObsMatch> per_obs(frame.observations.size());
  for (size_t i = 0; i < frame.observations.size(); ++i) {
    const Observation& o = frame.observations[i];
    const Eigen::Vector2d pixel = keypoint_pixel(o.kp);
    const double radius2 = window_radius(config, o.kp) * window_radius(config, o.kp);
    int best = std::numeric_limits<int>::max();
    int second = std::numeric_limits<int>::max();
    int best_c = -1;
    for (const ProjectedCandidate& pc : projected) {
      if ((pc.pixel - pixel).squaredNorm() > radius2) continue;
      const int d = hamming(o.descriptor, candidates[pc.candidate].descriptor);
      if (d < best) {
        second = best;
        best = d;
        best_c = static_cast<int>(pc.candidate);
      } else if (d < second) {
        second = d;
      }
    }
    if (best_c < 0 || best > config.max_hamming) continue;
    if (second != std::numeric_limits<int>::max() &&
        !(best <= config.second_best_ratio * second)) {
      continue;
    }
    per_obs[i] = {best_c, best};
  }
  std::vector<int> owner(candidates.size(), -1);  // candidate -> winning observation
  for (size_t i = 0; i < frame.observations.size(); ++i) {
    const int c = per_obs[i].candidate;
    if (c < 0) continue;
    if (owner[c] < 0 || per_obs[i].hamming < per_obs[owner[c]].hamming) {
      owner[c] = static_cast<int>(i);
    }
  }

  std::vector<MotionBaMatch> ba_matches;
  std::vector<std::pair<size_t, int>> ba_source;  // (observation, candidate)
  for (size_t c = 0; c < candidates.size(); ++c) {
    if (owner[c] < 0) continue;
    ba_matches.push_back({frame.observations[owner[c]].kp, candidates[c].position});
    ba_source.emplace_back(static_cast<size_t>(owner[c]), static_cast<int>(c));
  }

  if (ba_matches.size() < 6) {
    state.status = TrackStatus::Lost;
    state.have_last = false;
    return result;
  }
  const MotionBaResult ba = motion_only_ba(ba_matches, T_cw, config.K, config.motion_lm);
  if (ba.inlier_count < config.lost_inliers) {
    state.status = TrackStatus::Lost;
    state.have_last = false;
    return result;
  }

  const Pose pose = ba.T_cw.inverse();
  result.status = TrackStatus::Ok;
  result.T_wc = pose;
  result.inliers = ba.inlier_count;
  for (size_t m = 0; m < ba_source.size(); ++m) {
    if (!ba.inlier[m]) continue;
    const auto [obs_index, cand] = ba_source[m];
    const TrackCandidate& c = candidates[cand];
    if (!c.point_id) continue;  // temporary VO anchor
    result.matches[obs_index] = c.point_id;
    ++result.tracked_total;
    if (c.provenance == Provenance::Close) ++result.tracked_close;
  }
  for (size_t i = 0; i < frame.observations.size(); ++i) {
    if (result.matches[i]) continue;
    const auto* s = std::get_if<StereoKeypoint>(&frame.observations[i].kp);
    if (s == nullptr || !(s->disparity() > 0.0)) continue;
    if (classify_point(stereo_depth(*s, config.K), config.K) == Provenance::Close) {
      ++result.creatable_close;
    }
  }

  state.velocity = (!fresh && state.have_last) ? pose * state.last_T_wc.inverse() : Pose();
  state.last_T_wc = pose;
  state.have_last = true;
  state.status = TrackStatus::Ok;
  state.last_frame = frame;
  return result;
}

MappingSummary local_mapping_step(WorldMap& map, KeyframeDatabase& db, const Vocabulary& vocab,
                                  const KeyframeRequest& request, const PipelineConfig& config) {
  MappingSummary summary;

  // Matches can go stale between tracking and dequeue (point culled or fused).
  std::vector<Observation> insert_obs = request.observations;
  for (Observation& o : insert_obs) {
    if (o.point_id && !map.has_point(*o.point_id)) o.point_id.reset();
  }
  const uint64_t kf_id = map.add_keyframe(request.T_wc, std::move(insert_obs));
  summary.kf_id = kf_id;
  const BowVector bow = bow_vector(frame_descriptors(request.observations), vocab);
  map.set_bow(kf_id, bow);
  db.insert(kf_id, bow);

  summary.culled_points = static_cast<int>(map.cull_map_points().size());

  // Point creation: close stereo keypoints back-project directly; far and
  // mono keypoints need a triangulation partner in a covisible keyframe.
  std::vector<std::pair<uint64_t, int>> neighbors;  // (kf, weight), best first
  for (const auto& [nid, w] : map.covisibility_neighbors(kf_id, 1)) {
    neighbors.emplace_back(nid, w);
  }
  std::sort(neighbors.begin(), neighbors.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (neighbors.size() > static_cast<size_t>(config.creation_neighbors)) {
    neighbors.resize(static_cast<size_t>(config.creation_neighbors));
  }

  const KeyFrame& kf = map.keyframe(kf_id);
  const size_t n_obs = kf.observations.size();
  for (size_t i = 0; i < n_obs; ++i) {
    if (map.keyframe(kf_id).observations[i].point_id) continue;
    const Observation o = map.keyframe(kf_id).observations[i];
    const auto* s = std::get_if<StereoKeypoint>(&o.kp);
    if (s != nullptr && s->disparity() > 0.0) {
      const double depth = stereo_depth(*s, config.K);
      if (classify_point(depth, config.K) == Provenance::Close) {
        const uint64_t pid = map.create_point(request.T_wc * back_project_stereo(*s, config.K),
                                              Provenance::Close, o.descriptor);
        map.link(pid, kf_id, static_cast<int>(i));
        ++summary.points_close;
        continue;
      }
    }
    // Two-view creation against the best covisible partner match.
    for (const auto& [nid, weight] : neighbors) {
      const KeyFrame& nb = map.keyframe(nid);
      int best = std::numeric_limits<int>::max();
      int second = std::numeric_limits<int>::max();
      int best_j = -1;
      for (size_t j = 0; j < nb.observations.size(); ++j) {
        if (nb.observations[j].point_id) continue;
        const int d = hamming(o.descriptor, nb.observations[j].descriptor);
        if (d < best) {
          second = best;
          best = d;
          best_j = static_cast<int>(j);
        } else if (d < second) {
          second = d;
        }
      }
      if (best_j < 0 || best > config.max_hamming) continue;
      if (second != std::numeric_limits<int>::max() &&
          !(best <= config.second_best_ratio * second)) {
        continue;
      }
      const Observation& po = nb.observations[best_j];
      const std::optional<Eigen::Vector3d> point =
          triangulate(o.kp, request.T_wc, po.kp, nb.T_wc, config.K);
      if (!point || !chi2_accepts(o.kp, request.T_wc, *point, config.K) ||
          !chi2_accepts(po.kp, nb.T_wc, *point, config.K)) {
        continue;
      }
      const Provenance prov = s != nullptr ? Provenance::Far : Provenance::Mono;
      const uint64_t pid = map.create_point(*point, prov, o.descriptor);
      map.link(pid, kf_id, static_cast<int>(i));
      map.link(pid, nid, best_j);
      ++summary.points_triangulated;
      break;
    }
  }

  // Local BA over the covisibility window; the frontier stays fixed. Without
  // a frontier the lowest-id window keyframe pins the gauge.
  const LocalWindow window = map.local_window(kf_id);
  if (window.local.size() + window.frontier.size() >= 2) {
    std::vector<BaViewInit> views;
    for (uint64_t id : window.local) views.push_back({id, map.keyframe(id).T_wc.inverse(), false});
    for (uint64_t id : window.frontier) {
      views.push_back({id, map.keyframe(id).T_wc.inverse(), true});
    }
    if (window.frontier.empty()) views.front().fixed = true;
    std::vector<BaPointInit> points;
    std::vector<BaObs> observations;
    for (uint64_t pid : window.points) {
      const MapPoint& p = map.point(pid);
      points.push_back({pid, p.position});
      for (const auto& [vid, idx] : p.observations) {
        if (window.local.count(vid) == 0 && window.frontier.count(vid) == 0) continue;
        observations.push_back({vid, pid, map.keyframe(vid).observations[idx].kp});
      }
    }
    const BaSolution sol =
        local_ba(views, points, observations, config.K, config.local_lm);
    summary.ba_status = sol.status;
    for (const auto& [id, T_cw] : sol.poses) map.set_keyframe_pose(id, T_cw.inverse());
    for (const auto& [pid, pos] : sol.points) map.set_point_position(pid, pos);
    std::set<uint64_t> touched;
    for (size_t f : sol.outlier_observations) {
      map.unlink(observations[f].point_id, observations[f].view_id);
      touched.insert(observations[f].point_id);
    }
    for (uint64_t pid : touched) {
      if (map.has_point(pid) && map.point(pid).observations.empty()) map.remove_point(pid);
    }
  }

  // Keyframe culling; anchors keep culled poses resolvable for trajectories.
  std::map<uint64_t, Pose> pre_pose;
  std::map<uint64_t, uint64_t> pre_parent;
  for (const auto& [id, k] : map.keyframes()) {
    pre_pose.emplace(id, k.T_wc);
    if (const auto p = map.parent(id)) pre_parent.emplace(id, *p);
  }
  for (uint64_t culled : map.cull_keyframes()) {
    const uint64_t parent = pre_parent.at(culled);
    summary.culled_keyframes.push_back(
        {culled, parent, pre_pose.at(parent).inverse() * pre_pose.at(culled)});
    db.erase(culled);
  }
  return summary;
}

std::optional<LoopEvent> validate_loop_candidate(const WorldMap& map, uint64_t current_kf,
                                                 uint64_t candidate_kf,
                                                 const PipelineConfig& config) {
  if (!map.has_keyframe(current_kf) || !map.has_keyframe(candidate_kf)) return std::nullopt;

  const auto linked_points = [&map](uint64_t kf_id, std::set<uint64_t>& out) {
    for (const Observation& o : map.keyframe(kf_id).observations) {
      if (o.point_id && map.has_point(*o.point_id)) out.insert(*o.point_id);
    }
  };
  std::set<uint64_t> current_side;
  linked_points(current_kf, current_side);
  std::set<uint64_t> loop_side;
  linked_points(candidate_kf, loop_side);
  for (const auto& [nid, w] : map.covisibility_neighbors(candidate_kf)) {
    linked_points(nid, loop_side);
  }

  // Descriptor matching on the point descriptors, one pair per loop point.
  struct Pair {
    uint64_t loop_point;
    int hamming;
    size_t index;  // into src/dst
  };
  std::vector<Eigen::Vector3d> src, dst;
  std::map<uint64_t, Pair> by_loop_point;
  const std::vector<uint64_t> loop_points(loop_side.begin(), loop_side.end());
  for (uint64_t cur_pid : current_side) {
    if (loop_side.count(cur_pid) != 0) continue;  // already shared
    const MapPoint& cp = map.point(cur_pid);
    int best = std::numeric_limits<int>::max();
    int second = std::numeric_limits<int>::max();
    uint64_t best_pid = 0;
    for (uint64_t lpid : loop_points) {
      const int d = hamming(cp.descriptor, map.point(lpid).descriptor);
      if (d < best) {
        second = best;
        best = d;
        best_pid = lpid;
      } else if (d < second) {
        second = d;
      }
    }
    if (best > config.max_hamming) continue;
    if (second != std::numeric_limits<int>::max() &&
        !(best <= config.second_best_ratio * second)) {
      continue;
    }
    const auto it = by_loop_point.find(best_pid);
    if (it != by_loop_point.end()) {
      if (best >= it->second.hamming) continue;
      src[it->second.index] = cp.position;
      it->second.hamming = best;
      continue;
    }
    by_loop_point.insert({best_pid, {best_pid, best, src.size()}});
    src.push_back(cp.position);
    dst.push_back(map.point(best_pid).position);
  }

  if (src.size() < 3) return std::nullopt;
  const std::optional<Se3Estimate> est = estimate_se3(src, dst, config.loop_ransac);
  if (!est) return std::nullopt;

  const Pose& T_cur = map.keyframe(current_kf).T_wc;
  const Pose& T_cand = map.keyframe(candidate_kf).T_wc;
  LoopEvent event;
  event.current_kf = current_kf;
  event.matched_kf = candidate_kf;
  event.relative = T_cand.inverse() * (est->transform * T_cur);
  event.inliers = static_cast<int>(est->inliers.size());
  return event;
}

CloseLoopSummary close_loop(WorldMap& map, const LoopEvent& event, FullBaController& ba,
                            const PipelineConfig& config) {
  CloseLoopSummary summary;
  std::map<uint64_t, Pose> pre;
  for (const auto& [id, kf] : map.keyframes()) pre.emplace(id, kf.T_wc);

  const Pose T_corr = pre.at(event.matched_kf) * event.relative * pre.at(event.current_kf).inverse();

  // Rigidly move the current keyframe's covisible neighborhood, along with
  // every point referenced (lowest observer) inside it.
  std::set<uint64_t> hood{event.current_kf};
  for (const auto& [nid, w] : map.covisibility_neighbors(event.current_kf)) hood.insert(nid);
  for (uint64_t id : hood) map.set_keyframe_pose(id, T_corr * pre.at(id));
  summary.corrected_keyframes = static_cast<int>(hood.size());
  for (const auto& [pid, p] : map.points()) {
    if (p.observations.empty()) continue;
    if (hood.count(p.observations.begin()->first) != 0) {
      map.set_point_position(pid, T_corr * p.position);
    }
  }

  // Fuse loop-side points that re-project onto the corrected neighborhood.
  std::set<uint64_t> loop_kfs{event.matched_kf};
  for (const auto& [nid, w] : map.covisibility_neighbors(event.matched_kf)) loop_kfs.insert(nid);
  std::set<uint64_t> loop_points;
  for (uint64_t id : loop_kfs) {
    for (const Observation& o : map.keyframe(id).observations) {
      if (o.point_id) loop_points.insert(*o.point_id);
    }
  }
  std::vector<std::pair<uint64_t, uint64_t>> fusions;       // keep (loop), merge (current)
  std::vector<std::pair<uint64_t, std::pair<uint64_t, int>>> new_links;  // point -> (kf, obs)
  for (uint64_t kf_id : hood) {
    const KeyFrame& kf = map.keyframe(kf_id);
    const Pose T_cw = kf.T_wc.inverse();
    for (uint64_t lpid : loop_points) {
      if (!map.has_point(lpid)) continue;
      const MapPoint& lp = map.point(lpid);
      if (lp.observations.count(kf_id) != 0) continue;
      const Eigen::Vector3d xc = T_cw * lp.position;
      if (!(xc.z() > 0.0)) continue;
      const Eigen::Vector2d pixel = project_mono(xc, config.K);
      int best = std::numeric_limits<int>::max();
      int best_i = -1;
      for (size_t i = 0; i < kf.observations.size(); ++i) {
        const Observation& o = kf.observations[i];
        if ((keypoint_pixel(o.kp) - pixel).norm() > window_radius(config, o.kp)) continue;
        const int d = hamming(lp.descriptor, o.descriptor);
        if (d < best) {
          best = d;
          best_i = static_cast<int>(i);
        }
      }
      if (best_i < 0 || best > config.max_hamming) continue;
      const std::optional<uint64_t> linked = kf.observations[best_i].point_id;
      if (linked) {
        if (*linked != lpid && loop_points.count(*linked) == 0) fusions.emplace_back(lpid, *linked);
      } else {
        new_links.push_back({lpid, {kf_id, best_i}});
      }
    }
  }
  for (const auto& [keep, merge] : fusions) {
    if (!map.has_point(keep) || !map.has_point(merge)) continue;
    map.fuse_points(keep, merge);
    ++summary.fused_points;
  }
  for (const auto& [pid, slot] : new_links) {
    if (!map.has_point(pid)) continue;
    const Observation& o = map.keyframe(slot.first).observations[slot.second];
    if (o.point_id) continue;  // taken by a fusion move
    if (map.point(pid).observations.count(slot.first) != 0) continue;
    map.link(pid, slot.first, slot.second);
  }

  map.add_loop_edge(event.matched_kf, event.current_kf);

  // Essential graph: spanning tree + loop edges + strong covisibility edges,
  // measured from the pre-correction poses except the new loop constraint.
  std::map<uint64_t, Pose> nodes;
  for (const auto& [id, kf] : map.keyframes()) nodes.emplace(id, kf.T_wc);
  std::vector<PoseGraphEdge> edges;
  std::set<std::pair<uint64_t, uint64_t>> used;
  const auto add_edge = [&](uint64_t from, uint64_t to, const Pose& relative) {
    const auto key = std::minmax(from, to);
    if (!used.insert({key.first, key.second}).second) return;
    edges.push_back({from, to, relative, Matrix6d::Identity()});
  };
  const std::pair<uint64_t, uint64_t> new_edge{std::min(event.matched_kf, event.current_kf),
                                               std::max(event.matched_kf, event.current_kf)};
  add_edge(event.matched_kf, event.current_kf, event.relative);
  for (const auto& [id, kf] : map.keyframes()) {
    if (const auto p = map.parent(id)) add_edge(*p, id, pre.at(*p).inverse() * pre.at(id));
  }
  for (const auto& [a, b] : map.loop_edges()) {
    if (std::pair<uint64_t, uint64_t>{a, b} == new_edge) continue;
    if (pre.count(a) == 0 || pre.count(b) == 0) continue;  // endpoint culled
    add_edge(a, b, pre.at(a).inverse() * pre.at(b));
  }
  for (const auto& [id, kf] : map.keyframes()) {
    for (const auto& [nid, w] : map.covisibility_neighbors(id, config.theta_ess)) {
      if (nid > id) add_edge(id, nid, pre.at(id).inverse() * pre.at(nid));
    }
  }
  const PoseGraphResult graph =
      pose_graph_optimize(nodes, edges, {event.matched_kf}, config.graph_lm);
  summary.graph_status = graph.status;

  for (const auto& [id, T_wc] : graph.poses) map.set_keyframe_pose(id, T_wc);
  for (const auto& [pid, p] : map.points()) {
    if (p.observations.empty()) continue;
    const uint64_t ref = p.observations.begin()->first;
    const Pose correction = graph.poses.at(ref) * nodes.at(ref).inverse();
    map.set_point_position(pid, correction * p.position);
  }

  ba.request_full_ba(map);
  return summary;
}

FullBaSnapshot snapshot_for_full_ba(const WorldMap& map) {
  FullBaSnapshot snap;
  bool first = true;
  for (const auto& [id, kf] : map.keyframes()) {
    snap.views.push_back({id, kf.T_wc.inverse(), first});
    snap.initial_T_wc.emplace(id, kf.T_wc);
    first = false;
  }
  for (const auto& [pid, p] : map.points()) {
    snap.points.push_back({pid, p.position});
    for (const auto& [kf_id, idx] : p.observations) {
      snap.observations.push_back({kf_id, pid, map.keyframe(kf_id).observations[idx].kp});
    }
  }
  return snap;
}

FullBaRun execute_full_ba(const FullBaSnapshot& snapshot, const Intrinsics& K,
                          const LmConfig& config, const std::atomic<bool>* abort) {
  IterationLog log;
  const BaSolution sol = full_ba_snapshot(snapshot.views, snapshot.points, snapshot.observations,
                                          K, config, abort, &log);
  FullBaRun run;
  run.initial_T_wc = snapshot.initial_T_wc;
  run.status = sol.status;
  run.iterations = static_cast<int>(log.size());
  if (sol.status != SolveStatus::Aborted) {
    for (const auto& [id, T_cw] : sol.poses) run.optimized_T_wc.emplace(id, T_cw.inverse());
    run.optimized_points = sol.points;
  }
  return run;
}

MergeSummary merge_full_ba(WorldMap& map, const FullBaRun& run) {
  MergeSummary summary;
  std::map<uint64_t, Pose> before;
  for (const auto& [id, kf] : map.keyframes()) before.emplace(id, kf.T_wc);

  for (const auto& [id, T_wc] : run.optimized_T_wc) {
    if (!map.has_keyframe(id)) continue;
    map.set_keyframe_pose(id, T_wc);
    ++summary.keyframes_updated;
  }
  // Keyframes inserted during the BA follow their nearest snapshotted
  // ancestor's correction.
  for (const auto& [id, pose] : before) {
    if (run.initial_T_wc.count(id) != 0) continue;
    uint64_t ancestor = id;
    while (run.initial_T_wc.count(ancestor) == 0) {
      const auto p = map.parent(ancestor);
      if (!p) break;
      ancestor = *p;
    }
    if (run.initial_T_wc.count(ancestor) == 0) continue;  // detached; leave as-is
    const Pose anc_new = run.optimized_T_wc.count(ancestor) != 0
                             ? run.optimized_T_wc.at(ancestor)
                             : before.at(ancestor);
    const Pose correction = anc_new * run.initial_T_wc.at(ancestor).inverse();
    map.set_keyframe_pose(id, correction * pose);
    ++summary.keyframes_propagated;
  }

  for (const auto& [pid, p] : map.points()) {
    const auto it = run.optimized_points.find(pid);
    if (it != run.optimized_points.end()) {
      map.set_point_position(pid, it->second);
      ++summary.points_updated;
      continue;
    }
    if (p.observations.empty()) continue;
    const uint64_t ref = p.observations.begin()->first;
    const Pose correction = map.keyframe(ref).T_wc * before.at(ref).inverse();
    map.set_point_position(pid, correction * p.position);
    ++summary.points_propagated;
  }
  return summary;
}

// --- System ----------------------------------------------------------------

System::System(PipelineConfig config, Vocabulary vocab, RunMode mode, bool deterministic)
    : config_(std::move(config)),
      vocab_(std::move(vocab)),
      mode_(mode),
      deterministic_(deterministic),
      detector_(config_.loop) {
  config_.K.validate();
  vocab_blob_ = vocab_.serialize();
  state_.mode = mode_;
  if (!deterministic_) {
    mapper_thread_ = std::thread(&System::mapper_loop, this);
    closer_thread_ = std::thread(&System::closer_loop, this);
  }
}

System::~System() { finish(); }

void System::load_map(LoadedMap loaded) {
  std::unique_lock lock(map_mu_);
  vocab_ = Vocabulary::deserialize(loaded.vocab_blob);
  vocab_blob_ = std::move(loaded.vocab_blob);
  map_ = std::move(loaded.map);
  bootstrapped_ = !map_.keyframes().empty();
  state_.status = TrackStatus::Lost;  // relocalize into the loaded map
  // BoW vectors are derived data and not serialized; rebuild them.
  for (const auto& [id, kf] : map_.keyframes()) {
    BowVector bow = bow_vector(frame_descriptors(kf.observations), vocab_);
    map_.set_bow(id, bow);
    db_.insert(id, std::move(bow));
  }
}

void System::bootstrap_from(const Frame& frame, FrameRecord& record) {
  std::unique_lock lock(map_mu_);
  std::optional<WorldMap> map = bootstrap(frame, config_.K);
  if (!map) return;
  map_ = std::move(*map);
  bootstrapped_ = true;
  const uint64_t kf = map_.root();
  const BowVector bow = bow_vector(frame_descriptors(map_.keyframe(kf).observations), vocab_);
  map_.set_bow(kf, bow);
  db_.insert(kf, bow);
  kf_time_.emplace(kf, frame.timestamp);

  state_.status = TrackStatus::Ok;
  state_.velocity = Pose();
  state_.last_T_wc = Pose();
  state_.have_last = true;
  state_.last_frame = frame;
  frames_since_kf_ = 0;

  record.status = TrackStatus::Ok;
  record.keyframe = true;
  record.inliers = static_cast<int>(map_.points().size());
  anchored_.push_back({frame.timestamp, kf, Pose()});
}

FrameRecord System::process_frame(const Frame& frame) {
  FrameRecord record;
  record.index = frame_count_++;
  record.timestamp = frame.timestamp;
  record.status = TrackStatus::Lost;

  if (!bootstrapped_) {
    if (mode_ == RunMode::Mapping) {
      const double t0 = now_ms();
      bootstrap_from(frame, record);
      log_task(frame.timestamp, "keyframe_insertion", now_ms() - t0, record.keyframe ? 1 : 0);
    }
    return record;
  }

  TrackResult tracked;
  const double t0 = now_ms();
  {
    std::shared_lock lock(map_mu_);
    tracked = track_frame(state_, map_, vocab_, frame, config_);
  }
  log_task(frame.timestamp, "local_map_tracking", now_ms() - t0, tracked.inliers);

  record.status = tracked.status;
  record.T_wc = tracked.T_wc;
  record.inliers = tracked.inliers;
  record.tracked_close = tracked.tracked_close;
  record.creatable_close = tracked.creatable_close;
  if (tracked.status != TrackStatus::Ok) return record;

  anchored_.push_back(
      {frame.timestamp, tracked.reference_kf, tracked.reference_T_wc.inverse() * tracked.T_wc});
  ++frames_since_kf_;

  if (mode_ == RunMode::Mapping &&
      need_new_keyframe(tracked.tracked_close, tracked.creatable_close, frames_since_kf_,
                        tracked.tracked_total, config_.keyframe_policy)) {
    record.keyframe = true;
    frames_since_kf_ = 0;
    KeyframeRequest request{frame.timestamp, tracked.T_wc, frame.observations};
    for (size_t i = 0; i < request.observations.size(); ++i) {
      request.observations[i].point_id = tracked.matches[i];
    }
    if (deterministic_) {
      mapper_step(request);
      run_pending_ba();
    } else {
      std::unique_lock lock(queue_mu_);
      queue_push_cv_.wait(lock, [this] {
        return kf_queue_.size() < config_.queue_capacity || stopping_.load();
      });
      if (!stopping_.load()) {
        kf_queue_.push_back(std::move(request));
        queue_pop_cv_.notify_one();
      }
    }
  }
  return record;
}

void System::mapper_step(const KeyframeRequest& request) {
  MappingSummary summary;
  const double t0 = now_ms();
  {
    std::unique_lock lock(map_mu_);
    summary = local_mapping_step(map_, db_, vocab_, request, config_);
    kf_time_.emplace(summary.kf_id, request.timestamp);
    for (const CullAnchor& a : summary.culled_keyframes) {
      cull_anchors_[a.culled] = {a.parent, a.relative};
      kf_time_.erase(a.culled);
    }
  }
  log_task(request.timestamp, "keyframe_insertion", now_ms() - t0,
           summary.points_close + summary.points_triangulated);
  if (deterministic_) {
    closer_step(summary.kf_id);
  } else {
    std::unique_lock lock(closer_mu_);
    closer_queue_.push_back(summary.kf_id);
    closer_cv_.notify_one();
  }
}

void System::closer_step(uint64_t kf_id) {
  if (!config_.enable_loop_closing) return;
  const double t0 = now_ms();
  std::vector<uint64_t> candidates;
  double kf_ts = 0.0;
  {
    std::shared_lock lock(map_mu_);
    if (!map_.has_keyframe(kf_id)) return;
    if (const auto it = kf_time_.find(kf_id); it != kf_time_.end()) kf_ts = it->second;
    std::set<uint64_t> covisible{kf_id};
    for (const auto& [nid, w] : map_.covisibility_neighbors(kf_id, 1)) covisible.insert(nid);
    const auto group_of = [this](uint64_t id) {
      std::set<uint64_t> group{id};
      if (map_.has_keyframe(id)) {
        for (const auto& [nid, w] : map_.covisibility_neighbors(id, 1)) group.insert(nid);
      }
      return group;
    };
    candidates = detector_.detect(kf_id, map_.keyframe(kf_id).bow, covisible, db_, group_of);
  }
  log_task(kf_ts, "database_query", now_ms() - t0, static_cast<int64_t>(candidates.size()));
  if (candidates.empty()) return;

  // The controller request is recorded under the map lock and forwarded after
  // releasing it, keeping the map -> ba lock order for the snapshot.
  struct RecordBa : FullBaController {
    bool requested = false;
    void request_full_ba(const WorldMap&) override { requested = true; }
  };
  RecordBa record;
  {
    std::unique_lock lock(map_mu_);
    for (uint64_t candidate : candidates) {
      const double t1 = now_ms();
      const std::optional<LoopEvent> event =
          validate_loop_candidate(map_, kf_id, candidate, config_);
      log_task(0.0, "se3_estimation", now_ms() - t1, event ? event->inliers : 0);
      if (!event) continue;
      const double t2 = now_ms();
      const CloseLoopSummary summary = close_loop(map_, *event, record, config_);
      log_task(0.0, "essential_graph", now_ms() - t2, summary.fused_points);
      detector_.reset();
      break;
    }
  }
  if (record.requested) request_full_ba(map_);
}

void System::request_full_ba(const WorldMap&) {
  {
    std::unique_lock lock(ba_mu_);
    if (deterministic_) {
      det_ba_pending_ = true;
      return;
    }
    if (ba_running_) {
      ba_abort_->store(true);
      ba_relaunch_ = true;
      return;
    }
  }
  FullBaSnapshot snapshot;
  {
    std::shared_lock lock(map_mu_);
    snapshot = snapshot_for_full_ba(map_);
  }
  if (snapshot.views.size() < 2) return;
  std::unique_lock lock(ba_mu_);
  if (ba_running_) {  // raced with a relaunch
    ba_abort_->store(true);
    ba_relaunch_ = true;
    return;
  }
  start_ba_thread(std::move(snapshot));
}

void System::start_ba_thread(FullBaSnapshot snapshot) {
  // ba_mu_ held by the caller; any previous runner is already joined.
  ba_abort_ = std::make_shared<std::atomic<bool>>(false);
  if (abort_next_ba_) {
    abort_next_ba_ = false;
    ba_abort_->store(true);
    ba_relaunch_ = true;
  }
  ba_running_ = true;
  ba_done_ = false;
  ++ba_stats_.launches;
  ba_thread_ = std::thread(
      [this, snap = std::move(snapshot), abort = ba_abort_] {
        FullBaRun run = execute_full_ba(snap, config_.K, config_.full_lm, abort.get());
        {
          std::unique_lock lock(ba_mu_);
          ba_result_ = std::move(run);
          ba_done_ = true;
        }
        ba_cv_.notify_all();
      });
}

bool System::collect_finished_ba() {
  FullBaRun run;
  bool relaunch = false;
  {
    std::unique_lock lock(ba_mu_);
    if (!ba_done_) return false;
    ba_thread_.join();
    run = std::move(*ba_result_);
    ba_result_.reset();
    ba_done_ = false;
    ba_running_ = false;
    relaunch = ba_relaunch_;
    ba_relaunch_ = false;
    if (run.status == SolveStatus::Aborted) ++ba_stats_.aborts;
  }
  if (run.status != SolveStatus::Aborted) {
    const double t0 = now_ms();
    MergeSummary merged;
    {
      std::unique_lock lock(map_mu_);
      merged = merge_full_ba(map_, run);
    }
    log_task(0.0, "full_ba_merge", now_ms() - t0,
             merged.keyframes_updated + merged.keyframes_propagated);
    std::unique_lock lock(ba_mu_);
    ++ba_stats_.merges;
  }
  if (relaunch) {
    std::shared_lock map_lock(map_mu_);
    std::unique_lock lock(ba_mu_);
    start_ba_thread(snapshot_for_full_ba(map_));
  }
  return true;
}

void System::run_pending_ba() {
  bool pending;
  {
    std::unique_lock lock(ba_mu_);
    pending = det_ba_pending_;
    det_ba_pending_ = false;
  }
  if (!pending) return;
  for (int attempt = 0; attempt < 2; ++attempt) {
    FullBaSnapshot snapshot;
    {
      std::shared_lock lock(map_mu_);
      snapshot = snapshot_for_full_ba(map_);
    }
    if (snapshot.views.size() < 2) return;
    {
      std::unique_lock lock(ba_mu_);
      ++ba_stats_.launches;
    }
    const double t0 = now_ms();
    const FullBaRun run = execute_full_ba(snapshot, config_.K, config_.full_lm, ba_abort_.get());
    log_task(0.0, "full_ba", now_ms() - t0, run.iterations);
    if (run.status == SolveStatus::Aborted) {
      std::unique_lock lock(ba_mu_);
      ++ba_stats_.aborts;
      ba_abort_->store(false);
      continue;  // relaunch exactly once
    }
    MergeSummary merged;
    {
      std::unique_lock lock(map_mu_);
      merged = merge_full_ba(map_, run);
    }
    log_task(0.0, "full_ba_merge", 0.0, merged.keyframes_updated + merged.keyframes_propagated);
    std::unique_lock lock(ba_mu_);
    ++ba_stats_.merges;
    return;
  }
}

void System::raise_full_ba_abort() {
  std::unique_lock lock(ba_mu_);
  if (deterministic_) {
    ba_abort_->store(true);
    return;
  }
  if (ba_running_) {
    ba_abort_->store(true);
    ba_relaunch_ = true;
  } else {
    abort_next_ba_ = true;
  }
}

void System::finish() {
  if (finished_) return;
  finished_ = true;
  if (deterministic_) {
    run_pending_ba();
    return;
  }
  stopping_.store(true);
  queue_pop_cv_.notify_all();
  queue_push_cv_.notify_all();
  if (mapper_thread_.joinable()) mapper_thread_.join();
  closer_stop_.store(true);
  closer_cv_.notify_all();
  if (closer_thread_.joinable()) closer_thread_.join();
  for (;;) {
    {
      std::unique_lock lock(ba_mu_);
      if (!ba_running_ && !ba_done_) break;
      ba_cv_.wait(lock, [this] { return ba_done_; });
    }
    collect_finished_ba();
  }
}

void System::mapper_loop() {
  for (;;) {
    KeyframeRequest request;
    {
      std::unique_lock lock(queue_mu_);
      queue_pop_cv_.wait(lock, [this] { return !kf_queue_.empty() || stopping_.load(); });
      if (kf_queue_.empty()) break;
      request = std::move(kf_queue_.front());
      kf_queue_.pop_front();
    }
    queue_push_cv_.notify_one();
    mapper_step(request);
  }
}

void System::closer_loop() {
  for (;;) {
    uint64_t kf_id = 0;
    bool have = false;
    {
      std::unique_lock lock(closer_mu_);
      closer_cv_.wait_for(lock, std::chrono::milliseconds(20), [this] {
        return !closer_queue_.empty() || closer_stop_.load();
      });
      if (!closer_queue_.empty()) {
        kf_id = closer_queue_.front();
        closer_queue_.pop_front();
        have = true;
      } else if (closer_stop_.load()) {
        break;
      }
    }
    if (have) closer_step(kf_id);
    collect_finished_ba();
  }
}

Pose System::effective_kf_pose(uint64_t kf_id) const {
  if (map_.has_keyframe(kf_id)) return map_.keyframe(kf_id).T_wc;
  const auto& [parent, relative] = cull_anchors_.at(kf_id);
  return effective_kf_pose(parent) * relative;
}

Trajectory System::keyframe_trajectory() const {
  std::shared_lock lock(map_mu_);
  Trajectory out;
  std::vector<std::pair<double, uint64_t>> order;
  for (const auto& [id, ts] : kf_time_) order.emplace_back(ts, id);
  std::sort(order.begin(), order.end());
  for (const auto& [ts, id] : order) {
    if (map_.has_keyframe(id)) out.push_back({ts, map_.keyframe(id).T_wc});
  }
  return out;
}

Trajectory System::frame_trajectory() const {
  std::shared_lock lock(map_mu_);
  Trajectory out;
  out.reserve(anchored_.size());
  for (const AnchoredFrame& f : anchored_) {
    out.push_back({f.timestamp, effective_kf_pose(f.reference_kf) * f.relative});
  }
  return out;
}

std::string System::serialize_map_bytes() const {
  std::shared_lock lock(map_mu_);
  return serialize_map(map_, vocab_blob_);
}

FullBaStats System::full_ba_stats() const {
  std::unique_lock lock(ba_mu_);
  return ba_stats_;
}

void System::log_task(double timestamp, const char* task, double ms, int64_t value) {
  std::unique_lock lock(log_mu_);
  log_.push_back({timestamp, task, ms, value});
}

}  // namespace kslam
