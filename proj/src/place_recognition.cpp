#include "kslam/place_recognition.h"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <mutex>
#include <random>
#include <stdexcept>

#include "kslam/motion_ba.h"

namespace kslam {

void KeyframeDatabase::insert(uint64_t kf_id, const BowVector& v) {
  std::unique_lock lock(mutex_);
  auto [it, fresh] = vectors_.try_emplace(kf_id, v);
  if (!fresh) {
    for (const auto& [word, weight] : it->second) inverted_[word].erase(kf_id);
    it->second = v;
  }
  for (const auto& [word, weight] : v) inverted_[word].insert(kf_id);
}

void KeyframeDatabase::erase(uint64_t kf_id) {
  std::unique_lock lock(mutex_);
  const auto it = vectors_.find(kf_id);
  if (it == vectors_.end()) return;
  for (const auto& [word, weight] : it->second) {
    const auto inv = inverted_.find(word);
    if (inv != inverted_.end()) {
      inv->second.erase(kf_id);
      if (inv->second.empty()) inverted_.erase(inv);
    }
  }
  vectors_.erase(it);
}

std::optional<BowVector> KeyframeDatabase::find(uint64_t kf_id) const {
  std::shared_lock lock(mutex_);
  const auto it = vectors_.find(kf_id);
  if (it == vectors_.end()) return std::nullopt;
  return it->second;
}

size_t KeyframeDatabase::size() const {
  std::shared_lock lock(mutex_);
  return vectors_.size();
}

std::vector<std::pair<uint64_t, double>> KeyframeDatabase::query(
    const BowVector& v, const std::set<uint64_t>& exclude) const {
  std::shared_lock lock(mutex_);
  std::set<uint64_t> sharing;
  for (const auto& [word, weight] : v) {
    const auto it = inverted_.find(word);
    if (it == inverted_.end()) continue;
    for (uint64_t kf : it->second) {
      if (!exclude.count(kf)) sharing.insert(kf);
    }
  }
  std::vector<std::pair<uint64_t, double>> out;
  out.reserve(sharing.size());
  for (uint64_t kf : sharing) out.emplace_back(kf, bow_score(v, vectors_.at(kf)));
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  return out;
}

std::vector<uint64_t> LoopDetector::detect(
    uint64_t query_kf, const BowVector& v, const std::set<uint64_t>& covisible,
    const KeyframeDatabase& db, const std::function<std::set<uint64_t>(uint64_t)>& group_of) {
  double min_score = 1.0;
  for (uint64_t neighbor : covisible) {
    if (const auto w = db.find(neighbor)) min_score = std::min(min_score, bow_score(v, *w));
  }

  std::set<uint64_t> exclude(covisible);
  exclude.insert(query_kf);
  const auto hits = db.query(v, exclude);
  const double gate = config_.alpha * min_score;

  std::vector<uint64_t> accepted;
  std::vector<Group> next;
  for (const auto& [candidate, score] : hits) {
    if (score < gate) continue;
    Group g;
    g.members = group_of ? group_of(candidate) : std::set<uint64_t>{};
    g.members.insert(candidate);
    for (const Group& prev : groups_) {
      bool overlaps = std::any_of(g.members.begin(), g.members.end(),
                                  [&](uint64_t m) { return prev.members.count(m) > 0; });
      if (overlaps) g.streak = std::max(g.streak, prev.streak);
    }
    g.streak += 1;
    if (g.streak >= config_.consistency_required) accepted.push_back(candidate);
    next.push_back(std::move(g));
  }
  groups_ = std::move(next);  // a query with no gated hits resets every streak
  return accepted;
}

Pose horn_align(const std::vector<Eigen::Vector3d>& src,
                const std::vector<Eigen::Vector3d>& dst) {
  if (src.size() != dst.size()) throw std::invalid_argument("horn_align: size mismatch");
  if (src.size() < 3) throw std::invalid_argument("horn_align: need at least 3 pairs");

  Eigen::Vector3d cs = Eigen::Vector3d::Zero();
  Eigen::Vector3d cd = Eigen::Vector3d::Zero();
  for (size_t i = 0; i < src.size(); ++i) {
    cs += src[i];
    cd += dst[i];
  }
  cs /= double(src.size());
  cd /= double(dst.size());

  Eigen::Matrix3d S = Eigen::Matrix3d::Zero();
  for (size_t i = 0; i < src.size(); ++i) {
    S += (src[i] - cs) * (dst[i] - cd).transpose();
  }

  Eigen::Matrix4d N;
  const double sxx = S(0, 0), sxy = S(0, 1), sxz = S(0, 2);
  const double syx = S(1, 0), syy = S(1, 1), syz = S(1, 2);
  const double szx = S(2, 0), szy = S(2, 1), szz = S(2, 2);
  N << sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,  //
      syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,   //
      szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,  //
      sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz;

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(N);
  const Eigen::Vector4d q = eig.eigenvectors().col(3);  // most positive eigenvalue
  const Eigen::Matrix3d R =
      Eigen::Quaterniond(q(0), q(1), q(2), q(3)).normalized().toRotationMatrix();
  return Pose(R, cd - R * cs);
}

namespace {

bool degenerate_triplet(const Eigen::Vector3d& a, const Eigen::Vector3d& b,
                        const Eigen::Vector3d& c) {
  const Eigen::Vector3d u = b - a;
  const Eigen::Vector3d v = c - a;
  const double un = u.norm();
  const double vn = v.norm();
  if (un <= 1e-12 || vn <= 1e-12) return true;
  return u.cross(v).norm() <= 1e-8 * un * vn;
}

std::vector<int> inlier_set(const std::vector<Eigen::Vector3d>& src,
                            const std::vector<Eigen::Vector3d>& dst, const Pose& T,
                            double threshold) {
  std::vector<int> inliers;
  for (size_t i = 0; i < src.size(); ++i) {
    if ((dst[i] - T * src[i]).norm() <= threshold) inliers.push_back(int(i));
  }
  return inliers;
}

}  // namespace

std::optional<Se3Estimate> estimate_se3(const std::vector<Eigen::Vector3d>& src,
                                        const std::vector<Eigen::Vector3d>& dst,
                                        const Se3RansacConfig& config) {
  if (src.size() != dst.size()) throw std::invalid_argument("estimate_se3: size mismatch");
  const int n = int(src.size());
  if (n < 3) throw std::invalid_argument("estimate_se3: need at least 3 pairs");

  const int required = std::max(config.min_inliers, 3);
  std::mt19937_64 rng(config.seed);

  std::vector<int> best_inliers;
  int attempts = config.max_iterations * 10;
  for (int it = 0; it < config.max_iterations && attempts > 0; --attempts) {
    const int i = int(rng() % uint64_t(n));
    const int j = int(rng() % uint64_t(n));
    const int k = int(rng() % uint64_t(n));
    if (i == j || j == k || i == k) continue;
    if (degenerate_triplet(src[size_t(i)], src[size_t(j)], src[size_t(k)]) ||
        degenerate_triplet(dst[size_t(i)], dst[size_t(j)], dst[size_t(k)])) {
      continue;  // resample
    }
    ++it;
    const Pose T = horn_align({src[size_t(i)], src[size_t(j)], src[size_t(k)]},
                              {dst[size_t(i)], dst[size_t(j)], dst[size_t(k)]});
    std::vector<int> inliers = inlier_set(src, dst, T, config.inlier_threshold);
    if (inliers.size() > best_inliers.size()) best_inliers = std::move(inliers);
  }
  if (int(best_inliers.size()) < required) return std::nullopt;

  std::vector<Eigen::Vector3d> s, d;
  s.reserve(best_inliers.size());
  d.reserve(best_inliers.size());
  for (int i : best_inliers) {
    s.push_back(src[size_t(i)]);
    d.push_back(dst[size_t(i)]);
  }
  const Pose refined = horn_align(s, d);
  std::vector<int> final_inliers = inlier_set(src, dst, refined, config.inlier_threshold);
  if (int(final_inliers.size()) < required) return std::nullopt;
  return Se3Estimate{refined, std::move(final_inliers)};
}

namespace {

struct CandidateMatch {
  int frame_idx;
  uint64_t point_id;
};

/// Mutual-best descriptor matching of frame observations against a
/// keyframe's map-point-linked observations.
std::vector<CandidateMatch> match_against_keyframe(const Frame& frame, const KeyFrame& kf,
                                                   const WorldMap& map,
                                                   const RelocalizeConfig& config) {
  struct Linked {
    uint64_t point_id;
    const Descriptor* descriptor;
  };
  std::vector<Linked> linked;
  for (const Observation& obs : kf.observations) {
    if (obs.point_id && map.has_point(*obs.point_id)) {
      linked.push_back({*obs.point_id, &obs.descriptor});
    }
  }
  if (linked.empty()) return {};

  // point id -> (hamming, frame idx), keeping the best frame observation.
  std::map<uint64_t, std::pair<int, int>> best_by_point;
  for (size_t f = 0; f < frame.observations.size(); ++f) {
    int best = 257, second = 257;
    size_t best_l = 0;
    for (size_t l = 0; l < linked.size(); ++l) {
      const int dist = hamming(frame.observations[f].descriptor, *linked[l].descriptor);
      if (dist < best) {
        second = best;
        best = dist;
        best_l = l;
      } else if (dist < second) {
        second = dist;
      }
    }
    if (best > config.max_hamming) continue;
    if (second <= 256 && double(best) > config.ratio * double(second)) continue;
    const uint64_t pid = linked[best_l].point_id;
    const auto it = best_by_point.find(pid);
    if (it == best_by_point.end() || best < it->second.first) {
      best_by_point[pid] = {best, int(f)};
    }
  }

  std::vector<CandidateMatch> matches;
  matches.reserve(best_by_point.size());
  for (const auto& [pid, entry] : best_by_point) matches.push_back({entry.second, pid});
  return matches;
}

}  // namespace

std::optional<Pose> relocalize(const Frame& frame, const WorldMap& map, const Vocabulary& vocab,
                               const Intrinsics& K, const RelocalizeConfig& config) {
  if (map.keyframes().empty() || frame.observations.empty()) return std::nullopt;

  std::vector<Descriptor> descriptors;
  descriptors.reserve(frame.observations.size());
  for (const Observation& obs : frame.observations) descriptors.push_back(obs.descriptor);
  const BowVector v = bow_vector(descriptors, vocab);

  std::vector<std::pair<uint64_t, double>> scored;
  for (const auto& [kf_id, kf] : map.keyframes()) {
    const double s = bow_score(v, kf.bow);
    if (s > 0.0) scored.emplace_back(kf_id, s);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (int(scored.size()) > config.max_candidates) scored.resize(size_t(config.max_candidates));

  for (const auto& [kf_id, score] : scored) {
    const auto matches = match_against_keyframe(frame, map.keyframe(kf_id), map, config);
    if (int(matches.size()) < config.min_matches) continue;

    // 3D-3D pairs from stereo keypoints: camera-frame depth vs. world point.
    std::vector<Eigen::Vector3d> cam, world;
    for (const CandidateMatch& m : matches) {
      const Observation& obs = frame.observations[size_t(m.frame_idx)];
      if (const auto* skp = std::get_if<StereoKeypoint>(&obs.kp)) {
        cam.push_back(back_project_stereo(*skp, K));
        world.push_back(map.point(m.point_id).position);
      }
    }
    if (int(cam.size()) < std::max(config.min_matches, 3)) continue;
    const auto estimate = estimate_se3(cam, world, config.ransac);
    if (!estimate) continue;

    std::vector<MotionBaMatch> ba_matches;
    ba_matches.reserve(matches.size());
    for (const CandidateMatch& m : matches) {
      ba_matches.push_back(
          {frame.observations[size_t(m.frame_idx)].kp, map.point(m.point_id).position});
    }
    if (int(ba_matches.size()) < 6) continue;
    const MotionBaResult refined =
        motion_only_ba(ba_matches, estimate->transform.inverse(), K);
    if (refined.inlier_count >= config.min_inliers) return refined.T_cw.inverse();
  }
  return std::nullopt;
}

}  // namespace kslam
