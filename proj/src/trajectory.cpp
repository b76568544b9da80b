#include "kslam/trajectory.h"

#include <Eigen/Geometry>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "kslam/place_recognition.h"

namespace kslam {

namespace {

void put_double(std::string& out, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

[[noreturn]] void parse_fail(const char* format, size_t line, const std::string& what) {
  std::ostringstream msg;
  msg << format << " parse error at line " << line << ": " << what;
  throw std::runtime_error(msg.str());
}

/// Deterministic sign: the leading nonzero of (w, x, y, z) is positive.
Eigen::Quaterniond canonicalize_sign(Eigen::Quaterniond q) {
  const Eigen::Vector4d c = q.coeffs();  // (x, y, z, w)
  const double lead[4] = {c(3), c(0), c(1), c(2)};
  for (double v : lead) {
    if (v > 0.0) break;
    if (v < 0.0) {
      q.coeffs() = -q.coeffs();
      break;
    }
  }
  return q;
}

/// Snap each coefficient to a 2^-50 grid (exact in doubles for |x| <= 2).
/// The grid step dwarfs conversion roundoff, so the write/read round trip
/// below settles instead of wandering ulp by ulp.
Eigen::Quaterniond lattice(Eigen::Quaterniond q) {
  for (int i = 0; i < 4; ++i) {
    q.coeffs()[i] = std::round(q.coeffs()[i] * 0x1p50) * 0x1p-50;
  }
  return canonicalize_sign(q);
}

Eigen::Quaterniond extract(const Eigen::Matrix3d& R) {
  return lattice(Eigen::Quaterniond(R).normalized());
}

using QuatKey = std::array<unsigned char, 4 * sizeof(double)>;

QuatKey key_of(const Eigen::Quaterniond& q) {
  QuatKey k;
  std::memcpy(k.data(), q.coeffs().data(), k.size());
  return k;
}

/// Canonical quaternion of a rotation. Writing q, parsing it back (%.17g is
/// exact), normalizing, and converting to a matrix must reproduce the same
/// bytes on the next write, so the value returned here has to be stable
/// under q -> extract(matrix(normalize(q))). That map reaches a short cycle
/// within a few passes (the lattice quenches roundoff noise); the orbit of
/// any cycle member stays inside the cycle, so picking the bitwise-smallest
/// member gives the same answer before and after a round trip.
Eigen::Quaterniond canonical_quaternion(const Eigen::Matrix3d& R) {
  Eigen::Quaterniond q = extract(R);
  std::vector<std::pair<QuatKey, Eigen::Quaterniond>> seen;
  for (int pass = 0; pass < 64; ++pass) {
    const QuatKey key = key_of(q);
    for (size_t k = 0; k < seen.size(); ++k) {
      if (seen[k].first == key) {
        size_t best = k;
        for (size_t m = k + 1; m < seen.size(); ++m) {
          if (seen[m].first < seen[best].first) best = m;
        }
        return seen[best].second;
      }
    }
    seen.emplace_back(key, q);
    q = extract(q.normalized().toRotationMatrix());
  }
  return q;
}

void check_increasing(const Trajectory& t, const char* format, size_t line) {
  if (t.size() >= 2 && !(t.back().timestamp > t[t.size() - 2].timestamp)) {
    parse_fail(format, line, "timestamps must be strictly increasing");
  }
}

}  // namespace

std::string to_tum(const Trajectory& trajectory) {
  std::string out;
  for (const StampedPose& sp : trajectory) {
    const Eigen::Quaterniond q = canonical_quaternion(sp.pose.rotation());
    const Eigen::Vector3d& t = sp.pose.translation();
    put_double(out, sp.timestamp);
    for (double v : {t.x(), t.y(), t.z(), q.x(), q.y(), q.z(), q.w()}) {
      out += ' ';
      put_double(out, v);
    }
    out += '\n';
  }
  return out;
}

Trajectory from_tum(const std::string& text) {
  Trajectory out;
  std::istringstream in(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    double ts, tx, ty, tz, qx, qy, qz, qw;
    if (!(ls >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw)) {
      parse_fail("TUM", line_no, "expected 8 numeric fields");
    }
    std::string extra;
    if (ls >> extra) parse_fail("TUM", line_no, "trailing fields");
    Eigen::Quaterniond q(qw, qx, qy, qz);
    if (!(q.norm() > 1e-12)) parse_fail("TUM", line_no, "zero quaternion");
    // Unconditional: canonical_quaternion assumes the stored rotation is
    // exactly rot(normalize(q)) when it re-derives the written bytes.
    q.normalize();
    out.push_back({ts, Pose(q.toRotationMatrix(), Eigen::Vector3d(tx, ty, tz))});
    check_increasing(out, "TUM", line_no);
  }
  return out;
}

std::string to_kitti(const Trajectory& trajectory) {
  std::string out;
  for (const StampedPose& sp : trajectory) {
    const Eigen::Matrix3d& R = sp.pose.rotation();
    const Eigen::Vector3d& t = sp.pose.translation();
    bool first = true;
    for (int r = 0; r < 3; ++r) {
      for (double v : {R(r, 0), R(r, 1), R(r, 2), t(r)}) {
        if (!first) out += ' ';
        put_double(out, v);
        first = false;
      }
    }
    out += '\n';
  }
  return out;
}

Trajectory from_kitti(const std::string& text) {
  Trajectory out;
  std::istringstream in(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    double v[12];
    for (int i = 0; i < 12; ++i) {
      if (!(ls >> v[i])) parse_fail("KITTI", line_no, "expected 12 numeric fields");
    }
    std::string extra;
    if (ls >> extra) parse_fail("KITTI", line_no, "trailing fields");
    Eigen::Matrix3d R;
    R << v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10];
    out.push_back({double(out.size()), Pose(R, Eigen::Vector3d(v[3], v[7], v[11]))});
  }
  return out;
}

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << bytes;
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace

void write_tum(const std::string& path, const Trajectory& t) { write_file(path, to_tum(t)); }
Trajectory read_tum(const std::string& path) { return from_tum(read_file(path)); }
void write_kitti(const std::string& path, const Trajectory& t) {
  write_file(path, to_kitti(t));
}
Trajectory read_kitti(const std::string& path) { return from_kitti(read_file(path)); }

namespace {

/// Greedy injective nearest-timestamp association within the tolerance.
std::vector<std::pair<size_t, size_t>> associate(const Trajectory& a, const Trajectory& b) {
  std::vector<std::pair<size_t, size_t>> pairs;
  size_t j = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    while (j + 1 < b.size() && std::abs(b[j + 1].timestamp - a[i].timestamp) <
                                   std::abs(b[j].timestamp - a[i].timestamp)) {
      ++j;
    }
    if (j < b.size() && std::abs(b[j].timestamp - a[i].timestamp) <= kAssociationTolerance) {
      pairs.emplace_back(i, j);
      ++j;  // injective: each truth pose matches at most once
      if (j >= b.size()) break;
    }
  }
  return pairs;
}

}  // namespace

double ate_rmse(const Trajectory& estimate, const Trajectory& truth, bool align) {
  const auto pairs = associate(estimate, truth);
  if (pairs.empty()) throw std::runtime_error("ate_rmse: no associable pose pairs");

  std::vector<Eigen::Vector3d> est, gt;
  est.reserve(pairs.size());
  gt.reserve(pairs.size());
  for (const auto& [i, j] : pairs) {
    est.push_back(estimate[i].pose.translation());
    gt.push_back(truth[j].pose.translation());
  }

  Pose fit;  // identity when align is off
  if (align) {
    if (pairs.size() < 3) {
      throw std::runtime_error("ate_rmse: need at least 3 pairs for rigid alignment");
    }
    fit = horn_align(est, gt);
  }

  double sum = 0.0;
  for (size_t k = 0; k < est.size(); ++k) {
    sum += (gt[k] - fit * est[k]).squaredNorm();
  }
  return std::sqrt(sum / double(est.size()));
}

RelErrors kitti_rel_errors(const Trajectory& estimate, const Trajectory& truth) {
  const auto pairs = associate(estimate, truth);
  if (pairs.size() < 2) throw std::runtime_error("kitti_rel_errors: no associable pose pairs");

  // Cumulative ground-truth path length at each associated pose.
  std::vector<double> dist(pairs.size(), 0.0);
  for (size_t k = 1; k < pairs.size(); ++k) {
    const Eigen::Vector3d step = truth[pairs[k].second].pose.translation() -
                                 truth[pairs[k - 1].second].pose.translation();
    dist[k] = dist[k - 1] + step.norm();
  }

  static constexpr double kLengths[] = {100.0, 200.0, 300.0, 400.0,
                                        500.0, 600.0, 700.0, 800.0};
  RelErrors out;
  double t_sum = 0.0;
  double r_sum = 0.0;
  for (size_t start = 0; start < pairs.size(); ++start) {
    size_t end = start;
    for (double length : kLengths) {
      while (end < pairs.size() && dist[end] - dist[start] < length) ++end;
      if (end >= pairs.size()) break;
      const Pose gt_rel = truth[pairs[start].second].pose.inverse() *
                          truth[pairs[end].second].pose;
      const Pose est_rel = estimate[pairs[start].first].pose.inverse() *
                           estimate[pairs[end].first].pose;
      const Pose err = gt_rel.inverse() * est_rel;
      t_sum += err.translation().norm() / length * 100.0;  // percent
      r_sum += rotation_angle(err.rotation()) * (180.0 / M_PI) / length * 100.0;
      out.samples += 1;
    }
  }
  if (out.samples == 0) {
    throw std::runtime_error("kitti_rel_errors: path shorter than 100 m");
  }
  out.t_rel = t_sum / double(out.samples);
  out.r_rel = r_sum / double(out.samples);
  return out;
}

}  // namespace kslam
