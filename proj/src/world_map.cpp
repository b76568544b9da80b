#include "kslam/world_map.h"

#include <openssl/evp.h>

#include <cstdio>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace kslam {

void WorldMap::bump_covis(uint64_t a, uint64_t b, int delta) {
  auto bump = [&](uint64_t x, uint64_t y) {
    int& w = covis_[x][y];
    w += delta;
    if (w <= 0) {
      covis_[x].erase(y);
      if (covis_[x].empty()) covis_.erase(x);
    }
  };
  bump(a, b);
  bump(b, a);
}

uint64_t WorldMap::add_keyframe(const Pose& T_wc, std::vector<Observation> observations) {
  const uint64_t id = next_kf_id_++;
  ++seq_;
  KeyFrame& kf = keyframes_[id];
  kf.id = id;
  kf.T_wc = T_wc;
  kf.observations = std::move(observations);

  for (size_t i = 0; i < kf.observations.size(); ++i) {
    if (kf.observations[i].point_id) link(*kf.observations[i].point_id, id, int(i));
  }

  if (keyframes_.size() == 1) {
    root_ = id;
    return id;
  }

  // Spanning-tree parent: the keyframe sharing the most points; ties go to
  // the smaller id, total isolation to the most recent predecessor.
  uint64_t best = 0;
  int best_weight = 0;
  if (auto it = covis_.find(id); it != covis_.end()) {
    for (const auto& [other, w] : it->second) {
      if (w > best_weight) {
        best_weight = w;
        best = other;
      }
    }
  }
  if (best_weight == 0) {
    best = std::prev(keyframes_.find(id))->first;
  }
  parent_[id] = best;
  return id;
}

uint64_t WorldMap::create_point(const Eigen::Vector3d& position, Provenance provenance,
                                const Descriptor& descriptor) {
  const uint64_t id = next_point_id_++;
  MapPoint& p = points_[id];
  p.id = id;
  p.position = position;
  p.provenance = provenance;
  p.descriptor = descriptor;
  p.created_seq = seq_;
  return id;
}

void WorldMap::link(uint64_t point_id, uint64_t kf_id, int obs_index) {
  MapPoint& p = points_.at(point_id);
  KeyFrame& kf = keyframes_.at(kf_id);
  Observation& obs = kf.observations.at(size_t(obs_index));
  if (obs.point_id && *obs.point_id != point_id) {
    throw std::invalid_argument("WorldMap::link: observation slot already linked");
  }
  if (auto it = p.observations.find(kf_id); it != p.observations.end()) {
    if (it->second != obs_index) {
      throw std::invalid_argument("WorldMap::link: keyframe already observes the point");
    }
    obs.point_id = point_id;
    return;  // idempotent
  }
  for (const auto& [other_kf, idx] : p.observations) bump_covis(kf_id, other_kf, 1);
  p.observations[kf_id] = obs_index;
  obs.point_id = point_id;
}

void WorldMap::unlink(uint64_t point_id, uint64_t kf_id) {
  MapPoint& p = points_.at(point_id);
  auto it = p.observations.find(kf_id);
  if (it == p.observations.end()) return;
  const int idx = it->second;
  p.observations.erase(it);
  for (const auto& [other_kf, oidx] : p.observations) bump_covis(kf_id, other_kf, -1);
  if (auto kit = keyframes_.find(kf_id); kit != keyframes_.end()) {
    kit->second.observations.at(size_t(idx)).point_id.reset();
  }
}

void WorldMap::remove_point(uint64_t point_id) {
  MapPoint& p = points_.at(point_id);
  while (!p.observations.empty()) unlink(point_id, p.observations.begin()->first);
  points_.erase(point_id);
}

std::vector<uint64_t> WorldMap::cull_map_points() {
  std::vector<uint64_t> removed;
  for (auto it = points_.begin(); it != points_.end();) {
    const MapPoint& p = it->second;
    const uint64_t age = seq_ - p.created_seq;
    const size_t required = p.provenance == Provenance::Close ? 2 : 3;
    if (age > 2 && p.observations.size() < required) {
      const uint64_t id = it->first;
      ++it;
      remove_point(id);
      removed.push_back(id);
    } else {
      ++it;
    }
  }
  return removed;
}

void WorldMap::fuse_points(uint64_t keep, uint64_t merge) {
  if (keep == merge) throw std::invalid_argument("WorldMap::fuse_points: keep == merge");
  MapPoint& k = points_.at(keep);
  const std::map<uint64_t, int> merge_obs = points_.at(merge).observations;
  for (const auto& [kf_id, idx] : merge_obs) {
    unlink(merge, kf_id);
    if (!k.observations.count(kf_id)) link(keep, kf_id, idx);
  }
  points_.erase(merge);
}

std::vector<uint64_t> WorldMap::cull_keyframes() {
  std::vector<uint64_t> candidates;
  for (const auto& [id, kf] : keyframes_) {
    if (id != root_) candidates.push_back(id);
  }

  std::vector<uint64_t> removed;
  for (uint64_t id : candidates) {
    const KeyFrame& kf = keyframes_.at(id);
    int linked = 0;
    int redundant = 0;
    for (const Observation& obs : kf.observations) {
      if (!obs.point_id) continue;
      ++linked;
      const int octave = keypoint_octave(obs.kp);
      int better = 0;
      for (const auto& [okf, oidx] : points_.at(*obs.point_id).observations) {
        if (okf == id) continue;
        const Observation& other = keyframes_.at(okf).observations.at(size_t(oidx));
        if (keypoint_octave(other.kp) <= octave) ++better;
      }
      if (better >= 3) ++redundant;
    }
    if (linked == 0 || redundant < 0.9 * linked) continue;

    const uint64_t new_parent = parent_.at(id);
    for (auto& [child, par] : parent_) {
      if (par == id) par = new_parent;
    }
    parent_.erase(id);
    // Unlink all observations (copies: unlink mutates the keyframe).
    std::vector<uint64_t> pts;
    for (const Observation& obs : keyframes_.at(id).observations) {
      if (obs.point_id) pts.push_back(*obs.point_id);
    }
    for (uint64_t p : pts) unlink(p, id);
    covis_.erase(id);
    keyframes_.erase(id);
    redirects_[id] = new_parent;
    removed.push_back(id);
  }
  return removed;
}

std::map<uint64_t, int> WorldMap::covisibility_neighbors(uint64_t kf_id, int min_weight) const {
  std::map<uint64_t, int> out;
  if (auto it = covis_.find(kf_id); it != covis_.end()) {
    for (const auto& [other, w] : it->second) {
      if (w >= min_weight) out[other] = w;
    }
  }
  return out;
}

LocalWindow WorldMap::local_window(uint64_t kf_id) const {
  if (!keyframes_.count(kf_id)) {
    throw std::invalid_argument("WorldMap::local_window: unknown keyframe");
  }
  LocalWindow w;
  w.local.insert(kf_id);
  for (const auto& [other, weight] : covisibility_neighbors(kf_id)) w.local.insert(other);
  for (uint64_t id : w.local) {
    for (const Observation& obs : keyframes_.at(id).observations) {
      if (obs.point_id) w.points.insert(*obs.point_id);
    }
  }
  for (uint64_t pid : w.points) {
    for (const auto& [okf, idx] : points_.at(pid).observations) {
      if (!w.local.count(okf)) w.frontier.insert(okf);
    }
  }
  return w;
}

std::optional<uint64_t> WorldMap::parent(uint64_t kf_id) const {
  if (auto it = parent_.find(kf_id); it != parent_.end()) return it->second;
  return std::nullopt;
}

void WorldMap::add_loop_edge(uint64_t a, uint64_t b) {
  loop_edges_.insert({std::min(a, b), std::max(a, b)});
}

uint64_t WorldMap::resolve(uint64_t kf_id) const {
  while (true) {
    auto it = redirects_.find(kf_id);
    if (it == redirects_.end()) return kf_id;
    kf_id = it->second;
  }
}

bool WorldMap::links_symmetric() const {
  for (const auto& [kid, kf] : keyframes_) {
    for (size_t i = 0; i < kf.observations.size(); ++i) {
      const auto& pid = kf.observations[i].point_id;
      if (!pid) continue;
      auto pit = points_.find(*pid);
      if (pit == points_.end()) return false;
      auto oit = pit->second.observations.find(kid);
      if (oit == pit->second.observations.end() || oit->second != int(i)) return false;
    }
  }
  for (const auto& [pid, p] : points_) {
    for (const auto& [kid, idx] : p.observations) {
      auto kit = keyframes_.find(kid);
      if (kit == keyframes_.end()) return false;
      if (size_t(idx) >= kit->second.observations.size()) return false;
      const auto& link = kit->second.observations[size_t(idx)].point_id;
      if (!link || *link != pid) return false;
    }
  }
  return true;
}

// --- Serialization ----------------------------------------------------------

namespace {

void put_double(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

void put_pose(std::string& out, const Pose& p) {
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      out += ' ';
      put_double(out, p.rotation()(r, c));
    }
  }
  for (int i = 0; i < 3; ++i) {
    out += ' ';
    put_double(out, p.translation()(i));
  }
}

char provenance_code(Provenance p) {
  switch (p) {
    case Provenance::Close: return 'c';
    case Provenance::Far: return 'f';
    case Provenance::Mono: return 'm';
  }
  return '?';
}

Provenance provenance_from(char c) {
  switch (c) {
    case 'c': return Provenance::Close;
    case 'f': return Provenance::Far;
    case 'm': return Provenance::Mono;
  }
  throw std::runtime_error("map parse error: bad provenance code");
}

}  // namespace

struct MapSerializer {
  static std::string serialize(const WorldMap& m, const std::string& vocab_blob) {
    std::string out = "kslam-map v1\n";
    out += "vocab " + std::to_string(vocab_blob.size()) + "\n";
    out += vocab_blob;
    out += "\n";
    out += "counters " + std::to_string(m.next_kf_id_) + " " + std::to_string(m.next_point_id_) +
           " " + std::to_string(m.seq_) + " " + std::to_string(m.root_) + "\n";

    out += "keyframes " + std::to_string(m.keyframes_.size()) + "\n";
    for (const auto& [id, kf] : m.keyframes_) {
      out += "kf " + std::to_string(id);
      put_pose(out, kf.T_wc);
      auto pit = m.parent_.find(id);
      out += pit == m.parent_.end() ? " -" : " " + std::to_string(pit->second);
      out += " " + std::to_string(kf.observations.size()) + "\n";
      for (const Observation& obs : kf.observations) {
        if (const auto* s = std::get_if<StereoKeypoint>(&obs.kp)) {
          out += "o s ";
          put_double(out, s->uL);
          out += ' ';
          put_double(out, s->vL);
          out += ' ';
          put_double(out, s->uR);
          out += ' ';
          out += std::to_string(s->octave);
        } else {
          const auto& mk = std::get<MonoKeypoint>(obs.kp);
          out += "o m ";
          put_double(out, mk.uL);
          out += ' ';
          put_double(out, mk.vL);
          out += ' ';
          out += std::to_string(mk.octave);
        }
        out += ' ';
        out += to_hex(obs.descriptor);
        out += obs.point_id ? " " + std::to_string(*obs.point_id) : " -";
        out += "\n";
      }
    }

    out += "points " + std::to_string(m.points_.size()) + "\n";
    for (const auto& [id, p] : m.points_) {
      out += "pt " + std::to_string(id) + " ";
      put_double(out, p.position.x());
      out += ' ';
      put_double(out, p.position.y());
      out += ' ';
      put_double(out, p.position.z());
      out += ' ';
      out += provenance_code(p.provenance);
      out += " " + std::to_string(p.created_seq) + " " + to_hex(p.descriptor) + "\n";
    }

    out += "loops " + std::to_string(m.loop_edges_.size()) + "\n";
    for (const auto& [a, b] : m.loop_edges_) {
      out += "loop " + std::to_string(a) + " " + std::to_string(b) + "\n";
    }
    out += "redirects " + std::to_string(m.redirects_.size()) + "\n";
    for (const auto& [from, to] : m.redirects_) {
      out += "redirect " + std::to_string(from) + " " + std::to_string(to) + "\n";
    }
    out += "end\n";
    return out;
  }

  static LoadedMap deserialize(const std::string& bytes) {
    LoadedMap out;
    WorldMap& m = out.map;

    size_t pos = 0;
    auto next_line = [&]() -> std::string {
      const size_t nl = bytes.find('\n', pos);
      if (nl == std::string::npos) throw std::runtime_error("map parse error: truncated file");
      std::string line = bytes.substr(pos, nl - pos);
      pos = nl + 1;
      return line;
    };

    if (next_line() != "kslam-map v1") throw std::runtime_error("map parse error: bad magic");

    {
      std::istringstream h(next_line());
      std::string tag;
      size_t n = 0;
      h >> tag >> n;
      if (tag != "vocab" || h.fail()) throw std::runtime_error("map parse error: vocab header");
      if (pos + n > bytes.size()) throw std::runtime_error("map parse error: vocab blob");
      out.vocab_blob = bytes.substr(pos, n);
      pos += n;
      if (pos >= bytes.size() || bytes[pos] != '\n') {
        throw std::runtime_error("map parse error: vocab terminator");
      }
      ++pos;
    }

    {
      std::istringstream h(next_line());
      std::string tag;
      h >> tag >> m.next_kf_id_ >> m.next_point_id_ >> m.seq_ >> m.root_;
      if (tag != "counters" || h.fail()) throw std::runtime_error("map parse error: counters");
    }

    auto parse_count = [&](const char* tag) -> size_t {
      std::istringstream h(next_line());
      std::string t;
      size_t n = 0;
      h >> t >> n;
      if (t != tag || h.fail()) {
        throw std::runtime_error(std::string("map parse error: expected ") + tag);
      }
      return n;
    };

    const size_t n_kf = parse_count("keyframes");
    for (size_t k = 0; k < n_kf; ++k) {
      std::istringstream h(next_line());
      std::string tag, parent_tok;
      uint64_t id = 0;
      double v[12];
      size_t n_obs = 0;
      h >> tag >> id;
      for (double& x : v) h >> x;
      h >> parent_tok >> n_obs;
      if (tag != "kf" || h.fail()) throw std::runtime_error("map parse error: kf line");
      Eigen::Matrix3d R;
      R << v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8];
      KeyFrame& kf = m.keyframes_[id];
      kf.id = id;
      kf.T_wc = Pose(R, Eigen::Vector3d(v[9], v[10], v[11]));
      if (parent_tok != "-") m.parent_[id] = std::stoull(parent_tok);
      for (size_t i = 0; i < n_obs; ++i) {
        std::istringstream o(next_line());
        std::string otag, kind, hex, pid_tok;
        o >> otag >> kind;
        if (otag != "o") throw std::runtime_error("map parse error: obs line");
        Observation obs;
        if (kind == "s") {
          StereoKeypoint s;
          o >> s.uL >> s.vL >> s.uR >> s.octave;
          obs.kp = s;
        } else if (kind == "m") {
          MonoKeypoint mk;
          o >> mk.uL >> mk.vL >> mk.octave;
          obs.kp = mk;
        } else {
          throw std::runtime_error("map parse error: obs kind");
        }
        o >> hex >> pid_tok;
        if (o.fail()) throw std::runtime_error("map parse error: obs fields");
        obs.descriptor = descriptor_from_hex(hex);
        if (pid_tok != "-") obs.point_id = std::stoull(pid_tok);
        kf.observations.push_back(obs);
      }
    }

    const size_t n_pt = parse_count("points");
    for (size_t k = 0; k < n_pt; ++k) {
      std::istringstream h(next_line());
      std::string tag, prov, hex;
      uint64_t id = 0, created = 0;
      double x, y, z;
      h >> tag >> id >> x >> y >> z >> prov >> created >> hex;
      if (tag != "pt" || h.fail() || prov.size() != 1) {
        throw std::runtime_error("map parse error: pt line");
      }
      MapPoint& p = m.points_[id];
      p.id = id;
      p.position = Eigen::Vector3d(x, y, z);
      p.provenance = provenance_from(prov[0]);
      p.created_seq = created;
      p.descriptor = descriptor_from_hex(hex);
    }

    const size_t n_loop = parse_count("loops");
    for (size_t k = 0; k < n_loop; ++k) {
      std::istringstream h(next_line());
      std::string tag;
      uint64_t a, b;
      h >> tag >> a >> b;
      if (tag != "loop" || h.fail()) throw std::runtime_error("map parse error: loop line");
      m.loop_edges_.insert({a, b});
    }
    const size_t n_red = parse_count("redirects");
    for (size_t k = 0; k < n_red; ++k) {
      std::istringstream h(next_line());
      std::string tag;
      uint64_t a, b;
      h >> tag >> a >> b;
      if (tag != "redirect" || h.fail()) throw std::runtime_error("map parse error: redirect");
      m.redirects_[a] = b;
    }
    if (next_line() != "end") throw std::runtime_error("map parse error: missing end");

    // Rebuild point-side links and covisibility from the keyframe side.
    for (const auto& [kid, kf] : m.keyframes_) {
      for (size_t i = 0; i < kf.observations.size(); ++i) {
        const auto& pid = kf.observations[i].point_id;
        if (!pid) continue;
        auto pit = m.points_.find(*pid);
        if (pit == m.points_.end()) {
          throw std::runtime_error("map parse error: observation references unknown point");
        }
        pit->second.observations[kid] = int(i);
      }
    }
    for (const auto& [pid, p] : m.points_) {
      for (auto a = p.observations.begin(); a != p.observations.end(); ++a) {
        for (auto b = std::next(a); b != p.observations.end(); ++b) {
          m.bump_covis(a->first, b->first, 1);
        }
      }
    }
    return out;
  }
};

std::string serialize_map(const WorldMap& map, const std::string& vocab_blob) {
  return MapSerializer::serialize(map, vocab_blob);
}

LoadedMap deserialize_map(const std::string& bytes) { return MapSerializer::deserialize(bytes); }

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256_hex: digest failure");
  }
  EVP_MD_CTX_free(ctx);
  std::string out(size_t(len) * 2, '0');
  static const char* hexd = "0123456789abcdef";
  for (unsigned int i = 0; i < len; ++i) {
    out[2 * i] = hexd[digest[i] >> 4];
    out[2 * i + 1] = hexd[digest[i] & 0xf];
  }
  return out;
}

}  // namespace kslam
