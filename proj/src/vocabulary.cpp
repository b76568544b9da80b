#include "kslam/vocabulary.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace kslam {

namespace {

Descriptor majority_center(const std::vector<Descriptor>& pool,
                           const std::vector<uint32_t>& members) {
  std::array<int, 256> ones{};
  for (uint32_t idx : members) {
    for (int b = 0; b < 256; ++b) ones[size_t(b)] += pool[idx].bit(b) ? 1 : 0;
  }
  Descriptor c;
  const int n = int(members.size());
  for (int b = 0; b < 256; ++b) {
    if (2 * ones[size_t(b)] >= n) c.set_bit(b);  // ties keep the bit set
  }
  return c;
}

/// Hand-rolled Fisher-Yates so the byte output is stable across standard
/// library implementations (std::shuffle is not).
void deterministic_shuffle(std::vector<uint32_t>& v, std::mt19937_64& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[size_t(rng() % i)]);
  }
}

struct Clustering {
  std::vector<Descriptor> centers;
  std::vector<std::vector<uint32_t>> groups;
};

/// One level of k-medians in Hamming space. The returned groups are the
/// nearest-center assignment against the returned centers (first center wins
/// ties), matching the greedy descent rule used by quantize.
Clustering kmedians(const std::vector<Descriptor>& pool, const std::vector<uint32_t>& members,
                    int k, std::mt19937_64& rng) {
  Clustering out;

  std::vector<Descriptor> distinct;
  for (uint32_t idx : members) {
    if (std::find(distinct.begin(), distinct.end(), pool[idx]) == distinct.end()) {
      distinct.push_back(pool[idx]);
    }
  }
  if (int(distinct.size()) <= k) {
    out.centers = distinct;  // exactly separable: distinct values are the centers
  } else {
    std::vector<uint32_t> order(members);
    deterministic_shuffle(order, rng);
    for (uint32_t idx : order) {
      const auto& d = pool[idx];
      if (std::find(out.centers.begin(), out.centers.end(), d) == out.centers.end()) {
        out.centers.push_back(d);
        if (int(out.centers.size()) == k) break;
      }
    }
  }

  const auto nearest = [&](const Descriptor& d) {
    size_t best = 0;
    int best_dist = 257;
    for (size_t c = 0; c < out.centers.size(); ++c) {
      const int dist = hamming(d, out.centers[c]);
      if (dist < best_dist) {
        best_dist = dist;
        best = c;
      }
    }
    return best;
  };

  for (int round = 0; round < 30; ++round) {
    out.groups.assign(out.centers.size(), {});
    for (uint32_t idx : members) out.groups[nearest(pool[idx])].push_back(idx);
    bool changed = false;
    for (size_t c = 0; c < out.centers.size(); ++c) {
      if (out.groups[c].empty()) continue;
      Descriptor updated = majority_center(pool, out.groups[c]);
      if (!(updated == out.centers[c])) {
        out.centers[c] = updated;
        changed = true;
      }
    }
    if (!changed) break;
  }
  // Re-assign against the final centers so groups and greedy descent agree.
  out.groups.assign(out.centers.size(), {});
  for (uint32_t idx : members) out.groups[nearest(pool[idx])].push_back(idx);

  Clustering filtered;
  for (size_t c = 0; c < out.centers.size(); ++c) {
    if (out.groups[c].empty()) continue;
    filtered.centers.push_back(out.centers[c]);
    filtered.groups.push_back(std::move(out.groups[c]));
  }
  return filtered;
}

}  // namespace

uint32_t Vocabulary::quantize(const Descriptor& d) const {
  if (nodes_.empty()) throw std::logic_error("quantize: empty vocabulary");
  uint32_t cur = 0;
  while (!nodes_[cur].children.empty()) {
    uint32_t best = nodes_[cur].children.front();
    int best_dist = 257;
    for (uint32_t child : nodes_[cur].children) {
      const int dist = hamming(d, nodes_[child].center);
      if (dist < best_dist) {
        best_dist = dist;
        best = child;
      }
    }
    cur = best;
  }
  return nodes_[cur].word;
}

Descriptor Vocabulary::word_center(uint32_t word) const {
  for (const Node& n : nodes_) {
    if (n.children.empty() && n.word == word) return n.center;
  }
  throw std::out_of_range("word_center: unknown word id");
}

Vocabulary build_vocabulary(const std::vector<Descriptor>& descriptors, int k, int L,
                            uint64_t seed) {
  if (k < 2) throw std::invalid_argument("build_vocabulary: branching factor must be >= 2");
  if (L < 1) throw std::invalid_argument("build_vocabulary: depth must be >= 1");
  if (int(descriptors.size()) < k) {
    throw std::invalid_argument("build_vocabulary: need at least k descriptors");
  }

  Vocabulary voc;
  voc.k_ = k;
  voc.depth_ = L;
  voc.seed_ = seed;
  std::mt19937_64 rng(seed);

  std::vector<size_t> word_hits;

  const std::function<uint32_t(std::vector<uint32_t>, int, const Descriptor&)> grow =
      [&](std::vector<uint32_t> members, int depth, const Descriptor& center) -> uint32_t {
    const uint32_t idx = uint32_t(voc.nodes_.size());
    voc.nodes_.push_back(Vocabulary::Node{center, {}, 0});

    bool splittable = depth < L && members.size() >= 2;
    if (splittable) {
      Clustering cl = kmedians(descriptors, members, k, rng);
      if (cl.centers.size() >= 2) {
        for (size_t c = 0; c < cl.centers.size(); ++c) {
          const uint32_t child = grow(std::move(cl.groups[c]), depth + 1, cl.centers[c]);
          voc.nodes_[idx].children.push_back(child);
        }
        return idx;
      }
    }
    voc.nodes_[idx].word = uint32_t(word_hits.size());
    word_hits.push_back(members.size());
    return idx;
  };

  std::vector<uint32_t> all(descriptors.size());
  std::iota(all.begin(), all.end(), 0u);
  const Descriptor root_center = majority_center(descriptors, all);
  grow(std::move(all), 0, root_center);

  const double n_total = double(descriptors.size());
  voc.idf_.reserve(word_hits.size());
  for (size_t hits : word_hits) voc.idf_.push_back(std::log(n_total / double(hits)));
  return voc;
}

BowVector bow_vector(const std::vector<Descriptor>& descriptors, const Vocabulary& vocab) {
  BowVector v;
  if (descriptors.empty()) return v;
  if (vocab.empty()) throw std::invalid_argument("bow_vector: empty vocabulary");

  std::map<uint32_t, int> tf;
  for (const Descriptor& d : descriptors) tf[vocab.quantize(d)] += 1;

  double total = 0.0;
  for (const auto& [word, count] : tf) {
    const double weight = double(count) * vocab.idf(word);
    if (weight > 0.0) {
      v[word] = weight;
      total += weight;
    }
  }
  if (total <= 0.0) {
    // Degenerate vocabulary where every hit word has zero idf: fall back to
    // plain term frequencies so normalization stays well defined.
    v.clear();
    for (const auto& [word, count] : tf) {
      v[word] = double(count);
      total += double(count);
    }
  }
  for (auto& [word, weight] : v) weight /= total;
  return v;
}

double bow_score(const BowVector& a, const BowVector& b) {
  double l1 = 0.0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() || ib != b.end()) {
    if (ib == b.end() || (ia != a.end() && ia->first < ib->first)) {
      l1 += std::abs(ia->second);
      ++ia;
    } else if (ia == a.end() || ib->first < ia->first) {
      l1 += std::abs(ib->second);
      ++ib;
    } else {
      l1 += std::abs(ia->second - ib->second);
      ++ia;
      ++ib;
    }
  }
  return 1.0 - 0.5 * l1;
}

std::string Vocabulary::serialize() const {
  std::string out = "kslam-vocab v1\n";
  char buf[160];
  std::snprintf(buf, sizeof buf, "k %d L %d seed %llu\n", k_, depth_,
                static_cast<unsigned long long>(seed_));
  out += buf;
  std::snprintf(buf, sizeof buf, "nodes %zu\n", nodes_.size());
  out += buf;
  for (const Node& n : nodes_) {
    out += "n ";
    out += to_hex(n.center);
    if (n.children.empty()) {
      std::snprintf(buf, sizeof buf, " w%u", n.word);
      out += buf;
    } else {
      out += " -";
    }
    std::snprintf(buf, sizeof buf, " %zu", n.children.size());
    out += buf;
    for (uint32_t child : n.children) {
      std::snprintf(buf, sizeof buf, " %u", child);
      out += buf;
    }
    out += '\n';
  }
  std::snprintf(buf, sizeof buf, "words %zu\n", idf_.size());
  out += buf;
  for (size_t w = 0; w < idf_.size(); ++w) {
    std::snprintf(buf, sizeof buf, "w %zu %.17g\n", w, idf_[w]);
    out += buf;
  }
  out += "end\n";
  return out;
}

Vocabulary Vocabulary::deserialize(const std::string& bytes) {
  std::istringstream in(bytes);
  const auto fail = [](const std::string& what) -> Vocabulary {
    throw std::runtime_error("Vocabulary::deserialize: " + what);
  };

  std::string line;
  if (!std::getline(in, line) || line != "kslam-vocab v1") return fail("bad magic");

  Vocabulary voc;
  std::string tok;
  unsigned long long seed = 0;
  in >> tok;
  if (tok != "k" || !(in >> voc.k_)) return fail("missing k");
  in >> tok;
  if (tok != "L" || !(in >> voc.depth_)) return fail("missing L");
  in >> tok;
  if (tok != "seed" || !(in >> seed)) return fail("missing seed");
  voc.seed_ = seed;

  size_t node_count = 0;
  in >> tok;
  if (tok != "nodes" || !(in >> node_count)) return fail("missing node count");
  voc.nodes_.resize(node_count);
  for (size_t i = 0; i < node_count; ++i) {
    std::string hex, word;
    size_t n_children = 0;
    in >> tok;
    if (tok != "n" || !(in >> hex >> word >> n_children)) return fail("bad node line");
    Node& n = voc.nodes_[i];
    try {
      n.center = descriptor_from_hex(hex);
    } catch (const std::invalid_argument& e) {
      return fail(e.what());
    }
    if (word != "-") {
      if (word.size() < 2 || word[0] != 'w') return fail("bad word tag");
      n.word = uint32_t(std::stoul(word.substr(1)));
    }
    for (size_t c = 0; c < n_children; ++c) {
      uint32_t child = 0;
      if (!(in >> child) || child >= node_count) return fail("bad child index");
      n.children.push_back(child);
    }
  }

  size_t word_count = 0;
  in >> tok;
  if (tok != "words" || !(in >> word_count)) return fail("missing word count");
  voc.idf_.resize(word_count, 0.0);
  for (size_t i = 0; i < word_count; ++i) {
    size_t id = 0;
    double value = 0.0;
    in >> tok;
    if (tok != "w" || !(in >> id >> value) || id >= word_count || value < 0.0) {
      return fail("bad idf line");
    }
    voc.idf_[id] = value;
  }
  in >> tok;
  if (tok != "end") return fail("missing end marker");
  return voc;
}

}  // namespace kslam
