#ifndef KSLAM_VOCABULARY_H
#define KSLAM_VOCABULARY_H

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kslam/descriptor.h"

namespace kslam {

/// Sparse tf-idf frame signature: word id -> weight, L1-normalized.
using BowVector = std::map<uint32_t, double>;

/// Hierarchical k-medians vocabulary over binary descriptors: a tree of
/// cluster centers with branching factor k and depth at most L whose leaves
/// are the words.
class Vocabulary {
 public:
  Vocabulary() = default;

  bool empty() const { return nodes_.empty(); }
  size_t num_words() const { return idf_.size(); }
  int branching() const { return k_; }
  int max_depth() const { return depth_; }
  uint64_t seed() const { return seed_; }

  /// Word id of the leaf reached by greedy nearest-center descent.
  /// Throws std::logic_error on an empty vocabulary.
  uint32_t quantize(const Descriptor& d) const;

  double idf(uint32_t word) const { return idf_.at(word); }
  Descriptor word_center(uint32_t word) const;

  /// Structured-text encoding embedding k, L and the training seed.
  std::string serialize() const;
  /// Inverse of serialize. Throws std::runtime_error on malformed input.
  static Vocabulary deserialize(const std::string& bytes);

 private:
  friend Vocabulary build_vocabulary(const std::vector<Descriptor>&, int, int, uint64_t);

  struct Node {
    Descriptor center;
    std::vector<uint32_t> children;  // empty for leaves
    uint32_t word = 0;               // valid when children is empty
  };

  std::vector<Node> nodes_;  // nodes_[0] is the root when non-empty
  std::vector<double> idf_;  // per word, >= 0
  int k_ = 0;
  int depth_ = 0;
  uint64_t seed_ = 0;
};

/// Trains a vocabulary by recursive k-medians clustering in Hamming space
/// with majority-bit medoid updates. Deterministic for a fixed seed. Throws
/// std::invalid_argument on fewer than k descriptors or invalid k/L.
Vocabulary build_vocabulary(const std::vector<Descriptor>& descriptors, int k, int L,
                            uint64_t seed);

/// tf-idf BoW vector, L1-normalized (weights sum to 1 when non-empty).
/// An empty descriptor list gives an empty vector; otherwise throws
/// std::invalid_argument on an empty vocabulary.
BowVector bow_vector(const std::vector<Descriptor>& descriptors, const Vocabulary& vocab);

/// Similarity s(v, w) = 1 - |v - w|_1 / 2, in [0, 1] for normalized inputs.
double bow_score(const BowVector& a, const BowVector& b);

}  // namespace kslam

#endif
