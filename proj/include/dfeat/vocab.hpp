#pragma once

// Hierarchical k-means visual vocabulary over float descriptors: seeded
// k-means++/Lloyd clustering, the k-ary tree with unit-norm leaf centroids
// and idf weights, greedy-descent quantization, tf-idf bag-of-words vectors
// and L1 frame similarity. DFVC persistence.

#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "dfeat/common.hpp"
#include "dfeat/net.hpp"

namespace dfeat {

struct KmeansResult {
  std::vector<Descriptor> centroids;
  std::vector<int> assignments;  // per input point
  bool reduced = false;          // fewer than k distinct points
};

// Seeded k-means++ init, Lloyd iterations until assignments stabilize or
// max_iters. Empty clusters are reseeded from the point farthest from its
// centroid. When the input has fewer than k distinct points the result holds
// one centroid per distinct point and is flagged `reduced`.
KmeansResult kmeans(const std::vector<Descriptor>& points, int k, int max_iters,
                    uint64_t seed);

constexpr uint32_t kVocabNoParent = 0xFFFFFFFF;

struct VocabNode {
  uint32_t parent = kVocabNoParent;
  std::vector<uint32_t> children;
  bool is_leaf = false;
  // Stored form (what DFVC serializes) and the working copy used for all
  // distance computations. Leaf working centroids are the stored values
  // renormalized in doubles, so quantization is identical before and after a
  // save/load round trip.
  std::vector<float> centroid_f32;
  std::vector<double> centroid;
  uint32_t word_id = 0;  // leaves only
  double idf = 0.0;      // leaves only
};

struct VocabularyTree {
  uint32_t k = 0, depth = 0, dim = 0;
  uint32_t word_count = 0;
  std::vector<VocabNode> nodes;  // nodes[0] is the root
};

// Recursive k-means to depth L, stopping early on branches with <= k
// descriptors. Leaf centroids are unit-normalized; idf(word) =
// max(0, ln(N / (1 + n_word))) with n_word counted by quantizing the
// training descriptors on the finished tree.
VocabularyTree build_vocabulary(const std::vector<Descriptor>& descriptors,
                                int k, int levels, uint64_t seed);

// Greedy descent: at each level the child with the minimal Euclidean
// distance (ties: lowest child index).
struct WordHit {
  uint32_t word_id = 0;
  double idf = 0.0;
};
WordHit quantize(const VocabularyTree& tree, const Descriptor& descriptor);

// Sparse L1-normalized tf-idf frame vector. An all-zero accumulation (every
// touched word has idf 0) yields an empty map.
using BowVector = std::map<uint32_t, double>;
BowVector bow_vector(const VocabularyTree& tree,
                     const std::vector<Descriptor>& frame_descriptors);

// s = 1 - 0.5 * sum_w |v1(w) - v2(w)| over the union; 0 for empty inputs.
double similarity(const BowVector& v1, const BowVector& v2);

void save_vocab(const VocabularyTree& tree, const std::filesystem::path& path);
VocabularyTree load_vocab(const std::filesystem::path& path);

}  // namespace dfeat
