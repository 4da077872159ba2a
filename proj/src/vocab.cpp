#include "dfeat/vocab.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dfeat {

namespace {

constexpr uint32_t kVocabVersion = 1;
constexpr int kBuildKmeansIters = 50;

double sqdist(const double* a, const double* b, size_t dim) {
  double acc = 0.0;
  for (size_t i = 0; i < dim; ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

// Indices of distinct points in first-occurrence order, stopping as soon as
// `cap` of them exist (the caller only needs to know whether there are >= k).
std::vector<size_t> distinct_points(const std::vector<Descriptor>& points, size_t cap) {
  std::vector<size_t> distinct;
  for (size_t i = 0; i < points.size() && distinct.size() < cap; ++i) {
    bool seen = false;
    for (size_t j : distinct) {
      if (points[j] == points[i]) {
        seen = true;
        break;
      }
    }
    if (!seen) distinct.push_back(i);
  }
  return distinct;
}

int nearest_centroid(const std::vector<Descriptor>& centroids, const Descriptor& p) {
  int best = 0;
  double best_d = sqdist(centroids[0].data(), p.data(), p.size());
  for (size_t c = 1; c < centroids.size(); ++c) {
    const double d = sqdist(centroids[c].data(), p.data(), p.size());
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

}  // namespace

KmeansResult kmeans(const std::vector<Descriptor>& points, int k, int max_iters,
                    uint64_t seed) {
  if (points.empty()) throw ConstraintError("kmeans: no points");
  if (k < 1) throw ConstraintError("kmeans: k must be >= 1");
  const size_t dim = points[0].size();
  for (const Descriptor& p : points) {
    if (p.size() != dim) throw DimensionError("kmeans: ragged points");
  }
  const size_t n = points.size();
  Rng rng(seed);

  {
    const std::vector<size_t> distinct = distinct_points(points, static_cast<size_t>(k));
    if (distinct.size() < static_cast<size_t>(k)) {
      KmeansResult res;
      res.reduced = true;
      for (size_t j : distinct) res.centroids.push_back(points[j]);
      res.assignments.resize(n);
      for (size_t i = 0; i < n; ++i) {
        res.assignments[i] = nearest_centroid(res.centroids, points[i]);
      }
      return res;
    }
  }

  // k-means++ seeding.
  std::vector<Descriptor> centroids;
  centroids.reserve(k);
  centroids.push_back(points[rng.uniform_int(n)]);
  std::vector<double> d2(n);
  while (centroids.size() < static_cast<size_t>(k)) {
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double best = sqdist(centroids[0].data(), points[i].data(), dim);
      for (size_t c = 1; c < centroids.size(); ++c) {
        best = std::min(best, sqdist(centroids[c].data(), points[i].data(), dim));
      }
      d2[i] = best;
      total += best;
    }
    const double r = rng.uniform() * total;
    double cum = 0.0;
    size_t pick = n;
    size_t last_positive = n;
    for (size_t i = 0; i < n; ++i) {
      if (d2[i] <= 0.0) continue;
      cum += d2[i];
      last_positive = i;
      if (cum > r) {
        pick = i;
        break;
      }
    }
    if (pick == n) pick = last_positive;  // r landed on the rounding tail
    centroids.push_back(points[pick]);
  }

  std::vector<int> assign(n, -1);
  std::vector<int> prev(n, -2);
  for (int iter = 0; iter < max_iters; ++iter) {
    for (size_t i = 0; i < n; ++i) assign[i] = nearest_centroid(centroids, points[i]);

    // Reseed empty clusters from the point farthest from its centroid,
    // stealing only from clusters that keep at least one member.
    std::vector<int> counts(k, 0);
    for (size_t i = 0; i < n; ++i) ++counts[assign[i]];
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      size_t far_idx = n;
      double far_d = -1.0;
      for (size_t i = 0; i < n; ++i) {
        if (counts[assign[i]] < 2) continue;
        const double d = sqdist(centroids[assign[i]].data(), points[i].data(), dim);
        if (d > far_d) {
          far_d = d;
          far_idx = i;
        }
      }
      if (far_idx == n) break;  // cannot happen with n >= k distinct points
      --counts[assign[far_idx]];
      assign[far_idx] = c;
      counts[c] = 1;
      centroids[c] = points[far_idx];
    }

    if (assign == prev) break;
    prev = assign;

    std::vector<Descriptor> sums(k, Descriptor(dim, 0.0));
    std::vector<int> m(k, 0);
    for (size_t i = 0; i < n; ++i) {
      const int c = assign[i];
      ++m[c];
      const double* p = points[i].data();
      double* s = sums[c].data();
      for (size_t j = 0; j < dim; ++j) s[j] += p[j];
    }
    for (int c = 0; c < k; ++c) {
      if (m[c] == 0) continue;
      for (size_t j = 0; j < dim; ++j) sums[c][j] /= m[c];
      centroids[c] = std::move(sums[c]);
    }
  }

  KmeansResult res;
  res.centroids = std::move(centroids);
  res.assignments = std::move(assign);
  return res;
}

namespace {

Descriptor subset_mean(const std::vector<Descriptor>& descriptors,
                       const std::vector<size_t>& subset) {
  const size_t dim = descriptors[0].size();
  Descriptor mean(dim, 0.0);
  for (size_t idx : subset) {
    const double* p = descriptors[idx].data();
    for (size_t j = 0; j < dim; ++j) mean[j] += p[j];
  }
  for (size_t j = 0; j < dim; ++j) mean[j] /= subset.size();
  return mean;
}

void build_node(VocabularyTree& tree, const std::vector<Descriptor>& descriptors,
                std::vector<size_t> subset, uint32_t node_idx, uint32_t level,
                uint32_t max_levels, int k, Rng& rng) {
  Descriptor mean = subset_mean(descriptors, subset);

  if (level >= max_levels || subset.size() <= static_cast<size_t>(k)) {
    VocabNode& node = tree.nodes[node_idx];
    node.is_leaf = true;
    double norm = 0.0;
    for (double v : mean) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      // Antipodal descriptors can cancel; fall back to a member vector.
      mean = descriptors[subset[0]];
      norm = 0.0;
      for (double v : mean) norm += v * v;
      norm = std::sqrt(norm);
    }
    for (double& v : mean) v /= norm;
    node.centroid = std::move(mean);
    return;
  }

  tree.nodes[node_idx].centroid = std::move(mean);

  std::vector<Descriptor> pts;
  pts.reserve(subset.size());
  for (size_t idx : subset) pts.push_back(descriptors[idx]);
  const KmeansResult km = kmeans(pts, k, kBuildKmeansIters, rng.next_u64());

  std::vector<std::vector<size_t>> child_subsets(km.centroids.size());
  for (size_t i = 0; i < subset.size(); ++i) {
    child_subsets[km.assignments[i]].push_back(subset[i]);
  }
  subset.clear();
  subset.shrink_to_fit();

  for (size_t c = 0; c < km.centroids.size(); ++c) {
    if (child_subsets[c].empty()) continue;  // reduced result may skip slots
    const uint32_t child_idx = static_cast<uint32_t>(tree.nodes.size());
    tree.nodes.emplace_back();
    tree.nodes[child_idx].parent = node_idx;
    tree.nodes[node_idx].children.push_back(child_idx);
    build_node(tree, descriptors, std::move(child_subsets[c]), child_idx,
               level + 1, max_levels, k, rng);
  }
}

}  // namespace

VocabularyTree build_vocabulary(const std::vector<Descriptor>& descriptors,
                                int k, int levels, uint64_t seed) {
  if (descriptors.empty()) throw ConstraintError("build_vocabulary: no descriptors");
  if (k < 2) throw ConstraintError("build_vocabulary: k must be >= 2");
  if (levels < 1) throw ConstraintError("build_vocabulary: depth must be >= 1");

  VocabularyTree tree;
  tree.k = static_cast<uint32_t>(k);
  tree.depth = static_cast<uint32_t>(levels);
  tree.dim = static_cast<uint32_t>(descriptors[0].size());

  Rng rng(seed);
  std::vector<size_t> all(descriptors.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = i;
  tree.nodes.emplace_back();  // root
  build_node(tree, descriptors, std::move(all), 0, 0, static_cast<uint32_t>(levels),
             k, rng);

  // Freeze every centroid to its 32-bit stored form, then derive the working
  // copies exactly as load_vocab does; quantization is then bitwise stable
  // across a save/load round trip.
  uint32_t word = 0;
  for (VocabNode& node : tree.nodes) {
    node.centroid_f32.resize(node.centroid.size());
    for (size_t i = 0; i < node.centroid.size(); ++i) {
      node.centroid_f32[i] = static_cast<float>(node.centroid[i]);
    }
    if (node.is_leaf) {
      double norm = 0.0;
      for (float v : node.centroid_f32) norm += static_cast<double>(v) * v;
      norm = std::sqrt(norm);
      for (size_t i = 0; i < node.centroid.size(); ++i) {
        node.centroid[i] = static_cast<double>(node.centroid_f32[i]) / norm;
      }
      node.word_id = word++;
    } else {
      for (size_t i = 0; i < node.centroid.size(); ++i) {
        node.centroid[i] = static_cast<double>(node.centroid_f32[i]);
      }
    }
  }
  tree.word_count = word;

  std::vector<uint32_t> word_counts(tree.word_count, 0);
  for (const Descriptor& d : descriptors) ++word_counts[quantize(tree, d).word_id];
  const double n_train = static_cast<double>(descriptors.size());
  for (VocabNode& node : tree.nodes) {
    if (!node.is_leaf) continue;
    const double idf =
        std::max(0.0, std::log(n_train / (1.0 + word_counts[node.word_id])));
    node.idf = static_cast<double>(static_cast<float>(idf));
  }
  return tree;
}

WordHit quantize(const VocabularyTree& tree, const Descriptor& descriptor) {
  if (descriptor.size() != tree.dim) {
    throw DimensionError("quantize: descriptor dim " + std::to_string(descriptor.size()) +
                         " does not match vocabulary dim " + std::to_string(tree.dim));
  }
  const VocabNode* node = &tree.nodes[0];
  while (!node->is_leaf) {
    const VocabNode* best = nullptr;
    double best_d = 0.0;
    for (uint32_t child_idx : node->children) {
      const VocabNode& child = tree.nodes[child_idx];
      const double d = sqdist(child.centroid.data(), descriptor.data(), tree.dim);
      if (!best || d < best_d) {  // strict < keeps the lowest child index on ties
        best = &child;
        best_d = d;
      }
    }
    node = best;
  }
  return {node->word_id, node->idf};
}

BowVector bow_vector(const VocabularyTree& tree,
                     const std::vector<Descriptor>& frame_descriptors) {
  if (frame_descriptors.empty()) throw ConstraintError("bow_vector: empty frame");
  BowVector v;
  double total = 0.0;
  for (const Descriptor& d : frame_descriptors) {
    const WordHit hit = quantize(tree, d);
    v[hit.word_id] += hit.idf;
    total += hit.idf;
  }
  if (total <= 0.0) return {};  // every touched word has zero idf
  for (auto& [word, weight] : v) weight /= total;
  std::erase_if(v, [](const auto& kv) { return kv.second <= 0.0; });
  return v;
}

double similarity(const BowVector& v1, const BowVector& v2) {
  if (v1.empty() || v2.empty()) return 0.0;
  double l1 = 0.0;
  auto it1 = v1.begin();
  auto it2 = v2.begin();
  while (it1 != v1.end() || it2 != v2.end()) {
    if (it2 == v2.end() || (it1 != v1.end() && it1->first < it2->first)) {
      l1 += std::abs(it1->second);
      ++it1;
    } else if (it1 == v1.end() || it2->first < it1->first) {
      l1 += std::abs(it2->second);
      ++it2;
    } else {
      l1 += std::abs(it1->second - it2->second);
      ++it1;
      ++it2;
    }
  }
  return std::clamp(1.0 - 0.5 * l1, 0.0, 1.0);
}

void save_vocab(const VocabularyTree& tree, const std::filesystem::path& path) {
  ByteWriter w;
  w.raw("DFVC", 4);
  w.u32(kVocabVersion);
  w.u32(tree.k);
  w.u32(tree.depth);
  w.u32(tree.dim);
  w.u32(static_cast<uint32_t>(tree.nodes.size()));
  for (const VocabNode& node : tree.nodes) {
    w.u32(node.parent);
    w.u32(static_cast<uint32_t>(node.children.size()));
    for (uint32_t c : node.children) w.u32(c);
    w.u8(node.is_leaf ? 1 : 0);
    for (float v : node.centroid_f32) w.f32(v);
    if (node.is_leaf) {
      w.u32(node.word_id);
      w.f32(static_cast<float>(node.idf));
    }
  }
  write_file_atomic(path, w.data());
}

VocabularyTree load_vocab(const std::filesystem::path& path) {
  ByteReader r(read_file(path), path.string());
  r.expect_magic("DFVC");
  const uint32_t version = r.u32();
  if (version != kVocabVersion) r.fail("unsupported version " + std::to_string(version));
  VocabularyTree tree;
  tree.k = r.u32();
  tree.depth = r.u32();
  tree.dim = r.u32();
  const uint32_t node_count = r.u32();
  if (tree.k < 1 || tree.dim < 1 || node_count < 1) r.fail("implausible header");

  tree.nodes.resize(node_count);
  uint32_t leaves = 0;
  for (uint32_t i = 0; i < node_count; ++i) {
    VocabNode& node = tree.nodes[i];
    node.parent = r.u32();
    if (i == 0 && node.parent != kVocabNoParent) r.fail("root must have no parent");
    const uint32_t child_count = r.u32();
    if (child_count > tree.k) r.fail("node has more than k children");
    node.children.resize(child_count);
    for (uint32_t& c : node.children) {
      c = r.u32();
      if (c >= node_count) r.fail("child index out of range");
    }
    node.is_leaf = r.u8() != 0;
    if (node.is_leaf != node.children.empty()) r.fail("leaf flag disagrees with children");
    node.centroid_f32.resize(tree.dim);
    for (float& v : node.centroid_f32) v = r.f32();
    node.centroid.resize(tree.dim);
    if (node.is_leaf) {
      double norm = 0.0;
      for (float v : node.centroid_f32) norm += static_cast<double>(v) * v;
      norm = std::sqrt(norm);
      if (norm < 1e-12) r.fail("zero leaf centroid");
      for (uint32_t j = 0; j < tree.dim; ++j) {
        node.centroid[j] = static_cast<double>(node.centroid_f32[j]) / norm;
      }
      node.word_id = r.u32();
      node.idf = static_cast<double>(r.f32());
      ++leaves;
    } else {
      for (uint32_t j = 0; j < tree.dim; ++j) {
        node.centroid[j] = static_cast<double>(node.centroid_f32[j]);
      }
    }
  }
  r.expect_end();

  tree.word_count = leaves;
  std::vector<bool> seen(leaves, false);
  for (const VocabNode& node : tree.nodes) {
    if (!node.is_leaf) continue;
    if (node.word_id >= leaves || seen[node.word_id]) {
      throw FormatError(path.string() + ": leaf word ids are not a permutation");
    }
    seen[node.word_id] = true;
  }
  return tree;
}

}  // namespace dfeat
