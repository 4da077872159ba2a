#include "dfeat/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

namespace dfeat {

namespace {

// Ascending distance, ties by original index.
std::vector<size_t> ranked_order(const std::vector<double>& distances) {
  std::vector<size_t> order(distances.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return distances[a] < distances[b]; });
  return order;
}

// Mean of precision at each relevant hit over a ranked relevance list.
double average_precision(const std::vector<char>& relevant_in_rank_order) {
  int hits = 0;
  double acc = 0.0;
  for (size_t r = 0; r < relevant_in_rank_order.size(); ++r) {
    if (relevant_in_rank_order[r]) {
      ++hits;
      acc += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  return hits == 0 ? 0.0 : acc / hits;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

std::map<uint32_t, std::vector<size_t>> group_by_label(const PatchDataset& dataset) {
  std::map<uint32_t, std::vector<size_t>> groups;
  for (size_t i = 0; i < dataset.records.size(); ++i) {
    groups[dataset.records[i].label].push_back(i);
  }
  return groups;
}

}  // namespace

double euclidean_distance(const Descriptor& a, const Descriptor& b) {
  if (a.size() != b.size()) {
    throw DimensionError("euclidean_distance: dims disagree");
  }
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

MatchResult match_descriptors(const std::vector<Descriptor>& set_a,
                              const std::vector<Descriptor>& set_b,
                              double ratio_threshold) {
  if (set_a.empty() || set_b.empty()) {
    throw ConstraintError("match_descriptors: empty descriptor set");
  }
  if (!(ratio_threshold > 0.0 && ratio_threshold <= 1.0)) {
    throw ConstraintError("match_descriptors: ratio threshold must be in (0, 1]");
  }
  MatchResult result;
  for (size_t ia = 0; ia < set_a.size(); ++ia) {
    int best = -1, second = -1;
    double d1 = 0.0, d2 = 0.0;
    for (size_t ib = 0; ib < set_b.size(); ++ib) {
      const double d = euclidean_distance(set_a[ia], set_b[ib]);
      if (best < 0 || d < d1) {
        second = best;
        d2 = d1;
        best = static_cast<int>(ib);
        d1 = d;
      } else if (second < 0 || d < d2) {
        second = static_cast<int>(ib);
        d2 = d;
      }
    }
    if (second < 0) {
      // No second neighbor to test against.
      if (ratio_threshold == 1.0) {
        result.matches.push_back({static_cast<int>(ia), best, d1, 0.0});
      } else {
        ++result.rejected;
      }
      continue;
    }
    const double ratio = d2 == 0.0 ? 1.0 : d1 / d2;
    if (ratio < ratio_threshold) {
      result.matches.push_back({static_cast<int>(ia), best, d1, ratio});
    } else {
      ++result.rejected;
    }
  }
  return result;
}

EvalReport eval_verification(const std::vector<VerificationPair>& pairs) {
  int positives = 0, negatives = 0;
  for (const VerificationPair& p : pairs) {
    (p.same ? positives : negatives)++;
  }
  if (positives == 0 || negatives == 0) {
    throw ConstraintError("eval_verification: need at least one positive and one negative pair");
  }

  std::vector<double> dist(pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    dist[i] = euclidean_distance(pairs[i].a, pairs[i].b);
  }
  const std::vector<size_t> order = ranked_order(dist);

  EvalReport report;
  report.task = "verification";
  int tp = 0, fp = 0;
  bool got_fpr = false;
  std::vector<char> rel(order.size());
  for (size_t r = 0; r < order.size(); ++r) {
    const bool same = pairs[order[r]].same;
    rel[r] = same ? 1 : 0;
    if (same) {
      ++tp;
      report.per_query.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    } else {
      ++fp;
    }
    if (!got_fpr &&
        static_cast<double>(tp) >= 0.95 * static_cast<double>(positives)) {
      report.fpr95 = static_cast<double>(fp) / static_cast<double>(negatives);
      got_fpr = true;
    }
  }
  report.ap = average_precision(rel);
  return report;
}

EvalReport eval_matching(const std::vector<LabeledDescriptor>& reference,
                         const std::vector<std::vector<LabeledDescriptor>>& targets) {
  if (reference.empty() || targets.empty()) {
    throw ConstraintError("eval_matching: empty reference or target list");
  }
  std::map<uint32_t, int> ref_labels;
  for (const LabeledDescriptor& r : reference) {
    if (++ref_labels[r.label] > 1) {
      throw ConstraintError("eval_matching: duplicate reference label " +
                            std::to_string(r.label));
    }
  }

  EvalReport report;
  report.task = "matching";
  double map_acc = 0.0;
  for (const std::vector<LabeledDescriptor>& target : targets) {
    if (target.size() != reference.size()) {
      throw ConstraintError("eval_matching: target size differs from reference");
    }
    std::map<uint32_t, int> tgt_labels;
    for (const LabeledDescriptor& t : target) {
      if (ref_labels.find(t.label) == ref_labels.end() || ++tgt_labels[t.label] > 1) {
        throw ConstraintError("eval_matching: ground truth is not a bijection");
      }
    }

    double target_ap = 0.0;
    for (const LabeledDescriptor& query : reference) {
      std::vector<double> dist(target.size());
      for (size_t j = 0; j < target.size(); ++j) {
        dist[j] = euclidean_distance(query.d, target[j].d);
      }
      const std::vector<size_t> order = ranked_order(dist);
      double ap = 0.0;
      for (size_t r = 0; r < order.size(); ++r) {
        if (target[order[r]].label == query.label) {
          ap = 1.0 / static_cast<double>(r + 1);  // single relevant item
          break;
        }
      }
      target_ap += ap;
      report.per_query.push_back(ap);
    }
    map_acc += target_ap / static_cast<double>(reference.size());
  }
  report.ap = map_acc / static_cast<double>(targets.size());
  return report;
}

EvalReport eval_retrieval(const std::vector<LabeledDescriptor>& queries,
                          const std::vector<LabeledDescriptor>& gallery,
                          const std::vector<Descriptor>& distractors) {
  if (queries.empty() || gallery.empty()) {
    throw ConstraintError("eval_retrieval: empty queries or gallery");
  }
  std::map<uint32_t, int> gallery_labels;
  for (const LabeledDescriptor& g : gallery) ++gallery_labels[g.label];

  EvalReport report;
  report.task = "retrieval";
  for (const LabeledDescriptor& query : queries) {
    if (gallery_labels.find(query.label) == gallery_labels.end()) {
      throw ConstraintError("eval_retrieval: query label " +
                            std::to_string(query.label) + " absent from gallery");
    }
    const size_t total = gallery.size() + distractors.size();
    std::vector<double> dist(total);
    for (size_t j = 0; j < gallery.size(); ++j) {
      dist[j] = euclidean_distance(query.d, gallery[j].d);
    }
    for (size_t j = 0; j < distractors.size(); ++j) {
      dist[gallery.size() + j] = euclidean_distance(query.d, distractors[j]);
    }
    const std::vector<size_t> order = ranked_order(dist);
    std::vector<char> rel(total);
    for (size_t r = 0; r < total; ++r) {
      rel[r] = order[r] < gallery.size() && gallery[order[r]].label == query.label;
    }
    const double ap = average_precision(rel);
    report.per_query.push_back(ap);
    report.ap += ap;
  }
  report.ap /= static_cast<double>(queries.size());
  return report;
}

Descriptor baseline_raw_descriptor(const Patch& patch) {
  constexpr int kBlocks = 8;
  constexpr int kBlockSize = kPatchSize / kBlocks;
  Descriptor desc(kDescriptorDim, 0.0);
  double norm_sq = 0.0;
  for (int by = 0; by < kBlocks; ++by) {
    for (int bx = 0; bx < kBlocks; ++bx) {
      double acc = 0.0;
      for (int y = 0; y < kBlockSize; ++y) {
        for (int x = 0; x < kBlockSize; ++x) {
          acc += patch.pixels[(by * kBlockSize + y) * kPatchSize + bx * kBlockSize + x];
        }
      }
      const double mean = acc / (kBlockSize * kBlockSize);
      desc[by * kBlocks + bx] = mean;
      norm_sq += mean * mean;
    }
  }
  const double norm = std::sqrt(norm_sq);
  if (norm < 1e-12) {
    throw DegenerateError("baseline_raw_descriptor: zero-variance patch");
  }
  for (int i = 0; i < kBlocks * kBlocks; ++i) desc[i] /= norm;
  return desc;
}

std::vector<Descriptor> describe_dataset(const Model& model, const PatchDataset& dataset) {
  std::vector<Patch> patches;
  patches.reserve(dataset.records.size());
  for (const PatchDataset::Record& r : dataset.records) patches.push_back(record_to_patch(r));
  return describe_batch(model, patches);
}

std::vector<Descriptor> baseline_describe_dataset(const PatchDataset& dataset) {
  std::vector<Descriptor> out;
  out.reserve(dataset.records.size());
  for (const PatchDataset::Record& r : dataset.records) {
    out.push_back(baseline_raw_descriptor(record_to_patch(r)));
  }
  return out;
}

std::vector<VerificationPair> verification_pairs_from_dataset(
    const PatchDataset& dataset, const std::vector<Descriptor>& descriptors,
    uint64_t pairing_seed) {
  if (descriptors.size() != dataset.records.size()) {
    throw DimensionError("verification_pairs_from_dataset: descriptor count mismatch");
  }
  const auto groups = group_by_label(dataset);
  if (groups.size() < 2) {
    throw ConstraintError("verification_pairs_from_dataset: need at least 2 labels");
  }
  std::vector<const std::vector<size_t>*> views;
  for (const auto& [label, idx] : groups) {
    if (idx.size() < 2) {
      throw ConstraintError("verification_pairs_from_dataset: label " +
                            std::to_string(label) + " has fewer than 2 views");
    }
    views.push_back(&idx);
  }
  Rng rng(pairing_seed);
  std::vector<size_t> order(views.size());
  std::iota(order.begin(), order.end(), size_t{0});
  rng.shuffle(order);

  std::vector<VerificationPair> pairs;
  for (size_t i = 0; i < views.size(); ++i) {
    pairs.push_back({descriptors[(*views[i])[0]], descriptors[(*views[i])[1]], true});
  }
  for (size_t i = 0; i < order.size(); ++i) {
    const size_t a = order[i];
    const size_t b = order[(i + 1) % order.size()];
    pairs.push_back({descriptors[(*views[a])[0]], descriptors[(*views[b])[1]], false});
  }
  return pairs;
}

EvalReport matching_report_from_dataset(const PatchDataset& dataset,
                                        const std::vector<Descriptor>& descriptors) {
  if (descriptors.size() != dataset.records.size()) {
    throw DimensionError("matching_report_from_dataset: descriptor count mismatch");
  }
  const auto groups = group_by_label(dataset);
  size_t min_views = SIZE_MAX;
  for (const auto& [label, idx] : groups) min_views = std::min(min_views, idx.size());
  if (groups.size() < 2 || min_views < 2) {
    throw ConstraintError("matching_report_from_dataset: need >= 2 labels with >= 2 views");
  }

  std::vector<LabeledDescriptor> reference;
  std::vector<std::vector<LabeledDescriptor>> targets(min_views - 1);
  for (const auto& [label, idx] : groups) {
    reference.push_back({descriptors[idx[0]], label});
    for (size_t v = 1; v < min_views; ++v) {
      targets[v - 1].push_back({descriptors[idx[v]], label});
    }
  }
  return eval_matching(reference, targets);
}

EvalReport retrieval_report_from_dataset(const PatchDataset& dataset,
                                         const std::vector<Descriptor>& descriptors) {
  if (descriptors.size() != dataset.records.size()) {
    throw DimensionError("retrieval_report_from_dataset: descriptor count mismatch");
  }
  const auto groups = group_by_label(dataset);
  std::vector<LabeledDescriptor> queries, gallery;
  for (const auto& [label, idx] : groups) {
    if (idx.size() < 2) {
      throw ConstraintError("retrieval_report_from_dataset: label " +
                            std::to_string(label) + " has fewer than 2 views");
    }
    queries.push_back({descriptors[idx[0]], label});
    for (size_t v = 1; v < idx.size(); ++v) gallery.push_back({descriptors[idx[v]], label});
  }
  return eval_retrieval(queries, gallery, {});
}

std::string format_report(const EvalReport& report) {
  std::string out;
  out += "task=" + report.task + "\n";
  out += "dataset=" + report.dataset_id + "\n";
  out += "descriptor=" + report.descriptor_id + "\n";
  out += (report.task == "verification" ? "ap=" : "map=") + fmt_double(report.ap) + "\n";
  if (report.fpr95 >= 0.0) out += "fpr95=" + fmt_double(report.fpr95) + "\n";
  out += "queries=" + std::to_string(report.per_query.size()) + "\n";
  out += "\nquery\tprecision\n";
  for (size_t i = 0; i < report.per_query.size(); ++i) {
    out += std::to_string(i) + "\t" + fmt_double(report.per_query[i]) + "\n";
  }
  return out;
}

}  // namespace dfeat
