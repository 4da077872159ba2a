#pragma once

// Descriptor matching (nearest neighbor + ratio test) and the three
// evaluation tasks: patch verification, image matching and patch retrieval,
// scored with information-retrieval average precision. Also the raw
// block-mean baseline descriptor used for learned-vs-baseline comparisons.

#include <cstdint>
#include <string>
#include <vector>

#include "dfeat/common.hpp"
#include "dfeat/net.hpp"
#include "dfeat/patchio.hpp"

namespace dfeat {

double euclidean_distance(const Descriptor& a, const Descriptor& b);

struct Match {
  int index_a = -1, index_b = -1;
  double distance = 0.0;
  double ratio = 0.0;  // d1/d2, 0 when there is no second neighbor
};

struct MatchResult {
  std::vector<Match> matches;
  int rejected = 0;
};

// For each descriptor in A: nearest and second nearest in B (ties by lowest
// index); kept iff d1/d2 < ratio_threshold. A single-element B keeps the
// match only when the threshold is exactly 1.
MatchResult match_descriptors(const std::vector<Descriptor>& set_a,
                              const std::vector<Descriptor>& set_b,
                              double ratio_threshold);

struct EvalReport {
  std::string task;
  std::string dataset_id;
  std::string descriptor_id;
  double ap = 0.0;      // AP (verification) or mAP (matching/retrieval)
  double fpr95 = -1.0;  // verification only
  std::vector<double> per_query;
};

struct VerificationPair {
  Descriptor a, b;
  bool same = false;
};

// Ranks pairs by ascending distance; AP is the mean of precision at each
// positive, FPR95 the false-positive rate at the first prefix reaching 95%
// true-positive rate.
EvalReport eval_verification(const std::vector<VerificationPair>& pairs);

struct LabeledDescriptor {
  Descriptor d;
  uint32_t label = 0;
};

// Reference set against one or more transformed sets with label-bijective
// ground truth; per-query AP is 1/rank of the true correspondence, reported
// as mAP over targets.
EvalReport eval_matching(const std::vector<LabeledDescriptor>& reference,
                         const std::vector<std::vector<LabeledDescriptor>>& targets);

// Ranks gallery plus distractors per query; AP over the query label's
// gallery occurrences, reported as mAP over queries.
EvalReport eval_retrieval(const std::vector<LabeledDescriptor>& queries,
                          const std::vector<LabeledDescriptor>& gallery,
                          const std::vector<Descriptor>& distractors);

// 8x8 block means of the normalized patch, L2-normalized and zero-padded to
// 128 dims.
Descriptor baseline_raw_descriptor(const Patch& patch);

// --- dataset-driven harness -------------------------------------------------

// Descriptors for every record, in record order.
std::vector<Descriptor> describe_dataset(const Model& model, const PatchDataset& dataset);
std::vector<Descriptor> baseline_describe_dataset(const PatchDataset& dataset);

// One positive pair per label (first two views) plus an equal number of
// seeded cross-label negatives.
std::vector<VerificationPair> verification_pairs_from_dataset(
    const PatchDataset& dataset, const std::vector<Descriptor>& descriptors,
    uint64_t pairing_seed);

// View 0 of each label as reference; view v (v >= 1) as target v-1.
EvalReport matching_report_from_dataset(const PatchDataset& dataset,
                                        const std::vector<Descriptor>& descriptors);

// View 0 of each label queries the remaining views.
EvalReport retrieval_report_from_dataset(const PatchDataset& dataset,
                                         const std::vector<Descriptor>& descriptors);

// key=value block followed by a tab-separated per-query section.
std::string format_report(const EvalReport& report);

}  // namespace dfeat
