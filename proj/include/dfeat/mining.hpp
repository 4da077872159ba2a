#pragma once

// Training core: the anchor/positive pairwise distance matrix, hardest
// in-batch negative selection with anchor swap, the margin loss with its
// gradient, and the epoch driver.

#include <cstdint>
#include <functional>
#include <vector>

#include "dfeat/net.hpp"
#include "dfeat/patchio.hpp"

namespace dfeat {

struct DistanceMatrix {
  int n = 0;
  std::vector<double> d;  // row-major n*n

  DistanceMatrix() = default;
  explicit DistanceMatrix(int n_) : n(n_), d(static_cast<size_t>(n_) * n_, 0.0) {}
  double at(int i, int j) const { return d[static_cast<size_t>(i) * n + j]; }
  double& at(int i, int j) { return d[static_cast<size_t>(i) * n + j]; }
};

// d_ij = sqrt(max(0, 2 - 2<a_i, p_j>)) for unit-norm inputs of any common
// dimension.
DistanceMatrix pairwise_distance_matrix(const std::vector<Descriptor>& anchors,
                                        const std::vector<Descriptor>& positives);

enum class NegativeSide : uint8_t { Row, Column };

// Mined negative for one triplet. row_min is the nearest non-matching
// positive to anchor i (min over row i, k != i); col_min the nearest
// non-matching anchor to positive i (min over column i, j != i); negative is
// the smaller of the two. Ties break toward the smallest index, and toward
// the row side when index and value both tie.
struct MiningEntry {
  double row_min = 0.0;
  double col_min = 0.0;
  double negative = 0.0;
  int index = -1;
  NegativeSide side = NegativeSide::Row;
};
using MiningResult = std::vector<MiningEntry>;

MiningResult hardest_negatives(const DistanceMatrix& d);

// The naive baseline: a uniformly sampled non-matching positive per anchor.
std::vector<int> draw_random_negative_indices(int n, Rng& rng);

// Mining entries pinned to the given positive-column index per row (row
// side); row_min/col_min both carry that entry's distance.
MiningResult negatives_at(const DistanceMatrix& d, const std::vector<int>& indices);

struct LossResult {
  double loss = 0.0;
  DistanceMatrix grad;  // dLoss/dD
  int active = 0;       // triplets with a strictly positive hinge term
};

// loss = (1/N) sum_i max(0, margin + d_ii - negative_i). The gradient holds
// +1/N at (i,i) and -1/N at the mined entry for each active term; a term at
// exactly zero contributes no gradient.
LossResult triplet_margin_loss(const DistanceMatrix& d, const MiningResult& mining,
                               double margin);

// Chains dLoss/dD back to the descriptor sets under the 2-2<a,p> distance.
void descriptor_gradients(const std::vector<Descriptor>& anchors,
                          const std::vector<Descriptor>& positives,
                          const DistanceMatrix& d, const DistanceMatrix& dloss_dd,
                          std::vector<Descriptor>* danchors,
                          std::vector<Descriptor>* dpositives);

enum class MiningMode : uint8_t { Hard, Random };

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0001;
  double margin = 1.0;
  int batch_size = 128;
  int epochs = 1;
  uint64_t seed = 0;
  MiningMode mining = MiningMode::Hard;
};

struct EpochStats {
  double mean_loss = 0.0;
  double active_fraction = 0.0;
  double seconds = 0.0;
};

// One pass of floor(labels / batch_size) sampled batches: describe both
// patch sets, mine, apply the margin loss and take an SGD step. Gradients
// from the anchor and positive branches accumulate into the shared weights.
EpochStats train_epoch(Model& model, const PatchDataset& dataset,
                       const TrainConfig& config, Rng& rng, OptimizerState& state);

// Runs config.epochs epochs with one RNG stream and a persistent optimizer.
std::vector<EpochStats> train_model(
    Model& model, const PatchDataset& dataset, const TrainConfig& config,
    const std::function<void(int, const EpochStats&)>& on_epoch = nullptr);

// Loss of one already-described batch with hardest mining, or with pinned
// negative indices when given; shared by train_epoch and the
// finite-difference harness.
double batch_loss(const std::vector<Descriptor>& anchors,
                  const std::vector<Descriptor>& positives, double margin,
                  const std::vector<int>* pinned_negatives = nullptr);

struct GradCheckResult {
  double max_rel_error = 0.0;
  size_t checked_coords = 0;
};

// Compares analytic whole-network gradients of the mined margin loss on a
// random batch against central finite differences, sampling
// `samples_per_array` coordinates per parameter array. Relative error uses
// max(1, |analytic|) as denominator.
GradCheckResult gradient_check(uint64_t seed, int batch_size,
                               int samples_per_array = 25, double step = 1e-6);

}  // namespace dfeat
