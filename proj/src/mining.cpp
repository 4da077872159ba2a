#include "dfeat/mining.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <string>

namespace dfeat {

namespace {

// Skip gradient flow through a distance this close to the sqrt kink.
constexpr double kDistanceGradFloor = 1e-9;

std::vector<Descriptor> descriptors_from_output(const FeatureMap& out) {
  std::vector<Descriptor> ds;
  ds.reserve(out.batch);
  for (int b = 0; b < out.batch; ++b) {
    const double* row = out.sample(b);
    ds.emplace_back(row, row + out.sample_size());
  }
  return ds;
}

FeatureMap gradients_to_featuremap(const std::vector<Descriptor>& grads) {
  FeatureMap fm(static_cast<int>(grads.size()), static_cast<int>(grads[0].size()), 1, 1);
  for (size_t i = 0; i < grads.size(); ++i) {
    std::copy(grads[i].begin(), grads[i].end(), fm.sample(static_cast<int>(i)));
  }
  return fm;
}

size_t count_labels(const PatchDataset& dataset) {
  std::map<uint32_t, int> counts;
  for (const PatchDataset::Record& r : dataset.records) ++counts[r.label];
  return counts.size();
}

}  // namespace

DistanceMatrix pairwise_distance_matrix(const std::vector<Descriptor>& anchors,
                                        const std::vector<Descriptor>& positives) {
  if (anchors.size() != positives.size()) {
    throw DimensionError("pairwise_distance_matrix: set sizes disagree");
  }
  const int n = static_cast<int>(anchors.size());
  if (n == 0) throw DimensionError("pairwise_distance_matrix: empty sets");
  const size_t dim = anchors[0].size();
  if (dim == 0) throw DimensionError("pairwise_distance_matrix: zero-dimensional descriptors");
  for (const Descriptor& v : anchors) {
    if (v.size() != dim) throw DimensionError("pairwise_distance_matrix: ragged anchors");
  }
  for (const Descriptor& v : positives) {
    if (v.size() != dim) throw DimensionError("pairwise_distance_matrix: ragged positives");
  }

  DistanceMatrix d(n);
  for (int i = 0; i < n; ++i) {
    const double* a = anchors[i].data();
    for (int j = 0; j < n; ++j) {
      const double* p = positives[j].data();
      double dot = 0.0;
      for (size_t k = 0; k < dim; ++k) dot += a[k] * p[k];
      d.at(i, j) = std::sqrt(std::max(0.0, 2.0 - 2.0 * dot));
    }
  }
  return d;
}

MiningResult hardest_negatives(const DistanceMatrix& d) {
  const int n = d.n;
  if (n < 2) throw DegenerateError("hardest_negatives: batch of " + std::to_string(n));
  MiningResult result(n);
  for (int i = 0; i < n; ++i) {
    MiningEntry& e = result[i];
    int row_idx = -1, col_idx = -1;
    double row_min = 0.0, col_min = 0.0;
    for (int k = 0; k < n; ++k) {
      if (k == i) continue;
      const double v = d.at(i, k);
      if (row_idx < 0 || v < row_min) {
        row_min = v;
        row_idx = k;
      }
    }
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double v = d.at(j, i);
      if (col_idx < 0 || v < col_min) {
        col_min = v;
        col_idx = j;
      }
    }
    e.row_min = row_min;
    e.col_min = col_min;
    if (col_min < row_min || (col_min == row_min && col_idx < row_idx)) {
      e.negative = col_min;
      e.index = col_idx;
      e.side = NegativeSide::Column;
    } else {
      e.negative = row_min;
      e.index = row_idx;
      e.side = NegativeSide::Row;
    }
  }
  return result;
}

std::vector<int> draw_random_negative_indices(int n, Rng& rng) {
  if (n < 2) throw DegenerateError("draw_random_negative_indices: batch of " + std::to_string(n));
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) {
    int j = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n - 1)));
    if (j >= i) ++j;
    idx[i] = j;
  }
  return idx;
}

MiningResult negatives_at(const DistanceMatrix& d, const std::vector<int>& indices) {
  if (static_cast<int>(indices.size()) != d.n) {
    throw DimensionError("negatives_at: one index per row required");
  }
  MiningResult result(d.n);
  for (int i = 0; i < d.n; ++i) {
    const int j = indices[i];
    if (j < 0 || j >= d.n || j == i) {
      throw ConstraintError("negatives_at: invalid negative index for row " +
                            std::to_string(i));
    }
    MiningEntry& e = result[i];
    e.row_min = e.col_min = e.negative = d.at(i, j);
    e.index = j;
    e.side = NegativeSide::Row;
  }
  return result;
}

LossResult triplet_margin_loss(const DistanceMatrix& d, const MiningResult& mining,
                               double margin) {
  if (static_cast<int>(mining.size()) != d.n) {
    throw DimensionError("triplet_margin_loss: mining size does not match matrix");
  }
  const int n = d.n;
  LossResult res;
  res.grad = DistanceMatrix(n);
  const double inv_n = 1.0 / n;
  for (int i = 0; i < n; ++i) {
    const MiningEntry& e = mining[i];
    const double term = margin + d.at(i, i) - e.negative;
    if (term > 0.0) {
      res.loss += term;
      res.active += 1;
      res.grad.at(i, i) += inv_n;
      if (e.side == NegativeSide::Row) {
        res.grad.at(i, e.index) -= inv_n;
      } else {
        res.grad.at(e.index, i) -= inv_n;
      }
    }
  }
  res.loss *= inv_n;
  return res;
}

void descriptor_gradients(const std::vector<Descriptor>& anchors,
                          const std::vector<Descriptor>& positives,
                          const DistanceMatrix& d, const DistanceMatrix& dloss_dd,
                          std::vector<Descriptor>* danchors,
                          std::vector<Descriptor>* dpositives) {
  const int n = d.n;
  const size_t dim = anchors[0].size();
  danchors->assign(n, Descriptor(dim, 0.0));
  dpositives->assign(n, Descriptor(dim, 0.0));
  // d_ij = sqrt(2 - 2<a_i,p_j>), so dd/da_i = -p_j/d_ij and dd/dp_j = -a_i/d_ij.
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double g = dloss_dd.at(i, j);
      if (g == 0.0) continue;
      const double dist = d.at(i, j);
      if (dist < kDistanceGradFloor) continue;  // subgradient 0 at the kink
      const double scale = -g / dist;
      double* da = (*danchors)[i].data();
      double* dp = (*dpositives)[j].data();
      const double* a = anchors[i].data();
      const double* p = positives[j].data();
      for (size_t k = 0; k < dim; ++k) {
        da[k] += scale * p[k];
        dp[k] += scale * a[k];
      }
    }
  }
}

double batch_loss(const std::vector<Descriptor>& anchors,
                  const std::vector<Descriptor>& positives, double margin,
                  const std::vector<int>* pinned_negatives) {
  const DistanceMatrix d = pairwise_distance_matrix(anchors, positives);
  const MiningResult mining =
      pinned_negatives ? negatives_at(d, *pinned_negatives) : hardest_negatives(d);
  return triplet_margin_loss(d, mining, margin).loss;
}

EpochStats train_epoch(Model& model, const PatchDataset& dataset,
                       const TrainConfig& config, Rng& rng, OptimizerState& state) {
  const size_t labels = count_labels(dataset);
  if (labels < static_cast<size_t>(config.batch_size)) {
    throw DegenerateError("train_epoch: dataset has " + std::to_string(labels) +
                          " labels, need " + std::to_string(config.batch_size));
  }
  const int batches = static_cast<int>(labels) / config.batch_size;

  const auto t0 = std::chrono::steady_clock::now();
  EpochStats stats;
  for (int bi = 0; bi < batches; ++bi) {
    const TripletBatch batch = sample_batch(dataset, config.batch_size, rng);
    try {
      std::vector<LayerCache> caches_a, caches_p;
      const FeatureMap out_a =
          model_forward(model, patches_to_input(batch.anchors), &caches_a);
      const FeatureMap out_p =
          model_forward(model, patches_to_input(batch.positives), &caches_p);
      const std::vector<Descriptor> da = descriptors_from_output(out_a);
      const std::vector<Descriptor> dp = descriptors_from_output(out_p);

      const DistanceMatrix dist = pairwise_distance_matrix(da, dp);
      const MiningResult mining =
          config.mining == MiningMode::Hard
              ? hardest_negatives(dist)
              : negatives_at(dist, draw_random_negative_indices(dist.n, rng));
      const LossResult loss = triplet_margin_loss(dist, mining, config.margin);

      std::vector<Descriptor> grad_a, grad_p;
      descriptor_gradients(da, dp, dist, loss.grad, &grad_a, &grad_p);

      ModelGrads grads = make_zero_grads(model);
      model_backward(model, caches_a, gradients_to_featuremap(grad_a), grads);
      model_backward(model, caches_p, gradients_to_featuremap(grad_p), grads);
      model_sgd_step(model, grads, state);

      stats.mean_loss += loss.loss;
      stats.active_fraction += static_cast<double>(loss.active) / dist.n;
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (batch " + std::to_string(bi) + ")");
    } catch (const DegenerateError& e) {
      throw DegenerateError(std::string(e.what()) + " (batch " + std::to_string(bi) + ")",
                            e.index());
    }
  }
  stats.mean_loss /= batches;
  stats.active_fraction /= batches;
  stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return stats;
}

std::vector<EpochStats> train_model(
    Model& model, const PatchDataset& dataset, const TrainConfig& config,
    const std::function<void(int, const EpochStats&)>& on_epoch) {
  Rng rng(config.seed);
  OptimizerState state =
      make_optimizer_state(model, config.lr, config.momentum, config.weight_decay);
  std::vector<EpochStats> history;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    EpochStats stats = train_epoch(model, dataset, config, rng, state);
    if (on_epoch) on_epoch(epoch, stats);
    history.push_back(stats);
  }
  return history;
}

}  // namespace dfeat
