#pragma once

#include <optional>
#include <span>
#include <vector>

#include "rankuda/ad.hpp"
#include "rankuda/encoder.hpp"

namespace rankuda {

// Weights for the combined objective:
//   L = L_pre + mmd*L_mmd + center*L_ct + rectification*L_rec
//         + correlation*L_cor + mse*L_mse
struct LossWeights {
  double mmd = 1.0;
  double center = 2e-1;
  double rectification = 1e-3;
  double correlation = 1e1;
  double mse = 1e2;
};

// One training batch at the feature level. Rank features are rows of
// first-minus-second encoder features; single features feed the source
// quality regression.
struct RankingBatch {
  ad::Tensor source_features;               // (N, d) rank features
  std::vector<int> source_labels;           // N in {0,1}
  ad::Tensor target_features;               // (K, d) rank features; may be unset
  ad::Tensor source_single_features;        // (M, d) per-image features
  std::vector<double> source_single_targets;  // M normalized ground truths
};

struct CorrDiagnostics {
  std::vector<int> degenerate_dims;  // variance below the guard threshold
};

struct LossBreakdown {
  double pre = 0.0, mmd = 0.0, ct = 0.0, rec = 0.0, cor = 0.0, mse = 0.0;
  double total = 0.0;
};

ad::Tensor mse_source(const ad::Tensor& predictions, std::span<const double> targets);

// Standard binary cross-entropy with probabilities clamped to
// [1e-7, 1 - 1e-7].
ad::Tensor bce_rank(const ad::Tensor& probabilities, std::span<const int> labels);

// Mean squared off-diagonal Pearson correlation between feature dimensions,
// (1/d^2)*||C - I||_F^2 (the diagonal is masked out, so it contributes
// exactly zero). Dimensions with variance below 1e-12 are treated as
// uncorrelated and reported in the diagnostics. `squared=false` switches to
// the plain Frobenius norm for sensitivity checks.
ad::Tensor corr_penalty(const ad::Tensor& features, bool squared = true,
                        CorrDiagnostics* diag = nullptr);

// Median of squared pairwise distances over the pooled rows (self-pairs
// excluded); floored at 1e-8 when all points coincide. Not part of the
// gradient graph.
double median_bandwidth(const ad::Tensor& source_features,
                        const ad::Tensor& target_features);
double median_bandwidth(std::span<const std::vector<double>> rows);

// Biased (V-statistic) Gaussian-kernel MMD estimator.
ad::Tensor mmd_loss(const ad::Tensor& source_features,
                    const ad::Tensor& target_features, double sigma2);

ad::Tensor center_loss(const ad::Tensor& features, std::span<const int> labels,
                       const ad::Tensor& center0, const ad::Tensor& center1);

ad::Tensor rectification_loss(const ad::Tensor& features,
                              const ad::Tensor& probabilities,
                              const ad::Tensor& center0, const ad::Tensor& center1);

ad::Tensor mse_target(const ad::Tensor& predictions,
                      std::span<const double> pseudo_labels);

// Combined objective. Terms with zero weight are skipped entirely (their
// breakdown entry reads 0). `fixed_bandwidth` overrides the per-batch median
// so gradient checks can hold sigma^2 constant.
ad::Tensor total_loss(const RankingBatch& batch, const BoundModel& model,
                      const LossWeights& weights, LossBreakdown* breakdown = nullptr,
                      std::optional<double> fixed_bandwidth = std::nullopt,
                      bool corr_squared = true);

}  // namespace rankuda
