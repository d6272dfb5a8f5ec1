#pragma once

#include <cstddef>
#include <vector>

#include "truecam/matrix.hpp"
#include "truecam/rng.hpp"

namespace truecam {

/// Largest-singular-value estimate of w via power iteration on w^T w,
/// started from a seeded random unit vector. Runs exactly `iterations`
/// steps; there is no early-exit tolerance, so the cost is deterministic.
double spectral_norm(const Matrix& w, std::size_t iterations, Rng& rng);

struct KMeansResult {
    Matrix centers;  // k x dim
    std::vector<std::size_t> assignments;
    double inertia = 0.0;  // sum of squared distances to assigned centers
};

/// Lloyd's algorithm with k-means++ seeding; keeps the best of `restarts`
/// runs by inertia. Deterministic given the rng state. Within a run,
/// iteration stops early only when assignments are stable.
KMeansResult kmeans(const Matrix& x, std::size_t k, std::size_t max_iters,
                    std::size_t restarts, Rng& rng);

/// Mean silhouette coefficient over all points, in [-1, 1].
/// Convention: a point in a singleton cluster scores 0, and a(i) = b(i) = 0
/// (duplicate points) also scores 0.
double silhouette(const Matrix& x, const std::vector<std::size_t>& assignments);

/// Mann-Whitney AUROC of `scores` against binary `labels`; tied pairs count
/// one half. Requires both classes present.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

/// ROC / precision-recall sweep. An item is classified positive when its
/// score is strictly greater than the threshold. Thresholds descend from the
/// maximum score (nothing positive, point (0,0)) to -infinity (everything
/// positive, point (1,1)). Precision with zero predicted positives is 1.
struct RocCurve {
    std::vector<double> thresholds;
    std::vector<double> tpr;
    std::vector<double> fpr;
    std::vector<double> precision;
};

RocCurve roc_pr_curve(const std::vector<double>& scores, const std::vector<int>& labels);

/// Trapezoidal area under an roc_pr_curve result.
double roc_auc(const RocCurve& curve);

}  // namespace truecam
