#include "truecam/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace truecam {

namespace {

std::vector<double> random_unit_vector(std::size_t n, Rng& rng) {
    std::vector<double> v(n, 0.0);
    for (auto& e : v) e = rng.normal();
    const double nv = linalg::norm(v);
    if (nv < 1e-300) {
        v.assign(n, 0.0);
        v[0] = 1.0;
        return v;
    }
    for (auto& e : v) e /= nv;
    return v;
}

void check_binary_labels(const std::vector<double>& scores,
                         const std::vector<int>& labels, const char* op) {
    if (scores.size() != labels.size() || scores.empty())
        throw std::invalid_argument(std::string(op) + ": scores and labels must be nonempty and equal length");
    bool pos = false, neg = false;
    for (int l : labels) {
        if (l == 1)
            pos = true;
        else if (l == 0)
            neg = true;
        else
            throw std::invalid_argument(std::string(op) + ": labels must be 0 or 1");
    }
    if (!pos || !neg)
        throw std::invalid_argument(std::string(op) + ": both classes must be present");
}

}  // namespace

double spectral_norm(const Matrix& w, std::size_t iterations, Rng& rng) {
    if (w.empty()) throw std::invalid_argument("spectral_norm: empty matrix");
    if (iterations < 1) throw std::invalid_argument("spectral_norm: iterations must be >= 1");

    std::vector<double> v = random_unit_vector(w.cols, rng);
    for (std::size_t it = 0; it < iterations; ++it) {
        const std::vector<double> u = linalg::matvec(w, v);
        std::vector<double> t = linalg::matvec_transposed(w, u);
        const double nt = linalg::norm(t);
        if (nt == 0.0) return 0.0;  // v landed in the null space; sigma_max(v) = 0
        for (auto& e : t) e /= nt;
        v = std::move(t);
    }
    return linalg::norm(linalg::matvec(w, v));
}

namespace {

struct LloydRun {
    Matrix centers;
    std::vector<std::size_t> assignments;
    double inertia = std::numeric_limits<double>::infinity();
};

std::size_t nearest_center(const Matrix& centers, std::span<const double> p) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centers.rows; ++c) {
        const double d = linalg::squared_distance(centers.row(c), p);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

Matrix kmeanspp_seed(const Matrix& x, std::size_t k, Rng& rng) {
    Matrix centers(k, x.cols, 0.0);
    const std::size_t first = rng.uniform_index(x.rows);
    std::copy_n(x.row(first).data(), x.cols, centers.row(0).data());

    std::vector<double> d2(x.rows, 0.0);
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < x.rows; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < c; ++j)
                best = std::min(best, linalg::squared_distance(x.row(i), centers.row(j)));
            d2[i] = best;
            total += best;
        }
        std::size_t pick;
        if (total <= 0.0) {
            pick = rng.uniform_index(x.rows);  // all points already covered
        } else {
            const double target = rng.uniform() * total;
            double acc = 0.0;
            pick = x.rows - 1;
            for (std::size_t i = 0; i < x.rows; ++i) {
                acc += d2[i];
                if (acc > target) {
                    pick = i;
                    break;
                }
            }
        }
        std::copy_n(x.row(pick).data(), x.cols, centers.row(c).data());
    }
    return centers;
}

LloydRun lloyd(const Matrix& x, std::size_t k, std::size_t max_iters, Rng& rng) {
    LloydRun run;
    run.centers = kmeanspp_seed(x, k, rng);
    run.assignments.assign(x.rows, 0);

    std::vector<std::size_t> counts(k, 0);
    for (std::size_t it = 0; it < max_iters; ++it) {
        bool changed = (it == 0);
        for (std::size_t i = 0; i < x.rows; ++i) {
            const std::size_t a = nearest_center(run.centers, x.row(i));
            if (a != run.assignments[i]) {
                run.assignments[i] = a;
                changed = true;
            }
        }
        if (!changed) break;

        Matrix next(k, x.cols, 0.0);
        counts.assign(k, 0);
        for (std::size_t i = 0; i < x.rows; ++i) {
            const std::size_t a = run.assignments[i];
            counts[a]++;
            auto dst = next.row(a);
            auto src = x.row(i);
            for (std::size_t c = 0; c < x.cols; ++c) dst[c] += src[c];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                // revive an empty cluster at the point farthest from its center
                std::size_t far = 0;
                double far_d = -1.0;
                for (std::size_t i = 0; i < x.rows; ++i) {
                    const double d = linalg::squared_distance(
                        x.row(i), run.centers.row(run.assignments[i]));
                    if (d > far_d) {
                        far_d = d;
                        far = i;
                    }
                }
                std::copy_n(x.row(far).data(), x.cols, next.row(c).data());
            } else {
                auto dst = next.row(c);
                for (std::size_t j = 0; j < x.cols; ++j) dst[j] /= static_cast<double>(counts[c]);
            }
        }
        run.centers = std::move(next);
    }

    run.inertia = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) {
        run.assignments[i] = nearest_center(run.centers, x.row(i));
        run.inertia += linalg::squared_distance(x.row(i), run.centers.row(run.assignments[i]));
    }
    return run;
}

}  // namespace

KMeansResult kmeans(const Matrix& x, std::size_t k, std::size_t max_iters,
                    std::size_t restarts, Rng& rng) {
    if (x.empty()) throw std::invalid_argument("kmeans: empty matrix");
    if (k < 1 || k > x.rows)
        throw std::invalid_argument("kmeans: k must be in [1, rows]");
    if (restarts < 1) throw std::invalid_argument("kmeans: restarts must be >= 1");

    LloydRun best;
    for (std::size_t r = 0; r < restarts; ++r) {
        LloydRun run = lloyd(x, k, max_iters, rng);
        if (run.inertia < best.inertia) best = std::move(run);
    }
    return {std::move(best.centers), std::move(best.assignments), best.inertia};
}

double silhouette(const Matrix& x, const std::vector<std::size_t>& assignments) {
    if (x.rows != assignments.size() || x.empty())
        throw std::invalid_argument("silhouette: assignments must match matrix rows");

    // remap cluster ids to a dense range
    std::vector<std::size_t> ids = assignments;
    std::vector<std::size_t> uniq = ids;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    const std::size_t k = uniq.size();
    if (k < 2) throw std::invalid_argument("silhouette: need at least 2 clusters");
    for (auto& a : ids)
        a = static_cast<std::size_t>(
            std::lower_bound(uniq.begin(), uniq.end(), a) - uniq.begin());

    std::vector<std::size_t> counts(k, 0);
    for (auto a : ids) counts[a]++;

    double total = 0.0;
    std::vector<double> cluster_sum(k, 0.0);
    for (std::size_t i = 0; i < x.rows; ++i) {
        if (counts[ids[i]] == 1) continue;  // singleton scores 0
        cluster_sum.assign(k, 0.0);
        for (std::size_t j = 0; j < x.rows; ++j) {
            if (j == i) continue;
            cluster_sum[ids[j]] +=
                std::sqrt(linalg::squared_distance(x.row(i), x.row(j)));
        }
        const double a = cluster_sum[ids[i]] / static_cast<double>(counts[ids[i]] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
            if (c == ids[i] || counts[c] == 0) continue;
            b = std::min(b, cluster_sum[c] / static_cast<double>(counts[c]));
        }
        const double denom = std::max(a, b);
        total += denom > 0.0 ? (b - a) / denom : 0.0;
    }
    return total / static_cast<double>(x.rows);
}

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_binary_labels(scores, labels, "auroc");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // average ranks over tie groups; Mann-Whitney U for the positive class
    double rank_sum_pos = 0.0;
    std::size_t n_pos = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
        for (std::size_t t = i; t < j; ++t) {
            if (labels[order[t]] == 1) {
                rank_sum_pos += avg_rank;
                ++n_pos;
            }
        }
        i = j;
    }
    const std::size_t n_neg = scores.size() - n_pos;
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                        static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

RocCurve roc_pr_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_binary_labels(scores, labels, "roc_pr_curve");

    std::vector<double> uniq = scores;
    std::sort(uniq.begin(), uniq.end(), std::greater<>());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

    double n_pos = 0.0, n_neg = 0.0;
    for (int l : labels) (l == 1 ? n_pos : n_neg) += 1.0;

    RocCurve curve;
    auto emit = [&](double threshold) {
        double tp = 0.0, fp = 0.0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (scores[i] > threshold) (labels[i] == 1 ? tp : fp) += 1.0;
        }
        curve.thresholds.push_back(threshold);
        curve.tpr.push_back(tp / n_pos);
        curve.fpr.push_back(fp / n_neg);
        curve.precision.push_back(tp + fp > 0.0 ? tp / (tp + fp) : 1.0);
    };

    for (double t : uniq) emit(t);  // uniq[0] == max -> (0, 0)
    emit(-std::numeric_limits<double>::infinity());  // -> (1, 1)
    return curve;
}

double roc_auc(const RocCurve& curve) {
    double area = 0.0;
    for (std::size_t i = 1; i < curve.fpr.size(); ++i) {
        area += (curve.fpr[i] - curve.fpr[i - 1]) *
                0.5 * (curve.tpr[i] + curve.tpr[i - 1]);
    }
    return area;
}

}  // namespace truecam
