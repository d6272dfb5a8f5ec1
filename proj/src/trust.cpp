#include "truecam/trust.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_map>

#include "truecam/numerics.hpp"
#include "truecam/rng.hpp"

namespace truecam {

namespace {

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

void check_binary_probs(const Matrix& probs) {
    if (probs.rows == 0) throw std::invalid_argument("no tile probabilities");
    if (probs.cols != 2)
        throw std::invalid_argument("ambiguity is defined for two classes only");
}

void check_prob_entries(const Matrix& probs) {
    for (double v : probs.data)
        if (!(v >= 0.0 && v <= 1.0))
            throw std::invalid_argument("probabilities must lie in [0,1]");
}

std::size_t nearest_center(const Matrix& centers, std::span<const double> x) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centers.rows; ++c) {
        const double d = linalg::squared_distance(centers.row(c), x);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

std::size_t least_ambiguous_index(const std::vector<double>& ambiguities) {
    return static_cast<std::size_t>(
        std::min_element(ambiguities.begin(), ambiguities.end()) -
        ambiguities.begin());
}

void check_sets_attached(const std::vector<PatientRecord>& records) {
    for (const auto& r : records)
        if (!r.set_attached)
            throw std::invalid_argument("record " + r.patient_id +
                                        " has no prediction set attached");
}

Breakdown classify_set(const PredictionSet& set, int label) {
    if (set.size() == 0) return Breakdown::kEmpty;
    if (set.size() >= 2) return Breakdown::kAbstention;
    return set.contains(label) ? Breakdown::kSingleCorrect
                               : Breakdown::kSingleIncorrect;
}

}  // namespace

double ambiguity_score(std::span<const double> probs) {
    if (probs.size() != 2)
        throw std::invalid_argument("ambiguity is defined for two classes only");
    for (double p : probs)
        if (!(p >= 0.0 && p <= 1.0))
            throw std::invalid_argument("probabilities must lie in [0,1]");
    return 1.0 - std::abs(probs[0] - probs[1]);
}

std::vector<double> LogisticModel::predict_pair(std::span<const double> x) const {
    if (x.size() != w.size())
        throw std::invalid_argument("logistic input dimension mismatch");
    const double p1 = sigmoid(linalg::dot(w, x) + b);
    return {1.0 - p1, p1};
}

LogisticModel fit_logistic(const Matrix& x, const std::vector<int>& labels,
                           double l2, std::size_t max_iter) {
    if (x.rows == 0 || x.cols == 0) throw std::invalid_argument("empty design matrix");
    if (labels.size() != x.rows)
        throw std::invalid_argument("labels do not match the design matrix");
    if (!(l2 >= 0.0) || !std::isfinite(l2))
        throw std::invalid_argument("l2 must be finite and >= 0");
    if (max_iter == 0) throw std::invalid_argument("max_iter must be positive");
    if (!x.all_finite()) throw std::invalid_argument("non-finite design matrix");
    bool has0 = false;
    bool has1 = false;
    for (int y : labels) {
        if (y == 0) has0 = true;
        else if (y == 1) has1 = true;
        else throw std::invalid_argument("labels must be 0 or 1");
    }
    if (!has0 || !has1)
        throw std::invalid_argument("both classes required to fit the proxy");

    const std::size_t d = x.cols;
    LogisticModel model;
    model.w.assign(d, 0.0);

    // Newton steps on the ridge-penalized log-loss; the bias is unpenalized
    // but gets a tiny diagonal so the system stays positive definite.
    for (std::size_t iter = 0; iter < max_iter; ++iter) {
        std::vector<double> grad(d + 1, 0.0);
        Matrix hess(d + 1, d + 1);
        for (std::size_t i = 0; i < x.rows; ++i) {
            const auto xi = x.row(i);
            const double p = sigmoid(linalg::dot(model.w, xi) + model.b);
            const double r = p - static_cast<double>(labels[i]);
            const double wgt = p * (1.0 - p);
            for (std::size_t a = 0; a < d; ++a) {
                grad[a] += r * xi[a];
                for (std::size_t bcol = a; bcol < d; ++bcol)
                    hess.at(a, bcol) += wgt * xi[a] * xi[bcol];
                hess.at(a, d) += wgt * xi[a];
            }
            grad[d] += r;
            hess.at(d, d) += wgt;
        }
        for (std::size_t a = 0; a < d; ++a) {
            grad[a] += l2 * model.w[a];
            hess.at(a, a) += l2;
            for (std::size_t bcol = a + 1; bcol < d; ++bcol)
                hess.at(bcol, a) = hess.at(a, bcol);
        }
        hess.at(d, d) += 1e-10;
        for (std::size_t a = 0; a < d; ++a) hess.at(d, a) = hess.at(a, d);

        double gnorm = 0.0;
        for (double g : grad) gnorm += g * g;
        if (std::sqrt(gnorm) < 1e-9 * static_cast<double>(x.rows + 1)) break;

        const Matrix chol = linalg::cholesky(hess);
        const std::vector<double> step = linalg::cholesky_solve(chol, grad);
        for (std::size_t a = 0; a < d; ++a) model.w[a] -= step[a];
        model.b -= step[d];
    }
    return model;
}

std::vector<double> AmbiguityModel::tile_probs(std::span<const double> x) const {
    if (kind == Kind::kSngpHead) {
        const auto out = predict(x, head);
        return out.probs;
    }
    return proxy.predict_pair(x);
}

double AmbiguityModel::score(std::span<const double> x) const {
    return ambiguity_score(tile_probs(x));
}

AmbiguityModel make_head_ambiguity(SngpHead head) {
    if (head.posterior.num_classes != 2)
        throw std::invalid_argument("ambiguity needs a binary head");
    AmbiguityModel m;
    m.kind = AmbiguityModel::Kind::kSngpHead;
    m.head = std::move(head);
    return m;
}

AmbiguityModel make_proxy_ambiguity(const Matrix& x, const std::vector<int>& labels,
                                    double l2) {
    AmbiguityModel m;
    m.kind = AmbiguityModel::Kind::kLogisticProxy;
    m.proxy = fit_logistic(x, labels, l2);
    return m;
}

EatFilter fit_eat_cluster(const Matrix& tiles, const Matrix& tile_probs,
                          const std::vector<int>& slide_labels, std::size_t k,
                          std::uint64_t seed, double dominance_cutoff) {
    if (k < 2) throw std::invalid_argument("need at least two clusters");
    if (tiles.rows < k) throw std::invalid_argument("fewer tiles than clusters");
    check_binary_probs(tile_probs);
    check_prob_entries(tile_probs);
    if (tile_probs.rows != tiles.rows || slide_labels.size() != tiles.rows)
        throw std::invalid_argument("tiles, probabilities, and labels must align");
    for (int y : slide_labels)
        if (y != 0 && y != 1)
            throw std::invalid_argument("slide labels must be 0 or 1");
    if (!(dominance_cutoff > 0.5 && dominance_cutoff <= 1.0))
        throw std::invalid_argument("dominance cutoff must be in (0.5, 1]");

    Rng rng(seed);
    const KMeansResult km = kmeans(tiles, k, 100, 8, rng);

    std::vector<std::size_t> count(k, 0);
    std::vector<std::size_t> ones(k, 0);
    std::vector<double> ambiguity_sum(k, 0.0);
    for (std::size_t i = 0; i < tiles.rows; ++i) {
        const std::size_t c = km.assignments[i];
        ++count[c];
        ones[c] += static_cast<std::size_t>(slide_labels[i]);
        ambiguity_sum[c] += ambiguity_score(tile_probs.row(i));
    }

    bool found = false;
    std::size_t best = 0;
    double best_dominance = 2.0;
    double best_ambiguity = -1.0;
    for (std::size_t c = 0; c < k; ++c) {
        if (count[c] == 0)
            throw std::runtime_error("k-means produced an empty cluster");
        const double frac1 =
            static_cast<double>(ones[c]) / static_cast<double>(count[c]);
        const double dominance = std::max(frac1, 1.0 - frac1);
        if (dominance >= dominance_cutoff) continue;
        const double mean_ambiguity =
            ambiguity_sum[c] / static_cast<double>(count[c]);
        if (!found || dominance < best_dominance ||
            (dominance == best_dominance && mean_ambiguity > best_ambiguity)) {
            found = true;
            best = c;
            best_dominance = dominance;
            best_ambiguity = mean_ambiguity;
        }
    }
    if (!found)
        throw std::runtime_error(
            "every cluster is label-dominated; no ambiguous cluster to eliminate");

    EatFilter f;
    f.mode = EatFilter::Mode::kCluster;
    f.centers = km.centers;
    f.ambiguous_cluster_id = best;
    f.dominance_cutoff = dominance_cutoff;
    return f;
}

EatFilter fit_eat_threshold(const std::vector<double>& train_ambiguities,
                            double target_rate) {
    if (train_ambiguities.empty())
        throw std::invalid_argument("no training ambiguities");
    if (!(target_rate >= 0.0 && target_rate < 1.0))
        throw std::invalid_argument("elimination rate must be in [0,1)");
    for (double a : train_ambiguities)
        if (!std::isfinite(a)) throw std::invalid_argument("non-finite ambiguity");

    std::vector<double> sorted = train_ambiguities;
    std::sort(sorted.begin(), sorted.end());
    const auto n = static_cast<double>(sorted.size());
    const double raw = std::ceil(n * (1.0 - target_rate));
    const auto idx = static_cast<std::size_t>(
        std::clamp(raw - 1.0, 0.0, n - 1.0));

    EatFilter f;
    f.mode = EatFilter::Mode::kThreshold;
    f.threshold = sorted[idx];
    f.target_elimination_rate = target_rate;
    return f;
}

std::vector<std::size_t> eliminate_tiles(const Matrix& slide_tiles,
                                         const std::vector<double>& slide_ambiguities,
                                         const EatFilter& filter) {
    if (slide_tiles.rows == 0) throw std::invalid_argument("empty slide");
    if (slide_ambiguities.size() != slide_tiles.rows)
        throw std::invalid_argument("ambiguities must align with the slide tiles");

    std::vector<std::size_t> kept;
    if (filter.mode == EatFilter::Mode::kCluster) {
        if (filter.centers.empty())
            throw std::invalid_argument("cluster filter is not fitted");
        if (filter.centers.cols != slide_tiles.cols)
            throw std::invalid_argument("tile dimension does not match the filter");
        for (std::size_t i = 0; i < slide_tiles.rows; ++i)
            if (nearest_center(filter.centers, slide_tiles.row(i)) !=
                filter.ambiguous_cluster_id)
                kept.push_back(i);
    } else {
        for (std::size_t i = 0; i < slide_tiles.rows; ++i)
            if (!(slide_ambiguities[i] > filter.threshold)) kept.push_back(i);
    }
    if (kept.empty()) kept.push_back(least_ambiguous_index(slide_ambiguities));
    return kept;
}

std::vector<std::size_t> eat_retained_indices(const Matrix& tiles,
                                              const std::vector<double>& ambiguities,
                                              const Manifest& manifest,
                                              const EatFilter& filter) {
    if (manifest.rows.size() != tiles.rows)
        throw std::invalid_argument("manifest does not match the tile matrix");
    if (ambiguities.size() != tiles.rows)
        throw std::invalid_argument("ambiguities do not match the tile matrix");

    std::vector<std::string> slide_order;
    std::unordered_map<std::string, std::vector<std::size_t>> by_slide;
    for (std::size_t i = 0; i < manifest.rows.size(); ++i) {
        const auto& id = manifest.rows[i].slide_id;
        auto [it, fresh] = by_slide.try_emplace(id);
        if (fresh) slide_order.push_back(id);
        it->second.push_back(i);
    }

    std::vector<std::size_t> retained;
    for (const auto& id : slide_order) {
        const auto& rows = by_slide[id];
        Matrix sub(rows.size(), tiles.cols);
        std::vector<double> sub_amb(rows.size());
        for (std::size_t j = 0; j < rows.size(); ++j) {
            const auto src = tiles.row(rows[j]);
            std::copy(src.begin(), src.end(), sub.row(j).begin());
            sub_amb[j] = ambiguities[rows[j]];
        }
        for (std::size_t j : eliminate_tiles(sub, sub_amb, filter))
            retained.push_back(rows[j]);
    }
    std::sort(retained.begin(), retained.end());
    return retained;
}

double ood_score_probability(const Matrix& tile_probs) {
    if (tile_probs.rows == 0) throw std::invalid_argument("no tiles to score");
    if (tile_probs.cols == 0) throw std::invalid_argument("no classes to score");
    check_prob_entries(tile_probs);
    double sum = 0.0;
    for (std::size_t i = 0; i < tile_probs.rows; ++i) {
        const auto row = tile_probs.row(i);
        sum += *std::max_element(row.begin(), row.end());
    }
    return 1.0 - sum / static_cast<double>(tile_probs.rows);
}

double ood_score_uncertainty(const std::vector<double>& tile_uncertainties,
                             std::size_t delta) {
    if (tile_uncertainties.empty()) throw std::invalid_argument("no tiles to score");
    if (delta == 0) throw std::invalid_argument("delta must be at least 1");
    for (double u : tile_uncertainties)
        if (!std::isfinite(u) || u < 0.0)
            throw std::invalid_argument("uncertainties must be finite and >= 0");

    std::vector<double> sorted = tile_uncertainties;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t m = std::min(delta, sorted.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < m; ++i) sum += sorted[i];
    return sum / static_cast<double>(m);
}

double patient_ood_score(const Matrix& tile_probs,
                         const std::vector<double>& tile_uncertainties,
                         const OodGate& gate) {
    if (gate.score_kind == OodScoreKind::kProbability)
        return ood_score_probability(tile_probs);
    return ood_score_uncertainty(tile_uncertainties, gate.delta);
}

bool is_ood(double score, const OodGate& gate) { return score > gate.threshold; }

double fit_gate_threshold(const std::vector<double>& scores,
                          const std::vector<int>& ood_flags, GatePolicy policy,
                          double target) {
    if (policy == GatePolicy::kFixed)
        throw std::invalid_argument("fixed gates take their threshold directly");
    if (scores.size() != ood_flags.size())
        throw std::invalid_argument("scores and flags must align");
    if (!(target >= 0.0 && target <= 1.0))
        throw std::invalid_argument("target rate must be in [0,1]");
    std::size_t n_ood = 0;
    for (int f : ood_flags) {
        if (f != 0 && f != 1) throw std::invalid_argument("flags must be 0 or 1");
        n_ood += static_cast<std::size_t>(f);
    }
    if (n_ood == 0 || n_ood == scores.size())
        throw std::invalid_argument("tuning stream needs both in-domain and ood records");
    for (double s : scores)
        if (!std::isfinite(s)) throw std::invalid_argument("non-finite score");

    std::vector<double> distinct = scores;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

    std::vector<double> candidates;
    candidates.push_back(distinct.front() - 1.0);
    for (std::size_t i = 0; i + 1 < distinct.size(); ++i)
        candidates.push_back(0.5 * (distinct[i] + distinct[i + 1]));
    candidates.push_back(distinct.back());

    const auto n_ind = scores.size() - n_ood;
    const double eps = 1e-9;
    bool found = false;
    double chosen = 0.0;
    for (const double c : candidates) {
        std::size_t tp = 0;
        std::size_t fp = 0;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (scores[i] > c) {
                if (ood_flags[i] == 1) ++tp;
                else ++fp;
            }
        }
        const double tpr = static_cast<double>(tp) / static_cast<double>(n_ood);
        const double fpr = static_cast<double>(fp) / static_cast<double>(n_ind);
        if (policy == GatePolicy::kTargetTpr) {
            // the largest threshold still reaching the target keeps the most
            // in-domain data
            if (tpr >= target - eps && (!found || c > chosen)) {
                found = true;
                chosen = c;
            }
        } else {
            // the smallest threshold within the false-positive budget flags
            // the most ood data
            if (fpr <= target + eps && (!found || c < chosen)) {
                found = true;
                chosen = c;
            }
        }
    }
    if (!found) throw std::runtime_error("gate target unattainable on this stream");
    return chosen;
}

DscResult dsc_filter(const std::vector<double>& record_scores, const OodGate& gate) {
    if (record_scores.empty()) throw std::invalid_argument("empty cohort");
    DscResult result;
    for (std::size_t i = 0; i < record_scores.size(); ++i) {
        if (is_ood(record_scores[i], gate)) result.excluded.push_back(i);
        else result.retained.push_back(i);
    }
    return result;
}

std::vector<PatientRecord> aggregate(const Matrix& tile_probs,
                                     const Manifest& manifest) {
    if (manifest.rows.empty()) throw std::invalid_argument("empty manifest");
    if (tile_probs.rows != manifest.rows.size())
        throw std::invalid_argument("tile probabilities do not match the manifest");
    if (tile_probs.cols < 2) throw std::invalid_argument("need at least two classes");
    check_prob_entries(tile_probs);

    const std::size_t K = tile_probs.cols;

    struct SlideAcc {
        std::vector<double> sum;
        std::size_t tiles = 0;
    };
    struct PatientAcc {
        std::vector<std::string> slide_order;
        std::unordered_map<std::string, SlideAcc> slides;
        int label = 0;
        std::string sex;
        std::string race_group;
    };

    std::vector<std::string> patient_order;
    std::unordered_map<std::string, PatientAcc> patients;
    std::unordered_map<std::string, std::string> slide_owner;

    for (std::size_t i = 0; i < manifest.rows.size(); ++i) {
        const auto& row = manifest.rows[i];
        if (row.tile_id.empty() || row.slide_id.empty() || row.patient_id.empty())
            throw std::runtime_error("orphan tile with missing ids");
        auto [owner, fresh_slide] = slide_owner.emplace(row.slide_id, row.patient_id);
        if (!fresh_slide && owner->second != row.patient_id)
            throw std::runtime_error("slide " + row.slide_id +
                                     " mapped to two patients");

        auto [pit, fresh_patient] = patients.try_emplace(row.patient_id);
        PatientAcc& acc = pit->second;
        if (fresh_patient) {
            patient_order.push_back(row.patient_id);
            acc.label = row.label;
            acc.sex = row.sex;
            acc.race_group = row.race_group;
        } else if (acc.label != row.label || acc.sex != row.sex ||
                   acc.race_group != row.race_group) {
            throw std::runtime_error("conflicting rows for patient " +
                                     row.patient_id);
        }

        auto [sit, fresh] = acc.slides.try_emplace(row.slide_id);
        if (fresh) {
            acc.slide_order.push_back(row.slide_id);
            sit->second.sum.assign(K, 0.0);
        }
        const auto probs = tile_probs.row(i);
        for (std::size_t kk = 0; kk < K; ++kk) sit->second.sum[kk] += probs[kk];
        ++sit->second.tiles;
    }

    std::vector<PatientRecord> records;
    records.reserve(patient_order.size());
    for (const auto& pid : patient_order) {
        PatientAcc& acc = patients[pid];
        PatientRecord rec;
        rec.patient_id = pid;
        rec.label = acc.label;
        rec.sex = acc.sex;
        rec.race_group = acc.race_group;
        rec.slide_ids = acc.slide_order;
        rec.slide_probs = Matrix(acc.slide_order.size(), K);
        rec.probs.assign(K, 0.0);
        for (std::size_t s = 0; s < acc.slide_order.size(); ++s) {
            const SlideAcc& sa = acc.slides[acc.slide_order[s]];
            for (std::size_t kk = 0; kk < K; ++kk) {
                const double mean = sa.sum[kk] / static_cast<double>(sa.tiles);
                rec.slide_probs.at(s, kk) = mean;
                rec.probs[kk] += mean;
            }
        }
        for (double& v : rec.probs) v /= static_cast<double>(acc.slide_order.size());
        records.push_back(std::move(rec));
    }
    return records;
}

void attach_sets(std::vector<PatientRecord>& records,
                 const ConformalCalibrator& calibrator) {
    for (auto& rec : records) {
        rec.set = predict_set(rec.probs, calibrator);
        rec.set_attached = true;
        rec.breakdown = classify_set(rec.set, rec.label);
    }
}

void attach_crc_sets(std::vector<PatientRecord>& records, double rho) {
    for (auto& rec : records) {
        rec.set = crc_set(rec.probs, rho);
        rec.set_attached = true;
        rec.breakdown = classify_set(rec.set, rec.label);
    }
}

BreakdownCounts breakdown(const std::vector<PatientRecord>& records) {
    check_sets_attached(records);
    BreakdownCounts counts;
    for (const auto& rec : records) {
        switch (rec.breakdown) {
            case Breakdown::kSingleCorrect: ++counts.single_correct; break;
            case Breakdown::kSingleIncorrect: ++counts.single_incorrect; break;
            case Breakdown::kAbstention: ++counts.abstention; break;
            case Breakdown::kEmpty: ++counts.empty; break;
        }
    }
    return counts;
}

std::optional<double> da_error_rate(const std::vector<PatientRecord>& records) {
    const BreakdownCounts counts = breakdown(records);
    const std::size_t singles = counts.single_correct + counts.single_incorrect;
    if (singles == 0) return std::nullopt;
    return static_cast<double>(counts.single_incorrect) /
           static_cast<double>(singles);
}

double fairness_gap(const std::vector<PatientRecord>& records, FairnessMetric metric,
                    GroupField field, std::size_t min_group) {
    if (records.empty()) throw std::invalid_argument("no records");
    if (metric == FairnessMetric::kAvgSetSize) check_sets_attached(records);

    const auto group_of = [&](const PatientRecord& r) -> const std::string& {
        return field == GroupField::kSex ? r.sex : r.race_group;
    };

    std::unordered_map<std::string, std::size_t> sizes;
    for (const auto& r : records) ++sizes[group_of(r)];

    static const std::string kOthers = "Others";
    const auto effective_group = [&](const PatientRecord& r) -> const std::string& {
        const std::string& g = group_of(r);
        return sizes.at(g) < min_group ? kOthers : g;
    };

    struct GroupAcc {
        double sum = 0.0;
        std::size_t n = 0;
    };
    std::unordered_map<std::string, GroupAcc> groups;
    for (const auto& r : records) {
        GroupAcc& acc = groups[effective_group(r)];
        ++acc.n;
        if (metric == FairnessMetric::kAccuracy) {
            const auto top = static_cast<int>(
                std::max_element(r.probs.begin(), r.probs.end()) - r.probs.begin());
            acc.sum += top == r.label ? 1.0 : 0.0;
        } else {
            acc.sum += static_cast<double>(r.set.size());
        }
    }
    if (groups.size() < 2)
        throw std::runtime_error("need at least two groups after merging");

    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const auto& [_, acc] : groups) {
        const double value = acc.sum / static_cast<double>(acc.n);
        lo = std::min(lo, value);
        hi = std::max(hi, value);
    }
    return hi - lo;
}

}  // namespace truecam
