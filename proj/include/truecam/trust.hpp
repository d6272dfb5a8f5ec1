#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "truecam/conformal.hpp"
#include "truecam/data.hpp"
#include "truecam/matrix.hpp"
#include "truecam/sngp.hpp"

namespace truecam {

/// 1 - |p0 - p1| for a binary probability pair: 1 is maximally confusing,
/// 0 fully discernible. Binary-only by definition.
double ambiguity_score(std::span<const double> probs);

/// Ridge-regularized logistic regression, fit by Newton iterations. Stands
/// in for a heavier tabular model when scoring ambiguity on embeddings that
/// the main head never saw.
struct LogisticModel {
    std::vector<double> w;
    double b = 0.0;

    /// (p(y=0), p(y=1))
    std::vector<double> predict_pair(std::span<const double> x) const;
};

LogisticModel fit_logistic(const Matrix& x, const std::vector<int>& labels,
                           double l2 = 1.0, std::size_t max_iter = 50);

/// Source of binary tile probabilities for ambiguity scoring: either the
/// trained head itself or the logistic proxy.
struct AmbiguityModel {
    enum class Kind { kSngpHead, kLogisticProxy };
    Kind kind = Kind::kLogisticProxy;
    SngpHead head;
    LogisticModel proxy;

    std::vector<double> tile_probs(std::span<const double> x) const;
    double score(std::span<const double> x) const;
};

AmbiguityModel make_head_ambiguity(SngpHead head);
AmbiguityModel make_proxy_ambiguity(const Matrix& x, const std::vector<int>& labels,
                                    double l2 = 1.0);

/// Tile-elimination rule. Cluster mode drops tiles whose nearest k-means
/// center is the ambiguous cluster; threshold mode drops tiles whose
/// ambiguity exceeds a quantile of the training ambiguities.
struct EatFilter {
    enum class Mode { kCluster, kThreshold };
    Mode mode = Mode::kCluster;
    Matrix centers;                        // cluster mode, k x dim
    std::size_t ambiguous_cluster_id = 0;  // cluster mode
    double threshold = 0.0;                // threshold mode
    double target_elimination_rate = 0.0;  // threshold mode
    double dominance_cutoff = 0.6;
};

/// Clusters training tiles with k-means and marks as ambiguous the cluster
/// whose member slide labels are least dominated by one class (dominance =
/// max of the two label fractions). A cluster only qualifies when its
/// dominance is below dominance_cutoff; ties go to the cluster with the
/// highest mean ambiguity of tile_probs. Throws when every cluster is
/// dominated or any cluster ends up empty.
EatFilter fit_eat_cluster(const Matrix& tiles, const Matrix& tile_probs,
                          const std::vector<int>& slide_labels, std::size_t k = 3,
                          std::uint64_t seed = 0, double dominance_cutoff = 0.6);

/// Threshold-mode filter: the cutoff is the training ambiguity quantile at
/// which the training elimination rate equals target_rate (ties may
/// eliminate fewer).
EatFilter fit_eat_threshold(const std::vector<double>& train_ambiguities,
                            double target_rate);

/// Retained tile indices of one slide, ascending. A slide whose tiles would
/// all be dropped keeps its single least-ambiguous tile so every slide still
/// yields a prediction.
std::vector<std::size_t> eliminate_tiles(const Matrix& slide_tiles,
                                         const std::vector<double>& slide_ambiguities,
                                         const EatFilter& filter);

/// eliminate_tiles applied per slide of a manifest; returns global row
/// indices, ascending.
std::vector<std::size_t> eat_retained_indices(const Matrix& tiles,
                                              const std::vector<double>& ambiguities,
                                              const Manifest& manifest,
                                              const EatFilter& filter);

/// 1 - mean(max_k p) over the tiles of one slide or patient; in [0, 1-1/K].
double ood_score_probability(const Matrix& tile_probs);

/// Mean of the min(delta, N) smallest tile uncertainties.
double ood_score_uncertainty(const std::vector<double>& tile_uncertainties,
                             std::size_t delta = 200);

enum class OodScoreKind { kProbability, kUncertainty };
enum class GatePolicy { kFixed, kTargetTpr, kTargetFpr };

struct OodGate {
    OodScoreKind score_kind = OodScoreKind::kProbability;
    std::size_t delta = 200;
    double threshold = 0.0;
    GatePolicy policy = GatePolicy::kFixed;
};

/// Patient-level OOD score under the gate's score kind.
double patient_ood_score(const Matrix& tile_probs,
                         const std::vector<double>& tile_uncertainties,
                         const OodGate& gate);

/// A record is out-of-domain iff its score exceeds the gate threshold.
bool is_ood(double score, const OodGate& gate);

/// Threshold reaching the target true-positive rate (largest such threshold)
/// or target false-positive rate (smallest such threshold) on a labeled
/// tuning stream, where flags mark OOD records with 1. Candidates are the
/// midpoints between adjacent distinct scores plus both extremes.
double fit_gate_threshold(const std::vector<double>& scores,
                          const std::vector<int>& ood_flags, GatePolicy policy,
                          double target);

/// Distribution-shift control: gate every record of an external cohort.
struct DscResult {
    std::vector<std::size_t> retained;
    std::vector<std::size_t> excluded;
};

DscResult dsc_filter(const std::vector<double>& record_scores, const OodGate& gate);

enum class Breakdown { kSingleCorrect, kSingleIncorrect, kAbstention, kEmpty };

struct PatientRecord {
    std::string patient_id;
    std::vector<std::string> slide_ids;
    Matrix slide_probs;          // one row per slide
    std::vector<double> probs;   // patient-level mean of slide rows
    int label = 0;
    std::string sex;
    std::string race_group;
    PredictionSet set;           // valid once set_attached
    bool set_attached = false;
    Breakdown breakdown = Breakdown::kEmpty;
};

/// Two-stage mean: tiles average into slides, slides average into patients.
/// tile_probs rows are parallel to manifest rows. Throws on orphan rows
/// (empty ids), conflicting labels or demographics within a patient, or a
/// slide shared by two patients. Apply EAT before calling when active.
std::vector<PatientRecord> aggregate(const Matrix& tile_probs,
                                     const Manifest& manifest);

/// Computes each record's prediction set from its patient-level probs and
/// classifies the outcome against the record label.
void attach_sets(std::vector<PatientRecord>& records,
                 const ConformalCalibrator& calibrator);

/// crc_set variant of attach_sets.
void attach_crc_sets(std::vector<PatientRecord>& records, double rho);

struct BreakdownCounts {
    std::size_t single_correct = 0;
    std::size_t single_incorrect = 0;
    std::size_t abstention = 0;
    std::size_t empty = 0;
};

/// Counts partition the cohort. Requires attached sets.
BreakdownCounts breakdown(const std::vector<PatientRecord>& records);

/// single-incorrect / (single-correct + single-incorrect); absent when no
/// record received a singleton set. Requires attached sets.
std::optional<double> da_error_rate(const std::vector<PatientRecord>& records);

enum class FairnessMetric { kAccuracy, kAvgSetSize };
enum class GroupField { kSex, kRaceGroup };

/// Max minus min of the per-group metric. Groups smaller than min_group
/// members are merged into "Others" first; at least two groups must remain.
/// kAccuracy scores argmax(probs) against the label and needs no sets;
/// kAvgSetSize requires attached sets.
double fairness_gap(const std::vector<PatientRecord>& records, FairnessMetric metric,
                    GroupField field, std::size_t min_group = 20);

}  // namespace truecam
