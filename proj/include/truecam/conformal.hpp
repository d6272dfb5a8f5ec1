#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "truecam/matrix.hpp"

namespace truecam {

/// Split conformal calibrator for one miscoverage level alpha.
struct ConformalCalibrator {
    double alpha = 0.0;
    std::vector<double> scores;  // sorted ascending
    double q_hat = 1.0;
};

/// A set of candidate class labels; empty and full sets are both legal.
struct PredictionSet {
    std::vector<int> labels;  // sorted ascending, within {0..K-1}

    std::size_t size() const { return labels.size(); }
    bool contains(int y) const;
};

/// Nonconformity of label y under the model output: 1 - probs[y].
double nonconformity(std::span<const double> probs, int y);

/// Fits the calibrated threshold from per-item class probabilities and true
/// labels. q_hat is the ceil((R+1)(1-alpha))-th smallest nonconformity score;
/// when that index exceeds R the threshold saturates at 1 (full sets).
ConformalCalibrator calibrate(const Matrix& probs, const std::vector<int>& labels,
                              double alpha);

/// Same fit from precomputed nonconformity scores.
ConformalCalibrator calibrate_scores(std::vector<double> scores, double alpha);

/// Labels whose nonconformity is <= q_hat (closed threshold).
PredictionSet predict_set(std::span<const double> probs,
                          const ConformalCalibrator& calibrator);

/// Fraction of sets containing the true label. Labels outside the class range
/// (e.g. -1 used for out-of-distribution items) are never covered.
double empirical_coverage(const std::vector<PredictionSet>& sets,
                          const std::vector<int>& labels);

double average_set_size(const std::vector<PredictionSet>& sets);

/// Risk-control set: labels with probs[k] >= 1 - rho.
PredictionSet crc_set(std::span<const double> probs, double rho);

struct CrcController {
    double rho_hat = 0.0;
    double alpha = 0.0;
    double search_tol = 1e-4;
};

/// Finds the smallest rho on the tol-grid whose calibration miscoverage is
/// at most alpha (miscoverage is non-increasing in rho, so binary search).
/// Throws when even rho = 1 misses the target, which happens whenever the
/// stream contains labels outside {0..K-1} beyond the allowed rate.
CrcController crc_fit(const Matrix& probs, const std::vector<int>& labels,
                      double alpha, double tol = 1e-4);

/// Same search against a caller-supplied loss; `loss(rho)` must be bounded
/// and non-increasing in rho.
CrcController crc_fit_loss(const std::function<double(double)>& loss, double alpha,
                           double tol = 1e-4);

/// One row of the calibration record file.
struct CalibrationRecord {
    std::string item_id;
    std::vector<double> probs;
    int label = 0;
};

/// CSV with header `item_id,prob_0..prob_{K-1},label`. Probabilities are
/// written in shortest round-trip form, so write/read is lossless.
std::vector<CalibrationRecord> read_calibration_records(const std::string& path);
void write_calibration_records(const std::string& path,
                               const std::vector<CalibrationRecord>& records);

}  // namespace truecam
