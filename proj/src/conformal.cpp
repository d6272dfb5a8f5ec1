#include "truecam/conformal.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace truecam {

namespace {

void check_alpha(double alpha, const char* op) {
    if (!(alpha > 0.0) || !(alpha < 1.0))
        throw std::invalid_argument(std::string(op) + ": alpha must be in (0,1)");
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

double parse_double(const std::string& s, const char* op) {
    double v = 0.0;
    const auto* end = s.data() + s.size();
    const auto res = std::from_chars(s.data(), end, v);
    if (res.ec != std::errc{} || res.ptr != end)
        throw std::runtime_error(std::string(op) + ": bad numeric field '" + s + "'");
    return v;
}

int parse_int(const std::string& s, const char* op) {
    int v = 0;
    const auto* end = s.data() + s.size();
    const auto res = std::from_chars(s.data(), end, v);
    if (res.ec != std::errc{} || res.ptr != end)
        throw std::runtime_error(std::string(op) + ": bad integer field '" + s + "'");
    return v;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace

bool PredictionSet::contains(int y) const {
    return std::binary_search(labels.begin(), labels.end(), y);
}

double nonconformity(std::span<const double> probs, int y) {
    if (probs.empty()) throw std::invalid_argument("nonconformity: empty probs");
    if (y < 0 || static_cast<std::size_t>(y) >= probs.size())
        throw std::invalid_argument("nonconformity: label out of range");
    return 1.0 - probs[static_cast<std::size_t>(y)];
}

ConformalCalibrator calibrate_scores(std::vector<double> scores, double alpha) {
    check_alpha(alpha, "calibrate");
    if (scores.empty())
        throw std::invalid_argument("calibrate: empty calibration set");

    std::sort(scores.begin(), scores.end());
    const auto r = static_cast<double>(scores.size());
    // nudge before ceil so that values like 10*0.9 = 9.000000000000002 do not
    // overshoot the intended integer index
    const double raw = (r + 1.0) * (1.0 - alpha);
    const auto idx = static_cast<std::size_t>(std::ceil(raw * (1.0 - 1e-12)));

    ConformalCalibrator cal;
    cal.alpha = alpha;
    cal.q_hat = idx > scores.size() ? 1.0 : scores[idx - 1];
    cal.scores = std::move(scores);
    return cal;
}

ConformalCalibrator calibrate(const Matrix& probs, const std::vector<int>& labels,
                              double alpha) {
    if (probs.rows != labels.size())
        throw std::invalid_argument("calibrate: probs rows and labels differ");
    std::vector<double> scores;
    scores.reserve(labels.size());
    for (std::size_t i = 0; i < probs.rows; ++i)
        scores.push_back(nonconformity(probs.row(i), labels[i]));
    return calibrate_scores(std::move(scores), alpha);
}

PredictionSet predict_set(std::span<const double> probs,
                          const ConformalCalibrator& calibrator) {
    if (calibrator.scores.empty())
        throw std::invalid_argument("predict_set: calibrator was never fitted");
    PredictionSet set;
    for (std::size_t k = 0; k < probs.size(); ++k)
        if (1.0 - probs[k] <= calibrator.q_hat)
            set.labels.push_back(static_cast<int>(k));
    return set;
}

double empirical_coverage(const std::vector<PredictionSet>& sets,
                          const std::vector<int>& labels) {
    if (sets.empty() || sets.size() != labels.size())
        throw std::invalid_argument(
            "empirical_coverage: need equal-length nonempty sets and labels");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < sets.size(); ++i)
        if (sets[i].contains(labels[i])) ++hits;
    return static_cast<double>(hits) / static_cast<double>(sets.size());
}

double average_set_size(const std::vector<PredictionSet>& sets) {
    if (sets.empty()) throw std::invalid_argument("average_set_size: empty input");
    std::size_t total = 0;
    for (const auto& s : sets) total += s.size();
    return static_cast<double>(total) / static_cast<double>(sets.size());
}

PredictionSet crc_set(std::span<const double> probs, double rho) {
    if (rho < 0.0 || rho > 1.0)
        throw std::invalid_argument("crc_set: rho must be in [0,1]");
    PredictionSet set;
    for (std::size_t k = 0; k < probs.size(); ++k)
        if (probs[k] >= 1.0 - rho) set.labels.push_back(static_cast<int>(k));
    return set;
}

CrcController crc_fit_loss(const std::function<double(double)>& loss, double alpha,
                           double tol) {
    if (!(tol > 0.0) || tol > 1.0)
        throw std::invalid_argument("crc_fit: tol must be in (0,1]");
    if (!(alpha >= 0.0))
        throw std::invalid_argument("crc_fit: alpha must be nonnegative");

    // grid point i maps to min(i*tol, 1); loss is non-increasing along it
    const auto last = static_cast<std::size_t>(std::ceil(1.0 / tol));
    auto grid = [&](std::size_t i) { return std::min(static_cast<double>(i) * tol, 1.0); };

    if (loss(grid(last)) > alpha)
        throw std::runtime_error(
            "crc_fit: target risk unattainable even with full prediction sets");

    std::size_t lo = 0, hi = last;  // invariant: grid(hi) feasible
    while (lo < hi) {
        const std::size_t mid = lo + (hi - lo) / 2;
        if (loss(grid(mid)) <= alpha)
            hi = mid;
        else
            lo = mid + 1;
    }
    return {grid(hi), alpha, tol};
}

CrcController crc_fit(const Matrix& probs, const std::vector<int>& labels,
                      double alpha, double tol) {
    if (probs.rows == 0 || probs.rows != labels.size())
        throw std::invalid_argument(
            "crc_fit: need equal-length nonempty probs and labels");

    const auto miscoverage = [&](double rho) {
        std::size_t misses = 0;
        for (std::size_t i = 0; i < probs.rows; ++i)
            if (!crc_set(probs.row(i), rho).contains(labels[i])) ++misses;
        return static_cast<double>(misses) / static_cast<double>(probs.rows);
    };
    return crc_fit_loss(miscoverage, alpha, tol);
}

std::vector<CalibrationRecord> read_calibration_records(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw std::runtime_error("read_calibration_records: cannot open " + path);

    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("read_calibration_records: empty file " + path);

    const auto header = split_csv_line(line);
    if (header.size() < 3 || header.front() != "item_id" || header.back() != "label")
        throw std::runtime_error(
            "read_calibration_records: bad header, want item_id,prob_0..,label");
    const std::size_t k = header.size() - 2;
    for (std::size_t i = 0; i < k; ++i)
        if (header[i + 1] != "prob_" + std::to_string(i))
            throw std::runtime_error(
                "read_calibration_records: bad probability column '" + header[i + 1] +
                "'");

    std::vector<CalibrationRecord> records;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != header.size())
            throw std::runtime_error("read_calibration_records: row with " +
                                     std::to_string(fields.size()) + " fields, want " +
                                     std::to_string(header.size()));
        CalibrationRecord rec;
        rec.item_id = fields.front();
        for (std::size_t i = 0; i < k; ++i)
            rec.probs.push_back(parse_double(fields[i + 1], "read_calibration_records"));
        rec.label = parse_int(fields.back(), "read_calibration_records");
        records.push_back(std::move(rec));
    }
    return records;
}

void write_calibration_records(const std::string& path,
                               const std::vector<CalibrationRecord>& records) {
    if (records.empty())
        throw std::invalid_argument("write_calibration_records: nothing to write");
    const std::size_t k = records.front().probs.size();
    for (const auto& r : records)
        if (r.probs.size() != k)
            throw std::invalid_argument(
                "write_calibration_records: inconsistent class counts");

    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw std::runtime_error("write_calibration_records: cannot open " + path);

    out << "item_id";
    for (std::size_t i = 0; i < k; ++i) out << ",prob_" << i;
    out << ",label\n";
    for (const auto& r : records) {
        out << r.item_id;
        for (double p : r.probs) out << ',' << format_double(p);
        out << ',' << r.label << '\n';
    }
    if (!out)
        throw std::runtime_error("write_calibration_records: write failed for " + path);
}

}  // namespace truecam
