#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "doctest.h"
#include "truecam/conformal.hpp"
#include "truecam/data.hpp"
#include "truecam/numerics.hpp"
#include "truecam/rng.hpp"
#include "truecam/sngp.hpp"
#include "truecam/trust.hpp"

using truecam::EatFilter;
using truecam::Manifest;
using truecam::ManifestRow;
using truecam::Matrix;
using truecam::OodGate;
using truecam::PatientRecord;
using truecam::Rng;

namespace {

Matrix pair_rows(const std::vector<std::pair<double, double>>& rows) {
    Matrix m(rows.size(), 2);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        m.at(i, 0) = rows[i].first;
        m.at(i, 1) = rows[i].second;
    }
    return m;
}

/// Three tight blobs around well-separated centers, with slide labels mixed
/// per blob according to `ones_of(blob)`.
struct ThreeBlobs {
    Matrix tiles;
    Matrix probs;
    std::vector<int> labels;
    std::vector<int> blob_of;
};

ThreeBlobs make_three_blobs(std::size_t per_blob, std::uint64_t seed,
                            const std::vector<std::size_t>& ones_per_blob,
                            const std::vector<std::pair<double, double>>& blob_probs) {
    const double centers[3][2] = {{-10.0, 0.0}, {10.0, 0.0}, {0.0, 10.0}};
    ThreeBlobs out;
    out.tiles = Matrix(3 * per_blob, 2);
    out.probs = Matrix(3 * per_blob, 2);
    Rng rng(seed);
    std::size_t r = 0;
    for (int blob = 0; blob < 3; ++blob) {
        for (std::size_t i = 0; i < per_blob; ++i, ++r) {
            out.tiles.at(r, 0) = centers[blob][0] + 0.3 * rng.normal();
            out.tiles.at(r, 1) = centers[blob][1] + 0.3 * rng.normal();
            out.probs.at(r, 0) = blob_probs[blob].first;
            out.probs.at(r, 1) = blob_probs[blob].second;
            out.labels.push_back(i < ones_per_blob[blob] ? 1 : 0);
            out.blob_of.push_back(blob);
        }
    }
    return out;
}

std::size_t nearest_true_center(std::span<const double> center) {
    const double centers[3][2] = {{-10.0, 0.0}, {10.0, 0.0}, {0.0, 10.0}};
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < 3; ++c) {
        const double dx = center[0] - centers[c][0];
        const double dy = center[1] - centers[c][1];
        if (dx * dx + dy * dy < best_d) {
            best_d = dx * dx + dy * dy;
            best = c;
        }
    }
    return best;
}

PatientRecord make_record(const std::string& id, std::vector<double> probs, int label,
                          const std::string& sex = "male",
                          const std::string& race = "groupA") {
    PatientRecord rec;
    rec.patient_id = id;
    rec.probs = std::move(probs);
    rec.label = label;
    rec.sex = sex;
    rec.race_group = race;
    return rec;
}

double records_accuracy(const std::vector<PatientRecord>& records) {
    std::size_t correct = 0;
    for (const auto& r : records) {
        const auto top = static_cast<int>(
            std::max_element(r.probs.begin(), r.probs.end()) - r.probs.begin());
        if (top == r.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(records.size());
}

}  // namespace

TEST_CASE("ambiguity score follows the two-class gap") {
    CHECK(truecam::ambiguity_score(std::vector<double>{0.5, 0.5}) == 1.0);
    CHECK(truecam::ambiguity_score(std::vector<double>{1.0, 0.0}) == 0.0);
    CHECK(truecam::ambiguity_score(std::vector<double>{0.8, 0.2}) ==
          doctest::Approx(0.4));

    SUBCASE("symmetric under class swap") {
        Rng rng(3);
        for (int i = 0; i < 50; ++i) {
            const double p = rng.uniform();
            CHECK(truecam::ambiguity_score(std::vector<double>{p, 1.0 - p}) ==
                  truecam::ambiguity_score(std::vector<double>{1.0 - p, p}));
        }
    }
    SUBCASE("binary-only and valid probabilities") {
        CHECK_THROWS_AS(truecam::ambiguity_score(std::vector<double>{0.2, 0.3, 0.5}),
                        std::invalid_argument);
        CHECK_THROWS_AS(truecam::ambiguity_score(std::vector<double>{0.5}),
                        std::invalid_argument);
        CHECK_THROWS_AS(truecam::ambiguity_score(std::vector<double>{1.2, -0.2}),
                        std::invalid_argument);
    }
}

TEST_CASE("logistic proxy fits separable data and respects the ridge") {
    Rng rng(7);
    const std::size_t n = 200;
    Matrix x(n, 3);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<int>(i % 2);
        x.at(i, 0) = (y[i] ? 2.0 : -2.0) + rng.normal();
        x.at(i, 1) = rng.normal();
        x.at(i, 2) = rng.normal();
    }
    const auto model = truecam::fit_logistic(x, y, 1.0);

    SUBCASE("accuracy and probability shape") {
        std::size_t correct = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto p = model.predict_pair(x.row(i));
            CHECK(p[0] + p[1] == doctest::Approx(1.0));
            if ((p[1] > 0.5 ? 1 : 0) == y[i]) ++correct;
        }
        CHECK(static_cast<double>(correct) / static_cast<double>(n) > 0.95);
    }
    SUBCASE("fitted parameters are a local optimum of the penalized loss") {
        const auto loss_at = [&](const std::vector<double>& w, double b) {
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double z = truecam::linalg::dot(w, x.row(i)) + b;
                // log(1 + exp(-z*sign)) written stably
                const double margin = y[i] == 1 ? z : -z;
                total += margin > 0 ? std::log1p(std::exp(-margin))
                                    : -margin + std::log1p(std::exp(margin));
            }
            for (double v : w) total += 0.5 * 1.0 * v * v;
            return total;
        };
        const double base = loss_at(model.w, model.b);
        const double h = 1e-4;
        for (std::size_t j = 0; j < model.w.size(); ++j) {
            for (double dir : {+h, -h}) {
                auto w = model.w;
                w[j] += dir;
                CHECK(loss_at(w, model.b) >= base - 1e-9);
            }
        }
        CHECK(loss_at(model.w, model.b + h) >= base - 1e-9);
        CHECK(loss_at(model.w, model.b - h) >= base - 1e-9);
    }
    SUBCASE("a huge ridge pins the weights near zero") {
        const auto flat = truecam::fit_logistic(x, y, 1e9);
        for (double w : flat.w) CHECK(std::abs(w) < 1e-4);
    }
    SUBCASE("validation") {
        CHECK_THROWS_AS(truecam::fit_logistic(Matrix(), y, 1.0), std::invalid_argument);
        CHECK_THROWS_AS(truecam::fit_logistic(x, std::vector<int>(n, 0), 1.0),
                        std::invalid_argument);
        CHECK_THROWS_AS(truecam::fit_logistic(x, std::vector<int>(n - 1, 0), 1.0),
                        std::invalid_argument);
        CHECK_THROWS_AS(truecam::fit_logistic(x, y, -1.0), std::invalid_argument);
        auto bad = y;
        bad[0] = 2;
        CHECK_THROWS_AS(truecam::fit_logistic(x, bad, 1.0), std::invalid_argument);
    }
}

TEST_CASE("ambiguity models score tiles through either backend") {
    Rng rng(12);
    const std::size_t n = 120;
    Matrix x(n, 4);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<int>(i % 2);
        for (std::size_t j = 0; j < 4; ++j)
            x.at(i, j) = rng.normal() + (j == 0 ? (y[i] ? 2.0 : -2.0) : 0.0);
    }

    SUBCASE("proxy backend matches its own logistic probabilities") {
        const auto model = truecam::make_proxy_ambiguity(x, y);
        REQUIRE(model.kind == truecam::AmbiguityModel::Kind::kLogisticProxy);
        const auto probs = model.tile_probs(x.row(0));
        CHECK(model.score(x.row(0)) == truecam::ambiguity_score(probs));
        // a point on the decision boundary is maximally ambiguous
        std::vector<double> mid(4, 0.0);
        const auto pmid = model.tile_probs(mid);
        CHECK(truecam::ambiguity_score(pmid) > 0.9);
    }
    SUBCASE("head backend consults the trained posterior") {
        truecam::SnMlpConfig mlp;
        mlp.layer_dims = {4, 16, 16};
        truecam::TrainConfig tc;
        tc.epochs = 6;
        tc.lr = 0.01;
        tc.seed = 5;
        const auto fit = truecam::fit_head(x, y, 2, mlp, 64, tc);
        const auto model = truecam::make_head_ambiguity(fit.head);
        const auto direct = truecam::predict(x.row(3), fit.head);
        CHECK(model.score(x.row(3)) == truecam::ambiguity_score(direct.probs));
    }
}

TEST_CASE("eat clustering finds the label-mixed blob") {
    // blob 0 is 95% class 0, blob 1 is 95% class 1, blob 2 is an even split
    const auto data = make_three_blobs(
        40, 19, {2, 38, 20},
        {{0.9, 0.1}, {0.1, 0.9}, {0.5, 0.5}});

    const EatFilter filter =
        truecam::fit_eat_cluster(data.tiles, data.probs, data.labels, 3, 1);
    CHECK(filter.mode == EatFilter::Mode::kCluster);
    REQUIRE(filter.centers.rows == 3);
    CHECK(nearest_true_center(filter.centers.row(filter.ambiguous_cluster_id)) == 2);

    SUBCASE("identical refit with the same seed") {
        const EatFilter again =
            truecam::fit_eat_cluster(data.tiles, data.probs, data.labels, 3, 1);
        CHECK(again.ambiguous_cluster_id == filter.ambiguous_cluster_id);
        CHECK(again.centers.data == filter.centers.data);
    }
    SUBCASE("cluster-mode elimination drops exactly the mixed blob") {
        const auto kept = truecam::eliminate_tiles(
            data.tiles, std::vector<double>(data.tiles.rows, 0.0), filter);
        REQUIRE(kept.size() == 80);
        for (std::size_t i : kept) CHECK(data.blob_of[i] != 2);
    }
}

TEST_CASE("eat clustering edge rules") {
    SUBCASE("all clusters dominated") {
        // two pure blobs, k = 2: nothing qualifies as ambiguous
        const auto data = make_three_blobs(
            10, 4, {0, 10, 0}, {{0.9, 0.1}, {0.1, 0.9}, {0.5, 0.5}});
        Matrix two_tiles(20, 2);
        Matrix two_probs(20, 2);
        std::vector<int> two_labels;
        for (std::size_t i = 0; i < 20; ++i) {
            two_tiles.at(i, 0) = data.tiles.at(i, 0);
            two_tiles.at(i, 1) = data.tiles.at(i, 1);
            two_probs.at(i, 0) = data.probs.at(i, 0);
            two_probs.at(i, 1) = data.probs.at(i, 1);
            two_labels.push_back(data.labels[i]);
        }
        CHECK_THROWS_AS(
            truecam::fit_eat_cluster(two_tiles, two_probs, two_labels, 2, 4),
            std::runtime_error);
    }
    SUBCASE("dominance tie broken by mean ambiguity") {
        // blobs 0 and 1 both split 50/50; blob 0 carries the confusing
        // probabilities, so it must win the tie
        const auto data = make_three_blobs(
            20, 8, {10, 10, 0}, {{0.5, 0.5}, {0.9, 0.1}, {0.8, 0.2}});
        const EatFilter filter =
            truecam::fit_eat_cluster(data.tiles, data.probs, data.labels, 3, 8);
        CHECK(nearest_true_center(filter.centers.row(filter.ambiguous_cluster_id)) == 0);
    }
    SUBCASE("validation") {
        const auto data = make_three_blobs(
            5, 2, {0, 5, 2}, {{0.9, 0.1}, {0.1, 0.9}, {0.5, 0.5}});
        CHECK_THROWS_AS(
            truecam::fit_eat_cluster(data.tiles, data.probs, data.labels, 1, 0),
            std::invalid_argument);
        auto bad_labels = data.labels;
        bad_labels[0] = -1;
        CHECK_THROWS_AS(
            truecam::fit_eat_cluster(data.tiles, data.probs, bad_labels, 3, 0),
            std::invalid_argument);
        CHECK_THROWS_AS(truecam::fit_eat_cluster(data.tiles, data.probs,
                                                 data.labels, 3, 0, 0.4),
                        std::invalid_argument);
    }
}

TEST_CASE("threshold-mode elimination hits the target rate") {
    std::vector<double> train(100);
    for (std::size_t i = 0; i < 100; ++i) train[i] = static_cast<double>(i) / 100.0;

    SUBCASE("rate zero retains everything") {
        const EatFilter f = truecam::fit_eat_threshold(train, 0.0);
        Matrix tiles(100, 1);
        const auto kept = truecam::eliminate_tiles(tiles, train, f);
        CHECK(kept.size() == 100);
    }
    SUBCASE("thirty percent of distinct scores are dropped") {
        const EatFilter f = truecam::fit_eat_threshold(train, 0.3);
        CHECK(f.threshold == doctest::Approx(0.69));
        Matrix tiles(100, 1);
        const auto kept = truecam::eliminate_tiles(tiles, train, f);
        CHECK(kept.size() == 70);
        for (std::size_t i : kept) CHECK(train[i] <= f.threshold);
    }
    SUBCASE("ties eliminate fewer, never more") {
        const std::vector<double> equal(10, 0.5);
        const EatFilter f = truecam::fit_eat_threshold(equal, 0.5);
        Matrix tiles(10, 1);
        CHECK(truecam::eliminate_tiles(tiles, equal, f).size() == 10);
    }
    SUBCASE("slide losing every tile keeps its least ambiguous one") {
        const EatFilter f = truecam::fit_eat_threshold(train, 0.3);
        Matrix tiles(3, 1);
        const std::vector<double> high{0.95, 0.7, 0.99};
        const auto kept = truecam::eliminate_tiles(tiles, high, f);
        REQUIRE(kept.size() == 1);
        CHECK(kept[0] == 1);
    }
    SUBCASE("validation") {
        CHECK_THROWS_AS(truecam::fit_eat_threshold({}, 0.1), std::invalid_argument);
        CHECK_THROWS_AS(truecam::fit_eat_threshold(train, 1.0), std::invalid_argument);
        CHECK_THROWS_AS(truecam::fit_eat_threshold(train, -0.1), std::invalid_argument);
        const EatFilter f = truecam::fit_eat_threshold(train, 0.3);
        CHECK_THROWS_AS(truecam::eliminate_tiles(Matrix(), {}, f),
                        std::invalid_argument);
        CHECK_THROWS_AS(truecam::eliminate_tiles(Matrix(2, 1), {0.1}, f),
                        std::invalid_argument);
    }
}

TEST_CASE("cluster fallback keeps one tile for an all-ambiguous slide") {
    const auto data = make_three_blobs(
        30, 6, {1, 29, 15}, {{0.9, 0.1}, {0.1, 0.9}, {0.5, 0.5}});
    const EatFilter filter =
        truecam::fit_eat_cluster(data.tiles, data.probs, data.labels, 3, 6);

    // a slide made only of mixed-blob tiles
    Matrix slide(4, 2);
    for (std::size_t i = 0; i < 4; ++i) {
        slide.at(i, 0) = 0.1 * static_cast<double>(i);
        slide.at(i, 1) = 10.0;
    }
    const std::vector<double> amb{0.9, 0.2, 0.8, 0.4};
    const auto kept = truecam::eliminate_tiles(slide, amb, filter);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0] == 1);
}

TEST_CASE("per-slide elimination maps back to global indices") {
    Manifest m;
    // two slides interleaved in the row order
    const char* slides[6] = {"sA", "sB", "sA", "sB", "sA", "sB"};
    for (int i = 0; i < 6; ++i)
        m.rows.push_back(ManifestRow{"t" + std::to_string(i), slides[i], "p0", 0,
                                     "male", "groupA"});
    Matrix tiles(6, 1);
    const std::vector<double> amb{0.1, 0.9, 0.8, 0.2, 0.3, 0.85};
    EatFilter f;
    f.mode = EatFilter::Mode::kThreshold;
    f.threshold = 0.5;

    const auto kept = truecam::eat_retained_indices(tiles, amb, m, f);
    CHECK(kept == std::vector<std::size_t>{0, 3, 4});

    SUBCASE("fallback applies per slide") {
        // raise every ambiguity on slide B above the threshold
        const std::vector<double> amb2{0.1, 0.9, 0.8, 0.95, 0.3, 0.85};
        const auto kept2 = truecam::eat_retained_indices(tiles, amb2, m, f);
        // slide A keeps rows 0 and 4; slide B collapses to its least
        // ambiguous row 5
        CHECK(kept2 == std::vector<std::size_t>{0, 4, 5});
    }
    SUBCASE("misaligned inputs") {
        CHECK_THROWS_AS(truecam::eat_retained_indices(Matrix(5, 1), amb, m, f),
                        std::invalid_argument);
        CHECK_THROWS_AS(
            truecam::eat_retained_indices(tiles, std::vector<double>(5, 0.0), m, f),
            std::invalid_argument);
    }
}

TEST_CASE("probability ood score averages the top-class confidence") {
    CHECK(truecam::ood_score_probability(pair_rows({{1.0, 0.0}, {0.0, 1.0}})) == 0.0);
    CHECK(truecam::ood_score_probability(pair_rows({{0.9, 0.1}, {0.3, 0.7}})) ==
          doctest::Approx(0.2));
    CHECK(truecam::ood_score_probability(pair_rows({{0.5, 0.5}, {0.5, 0.5}})) == 0.5);

    SUBCASE("matches the brute-force mean and ignores tile order") {
        const std::vector<std::pair<double, double>> rows{
            {0.75, 0.25}, {0.5, 0.5}, {0.125, 0.875}, {1.0, 0.0}};
        const Matrix probs = pair_rows(rows);
        double sum = 0.0;
        for (const auto& [a, b] : rows) sum += std::max(a, b);
        const double expected = 1.0 - sum / 4.0;
        CHECK(truecam::ood_score_probability(probs) == expected);

        auto reversed = rows;
        std::reverse(reversed.begin(), reversed.end());
        CHECK(truecam::ood_score_probability(pair_rows(reversed)) == expected);
    }
    SUBCASE("validation") {
        CHECK_THROWS_AS(truecam::ood_score_probability(Matrix()),
                        std::invalid_argument);
        CHECK_THROWS_AS(truecam::ood_score_probability(pair_rows({{1.5, -0.5}})),
                        std::invalid_argument);
    }
}

TEST_CASE("uncertainty ood score keeps the quietest tiles") {
    const std::vector<double> u{0.1, 0.2, 0.9};
    CHECK(truecam::ood_score_uncertainty(u, 2) == doctest::Approx(0.15));

    SUBCASE("delta at least the tile count gives the plain mean") {
        double sum = 0.0;
        std::vector<double> sorted = u;
        std::sort(sorted.begin(), sorted.end());
        for (double v : sorted) sum += v;
        CHECK(truecam::ood_score_uncertainty(u, 3) == sum / 3.0);
        CHECK(truecam::ood_score_uncertainty(u, 200) == sum / 3.0);
    }
    SUBCASE("all-equal uncertainties score that value") {
        CHECK(truecam::ood_score_uncertainty(std::vector<double>(7, 0.4), 3) ==
              doctest::Approx(0.4));
    }
    SUBCASE("non-decreasing in delta") {
        Rng rng(9);
        std::vector<double> vals(40);
        for (double& v : vals) v = rng.uniform();
        double prev = 0.0;
        for (std::size_t d = 1; d <= 45; ++d) {
            const double s = truecam::ood_score_uncertainty(vals, d);
            CHECK(s >= prev - 1e-12);
            prev = s;
        }
    }
    SUBCASE("validation") {
        CHECK_THROWS_AS(truecam::ood_score_uncertainty({}, 2), std::invalid_argument);
        CHECK_THROWS_AS(truecam::ood_score_uncertainty(u, 0), std::invalid_argument);
        CHECK_THROWS_AS(truecam::ood_score_uncertainty({0.1, -0.2}, 2),
                        std::invalid_argument);
    }
}

TEST_CASE("gate thresholds come from the labeled roc sweep") {
    const std::vector<double> scores{1.0, 3.0, 2.0, 4.0};
    const std::vector<int> flags{0, 0, 1, 1};

    SUBCASE("target tpr picks the largest threshold that still reaches it") {
        CHECK(truecam::fit_gate_threshold(scores, flags,
                                          truecam::GatePolicy::kTargetTpr, 1.0) == 1.5);
        CHECK(truecam::fit_gate_threshold(scores, flags,
                                          truecam::GatePolicy::kTargetTpr, 0.5) == 3.5);
    }
    SUBCASE("target fpr picks the smallest threshold inside the budget") {
        CHECK(truecam::fit_gate_threshold(scores, flags,
                                          truecam::GatePolicy::kTargetFpr, 0.0) == 3.5);
        CHECK(truecam::fit_gate_threshold(scores, flags,
                                          truecam::GatePolicy::kTargetFpr, 0.5) == 1.5);
    }
    SUBCASE("chosen thresholds are feasible and extremal on random streams") {
        Rng rng(31);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<double> s;
            std::vector<int> f;
            for (int i = 0; i < 40; ++i) {
                f.push_back(i % 2);
                s.push_back(rng.normal() + (f.back() ? 0.8 : 0.0));
            }
            const auto rates = [&](double thr) {
                double tp = 0.0;
                double fp = 0.0;
                for (std::size_t i = 0; i < s.size(); ++i) {
                    if (s[i] > thr) (f[i] ? tp : fp) += 1.0;
                }
                return std::pair{tp / 20.0, fp / 20.0};
            };
            std::vector<double> sorted = s;
            std::sort(sorted.begin(), sorted.end());
            std::vector<double> cands{sorted.front() - 1.0, sorted.back()};
            for (std::size_t i = 0; i + 1 < sorted.size(); ++i)
                cands.push_back(0.5 * (sorted[i] + sorted[i + 1]));

            const double target = 0.8;
            const double thr_tpr = truecam::fit_gate_threshold(
                s, f, truecam::GatePolicy::kTargetTpr, target);
            CHECK(rates(thr_tpr).first >= target - 1e-9);
            for (double c : cands)
                if (c > thr_tpr + 1e-12) CHECK(rates(c).first < target);

            const double thr_fpr = truecam::fit_gate_threshold(
                s, f, truecam::GatePolicy::kTargetFpr, 0.2);
            CHECK(rates(thr_fpr).second <= 0.2 + 1e-9);
            for (double c : cands)
                if (c < thr_fpr - 1e-12) CHECK(rates(c).second > 0.2);
        }
    }
    SUBCASE("infinite thresholds gate everything one way") {
        OodGate open;
        open.threshold = std::numeric_limits<double>::infinity();
        OodGate closed;
        closed.threshold = -std::numeric_limits<double>::infinity();
        for (double s : {-5.0, 0.0, 7.0}) {
            CHECK(!truecam::is_ood(s, open));
            CHECK(truecam::is_ood(s, closed));
        }
    }
    SUBCASE("validation") {
        CHECK_THROWS_AS(truecam::fit_gate_threshold(scores, flags,
                                                    truecam::GatePolicy::kFixed, 0.5),
                        std::invalid_argument);
        CHECK_THROWS_AS(truecam::fit_gate_threshold(scores, {0, 0, 0, 0},
                                                    truecam::GatePolicy::kTargetTpr, 0.5),
                        std::invalid_argument);
        CHECK_THROWS_AS(truecam::fit_gate_threshold(scores, flags,
                                                    truecam::GatePolicy::kTargetTpr, 1.5),
                        std::invalid_argument);
        CHECK_THROWS_AS(truecam::fit_gate_threshold({1.0}, {1},
                                                    truecam::GatePolicy::kTargetTpr, 0.5),
                        std::invalid_argument);
    }
}

TEST_CASE("patient ood score dispatches on the gate kind") {
    const Matrix probs = pair_rows({{0.9, 0.1}, {0.3, 0.7}});
    const std::vector<double> uncs{0.5, 0.1, 0.3};

    OodGate g;
    g.score_kind = truecam::OodScoreKind::kProbability;
    CHECK(truecam::patient_ood_score(probs, uncs, g) == doctest::Approx(0.2));
    g.score_kind = truecam::OodScoreKind::kUncertainty;
    g.delta = 2;
    CHECK(truecam::patient_ood_score(probs, uncs, g) == doctest::Approx(0.2));
}

TEST_CASE("distribution shift control partitions a cohort by gate verdict") {
    OodGate g;
    g.threshold = 0.5;
    const auto result = truecam::dsc_filter({0.1, 0.9, 0.4, 0.6}, g);
    CHECK(result.retained == std::vector<std::size_t>{0, 2});
    CHECK(result.excluded == std::vector<std::size_t>{1, 3});
    CHECK_THROWS_AS(truecam::dsc_filter({}, g), std::invalid_argument);

    SUBCASE("fpr extremes") {
        const std::vector<double> scores{0.1, 0.2, 0.3, 0.8, 0.9, 1.0};
        const std::vector<int> flags{0, 0, 0, 1, 1, 1};
        OodGate strict;
        strict.threshold = truecam::fit_gate_threshold(
            scores, flags, truecam::GatePolicy::kTargetFpr, 0.0);
        const auto none_lost = truecam::dsc_filter({0.1, 0.2, 0.3}, strict);
        CHECK(none_lost.retained.size() == 3);

        OodGate everything;
        everything.threshold = truecam::fit_gate_threshold(
            scores, flags, truecam::GatePolicy::kTargetFpr, 1.0);
        const auto all_lost = truecam::dsc_filter(scores, everything);
        CHECK(all_lost.retained.empty());
    }
}

TEST_CASE("aggregation averages tiles into slides and slides into patients") {
    SUBCASE("one slide of two tiles") {
        Manifest m;
        m.rows.push_back(ManifestRow{"t0", "s0", "p0", 0, "male", "groupA"});
        m.rows.push_back(ManifestRow{"t1", "s0", "p0", 0, "male", "groupA"});
        const auto records =
            truecam::aggregate(pair_rows({{0.6, 0.4}, {0.8, 0.2}}), m);
        REQUIRE(records.size() == 1);
        CHECK(records[0].probs[0] == doctest::Approx(0.7));
        CHECK(records[0].probs[1] == doctest::Approx(0.3));
        CHECK(records[0].slide_ids == std::vector<std::string>{"s0"});
    }
    SUBCASE("patient means average the slide means, not the tiles") {
        Manifest m;
        // slide s0 has two tiles, slide s1 has one; a flat tile mean would
        // weight s0 double
        m.rows.push_back(ManifestRow{"t0", "s0", "p0", 1, "male", "groupA"});
        m.rows.push_back(ManifestRow{"t1", "s0", "p0", 1, "male", "groupA"});
        m.rows.push_back(ManifestRow{"t2", "s1", "p0", 1, "male", "groupA"});
        const auto records = truecam::aggregate(
            pair_rows({{0.6, 0.4}, {0.8, 0.2}, {0.5, 0.5}}), m);
        REQUIRE(records.size() == 1);
        REQUIRE(records[0].slide_probs.rows == 2);
        CHECK(records[0].slide_probs.at(0, 0) == doctest::Approx(0.7));
        CHECK(records[0].slide_probs.at(1, 0) == doctest::Approx(0.5));
        CHECK(records[0].probs[0] == doctest::Approx(0.6));
        CHECK(records[0].probs[1] == doctest::Approx(0.4));
    }
    SUBCASE("single tile passes through") {
        Manifest m;
        m.rows.push_back(ManifestRow{"t0", "s0", "p0", 1, "male", "groupA"});
        const auto records = truecam::aggregate(pair_rows({{0.25, 0.75}}), m);
        CHECK(records[0].probs[0] == 0.25);
        CHECK(records[0].probs[1] == 0.75);
    }
    SUBCASE("tile order does not change patient values") {
        Manifest m;
        Matrix probs(6, 2);
        Rng rng(2);
        for (int i = 0; i < 6; ++i) {
            const int p = i % 2;
            m.rows.push_back(ManifestRow{"t" + std::to_string(i),
                                         "s" + std::to_string(p),
                                         "p" + std::to_string(p), p, "male",
                                         "groupA"});
            const double v = rng.uniform();
            probs.at(i, 0) = v;
            probs.at(i, 1) = 1.0 - v;
        }
        const auto base = truecam::aggregate(probs, m);

        Manifest shuffled;
        Matrix sprobs(6, 2);
        const std::size_t order[6] = {5, 2, 0, 4, 1, 3};
        for (int i = 0; i < 6; ++i) {
            shuffled.rows.push_back(m.rows[order[i]]);
            sprobs.at(i, 0) = probs.at(order[i], 0);
            sprobs.at(i, 1) = probs.at(order[i], 1);
        }
        const auto mixed = truecam::aggregate(sprobs, shuffled);
        REQUIRE(mixed.size() == base.size());
        for (const auto& rec : base) {
            const auto it = std::find_if(
                mixed.begin(), mixed.end(),
                [&](const PatientRecord& r) { return r.patient_id == rec.patient_id; });
            REQUIRE(it != mixed.end());
            CHECK(it->probs[0] == doctest::Approx(rec.probs[0]).epsilon(1e-12));
            CHECK(it->probs[1] == doctest::Approx(rec.probs[1]).epsilon(1e-12));
        }
    }
    SUBCASE("slide renaming does not change patient values") {
        Manifest m;
        Matrix probs(4, 2);
        for (int i = 0; i < 4; ++i) {
            m.rows.push_back(ManifestRow{"t" + std::to_string(i),
                                         i < 2 ? "sX" : "sY", "p0", 0, "male",
                                         "groupA"});
            probs.at(i, 0) = 0.1 + 0.2 * i;
            probs.at(i, 1) = 1.0 - probs.at(i, 0);
        }
        const auto base = truecam::aggregate(probs, m);
        for (auto& row : m.rows) row.slide_id = row.slide_id == "sX" ? "alpha" : "beta";
        const auto renamed = truecam::aggregate(probs, m);
        CHECK(renamed[0].probs[0] == base[0].probs[0]);
        CHECK(renamed[0].probs[1] == base[0].probs[1]);
    }
    SUBCASE("validation") {
        Manifest m;
        m.rows.push_back(ManifestRow{"t0", "s0", "p0", 0, "male", "groupA"});
        CHECK_THROWS_AS(truecam::aggregate(Matrix(2, 2), m), std::invalid_argument);
        CHECK_THROWS_AS(truecam::aggregate(Matrix(1, 1), m), std::invalid_argument);
        CHECK_THROWS_AS(truecam::aggregate(Matrix(), Manifest{}),
                        std::invalid_argument);

        Manifest orphan = m;
        orphan.rows[0].slide_id = "";
        CHECK_THROWS_AS(truecam::aggregate(pair_rows({{0.5, 0.5}}), orphan),
                        std::runtime_error);

        Manifest conflict = m;
        conflict.rows.push_back(ManifestRow{"t1", "s1", "p0", 1, "male", "groupA"});
        CHECK_THROWS_AS(truecam::aggregate(pair_rows({{0.5, 0.5}, {0.5, 0.5}}),
                                           conflict),
                        std::runtime_error);

        Manifest stolen = m;
        stolen.rows.push_back(ManifestRow{"t1", "s0", "p1", 0, "male", "groupA"});
        CHECK_THROWS_AS(truecam::aggregate(pair_rows({{0.5, 0.5}, {0.5, 0.5}}),
                                           stolen),
                        std::runtime_error);
    }
}

TEST_CASE("prediction sets classify each patient outcome") {
    // nine calibration scores 0.1..0.9 at alpha 0.1 give q_hat 0.9, so a
    // label joins the set whenever its probability is at least 0.1
    const auto cal = truecam::calibrate_scores(
        {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}, 0.1);
    REQUIRE(cal.q_hat == doctest::Approx(0.9));

    std::vector<PatientRecord> records;
    records.push_back(make_record("p0", {0.95, 0.05}, 0));  // single correct
    records.push_back(make_record("p1", {0.95, 0.05}, 1));  // single incorrect
    records.push_back(make_record("p2", {0.5, 0.5}, 0));    // abstention
    records.push_back(make_record("p3", {0.05, 0.95}, 1));  // single correct
    records.push_back(make_record("p4", {0.8, 0.2}, 1));    // abstention

    CHECK_THROWS_AS(truecam::breakdown(records), std::invalid_argument);

    truecam::attach_sets(records, cal);
    const auto counts = truecam::breakdown(records);
    CHECK(counts.single_correct == 2);
    CHECK(counts.single_incorrect == 1);
    CHECK(counts.abstention == 2);
    CHECK(counts.empty == 0);
    CHECK(counts.single_correct + counts.single_incorrect + counts.abstention +
              counts.empty ==
          records.size());

    SUBCASE("breakdown labels stored on the records") {
        CHECK(records[0].breakdown == truecam::Breakdown::kSingleCorrect);
        CHECK(records[1].breakdown == truecam::Breakdown::kSingleIncorrect);
        CHECK(records[2].breakdown == truecam::Breakdown::kAbstention);
    }
    SUBCASE("risk-control sets can empty out") {
        truecam::attach_crc_sets(records, 0.1);
        const auto crc_counts = truecam::breakdown(records);
        CHECK(crc_counts.empty == 2);  // the 0.5/0.5 and 0.8/0.2 patients
        CHECK(crc_counts.single_correct == 2);
        CHECK(crc_counts.single_incorrect == 1);
    }
    SUBCASE("full-set calibrator abstains everywhere") {
        auto all = records;
        const auto full = truecam::calibrate_scores({0.1, 0.2}, 0.01);
        truecam::attach_sets(all, full);
        const auto c = truecam::breakdown(all);
        CHECK(c.abstention == all.size());
    }
}

TEST_CASE("definitive-answer error rate counts singletons only") {
    const auto cal = truecam::calibrate_scores(
        {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}, 0.1);

    SUBCASE("one wrong singleton in ten") {
        std::vector<PatientRecord> records;
        for (int i = 0; i < 9; ++i)
            records.push_back(make_record("p" + std::to_string(i), {0.95, 0.05}, 0));
        records.push_back(make_record("p9", {0.95, 0.05}, 1));
        truecam::attach_sets(records, cal);
        const auto rate = truecam::da_error_rate(records);
        REQUIRE(rate.has_value());
        CHECK(*rate == 0.1);
    }
    SUBCASE("all singletons correct") {
        std::vector<PatientRecord> records;
        for (int i = 0; i < 4; ++i)
            records.push_back(make_record("p" + std::to_string(i), {0.02, 0.98}, 1));
        truecam::attach_sets(records, cal);
        CHECK(*truecam::da_error_rate(records) == 0.0);
    }
    SUBCASE("no singletons means no rate") {
        std::vector<PatientRecord> records;
        records.push_back(make_record("p0", {0.5, 0.5}, 0));
        truecam::attach_sets(records, cal);
        CHECK(!truecam::da_error_rate(records).has_value());
    }
}

TEST_CASE("fairness gap spans the group metric range") {
    const auto add_group = [](std::vector<PatientRecord>& records,
                              const std::string& race, std::size_t n,
                              std::size_t correct) {
        for (std::size_t i = 0; i < n; ++i) {
            const bool ok = i < correct;
            records.push_back(make_record(race + std::to_string(i), {0.9, 0.1},
                                          ok ? 0 : 1, "male", race));
        }
    };

    SUBCASE("identical groups have zero gap") {
        std::vector<PatientRecord> records;
        add_group(records, "groupA", 20, 18);
        add_group(records, "groupB", 20, 18);
        CHECK(truecam::fairness_gap(records, truecam::FairnessMetric::kAccuracy,
                                    truecam::GroupField::kRaceGroup) == 0.0);
    }
    SUBCASE("two groups differ by their accuracy difference") {
        std::vector<PatientRecord> records;
        add_group(records, "groupA", 20, 18);
        add_group(records, "groupB", 20, 16);
        CHECK(truecam::fairness_gap(records, truecam::FairnessMetric::kAccuracy,
                                    truecam::GroupField::kRaceGroup) ==
              doctest::Approx(0.1));
    }
    SUBCASE("three groups span max minus min") {
        std::vector<PatientRecord> records;
        add_group(records, "groupA", 20, 18);
        add_group(records, "groupB", 20, 17);
        add_group(records, "groupC", 20, 14);
        CHECK(truecam::fairness_gap(records, truecam::FairnessMetric::kAccuracy,
                                    truecam::GroupField::kRaceGroup) ==
              doctest::Approx(0.2));
    }
    SUBCASE("small groups merge into Others") {
        std::vector<PatientRecord> records;
        add_group(records, "groupA", 25, 25);
        add_group(records, "groupB", 10, 0);
        add_group(records, "groupC", 7, 7);
        // Others = B + C with accuracy 7/17
        const double gap =
            truecam::fairness_gap(records, truecam::FairnessMetric::kAccuracy,
                                  truecam::GroupField::kRaceGroup);
        CHECK(gap == doctest::Approx(1.0 - 7.0 / 17.0));
    }
    SUBCASE("single group after merging is an error") {
        std::vector<PatientRecord> records;
        add_group(records, "groupA", 30, 20);
        CHECK_THROWS_AS(truecam::fairness_gap(records,
                                              truecam::FairnessMetric::kAccuracy,
                                              truecam::GroupField::kRaceGroup),
                        std::runtime_error);
        // two tiny groups both collapse into one Others bucket
        std::vector<PatientRecord> tiny;
        add_group(tiny, "groupA", 5, 5);
        add_group(tiny, "groupB", 5, 0);
        CHECK_THROWS_AS(truecam::fairness_gap(tiny, truecam::FairnessMetric::kAccuracy,
                                              truecam::GroupField::kRaceGroup),
                        std::runtime_error);
    }
    SUBCASE("set-size metric needs attached sets") {
        std::vector<PatientRecord> records;
        add_group(records, "groupA", 20, 20);
        add_group(records, "groupB", 20, 20);
        CHECK_THROWS_AS(truecam::fairness_gap(records,
                                              truecam::FairnessMetric::kAvgSetSize,
                                              truecam::GroupField::kRaceGroup),
                        std::invalid_argument);
        // give group A full sets and group B singletons
        const auto cal = truecam::calibrate_scores(
            {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}, 0.1);
        for (std::size_t i = 0; i < records.size(); ++i)
            records[i].probs = i < 20 ? std::vector<double>{0.5, 0.5}
                                      : std::vector<double>{0.95, 0.05};
        truecam::attach_sets(records, cal);
        CHECK(truecam::fairness_gap(records, truecam::FairnessMetric::kAvgSetSize,
                                    truecam::GroupField::kRaceGroup) ==
              doctest::Approx(1.0));
    }
    SUBCASE("sex field groups by the sex column") {
        std::vector<PatientRecord> records;
        for (int i = 0; i < 40; ++i) {
            const bool male = i < 20;
            const bool ok = male ? i < 18 : i < 30;
            records.push_back(make_record("p" + std::to_string(i), {0.9, 0.1},
                                          ok ? 0 : 1, male ? "male" : "female",
                                          "groupA"));
        }
        CHECK(truecam::fairness_gap(records, truecam::FairnessMetric::kAccuracy,
                                    truecam::GroupField::kSex) ==
              doctest::Approx(0.9 - 0.5));
    }
}

TEST_CASE("far-ood patients separate under the uncertainty score") {
    truecam::ScenarioConfig cfg;
    cfg.n_patients = 30;
    cfg.slides_per_patient = 1;
    cfg.tiles_per_slide = 6;
    cfg.seed = 29;
    const auto scenario = truecam::gen_ood_scenario(cfg, 1.0);

    // train on the tiles of the first 20 in-domain patients
    std::vector<std::size_t> train_rows;
    for (std::size_t i = 0; i < scenario.manifest.rows.size(); ++i) {
        const auto& r = scenario.manifest.rows[i];
        if (!r.is_ood() && r.patient_id < "P0020") train_rows.push_back(i);
    }
    Matrix x(train_rows.size(), cfg.dim);
    std::vector<int> y;
    for (std::size_t j = 0; j < train_rows.size(); ++j) {
        const auto src = scenario.embeddings.row(train_rows[j]);
        std::copy(src.begin(), src.end(), x.row(j).begin());
        y.push_back(scenario.manifest.rows[train_rows[j]].label);
    }
    truecam::SnMlpConfig mlp;
    mlp.layer_dims = {cfg.dim, 32, 32};
    truecam::TrainConfig tc;
    tc.epochs = 6;
    tc.lr = 0.01;
    tc.seed = 29;
    const auto fit = truecam::fit_head(x, y, 2, mlp, 128, tc);

    const auto uncs = truecam::predict_uncertainty(scenario.embeddings, fit.head);

    std::map<std::string, std::vector<double>> by_patient;
    std::map<std::string, int> flag;
    for (std::size_t i = 0; i < scenario.manifest.rows.size(); ++i) {
        const auto& r = scenario.manifest.rows[i];
        by_patient[r.patient_id].push_back(uncs[i]);
        flag[r.patient_id] = r.is_ood() ? 1 : 0;
    }
    std::vector<double> scores;
    std::vector<int> flags;
    for (const auto& [pid, tile_uncs] : by_patient) {
        scores.push_back(truecam::ood_score_uncertainty(tile_uncs, 200));
        flags.push_back(flag[pid]);
    }
    CHECK(truecam::auroc(scores, flags) > 0.95);
}

TEST_CASE("gating recovers coverage on a contaminated stream") {
    truecam::ScenarioConfig cfg;
    cfg.n_patients = 60;
    cfg.slides_per_patient = 1;
    cfg.tiles_per_slide = 6;
    cfg.seed = 33;
    const auto scenario = truecam::gen_ood_scenario(cfg, 1.0);
    const auto& rows = scenario.manifest.rows;

    std::vector<std::size_t> train_rows;
    for (std::size_t i = 0; i < rows.size(); ++i)
        if (!rows[i].is_ood() && rows[i].patient_id < "P0030")
            train_rows.push_back(i);
    Matrix x(train_rows.size(), cfg.dim);
    std::vector<int> y;
    for (std::size_t j = 0; j < train_rows.size(); ++j) {
        const auto src = scenario.embeddings.row(train_rows[j]);
        std::copy(src.begin(), src.end(), x.row(j).begin());
        y.push_back(rows[train_rows[j]].label);
    }
    truecam::SnMlpConfig mlp;
    mlp.layer_dims = {cfg.dim, 32, 32};
    truecam::TrainConfig tc;
    tc.epochs = 6;
    tc.lr = 0.01;
    tc.seed = 33;
    const auto fit = truecam::fit_head(x, y, 2, mlp, 128, tc);

    const Matrix tile_probs = truecam::predict_probs(scenario.embeddings, fit.head);
    const auto uncs = truecam::predict_uncertainty(scenario.embeddings, fit.head);
    auto records = truecam::aggregate(tile_probs, scenario.manifest);

    std::map<std::string, std::vector<double>> patient_uncs;
    for (std::size_t i = 0; i < rows.size(); ++i)
        patient_uncs[rows[i].patient_id].push_back(uncs[i]);
    const auto score_of = [&](const PatientRecord& r) {
        return truecam::ood_score_uncertainty(patient_uncs.at(r.patient_id), 200);
    };

    // calibration: in-domain patients 30..44; evaluation: in-domain 45..59
    // plus 15 ood patients (1:1); gate tuning: calibration + the other ood
    Matrix cal_probs(15, 2);
    std::vector<int> cal_labels;
    std::vector<double> tune_scores;
    std::vector<int> tune_flags;
    std::vector<const PatientRecord*> eval;
    std::size_t ood_seen = 0;
    for (const auto& rec : records) {
        const bool ood = rec.patient_id[0] == 'O';
        if (!ood && rec.patient_id >= "P0030" && rec.patient_id < "P0045") {
            cal_probs.at(cal_labels.size(), 0) = rec.probs[0];
            cal_probs.at(cal_labels.size(), 1) = rec.probs[1];
            cal_labels.push_back(rec.label);
            tune_scores.push_back(score_of(rec));
            tune_flags.push_back(0);
        } else if (!ood && rec.patient_id >= "P0045") {
            eval.push_back(&rec);
        } else if (ood && ood_seen++ < 45) {
            if (ood_seen <= 30) {
                tune_scores.push_back(score_of(rec));
                tune_flags.push_back(1);
            } else {
                eval.push_back(&rec);
            }
        }
    }
    REQUIRE(cal_labels.size() == 15);

    const auto cal = truecam::calibrate(cal_probs, cal_labels, 0.1);
    std::vector<truecam::PredictionSet> all_sets;
    std::vector<int> all_labels;
    std::vector<truecam::PredictionSet> kept_sets;
    std::vector<int> kept_labels;

    OodGate gate;
    gate.score_kind = truecam::OodScoreKind::kUncertainty;
    gate.policy = truecam::GatePolicy::kTargetTpr;
    gate.threshold = truecam::fit_gate_threshold(
        tune_scores, tune_flags, truecam::GatePolicy::kTargetTpr, 0.95);

    for (const auto* rec : eval) {
        const auto set = truecam::predict_set(rec->probs, cal);
        all_sets.push_back(set);
        all_labels.push_back(rec->label);
        if (!truecam::is_ood(score_of(*rec), gate)) {
            kept_sets.push_back(set);
            kept_labels.push_back(rec->label);
        }
    }
    const double ungated = truecam::empirical_coverage(all_sets, all_labels);
    const double gated = truecam::empirical_coverage(kept_sets, kept_labels);
    CHECK(ungated < 0.75);
    CHECK(gated > ungated + 0.15);
}

TEST_CASE("eliminating the ambiguous blob does not hurt patient accuracy") {
    truecam::ScenarioConfig cfg;
    cfg.n_patients = 30;
    cfg.seed = 21;
    const auto scenario = truecam::gen_eat_scenario(cfg);
    const auto& rows = scenario.manifest.rows;

    std::vector<std::size_t> train_rows;
    std::vector<std::size_t> test_rows;
    for (std::size_t i = 0; i < rows.size(); ++i)
        (rows[i].patient_id < "P0015" ? train_rows : test_rows).push_back(i);

    const auto slice = [&](const std::vector<std::size_t>& idx, Matrix& out_x,
                           std::vector<int>& out_y, Manifest& out_m) {
        out_x = Matrix(idx.size(), cfg.dim);
        out_y.clear();
        out_m.rows.clear();
        for (std::size_t j = 0; j < idx.size(); ++j) {
            const auto src = scenario.embeddings.row(idx[j]);
            std::copy(src.begin(), src.end(), out_x.row(j).begin());
            out_y.push_back(rows[idx[j]].label);
            out_m.rows.push_back(rows[idx[j]]);
        }
    };
    Matrix train_x;
    std::vector<int> train_y;
    Manifest train_m;
    slice(train_rows, train_x, train_y, train_m);
    Matrix test_x;
    std::vector<int> test_y;
    Manifest test_m;
    slice(test_rows, test_x, test_y, test_m);

    truecam::SnMlpConfig mlp;
    mlp.layer_dims = {cfg.dim, 32, 32};
    truecam::TrainConfig tc;
    tc.epochs = 8;
    tc.lr = 0.01;
    tc.seed = 21;

    const auto base_fit = truecam::fit_head(train_x, train_y, 2, mlp, 128, tc);
    const auto base_records =
        truecam::aggregate(truecam::predict_probs(test_x, base_fit.head), test_m);
    const double base_acc = records_accuracy(base_records);

    // ambiguity from the baseline head's own probabilities
    const Matrix train_probs = truecam::predict_probs(train_x, base_fit.head);
    const EatFilter filter =
        truecam::fit_eat_cluster(train_x, train_probs, train_y, 3, 21);

    std::vector<double> train_amb(train_x.rows);
    for (std::size_t i = 0; i < train_x.rows; ++i)
        train_amb[i] = truecam::ambiguity_score(train_probs.row(i));
    const auto kept_train =
        truecam::eat_retained_indices(train_x, train_amb, train_m, filter);
    Matrix eat_x(kept_train.size(), cfg.dim);
    std::vector<int> eat_y;
    for (std::size_t j = 0; j < kept_train.size(); ++j) {
        const auto src = train_x.row(kept_train[j]);
        std::copy(src.begin(), src.end(), eat_x.row(j).begin());
        eat_y.push_back(train_y[kept_train[j]]);
    }
    const auto eat_fit = truecam::fit_head(eat_x, eat_y, 2, mlp, 128, tc);

    const Matrix test_probs = truecam::predict_probs(test_x, eat_fit.head);
    std::vector<double> test_amb(test_x.rows);
    for (std::size_t i = 0; i < test_x.rows; ++i)
        test_amb[i] = truecam::ambiguity_score(test_probs.row(i));
    const auto kept_test =
        truecam::eat_retained_indices(test_x, test_amb, test_m, filter);
    Matrix filt_x(kept_test.size(), cfg.dim);
    Manifest filt_m;
    for (std::size_t j = 0; j < kept_test.size(); ++j) {
        const auto src = test_x.row(kept_test[j]);
        std::copy(src.begin(), src.end(), filt_x.row(j).begin());
        filt_m.rows.push_back(test_m.rows[kept_test[j]]);
    }
    const auto eat_records =
        truecam::aggregate(truecam::predict_probs(filt_x, eat_fit.head), filt_m);
    const double eat_acc = records_accuracy(eat_records);

    CHECK(eat_records.size() == base_records.size());
    CHECK(eat_acc >= base_acc);
}
