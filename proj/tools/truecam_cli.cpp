#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "truecam/conformal.hpp"
#include "truecam/data.hpp"
#include "truecam/matrix.hpp"
#include "truecam/rng.hpp"
#include "truecam/sngp.hpp"
#include "truecam/trust.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using truecam::Manifest;
using truecam::Matrix;

namespace {

/// Errors surfaced to the user carry the module that failed.
struct CliError : std::runtime_error {
    CliError(const std::string& module, const std::string& what)
        : std::runtime_error("[" + module + "] " + what) {}
};

template <typename F>
auto stage(const char* module, F&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const CliError&) {
        throw;
    } catch (const std::exception& e) {
        throw CliError(module, e.what());
    }
}

std::string fmt_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CliError("cli", "cannot open " + path + " for writing");
    out << content;
    out.flush();
    if (!out) throw CliError("cli", "failed writing " + path);
}

std::string dump_json(const ordered_json& j) { return j.dump(2) + "\n"; }

ordered_json parse_json_file(const std::string& path, const std::string& kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CliError("cli", "cannot open " + path);
    try {
        return ordered_json::parse(in);
    } catch (const std::exception& e) {
        throw CliError("cli", path + " is not a valid " + kind + " file: " + e.what());
    }
}

struct Dataset {
    Matrix x;
    Manifest manifest;
};

Dataset load_dataset(const std::string& emb_path, const std::string& csv_path) {
    Dataset ds;
    ds.x = stage("data", [&] { return truecam::read_embeddings(emb_path); });
    ds.manifest = stage("data", [&] { return truecam::read_manifest(csv_path); });
    if (ds.x.rows != ds.manifest.rows.size())
        throw CliError("data", "embedding rows (" + std::to_string(ds.x.rows) +
                                   ") do not match manifest rows (" +
                                   std::to_string(ds.manifest.rows.size()) + ")");
    return ds;
}

Matrix subset_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
    Matrix out(idx.size(), m.cols);
    for (std::size_t j = 0; j < idx.size(); ++j) {
        const auto src = m.row(idx[j]);
        std::copy(src.begin(), src.end(), out.row(j).begin());
    }
    return out;
}

Dataset subset_dataset(const Dataset& ds, const std::vector<std::size_t>& idx) {
    Dataset out;
    out.x = subset_rows(ds.x, idx);
    for (std::size_t i : idx) out.manifest.rows.push_back(ds.manifest.rows[i]);
    return out;
}

std::vector<double> tile_ambiguities(const Matrix& probs) {
    std::vector<double> amb(probs.rows);
    for (std::size_t i = 0; i < probs.rows; ++i)
        amb[i] = truecam::ambiguity_score(probs.row(i));
    return amb;
}

const char* breakdown_name(truecam::Breakdown b) {
    switch (b) {
        case truecam::Breakdown::kSingleCorrect: return "single-correct";
        case truecam::Breakdown::kSingleIncorrect: return "single-incorrect";
        case truecam::Breakdown::kAbstention: return "abstention";
        default: return "empty";
    }
}

ordered_json filter_to_json(const truecam::EatFilter& f) {
    ordered_json j;
    j["schema"] = 1;
    j["kind"] = "eat-filter";
    if (f.mode == truecam::EatFilter::Mode::kCluster) {
        j["mode"] = "cluster";
        j["dominance_cutoff"] = f.dominance_cutoff;
        j["ambiguous_cluster_id"] = f.ambiguous_cluster_id;
        ordered_json centers = ordered_json::array();
        for (std::size_t r = 0; r < f.centers.rows; ++r) {
            ordered_json row = ordered_json::array();
            for (std::size_t c = 0; c < f.centers.cols; ++c)
                row.push_back(f.centers.at(r, c));
            centers.push_back(std::move(row));
        }
        j["centers"] = std::move(centers);
    } else {
        j["mode"] = "threshold";
        j["threshold"] = f.threshold;
        j["target_elimination_rate"] = f.target_elimination_rate;
    }
    return j;
}

truecam::EatFilter filter_from_json(const ordered_json& j, const std::string& path) {
    truecam::EatFilter f;
    try {
        const std::string mode = j.at("mode").get<std::string>();
        if (mode == "cluster") {
            f.mode = truecam::EatFilter::Mode::kCluster;
            f.dominance_cutoff = j.at("dominance_cutoff").get<double>();
            f.ambiguous_cluster_id = j.at("ambiguous_cluster_id").get<std::size_t>();
            const auto& centers = j.at("centers");
            if (centers.empty()) throw std::runtime_error("empty centers");
            f.centers = Matrix(centers.size(), centers[0].size());
            for (std::size_t r = 0; r < f.centers.rows; ++r)
                for (std::size_t c = 0; c < f.centers.cols; ++c)
                    f.centers.at(r, c) = centers[r][c].get<double>();
        } else if (mode == "threshold") {
            f.mode = truecam::EatFilter::Mode::kThreshold;
            f.threshold = j.at("threshold").get<double>();
            f.target_elimination_rate = j.at("target_elimination_rate").get<double>();
        } else {
            throw std::runtime_error("unknown mode '" + mode + "'");
        }
    } catch (const std::exception& e) {
        throw CliError("cli", path + " is not a usable filter file: " + e.what());
    }
    return f;
}

// ---------------------------------------------------------------------------
// gen

struct GenOpts {
    std::string scenario;
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    double ood_ratio = 1.0;
};

void run_gen(const GenOpts& o) {
    auto cfg = stage("data", [&] { return truecam::read_scenario_config(o.config); });
    if (o.seed_set) cfg.seed = o.seed;
    truecam::Scenario sc;
    if (o.scenario == "ind") {
        sc = stage("data", [&] { return truecam::gen_ind_scenario(cfg); });
    } else if (o.scenario == "ood") {
        sc = stage("data", [&] { return truecam::gen_ood_scenario(cfg, o.ood_ratio); });
    } else {
        sc = stage("data", [&] { return truecam::gen_eat_scenario(cfg); });
    }
    stage("data", [&] { truecam::write_embeddings(o.out + ".emb", sc.embeddings); });
    stage("data", [&] { truecam::write_manifest(o.out + ".csv", sc.manifest); });
    std::cout << "wrote " << o.out << ".emb (" << sc.embeddings.rows << " x "
              << sc.embeddings.cols << ") and " << o.out << ".csv ("
              << sc.manifest.rows.size() << " rows)\n";
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
    std::string emb;
    std::string csv;
    std::string out;
    std::uint64_t seed = 0;
    std::size_t epochs = 8;
    double lr = 0.01;
    std::size_t batch = 128;
    std::size_t rff = 1024;
    std::vector<std::size_t> hidden{64, 64};
    // caps above 1 keep the representation distance-preserving enough for
    // uncertainty to stay distance-aware; 1-ish caps over-contract far inputs
    double sn_cap = 2.0;
    double tau = 1.0;
};

void run_train(const TrainOpts& o) {
    const Dataset ds = load_dataset(o.emb, o.csv);
    std::vector<std::size_t> idx;
    int max_label = 0;
    for (std::size_t i = 0; i < ds.manifest.rows.size(); ++i) {
        if (ds.manifest.rows[i].is_ood()) continue;
        idx.push_back(i);
        max_label = std::max(max_label, ds.manifest.rows[i].label);
    }
    if (idx.empty()) throw CliError("data", "no labeled tiles to train on");
    const Matrix x = subset_rows(ds.x, idx);
    std::vector<int> y;
    for (std::size_t i : idx) y.push_back(ds.manifest.rows[i].label);

    truecam::SnMlpConfig mlp;
    mlp.layer_dims.push_back(ds.x.cols);
    for (std::size_t h : o.hidden) mlp.layer_dims.push_back(h);
    mlp.sn_cap = o.sn_cap;
    truecam::TrainConfig tc;
    tc.epochs = o.epochs;
    tc.batch_size = o.batch;
    tc.lr = o.lr;
    tc.tau = o.tau;
    tc.seed = o.seed;
    const auto num_classes = static_cast<std::size_t>(std::max(max_label + 1, 2));
    const auto fit = stage("sngp", [&] {
        return truecam::fit_head(x, y, num_classes, mlp, o.rff, tc);
    });
    stage("sngp", [&] { truecam::save_checkpoint(o.out, fit.head); });
    std::cout << "trained on " << idx.size() << " tiles for " << o.epochs
              << " epochs: final loss " << fmt_double(fit.epoch_losses.back())
              << ", train accuracy " << fmt_double(fit.train_accuracy)
              << "\ncheckpoint " << o.out << "\n";
}

// ---------------------------------------------------------------------------
// eat

struct EatOpts {
    std::string emb;
    std::string csv;
    std::string head;
    std::string mode;
    std::string out;
    std::uint64_t seed = 0;
    std::size_t k = 3;
    double dominance = 0.6;
    double rate = 0.1;
};

void run_eat(const EatOpts& o) {
    const Dataset ds = load_dataset(o.emb, o.csv);
    const auto head = stage("sngp", [&] { return truecam::load_checkpoint(o.head); });
    const Matrix probs =
        stage("sngp", [&] { return truecam::predict_probs(ds.x, head); });
    const auto amb = stage("trust", [&] { return tile_ambiguities(probs); });

    truecam::EatFilter filter;
    if (o.mode == "cluster") {
        std::vector<int> labels;
        for (const auto& r : ds.manifest.rows) {
            if (r.is_ood())
                throw CliError("trust",
                               "cluster mode needs labeled tiles; tile " + r.tile_id +
                                   " is unlabeled");
            labels.push_back(r.label);
        }
        filter = stage("trust", [&] {
            return truecam::fit_eat_cluster(ds.x, probs, labels, o.k, o.seed,
                                            o.dominance);
        });
    } else {
        filter = stage("trust",
                       [&] { return truecam::fit_eat_threshold(amb, o.rate); });
    }
    const auto kept = stage("trust", [&] {
        return truecam::eat_retained_indices(ds.x, amb, ds.manifest, filter);
    });

    ordered_json j = filter_to_json(filter);
    ordered_json retention;
    retention["total"] = ds.x.rows;
    retention["retained"] = kept.size();
    retention["eliminated"] = ds.x.rows - kept.size();
    retention["rate"] = ds.x.rows == 0
                            ? 0.0
                            : static_cast<double>(ds.x.rows - kept.size()) /
                                  static_cast<double>(ds.x.rows);
    j["retention"] = std::move(retention);
    write_text(o.out, dump_json(j));
    std::cout << "retained " << kept.size() << " of " << ds.x.rows
              << " tiles; filter " << o.out << "\n";
}

// ---------------------------------------------------------------------------
// calibrate

struct CalibrateOpts {
    std::string emb;
    std::string csv;
    std::string head;
    std::string out;
    std::vector<double> alphas{0.1, 0.05, 0.01};
};

void run_calibrate(const CalibrateOpts& o) {
    const Dataset ds = load_dataset(o.emb, o.csv);
    const auto head = stage("sngp", [&] { return truecam::load_checkpoint(o.head); });
    const Matrix probs =
        stage("sngp", [&] { return truecam::predict_probs(ds.x, head); });
    const auto records =
        stage("trust", [&] { return truecam::aggregate(probs, ds.manifest); });

    Matrix pm(records.size(), records.empty() ? 0 : records[0].probs.size());
    std::vector<int> labels;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].label < 0)
            throw CliError("conformal", "calibration stream contains unlabeled patient " +
                                            records[i].patient_id);
        std::copy(records[i].probs.begin(), records[i].probs.end(), pm.row(i).begin());
        labels.push_back(records[i].label);
    }

    ordered_json j;
    j["schema"] = 1;
    j["kind"] = "conformal-calibration";
    j["n_patients"] = records.size();
    // nonconformity scores do not depend on alpha; stored once so a loaded
    // calibrator is identical to a freshly fitted one
    ordered_json cals = ordered_json::array();
    std::vector<double> scores;
    for (double a : o.alphas) {
        const auto cal =
            stage("conformal", [&] { return truecam::calibrate(pm, labels, a); });
        scores = cal.scores;
        ordered_json entry;
        entry["alpha"] = a;
        entry["q_hat"] = cal.q_hat;
        cals.push_back(std::move(entry));
    }
    j["scores"] = scores;
    j["calibrators"] = std::move(cals);
    write_text(o.out, dump_json(j));
    std::cout << "calibrated " << o.alphas.size() << " error levels over "
              << records.size() << " patients; " << o.out << "\n";
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOpts {
    std::string emb;
    std::string csv;
    std::string head;
    std::string cal;
    std::string out_dir;
    std::string filter;  // optional
};

void run_evaluate(const EvaluateOpts& o) {
    Dataset ds = load_dataset(o.emb, o.csv);
    const auto head = stage("sngp", [&] { return truecam::load_checkpoint(o.head); });
    Matrix probs = stage("sngp", [&] { return truecam::predict_probs(ds.x, head); });
    const std::size_t total_tiles = ds.x.rows;

    const bool filtered = !o.filter.empty();
    if (filtered) {
        const auto filter = filter_from_json(parse_json_file(o.filter, "filter"), o.filter);
        const auto amb = stage("trust", [&] { return tile_ambiguities(probs); });
        const auto kept = stage("trust", [&] {
            return truecam::eat_retained_indices(ds.x, amb, ds.manifest, filter);
        });
        ds = subset_dataset(ds, kept);
        probs = subset_rows(probs, kept);
    }
    auto records =
        stage("trust", [&] { return truecam::aggregate(probs, ds.manifest); });

    const auto cal_json = parse_json_file(o.cal, "calibration");
    std::vector<std::pair<double, double>> calibrators;
    std::vector<double> cal_scores;
    try {
        cal_scores = cal_json.at("scores").get<std::vector<double>>();
        for (const auto& entry : cal_json.at("calibrators"))
            calibrators.emplace_back(entry.at("alpha").get<double>(),
                                     entry.at("q_hat").get<double>());
    } catch (const std::exception& e) {
        throw CliError("cli", o.cal + " is not a usable calibration file: " + e.what());
    }
    if (calibrators.empty())
        throw CliError("cli", o.cal + " holds no calibrators");

    stage("cli", [&] { fs::create_directories(o.out_dir); });

    // patients.csv: one row per patient with aggregated probabilities
    const std::size_t k = records.empty() ? 0 : records[0].probs.size();
    std::string patients_csv = "patient_id,label,sex,race_group";
    for (std::size_t c = 0; c < k; ++c)
        patients_csv += ",prob_" + std::to_string(c);
    patients_csv += "\n";
    for (const auto& rec : records) {
        patients_csv += rec.patient_id + "," + std::to_string(rec.label) + "," +
                        rec.sex + "," + rec.race_group;
        for (double p : rec.probs) patients_csv += "," + fmt_double(p);
        patients_csv += "\n";
    }

    std::string sets_csv = "alpha,patient_id,set,set_size,breakdown\n";
    ordered_json per_alpha = ordered_json::array();
    const auto gap_or_null = [&](truecam::FairnessMetric metric,
                                 truecam::GroupField field) -> ordered_json {
        try {
            return truecam::fairness_gap(records, metric, field);
        } catch (const std::runtime_error&) {
            return nullptr;  // fewer than two groups of reportable size
        }
    };

    for (const auto& [alpha, q_hat] : calibrators) {
        truecam::ConformalCalibrator cal;
        cal.alpha = alpha;
        cal.scores = cal_scores;
        cal.q_hat = q_hat;
        stage("conformal", [&] { truecam::attach_sets(records, cal); });

        std::vector<truecam::PredictionSet> sets;
        std::vector<int> labels;
        for (const auto& rec : records) {
            sets.push_back(rec.set);
            labels.push_back(rec.label);
            std::string joined;
            for (std::size_t i = 0; i < rec.set.labels.size(); ++i) {
                if (i) joined += "|";
                joined += std::to_string(rec.set.labels[i]);
            }
            sets_csv += fmt_double(alpha) + "," + rec.patient_id + "," + joined +
                        "," + std::to_string(rec.set.size()) + "," +
                        breakdown_name(rec.breakdown) + "\n";
        }
        const auto counts = stage("trust", [&] { return truecam::breakdown(records); });
        const auto da = stage("trust", [&] { return truecam::da_error_rate(records); });

        ordered_json entry;
        entry["alpha"] = alpha;
        entry["q_hat"] = q_hat;
        entry["coverage"] = truecam::empirical_coverage(sets, labels);
        entry["avg_set_size"] = truecam::average_set_size(sets);
        ordered_json bd;
        bd["single_correct"] = counts.single_correct;
        bd["single_incorrect"] = counts.single_incorrect;
        bd["abstention"] = counts.abstention;
        bd["empty"] = counts.empty;
        entry["breakdown"] = std::move(bd);
        entry["da_error_rate"] = da ? ordered_json(*da) : ordered_json(nullptr);
        ordered_json fairness;
        fairness["sex_accuracy_gap"] =
            gap_or_null(truecam::FairnessMetric::kAccuracy, truecam::GroupField::kSex);
        fairness["race_accuracy_gap"] = gap_or_null(truecam::FairnessMetric::kAccuracy,
                                                    truecam::GroupField::kRaceGroup);
        fairness["sex_set_size_gap"] = gap_or_null(truecam::FairnessMetric::kAvgSetSize,
                                                   truecam::GroupField::kSex);
        fairness["race_set_size_gap"] = gap_or_null(
            truecam::FairnessMetric::kAvgSetSize, truecam::GroupField::kRaceGroup);
        entry["fairness"] = std::move(fairness);
        per_alpha.push_back(std::move(entry));
    }

    ordered_json report;
    report["schema"] = 1;
    report["kind"] = "trust-report";
    report["n_tiles_in"] = total_tiles;
    report["n_tiles_scored"] = ds.x.rows;
    report["filter_applied"] = filtered;
    report["n_patients"] = records.size();
    report["per_alpha"] = std::move(per_alpha);

    const fs::path dir(o.out_dir);
    write_text((dir / "report.json").string(), dump_json(report));
    write_text((dir / "patients.csv").string(), patients_csv);
    write_text((dir / "sets.csv").string(), sets_csv);
    std::cout << "evaluated " << records.size() << " patients at "
              << calibrators.size() << " error levels; report in " << o.out_dir
              << "\n";
}

// ---------------------------------------------------------------------------
// simulate-ood

struct SimulateOpts {
    std::string config;
    std::string out;
    std::vector<double> ratios{0.25, 0.5, 1.0, 2.0};
    double alpha = 0.05;
    std::uint64_t seed = 0;
    bool seed_set = false;
    double tpr = 1.0;
    std::size_t delta = 200;
    std::string score = "uncertainty";
    std::size_t rff = 2048;
    double sn_cap = 2.0;
};

void run_simulate(const SimulateOpts& o) {
    auto cfg = stage("data", [&] { return truecam::read_scenario_config(o.config); });
    if (o.seed_set) cfg.seed = o.seed;
    if (!(o.alpha > 0.0 && o.alpha < 1.0))
        throw CliError("cli", "alpha must lie in (0, 1)");
    if (!(o.tpr > 0.0 && o.tpr <= 1.0))
        throw CliError("cli", "tpr target must lie in (0, 1]");
    for (double r : o.ratios)
        if (!(r >= 0.0) || !std::isfinite(r))
            throw CliError("cli", "ratios must be finite and non-negative");

    std::string csv =
        "ratio,n_ind_test,n_ood_test,n_retained,gate_threshold,rho_hat,"
        "coverage_crc_gated,avg_set_size_crc,coverage_cp_ungated\n";

    for (double ratio : o.ratios) {
        const auto sc = stage("data", [&] { return truecam::gen_ood_scenario(cfg, ratio); });
        const auto& rows = sc.manifest.rows;

        // patients in generation order; in-domain first, then ood
        std::vector<std::string> ind_patients;
        std::vector<std::string> ood_patients;
        std::map<std::string, bool> seen;
        for (const auto& r : rows) {
            if (seen.emplace(r.patient_id, true).second)
                (r.is_ood() ? ood_patients : ind_patients).push_back(r.patient_id);
        }
        const std::size_t n_ind = ind_patients.size();
        if (n_ind < 4)
            throw CliError("data", "simulate-ood needs at least 4 in-domain patients");
        const std::size_t n_train = n_ind / 2;
        const std::size_t n_cal = n_ind / 4;
        std::map<std::string, int> role;  // 0 train, 1 cal, 2 test
        for (std::size_t i = 0; i < n_ind; ++i)
            role[ind_patients[i]] = i < n_train ? 0 : (i < n_train + n_cal ? 1 : 2);
        std::map<std::string, int> ood_role;  // 0 tune, 1 test
        for (std::size_t i = 0; i < ood_patients.size(); ++i)
            ood_role[ood_patients[i]] = i < ood_patients.size() / 2 ? 0 : 1;

        std::vector<std::size_t> train_rows;
        for (std::size_t i = 0; i < rows.size(); ++i)
            if (!rows[i].is_ood() && role[rows[i].patient_id] == 0)
                train_rows.push_back(i);
        Matrix x = Matrix(train_rows.size(), sc.embeddings.cols);
        std::vector<int> y;
        for (std::size_t j = 0; j < train_rows.size(); ++j) {
            const auto src = sc.embeddings.row(train_rows[j]);
            std::copy(src.begin(), src.end(), x.row(j).begin());
            y.push_back(rows[train_rows[j]].label);
        }
        truecam::SnMlpConfig mlp;
        mlp.layer_dims = {sc.embeddings.cols, 32, 32};
        mlp.sn_cap = o.sn_cap;
        truecam::TrainConfig tc;
        tc.epochs = 8;
        tc.batch_size = 128;
        tc.lr = 0.01;
        tc.seed = truecam::mix_seed(cfg.seed, std::bit_cast<std::uint64_t>(ratio));
        const auto fit =
            stage("sngp", [&] { return truecam::fit_head(x, y, 2, mlp, o.rff, tc); });

        const Matrix probs =
            stage("sngp", [&] { return truecam::predict_probs(sc.embeddings, fit.head); });
        const auto uncs = stage("sngp", [&] {
            return truecam::predict_uncertainty(sc.embeddings, fit.head);
        });
        const auto records =
            stage("trust", [&] { return truecam::aggregate(probs, sc.manifest); });

        std::map<std::string, std::vector<std::size_t>> rows_of;
        for (std::size_t i = 0; i < rows.size(); ++i)
            rows_of[rows[i].patient_id].push_back(i);
        const auto patient_score = [&](const std::string& pid) {
            const auto& pr = rows_of.at(pid);
            if (o.score == "probability") {
                Matrix pp = subset_rows(probs, pr);
                return truecam::ood_score_probability(pp);
            }
            std::vector<double> pu;
            for (std::size_t i : pr) pu.push_back(uncs[i]);
            return truecam::ood_score_uncertainty(pu, o.delta);
        };

        // gate tuned on the calibration in-domain patients plus half the ood
        std::vector<double> tune_scores;
        std::vector<int> tune_flags;
        for (const auto& pid : ind_patients)
            if (role[pid] == 1) {
                tune_scores.push_back(patient_score(pid));
                tune_flags.push_back(0);
            }
        for (const auto& pid : ood_patients)
            if (ood_role[pid] == 0) {
                tune_scores.push_back(patient_score(pid));
                tune_flags.push_back(1);
            }
        double threshold = std::numeric_limits<double>::infinity();
        if (!ood_patients.empty())
            threshold = stage("trust", [&] {
                return truecam::fit_gate_threshold(
                    tune_scores, tune_flags, truecam::GatePolicy::kTargetTpr, o.tpr);
            });
        truecam::OodGate gate;
        gate.threshold = threshold;

        std::map<std::string, const truecam::PatientRecord*> by_id;
        for (const auto& rec : records) by_id[rec.patient_id] = &rec;

        // crc fitted on the gated calibration stream
        std::vector<const truecam::PatientRecord*> crc_stream;
        for (const auto& pid : ind_patients)
            if (role[pid] == 1 && !truecam::is_ood(patient_score(pid), gate))
                crc_stream.push_back(by_id.at(pid));
        for (const auto& pid : ood_patients)
            if (ood_role[pid] == 0 && !truecam::is_ood(patient_score(pid), gate))
                crc_stream.push_back(by_id.at(pid));
        Matrix crc_probs(crc_stream.size(), 2);
        std::vector<int> crc_labels;
        for (std::size_t i = 0; i < crc_stream.size(); ++i) {
            crc_probs.at(i, 0) = crc_stream[i]->probs[0];
            crc_probs.at(i, 1) = crc_stream[i]->probs[1];
            crc_labels.push_back(crc_stream[i]->label);
        }
        const auto crc = stage("conformal", [&] {
            return truecam::crc_fit(crc_probs, crc_labels, o.alpha);
        });

        // split conformal on the calibration in-domain patients, ungated
        Matrix cal_probs(n_cal, 2);
        std::vector<int> cal_labels;
        for (const auto& pid : ind_patients)
            if (role[pid] == 1) {
                const auto* rec = by_id.at(pid);
                cal_probs.at(cal_labels.size(), 0) = rec->probs[0];
                cal_probs.at(cal_labels.size(), 1) = rec->probs[1];
                cal_labels.push_back(rec->label);
            }
        const auto cp = stage("conformal", [&] {
            return truecam::calibrate(cal_probs, cal_labels, o.alpha);
        });

        // evaluation stream: in-domain test patients plus the ood test half
        std::vector<const truecam::PatientRecord*> eval;
        for (const auto& pid : ind_patients)
            if (role[pid] == 2) eval.push_back(by_id.at(pid));
        std::size_t n_ood_test = 0;
        for (const auto& pid : ood_patients)
            if (ood_role[pid] == 1) {
                eval.push_back(by_id.at(pid));
                ++n_ood_test;
            }

        std::vector<truecam::PredictionSet> cp_sets;
        std::vector<int> cp_labels;
        std::vector<truecam::PredictionSet> crc_sets;
        std::vector<int> crc_eval_labels;
        std::size_t retained = 0;
        for (const auto* rec : eval) {
            cp_sets.push_back(truecam::predict_set(rec->probs, cp));
            cp_labels.push_back(rec->label);
            if (!truecam::is_ood(patient_score(rec->patient_id), gate)) {
                ++retained;
                crc_sets.push_back(truecam::crc_set(rec->probs, crc.rho_hat));
                crc_eval_labels.push_back(rec->label);
            }
        }
        const double cov_crc =
            crc_sets.empty() ? 0.0
                             : truecam::empirical_coverage(crc_sets, crc_eval_labels);
        const double size_crc =
            crc_sets.empty() ? 0.0 : truecam::average_set_size(crc_sets);
        const double cov_cp = truecam::empirical_coverage(cp_sets, cp_labels);

        csv += fmt_double(ratio) + "," + std::to_string(eval.size() - n_ood_test) +
               "," + std::to_string(n_ood_test) + "," + std::to_string(retained) +
               "," + fmt_double(threshold) + "," + fmt_double(crc.rho_hat) + "," +
               fmt_double(cov_crc) + "," + fmt_double(size_crc) + "," +
               fmt_double(cov_cp) + "\n";
    }
    write_text(o.out, csv);
    std::cout << "wrote " << o.out << " (" << o.ratios.size() << " ratios)\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "trust-aware slide classification: synthetic data, gp-head training,\n"
        "conformal calibration, ambiguity filtering, ood gating, reporting"};
    app.require_subcommand(1);

    GenOpts gen;
    auto* gen_cmd = app.add_subcommand(
        "gen", "generate a synthetic cohort (.emb embeddings + .csv manifest)");
    gen_cmd->add_option("--scenario", gen.scenario, "cohort kind")
        ->required()
        ->check(CLI::IsMember({"ind", "ood", "eat"}));
    gen_cmd->add_option("--config", gen.config, "key=value scenario config")
        ->required()
        ->check(CLI::ExistingFile);
    gen_cmd->add_option("--out", gen.out, "output path prefix")->required();
    auto* gen_seed = gen_cmd->add_option("--seed", gen.seed, "override config seed");
    gen_cmd->add_option("--ood-ratio", gen.ood_ratio,
                        "ood:in-domain patient ratio (ood scenario only)");

    TrainOpts train;
    auto* train_cmd =
        app.add_subcommand("train", "fit the gp head on labeled tiles");
    train_cmd->add_option("emb", train.emb, "embeddings file")
        ->required()
        ->check(CLI::ExistingFile);
    train_cmd->add_option("csv", train.csv, "manifest file")
        ->required()
        ->check(CLI::ExistingFile);
    train_cmd->add_option("--out", train.out, "checkpoint path")->required();
    train_cmd->add_option("--seed", train.seed, "training seed");
    train_cmd->add_option("--epochs", train.epochs, "training epochs");
    train_cmd->add_option("--lr", train.lr, "learning rate");
    train_cmd->add_option("--batch", train.batch, "batch size");
    train_cmd->add_option("--rff", train.rff, "random feature count");
    train_cmd->add_option("--hidden", train.hidden, "hidden layer widths");
    train_cmd->add_option("--sn-cap", train.sn_cap, "spectral norm cap");
    train_cmd->add_option("--tau", train.tau, "gp prior precision");

    EatOpts eat;
    auto* eat_cmd = app.add_subcommand(
        "eat", "fit an ambiguity filter and report tile retention");
    eat_cmd->add_option("emb", eat.emb)->required()->check(CLI::ExistingFile);
    eat_cmd->add_option("csv", eat.csv)->required()->check(CLI::ExistingFile);
    eat_cmd->add_option("head", eat.head)->required()->check(CLI::ExistingFile);
    eat_cmd->add_option("--mode", eat.mode, "filter kind")
        ->required()
        ->check(CLI::IsMember({"cluster", "threshold"}));
    eat_cmd->add_option("--out", eat.out, "filter json path")->required();
    eat_cmd->add_option("--seed", eat.seed, "clustering seed");
    eat_cmd->add_option("--k", eat.k, "cluster count");
    eat_cmd->add_option("--dominance", eat.dominance, "label dominance cutoff");
    eat_cmd->add_option("--rate", eat.rate, "target elimination rate (threshold mode)");

    CalibrateOpts calib;
    auto* cal_cmd = app.add_subcommand(
        "calibrate", "fit conformal thresholds on patient-level probabilities");
    cal_cmd->add_option("emb", calib.emb)->required()->check(CLI::ExistingFile);
    cal_cmd->add_option("csv", calib.csv)->required()->check(CLI::ExistingFile);
    cal_cmd->add_option("head", calib.head)->required()->check(CLI::ExistingFile);
    cal_cmd->add_option("--out", calib.out, "calibration json path")->required();
    cal_cmd->add_option("--alpha", calib.alphas,
                        "error levels (default 0.1 0.05 0.01)");

    EvaluateOpts eval;
    auto* eval_cmd = app.add_subcommand(
        "evaluate",
        "prediction sets, breakdown, fairness; writes report.json, patients.csv, "
        "sets.csv");
    eval_cmd->add_option("emb", eval.emb)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("csv", eval.csv)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("head", eval.head)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("cal", eval.cal)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--out", eval.out_dir, "output directory")->required();
    eval_cmd->add_option("--filter", eval.filter, "eat filter json to apply first")
        ->check(CLI::ExistingFile);

    SimulateOpts sim;
    auto* sim_cmd = app.add_subcommand(
        "simulate-ood",
        "coverage vs contamination ratio under gating and risk control (csv)");
    sim_cmd->add_option("--config", sim.config, "scenario config")
        ->required()
        ->check(CLI::ExistingFile);
    sim_cmd->add_option("--out", sim.out, "output csv path")->required();
    sim_cmd->add_option("--ratio", sim.ratios,
                        "ood ratios to sweep (default 0.25 0.5 1 2)");
    sim_cmd->add_option("--alpha", sim.alpha, "error level");
    auto* sim_seed = sim_cmd->add_option("--seed", sim.seed, "override config seed");
    sim_cmd->add_option("--tpr", sim.tpr, "gate true positive rate target");
    sim_cmd->add_option("--delta", sim.delta, "tiles per uncertainty score");
    sim_cmd->add_option("--score", sim.score, "patient ood score kind")
        ->check(CLI::IsMember({"uncertainty", "probability"}));
    sim_cmd->add_option("--rff", sim.rff, "random feature count");
    sim_cmd->add_option("--sn-cap", sim.sn_cap, "spectral norm cap");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen_cmd->parsed()) {
            gen.seed_set = gen_seed->count() > 0;
            run_gen(gen);
        } else if (train_cmd->parsed()) {
            run_train(train);
        } else if (eat_cmd->parsed()) {
            run_eat(eat);
        } else if (cal_cmd->parsed()) {
            run_calibrate(calib);
        } else if (eval_cmd->parsed()) {
            run_evaluate(eval);
        } else if (sim_cmd->parsed()) {
            sim.seed_set = sim_seed->count() > 0;
            run_simulate(sim);
        }
    } catch (const std::exception& e) {
        std::cerr << "truecam: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
