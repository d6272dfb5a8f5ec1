#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "truecam/conformal.hpp"
#include "truecam/data.hpp"
#include "truecam/matrix.hpp"
#include "truecam/numerics.hpp"
#include "truecam/rng.hpp"
#include "truecam/sngp.hpp"
#include "truecam/trust.hpp"

namespace py = pybind11;
using namespace truecam;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix matrix_from_array(const DoubleArray& a) {
    if (a.ndim() != 2) throw std::invalid_argument("Matrix expects a 2-D array");
    Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), m.data.begin());
    return m;
}

py::array_t<double> matrix_to_array(const Matrix& m) {
    py::array_t<double> out({m.rows, m.cols});
    std::copy(m.data.begin(), m.data.end(), out.mutable_data());
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() =
        "Trust stack for tile-embedding classifiers: a distance-aware "
        "spectral-normalized random-feature head, split conformal prediction, "
        "conformal risk control, ambiguity-based tile elimination, OOD gating, "
        "patient-level aggregation, and fairness gaps.";

    py::class_<Matrix>(m, "Matrix")
        .def(py::init<>())
        .def(py::init(&matrix_from_array), py::arg("array"))
        .def_readonly("rows", &Matrix::rows)
        .def_readonly("cols", &Matrix::cols)
        .def("to_numpy", &matrix_to_array)
        .def("__repr__", [](const Matrix& mm) {
            return "Matrix(" + std::to_string(mm.rows) + "x" + std::to_string(mm.cols) + ")";
        });
    py::implicitly_convertible<py::array, Matrix>();
    py::implicitly_convertible<py::sequence, Matrix>();

    m.def("mix_seed", &mix_seed, py::arg("seed"), py::arg("tag"));

    // numerics
    m.def(
        "spectral_norm",
        [](const Matrix& w, std::size_t iterations, std::uint64_t seed) {
            Rng rng(seed);
            return spectral_norm(w, iterations, rng);
        },
        py::arg("w"), py::arg("iterations") = 50, py::arg("seed") = 0);

    py::class_<KMeansResult>(m, "KMeansResult")
        .def_readonly("centers", &KMeansResult::centers)
        .def_readonly("assignments", &KMeansResult::assignments)
        .def_readonly("inertia", &KMeansResult::inertia);
    m.def(
        "kmeans",
        [](const Matrix& x, std::size_t k, std::size_t max_iters, std::size_t restarts,
           std::uint64_t seed) {
            Rng rng(seed);
            return kmeans(x, k, max_iters, restarts, rng);
        },
        py::arg("x"), py::arg("k"), py::arg("max_iters") = 100, py::arg("restarts") = 4,
        py::arg("seed") = 0);
    m.def("silhouette", &silhouette, py::arg("x"), py::arg("assignments"));
    m.def("auroc", &auroc, py::arg("scores"), py::arg("labels"));

    py::class_<RocCurve>(m, "RocCurve")
        .def_readonly("thresholds", &RocCurve::thresholds)
        .def_readonly("tpr", &RocCurve::tpr)
        .def_readonly("fpr", &RocCurve::fpr)
        .def_readonly("precision", &RocCurve::precision);
    m.def("roc_pr_curve", &roc_pr_curve, py::arg("scores"), py::arg("labels"));
    m.def("roc_auc", &roc_auc, py::arg("curve"));

    // head
    py::class_<SnMlpConfig>(m, "SnMlpConfig")
        .def(py::init<>())
        .def_readwrite("layer_dims", &SnMlpConfig::layer_dims)
        .def_readwrite("sn_cap", &SnMlpConfig::sn_cap)
        .def_readwrite("power_iters", &SnMlpConfig::power_iters);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("epochs", &TrainConfig::epochs)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("lr", &TrainConfig::lr)
        .def_readwrite("lr_decay", &TrainConfig::lr_decay)
        .def_readwrite("lr_decay_every", &TrainConfig::lr_decay_every)
        .def_readwrite("adam_beta1", &TrainConfig::adam_beta1)
        .def_readwrite("adam_beta2", &TrainConfig::adam_beta2)
        .def_readwrite("tau", &TrainConfig::tau)
        .def_readwrite("seed", &TrainConfig::seed);

    py::class_<SngpHead>(m, "SngpHead")
        .def_property_readonly("trained", &SngpHead::trained)
        .def_property_readonly(
            "num_classes", [](const SngpHead& h) { return h.posterior.num_classes; });

    py::class_<FitResult>(m, "FitResult")
        .def_readonly("head", &FitResult::head)
        .def_readonly("epoch_losses", &FitResult::epoch_losses)
        .def_readonly("train_accuracy", &FitResult::train_accuracy);

    m.def(
        "apply_spectral_normalization",
        [](const Matrix& w, double c, std::size_t power_iters, std::uint64_t seed) {
            Rng rng(seed);
            return apply_spectral_normalization(w, c, power_iters, rng);
        },
        py::arg("w"), py::arg("c"), py::arg("power_iters") = 10, py::arg("seed") = 0);

    m.def("fit_head", &fit_head, py::arg("x"), py::arg("labels"), py::arg("num_classes"),
          py::arg("mlp_cfg"), py::arg("rff_dim"), py::arg("cfg"));

    py::enum_<PredictiveIntegral>(m, "PredictiveIntegral")
        .value("mean_field", PredictiveIntegral::MeanField)
        .value("monte_carlo", PredictiveIntegral::MonteCarlo);

    py::class_<PredictiveOutput>(m, "PredictiveOutput")
        .def_readonly("mu", &PredictiveOutput::mu)
        .def_readonly("sigma", &PredictiveOutput::sigma)
        .def_readonly("probs", &PredictiveOutput::probs)
        .def_readonly("uncertainty", &PredictiveOutput::uncertainty);

    m.def(
        "predict",
        [](const std::vector<double>& x, const SngpHead& head, PredictiveIntegral integral,
           std::size_t mc_samples, std::uint64_t mc_seed) {
            return predict(x, head, integral, mc_samples, mc_seed);
        },
        py::arg("x"), py::arg("head"), py::arg("integral") = PredictiveIntegral::MeanField,
        py::arg("mc_samples") = 1000, py::arg("mc_seed") = 0);
    m.def("predict_probs", &predict_probs, py::arg("x"), py::arg("head"));
    m.def("predict_uncertainty", &predict_uncertainty, py::arg("x"), py::arg("head"));
    m.def("save_checkpoint", &save_checkpoint, py::arg("path"), py::arg("head"));
    m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

    // conformal
    py::class_<ConformalCalibrator>(m, "ConformalCalibrator")
        .def(py::init<>())
        .def_readwrite("alpha", &ConformalCalibrator::alpha)
        .def_readwrite("scores", &ConformalCalibrator::scores)
        .def_readwrite("q_hat", &ConformalCalibrator::q_hat);

    py::class_<PredictionSet>(m, "PredictionSet")
        .def_readonly("labels", &PredictionSet::labels)
        .def("__len__", &PredictionSet::size)
        .def("__contains__", &PredictionSet::contains);

    m.def("nonconformity",
          [](const std::vector<double>& probs, int y) { return nonconformity(probs, y); },
          py::arg("probs"), py::arg("y"));
    m.def("calibrate", &calibrate, py::arg("probs"), py::arg("labels"), py::arg("alpha"));
    m.def("calibrate_scores", &calibrate_scores, py::arg("scores"), py::arg("alpha"));
    m.def(
        "predict_set",
        [](const std::vector<double>& probs, const ConformalCalibrator& cal) {
            return predict_set(probs, cal);
        },
        py::arg("probs"), py::arg("calibrator"));
    m.def("empirical_coverage", &empirical_coverage, py::arg("sets"), py::arg("labels"));
    m.def("average_set_size", &average_set_size, py::arg("sets"));
    m.def("crc_set",
          [](const std::vector<double>& probs, double rho) { return crc_set(probs, rho); },
          py::arg("probs"), py::arg("rho"));

    py::class_<CrcController>(m, "CrcController")
        .def_readonly("rho_hat", &CrcController::rho_hat)
        .def_readonly("alpha", &CrcController::alpha)
        .def_readonly("search_tol", &CrcController::search_tol);
    m.def("crc_fit", &crc_fit, py::arg("probs"), py::arg("labels"), py::arg("alpha"),
          py::arg("tol") = 1e-4);
    m.def("crc_fit_loss", &crc_fit_loss, py::arg("loss"), py::arg("alpha"),
          py::arg("tol") = 1e-4);

    py::class_<CalibrationRecord>(m, "CalibrationRecord")
        .def(py::init<>())
        .def_readwrite("item_id", &CalibrationRecord::item_id)
        .def_readwrite("probs", &CalibrationRecord::probs)
        .def_readwrite("label", &CalibrationRecord::label);
    m.def("read_calibration_records", &read_calibration_records, py::arg("path"));
    m.def("write_calibration_records", &write_calibration_records, py::arg("path"),
          py::arg("records"));

    // data
    py::class_<ManifestRow>(m, "ManifestRow")
        .def(py::init<>())
        .def_readwrite("tile_id", &ManifestRow::tile_id)
        .def_readwrite("slide_id", &ManifestRow::slide_id)
        .def_readwrite("patient_id", &ManifestRow::patient_id)
        .def_readwrite("label", &ManifestRow::label)
        .def_readwrite("sex", &ManifestRow::sex)
        .def_readwrite("race_group", &ManifestRow::race_group)
        .def("is_ood", &ManifestRow::is_ood);

    py::class_<Manifest>(m, "Manifest")
        .def(py::init<>())
        .def_readwrite("rows", &Manifest::rows);
    m.def("read_manifest", &read_manifest, py::arg("path"));
    m.def("write_manifest", &write_manifest, py::arg("path"), py::arg("manifest"));
    m.def("read_embeddings", &read_embeddings, py::arg("path"));
    m.def("write_embeddings", &write_embeddings, py::arg("path"), py::arg("x"));

    py::class_<ScenarioConfig>(m, "ScenarioConfig")
        .def(py::init<>())
        .def_readwrite("n_patients", &ScenarioConfig::n_patients)
        .def_readwrite("slides_per_patient", &ScenarioConfig::slides_per_patient)
        .def_readwrite("tiles_per_slide", &ScenarioConfig::tiles_per_slide)
        .def_readwrite("dim", &ScenarioConfig::dim)
        .def_readwrite("class_separation", &ScenarioConfig::class_separation)
        .def_readwrite("noise_sigma", &ScenarioConfig::noise_sigma)
        .def_readwrite("ood_offset", &ScenarioConfig::ood_offset)
        .def_readwrite("eat_mix_fraction", &ScenarioConfig::eat_mix_fraction)
        .def_readwrite("eat_purity", &ScenarioConfig::eat_purity)
        .def_readwrite("seed", &ScenarioConfig::seed);
    m.def("read_scenario_config", &read_scenario_config, py::arg("path"));

    py::class_<Scenario>(m, "Scenario")
        .def_readonly("embeddings", &Scenario::embeddings)
        .def_readonly("manifest", &Scenario::manifest)
        .def_readonly("eat_blobs", &Scenario::eat_blobs);
    m.def("gen_ind_scenario", &gen_ind_scenario, py::arg("cfg"));
    m.def("gen_ood_scenario", &gen_ood_scenario, py::arg("cfg"), py::arg("ratio"));
    m.def("gen_eat_scenario", &gen_eat_scenario, py::arg("cfg"));

    py::class_<SplitPlan::Resplit>(m, "Resplit")
        .def_readonly("calibration", &SplitPlan::Resplit::calibration)
        .def_readonly("test", &SplitPlan::Resplit::test);
    py::class_<SplitPlan>(m, "SplitPlan")
        .def_readonly("train_patients", &SplitPlan::train_patients)
        .def_readonly("val_patients", &SplitPlan::val_patients)
        .def_readonly("caltest_patients", &SplitPlan::caltest_patients)
        .def_readonly("resplits", &SplitPlan::resplits)
        .def_readonly("seed", &SplitPlan::seed);
    m.def("make_split_plan", &make_split_plan, py::arg("manifest"),
          py::arg("train_ratio") = 0.65, py::arg("val_ratio") = 0.15,
          py::arg("caltest_ratio") = 0.20, py::arg("n_resplits") = 500,
          py::arg("cal_size") = 100, py::arg("seed") = 0);

    // trust
    m.def("ambiguity_score",
          [](const std::vector<double>& probs) { return ambiguity_score(probs); },
          py::arg("probs"));

    py::class_<LogisticModel>(m, "LogisticModel")
        .def_readonly("w", &LogisticModel::w)
        .def_readonly("b", &LogisticModel::b)
        .def("predict_pair",
             [](const LogisticModel& lm, const std::vector<double>& x) {
                 return lm.predict_pair(x);
             },
             py::arg("x"));
    m.def("fit_logistic", &fit_logistic, py::arg("x"), py::arg("labels"), py::arg("l2") = 1.0,
          py::arg("max_iter") = 50);

    py::class_<AmbiguityModel>(m, "AmbiguityModel")
        .def("tile_probs",
             [](const AmbiguityModel& am, const std::vector<double>& x) {
                 return am.tile_probs(x);
             },
             py::arg("x"))
        .def("score",
             [](const AmbiguityModel& am, const std::vector<double>& x) { return am.score(x); },
             py::arg("x"));
    m.def("make_head_ambiguity", &make_head_ambiguity, py::arg("head"));
    m.def("make_proxy_ambiguity", &make_proxy_ambiguity, py::arg("x"), py::arg("labels"),
          py::arg("l2") = 1.0);

    py::class_<EatFilter> eat_filter(m, "EatFilter");
    py::enum_<EatFilter::Mode>(eat_filter, "Mode")
        .value("cluster", EatFilter::Mode::kCluster)
        .value("threshold", EatFilter::Mode::kThreshold);
    eat_filter.def(py::init<>())
        .def_readwrite("mode", &EatFilter::mode)
        .def_readwrite("centers", &EatFilter::centers)
        .def_readwrite("ambiguous_cluster_id", &EatFilter::ambiguous_cluster_id)
        .def_readwrite("threshold", &EatFilter::threshold)
        .def_readwrite("target_elimination_rate", &EatFilter::target_elimination_rate)
        .def_readwrite("dominance_cutoff", &EatFilter::dominance_cutoff);

    m.def("fit_eat_cluster", &fit_eat_cluster, py::arg("tiles"), py::arg("tile_probs"),
          py::arg("slide_labels"), py::arg("k") = 3, py::arg("seed") = 0,
          py::arg("dominance_cutoff") = 0.6);
    m.def("fit_eat_threshold", &fit_eat_threshold, py::arg("train_ambiguities"),
          py::arg("target_rate"));
    m.def("eliminate_tiles", &eliminate_tiles, py::arg("slide_tiles"),
          py::arg("slide_ambiguities"), py::arg("filter"));
    m.def("eat_retained_indices", &eat_retained_indices, py::arg("tiles"),
          py::arg("ambiguities"), py::arg("manifest"), py::arg("filter"));

    m.def("ood_score_probability", &ood_score_probability, py::arg("tile_probs"));
    m.def("ood_score_uncertainty", &ood_score_uncertainty, py::arg("tile_uncertainties"),
          py::arg("delta") = 200);

    py::enum_<OodScoreKind>(m, "OodScoreKind")
        .value("probability", OodScoreKind::kProbability)
        .value("uncertainty", OodScoreKind::kUncertainty);
    py::enum_<GatePolicy>(m, "GatePolicy")
        .value("fixed", GatePolicy::kFixed)
        .value("target_tpr", GatePolicy::kTargetTpr)
        .value("target_fpr", GatePolicy::kTargetFpr);

    py::class_<OodGate>(m, "OodGate")
        .def(py::init<>())
        .def_readwrite("score_kind", &OodGate::score_kind)
        .def_readwrite("delta", &OodGate::delta)
        .def_readwrite("threshold", &OodGate::threshold)
        .def_readwrite("policy", &OodGate::policy);

    m.def("patient_ood_score", &patient_ood_score, py::arg("tile_probs"),
          py::arg("tile_uncertainties"), py::arg("gate"));
    m.def("is_ood", &is_ood, py::arg("score"), py::arg("gate"));
    m.def("fit_gate_threshold", &fit_gate_threshold, py::arg("scores"), py::arg("ood_flags"),
          py::arg("policy"), py::arg("target"));

    py::class_<DscResult>(m, "DscResult")
        .def_readonly("retained", &DscResult::retained)
        .def_readonly("excluded", &DscResult::excluded);
    m.def("dsc_filter", &dsc_filter, py::arg("record_scores"), py::arg("gate"));

    py::enum_<Breakdown>(m, "Breakdown")
        .value("single_correct", Breakdown::kSingleCorrect)
        .value("single_incorrect", Breakdown::kSingleIncorrect)
        .value("abstention", Breakdown::kAbstention)
        .value("empty", Breakdown::kEmpty);

    py::class_<PatientRecord>(m, "PatientRecord")
        .def_readonly("patient_id", &PatientRecord::patient_id)
        .def_readonly("slide_ids", &PatientRecord::slide_ids)
        .def_readonly("slide_probs", &PatientRecord::slide_probs)
        .def_readonly("probs", &PatientRecord::probs)
        .def_readonly("label", &PatientRecord::label)
        .def_readonly("sex", &PatientRecord::sex)
        .def_readonly("race_group", &PatientRecord::race_group)
        .def_readonly("set", &PatientRecord::set)
        .def_readonly("set_attached", &PatientRecord::set_attached)
        .def_readonly("breakdown", &PatientRecord::breakdown);

    m.def("aggregate", &aggregate, py::arg("tile_probs"), py::arg("manifest"));

    // the list -> vector conversion copies, so the mutating C++ signatures
    // come back as "returns the updated records" here
    m.def(
        "attach_sets",
        [](std::vector<PatientRecord> records, const ConformalCalibrator& cal) {
            attach_sets(records, cal);
            return records;
        },
        py::arg("records"), py::arg("calibrator"));
    m.def(
        "attach_crc_sets",
        [](std::vector<PatientRecord> records, double rho) {
            attach_crc_sets(records, rho);
            return records;
        },
        py::arg("records"), py::arg("rho"));

    py::class_<BreakdownCounts>(m, "BreakdownCounts")
        .def_readonly("single_correct", &BreakdownCounts::single_correct)
        .def_readonly("single_incorrect", &BreakdownCounts::single_incorrect)
        .def_readonly("abstention", &BreakdownCounts::abstention)
        .def_readonly("empty", &BreakdownCounts::empty);
    m.def("breakdown", &breakdown, py::arg("records"));
    m.def("da_error_rate", &da_error_rate, py::arg("records"));

    py::enum_<FairnessMetric>(m, "FairnessMetric")
        .value("accuracy", FairnessMetric::kAccuracy)
        .value("avg_set_size", FairnessMetric::kAvgSetSize);
    py::enum_<GroupField>(m, "GroupField")
        .value("sex", GroupField::kSex)
        .value("race_group", GroupField::kRaceGroup);
    m.def("fairness_gap", &fairness_gap, py::arg("records"), py::arg("metric"),
          py::arg("field"), py::arg("min_group") = 20);

    m.attr("__version__") = "0.1.0";
}
