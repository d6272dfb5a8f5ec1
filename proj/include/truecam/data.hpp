#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "truecam/matrix.hpp"

namespace truecam {

/// One tile of a whole-slide image. label -1 marks an out-of-domain row;
/// in-domain labels are 0 or 1 (the slide-level diagnosis).
struct ManifestRow {
    std::string tile_id;
    std::string slide_id;
    std::string patient_id;
    int label = 0;
    std::string sex;
    std::string race_group;

    bool is_ood() const { return label == -1; }
};

/// Validated tile->slide->patient hierarchy. Invariants: tile ids unique,
/// each slide belongs to exactly one patient.
struct Manifest {
    std::vector<ManifestRow> rows;
};

/// CSV with header `tile_id,slide_id,patient_id,label,sex,race_group`.
Manifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const Manifest& m);

/// Binary embedding matrix: magic "EMB1", u16 version (= 1), u32 n_rows,
/// u32 dim, then n_rows*dim little-endian f32, row-major. Values are
/// quantized to f32 on write.
Matrix read_embeddings(const std::string& path);
void write_embeddings(const std::string& path, const Matrix& x);

struct ScenarioConfig {
    std::size_t n_patients = 60;
    std::size_t slides_per_patient = 2;
    std::size_t tiles_per_slide = 6;
    std::size_t dim = 8;
    double class_separation = 4.0;  // distance between the two class means
    double noise_sigma = 1.0;
    double ood_offset = 6.0;        // shift of the OOD blob along axis 1
    double eat_mix_fraction = 0.5;  // tile probability of the ambiguous blob
    double eat_purity = 0.95;       // label purity of the dominated blobs
    std::uint64_t seed = 42;
};

/// Flat key=value file, one pair per line; keys are the field names above.
/// '#' starts a comment; missing keys keep their defaults; unknown keys are
/// an error.
ScenarioConfig read_scenario_config(const std::string& path);

struct Scenario {
    Matrix embeddings;  // one row per manifest row
    Manifest manifest;
    /// Generator-truth blob of each tile (0/1 class blobs, 2 ambiguous).
    /// Filled by gen_eat_scenario, empty otherwise.
    std::vector<int> eat_blobs;
};

/// Two Gaussian class blobs split along axis 0, tiles grouped into
/// slides/patients. Deterministic per cfg.seed.
Scenario gen_ind_scenario(const ScenarioConfig& cfg);

/// In-domain scenario (identical to gen_ind_scenario for the same cfg) plus
/// round(ratio * n_patients) OOD patients whose tiles are drawn from the
/// same class mixture shifted by ood_offset along axis 1 and labeled -1.
Scenario gen_ood_scenario(const ScenarioConfig& cfg, double ratio);

/// Three blobs: two class-dominated at eat_purity, one ambiguous blob
/// (offset along axis 1) whose tiles come from slides of both labels.
/// Each tile lands in the ambiguous blob with probability eat_mix_fraction.
Scenario gen_eat_scenario(const ScenarioConfig& cfg);

struct SplitPlan {
    std::vector<std::string> train_patients;
    std::vector<std::string> val_patients;
    std::vector<std::string> caltest_patients;
    struct Resplit {
        std::vector<std::string> calibration;
        std::vector<std::string> test;
    };
    std::vector<Resplit> resplits;
    std::uint64_t seed = 0;
};

/// Patient-level partition (no patient straddles splits) plus n_resplits
/// calibration/test divisions of the caltest pool, cal_size patients each.
/// Ratios must sum to 1; cal_size must leave at least one test patient.
SplitPlan make_split_plan(const Manifest& m, double train_ratio = 0.65,
                          double val_ratio = 0.15, double caltest_ratio = 0.20,
                          std::size_t n_resplits = 500, std::size_t cal_size = 100,
                          std::uint64_t seed = 0);

}  // namespace truecam
