#include "truecam/data.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "truecam/rng.hpp"

namespace truecam {

namespace {

std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    return bytes;
}

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, double v) {
    put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

struct ByteReader {
    const std::string& bytes;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) {
        if (bytes.size() - pos < n)
            throw std::runtime_error(std::string("embedding file truncated in ") + what);
    }
    std::uint16_t u16() {
        need(2, "header");
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i)
            v |= static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
        return v;
    }
    std::uint32_t u32() {
        need(4, "header");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
        return v;
    }
    double f32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
        return static_cast<double>(std::bit_cast<float>(v));
    }
};

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

int parse_label(const std::string& s, std::size_t line_no) {
    int v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw std::runtime_error("manifest line " + std::to_string(line_no) +
                                 ": bad label '" + s + "'");
    if (v != -1 && v != 0 && v != 1)
        throw std::runtime_error("manifest line " + std::to_string(line_no) +
                                 ": label must be -1, 0, or 1");
    return v;
}

void check_field_writable(const std::string& s, const char* what) {
    for (char c : s)
        if (c == ',' || c == '\n' || c == '\r')
            throw std::invalid_argument(std::string(what) +
                                        " contains a comma or newline: " + s);
}

void validate_manifest(const Manifest& m) {
    std::unordered_set<std::string> tile_ids;
    std::unordered_map<std::string, std::string> slide_patient;
    for (const auto& r : m.rows) {
        if (r.tile_id.empty() || r.slide_id.empty() || r.patient_id.empty())
            throw std::runtime_error("manifest row with empty id for tile '" +
                                     r.tile_id + "'");
        if (!tile_ids.insert(r.tile_id).second)
            throw std::runtime_error("duplicate tile_id " + r.tile_id);
        auto [it, fresh] = slide_patient.emplace(r.slide_id, r.patient_id);
        if (!fresh && it->second != r.patient_id)
            throw std::runtime_error("slide " + r.slide_id +
                                     " mapped to two patients");
    }
}

void validate_scenario_config(const ScenarioConfig& cfg) {
    if (cfg.n_patients == 0 || cfg.slides_per_patient == 0 ||
        cfg.tiles_per_slide == 0 || cfg.dim == 0)
        throw std::invalid_argument("scenario counts must be positive");
    if (!(cfg.class_separation >= 0.0) || !std::isfinite(cfg.class_separation))
        throw std::invalid_argument("class_separation must be finite and >= 0");
    if (!(cfg.noise_sigma > 0.0) || !std::isfinite(cfg.noise_sigma))
        throw std::invalid_argument("noise_sigma must be finite and positive");
    if (!std::isfinite(cfg.ood_offset))
        throw std::invalid_argument("ood_offset must be finite");
    if (!(cfg.eat_mix_fraction >= 0.0 && cfg.eat_mix_fraction <= 1.0))
        throw std::invalid_argument("eat_mix_fraction must be in [0,1]");
    if (!(cfg.eat_purity >= 0.0 && cfg.eat_purity <= 1.0))
        throw std::invalid_argument("eat_purity must be in [0,1]");
}

std::string padded_id(const char* prefix, std::size_t idx) {
    std::string digits = std::to_string(idx);
    if (digits.size() < 4) digits.insert(0, 4 - digits.size(), '0');
    return prefix + digits;
}

std::string draw_sex(Rng& rng) { return rng.uniform() < 0.5 ? "male" : "female"; }

std::string draw_race(Rng& rng) {
    const double u = rng.uniform();
    if (u < 0.5) return "groupA";
    if (u < 0.8) return "groupB";
    return "groupC";
}

/// Emits one patient: slides_per_patient * tiles_per_slide rows whose
/// embeddings are mean(tile) + noise_sigma * N(0, I). `mean_of_tile` may
/// consume further rng draws before the noise draws of that tile.
template <typename MeanFn>
void append_patient(Scenario& s, const ScenarioConfig& cfg, Rng& rng,
                    const std::string& patient_id, int label, MeanFn mean_of_tile) {
    const std::string sex = draw_sex(rng);
    const std::string race = draw_race(rng);
    for (std::size_t sl = 0; sl < cfg.slides_per_patient; ++sl) {
        const std::string slide_id = patient_id + "_S" + std::to_string(sl);
        for (std::size_t t = 0; t < cfg.tiles_per_slide; ++t) {
            ManifestRow row;
            row.tile_id = slide_id + "_T" + std::to_string(t);
            row.slide_id = slide_id;
            row.patient_id = patient_id;
            row.label = label;
            row.sex = sex;
            row.race_group = race;
            s.manifest.rows.push_back(std::move(row));

            const std::vector<double> mean = mean_of_tile(rng);
            const std::size_t r = s.embeddings.rows++;
            s.embeddings.data.resize(s.embeddings.rows * cfg.dim);
            for (std::size_t j = 0; j < cfg.dim; ++j)
                s.embeddings.at(r, j) = mean[j] + cfg.noise_sigma * rng.normal();
        }
    }
}

std::vector<double> class_mean(const ScenarioConfig& cfg, int label) {
    std::vector<double> mean(cfg.dim, 0.0);
    mean[0] = (label == 1 ? 0.5 : -0.5) * cfg.class_separation;
    return mean;
}

}  // namespace

Matrix read_embeddings(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    ByteReader r{bytes};
    r.need(4, "magic");
    if (bytes.compare(0, 4, "EMB1") != 0)
        throw std::runtime_error("not an embedding file (bad magic): " + path);
    r.pos = 4;
    const std::uint16_t version = r.u16();
    if (version != 1)
        throw std::runtime_error("unsupported embedding file version " +
                                 std::to_string(version));
    const std::uint32_t n_rows = r.u32();
    const std::uint32_t dim = r.u32();
    const std::size_t payload =
        4 * static_cast<std::size_t>(n_rows) * static_cast<std::size_t>(dim);
    if (bytes.size() - r.pos != payload)
        throw std::runtime_error("embedding payload size mismatch in " + path);
    Matrix x(n_rows, dim);
    for (double& v : x.data) v = r.f32();
    return x;
}

void write_embeddings(const std::string& path, const Matrix& x) {
    if (x.rows > UINT32_MAX || x.cols > UINT32_MAX)
        throw std::invalid_argument("embedding matrix too large for the format");
    std::string out;
    out.reserve(14 + 4 * x.data.size());
    out += "EMB1";
    put_u16(out, 1);
    put_u32(out, static_cast<std::uint32_t>(x.rows));
    put_u32(out, static_cast<std::uint32_t>(x.cols));
    for (double v : x.data) put_f32(out, v);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("write failed for " + path);
}

Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line))
        throw std::runtime_error("manifest is empty: " + path);
    const auto header = split_csv_line(line);
    const std::vector<std::string> expected = {"tile_id",  "slide_id", "patient_id",
                                               "label",    "sex",      "race_group"};
    if (header != expected)
        throw std::runtime_error("bad manifest header in " + path);

    Manifest m;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != 6)
            throw std::runtime_error("manifest line " + std::to_string(line_no) +
                                     ": expected 6 fields, got " +
                                     std::to_string(fields.size()));
        ManifestRow row;
        row.tile_id = fields[0];
        row.slide_id = fields[1];
        row.patient_id = fields[2];
        row.label = parse_label(fields[3], line_no);
        row.sex = fields[4];
        row.race_group = fields[5];
        m.rows.push_back(std::move(row));
    }
    validate_manifest(m);
    return m;
}

void write_manifest(const std::string& path, const Manifest& m) {
    validate_manifest(m);
    std::string out = "tile_id,slide_id,patient_id,label,sex,race_group\n";
    for (const auto& r : m.rows) {
        check_field_writable(r.tile_id, "tile_id");
        check_field_writable(r.slide_id, "slide_id");
        check_field_writable(r.patient_id, "patient_id");
        check_field_writable(r.sex, "sex");
        check_field_writable(r.race_group, "race_group");
        out += r.tile_id;
        out += ',';
        out += r.slide_id;
        out += ',';
        out += r.patient_id;
        out += ',';
        out += std::to_string(r.label);
        out += ',';
        out += r.sex;
        out += ',';
        out += r.race_group;
        out += '\n';
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("write failed for " + path);
}

ScenarioConfig read_scenario_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    ScenarioConfig cfg;

    const auto trim = [](std::string s) {
        const auto notspace = [](unsigned char c) { return !std::isspace(c); };
        s.erase(s.begin(), std::find_if(s.begin(), s.end(), notspace));
        s.erase(std::find_if(s.rbegin(), s.rend(), notspace).base(), s.end());
        return s;
    };
    const auto parse_count = [](const std::string& key, const std::string& v) {
        std::size_t out = 0;
        const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
        if (res.ec != std::errc() || res.ptr != v.data() + v.size())
            throw std::invalid_argument("bad value for " + key + ": '" + v + "'");
        return out;
    };
    const auto parse_real = [](const std::string& key, const std::string& v) {
        double out = 0.0;
        const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
        if (res.ec != std::errc() || res.ptr != v.data() + v.size())
            throw std::invalid_argument("bad value for " + key + ": '" + v + "'");
        return out;
    };

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        " is not key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "n_patients") cfg.n_patients = parse_count(key, value);
        else if (key == "slides_per_patient") cfg.slides_per_patient = parse_count(key, value);
        else if (key == "tiles_per_slide") cfg.tiles_per_slide = parse_count(key, value);
        else if (key == "dim") cfg.dim = parse_count(key, value);
        else if (key == "class_separation") cfg.class_separation = parse_real(key, value);
        else if (key == "noise_sigma") cfg.noise_sigma = parse_real(key, value);
        else if (key == "ood_offset") cfg.ood_offset = parse_real(key, value);
        else if (key == "eat_mix_fraction") cfg.eat_mix_fraction = parse_real(key, value);
        else if (key == "eat_purity") cfg.eat_purity = parse_real(key, value);
        else if (key == "seed") cfg.seed = parse_count(key, value);
        else throw std::invalid_argument("unknown scenario key: " + key);
    }
    validate_scenario_config(cfg);
    return cfg;
}

Scenario gen_ind_scenario(const ScenarioConfig& cfg) {
    validate_scenario_config(cfg);
    Scenario s;
    s.embeddings = Matrix(0, cfg.dim);
    Rng rng(cfg.seed);
    for (std::size_t p = 0; p < cfg.n_patients; ++p) {
        const int label = static_cast<int>(p % 2);
        append_patient(s, cfg, rng, padded_id("P", p), label,
                       [&](Rng&) { return class_mean(cfg, label); });
    }
    return s;
}

Scenario gen_ood_scenario(const ScenarioConfig& cfg, double ratio) {
    if (!(ratio >= 0.0) || !std::isfinite(ratio))
        throw std::invalid_argument("ood ratio must be finite and >= 0");
    if (ratio * static_cast<double>(cfg.n_patients) > 1e9)
        throw std::invalid_argument("ood ratio too large");
    Scenario s = gen_ind_scenario(cfg);
    const auto n_ood =
        static_cast<std::size_t>(std::llround(ratio * static_cast<double>(cfg.n_patients)));
    Rng rng(mix_seed(cfg.seed, 0xd00d));
    for (std::size_t p = 0; p < n_ood; ++p) {
        // same class mixture as in-domain, shifted along axis 1; at offset 0
        // the rows are distributionally indistinguishable from in-domain data
        const int hidden = rng.uniform() < 0.5 ? 0 : 1;
        std::vector<double> mean = class_mean(cfg, hidden);
        mean[1 % cfg.dim] += cfg.ood_offset;
        append_patient(s, cfg, rng, padded_id("O", p), -1,
                       [&](Rng&) { return mean; });
    }
    return s;
}

Scenario gen_eat_scenario(const ScenarioConfig& cfg) {
    validate_scenario_config(cfg);
    Scenario s;
    s.embeddings = Matrix(0, cfg.dim);
    Rng rng(cfg.seed);
    std::vector<double> ambiguous_mean(cfg.dim, 0.0);
    ambiguous_mean[1 % cfg.dim] = cfg.class_separation;
    for (std::size_t p = 0; p < cfg.n_patients; ++p) {
        const int label = static_cast<int>(p % 2);
        append_patient(s, cfg, rng, padded_id("P", p), label, [&](Rng& r) {
            if (r.uniform() < cfg.eat_mix_fraction) {
                s.eat_blobs.push_back(2);
                return ambiguous_mean;
            }
            const int blob = r.uniform() < cfg.eat_purity ? label : 1 - label;
            s.eat_blobs.push_back(blob);
            return class_mean(cfg, blob);
        });
    }
    return s;
}

SplitPlan make_split_plan(const Manifest& m, double train_ratio, double val_ratio,
                          double caltest_ratio, std::size_t n_resplits,
                          std::size_t cal_size, std::uint64_t seed) {
    for (double r : {train_ratio, val_ratio, caltest_ratio})
        if (!(r >= 0.0 && r <= 1.0))
            throw std::invalid_argument("split ratios must be in [0,1]");
    if (std::abs(train_ratio + val_ratio + caltest_ratio - 1.0) > 1e-9)
        throw std::invalid_argument("split ratios must sum to 1");

    std::vector<std::string> patients;
    std::unordered_set<std::string> seen;
    for (const auto& row : m.rows)
        if (seen.insert(row.patient_id).second) patients.push_back(row.patient_id);
    const std::size_t n = patients.size();
    if (n == 0) throw std::invalid_argument("manifest has no patients");

    const auto n_train =
        static_cast<std::size_t>(std::llround(train_ratio * static_cast<double>(n)));
    const auto n_val =
        static_cast<std::size_t>(std::llround(val_ratio * static_cast<double>(n)));
    if (n_train + n_val >= n)
        throw std::invalid_argument("split leaves no calibration/test patients");
    const std::size_t n_caltest = n - n_train - n_val;
    if (cal_size == 0 || cal_size >= n_caltest)
        throw std::invalid_argument("calibration size must leave test patients");

    SplitPlan plan;
    plan.seed = seed;
    Rng part_rng(mix_seed(seed, 1));
    const auto order = part_rng.permutation(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::string& id = patients[order[i]];
        if (i < n_train) plan.train_patients.push_back(id);
        else if (i < n_train + n_val) plan.val_patients.push_back(id);
        else plan.caltest_patients.push_back(id);
    }

    Rng rs_rng(mix_seed(seed, 2));
    plan.resplits.reserve(n_resplits);
    for (std::size_t r = 0; r < n_resplits; ++r) {
        const auto perm = rs_rng.permutation(n_caltest);
        SplitPlan::Resplit rs;
        for (std::size_t i = 0; i < n_caltest; ++i) {
            const std::string& id = plan.caltest_patients[perm[i]];
            if (i < cal_size) rs.calibration.push_back(id);
            else rs.test.push_back(id);
        }
        plan.resplits.push_back(std::move(rs));
    }
    return plan;
}

}  // namespace truecam
