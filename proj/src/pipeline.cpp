#include "latentsteer/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "latentsteer/common.hpp"
#include "latentsteer/concepts.hpp"
#include "latentsteer/metrics.hpp"
#include "latentsteer/rng.hpp"
#include "latentsteer/sae.hpp"
#include "latentsteer/spectral.hpp"
#include "latentsteer/steering.hpp"

namespace latentsteer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

uint64_t stage_seed(uint64_t base, const std::string& tag, int a = 0, int b = 0) {
    std::string key = tag + "/" + std::to_string(a) + "/" + std::to_string(b);
    uint64_t state = base ^ fnv1a64(key);
    splitmix64(state);
    return splitmix64(state);
}

json band_to_json(const BandProfile& b) {
    return json{{"delta", b.delta}, {"theta", b.theta}, {"alpha", b.alpha},
                {"beta", b.beta},   {"gamma", b.gamma}};
}

BandProfile band_from_json(const json& j) {
    BandProfile b;
    b.delta = j.value("delta", 1.0);
    b.theta = j.value("theta", 1.0);
    b.alpha = j.value("alpha", 1.0);
    b.beta = j.value("beta", 1.0);
    b.gamma = j.value("gamma", 1.0);
    return b;
}

void write_text(const fs::path& path, const std::string& content) {
    std::ofstream os(path, std::ios::trunc | std::ios::binary);
    if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
    os << content;
}

std::string read_text(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

json load_json(const fs::path& path) { return json::parse(read_text(path)); }

void write_manifest(const fs::path& stage_dir, const std::string& stage, const RunConfig& cfg,
                    const std::vector<std::string>& artifacts) {
    json m = {{"stage", stage},
              {"config_hash", cfg.config_hash()},
              {"seed", cfg.seed},
              {"artifacts", artifacts}};
    write_text(stage_dir / "manifest.json", m.dump(2) + "\n");
}

// Collects the missing prerequisite paths for a stage; empty means ready.
struct Prereqs {
    std::string stage;
    std::vector<std::string> missing;

    void require(const fs::path& p) {
        if (!fs::exists(p)) missing.push_back(p.string());
    }
    void check() const {
        if (!missing.empty()) throw MissingArtifactError(stage, missing);
    }
};

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::defaults() {
    RunConfig cfg;
    ConceptConfig abnormality;
    abnormality.name = "abnormality";
    abnormality.features = {0, 1, 2, 3};
    abnormality.band = {2.5, 1.5, 0.5, 1.0, 1.0};  // slow-wave excess, alpha suppression
    ConceptConfig age;
    age.name = "age_group";
    age.features = {4, 5, 6, 7};
    age.band = {1.0, 1.0, 1.4, 0.7, 1.0};
    ConceptConfig med;
    med.name = "med_psychiatric";
    med.features = {2, 3};  // shared with abnormality: entangled by construction
    med.band = {1.0, 1.0, 1.0, 1.3, 1.0};
    ConceptConfig sex;
    sex.name = "sex";
    sex.features = {};  // unplanted: the weakly-encoded negative control
    cfg.concepts = {abnormality, age, med, sex};
    cfg.operating_point_concepts = {"abnormality", "age_group", "med_psychiatric"};
    cfg.steering_targets = {"abnormality", "age_group", "med_psychiatric", "sex"};
    return cfg;
}

std::string RunConfig::offtarget_for(const std::string& target) const {
    auto it = offtarget_map.find(target);
    if (it != offtarget_map.end()) return it->second;
    return target == "abnormality" ? "age_group" : "abnormality";
}

json RunConfig::to_json() const {
    json concepts_json = json::array();
    for (const auto& c : concepts) {
        concepts_json.push_back(
            {{"name", c.name}, {"features", c.features}, {"band", band_to_json(c.band)}});
    }
    return json{
        {"run_dir", run_dir},
        {"seed", seed},
        {"synthetic",
         {{"d", d},
          {"m_planted", m_planted},
          {"sparsity", sparsity},
          {"noise_sigma", noise_sigma},
          {"elevation_gain", elevation_gain},
          {"spectral_embed_scale", spectral_embed_scale},
          {"band_jitter_sigma", band_jitter_sigma},
          {"phase_mode", phase_mode},
          {"n_subjects", n_subjects},
          {"windows_per_subject", windows_per_subject},
          {"tokens_per_window", tokens_per_window},
          {"sample_rate_hz", sample_rate_hz},
          {"layers", layers},
          {"concepts", concepts_json}}},
        {"split", {{"train", split_train}, {"val", split_val}, {"test", split_test}}},
        {"sae",
         {{"expansions", expansions},
          {"k0", k0},
          {"steps", sae_steps},
          {"batch", sae_batch},
          {"lr", sae_lr},
          {"resample_interval", sae_resample_interval}}},
        {"concept_stage",
         {{"k_fold", k_fold},
          {"probe_l2", probe_l2},
          {"n_rand", n_rand},
          {"enrichment_q", enrichment_q},
          {"dead_rate_threshold", dead_rate_threshold},
          {"probe_max_examples", probe_max_examples},
          {"null_max_examples", null_max_examples},
          {"operating_point_concepts", operating_point_concepts}}},
        {"steering",
         {{"targets", steering_targets},
          {"offtarget_map", offtarget_map},
          {"grid_points", grid_points},
          {"n_permutations", n_permutations},
          {"eval_split", steering_eval_split},
          {"encode_threshold", encode_threshold},
          {"select_threshold", select_threshold},
          {"rank_pool", rank_pool}}},
        {"spectral",
         {{"steps", spectral_steps},
          {"batch", spectral_batch},
          {"lr", spectral_lr},
          {"hidden", spectral_hidden},
          {"render_max_tokens", render_max_tokens},
          {"bootstrap_resamples", bootstrap_resamples}}}};
}

namespace {

template <class T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown_keys(const json& j, const std::set<std::string>& known,
                         const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) {
            throw ConfigError("unknown config key '" + where + it.key() + "'");
        }
    }
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
    RunConfig cfg = RunConfig::defaults();
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    reject_unknown_keys(
        j, {"run_dir", "seed", "synthetic", "split", "sae", "concept_stage", "steering", "spectral"},
        "");
    read_field(j, "run_dir", cfg.run_dir);
    read_field(j, "seed", cfg.seed);
    if (j.contains("synthetic")) {
        const json& s = j.at("synthetic");
        reject_unknown_keys(s,
                            {"d", "m_planted", "sparsity", "noise_sigma", "elevation_gain",
                             "spectral_embed_scale", "band_jitter_sigma", "phase_mode",
                             "n_subjects", "windows_per_subject", "tokens_per_window",
                             "sample_rate_hz", "layers", "concepts"},
                            "synthetic.");
        read_field(s, "d", cfg.d);
        read_field(s, "m_planted", cfg.m_planted);
        read_field(s, "sparsity", cfg.sparsity);
        read_field(s, "noise_sigma", cfg.noise_sigma);
        read_field(s, "elevation_gain", cfg.elevation_gain);
        read_field(s, "spectral_embed_scale", cfg.spectral_embed_scale);
        read_field(s, "band_jitter_sigma", cfg.band_jitter_sigma);
        read_field(s, "phase_mode", cfg.phase_mode);
        read_field(s, "n_subjects", cfg.n_subjects);
        read_field(s, "windows_per_subject", cfg.windows_per_subject);
        read_field(s, "tokens_per_window", cfg.tokens_per_window);
        read_field(s, "sample_rate_hz", cfg.sample_rate_hz);
        read_field(s, "layers", cfg.layers);
        if (s.contains("concepts")) {
            cfg.concepts.clear();
            for (const json& c : s.at("concepts")) {
                ConceptConfig cc;
                cc.name = c.at("name").get<std::string>();
                if (c.contains("features")) cc.features = c.at("features").get<std::vector<uint32_t>>();
                if (c.contains("band")) cc.band = band_from_json(c.at("band"));
                cfg.concepts.push_back(cc);
            }
        }
    }
    if (j.contains("split")) {
        const json& s = j.at("split");
        reject_unknown_keys(s, {"train", "val", "test"}, "split.");
        read_field(s, "train", cfg.split_train);
        read_field(s, "val", cfg.split_val);
        read_field(s, "test", cfg.split_test);
    }
    if (j.contains("sae")) {
        const json& s = j.at("sae");
        reject_unknown_keys(s, {"expansions", "k0", "steps", "batch", "lr", "resample_interval"},
                            "sae.");
        read_field(s, "expansions", cfg.expansions);
        read_field(s, "k0", cfg.k0);
        read_field(s, "steps", cfg.sae_steps);
        read_field(s, "batch", cfg.sae_batch);
        read_field(s, "lr", cfg.sae_lr);
        read_field(s, "resample_interval", cfg.sae_resample_interval);
    }
    if (j.contains("concept_stage")) {
        const json& s = j.at("concept_stage");
        reject_unknown_keys(s,
                            {"k_fold", "probe_l2", "n_rand", "enrichment_q", "dead_rate_threshold",
                             "probe_max_examples", "null_max_examples", "operating_point_concepts"},
                            "concept_stage.");
        read_field(s, "k_fold", cfg.k_fold);
        read_field(s, "probe_l2", cfg.probe_l2);
        read_field(s, "n_rand", cfg.n_rand);
        read_field(s, "enrichment_q", cfg.enrichment_q);
        read_field(s, "dead_rate_threshold", cfg.dead_rate_threshold);
        read_field(s, "probe_max_examples", cfg.probe_max_examples);
        read_field(s, "null_max_examples", cfg.null_max_examples);
        read_field(s, "operating_point_concepts", cfg.operating_point_concepts);
    }
    if (j.contains("steering")) {
        const json& s = j.at("steering");
        reject_unknown_keys(s,
                            {"targets", "offtarget_map", "grid_points", "n_permutations",
                             "eval_split", "encode_threshold", "select_threshold", "rank_pool"},
                            "steering.");
        read_field(s, "targets", cfg.steering_targets);
        if (s.contains("offtarget_map")) {
            cfg.offtarget_map = s.at("offtarget_map").get<std::map<std::string, std::string>>();
        }
        read_field(s, "grid_points", cfg.grid_points);
        read_field(s, "n_permutations", cfg.n_permutations);
        read_field(s, "eval_split", cfg.steering_eval_split);
        read_field(s, "encode_threshold", cfg.encode_threshold);
        read_field(s, "select_threshold", cfg.select_threshold);
        read_field(s, "rank_pool", cfg.rank_pool);
    }
    if (j.contains("spectral")) {
        const json& s = j.at("spectral");
        reject_unknown_keys(
            s, {"steps", "batch", "lr", "hidden", "render_max_tokens", "bootstrap_resamples"},
            "spectral.");
        read_field(s, "steps", cfg.spectral_steps);
        read_field(s, "batch", cfg.spectral_batch);
        read_field(s, "lr", cfg.spectral_lr);
        read_field(s, "hidden", cfg.spectral_hidden);
        read_field(s, "render_max_tokens", cfg.render_max_tokens);
        read_field(s, "bootstrap_resamples", cfg.bootstrap_resamples);
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    json j;
    try {
        is >> j;
    } catch (const json::parse_error& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    return from_json(j);
}

std::string RunConfig::config_hash() const {
    json j = to_json();
    j.erase("run_dir");  // the same experiment in a different directory is the same run
    return hex64(fnv1a64(j.dump()));
}

void RunConfig::validate() const {
    if (d < 2) throw ConfigError("synthetic.d must be >= 2");
    if (k0 < 1 || static_cast<size_t>(k0) > d) {
        throw ConfigError("sae.k0 must satisfy 1 <= k0 <= d (k = k0*E must not exceed N = d*E)");
    }
    if (expansions.empty() || layers.empty()) throw ConfigError("layers and expansions must be non-empty");
    for (int e : expansions) {
        if (e < 1) throw ConfigError("sae.expansions entries must be positive");
    }
    if (phase_mode != "preserved" && phase_mode != "randomized") {
        throw ConfigError("synthetic.phase_mode must be 'preserved' or 'randomized'");
    }
    if (steering_eval_split != "val" && steering_eval_split != "test" &&
        steering_eval_split != "all") {
        throw ConfigError("steering.eval_split must be val, test or all");
    }
    if (rank_pool != "all" && rank_pool != "enriched") {
        throw ConfigError("steering.rank_pool must be 'all' or 'enriched'");
    }
    if (grid_points < 2) throw ConfigError("steering.grid_points must be >= 2");
    std::set<std::string> names;
    std::set<uint32_t> used;
    for (const auto& c : concepts) {
        if (!names.insert(c.name).second) {
            throw ConfigError("duplicate concept name '" + c.name + "'");
        }
        for (uint32_t f : c.features) {
            if (f >= m_planted) {
                throw ConfigError("concept '" + c.name + "' references a feature >= m_planted");
            }
            used.insert(f);
        }
    }
    if (used.size() > static_cast<size_t>(sparsity)) {
        throw ConfigError("synthetic.sparsity is smaller than the union of concept features");
    }
    for (const auto& name : steering_targets) {
        if (!names.count(name)) throw ConfigError("steering target '" + name + "' is not a concept");
        if (!names.count(offtarget_for(name))) {
            throw ConfigError("off-target for '" + name + "' is not a concept");
        }
    }
    for (const auto& name : operating_point_concepts) {
        if (!names.count(name)) {
            throw ConfigError("operating-point concept '" + name + "' is not a concept");
        }
    }
}

void RunConfig::apply_override(const std::string& assignment) {
    size_t eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("override '" + assignment + "' must look like key.path=value");
    }
    std::string path = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);

    json j = to_json();
    json* node = &j;
    size_t start = 0;
    std::vector<std::string> parts;
    while (true) {
        size_t dot = path.find('.', start);
        parts.push_back(path.substr(start, dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->contains(parts[i])) throw ConfigError("unknown config key '" + path + "'");
        node = &(*node)[parts[i]];
    }
    const std::string& leaf = parts.back();
    if (!node->contains(leaf)) throw ConfigError("unknown config key '" + path + "'");
    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = json(value);  // bare strings stay strings
    (*node)[leaf] = parsed;
    *this = from_json(j);
}

// ---------------------------------------------------------------------------
// Artifact paths

namespace {

struct Paths {
    fs::path run;
    std::string h;  // config hash, 8 hex chars

    explicit Paths(const RunConfig& cfg) : run(cfg.run_dir), h(cfg.config_hash().substr(0, 8)) {}

    fs::path acts_dir() const { return run / "acts"; }
    fs::path sae_dir() const { return run / "sae"; }
    fs::path concepts_dir() const { return run / "concepts"; }
    fs::path steering_dir() const { return run / "steering"; }
    fs::path spectral_dir() const { return run / "spectral"; }
    fs::path report_dir() const { return run / "report"; }

    fs::path acts(int layer) const {
        return acts_dir() / ("layer" + std::to_string(layer) + "_" + h + ".acts");
    }
    fs::path spectra(int layer) const {
        return acts_dir() / ("layer" + std::to_string(layer) + "_" + h + ".spectra");
    }
    fs::path truth(int layer) const {
        return acts_dir() / ("truth_layer" + std::to_string(layer) + "_" + h + ".json");
    }
    fs::path splits() const { return acts_dir() / ("splits_" + h + ".json"); }
    fs::path sae(int layer, int e) const {
        return sae_dir() / ("sae_l" + std::to_string(layer) + "_e" + std::to_string(e) + "_" + h + ".sae");
    }
    fs::path sae_metrics(int layer, int e) const {
        return sae_dir() /
               ("metrics_l" + std::to_string(layer) + "_e" + std::to_string(e) + "_" + h + ".json");
    }
    fs::path cell(int layer, int e) const {
        return concepts_dir() /
               ("cell_l" + std::to_string(layer) + "_e" + std::to_string(e) + "_" + h + ".json");
    }
    fs::path enrichment_csv(int layer, int e) const {
        return concepts_dir() /
               ("enrichment_l" + std::to_string(layer) + "_e" + std::to_string(e) + "_" + h + ".csv");
    }
    fs::path significance(int layer) const {
        return concepts_dir() / ("significance_l" + std::to_string(layer) + "_" + h + ".json");
    }
    fs::path taxonomy_grid() const { return concepts_dir() / ("taxonomy_grid_" + h + ".csv"); }
    fs::path operating_point() const {
        return concepts_dir() / ("operating_point_" + h + ".json");
    }
    fs::path steer_csv(int layer, const std::string& concept_name) const {
        return steering_dir() / ("sweep_l" + std::to_string(layer) + "_" + concept_name + "_" + h + ".csv");
    }
    fs::path steer_summary(int layer, const std::string& concept_name) const {
        return steering_dir() /
               ("summary_l" + std::to_string(layer) + "_" + concept_name + "_" + h + ".json");
    }
    fs::path sd(int layer) const {
        return spectral_dir() / ("sd_l" + std::to_string(layer) + "_" + h + ".sd");
    }
    fs::path sd_metrics(int layer) const {
        return spectral_dir() / ("metrics_l" + std::to_string(layer) + "_" + h + ".json");
    }
    fs::path spectrum_csv(int layer, const std::string& concept_name) const {
        return spectral_dir() /
               ("spectrum_l" + std::to_string(layer) + "_" + concept_name + "_" + h + ".csv");
    }
};

ActivationSet subset_by_windows(const ActivationSet& set, const std::vector<uint32_t>& windows) {
    std::set<uint32_t> wanted(windows.begin(), windows.end());
    std::vector<uint32_t> rows;
    for (uint32_t t = 0; t < set.tokens.size(); ++t) {
        if (wanted.count(set.tokens[t].window_id)) rows.push_back(t);
    }
    ActivationSet out;
    out.layer_index = set.layer_index;
    out.sample_rate_hz = set.sample_rate_hz;
    out.window_subject = set.window_subject;
    out.concept_labels = set.concept_labels;
    out.activations = Matrix(rows.size(), set.dim());
    out.tokens.reserve(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        auto src = set.activations.row(rows[i]);
        std::copy(src.begin(), src.end(), out.activations.row(i).begin());
        out.tokens.push_back(set.tokens[rows[i]]);
    }
    return out;
}

SpectraTargets subset_spectra(const SpectraTargets& spectra, const std::vector<size_t>& rows) {
    SpectraTargets out;
    out.f_bins = spectra.f_bins;
    out.amplitudes = Matrix(rows.size(), spectra.amplitudes.cols);
    out.phase_cos = Matrix(rows.size(), spectra.phase_cos.cols);
    out.phase_sin = Matrix(rows.size(), spectra.phase_sin.cols);
    for (size_t i = 0; i < rows.size(); ++i) {
        auto copy_row = [&](const Matrix& src, Matrix& dst) {
            auto s = src.row(rows[i]);
            std::copy(s.begin(), s.end(), dst.row(i).begin());
        };
        copy_row(spectra.amplitudes, out.amplitudes);
        copy_row(spectra.phase_cos, out.phase_cos);
        copy_row(spectra.phase_sin, out.phase_sin);
    }
    return out;
}

std::vector<size_t> token_rows_of_windows(const ActivationSet& set,
                                          const std::vector<uint32_t>& windows) {
    std::set<uint32_t> wanted(windows.begin(), windows.end());
    std::vector<size_t> rows;
    for (size_t t = 0; t < set.tokens.size(); ++t) {
        if (wanted.count(set.tokens[t].window_id)) rows.push_back(t);
    }
    return rows;
}

SyntheticGroundTruth ground_truth_for(const RunConfig& cfg, int layer) {
    std::map<std::string, std::vector<uint32_t>> feature_map;
    for (const auto& c : cfg.concepts) feature_map[c.name] = c.features;
    SyntheticGroundTruth gt =
        make_ground_truth(cfg.d, cfg.m_planted, feature_map, stage_seed(cfg.seed, "truth", layer));
    gt.coefficient_sparsity = cfg.sparsity;
    gt.noise_sigma = cfg.noise_sigma;
    gt.elevation_gain = cfg.elevation_gain;
    gt.spectral_embed_scale = cfg.spectral_embed_scale;
    gt.band_jitter_sigma = cfg.band_jitter_sigma;
    gt.signal_phase_mode = cfg.phase_mode == "preserved"
                               ? SyntheticGroundTruth::PhaseMode::preserved
                               : SyntheticGroundTruth::PhaseMode::randomized;
    for (const auto& c : cfg.concepts) gt.band_profile[c.name] = c.band;
    return gt;
}

SplitAssignment load_splits(const fs::path& path) {
    json j = load_json(path);
    SplitAssignment out;
    out.seed = j.at("seed").get<uint64_t>();
    out.fractions[0] = j.at("fractions")[0].get<double>();
    out.fractions[1] = j.at("fractions")[1].get<double>();
    out.fractions[2] = j.at("fractions")[2].get<double>();
    for (const auto& [subject, split] : j.at("assignment").items()) {
        out.assignment[static_cast<uint32_t>(std::stoul(subject))] =
            static_cast<Split>(split.get<int>());
    }
    return out;
}

std::vector<uint32_t> eval_windows_for(const RunConfig& cfg, const ActivationSet& set,
                                       const SplitAssignment& splits) {
    if (cfg.steering_eval_split == "all") {
        std::vector<uint32_t> all(set.n_windows());
        std::iota(all.begin(), all.end(), 0u);
        return all;
    }
    return splits.windows_in(set, cfg.steering_eval_split == "val" ? Split::val : Split::test);
}

// Deterministic cap: keeps at most n entries, evenly strided.
template <class T>
std::vector<T> strided_cap(const std::vector<T>& v, size_t n) {
    if (n == 0 || v.size() <= n) return v;
    std::vector<T> out;
    out.reserve(n);
    double step = static_cast<double>(v.size()) / static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) out.push_back(v[static_cast<size_t>(i * step)]);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunLock

RunLock::RunLock(const std::string& run_dir) {
    fs::create_directories(run_dir);
    path_ = (fs::path(run_dir) / ".lock").string();
    std::ifstream probe(path_);
    if (probe.good()) {
        throw std::runtime_error("run directory '" + run_dir +
                                 "' is locked by another process (stale? remove " + path_ + ")");
    }
    std::ofstream os(path_);
    os << "locked\n";
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

// ---------------------------------------------------------------------------
// Stages

void cmd_generate(const RunConfig& cfg) {
    cfg.validate();
    RunLock lock(cfg.run_dir);
    Paths paths(cfg);
    fs::create_directories(paths.acts_dir());

    std::vector<std::string> artifacts;
    SplitAssignment splits;
    bool splits_done = false;
    for (int layer : cfg.layers) {
        if (fs::exists(paths.acts(layer)) && fs::exists(paths.spectra(layer)) &&
            fs::exists(paths.truth(layer))) {
            artifacts.push_back(paths.acts(layer).filename().string());
            artifacts.push_back(paths.spectra(layer).filename().string());
            artifacts.push_back(paths.truth(layer).filename().string());
            continue;
        }
        SyntheticGroundTruth gt = ground_truth_for(cfg, layer);
        SyntheticConfig scfg;
        scfg.n_subjects = cfg.n_subjects;
        scfg.windows_per_subject = cfg.windows_per_subject;
        scfg.tokens_per_window = cfg.tokens_per_window;
        // Shared generation seed: labels, subjects and spectra are identical
        // across pseudo-layers; only the planted dictionaries differ.
        scfg.seed = stage_seed(cfg.seed, "gen");
        scfg.layer_index = layer;
        scfg.sample_rate_hz = cfg.sample_rate_hz;
        SyntheticData data = generate_synthetic(gt, scfg);

        write_activations(data.set, paths.acts(layer).string());
        write_spectra(data.spectra, paths.spectra(layer).string());

        json truth;
        truth["config_hash"] = cfg.config_hash();
        truth["seed"] = scfg.seed;
        truth["layer"] = layer;
        truth["dictionary"] = gt.dictionary.data;
        truth["dictionary_rows"] = gt.dictionary.rows;
        truth["dictionary_cols"] = gt.dictionary.cols;
        json fmap = json::object();
        for (const auto& [name, feats] : gt.concept_feature_map) fmap[name] = feats;
        truth["concept_feature_map"] = fmap;
        write_text(paths.truth(layer), truth.dump() + "\n");

        if (!splits_done) {
            splits = split_by_subject(data.set, cfg.split_train, cfg.split_val, cfg.split_test,
                                      stage_seed(cfg.seed, "split"));
            splits_done = true;
        }
        artifacts.push_back(paths.acts(layer).filename().string());
        artifacts.push_back(paths.spectra(layer).filename().string());
        artifacts.push_back(paths.truth(layer).filename().string());
    }

    if (!fs::exists(paths.splits())) {
        if (!splits_done) {
            ActivationSet set = load_activations(paths.acts(cfg.layers[0]).string());
            splits = split_by_subject(set, cfg.split_train, cfg.split_val, cfg.split_test,
                                      stage_seed(cfg.seed, "split"));
        }
        json sj;
        sj["config_hash"] = cfg.config_hash();
        sj["seed"] = splits.seed;
        sj["fractions"] = {splits.fractions[0], splits.fractions[1], splits.fractions[2]};
        json assignment = json::object();
        for (const auto& [subject, split] : splits.assignment) {
            assignment[std::to_string(subject)] = static_cast<int>(split);
        }
        sj["assignment"] = assignment;
        write_text(paths.splits(), sj.dump() + "\n");
    }
    artifacts.push_back(paths.splits().filename().string());
    write_manifest(paths.acts_dir(), "generate", cfg, artifacts);
}

void cmd_train_sae(const RunConfig& cfg) {
    cfg.validate();
    Paths paths(cfg);
    Prereqs pre{"train-sae", {}};
    for (int layer : cfg.layers) pre.require(paths.acts(layer));
    pre.require(paths.splits());
    pre.check();

    RunLock lock(cfg.run_dir);
    fs::create_directories(paths.sae_dir());
    SplitAssignment splits = load_splits(paths.splits());

    std::vector<std::string> artifacts;
    for (int layer : cfg.layers) {
        ActivationSet set;
        ActivationSet train_set, val_set;
        bool loaded = false;
        for (int e : cfg.expansions) {
            artifacts.push_back(paths.sae(layer, e).filename().string());
            artifacts.push_back(paths.sae_metrics(layer, e).filename().string());
            if (fs::exists(paths.sae(layer, e)) && fs::exists(paths.sae_metrics(layer, e))) continue;
            if (!loaded) {
                set = load_activations(paths.acts(layer).string());
                train_set = subset_by_windows(set, splits.windows_in(set, Split::train));
                val_set = subset_by_windows(set, splits.windows_in(set, Split::val));
                loaded = true;
            }
            TrainOptions opts;
            opts.steps = cfg.sae_steps;
            opts.batch_size = cfg.sae_batch;
            opts.learning_rate = cfg.sae_lr;
            opts.resample_interval = cfg.sae_resample_interval;
            opts.k0 = cfg.k0;
            opts.seed = stage_seed(cfg.seed, "sae", layer, e);
            SaeModel model = train_sae(train_set, e, opts);
            save_sae(model, paths.sae(layer, e).string());

            json metrics;
            metrics["config_hash"] = cfg.config_hash();
            metrics["seed"] = opts.seed;
            metrics["layer"] = layer;
            metrics["expansion"] = e;
            metrics["k"] = model.k;
            metrics["train_mse"] = reconstruction_mse(train_set, model);
            metrics["val_mse"] = reconstruction_mse(val_set, model);
            metrics["max_decoder_norm_error"] = model.max_decoder_norm_error();
            write_text(paths.sae_metrics(layer, e), metrics.dump(2) + "\n");
        }
    }
    write_manifest(paths.sae_dir(), "train-sae", cfg, artifacts);
}

namespace {

json cav_to_json(const Cav& cav) {
    return json{{"direction", cav.direction},
                {"fold_accuracy", cav.fold_accuracy},
                {"name", cav.spec.name}};
}

Cav cav_from_json(const json& j) {
    Cav cav;
    cav.direction = j.at("direction").get<std::vector<double>>();
    cav.fold_accuracy = j.at("fold_accuracy").get<std::vector<double>>();
    cav.spec = {j.at("name").get<std::string>(), 1};
    return cav;
}

}  // namespace

void cmd_concepts(const RunConfig& cfg) {
    cfg.validate();
    Paths paths(cfg);
    Prereqs pre{"concepts", {}};
    for (int layer : cfg.layers) {
        pre.require(paths.acts(layer));
        for (int e : cfg.expansions) pre.require(paths.sae(layer, e));
    }
    pre.require(paths.splits());
    pre.check();

    RunLock lock(cfg.run_dir);
    fs::create_directories(paths.concepts_dir());
    SplitAssignment splits = load_splits(paths.splits());

    CavOptions cav_opts;
    cav_opts.k_fold = cfg.k_fold;
    cav_opts.l2 = cfg.probe_l2;

    std::vector<std::string> artifacts;
    for (int layer : cfg.layers) {
        bool need_sig = !fs::exists(paths.significance(layer));
        bool need_cells = false;
        for (int e : cfg.expansions) {
            if (!fs::exists(paths.cell(layer, e)) || !fs::exists(paths.enrichment_csv(layer, e))) {
                need_cells = true;
            }
        }
        artifacts.push_back(paths.significance(layer).filename().string());
        for (int e : cfg.expansions) {
            artifacts.push_back(paths.cell(layer, e).filename().string());
            artifacts.push_back(paths.enrichment_csv(layer, e).filename().string());
        }
        if (!need_sig && !need_cells) continue;

        ActivationSet set = load_activations(paths.acts(layer).string());
        ActivationSet train_set = subset_by_windows(set, splits.windows_in(set, Split::train));
        ActivationSet val_set = subset_by_windows(set, splits.windows_in(set, Split::val));

        // Dense CAVs and layer-level TCAV significance.
        json sig;
        sig["config_hash"] = cfg.config_hash();
        sig["layer"] = layer;
        std::map<std::string, Cav> cavs;
        for (const auto& concept_cfg : cfg.concepts) {
            Cav cav = fit_cav(train_set, {concept_cfg.name, 1}, cav_opts);
            cavs[concept_cfg.name] = cav;

            std::vector<uint8_t> labels = train_set.token_labels(concept_cfg.name);
            std::vector<size_t> sub_rows(train_set.n_tokens());
            std::iota(sub_rows.begin(), sub_rows.end(), 0);
            sub_rows = strided_cap(sub_rows, cfg.null_max_examples);
            Matrix sub_x(sub_rows.size(), train_set.dim());
            std::vector<uint8_t> sub_y(sub_rows.size());
            for (size_t i = 0; i < sub_rows.size(); ++i) {
                auto src = train_set.activations.row(sub_rows[i]);
                std::copy(src.begin(), src.end(), sub_x.row(i).begin());
                sub_y[i] = labels[sub_rows[i]];
            }
            LogregOptions null_opts;
            null_opts.l2 = cfg.probe_l2;
            null_opts.max_iter = 25;
            LogisticModel dense_probe = fit_logistic(sub_x, sub_y, null_opts);
            size_t pos = 0, n_pos = 0;
            for (size_t i = 0; i < sub_rows.size(); ++i) {
                if (!sub_y[i]) continue;
                ++n_pos;
                pos += (dense_probe.score(sub_x.row(i)) > 0.0);
            }
            double dense_tcav = n_pos ? static_cast<double>(pos) / static_cast<double>(n_pos) : 0.5;

            Rng perm_root(stage_seed(cfg.seed, "dense-null", layer));
            std::vector<double> nulls;
            for (int r = 0; r < cfg.n_rand; ++r) {
                std::vector<uint8_t> permuted = sub_y;
                Rng pr = perm_root.substream(
                    static_cast<uint64_t>(r) * 131 + fnv1a64(concept_cfg.name) % 1000003);
                pr.shuffle(permuted);
                LogisticModel null_probe = fit_logistic(sub_x, permuted, null_opts);
                size_t npos = 0, ntot = 0;
                for (size_t i = 0; i < sub_rows.size(); ++i) {
                    if (!permuted[i]) continue;
                    ++ntot;
                    npos += (null_probe.score(sub_x.row(i)) > 0.0);
                }
                nulls.push_back(ntot ? static_cast<double>(npos) / static_cast<double>(ntot) : 0.5);
            }
            TcavSignificance significance = tcav_significance(dense_tcav, nulls);
            json cj = cav_to_json(cavs[concept_cfg.name]);
            cj["dense_tcav"] = dense_tcav;
            cj["p"] = significance.p ? json(*significance.p) : json();
            cj["quantile"] = significance.quantile;
            sig[concept_cfg.name] = cj;
        }
        write_text(paths.significance(layer), sig.dump() + "\n");

        for (int e : cfg.expansions) {
            if (fs::exists(paths.cell(layer, e)) && fs::exists(paths.enrichment_csv(layer, e))) {
                continue;
            }
            SaeModel model = load_sae(paths.sae(layer, e).string());
            std::vector<SparseCode> train_codes(train_set.n_tokens());
            for (size_t t = 0; t < train_set.n_tokens(); ++t) {
                train_codes[t] = encode(train_set.activations.row(t), model);
            }
            std::vector<double> rates = firing_rates(val_set, model);

            json cell;
            cell["config_hash"] = cfg.config_hash();
            cell["layer"] = layer;
            cell["expansion"] = e;
            std::map<std::string, EnrichmentResult> enrichments;
            for (const auto& concept_cfg : cfg.concepts) {
                std::vector<uint8_t> labels = train_set.token_labels(concept_cfg.name);
                EnrichmentResult enr =
                    enrichment_test(train_codes, labels, model.n_features(), cfg.enrichment_q);
                enrichments[concept_cfg.name] = enr;

                std::vector<size_t> probe_rows(train_codes.size());
                std::iota(probe_rows.begin(), probe_rows.end(), 0);
                probe_rows = strided_cap(probe_rows, cfg.probe_max_examples);
                std::vector<SparseCode> probe_codes;
                std::vector<uint8_t> probe_labels;
                for (size_t r : probe_rows) {
                    probe_codes.push_back(train_codes[r]);
                    probe_labels.push_back(labels[r]);
                }
                SaeProbe probe = fit_sae_probe(probe_codes, probe_labels, {concept_cfg.name, 1},
                                               cav_opts);
                std::vector<SparseCode> positives;
                for (size_t t = 0; t < train_codes.size(); ++t) {
                    if (labels[t]) positives.push_back(train_codes[t]);
                }
                double score = tcav_score(probe, positives);

                NullScoreOptions null_opts;
                null_opts.n_rand = cfg.n_rand;
                null_opts.seed = stage_seed(cfg.seed, "sae-null-" + concept_cfg.name, layer, e);
                null_opts.max_examples = cfg.null_max_examples;
                null_opts.fit.l2 = cfg.probe_l2;
                null_opts.fit.max_iter = 25;
                std::vector<double> nulls = tcav_null_scores(train_codes, labels, null_opts);
                TcavSignificance significance = tcav_significance(score, nulls);
                json concept_json;
                concept_json["tcav"] = score;
                concept_json["p"] = significance.p ? json(*significance.p) : json();
                concept_json["quantile"] = significance.quantile;
                concept_json["probe_bias"] = probe.bias;
                concept_json["enriched"] = enr.enriched;
                cell[concept_cfg.name] = concept_json;
            }

            TaxonomySummary tax = classify_taxonomy(enrichments, rates, cfg.dead_rate_threshold);
            cell["taxonomy"] = {{"separable_frac", tax.separable_frac},
                                {"entangled_frac", tax.entangled_frac},
                                {"dead_frac", tax.dead_frac},
                                {"unlabeled_frac", tax.unlabeled_frac}};
            // enriched-only denominator of the same partition
            size_t enriched_total = 0, sep = 0, ent = 0;
            for (FeatureClass c : tax.per_feature_class) {
                if (c == FeatureClass::separable) ++sep;
                if (c == FeatureClass::entangled) ++ent;
            }
            enriched_total = sep + ent;
            cell["taxonomy_enriched_denominator"] = {
                {"separable_frac", enriched_total ? double(sep) / double(enriched_total) : 0.0},
                {"entangled_frac", enriched_total ? double(ent) / double(enriched_total) : 0.0}};
            write_text(paths.cell(layer, e), cell.dump() + "\n");

            std::ostringstream csv;
            csv << "feature_id,concept,z,p,q_pass,class\n";
            for (size_t f = 0; f < model.n_features(); ++f) {
                for (const auto& concept_cfg : cfg.concepts) {
                    const EnrichmentResult& enr = enrichments[concept_cfg.name];
                    bool q_pass = std::find(enr.enriched.begin(), enr.enriched.end(),
                                            static_cast<uint32_t>(f)) != enr.enriched.end();
                    csv << f << "," << concept_cfg.name << "," << fmt_double(enr.z_scores[f]) << ","
                        << fmt_double(enr.p_values[f]) << "," << (q_pass ? 1 : 0) << ","
                        << feature_class_name(tax.per_feature_class[f]) << "\n";
                }
            }
            write_text(paths.enrichment_csv(layer, e), csv.str());
        }
    }
    write_manifest(paths.concepts_dir(), "concepts", cfg, artifacts);
}

void cmd_sweep(const RunConfig& cfg) {
    cfg.validate();
    Paths paths(cfg);
    {
        Prereqs pre{"sweep", {}};
        for (int layer : cfg.layers) pre.require(paths.acts(layer));
        pre.check();
    }
    // Orchestrates: train any missing checkpoints, then any missing concept
    // cells, then aggregate the grid.
    cmd_train_sae(cfg);
    cmd_concepts(cfg);

    RunLock lock(cfg.run_dir);
    std::map<std::pair<int, int>, TaxonomySummary> grid;
    std::map<std::pair<int, std::string>, double> significance;
    std::ostringstream csv;
    csv << "layer,expansion,separable_frac,entangled_frac,dead_frac,sep_minus_dead\n";
    for (int layer : cfg.layers) {
        json sig = load_json(paths.significance(layer));
        for (const auto& name : cfg.operating_point_concepts) {
            const json& cj = sig.at(name);
            significance[{layer, name}] = cj.at("p").is_null() ? 1.0 : cj.at("p").get<double>();
        }
        for (int e : cfg.expansions) {
            json cell = load_json(paths.cell(layer, e));
            TaxonomySummary tax;
            tax.separable_frac = cell.at("taxonomy").at("separable_frac").get<double>();
            tax.entangled_frac = cell.at("taxonomy").at("entangled_frac").get<double>();
            tax.dead_frac = cell.at("taxonomy").at("dead_frac").get<double>();
            grid[{layer, e}] = tax;
            csv << layer << "," << e << "," << fmt_double(tax.separable_frac) << ","
                << fmt_double(tax.entangled_frac) << "," << fmt_double(tax.dead_frac) << ","
                << fmt_double(tax.separable_frac - tax.dead_frac) << "\n";
        }
    }
    write_text(paths.taxonomy_grid(), csv.str());

    OperatingPoint op = select_operating_point(grid, significance);
    json oj;
    oj["config_hash"] = cfg.config_hash();
    oj["layer"] = op.layer;
    oj["expansion"] = op.expansion;
    oj["score"] = op.score;
    write_text(paths.operating_point(), oj.dump(2) + "\n");

    json manifest = load_json(paths.concepts_dir() / "manifest.json");
    std::vector<std::string> artifacts = manifest.at("artifacts").get<std::vector<std::string>>();
    artifacts.push_back(paths.taxonomy_grid().filename().string());
    artifacts.push_back(paths.operating_point().filename().string());
    write_manifest(paths.concepts_dir(), "sweep", cfg, artifacts);
}

void cmd_steer(const RunConfig& cfg) {
    cfg.validate();
    Paths paths(cfg);
    Prereqs pre{"steer", {}};
    for (int layer : cfg.layers) pre.require(paths.acts(layer));
    pre.require(paths.splits());
    pre.require(paths.operating_point());
    pre.check();

    json op = load_json(paths.operating_point());
    int e_star = op.at("expansion").get<int>();
    {
        Prereqs pre2{"steer", {}};
        for (int layer : cfg.layers) {
            pre2.require(paths.sae(layer, e_star));
            pre2.require(paths.significance(layer));
        }
        pre2.check();
    }

    RunLock lock(cfg.run_dir);
    fs::create_directories(paths.steering_dir());
    SplitAssignment splits;
    splits = load_splits(paths.splits());

    std::vector<std::string> artifacts;
    for (int layer : cfg.layers) {
        ActivationSet set = load_activations(paths.acts(layer).string());
        SaeModel model = load_sae(paths.sae(layer, e_star).string());
        json sig = load_json(paths.significance(layer));
        std::vector<uint32_t> train_windows = splits.windows_in(set, Split::train);
        std::vector<uint32_t> eval_windows = eval_windows_for(cfg, set, splits);

        for (const auto& target : cfg.steering_targets) {
            artifacts.push_back(paths.steer_csv(layer, target).filename().string());
            artifacts.push_back(paths.steer_summary(layer, target).filename().string());
            if (fs::exists(paths.steer_csv(layer, target)) &&
                fs::exists(paths.steer_summary(layer, target))) {
                continue;
            }
            std::string offtarget = cfg.offtarget_for(target);
            Cav cav_t = cav_from_json(sig.at(target));
            Cav cav_o = cav_from_json(sig.at(offtarget));

            // Target centroid: mean code of the destination pool (windows
            // where the target concept is absent), train split only.
            std::vector<uint32_t> dest_windows;
            {
                const auto& labels = set.labels_for(target);
                std::set<uint32_t> train_set_w(train_windows.begin(), train_windows.end());
                for (uint32_t w = 0; w < labels.size(); ++w) {
                    if (!labels[w] && train_set_w.count(w)) dest_windows.push_back(w);
                }
            }
            std::vector<SparseCode> pool_codes;
            for (uint32_t t : set.tokens_of_windows(dest_windows)) {
                pool_codes.push_back(encode(set.activations.row(t), model));
            }
            Centroid centroid = target_centroid(pool_codes);

            SweepOptions opts;
            opts.fractions.resize(static_cast<size_t>(cfg.grid_points));
            for (int i = 0; i < cfg.grid_points; ++i) {
                opts.fractions[static_cast<size_t>(i)] =
                    static_cast<double>(i) / static_cast<double>(cfg.grid_points - 1);
            }
            opts.fractions.front() = 0.0;
            opts.fractions.back() = 1.0;
            opts.n_permutations = cfg.n_permutations;
            opts.seed = stage_seed(cfg.seed, "steer-" + target, layer, e_star);
            opts.probe_train_windows = train_windows;
            opts.eval_windows = eval_windows;
            opts.probe_l2 = cfg.probe_l2;
            opts.encode_threshold = cfg.encode_threshold;
            opts.select_threshold = cfg.select_threshold;
            if (cfg.rank_pool == "enriched") {
                json cell = load_json(paths.cell(layer, e_star));
                opts.rank_pool = cell.at(target).at("enriched").get<std::vector<uint32_t>>();
            }

            SteeringSweepResult result = run_sweep(set, model, cav_t, cav_o, centroid, opts);

            std::ostringstream csv;
            csv << "f,target_auroc,offtarget_auroc,perm_id\n";
            for (size_t j = 0; j < result.fractions.size(); ++j) {
                csv << fmt_double(result.fractions[j]) << ","
                    << fmt_double(result.tcav.target_auroc[j]) << ","
                    << fmt_double(result.tcav.offtarget_auroc[j]) << ",-1\n";
            }
            for (size_t p = 0; p < result.random_curves.size(); ++p) {
                for (size_t j = 0; j < result.fractions.size(); ++j) {
                    csv << fmt_double(result.fractions[j]) << ","
                        << fmt_double(result.random_curves[p].target_auroc[j]) << ","
                        << fmt_double(result.random_curves[p].offtarget_auroc[j]) << "," << p
                        << "\n";
                }
            }
            write_text(paths.steer_csv(layer, target), csv.str());

            json summary;
            summary["config_hash"] = cfg.config_hash();
            summary["layer"] = layer;
            summary["expansion"] = e_star;
            summary["concept"] = target;
            summary["offtarget"] = offtarget;
            summary["delta"] = result.delta;
            summary["delta_excess"] = result.delta_excess;
            summary["perm_delta_std"] =
                result.perm_std_defined ? json(result.perm_delta_std) : json();
            summary["auroc0"] = result.auroc0;
            summary["regime"] = regime_name(result.regime);
            summary["fractions"] = result.fractions;
            summary["target_auroc"] = result.tcav.target_auroc;
            summary["offtarget_auroc"] = result.tcav.offtarget_auroc;
            summary["random_deltas"] = result.random_deltas;
            summary["frozen_target"] = {{"weights", result.frozen_target.weights},
                                        {"bias", result.frozen_target.bias}};
            summary["frozen_offtarget"] = {{"weights", result.frozen_offtarget.weights},
                                           {"bias", result.frozen_offtarget.bias}};
            summary["ranking_order"] = result.ranking.order;
            summary["centroid"] = result.centroid.values;
            summary["centroid_source_count"] = result.centroid.source_count;
            summary["eval_windows"] = result.eval_windows;
            write_text(paths.steer_summary(layer, target), summary.dump() + "\n");
        }
    }
    write_manifest(paths.steering_dir(), "steer", cfg, artifacts);
}

void cmd_spectral(const RunConfig& cfg) {
    cfg.validate();
    Paths paths(cfg);
    Prereqs pre{"spectral", {}};
    for (int layer : cfg.layers) {
        pre.require(paths.acts(layer));
        pre.require(paths.spectra(layer));
        for (const auto& target : cfg.steering_targets) {
            pre.require(paths.steer_summary(layer, target));
        }
    }
    pre.require(paths.splits());
    pre.require(paths.operating_point());
    pre.check();

    RunLock lock(cfg.run_dir);
    fs::create_directories(paths.spectral_dir());
    SplitAssignment splits = load_splits(paths.splits());
    json op = load_json(paths.operating_point());
    int e_star = op.at("expansion").get<int>();

    std::vector<std::string> artifacts;
    for (int layer : cfg.layers) {
        artifacts.push_back(paths.sd(layer).filename().string());
        artifacts.push_back(paths.sd_metrics(layer).filename().string());
        for (const auto& target : cfg.steering_targets) {
            artifacts.push_back(paths.spectrum_csv(layer, target).filename().string());
        }
        bool have_all = fs::exists(paths.sd(layer)) && fs::exists(paths.sd_metrics(layer));
        for (const auto& target : cfg.steering_targets) {
            have_all = have_all && fs::exists(paths.spectrum_csv(layer, target));
        }
        if (have_all) continue;

        ActivationSet set = load_activations(paths.acts(layer).string());
        SpectraTargets spectra = load_spectra(paths.spectra(layer).string());

        std::vector<uint32_t> train_windows = splits.windows_in(set, Split::train);
        std::vector<uint32_t> test_windows = splits.windows_in(set, Split::test);
        std::vector<size_t> train_rows = token_rows_of_windows(set, train_windows);
        std::vector<size_t> test_rows = token_rows_of_windows(set, test_windows);

        SpectralDecoderModel sd;
        if (fs::exists(paths.sd(layer))) {
            sd = load_spectral_decoder(paths.sd(layer).string());
        } else {
            ActivationSet train_set = subset_by_windows(set, train_windows);
            SpectraTargets train_targets = subset_spectra(spectra, train_rows);
            SpectralTrainOptions opts;
            opts.steps = cfg.spectral_steps;
            opts.batch_size = cfg.spectral_batch;
            opts.learning_rate = cfg.spectral_lr;
            opts.hidden = cfg.spectral_hidden;
            opts.seed = stage_seed(cfg.seed, "spectral", layer);
            sd = train_spectral_decoder(train_set, train_targets, opts);
            save_spectral_decoder(sd, paths.sd(layer).string());
        }

        if (!fs::exists(paths.sd_metrics(layer))) {
            SpectrumBatch pred = decode_spectra(set.activations, test_rows, sd);
            SpectraTargets test_targets = subset_spectra(spectra, test_rows);
            double r2 = amplitude_r2(pred.amplitudes, test_targets.amplitudes);
            double pc = phase_cosine(pred.phase_cos, pred.phase_sin, test_targets.phase_cos,
                                     test_targets.phase_sin);

            // bootstrap over test tokens
            std::vector<double> r2_samples, pc_samples;
            Rng boot(stage_seed(cfg.seed, "spectral-boot", layer));
            int resamples = std::min(cfg.bootstrap_resamples, 300);
            for (int r = 0; r < resamples; ++r) {
                std::vector<size_t> rows(test_rows.size());
                for (auto& v : rows) v = test_rows[boot.below(test_rows.size())];
                SpectrumBatch bp = decode_spectra(set.activations, rows, sd);
                SpectraTargets bt = subset_spectra(spectra, rows);
                r2_samples.push_back(amplitude_r2(bp.amplitudes, bt.amplitudes));
                pc_samples.push_back(
                    phase_cosine(bp.phase_cos, bp.phase_sin, bt.phase_cos, bt.phase_sin));
            }
            std::sort(r2_samples.begin(), r2_samples.end());
            std::sort(pc_samples.begin(), pc_samples.end());
            auto pct = [](const std::vector<double>& v, double p) {
                return v[static_cast<size_t>(p * static_cast<double>(v.size() - 1))];
            };
            json metrics;
            metrics["config_hash"] = cfg.config_hash();
            metrics["layer"] = layer;
            metrics["amplitude_r2"] = r2;
            metrics["amplitude_r2_ci"] = {pct(r2_samples, 0.025), pct(r2_samples, 0.975)};
            metrics["phase_cosine"] = pc;
            metrics["phase_cosine_ci"] = {pct(pc_samples, 0.025), pct(pc_samples, 0.975)};
            write_text(paths.sd_metrics(layer), metrics.dump(2) + "\n");
        }

        SaeModel model = load_sae(paths.sae(layer, e_star).string());
        for (const auto& target : cfg.steering_targets) {
            if (fs::exists(paths.spectrum_csv(layer, target))) continue;
            json summary = load_json(paths.steer_summary(layer, target));
            FeatureRanking ranking;
            ranking.order = summary.at("ranking_order").get<std::vector<uint32_t>>();
            ranking.scores.assign(ranking.order.size(), 0.0);
            Centroid centroid;
            centroid.values = summary.at("centroid").get<std::vector<double>>();
            centroid.source_count = summary.at("centroid_source_count").get<size_t>();

            const auto& labels = set.labels_for(target);
            std::set<uint32_t> test_set_w(test_windows.begin(), test_windows.end());
            std::vector<uint32_t> source_tokens, target_tokens;
            for (size_t t = 0; t < set.n_tokens(); ++t) {
                uint32_t w = set.tokens[t].window_id;
                if (!test_set_w.count(w)) continue;
                (labels[w] ? source_tokens : target_tokens).push_back(static_cast<uint32_t>(t));
            }
            source_tokens = strided_cap(source_tokens, cfg.render_max_tokens);
            target_tokens = strided_cap(target_tokens, cfg.render_max_tokens);

            RenderOptions ropts;
            ropts.n_resamples = cfg.bootstrap_resamples;
            ropts.seed = stage_seed(cfg.seed, "render-" + target, layer);
            SteeredSpectrum spec = render_steered_spectrum(set, source_tokens, target_tokens,
                                                           model, ranking, centroid, 0.5, sd, ropts);
            std::ostringstream csv;
            csv << "bin_hz,source_mean,steered_mean,target_mean,lo,hi\n";
            for (size_t nu = 0; nu < spec.bin_hz.size(); ++nu) {
                csv << fmt_double(spec.bin_hz[nu]) << "," << fmt_double(spec.source_mean[nu]) << ","
                    << fmt_double(spec.steered_mean[nu]) << "," << fmt_double(spec.target_mean[nu])
                    << "," << fmt_double(spec.target_lo[nu]) << "," << fmt_double(spec.target_hi[nu])
                    << "\n";
            }
            write_text(paths.spectrum_csv(layer, target), csv.str());
        }
    }
    write_manifest(paths.spectral_dir(), "spectral", cfg, artifacts);
}

void cmd_report(const RunConfig& cfg, bool force) {
    cfg.validate();
    Paths paths(cfg);
    Prereqs pre{"report", {}};
    pre.require(paths.acts_dir() / "manifest.json");
    pre.require(paths.sae_dir() / "manifest.json");
    pre.require(paths.concepts_dir() / "manifest.json");
    pre.require(paths.steering_dir() / "manifest.json");
    pre.require(paths.spectral_dir() / "manifest.json");
    pre.require(paths.operating_point());
    pre.check();

    // Refuse to mix artifacts produced under different configs.
    std::string expected = cfg.config_hash();
    for (const char* stage : {"acts", "sae", "concepts", "steering", "spectral"}) {
        json manifest = load_json(paths.run / stage / "manifest.json");
        std::string h = manifest.at("config_hash").get<std::string>();
        if (h != expected && !force) {
            throw ConfigError("stage '" + std::string(stage) + "' was produced under config hash " +
                              h + " but the current config hashes to " + expected +
                              " (pass --force to mix)");
        }
    }

    RunLock lock(cfg.run_dir);
    fs::create_directories(paths.report_dir());
    SplitAssignment splits = load_splits(paths.splits());
    json op = load_json(paths.operating_point());
    int e_star = op.at("expansion").get<int>();

    // Figure-3 analog: the taxonomy grid (already aggregated by cmd_sweep).
    std::string taxonomy_csv = read_text(paths.taxonomy_grid());
    write_text(paths.report_dir() / "taxonomy_grid.csv", taxonomy_csv);
    write_text(paths.report_dir() / "operating_point.json", op.dump(2) + "\n");

    // Figure-4 analog: per (layer, concept) encoding strength and selectivity.
    std::ostringstream steerability;
    steerability << "layer,expansion,concept,offtarget,auroc0,delta,delta_excess,perm_delta_std,"
                    "regime\n";
    // Figure-5 analog: all sweep curves in one file.
    std::ostringstream curves;
    curves << "layer,expansion,concept,f,target_auroc,offtarget_auroc,perm_id\n";
    for (int layer : cfg.layers) {
        for (const auto& target : cfg.steering_targets) {
            json summary = load_json(paths.steer_summary(layer, target));
            steerability << layer << "," << summary.at("expansion").get<int>() << "," << target
                         << "," << summary.at("offtarget").get<std::string>() << ","
                         << fmt_double(summary.at("auroc0").get<double>()) << ","
                         << fmt_double(summary.at("delta").get<double>()) << ","
                         << fmt_double(summary.at("delta_excess").get<double>()) << ","
                         << (summary.at("perm_delta_std").is_null()
                                 ? "nan"
                                 : fmt_double(summary.at("perm_delta_std").get<double>()))
                         << "," << summary.at("regime").get<std::string>() << "\n";
            std::string block = read_text(paths.steer_csv(layer, target));
            std::istringstream lines(block);
            std::string line;
            std::getline(lines, line);  // skip header
            while (std::getline(lines, line)) {
                if (line.empty()) continue;
                curves << layer << "," << summary.at("expansion").get<int>() << "," << target << ","
                       << line << "\n";
            }
        }
    }
    write_text(paths.report_dir() / "steerability.csv", steerability.str());
    write_text(paths.report_dir() / "sweep_curves.csv", curves.str());

    // Figure-6 analog: stitched spectra.
    std::ostringstream spectra_csv;
    spectra_csv << "layer,concept,bin_hz,source_mean,steered_mean,target_mean,lo,hi\n";
    for (int layer : cfg.layers) {
        for (const auto& target : cfg.steering_targets) {
            std::string block = read_text(paths.spectrum_csv(layer, target));
            std::istringstream lines(block);
            std::string line;
            std::getline(lines, line);
            while (std::getline(lines, line)) {
                if (line.empty()) continue;
                spectra_csv << layer << "," << target << "," << line << "\n";
            }
        }
    }
    write_text(paths.report_dir() / "spectra.csv", spectra_csv.str());

    // Table-2 analog: baseline vs substituted probe AUROC per layer at E*.
    std::ostringstream faith;
    faith << "layer,expansion,concept,auroc_baseline,auroc_substituted,delta\n";
    json faith_summary = json::object();
    for (int layer : cfg.layers) {
        ActivationSet set = load_activations(paths.acts(layer).string());
        SaeModel model = load_sae(paths.sae(layer, e_star).string());
        ActivationSet substituted = substitute_reconstruction(set, model);
        std::vector<uint32_t> train_windows = splits.windows_in(set, Split::train);
        std::vector<uint32_t> test_windows = splits.windows_in(set, Split::test);

        auto pooled = [&](const ActivationSet& s, const std::vector<uint32_t>& windows) {
            Matrix out(windows.size(), s.dim());
            std::map<uint32_t, size_t> slot;
            for (size_t i = 0; i < windows.size(); ++i) slot[windows[i]] = i;
            std::vector<double> counts(windows.size(), 0.0);
            for (size_t t = 0; t < s.n_tokens(); ++t) {
                auto it = slot.find(s.tokens[t].window_id);
                if (it == slot.end()) continue;
                axpy(1.0, s.activations.row(t), out.row(it->second));
                counts[it->second] += 1.0;
            }
            for (size_t i = 0; i < windows.size(); ++i) {
                scale(out.row(i), 1.0 / counts[i]);
            }
            return out;
        };
        Matrix train_x = pooled(set, train_windows);
        Matrix test_x = pooled(set, test_windows);
        Matrix test_sub = pooled(substituted, test_windows);

        double mean_delta = 0.0, max_delta = 0.0;
        int n_concepts = 0;
        for (const auto& concept_cfg : cfg.concepts) {
            const auto& all_labels = set.labels_for(concept_cfg.name);
            std::vector<uint8_t> train_y, test_y;
            for (uint32_t w : train_windows) train_y.push_back(all_labels[w]);
            for (uint32_t w : test_windows) test_y.push_back(all_labels[w]);
            LogregOptions lopts;
            lopts.l2 = cfg.probe_l2;
            LogisticModel probe = fit_logistic(train_x, train_y, lopts);
            std::vector<double> base_scores(test_windows.size()), sub_scores(test_windows.size());
            for (size_t i = 0; i < test_windows.size(); ++i) {
                base_scores[i] = probe.score(test_x.row(i));
                sub_scores[i] = probe.score(test_sub.row(i));
            }
            auto base = auroc(base_scores, test_y);
            auto sub = auroc(sub_scores, test_y);
            if (!base || !sub) continue;
            double delta = *base - *sub;
            faith << layer << "," << e_star << "," << concept_cfg.name << "," << fmt_double(*base)
                  << "," << fmt_double(*sub) << "," << fmt_double(delta) << "\n";
            mean_delta += std::fabs(delta);
            max_delta = std::max(max_delta, std::fabs(delta));
            ++n_concepts;
        }
        faith_summary["layer_" + std::to_string(layer)] = {
            {"mean_delta", n_concepts ? mean_delta / n_concepts : 0.0}, {"max_delta", max_delta}};
    }
    write_text(paths.report_dir() / "faithfulness.csv", faith.str());

    json report;
    report["config_hash"] = expected;
    report["seed"] = cfg.seed;
    report["operating_point"] = op;
    report["faithfulness"] = faith_summary;
    json checksums = json::object();
    for (const char* name : {"taxonomy_grid.csv", "steerability.csv", "sweep_curves.csv",
                             "spectra.csv", "faithfulness.csv"}) {
        checksums[name] = hex64(fnv1a64(read_text(paths.report_dir() / name)));
    }
    report["checksums"] = checksums;
    write_text(paths.report_dir() / "report.json", report.dump(2) + "\n");
    write_manifest(paths.report_dir(), "report", cfg,
                   {"taxonomy_grid.csv", "operating_point.json", "steerability.csv",
                    "sweep_curves.csv", "spectra.csv", "faithfulness.csv", "report.json"});
}

}  // namespace latentsteer
