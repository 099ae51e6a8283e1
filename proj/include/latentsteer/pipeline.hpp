#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "latentsteer/synthetic.hpp"

namespace latentsteer {

struct ConceptConfig {
    std::string name;
    std::vector<uint32_t> features;  // planted feature ids; empty = unplanted
    BandProfile band;
};

// One declarative file drives every stage. Values here are the desk-scale
// defaults; see docs/config.md for the schema and the dotted override paths.
struct RunConfig {
    std::string run_dir = "run";
    uint64_t seed = 42;

    // synthetic data
    size_t d = 32;
    size_t m_planted = 48;
    int sparsity = 12;
    double noise_sigma = 0.05;
    double elevation_gain = 3.0;
    double spectral_embed_scale = 0.5;
    double band_jitter_sigma = 0.25;
    std::string phase_mode = "preserved";  // preserved | randomized
    size_t n_subjects = 40;
    size_t windows_per_subject = 25;
    size_t tokens_per_window = 50;
    double sample_rate_hz = 256.0;
    std::vector<int> layers = {1, 2};
    std::vector<ConceptConfig> concepts;  // defaults() plants four

    // splits
    double split_train = 0.8, split_val = 0.1, split_test = 0.1;

    // sae sweep
    std::vector<int> expansions = {1, 2, 4, 8};
    int k0 = 8;
    int sae_steps = 2000;
    int sae_batch = 256;
    double sae_lr = 5e-3;
    int sae_resample_interval = 500;

    // concepts stage
    int k_fold = 10;
    double probe_l2 = 1.0;
    int n_rand = 50;             // null CAVs for TCAV significance
    double enrichment_q = 0.05;
    double dead_rate_threshold = 1e-5;
    size_t probe_max_examples = 10000;
    size_t null_max_examples = 2048;
    std::vector<std::string> operating_point_concepts;  // must reach significance

    // steering stage
    std::vector<std::string> steering_targets;
    std::map<std::string, std::string> offtarget_map;  // empty entries use the default rule
    int grid_points = 21;
    int n_permutations = 20;
    std::string steering_eval_split = "test";  // val | test | all
    double encode_threshold = 0.7;
    double select_threshold = 0.05;
    std::string rank_pool = "all";  // all | enriched

    // spectral stage
    int spectral_steps = 1500;
    int spectral_batch = 96;
    double spectral_lr = 1e-3;
    int spectral_hidden = 0;  // 0 = 4d
    size_t render_max_tokens = 800;
    int bootstrap_resamples = 1000;

    static RunConfig defaults();
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig from_file(const std::string& path);
    nlohmann::json to_json() const;
    std::string config_hash() const;  // fnv1a64 of the canonical json dump
    void validate() const;

    // dotted-path override, e.g. "sae.steps=4000" or "synthetic.d=16"
    void apply_override(const std::string& assignment);

    // default off-target rule: abnormality -> age_group, others -> abnormality
    std::string offtarget_for(const std::string& target) const;
};

// Pipeline stages. Each validates its prerequisites (MissingArtifactError),
// writes artifacts plus a manifest under <run_dir>/<stage>/, and is a no-op
// when its outputs for the current config hash already exist.
void cmd_generate(const RunConfig& cfg);
void cmd_train_sae(const RunConfig& cfg);
void cmd_concepts(const RunConfig& cfg);
void cmd_sweep(const RunConfig& cfg);
void cmd_steer(const RunConfig& cfg);
void cmd_spectral(const RunConfig& cfg);
void cmd_report(const RunConfig& cfg, bool force = false);

// Exclusive lock on a run directory for the lifetime of the object.
class RunLock {
public:
    explicit RunLock(const std::string& run_dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::string path_;
};

}  // namespace latentsteer
