#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "latentsteer/activations.hpp"
#include "latentsteer/concepts.hpp"
#include "latentsteer/logreg.hpp"
#include "latentsteer/sae.hpp"

namespace latentsteer {

// Features sorted by descending |v_C . w_i|; ties keep the lower index.
struct FeatureRanking {
    std::vector<uint32_t> order;  // permutation of [0, N)
    std::vector<double> scores;   // alignment per feature id
};

FeatureRanking rank_features(const Cav& cav, const SaeModel& model);

// Empirical mean of the target pool's SAE codes (dense; absent entries are 0).
struct Centroid {
    std::vector<double> values;
    size_t source_count = 0;
};

Centroid target_centroid(std::span<const SparseCode> codes);

// Clamps the first floor(f*N) features in ranking order to the centroid;
// everything else keeps its code value. Returns a dense N-vector.
std::vector<double> clamp(const SparseCode& z, const FeatureRanking& ranking, double f,
                          const Centroid& centroid);

// W_dec z* + b_dec, then unstandardize.
std::vector<double> decode_intervened(std::span<const double> zstar, const SaeModel& model);

// Trapezoidal integral over f of (offtarget - target).
double selectivity_area(std::span<const double> target_curve,
                        std::span<const double> offtarget_curve,
                        std::span<const double> fractions);

struct ExcessSelectivity {
    double delta_excess = 0.0;
    double perm_std = 0.0;
    bool std_defined = false;
};

ExcessSelectivity excess_selectivity(double delta_tcav, std::span<const double> delta_permutations);

enum class Regime : uint8_t { steerable, entangled, weakly_encoded };
const char* regime_name(Regime r);

Regime classify_regime(double auroc0, double delta_excess, double encode_threshold = 0.7,
                       double select_threshold = 0.05);

std::vector<double> default_fraction_grid();  // {0, 0.05, ..., 1.0}

struct SweepOptions {
    std::vector<double> fractions;              // empty = default grid; must span 0..1
    int n_permutations = 20;
    uint64_t seed = 0;
    std::vector<uint32_t> probe_train_windows;  // empty = all windows
    std::vector<uint32_t> eval_windows;         // empty = all windows
    double probe_l2 = 1.0;
    int probe_max_iter = 100;
    double encode_threshold = 0.7;
    double select_threshold = 0.05;
    // Restrict the ranking to this feature pool (enriched-pool mode); pool
    // features come first in ranking order, the rest follow in alignment
    // order. Empty = rank all features (Eq. 4 literal).
    std::vector<uint32_t> rank_pool;
};

struct SweepCurves {
    std::vector<double> target_auroc;
    std::vector<double> offtarget_auroc;
};

struct SteeringSweepResult {
    std::vector<double> fractions;
    SweepCurves tcav;                        // curves under the CAV-aligned ranking
    std::vector<SweepCurves> random_curves;  // one per permutation
    std::vector<double> random_deltas;
    double delta = 0.0;         // selectivity area of the CAV ranking
    double delta_excess = 0.0;  // delta minus the permutation mean
    double perm_delta_std = 0.0;
    bool perm_std_defined = false;
    double auroc0 = 0.0;  // target AUROC at f = 0 (encoding strength)
    Regime regime = Regime::weakly_encoded;

    std::string target_concept;
    std::string offtarget_concept;
    LogisticModel frozen_target;     // probes on window-pooled decoded embeddings
    LogisticModel frozen_offtarget;
    FeatureRanking ranking;
    Centroid centroid;
    std::vector<uint32_t> eval_windows;
};

// Full substitution sweep: frozen probes fit once on clean (f=0) decoded
// embeddings of the probe-train windows, then scored per fraction on the eval
// windows, for the CAV ranking and n_permutations random rankings.
SteeringSweepResult run_sweep(const ActivationSet& source, const SaeModel& model,
                              const Cav& cav_target, const Cav& cav_offtarget,
                              const Centroid& centroid, const SweepOptions& opts);

// One grid point re-evaluated with stored frozen probes; follows the exact
// accumulation order of run_sweep, so shared grid points match bitwise.
struct SweepPoint {
    double target_auroc = 0.0;
    double offtarget_auroc = 0.0;
};

SweepPoint evaluate_sweep_point(const ActivationSet& source, const SaeModel& model,
                                std::span<const uint32_t> ranking_order, const Centroid& centroid,
                                double f, const LogisticModel& frozen_target,
                                const LogisticModel& frozen_offtarget,
                                const std::string& target_concept,
                                const std::string& offtarget_concept,
                                std::span<const uint32_t> eval_windows);

}  // namespace latentsteer
