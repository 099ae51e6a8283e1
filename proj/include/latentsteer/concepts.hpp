#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "latentsteer/activations.hpp"
#include "latentsteer/logreg.hpp"
#include "latentsteer/sae.hpp"

namespace latentsteer {

struct ConceptSpec {
    std::string name;
    int positive_label = 1;  // which binary value denotes concept presence
};

// Unit-norm concept direction in dense activation space.
struct Cav {
    std::vector<double> direction;
    std::vector<double> fold_accuracy;
    ConceptSpec spec;
};

// Linear probe on SAE codes; sensitivity S_C(x) = w . z(x) + bias.
struct SaeProbe {
    std::vector<double> weights;
    double bias = 0.0;
    ConceptSpec spec;

    double sensitivity(const SparseCode& code) const;
};

struct CavOptions {
    int k_fold = 10;
    double l2 = 1.0;
    int max_iter = 50;
};

// k-fold L2 logistic regression on dense token activations; the direction is
// the normalized mean of the per-fold weight vectors.
Cav fit_cav(const ActivationSet& dense, const ConceptSpec& spec, const CavOptions& opts = {});

// Same protocol on token-level labels supplied directly (used for decoded
// embeddings and null fits).
Cav fit_cav_rows(const Matrix& x, std::span<const uint8_t> labels, const ConceptSpec& spec,
                 const CavOptions& opts = {});

SaeProbe fit_sae_probe(std::span<const SparseCode> codes, std::span<const uint8_t> labels,
                       const ConceptSpec& spec, const CavOptions& opts = {});

// Fraction of concept examples with positive sensitivity; zero counts as not
// positive.
double tcav_score(const SaeProbe& probe, std::span<const SparseCode> concept_examples);

struct TcavSignificance {
    std::optional<double> p;  // two-sided t-test p; absent for a degenerate null
    double quantile = 0.0;    // fraction of null scores <= observed
    double t_stat = 0.0;
    size_t n_null = 0;
};

TcavSignificance tcav_significance(double score, std::span<const double> null_scores);

struct NullScoreOptions {
    int n_rand = 50;
    uint64_t seed = 0;
    size_t max_examples = 0;  // 0 = use all
    CavOptions fit;           // k_fold ignored: nulls use a single fit
};

// Null TCAV distribution from probes fit on label permutations.
std::vector<double> tcav_null_scores(std::span<const SparseCode> codes,
                                     std::span<const uint8_t> labels,
                                     const NullScoreOptions& opts = {});

struct EnrichmentResult {
    std::vector<double> z_scores;
    std::vector<double> p_values;
    double q_threshold = 0.05;
    std::vector<uint32_t> enriched;  // feature ids passing BH at q
};

// One-sided difference-of-means z-test per feature with BH correction over
// all N simultaneous hypotheses. Zero-variance features get z=0, p=0.5.
EnrichmentResult enrichment_test(std::span<const SparseCode> codes,
                                 std::span<const uint8_t> labels, size_t n_features,
                                 double q = 0.05);

enum class FeatureClass : uint8_t { separable, entangled, dead, unlabeled };
const char* feature_class_name(FeatureClass c);

struct TaxonomySummary {
    double separable_frac = 0.0;
    double entangled_frac = 0.0;
    double dead_frac = 0.0;
    double unlabeled_frac = 0.0;
    std::vector<FeatureClass> per_feature_class;
};

// dead if the firing rate is below threshold or no concept is enriched;
// separable if enriched for exactly one concept; entangled for two or more.
TaxonomySummary classify_taxonomy(const std::map<std::string, EnrichmentResult>& per_concept,
                                  std::span<const double> firing_rates,
                                  double dead_rate_threshold = 1e-5);

struct OperatingPoint {
    int layer = 0;
    int expansion = 0;
    double score = 0.0;  // separable_frac - dead_frac
};

// Argmax of (separable - dead) over the grid, restricted to layers where
// every concept in `significance` passes p < alpha. Ties prefer smaller E,
// then smaller layer. Throws with the failing concepts when no layer passes.
OperatingPoint select_operating_point(
    const std::map<std::pair<int, int>, TaxonomySummary>& grid,
    const std::map<std::pair<int, std::string>, double>& significance, double alpha = 0.05);

}  // namespace latentsteer
