#include "latentsteer/concepts.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "latentsteer/rng.hpp"
#include "latentsteer/stats.hpp"

namespace latentsteer {

double SaeProbe::sensitivity(const SparseCode& code) const {
    double s = bias;
    for (size_t j = 0; j < code.indices.size(); ++j) {
        s += weights[code.indices[j]] * code.values[j];
    }
    return s;
}

namespace {

std::vector<uint8_t> apply_positive_label(std::span<const uint8_t> labels, int positive) {
    std::vector<uint8_t> out(labels.begin(), labels.end());
    if (positive == 0) {
        for (auto& v : out) v = v ? 0 : 1;
    }
    return out;
}

void require_both_classes(std::span<const uint8_t> labels, int k_fold, const std::string& who) {
    size_t pos = 0;
    for (uint8_t v : labels) pos += (v != 0);
    size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) {
        throw std::invalid_argument(who + ": single-class data (" + std::to_string(pos) +
                                    " positive, " + std::to_string(neg) + " negative)");
    }
    if (pos < static_cast<size_t>(k_fold) || neg < static_cast<size_t>(k_fold)) {
        throw std::invalid_argument(who + ": each class needs at least k_fold examples");
    }
}

// Deterministic pseudorandom fold assignment; immune to periodic label
// patterns in the example order, unlike round-robin.
int fold_of(size_t i, int k_fold) {
    uint64_t state = 0x51700af3u + static_cast<uint64_t>(i);
    return static_cast<int>(splitmix64(state) % static_cast<uint64_t>(k_fold));
}

double fold_accuracy_of(std::span<const double> scores, std::span<const uint8_t> labels) {
    size_t correct = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        correct += ((scores[i] > 0.0) == (labels[i] != 0));
    }
    return scores.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(scores.size());
}

}  // namespace

Cav fit_cav_rows(const Matrix& x, std::span<const uint8_t> labels, const ConceptSpec& spec,
                 const CavOptions& opts) {
    std::vector<uint8_t> y = apply_positive_label(labels, spec.positive_label);
    require_both_classes(y, opts.k_fold, "fit_cav");
    const size_t n = x.rows;
    const size_t d = x.cols;

    LogregOptions lopts;
    lopts.l2 = opts.l2;
    lopts.max_iter = opts.max_iter;

    std::vector<double> weight_sum(d, 0.0);
    Cav cav;
    cav.spec = spec;
    for (int fold = 0; fold < opts.k_fold; ++fold) {
        std::vector<size_t> train_rows, val_rows;
        for (size_t i = 0; i < n; ++i) {
            (fold_of(i, opts.k_fold) == fold ? val_rows : train_rows).push_back(i);
        }
        Matrix xt(train_rows.size(), d);
        std::vector<uint8_t> yt(train_rows.size());
        for (size_t i = 0; i < train_rows.size(); ++i) {
            auto src = x.row(train_rows[i]);
            std::copy(src.begin(), src.end(), xt.row(i).begin());
            yt[i] = y[train_rows[i]];
        }
        LogisticModel m = fit_logistic(xt, yt, lopts);
        for (size_t c = 0; c < d; ++c) weight_sum[c] += m.weights[c];

        std::vector<double> val_scores(val_rows.size());
        std::vector<uint8_t> val_y(val_rows.size());
        for (size_t i = 0; i < val_rows.size(); ++i) {
            val_scores[i] = m.score(x.row(val_rows[i]));
            val_y[i] = y[val_rows[i]];
        }
        cav.fold_accuracy.push_back(fold_accuracy_of(val_scores, val_y));
    }

    double n2 = norm2(weight_sum);
    if (n2 <= 0.0) throw std::runtime_error("fit_cav: degenerate zero direction");
    cav.direction.resize(d);
    for (size_t c = 0; c < d; ++c) cav.direction[c] = weight_sum[c] / n2;
    return cav;
}

Cav fit_cav(const ActivationSet& dense, const ConceptSpec& spec, const CavOptions& opts) {
    std::vector<uint8_t> labels = dense.token_labels(spec.name);
    return fit_cav_rows(dense.activations, labels, spec, opts);
}

SaeProbe fit_sae_probe(std::span<const SparseCode> codes, std::span<const uint8_t> labels,
                       const ConceptSpec& spec, const CavOptions& opts) {
    if (codes.empty()) throw std::invalid_argument("fit_sae_probe: no codes");
    if (codes.size() != labels.size()) {
        throw std::invalid_argument("fit_sae_probe: codes/labels length mismatch");
    }
    bool any_nonzero = false;
    for (const SparseCode& c : codes) {
        for (double v : c.values) {
            if (v != 0.0) {
                any_nonzero = true;
                break;
            }
        }
        if (any_nonzero) break;
    }
    if (!any_nonzero) throw std::invalid_argument("fit_sae_probe: degenerate probe input");

    std::vector<uint8_t> y = apply_positive_label(labels, spec.positive_label);
    require_both_classes(y, opts.k_fold, "fit_sae_probe");
    const size_t dim = codes[0].dict_size;

    LogregOptions lopts;
    lopts.l2 = opts.l2;
    lopts.max_iter = opts.max_iter;

    SaeProbe probe;
    probe.spec = spec;
    probe.weights.assign(dim, 0.0);
    double bias_sum = 0.0;
    for (int fold = 0; fold < opts.k_fold; ++fold) {
        std::vector<SparseRowView> rows;
        std::vector<uint8_t> yt;
        for (size_t i = 0; i < codes.size(); ++i) {
            if (fold_of(i, opts.k_fold) == fold) continue;
            rows.push_back({codes[i].indices, codes[i].values});
            yt.push_back(y[i]);
        }
        LogisticModel m = fit_logistic_sparse(rows, dim, yt, lopts);
        for (size_t c = 0; c < dim; ++c) probe.weights[c] += m.weights[c];
        bias_sum += m.bias;
    }
    double inv = 1.0 / static_cast<double>(opts.k_fold);
    for (double& w : probe.weights) w *= inv;
    probe.bias = bias_sum * inv;
    return probe;
}

double tcav_score(const SaeProbe& probe, std::span<const SparseCode> concept_examples) {
    if (concept_examples.empty()) {
        throw std::invalid_argument("tcav_score: empty concept example set");
    }
    size_t positive = 0;
    for (const SparseCode& code : concept_examples) {
        positive += (probe.sensitivity(code) > 0.0);
    }
    return static_cast<double>(positive) / static_cast<double>(concept_examples.size());
}

TcavSignificance tcav_significance(double score, std::span<const double> null_scores) {
    if (null_scores.size() < 2) {
        throw std::invalid_argument("tcav_significance: need at least 2 null scores");
    }
    TcavSignificance out;
    out.n_null = null_scores.size();
    size_t below_or_equal = 0;
    for (double v : null_scores) below_or_equal += (v <= score);
    out.quantile = static_cast<double>(below_or_equal) / static_cast<double>(null_scores.size());

    double m = mean(null_scores);
    double sd = std::sqrt(variance(null_scores, 1));
    if (sd <= 0.0) {
        return out;  // degenerate null: quantile only, p undefined
    }
    double n = static_cast<double>(null_scores.size());
    out.t_stat = (score - m) / (sd / std::sqrt(n));
    out.p = student_t_two_sided_p(out.t_stat, n - 1.0);
    return out;
}

std::vector<double> tcav_null_scores(std::span<const SparseCode> codes,
                                     std::span<const uint8_t> labels,
                                     const NullScoreOptions& opts) {
    if (codes.size() != labels.size()) {
        throw std::invalid_argument("tcav_null_scores: codes/labels length mismatch");
    }
    Rng root(opts.seed);

    // Deterministic subsample keeps the null fits cheap at desk scale.
    std::vector<size_t> pool(codes.size());
    std::iota(pool.begin(), pool.end(), 0);
    if (opts.max_examples > 0 && pool.size() > opts.max_examples) {
        Rng sub = root.substream(0x5ab5);
        sub.shuffle(pool);
        pool.resize(opts.max_examples);
        std::sort(pool.begin(), pool.end());
    }

    LogregOptions lopts;
    lopts.l2 = opts.fit.l2;
    lopts.max_iter = opts.fit.max_iter;

    std::vector<double> scores;
    scores.reserve(opts.n_rand);
    for (int r = 0; r < opts.n_rand; ++r) {
        Rng perm_rng = root.substream(static_cast<uint64_t>(r) + 1);
        std::vector<uint8_t> permuted(pool.size());
        for (size_t i = 0; i < pool.size(); ++i) permuted[i] = labels[pool[i]];
        perm_rng.shuffle(permuted);

        std::vector<SparseRowView> rows;
        rows.reserve(pool.size());
        for (size_t i : pool) rows.push_back({codes[i].indices, codes[i].values});
        LogisticModel m = fit_logistic_sparse(rows, codes[0].dict_size, permuted, lopts);

        size_t positive = 0, total = 0;
        for (size_t i = 0; i < pool.size(); ++i) {
            if (!permuted[i]) continue;
            ++total;
            double s = m.bias;
            const SparseCode& code = codes[pool[i]];
            for (size_t j = 0; j < code.indices.size(); ++j) {
                s += m.weights[code.indices[j]] * code.values[j];
            }
            positive += (s > 0.0);
        }
        scores.push_back(total ? static_cast<double>(positive) / static_cast<double>(total) : 0.5);
    }
    return scores;
}

EnrichmentResult enrichment_test(std::span<const SparseCode> codes,
                                 std::span<const uint8_t> labels, size_t n_features, double q) {
    if (codes.size() != labels.size()) {
        throw std::invalid_argument("enrichment_test: codes/labels length mismatch");
    }
    size_t n1 = 0;
    for (uint8_t v : labels) n1 += (v != 0);
    size_t n0 = codes.size() - n1;
    if (n1 == 0 || n0 == 0) {
        throw std::invalid_argument("enrichment_test: both classes must be present");
    }

    // Sparse accumulation; absent entries are zeros and still count.
    std::vector<double> sum1(n_features, 0.0), sumsq1(n_features, 0.0);
    std::vector<double> sum0(n_features, 0.0), sumsq0(n_features, 0.0);
    for (size_t r = 0; r < codes.size(); ++r) {
        auto& sum = labels[r] ? sum1 : sum0;
        auto& sumsq = labels[r] ? sumsq1 : sumsq0;
        const SparseCode& code = codes[r];
        for (size_t j = 0; j < code.indices.size(); ++j) {
            sum[code.indices[j]] += code.values[j];
            sumsq[code.indices[j]] += code.values[j] * code.values[j];
        }
    }

    EnrichmentResult out;
    out.q_threshold = q;
    out.z_scores.resize(n_features);
    out.p_values.resize(n_features);
    const double dn1 = static_cast<double>(n1), dn0 = static_cast<double>(n0);
    for (size_t f = 0; f < n_features; ++f) {
        double m1 = sum1[f] / dn1;
        double m0 = sum0[f] / dn0;
        double ss1 = sumsq1[f] - dn1 * m1 * m1;
        double ss0 = sumsq0[f] - dn0 * m0 * m0;
        double df = dn1 + dn0 - 2.0;
        double pooled_var = df > 0.0 ? std::max(ss1 + ss0, 0.0) / df : 0.0;
        double se = std::sqrt(pooled_var * (1.0 / dn1 + 1.0 / dn0));
        if (se <= 0.0) {
            out.z_scores[f] = 0.0;
            out.p_values[f] = 0.5;  // zero-variance convention
        } else {
            double z = (m1 - m0) / se;
            out.z_scores[f] = z;
            out.p_values[f] = 1.0 - normal_cdf(z);
        }
    }
    for (size_t idx : benjamini_hochberg(out.p_values, q)) {
        out.enriched.push_back(static_cast<uint32_t>(idx));
    }
    return out;
}

const char* feature_class_name(FeatureClass c) {
    switch (c) {
        case FeatureClass::separable: return "separable";
        case FeatureClass::entangled: return "entangled";
        case FeatureClass::dead: return "dead";
        case FeatureClass::unlabeled: return "unlabeled";
    }
    return "?";
}

TaxonomySummary classify_taxonomy(const std::map<std::string, EnrichmentResult>& per_concept,
                                  std::span<const double> firing_rates,
                                  double dead_rate_threshold) {
    const size_t n = firing_rates.size();
    std::vector<int> enriched_count(n, 0);
    for (const auto& [name, result] : per_concept) {
        for (uint32_t f : result.enriched) {
            if (f < n) enriched_count[f] += 1;
        }
    }
    TaxonomySummary out;
    out.per_feature_class.resize(n);
    size_t counts[4] = {0, 0, 0, 0};
    for (size_t f = 0; f < n; ++f) {
        FeatureClass c;
        if (firing_rates[f] < dead_rate_threshold || enriched_count[f] == 0) {
            c = FeatureClass::dead;
        } else if (enriched_count[f] == 1) {
            c = FeatureClass::separable;
        } else {
            c = FeatureClass::entangled;
        }
        out.per_feature_class[f] = c;
        counts[static_cast<int>(c)] += 1;
    }
    double dn = static_cast<double>(n);
    out.separable_frac = counts[0] / dn;
    out.entangled_frac = counts[1] / dn;
    out.dead_frac = counts[2] / dn;
    out.unlabeled_frac = counts[3] / dn;
    return out;
}

OperatingPoint select_operating_point(
    const std::map<std::pair<int, int>, TaxonomySummary>& grid,
    const std::map<std::pair<int, std::string>, double>& significance, double alpha) {
    if (grid.empty()) throw std::invalid_argument("select_operating_point: empty grid");

    std::set<int> passing_layers, all_layers;
    std::map<int, std::vector<std::string>> failing;
    for (const auto& [key, _] : grid) all_layers.insert(key.first);
    for (int layer : all_layers) {
        bool ok = true;
        for (const auto& [key, p] : significance) {
            if (key.first != layer) continue;
            if (!(p < alpha)) {
                ok = false;
                failing[layer].push_back(key.second);
            }
        }
        if (ok) passing_layers.insert(layer);
    }

    bool found = false;
    OperatingPoint best;
    for (const auto& [key, summary] : grid) {
        const auto& [layer, expansion] = key;
        if (!passing_layers.count(layer)) continue;
        double score = summary.separable_frac - summary.dead_frac;
        bool better = !found || score > best.score ||
                      (score == best.score && (expansion < best.expansion ||
                                               (expansion == best.expansion && layer < best.layer)));
        if (better) {
            best = {layer, expansion, score};
            found = true;
        }
    }
    if (!found) {
        std::ostringstream msg;
        msg << "select_operating_point: no layer passes TCAV significance at alpha=" << alpha;
        for (const auto& [layer, concepts] : failing) {
            msg << "; layer " << layer << " fails:";
            for (const auto& c : concepts) msg << " " << c;
        }
        throw std::runtime_error(msg.str());
    }
    return best;
}

}  // namespace latentsteer
