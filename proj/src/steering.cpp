#include "latentsteer/steering.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "latentsteer/common.hpp"
#include "latentsteer/metrics.hpp"
#include "latentsteer/rng.hpp"

namespace latentsteer {

FeatureRanking rank_features(const Cav& cav, const SaeModel& model) {
    if (cav.direction.size() != model.dim()) {
        throw std::invalid_argument("rank_features: CAV dimension does not match the model");
    }
    const size_t n = model.n_features();
    FeatureRanking out;
    out.scores.resize(n);
    for (size_t i = 0; i < n; ++i) {
        out.scores[i] = std::fabs(dot(cav.direction, model.decoder_direction(i)));
    }
    out.order.resize(n);
    std::iota(out.order.begin(), out.order.end(), 0u);
    std::sort(out.order.begin(), out.order.end(), [&](uint32_t a, uint32_t b) {
        if (out.scores[a] != out.scores[b]) return out.scores[a] > out.scores[b];
        return a < b;
    });
    return out;
}

Centroid target_centroid(std::span<const SparseCode> codes) {
    if (codes.empty()) throw std::invalid_argument("target_centroid: empty pool");
    Centroid out;
    out.source_count = codes.size();
    out.values.assign(codes[0].dict_size, 0.0);
    for (const SparseCode& code : codes) {
        for (size_t j = 0; j < code.indices.size(); ++j) {
            out.values[code.indices[j]] += code.values[j];
        }
    }
    double inv = 1.0 / static_cast<double>(codes.size());
    for (double& v : out.values) v *= inv;
    return out;
}

std::vector<double> clamp(const SparseCode& z, const FeatureRanking& ranking, double f,
                          const Centroid& centroid) {
    if (f < 0.0 || f > 1.0) throw std::invalid_argument("clamp: fraction outside [0, 1]");
    std::vector<double> out = z.densify();
    size_t n_clamped = static_cast<size_t>(std::floor(f * static_cast<double>(z.dict_size)));
    for (size_t r = 0; r < n_clamped; ++r) {
        uint32_t i = ranking.order[r];
        out[i] = centroid.values[i];
    }
    return out;
}

std::vector<double> decode_intervened(std::span<const double> zstar, const SaeModel& model) {
    if (zstar.size() != model.n_features()) {
        throw std::invalid_argument("decode_intervened: code length does not match the model");
    }
    std::vector<double> x(model.b_dec.begin(), model.b_dec.end());
    for (size_t i = 0; i < zstar.size(); ++i) {
        if (zstar[i] != 0.0) axpy(zstar[i], model.w_dec.row(i), {x.data(), x.size()});
    }
    return unstandardize(x, model);
}

double selectivity_area(std::span<const double> target_curve,
                        std::span<const double> offtarget_curve,
                        std::span<const double> fractions) {
    if (target_curve.size() != fractions.size() || offtarget_curve.size() != fractions.size()) {
        throw std::invalid_argument("selectivity_area: curve/grid length mismatch");
    }
    if (fractions.size() < 2) throw std::invalid_argument("selectivity_area: need >= 2 grid points");
    for (size_t i = 1; i < fractions.size(); ++i) {
        if (!(fractions[i] > fractions[i - 1])) {
            throw std::invalid_argument("selectivity_area: fraction grid is not ascending");
        }
    }
    double area = 0.0;
    for (size_t i = 1; i < fractions.size(); ++i) {
        double h = fractions[i] - fractions[i - 1];
        double a = offtarget_curve[i - 1] - target_curve[i - 1];
        double b = offtarget_curve[i] - target_curve[i];
        area += 0.5 * h * (a + b);
    }
    return area;
}

ExcessSelectivity excess_selectivity(double delta_tcav,
                                     std::span<const double> delta_permutations) {
    if (delta_permutations.empty()) {
        throw std::invalid_argument("excess_selectivity: no permutation baselines");
    }
    ExcessSelectivity out;
    out.delta_excess = delta_tcav - mean(delta_permutations);
    if (delta_permutations.size() >= 2) {
        out.perm_std = std::sqrt(variance(delta_permutations, 1));
        out.std_defined = true;
    }
    return out;
}

const char* regime_name(Regime r) {
    switch (r) {
        case Regime::steerable: return "steerable";
        case Regime::entangled: return "entangled";
        case Regime::weakly_encoded: return "weakly_encoded";
    }
    return "?";
}

Regime classify_regime(double auroc0, double delta_excess, double encode_threshold,
                       double select_threshold) {
    if (auroc0 < encode_threshold) return Regime::weakly_encoded;
    return delta_excess > select_threshold ? Regime::steerable : Regime::entangled;
}

std::vector<double> default_fraction_grid() {
    std::vector<double> grid(21);
    for (int i = 0; i <= 20; ++i) grid[static_cast<size_t>(i)] = i / 20.0;
    grid[0] = 0.0;
    grid[20] = 1.0;
    return grid;
}

namespace {

// Per-window mean of per-token vectors, restricted to `windows`.
struct WindowPool {
    std::vector<uint32_t> windows;           // in ascending order
    std::vector<int> slot_of_window;         // window_id -> slot or -1
    std::vector<double> token_count;         // per slot

    WindowPool(const ActivationSet& set, std::vector<uint32_t> wins) : windows(std::move(wins)) {
        std::sort(windows.begin(), windows.end());
        slot_of_window.assign(set.n_windows(), -1);
        for (size_t s = 0; s < windows.size(); ++s) {
            slot_of_window[windows[s]] = static_cast<int>(s);
        }
        token_count.assign(windows.size(), 0.0);
        for (const TokenMeta& t : set.tokens) {
            int s = slot_of_window[t.window_id];
            if (s >= 0) token_count[static_cast<size_t>(s)] += 1.0;
        }
        for (double c : token_count) {
            if (c == 0.0) throw std::invalid_argument("run_sweep: a selected window has no tokens");
        }
    }
};

std::vector<uint8_t> window_labels_of(const ActivationSet& set, const std::string& name,
                                      const std::vector<uint32_t>& windows) {
    const auto& all = set.labels_for(name);
    std::vector<uint8_t> out(windows.size());
    for (size_t i = 0; i < windows.size(); ++i) out[i] = all[windows[i]];
    return out;
}

std::vector<double> probe_scores(const LogisticModel& probe, const Matrix& x) {
    std::vector<double> out(x.rows);
    for (size_t r = 0; r < x.rows; ++r) out[r] = probe.score(x.row(r));
    return out;
}

double auroc_or_throw(std::span<const double> scores, std::span<const uint8_t> labels,
                      const char* what) {
    auto v = auroc(scores, labels);
    if (!v) {
        throw std::invalid_argument(std::string("run_sweep: ") + what +
                                    " windows contain a single class");
    }
    return *v;
}

}  // namespace

// Decode of the fully clamped code; every token maps here at f = 1.
static std::vector<double> full_clamp_decode(const SaeModel& model, const Centroid& centroid) {
    std::vector<double> out(model.b_dec.begin(), model.b_dec.end());
    for (size_t i = 0; i < model.n_features(); ++i) {
        if (centroid.values[i] != 0.0) {
            axpy(centroid.values[i], model.w_dec.row(i), {out.data(), out.size()});
        }
    }
    return out;
}

// Curves for one ranking over an ascending clamp-count grid. Clamp sets are
// nested, so each token walks the grid once, adding feature deltas
// incrementally; a full clamp substitutes the shared centroid decode so the
// f=1 point keeps its exact ties.
static SweepCurves eval_ranking_curves(
    const ActivationSet& source, const SaeModel& model, const std::vector<uint32_t>& order,
    const Centroid& centroid, const std::vector<size_t>& clamp_count,
    const std::vector<SparseCode>& codes, const Matrix& clean_std,
    const std::vector<double>& centroid_decode, const WindowPool& eval_pool,
    const LogisticModel& frozen_target, const LogisticModel& frozen_off,
    const std::vector<uint8_t>& eval_target, const std::vector<uint8_t>& eval_off) {
    const size_t d = source.dim();
    const size_t n_features = model.n_features();
    const size_t n_grid = clamp_count.size();
    const size_t n_eval = eval_pool.windows.size();
    const size_t n_tokens = source.n_tokens();

    std::vector<Matrix> winsum(n_grid, Matrix(n_eval, d));
    std::vector<double> acc(d), dense(n_features);
    for (size_t t = 0; t < n_tokens; ++t) {
        int slot = eval_pool.slot_of_window[source.tokens[t].window_id];
        if (slot < 0) continue;
        const SparseCode& code = codes[t];
        std::fill(dense.begin(), dense.end(), 0.0);
        for (size_t j = 0; j < code.indices.size(); ++j) dense[code.indices[j]] = code.values[j];
        auto base = clean_std.row(t);
        std::copy(base.begin(), base.end(), acc.begin());
        size_t applied = 0;
        for (size_t j = 0; j < n_grid; ++j) {
            if (clamp_count[j] >= n_features) {
                axpy(1.0, {centroid_decode.data(), d}, winsum[j].row(static_cast<size_t>(slot)));
                applied = n_features;
                continue;
            }
            for (; applied < clamp_count[j]; ++applied) {
                uint32_t i = order[applied];
                double delta_coef = centroid.values[i] - dense[i];
                if (delta_coef != 0.0) axpy(delta_coef, model.w_dec.row(i), {acc.data(), d});
            }
            axpy(1.0, {acc.data(), d}, winsum[j].row(static_cast<size_t>(slot)));
        }
    }

    SweepCurves out;
    out.target_auroc.resize(n_grid);
    out.offtarget_auroc.resize(n_grid);
    Matrix pooled(n_eval, d);
    for (size_t j = 0; j < n_grid; ++j) {
        for (size_t s = 0; s < n_eval; ++s) {
            auto sum = winsum[j].row(s);
            std::vector<double> meanv(d);
            for (size_t c = 0; c < d; ++c) meanv[c] = sum[c] / eval_pool.token_count[s];
            std::vector<double> un = unstandardize(meanv, model);
            std::copy(un.begin(), un.end(), pooled.row(s).begin());
        }
        out.target_auroc[j] =
            auroc_or_throw(probe_scores(frozen_target, pooled), eval_target, "eval (target)");
        out.offtarget_auroc[j] =
            auroc_or_throw(probe_scores(frozen_off, pooled), eval_off, "eval (off-target)");
    }
    return out;
}

SteeringSweepResult run_sweep(const ActivationSet& source, const SaeModel& model,
                              const Cav& cav_target, const Cav& cav_offtarget,
                              const Centroid& centroid, const SweepOptions& opts) {
    const size_t d = source.dim();
    const size_t n_features = model.n_features();
    if (d != model.dim()) throw std::invalid_argument("run_sweep: set/model dimension mismatch");
    if (centroid.values.size() != n_features) {
        throw std::invalid_argument("run_sweep: centroid size does not match the model");
    }

    std::vector<double> fractions = opts.fractions.empty() ? default_fraction_grid() : opts.fractions;
    if (fractions.size() < 2 || fractions.front() != 0.0 || fractions.back() != 1.0) {
        throw std::invalid_argument("run_sweep: fraction grid must start at 0 and end at 1");
    }
    for (size_t i = 1; i < fractions.size(); ++i) {
        if (!(fractions[i] > fractions[i - 1])) {
            throw std::invalid_argument("run_sweep: fraction grid is not ascending");
        }
    }

    const std::string& target_name = cav_target.spec.name;
    const std::string& offtarget_name = cav_offtarget.spec.name;
    source.labels_for(target_name);  // throws when missing
    source.labels_for(offtarget_name);

    std::vector<uint32_t> all_windows(source.n_windows());
    std::iota(all_windows.begin(), all_windows.end(), 0u);
    WindowPool train_pool(source, opts.probe_train_windows.empty() ? all_windows
                                                                   : opts.probe_train_windows);
    WindowPool eval_pool(source, opts.eval_windows.empty() ? all_windows : opts.eval_windows);

    const size_t n_tokens = source.n_tokens();
    // Cache every token's code and clean standardized decode.
    std::vector<SparseCode> codes(n_tokens);
    Matrix clean_std(n_tokens, d);
    for (size_t t = 0; t < n_tokens; ++t) {
        codes[t] = encode(source.activations.row(t), model);
        std::vector<double> dec = decode(codes[t], model);
        std::copy(dec.begin(), dec.end(), clean_std.row(t).begin());
    }

    auto pool_clean = [&](const WindowPool& pool) {
        Matrix sums(pool.windows.size(), d);
        for (size_t t = 0; t < n_tokens; ++t) {
            int s = pool.slot_of_window[source.tokens[t].window_id];
            if (s < 0) continue;
            axpy(1.0, clean_std.row(t), sums.row(static_cast<size_t>(s)));
        }
        Matrix pooled(pool.windows.size(), d);
        for (size_t s = 0; s < pool.windows.size(); ++s) {
            auto sum = sums.row(s);
            std::vector<double> meanv(d);
            for (size_t c = 0; c < d; ++c) meanv[c] = sum[c] / pool.token_count[s];
            std::vector<double> un = unstandardize(meanv, model);
            std::copy(un.begin(), un.end(), pooled.row(s).begin());
        }
        return pooled;
    };

    // Frozen probes: fit once on clean decoded embeddings, window-pooled.
    Matrix train_x = pool_clean(train_pool);
    LogregOptions probe_opts;
    probe_opts.l2 = opts.probe_l2;
    probe_opts.max_iter = opts.probe_max_iter;
    std::vector<uint8_t> train_target = window_labels_of(source, target_name, train_pool.windows);
    std::vector<uint8_t> train_off = window_labels_of(source, offtarget_name, train_pool.windows);
    LogisticModel frozen_target = fit_logistic(train_x, train_target, probe_opts);
    LogisticModel frozen_off = fit_logistic(train_x, train_off, probe_opts);

    std::vector<uint8_t> eval_target = window_labels_of(source, target_name, eval_pool.windows);
    std::vector<uint8_t> eval_off = window_labels_of(source, offtarget_name, eval_pool.windows);

    // Rankings: slot 0 is the CAV-aligned ranking, then the permutations.
    FeatureRanking tcav_ranking = rank_features(cav_target, model);
    if (!opts.rank_pool.empty()) {
        std::vector<uint8_t> in_pool(n_features, 0);
        for (uint32_t f : opts.rank_pool) {
            if (f >= n_features) throw std::invalid_argument("run_sweep: rank_pool feature out of range");
            in_pool[f] = 1;
        }
        std::stable_partition(tcav_ranking.order.begin(), tcav_ranking.order.end(),
                              [&](uint32_t f) { return in_pool[f] != 0; });
    }
    const int n_rankings = opts.n_permutations + 1;
    std::vector<std::vector<uint32_t>> orders(static_cast<size_t>(n_rankings));
    orders[0] = tcav_ranking.order;
    for (int p = 0; p < opts.n_permutations; ++p) {
        std::vector<uint32_t> perm(n_features);
        std::iota(perm.begin(), perm.end(), 0u);
        Rng(opts.seed).substream(static_cast<uint64_t>(p) + 1).shuffle(perm);
        orders[static_cast<size_t>(p) + 1] = std::move(perm);
    }

    std::vector<size_t> clamp_count(fractions.size());
    for (size_t j = 0; j < fractions.size(); ++j) {
        clamp_count[j] =
            static_cast<size_t>(std::floor(fractions[j] * static_cast<double>(n_features)));
    }
    std::vector<double> centroid_decode = full_clamp_decode(model, centroid);

    std::vector<SweepCurves> curves(static_cast<size_t>(n_rankings));
    parallel_for(static_cast<size_t>(n_rankings), [&](size_t ri) {
        curves[ri] = eval_ranking_curves(source, model, orders[ri], centroid, clamp_count, codes,
                                         clean_std, centroid_decode, eval_pool, frozen_target,
                                         frozen_off, eval_target, eval_off);
    });

    SteeringSweepResult result;
    result.fractions = fractions;
    result.tcav = curves[0];
    result.random_curves.assign(curves.begin() + 1, curves.end());
    result.delta = selectivity_area(result.tcav.target_auroc, result.tcav.offtarget_auroc, fractions);
    for (const SweepCurves& c : result.random_curves) {
        result.random_deltas.push_back(selectivity_area(c.target_auroc, c.offtarget_auroc, fractions));
    }
    if (!result.random_deltas.empty()) {
        ExcessSelectivity ex = excess_selectivity(result.delta, result.random_deltas);
        result.delta_excess = ex.delta_excess;
        result.perm_delta_std = ex.perm_std;
        result.perm_std_defined = ex.std_defined;
    } else {
        result.delta_excess = result.delta;
    }
    result.auroc0 = result.tcav.target_auroc[0];
    result.regime = classify_regime(result.auroc0, result.delta_excess, opts.encode_threshold,
                                    opts.select_threshold);
    result.target_concept = target_name;
    result.offtarget_concept = offtarget_name;
    result.frozen_target = frozen_target;
    result.frozen_offtarget = frozen_off;
    result.ranking = tcav_ranking;
    result.centroid = centroid;
    result.eval_windows = eval_pool.windows;
    return result;
}

SweepPoint evaluate_sweep_point(const ActivationSet& source, const SaeModel& model,
                                std::span<const uint32_t> ranking_order, const Centroid& centroid,
                                double f, const LogisticModel& frozen_target,
                                const LogisticModel& frozen_offtarget,
                                const std::string& target_concept,
                                const std::string& offtarget_concept,
                                std::span<const uint32_t> eval_windows) {
    if (f < 0.0) f = 0.0;
    if (f > 1.0) f = 1.0;
    const size_t d = source.dim();
    const size_t n_features = model.n_features();
    std::vector<uint32_t> all_windows(source.n_windows());
    std::iota(all_windows.begin(), all_windows.end(), 0u);
    WindowPool eval_pool(source, eval_windows.empty()
                                     ? all_windows
                                     : std::vector<uint32_t>(eval_windows.begin(), eval_windows.end()));

    const size_t n_tokens = source.n_tokens();
    std::vector<SparseCode> codes(n_tokens);
    Matrix clean_std(n_tokens, d);
    for (size_t t = 0; t < n_tokens; ++t) {
        int slot = eval_pool.slot_of_window[source.tokens[t].window_id];
        if (slot < 0) continue;
        codes[t] = encode(source.activations.row(t), model);
        std::vector<double> dec = decode(codes[t], model);
        std::copy(dec.begin(), dec.end(), clean_std.row(t).begin());
    }

    std::vector<size_t> clamp_count = {
        static_cast<size_t>(std::floor(f * static_cast<double>(n_features)))};
    std::vector<double> centroid_decode = full_clamp_decode(model, centroid);
    std::vector<uint32_t> order(ranking_order.begin(), ranking_order.end());
    std::vector<uint8_t> eval_target = window_labels_of(source, target_concept, eval_pool.windows);
    std::vector<uint8_t> eval_off = window_labels_of(source, offtarget_concept, eval_pool.windows);
    SweepCurves curves =
        eval_ranking_curves(source, model, order, centroid, clamp_count, codes, clean_std,
                            centroid_decode, eval_pool, frozen_target, frozen_offtarget,
                            eval_target, eval_off);
    return {curves.target_auroc[0], curves.offtarget_auroc[0]};
}

}  // namespace latentsteer
