#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "latentsteer/metrics.hpp"
#include "latentsteer/rng.hpp"
#include "latentsteer/steering.hpp"
#include "latentsteer/synthetic.hpp"

using namespace latentsteer;

namespace {

SaeModel identity_model(size_t d) {
    SaeModel m;
    m.w_enc = Matrix(d, d);
    m.w_dec = Matrix(d, d);
    for (size_t i = 0; i < d; ++i) {
        m.w_enc.at(i, i) = 1.0;
        m.w_dec.at(i, i) = 1.0;
    }
    m.b_dec.assign(d, 0.0);
    m.mu.assign(d, 0.0);
    m.sigma.assign(d, 1.0);
    m.k = static_cast<uint32_t>(d);
    m.expansion = 1;
    return m;
}

Cav axis_cav(size_t d, size_t axis, const std::string& name) {
    Cav cav;
    cav.direction.assign(d, 0.0);
    cav.direction[axis] = 1.0;
    cav.spec = {name, 1};
    return cav;
}

SaeModel random_unit_model(size_t d, int e, uint32_t k, uint64_t seed) {
    SaeModel m;
    Rng rng(seed);
    size_t n = d * static_cast<size_t>(e);
    m.w_enc = Matrix(n, d);
    m.w_dec = Matrix(n, d);
    for (auto& v : m.w_enc.data) v = rng.normal();
    for (size_t i = 0; i < n; ++i) {
        auto row = m.w_dec.row(i);
        for (auto& v : row) v = rng.normal();
        scale(row, 1.0 / norm2(row));
    }
    m.b_dec.assign(d, 0.0);
    m.mu.assign(d, 0.0);
    m.sigma.assign(d, 1.0);
    m.k = k;
    m.expansion = static_cast<uint32_t>(e);
    return m;
}

// Synthetic set with two disjoint planted concepts; used by the sweep tests.
SyntheticData sweep_fixture(uint64_t seed) {
    std::map<std::string, std::vector<uint32_t>> concepts = {{"target", {0, 1}},
                                                             {"offtarget", {2, 3}}};
    SyntheticGroundTruth gt = make_ground_truth(16, 12, concepts, seed);
    gt.coefficient_sparsity = 5;
    gt.noise_sigma = 0.05;
    gt.spectral_embed_scale = 0.0;
    SyntheticConfig cfg;
    cfg.n_subjects = 8;
    cfg.windows_per_subject = 8;
    cfg.tokens_per_window = 8;
    cfg.seed = seed + 1;
    cfg.sample_rate_hz = 160.0;
    return generate_synthetic(gt, cfg);
}

}  // namespace

TEST_CASE("ranking on an orthonormal dictionary picks the aligned axis") {
    SaeModel m = identity_model(4);
    Cav cav = axis_cav(4, 2, "c");
    FeatureRanking r = rank_features(cav, m);
    CHECK(r.order[0] == 2);
    CHECK(r.scores[2] == doctest::Approx(1.0));
    for (size_t i = 0; i < 4; ++i) {
        if (i != 2) CHECK(r.scores[i] == doctest::Approx(0.0));
    }
}

TEST_CASE("ranking ignores the sign and scale of the CAV") {
    SaeModel m = random_unit_model(6, 2, 3, 8);
    Cav cav;
    cav.direction.assign(6, 0.0);
    Rng rng(4);
    for (auto& v : cav.direction) v = rng.normal();
    scale({cav.direction.data(), 6}, 1.0 / norm2(cav.direction));
    FeatureRanking base = rank_features(cav, m);

    Cav flipped = cav;
    for (auto& v : flipped.direction) v *= -1.0;
    CHECK(rank_features(flipped, m).order == base.order);
}

TEST_CASE("ranking matches a brute-force dot product loop") {
    SaeModel m = random_unit_model(5, 3, 4, 21);
    Cav cav;
    cav.direction.assign(5, 0.0);
    Rng rng(22);
    for (auto& v : cav.direction) v = rng.normal();
    scale({cav.direction.data(), 5}, 1.0 / norm2(cav.direction));
    FeatureRanking r = rank_features(cav, m);

    std::vector<double> brute(m.n_features());
    for (size_t i = 0; i < m.n_features(); ++i) {
        double s = 0.0;
        for (size_t c = 0; c < 5; ++c) s += cav.direction[c] * m.w_dec.at(i, c);
        brute[i] = std::fabs(s);
    }
    std::vector<uint32_t> order(m.n_features());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
        if (brute[a] != brute[b]) return brute[a] > brute[b];
        return a < b;
    });
    CHECK(r.order == order);
}

TEST_CASE("centroid is the elementwise mean of densified codes") {
    SparseCode a;
    a.dict_size = 2;
    a.indices = {1};
    a.values = {2.0};
    SparseCode b;
    b.dict_size = 2;
    b.indices = {0};
    b.values = {2.0};
    std::vector<SparseCode> codes = {a, b};
    Centroid c = target_centroid(codes);
    CHECK(c.values == std::vector<double>{1.0, 1.0});
    CHECK(c.source_count == 2);

    Centroid single = target_centroid(std::span<const SparseCode>(&a, 1));
    CHECK(single.values == std::vector<double>{0.0, 2.0});

    // the mean of k-sparse codes generally has more than k nonzeros
    Rng rng(6);
    std::vector<SparseCode> many;
    for (int i = 0; i < 10; ++i) {
        SparseCode c2;
        c2.dict_size = 16;
        c2.indices = {static_cast<uint32_t>(rng.below(8)), static_cast<uint32_t>(8 + rng.below(8))};
        c2.values = {1.0, 1.0};
        many.push_back(c2);
    }
    Centroid wide = target_centroid(many);
    size_t nonzeros = 0;
    for (double v : wide.values) nonzeros += (v != 0.0);
    CHECK(nonzeros > 2);

    CHECK_THROWS_AS(target_centroid(std::span<const SparseCode>{}), std::invalid_argument);
}

TEST_CASE("clamp arithmetic, identity and full clamp") {
    SparseCode z;
    z.dict_size = 3;
    z.indices = {0, 2};
    z.values = {0.5, 2.0};
    FeatureRanking ranking;
    ranking.order = {2, 0, 1};
    Centroid centroid;
    centroid.values = {1.0, 1.0, 1.0};

    std::vector<double> at0 = clamp(z, ranking, 0.0, centroid);
    CHECK(at0 == std::vector<double>{0.5, 0.0, 2.0});

    std::vector<double> at1 = clamp(z, ranking, 1.0, centroid);
    CHECK(at1 == std::vector<double>{1.0, 1.0, 1.0});

    // f = 0.34 over N = 3 clamps exactly one feature (the first in ranking)
    std::vector<double> part = clamp(z, ranking, 0.34, centroid);
    CHECK(part == std::vector<double>{0.5, 0.0, 1.0});
}

TEST_CASE("clamp extent is nested in f") {
    Rng rng(31);
    SaeModel m = random_unit_model(6, 2, 4, 32);
    SparseCode z;
    z.dict_size = 12;
    z.indices = {1, 4, 7, 9};
    z.values = {1.0, -0.5, 2.0, 0.3};
    FeatureRanking ranking;
    ranking.order.resize(12);
    std::iota(ranking.order.begin(), ranking.order.end(), 0u);
    rng.shuffle(ranking.order);
    Centroid centroid;
    centroid.values.assign(12, 0.0);
    for (auto& v : centroid.values) v = rng.normal();

    std::vector<double> prev_changed;
    for (double f : {0.0, 0.2, 0.4, 0.7, 1.0}) {
        std::vector<double> out = clamp(z, ranking, f, centroid);
        std::vector<double> dense = z.densify();
        std::vector<double> changed;
        for (size_t i = 0; i < 12; ++i) {
            if (out[i] != dense[i]) changed.push_back(static_cast<double>(i));
        }
        // every coordinate changed at a smaller f stays changed at a larger f
        for (double c : prev_changed) {
            bool still = std::find(changed.begin(), changed.end(), c) != changed.end() ||
                         centroid.values[static_cast<size_t>(c)] ==
                             dense[static_cast<size_t>(c)];
            CHECK(still);
        }
        prev_changed = changed;
    }
}

TEST_CASE("decode_intervened at f=0 equals the standard reconstruction bitwise") {
    SaeModel m = random_unit_model(8, 2, 4, 41);
    m.mu.assign(8, 0.3);
    m.sigma.assign(8, 1.7);
    Rng rng(42);
    std::vector<double> a(8);
    for (auto& v : a) v = rng.normal();
    SparseCode z = encode(a, m);
    FeatureRanking ranking;
    ranking.order.resize(16);
    std::iota(ranking.order.begin(), ranking.order.end(), 0u);
    Centroid centroid;
    centroid.values.assign(16, 9.9);

    std::vector<double> zstar = clamp(z, ranking, 0.0, centroid);
    std::vector<double> via_clamp = decode_intervened(zstar, m);
    std::vector<double> via_decode = unstandardize(decode(z, m), m);
    CHECK(via_clamp == via_decode);
}

TEST_CASE("selectivity area on hand-computed curves") {
    std::vector<double> grid = {0.0, 0.5, 1.0};
    std::vector<double> same = {0.7, 0.6, 0.5};
    CHECK(selectivity_area(same, same, grid) == doctest::Approx(0.0));

    std::vector<double> target(3, 0.5), off(3, 0.9);
    CHECK(selectivity_area(target, off, grid) == doctest::Approx(0.4));

    // offtarget = 1 - f, target = 0.5: trapezoid of (0.5 - f) over {0,.5,1} = 0
    std::vector<double> off2 = {1.0, 0.5, 0.0};
    CHECK(selectivity_area(target, off2, grid) == doctest::Approx(0.0));

    std::vector<double> bad_grid = {0.0, 0.6, 0.4};
    CHECK_THROWS_WITH_AS(selectivity_area(target, off, bad_grid), doctest::Contains("ascending"),
                         std::invalid_argument);
}

TEST_CASE("excess selectivity arithmetic") {
    std::vector<double> perms = {0.05, 0.10, 0.00};
    ExcessSelectivity ex = excess_selectivity(0.25, perms);
    CHECK(ex.delta_excess == doctest::Approx(0.20));
    CHECK(ex.std_defined);

    ExcessSelectivity zero = excess_selectivity(0.05, perms);
    CHECK(zero.delta_excess == doctest::Approx(0.0));

    std::vector<double> one = {0.1};
    ExcessSelectivity single = excess_selectivity(0.3, one);
    CHECK(single.delta_excess == doctest::Approx(0.2));
    CHECK(!single.std_defined);

    CHECK_THROWS_AS(excess_selectivity(0.1, {}), std::invalid_argument);
}

TEST_CASE("regime classification thresholds") {
    CHECK(classify_regime(0.65, 0.5) == Regime::weakly_encoded);
    CHECK(classify_regime(0.9, 0.2, 0.7, 0.05) == Regime::steerable);
    CHECK(classify_regime(0.9, 0.0, 0.7, 0.05) == Regime::entangled);
}

TEST_CASE("sweep f=0 point equals the frozen probe's clean-reconstruction AUROC") {
    SyntheticData data = sweep_fixture(50);
    TrainOptions topts;
    topts.steps = 600;
    topts.batch_size = 64;
    topts.k0 = 3;
    topts.seed = 2;
    topts.learning_rate = 5e-3;
    SaeModel model = train_sae(data.set, 2, topts);

    Cav cav_t = fit_cav(data.set, {"target", 1}, {.k_fold = 5});
    Cav cav_o = fit_cav(data.set, {"offtarget", 1}, {.k_fold = 5});

    std::vector<uint32_t> normal_windows = data.set.windows_with_label("target", 0);
    std::vector<uint32_t> pool_tokens = data.set.tokens_of_windows(normal_windows);
    std::vector<SparseCode> pool_codes;
    for (uint32_t t : pool_tokens) pool_codes.push_back(encode(data.set.activations.row(t), model));
    Centroid centroid = target_centroid(pool_codes);

    SweepOptions opts;
    opts.fractions = {0.0, 0.25, 0.5, 0.75, 1.0};
    opts.n_permutations = 3;
    opts.seed = 7;
    SteeringSweepResult result = run_sweep(data.set, model, cav_t, cav_o, centroid, opts);

    // recompute the clean pooled embeddings independently and score the probe
    std::vector<uint32_t> windows(data.set.n_windows());
    std::iota(windows.begin(), windows.end(), 0u);
    Matrix pooled(windows.size(), data.set.dim());
    std::vector<double> counts(windows.size(), 0.0);
    for (size_t t = 0; t < data.set.n_tokens(); ++t) {
        SparseCode code = encode(data.set.activations.row(t), model);
        std::vector<double> dec = decode(code, model);
        axpy(1.0, {dec.data(), dec.size()}, pooled.row(data.set.tokens[t].window_id));
        counts[data.set.tokens[t].window_id] += 1.0;
    }
    std::vector<double> scores(windows.size());
    std::vector<uint8_t> labels(windows.size());
    for (size_t w = 0; w < windows.size(); ++w) {
        std::vector<double> meanv(data.set.dim());
        for (size_t c = 0; c < data.set.dim(); ++c) meanv[c] = pooled.at(w, c) / counts[w];
        std::vector<double> un = unstandardize(meanv, model);
        scores[w] = result.frozen_target.score(un);
        labels[w] = data.set.concept_labels.at("target")[w];
    }
    double clean_auroc = auroc(scores, labels).value();
    CHECK(result.tcav.target_auroc[0] == clean_auroc);
    CHECK(result.auroc0 == clean_auroc);

    // every random curve shares the same f=0 point (clamp is the identity)
    for (const SweepCurves& c : result.random_curves) {
        CHECK(c.target_auroc[0] == result.tcav.target_auroc[0]);
        CHECK(c.offtarget_auroc[0] == result.tcav.offtarget_auroc[0]);
    }
}

TEST_CASE("sweep curves match a naive clamp-decode-pool evaluation") {
    SyntheticData data = sweep_fixture(60);
    TrainOptions topts;
    topts.steps = 400;
    topts.batch_size = 64;
    topts.k0 = 3;
    topts.seed = 3;
    topts.learning_rate = 5e-3;
    SaeModel model = train_sae(data.set, 2, topts);

    Cav cav_t = fit_cav(data.set, {"target", 1}, {.k_fold = 5});
    Cav cav_o = fit_cav(data.set, {"offtarget", 1}, {.k_fold = 5});
    std::vector<SparseCode> all_codes;
    for (size_t t = 0; t < data.set.n_tokens(); ++t) {
        all_codes.push_back(encode(data.set.activations.row(t), model));
    }
    std::vector<uint32_t> normal_windows = data.set.windows_with_label("target", 0);
    std::vector<SparseCode> pool_codes;
    for (uint32_t t : data.set.tokens_of_windows(normal_windows)) pool_codes.push_back(all_codes[t]);
    Centroid centroid = target_centroid(pool_codes);

    SweepOptions opts;
    opts.fractions = {0.0, 0.3, 0.7, 1.0};
    opts.n_permutations = 0;
    opts.seed = 11;
    SteeringSweepResult result = run_sweep(data.set, model, cav_t, cav_o, centroid, opts);

    // independent route: naive per-fraction clamp of every token
    for (size_t j = 0; j < opts.fractions.size(); ++j) {
        Matrix sums(data.set.n_windows(), data.set.dim());
        std::vector<double> counts(data.set.n_windows(), 0.0);
        for (size_t t = 0; t < data.set.n_tokens(); ++t) {
            std::vector<double> zstar = clamp(all_codes[t], result.ranking, opts.fractions[j], centroid);
            std::vector<double> emb = decode_intervened(zstar, model);
            axpy(1.0, {emb.data(), emb.size()}, sums.row(data.set.tokens[t].window_id));
            counts[data.set.tokens[t].window_id] += 1.0;
        }
        std::vector<double> ts(data.set.n_windows()), os(data.set.n_windows());
        std::vector<uint8_t> tl(data.set.n_windows()), ol(data.set.n_windows());
        for (size_t w = 0; w < data.set.n_windows(); ++w) {
            std::vector<double> meanv(data.set.dim());
            for (size_t c = 0; c < data.set.dim(); ++c) meanv[c] = sums.at(w, c) / counts[w];
            ts[w] = result.frozen_target.score(meanv);
            os[w] = result.frozen_offtarget.score(meanv);
            tl[w] = data.set.concept_labels.at("target")[w];
            ol[w] = data.set.concept_labels.at("offtarget")[w];
        }
        CHECK(result.tcav.target_auroc[j] == doctest::Approx(auroc(ts, tl).value()).epsilon(1e-9));
        CHECK(result.tcav.offtarget_auroc[j] ==
              doctest::Approx(auroc(os, ol).value()).epsilon(1e-9));
    }
}

TEST_CASE("random rankings have zero excess selectivity in expectation") {
    SyntheticData data = sweep_fixture(70);
    TrainOptions topts;
    topts.steps = 300;
    topts.batch_size = 64;
    topts.k0 = 3;
    topts.seed = 5;
    topts.learning_rate = 5e-3;
    SaeModel model = train_sae(data.set, 2, topts);

    Cav cav_t = fit_cav(data.set, {"target", 1}, {.k_fold = 5});
    Cav cav_o = fit_cav(data.set, {"offtarget", 1}, {.k_fold = 5});
    std::vector<uint32_t> normal_windows = data.set.windows_with_label("target", 0);
    std::vector<SparseCode> pool_codes;
    for (uint32_t t : data.set.tokens_of_windows(normal_windows)) {
        pool_codes.push_back(encode(data.set.activations.row(t), model));
    }
    Centroid centroid = target_centroid(pool_codes);

    SweepOptions opts;
    opts.fractions = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
    opts.n_permutations = 50;
    opts.seed = 13;
    SteeringSweepResult result = run_sweep(data.set, model, cav_t, cav_o, centroid, opts);

    // Split the permutation deltas: each of the first 25 acts as "the
    // ranking", baselined against the mean of the last 25. Exchangeability
    // puts the mean of these excesses at 0.
    std::span<const double> deltas(result.random_deltas);
    double baseline = mean(deltas.subspan(25));
    std::vector<double> excess;
    for (size_t i = 0; i < 25; ++i) excess.push_back(deltas[i] - baseline);
    double m = mean(excess);
    double se = std::sqrt(variance(excess, 1) / 25.0);
    CHECK(std::fabs(m) <= 2.0 * se + 1e-9);
}
