#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "latentsteer/concepts.hpp"
#include "latentsteer/rng.hpp"

using namespace latentsteer;

namespace {

// 1-sparse codes whose single value produces a chosen sensitivity under the
// probe (weights = {1}, bias = 0).
std::vector<SparseCode> codes_from_sensitivities(const std::vector<double>& sens) {
    std::vector<SparseCode> out;
    for (double v : sens) {
        SparseCode c;
        c.dict_size = 1;
        c.indices = {0};
        c.values = {v};
        out.push_back(c);
    }
    return out;
}

SaeProbe identity_probe() {
    SaeProbe p;
    p.weights = {1.0};
    p.bias = 0.0;
    return p;
}

std::vector<SparseCode> random_codes(size_t n, uint32_t dict, uint32_t k, Rng& rng) {
    std::vector<SparseCode> out(n);
    for (auto& c : out) {
        c.dict_size = dict;
        std::vector<uint32_t> ids(dict);
        for (uint32_t i = 0; i < dict; ++i) ids[i] = i;
        rng.shuffle(ids);
        ids.resize(k);
        std::sort(ids.begin(), ids.end());
        c.indices = ids;
        c.values.resize(k);
        for (auto& v : c.values) v = rng.normal();
    }
    return out;
}

}  // namespace

TEST_CASE("cav recovers the separating axis on linearly separable data") {
    Rng rng(3);
    Matrix x(400, 2);
    std::vector<uint8_t> labels(400);
    for (size_t i = 0; i < 400; ++i) {
        double cls = (i % 2 == 0) ? 1.0 : -1.0;
        x.at(i, 0) = cls * (1.0 + std::fabs(rng.normal()));
        x.at(i, 1) = rng.normal();
        labels[i] = cls > 0 ? 1 : 0;
    }
    Cav cav = fit_cav_rows(x, labels, {"axis", 1});
    CHECK(std::fabs(cav.direction[0]) > 0.99);
    CHECK(std::fabs(norm2(cav.direction) - 1.0) <= 1e-6);
    CHECK(cav.fold_accuracy.size() == 10);
    for (double acc : cav.fold_accuracy) CHECK(acc > 0.95);
}

TEST_CASE("cav fold accuracy is at chance under random labels") {
    double grand = 0.0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(100 + seed);
        Matrix x(400, 4);
        std::vector<uint8_t> labels(400);
        for (size_t i = 0; i < 400; ++i) {
            for (size_t j = 0; j < 4; ++j) x.at(i, j) = rng.normal();
            labels[i] = static_cast<uint8_t>(i % 2);  // balanced, independent of x
        }
        Cav cav = fit_cav_rows(x, labels, {"null", 1});
        double acc = mean(cav.fold_accuracy);
        CHECK(acc > 0.3);
        CHECK(acc < 0.7);
        grand += acc / 20.0;
    }
    CHECK(grand > 0.4);
    CHECK(grand < 0.6);
}

TEST_CASE("cav requires both classes") {
    Matrix x(40, 2);
    std::vector<uint8_t> labels(40, 1);
    CHECK_THROWS_WITH_AS(fit_cav_rows(x, labels, {"solo", 1}), doctest::Contains("single-class"),
                         std::invalid_argument);
}

TEST_CASE("sae probe puts its largest weight on the label-aligned feature") {
    Rng rng(5);
    std::vector<SparseCode> codes;
    std::vector<uint8_t> labels;
    for (int i = 0; i < 300; ++i) {
        uint8_t y = static_cast<uint8_t>(i % 2);
        SparseCode c;
        c.dict_size = 12;
        // feature 7 fires iff label = 1; a decoy feature fires either way
        if (y) {
            c.indices = {7, 9};
            c.values = {1.0 + 0.1 * rng.normal(), rng.normal()};
        } else {
            c.indices = {3, 9};
            c.values = {1.0 + 0.1 * rng.normal(), rng.normal()};
        }
        codes.push_back(c);
        labels.push_back(y);
    }
    SaeProbe probe = fit_sae_probe(codes, labels, {"planted", 1});
    size_t argmax = 0;
    for (size_t j = 1; j < probe.weights.size(); ++j) {
        if (std::fabs(probe.weights[j]) > std::fabs(probe.weights[argmax])) argmax = j;
    }
    CHECK((argmax == 7 || argmax == 3));  // either direction of the same split
    CHECK(std::fabs(probe.weights[7] - probe.weights[3]) >
          5.0 * std::fabs(probe.weights[9]));
}

TEST_CASE("all-zero codes are a degenerate probe input") {
    std::vector<SparseCode> codes(40);
    std::vector<uint8_t> labels(40);
    for (size_t i = 0; i < 40; ++i) {
        codes[i].dict_size = 4;
        codes[i].indices = {0};
        codes[i].values = {0.0};
        labels[i] = static_cast<uint8_t>(i % 2);
    }
    CHECK_THROWS_WITH_AS(fit_sae_probe(codes, labels, {"zero", 1}),
                         doctest::Contains("degenerate probe input"), std::invalid_argument);
}

TEST_CASE("probe sensitivity is affine in the code") {
    SaeProbe probe;
    probe.weights = {0.5, -2.0, 1.0};
    probe.bias = 0.7;
    SparseCode z;
    z.dict_size = 3;
    z.indices = {0, 2};
    z.values = {2.0, -1.0};
    SparseCode az = z;
    for (auto& v : az.values) v *= 3.0;
    double s = probe.sensitivity(z) - probe.bias;
    double sa = probe.sensitivity(az) - probe.bias;
    CHECK(sa == doctest::Approx(3.0 * s));
}

TEST_CASE("tcav score counts positive sensitivities") {
    auto codes = codes_from_sensitivities({0.5, -0.2, 0.1, 0.3});
    CHECK(tcav_score(identity_probe(), codes) == doctest::Approx(0.75));
    auto all_pos = codes_from_sensitivities({0.5, 0.2, 0.1});
    CHECK(tcav_score(identity_probe(), all_pos) == doctest::Approx(1.0));
    // zero sensitivity counts as not positive
    auto with_zero = codes_from_sensitivities({0.0, 1.0});
    CHECK(tcav_score(identity_probe(), with_zero) == doctest::Approx(0.5));
    CHECK_THROWS_AS(tcav_score(identity_probe(), std::span<const SparseCode>{}),
                    std::invalid_argument);
}

TEST_CASE("null probe scores about half of random examples positive") {
    int in_range = 0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(500 + seed);
        auto codes = random_codes(1000, 16, 4, rng);
        SaeProbe null_probe;
        null_probe.weights.resize(16);
        for (auto& w : null_probe.weights) w = rng.normal();
        null_probe.bias = 0.0;
        double score = tcav_score(null_probe, codes);
        if (score >= 0.45 && score <= 0.55) ++in_range;
    }
    CHECK(in_range >= 19);
}

TEST_CASE("tcav significance behaviors") {
    Rng rng(7);
    std::vector<double> nulls(50);
    for (auto& v : nulls) v = 0.5 + 0.02 * rng.normal();

    double null_mean = mean(nulls);
    TcavSignificance at_mean = tcav_significance(null_mean, nulls);
    CHECK(at_mean.p.value() > 0.9);

    double above_max = *std::max_element(nulls.begin(), nulls.end()) + 0.01;
    TcavSignificance above = tcav_significance(above_max, nulls);
    CHECK(above.quantile == doctest::Approx(1.0));

    TcavSignificance strong = tcav_significance(0.9, nulls);
    CHECK(strong.p.value() < 0.001);

    std::vector<double> degenerate(10, 0.5);
    TcavSignificance flat = tcav_significance(0.7, degenerate);
    CHECK(!flat.p.has_value());
    CHECK(flat.quantile == doctest::Approx(1.0));
}

TEST_CASE("enrichment: equal class means give p=0.5, planted features pass BH") {
    Rng rng(9);
    std::vector<SparseCode> codes;
    std::vector<uint8_t> labels;
    for (int i = 0; i < 200; ++i) {
        uint8_t y = static_cast<uint8_t>(i % 2);
        SparseCode c;
        c.dict_size = 8;
        // feature 2: fires 1.0 on positives, 0.0 on negatives (tiny noise)
        // feature 5: identical in both classes
        c.indices = {2, 5};
        c.values = {y ? 1.0 + 0.01 * rng.normal() : 0.0, 0.7};
        codes.push_back(c);
        labels.push_back(y);
    }
    EnrichmentResult result = enrichment_test(codes, labels, 8);
    CHECK(result.p_values[5] == doctest::Approx(0.5));
    CHECK(std::find(result.enriched.begin(), result.enriched.end(), 5u) == result.enriched.end());
    CHECK(std::find(result.enriched.begin(), result.enriched.end(), 2u) != result.enriched.end());
    CHECK(result.z_scores[2] > 10.0);
    // a feature that never fires has zero variance: the documented convention
    CHECK(result.z_scores[0] == 0.0);
    CHECK(result.p_values[0] == doctest::Approx(0.5));
}

TEST_CASE("taxonomy classification rules") {
    EnrichmentResult abnormality;
    abnormality.enriched = {0, 1};
    EnrichmentResult age;
    age.enriched = {1, 2};
    std::map<std::string, EnrichmentResult> per_concept = {{"abnormality", abnormality},
                                                           {"age_group", age}};
    // feature 3: enriched nowhere; feature 2: enriched for age only but never fires
    std::vector<double> rates = {0.5, 0.5, 0.0, 0.5};
    TaxonomySummary tax = classify_taxonomy(per_concept, rates, 1e-5);
    CHECK(tax.per_feature_class[0] == FeatureClass::separable);
    CHECK(tax.per_feature_class[1] == FeatureClass::entangled);
    CHECK(tax.per_feature_class[2] == FeatureClass::dead);  // dead wins over enrichment
    CHECK(tax.per_feature_class[3] == FeatureClass::dead);
    CHECK(tax.separable_frac + tax.entangled_frac + tax.dead_frac + tax.unlabeled_frac ==
          doctest::Approx(1.0).epsilon(1e-12));
    CHECK(tax.separable_frac == doctest::Approx(0.25));
}

TEST_CASE("operating point selection, constraint and tie-breaks") {
    TaxonomySummary weak;
    weak.separable_frac = 0.2;
    weak.dead_frac = 0.1;
    TaxonomySummary strong;
    strong.separable_frac = 0.5;
    strong.dead_frac = 0.1;

    std::map<std::pair<int, int>, TaxonomySummary> grid = {{{1, 1}, weak}, {{2, 8}, strong}};
    std::map<std::pair<int, std::string>, double> sig = {
        {{1, "abnormality"}, 0.01}, {{2, "abnormality"}, 0.01}};

    OperatingPoint op = select_operating_point(grid, sig);
    CHECK(op.layer == 2);
    CHECK(op.expansion == 8);
    CHECK(op.score == doctest::Approx(0.4));

    // best-scoring layer failing significance falls back to the next cell
    sig[{2, "abnormality"}] = 0.2;
    op = select_operating_point(grid, sig);
    CHECK(op.layer == 1);
    CHECK(op.expansion == 1);

    // exact tie between (2,4) and (2,8) resolves to the smaller expansion
    sig[{2, "abnormality"}] = 0.01;
    grid[{2, 4}] = strong;
    op = select_operating_point(grid, sig);
    CHECK(op.layer == 2);
    CHECK(op.expansion == 4);

    // no passing layer: the error names the failing concepts
    sig[{1, "abnormality"}] = 0.9;
    sig[{2, "abnormality"}] = 0.9;
    CHECK_THROWS_WITH_AS(select_operating_point(grid, sig), doctest::Contains("abnormality"),
                         std::runtime_error);
}

TEST_CASE("null tcav scores from permuted labels center at one half") {
    Rng rng(77);
    auto codes = random_codes(400, 12, 3, rng);
    std::vector<uint8_t> labels(400);
    for (size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<uint8_t>(i % 2);
    NullScoreOptions opts;
    opts.n_rand = 20;
    opts.seed = 4;
    std::vector<double> nulls = tcav_null_scores(codes, labels, opts);
    REQUIRE(nulls.size() == 20);
    double m = mean(nulls);
    CHECK(m > 0.35);
    CHECK(m < 0.65);
}
