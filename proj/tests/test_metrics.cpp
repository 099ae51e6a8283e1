#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "latentsteer/logreg.hpp"
#include "latentsteer/metrics.hpp"
#include "latentsteer/rng.hpp"
#include "latentsteer/stats.hpp"

using namespace latentsteer;

namespace {

// Brute-force pair counter; the independent oracle for the midrank AUROC.
double auroc_bruteforce(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
    double won = 0.0;
    size_t pairs = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            ++pairs;
            if (scores[i] > scores[j]) won += 1.0;
            else if (scores[i] == scores[j]) won += 0.5;
        }
    }
    return won / static_cast<double>(pairs);
}

// Independent BH step-up used to cross-check the library implementation.
std::vector<size_t> bh_reference(const std::vector<double>& p, double q) {
    std::vector<std::pair<double, size_t>> sorted;
    for (size_t i = 0; i < p.size(); ++i) sorted.push_back({p[i], i});
    std::sort(sorted.begin(), sorted.end());
    size_t last = 0;
    bool any = false;
    for (size_t i = 0; i < sorted.size(); ++i) {
        if (sorted[i].first <= q * double(i + 1) / double(sorted.size())) {
            last = i;
            any = true;
        }
    }
    std::vector<size_t> out;
    if (any) {
        for (size_t i = 0; i <= last; ++i) out.push_back(sorted[i].second);
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

TEST_CASE("auroc perfect separation") {
    std::vector<double> scores = {0.9, 0.8, 0.3, 0.1};
    std::vector<uint8_t> labels = {1, 1, 0, 0};
    CHECK(auroc(scores, labels).value() == doctest::Approx(1.0));
}

TEST_CASE("auroc half from exhaustive pair count") {
    // pos scores {0.9, 0.35}, neg {0.4, 0.6}: 2 of 4 pairs correctly ordered
    std::vector<double> scores = {0.9, 0.4, 0.35, 0.6};
    std::vector<uint8_t> labels = {1, 0, 1, 0};
    CHECK(auroc(scores, labels).value() == doctest::Approx(0.5));
}

TEST_CASE("auroc matches brute force on random data with ties") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        size_t n = 5 + rng.below(40);
        std::vector<double> scores(n);
        std::vector<uint8_t> labels(n);
        bool has0 = false, has1 = false;
        for (size_t i = 0; i < n; ++i) {
            scores[i] = static_cast<double>(rng.below(6)) / 5.0;  // forces ties
            labels[i] = static_cast<uint8_t>(rng.coin());
            (labels[i] ? has1 : has0) = true;
        }
        if (!has0 || !has1) continue;
        CHECK(auroc(scores, labels).value() ==
              doctest::Approx(auroc_bruteforce(scores, labels)).epsilon(1e-12));
    }
}

TEST_CASE("auroc single class is flagged undefined") {
    std::vector<double> scores = {0.1, 0.2};
    std::vector<uint8_t> labels = {1, 1};
    CHECK(!auroc(scores, labels).has_value());
}

TEST_CASE("auroc invariant under strictly monotone transforms") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        size_t n = 20;
        std::vector<double> scores(n), transformed(n);
        std::vector<uint8_t> labels(n);
        for (size_t i = 0; i < n; ++i) {
            scores[i] = rng.normal();
            transformed[i] = std::exp(0.5 * scores[i]) + 3.0;
            labels[i] = static_cast<uint8_t>(i % 2);
        }
        CHECK(auroc(scores, labels).value() ==
              doctest::Approx(auroc(transformed, labels).value()).epsilon(1e-12));
    }
}

TEST_CASE("balanced accuracy and f1 on identical predictions") {
    std::vector<uint8_t> labels = {1, 0, 1, 0, 1};
    CHECK(balanced_accuracy(labels, labels) == doctest::Approx(1.0));
    CHECK(f1_score(labels, labels) == doctest::Approx(1.0));
}

TEST_CASE("balanced accuracy hand-computed") {
    // recalls: pos 1/2, neg 2/2 -> 0.75
    std::vector<uint8_t> pred = {1, 0, 0, 0};
    std::vector<uint8_t> labels = {1, 1, 0, 0};
    CHECK(balanced_accuracy(pred, labels) == doctest::Approx(0.75));
    // precision 1, recall 1/2 -> f1 = 2/3
    CHECK(f1_score(pred, labels) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("bootstrap of a constant sample collapses to the constant") {
    std::vector<double> samples(32, 2.5);
    BootstrapCi ci = bootstrap_ci(samples, 0.95, 200, 1);
    CHECK(ci.lo == doctest::Approx(2.5));
    CHECK(ci.hi == doctest::Approx(2.5));
}

TEST_CASE("bootstrap interval of a balanced 0/1 sample contains 0.5") {
    std::vector<double> samples;
    for (int i = 0; i < 500; ++i) {
        samples.push_back(0.0);
        samples.push_back(1.0);
    }
    BootstrapCi ci = bootstrap_ci(samples, 0.95, 500, 2);
    CHECK(ci.lo < 0.5);
    CHECK(ci.hi > 0.5);
}

TEST_CASE("bootstrap width shrinks with sample size") {
    Rng rng(3);
    std::vector<double> small(1000), large(4000);
    for (auto& v : small) v = rng.normal();
    for (auto& v : large) v = rng.normal();
    BootstrapCi ci_small = bootstrap_ci(small, 0.95, 600, 4);
    BootstrapCi ci_large = bootstrap_ci(large, 0.95, 600, 5);
    CHECK(ci_large.hi - ci_large.lo < ci_small.hi - ci_small.lo);
}

TEST_CASE("bootstrap deterministic under seed") {
    std::vector<double> samples = {1.0, 2.0, 5.0, 3.0, 2.0};
    BootstrapCi a = bootstrap_ci(samples, 0.95, 300, 42);
    BootstrapCi b = bootstrap_ci(samples, 0.95, 300, 42);
    CHECK(a.lo == b.lo);
    CHECK(a.hi == b.hi);
}

TEST_CASE("benjamini-hochberg hand-computed example") {
    // thresholds 0.0125/0.025/0.0375/0.05; only p=0.01 clears its threshold
    std::vector<double> p = {0.01, 0.03, 0.04, 0.20};
    auto rejected = benjamini_hochberg(p, 0.05);
    REQUIRE(rejected.size() == 1);
    CHECK(rejected[0] == 0);
}

TEST_CASE("benjamini-hochberg matches an independent step-up on random lists") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        size_t m = 1 + rng.below(30);
        std::vector<double> p(m);
        for (auto& v : p) v = rng.uniform();
        // sprinkle small p-values so rejections actually happen
        if (m > 2) p[rng.below(m)] *= 0.01;
        CHECK(benjamini_hochberg(p, 0.05) == bh_reference(p, 0.05));
        CHECK(benjamini_hochberg(p, 0.2) == bh_reference(p, 0.2));
    }
}

TEST_CASE("benjamini-hochberg monotone in q") {
    Rng rng(23);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<double> p(20);
        for (auto& v : p) v = rng.uniform() * 0.3;
        auto strict = benjamini_hochberg(p, 0.02);
        auto loose = benjamini_hochberg(p, 0.05);
        for (size_t idx : strict) {
            CHECK(std::find(loose.begin(), loose.end(), idx) != loose.end());
        }
    }
}

TEST_CASE("normal cdf and t-test reference values") {
    CHECK(normal_cdf(0.0) == doctest::Approx(0.5));
    CHECK(normal_cdf(1.96) == doctest::Approx(0.9750021).epsilon(1e-5));
    CHECK(student_t_two_sided_p(0.0, 10.0) == doctest::Approx(1.0));
    // standard table value: P(|T_10| > 2.0) = 0.0734
    CHECK(student_t_two_sided_p(2.0, 10.0) == doctest::Approx(0.0734).epsilon(2e-3));
    // t -> inf: p -> 0
    CHECK(student_t_two_sided_p(50.0, 5.0) < 1e-5);
}

TEST_CASE("logistic regression recovers a separating axis") {
    Rng rng(5);
    Matrix x(200, 2);
    std::vector<uint8_t> y(200);
    for (size_t i = 0; i < 200; ++i) {
        double cls = (i % 2 == 0) ? 1.0 : -1.0;
        x.at(i, 0) = cls * (1.0 + 0.2 * std::fabs(rng.normal()));
        x.at(i, 1) = rng.normal();
        y[i] = (cls > 0) ? 1 : 0;
    }
    LogisticModel m = fit_logistic(x, y);
    CHECK(m.weights[0] > 0.0);
    CHECK(std::fabs(m.weights[0]) > 5.0 * std::fabs(m.weights[1]));
    size_t correct = 0;
    for (size_t i = 0; i < 200; ++i) correct += ((m.score(x.row(i)) > 0) == (y[i] != 0));
    CHECK(correct == 200);
}

TEST_CASE("sparse and dense logistic fits agree") {
    Rng rng(9);
    const size_t n = 120, dim = 6;
    Matrix x(n, dim);
    std::vector<uint8_t> y(n);
    std::vector<std::vector<uint32_t>> idx(n);
    std::vector<std::vector<double>> val(n);
    for (size_t i = 0; i < n; ++i) {
        y[i] = static_cast<uint8_t>(rng.coin());
        for (size_t j = 0; j < dim; ++j) {
            if (rng.uniform() < 0.5) {
                double v = rng.normal() + (y[i] ? 0.5 : -0.5);
                x.at(i, j) = v;
                idx[i].push_back(static_cast<uint32_t>(j));
                val[i].push_back(v);
            }
        }
    }
    std::vector<SparseRowView> rows(n);
    for (size_t i = 0; i < n; ++i) rows[i] = {idx[i], val[i]};
    LogisticModel dense = fit_logistic(x, y);
    LogisticModel sparse = fit_logistic_sparse(rows, dim, y);
    for (size_t j = 0; j < dim; ++j) {
        CHECK(dense.weights[j] == doctest::Approx(sparse.weights[j]).epsilon(1e-6));
    }
    CHECK(dense.bias == doctest::Approx(sparse.bias).epsilon(1e-6));
}
