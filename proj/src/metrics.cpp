#include "latentsteer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "latentsteer/rng.hpp"

namespace latentsteer {

std::optional<double> auroc(std::span<const double> scores, std::span<const uint8_t> labels) {
    if (scores.size() != labels.size()) {
        throw std::invalid_argument("auroc: scores and labels differ in length");
    }
    const size_t n = scores.size();
    size_t n_pos = 0;
    for (uint8_t l : labels) n_pos += (l != 0);
    size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // Midrank sum over positives; ties inside a block share the average rank,
    // which counts tied positive/negative pairs as 1/2.
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        double midrank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
        for (size_t t = i; t < j; ++t) {
            if (labels[order[t]] != 0) rank_sum_pos += midrank;
        }
        i = j;
    }
    double u = rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double balanced_accuracy(std::span<const uint8_t> pred, std::span<const uint8_t> labels) {
    if (pred.size() != labels.size()) {
        throw std::invalid_argument("balanced_accuracy: length mismatch");
    }
    size_t tp = 0, fn = 0, tn = 0, fp = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (labels[i]) {
            (pred[i] ? tp : fn)++;
        } else {
            (pred[i] ? fp : tn)++;
        }
    }
    double recalls = 0.0;
    int classes = 0;
    if (tp + fn > 0) {
        recalls += static_cast<double>(tp) / static_cast<double>(tp + fn);
        ++classes;
    }
    if (tn + fp > 0) {
        recalls += static_cast<double>(tn) / static_cast<double>(tn + fp);
        ++classes;
    }
    return classes ? recalls / classes : 0.0;
}

double f1_score(std::span<const uint8_t> pred, std::span<const uint8_t> labels) {
    if (pred.size() != labels.size()) {
        throw std::invalid_argument("f1_score: length mismatch");
    }
    size_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] && labels[i]) ++tp;
        if (pred[i] && !labels[i]) ++fp;
        if (!pred[i] && labels[i]) ++fn;
    }
    double denom = 2.0 * tp + fp + fn;
    return denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
}

namespace {
double quantile_sorted(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) return 0.0;
    double h = p * static_cast<double>(sorted.size() - 1);
    size_t lo = static_cast<size_t>(h);
    size_t hi = std::min(lo + 1, sorted.size() - 1);
    double frac = h - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}
}  // namespace

BootstrapCi bootstrap_ci(std::span<const double> samples, double level, int n_resamples,
                         uint64_t seed) {
    if (samples.empty()) throw std::invalid_argument("bootstrap_ci: empty sample");
    if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("bootstrap_ci: bad level");
    Rng rng(seed);
    const size_t n = samples.size();
    std::vector<double> means(static_cast<size_t>(n_resamples));
    for (int r = 0; r < n_resamples; ++r) {
        double s = 0.0;
        for (size_t i = 0; i < n; ++i) s += samples[rng.below(n)];
        means[static_cast<size_t>(r)] = s / static_cast<double>(n);
    }
    std::sort(means.begin(), means.end());
    double alpha = (1.0 - level) / 2.0;
    return {quantile_sorted(means, alpha), quantile_sorted(means, 1.0 - alpha)};
}

}  // namespace latentsteer
