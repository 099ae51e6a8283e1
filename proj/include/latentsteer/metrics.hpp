#pragma once

#include <cstdint>
#include <optional>
#include <span>

namespace latentsteer {

// Pair-counting AUROC with ties counted 1/2 (computed via midranks, which is
// algebraically the same). Returns nullopt when only one class is present.
std::optional<double> auroc(std::span<const double> scores, std::span<const uint8_t> labels);

// Mean of per-class recalls.
double balanced_accuracy(std::span<const uint8_t> pred, std::span<const uint8_t> labels);

// Harmonic mean of precision and recall on the positive class; 0 when the
// denominator is empty.
double f1_score(std::span<const uint8_t> pred, std::span<const uint8_t> labels);

struct BootstrapCi {
    double lo = 0.0;
    double hi = 0.0;
};

// Percentile bootstrap of the sample mean; deterministic under seed.
BootstrapCi bootstrap_ci(std::span<const double> samples, double level = 0.95,
                         int n_resamples = 1000, uint64_t seed = 0);

}  // namespace latentsteer
