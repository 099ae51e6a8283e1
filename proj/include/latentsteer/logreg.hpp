#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "latentsteer/matrix.hpp"

namespace latentsteer {

struct LogisticModel {
    std::vector<double> weights;
    double bias = 0.0;
    int iterations = 0;
    bool converged = false;

    double score(std::span<const double> x) const;
};

struct LogregOptions {
    double l2 = 1.0;      // ridge penalty on weights (bias unpenalized)
    int max_iter = 100;
    double tol = 1e-8;    // max-norm of the gradient
};

// L2-regularized logistic regression fit by iteratively reweighted least
// squares (Newton steps solved with a Cholesky factorization). Deterministic.
LogisticModel fit_logistic(const Matrix& x, std::span<const uint8_t> labels,
                           const LogregOptions& opts = {});

// Sparse rows over a fixed dimension; absent coordinates are zero.
struct SparseRowView {
    std::span<const uint32_t> indices;
    std::span<const double> values;
};

LogisticModel fit_logistic_sparse(std::span<const SparseRowView> rows, size_t dim,
                                  std::span<const uint8_t> labels,
                                  const LogregOptions& opts = {});

}  // namespace latentsteer
