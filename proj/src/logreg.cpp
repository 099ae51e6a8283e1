#include "latentsteer/logreg.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace latentsteer {

double LogisticModel::score(std::span<const double> x) const {
    double s = bias;
    for (size_t i = 0; i < weights.size(); ++i) s += weights[i] * x[i];
    return s;
}

namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// In-place Cholesky solve of the SPD system a * x = b (a is n x n row-major).
void solve_spd(std::vector<double>& a, std::vector<double>& b, size_t n) {
    for (size_t j = 0; j < n; ++j) {
        double diag = a[j * n + j];
        for (size_t k = 0; k < j; ++k) diag -= a[j * n + k] * a[j * n + k];
        if (diag <= 0.0) diag = 1e-12;
        diag = std::sqrt(diag);
        a[j * n + j] = diag;
        for (size_t i = j + 1; i < n; ++i) {
            double s = a[i * n + j];
            for (size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
            a[i * n + j] = s / diag;
        }
    }
    for (size_t i = 0; i < n; ++i) {  // forward
        double s = b[i];
        for (size_t k = 0; k < i; ++k) s -= a[i * n + k] * b[k];
        b[i] = s / a[i * n + i];
    }
    for (size_t i = n; i-- > 0;) {  // backward
        double s = b[i];
        for (size_t k = i + 1; k < n; ++k) s -= a[k * n + i] * b[k];
        b[i] = s / a[i * n + i];
    }
}

// Shared IRLS core; `row` yields (indices, values) for one example. Dense
// callers pass nullptr indices with a full value span.
struct RowAccess {
    bool dense = false;
    std::span<const uint32_t> indices;
    std::span<const double> values;
};

LogisticModel irls(size_t dim, size_t n_rows, const std::function<RowAccess(size_t)>& row,
                   std::span<const uint8_t> labels, const LogregOptions& opts) {
    if (n_rows == 0) throw std::invalid_argument("logistic fit: no examples");
    if (labels.size() != n_rows) throw std::invalid_argument("logistic fit: label length mismatch");

    const size_t p = dim + 1;  // bias last
    std::vector<double> theta(p, 0.0);
    std::vector<double> scores(n_rows, 0.0);
    LogisticModel model;
    model.weights.assign(dim, 0.0);

    std::vector<double> grad(p), hess(p * p);
    for (int iter = 0; iter < opts.max_iter; ++iter) {
        std::fill(grad.begin(), grad.end(), 0.0);
        std::fill(hess.begin(), hess.end(), 0.0);
        for (size_t r = 0; r < n_rows; ++r) {
            RowAccess ra = row(r);
            double s = theta[dim];
            if (ra.dense) {
                for (size_t j = 0; j < dim; ++j) s += theta[j] * ra.values[j];
            } else {
                for (size_t j = 0; j < ra.indices.size(); ++j) s += theta[ra.indices[j]] * ra.values[j];
            }
            scores[r] = s;
            double prob = sigmoid(s);
            double resid = prob - (labels[r] ? 1.0 : 0.0);
            double w = std::max(prob * (1.0 - prob), 1e-10);
            if (ra.dense) {
                for (size_t j = 0; j < dim; ++j) {
                    double vj = ra.values[j];
                    grad[j] += resid * vj;
                    double wj = w * vj;
                    for (size_t k = 0; k <= j; ++k) hess[j * p + k] += wj * ra.values[k];
                    hess[dim * p + j] += wj;  // bias row (lower triangle)
                }
            } else {
                for (size_t j = 0; j < ra.indices.size(); ++j) {
                    uint32_t cj = ra.indices[j];
                    double vj = ra.values[j];
                    grad[cj] += resid * vj;
                    double wj = w * vj;
                    for (size_t k = 0; k < ra.indices.size(); ++k) {
                        uint32_t ck = ra.indices[k];
                        if (ck <= cj) hess[cj * p + ck] += wj * ra.values[k];
                    }
                    hess[dim * p + cj] += wj;  // bias row (lower triangle)
                }
            }
            grad[dim] += resid;
            hess[dim * p + dim] += w;
        }
        // ridge on weights only
        for (size_t j = 0; j < dim; ++j) {
            grad[j] += opts.l2 * theta[j];
            hess[j * p + j] += opts.l2;
        }
        // small diagonal floor keeps never-touched coordinates solvable
        for (size_t j = 0; j < p; ++j) hess[j * p + j] += 1e-12;

        double gmax = 0.0;
        for (double g : grad) gmax = std::max(gmax, std::fabs(g));
        model.iterations = iter;
        if (gmax <= opts.tol) {
            model.converged = true;
            break;
        }
        // mirror lower triangle, solve, and take the Newton step
        for (size_t j = 0; j < p; ++j) {
            for (size_t k = j + 1; k < p; ++k) hess[j * p + k] = hess[k * p + j];
        }
        std::vector<double> step = grad;
        solve_spd(hess, step, p);
        for (size_t j = 0; j < p; ++j) theta[j] -= step[j];
    }
    std::copy(theta.begin(), theta.begin() + static_cast<long>(dim), model.weights.begin());
    model.bias = theta[dim];
    return model;
}

}  // namespace

LogisticModel fit_logistic(const Matrix& x, std::span<const uint8_t> labels,
                           const LogregOptions& opts) {
    return irls(x.cols, x.rows,
                [&](size_t r) { return RowAccess{true, {}, x.row(r)}; }, labels, opts);
}

LogisticModel fit_logistic_sparse(std::span<const SparseRowView> rows, size_t dim,
                                  std::span<const uint8_t> labels, const LogregOptions& opts) {
    return irls(dim, rows.size(),
                [&](size_t r) { return RowAccess{false, rows[r].indices, rows[r].values}; },
                labels, opts);
}

}  // namespace latentsteer
