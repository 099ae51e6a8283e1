#pragma once

#include <cmath>
#include <span>
#include <vector>

namespace latentsteer {

// Momentum-free second-moment adaptive step, bias-corrected. Set `step`
// before each apply() round.
struct AdaState {
    std::vector<double> v;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;

    explicit AdaState(size_t n) : v(n, 0.0) {}

    void apply(std::span<double> params, std::span<const double> grads, double lr) {
        double correction = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (size_t i = 0; i < params.size(); ++i) {
            v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
            params[i] -= lr * grads[i] / (std::sqrt(v[i] / correction) + eps);
        }
    }
};

}  // namespace latentsteer
