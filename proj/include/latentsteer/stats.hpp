#pragma once

#include <cstddef>
#include <vector>

namespace latentsteer {

double normal_cdf(double z);

// Regularized incomplete beta function I_x(a, b).
double incomplete_beta(double a, double b, double x);

// Two-sided p-value for a t statistic with df degrees of freedom.
double student_t_two_sided_p(double t, double df);

// Benjamini-Hochberg step-up: returns the indices (into p_values) rejected
// at false-discovery rate q, treating the list as m simultaneous hypotheses.
std::vector<size_t> benjamini_hochberg(const std::vector<double>& p_values, double q);

}  // namespace latentsteer
