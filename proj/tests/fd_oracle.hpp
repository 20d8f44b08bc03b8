#pragma once

// Central finite differences, kept apart from every analytic backward path.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>

namespace sra::test {

using DenseD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Numerical gradient of f at x (f re-reads x after each perturbation).
inline DenseD central_difference(DenseD& x, const std::function<double()>& f) {
    DenseD grad(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double original = x.data()[i];
        const double h = 1e-5 * std::max(1.0, std::abs(original));
        x.data()[i] = original + h;
        const double up = f();
        x.data()[i] = original - h;
        const double down = f();
        x.data()[i] = original;
        grad.data()[i] = (up - down) / (2 * h);
    }
    return grad;
}

/// Largest elementwise |a - n| / max(|a|, |n|, floor).
inline double max_relative_error(const DenseD& analytic, const DenseD& numeric, double floor = 1e-6) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < analytic.size(); ++i) {
        const double a = analytic.data()[i], n = numeric.data()[i];
        worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
    }
    return worst;
}

}  // namespace sra::test
