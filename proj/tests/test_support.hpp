#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "caw/rng.hpp"
#include "caw/tensor.hpp"
#include "doctest.h"

namespace caw::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -2.0, double hi = 2.0,
                            bool requires_grad = true) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    std::vector<double> values(n);
    for (double& v : values) {
        v = rng.uniform(lo, hi);
    }
    return Tensor::from_data(shape, std::move(values), requires_grad);
}

// Random row-stochastic matrix with entries bounded away from the KL floor.
inline Tensor random_stochastic(std::size_t b, std::size_t c, Rng& rng,
                                bool requires_grad = true) {
    std::vector<double> values(b * c);
    for (std::size_t i = 0; i < b; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            values[i * c + j] = rng.uniform(0.05, 1.0);
            total += values[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) {
            values[i * c + j] /= total;
        }
    }
    return Tensor::from_data({b, c}, std::move(values), requires_grad);
}

inline Labels random_labels(std::size_t b, std::size_t c, Rng& rng) {
    Labels y(b);
    for (auto& label : y) {
        label = static_cast<std::int32_t>(rng.index(c));
    }
    return y;
}

// Relative error with an absolute floor: finite-difference noise on
// near-zero coordinates must not mask or fake a mismatch.
inline double rel_err(double analytic, double fd) {
    return std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-3});
}

inline double max_rel_err(std::span<const double> analytic, std::span<const double> fd) {
    REQUIRE(analytic.size() == fd.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        worst = std::max(worst, rel_err(analytic[i], fd[i]));
    }
    return worst;
}

// Backward vs central finite differences on a scalar-valued builder.
// `build` must be a pure function of its input tensor.
inline double check_gradient(const std::function<Tensor(const Tensor&)>& build, const Tensor& x,
                             double h = 1e-5) {
    Tensor root = build(x);
    root.backward();
    Tensor fd = finite_diff_grad([&](const Tensor& v) { return build(v).item(); }, x, h);
    return max_rel_err(x.grad(), fd.data());
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) {
            return false;
        }
    }
    return true;
}

} // namespace caw::testing
