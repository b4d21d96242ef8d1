#pragma once

#include <cmath>
#include <functional>

#include "dblend/rng.hpp"
#include "dblend/tensor.hpp"

namespace dblend::test {

// Central finite differences of a scalar function, independent of the tape.
inline TensorD numeric_gradient(const std::function<double(const TensorD&)>& f, const TensorD& x, double h = 1e-5) {
    TensorD g(x.shape());
    TensorD probe = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        probe[i] = x[i] + h;
        const double fp = f(probe);
        probe[i] = x[i] - h;
        const double fm = f(probe);
        probe[i] = x[i];
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_rel_error(const TensorD& a, const TensorD& b, double floor = 1e-10) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
    return worst;
}

inline TensorD random_tensor(const Shape& shape, std::uint64_t seed, double scale = 1.0) {
    CounterRng rng(seed);
    TensorD t(shape);
    for (double& v : t.data()) v = scale * rng.normal();
    return t;
}

}  // namespace dblend::test
