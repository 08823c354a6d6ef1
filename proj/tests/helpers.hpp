#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "glyphdiffuse/rng.hpp"
#include "glyphdiffuse/tape.hpp"
#include "glyphdiffuse/tensor.hpp"

namespace gdft {

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

// Central-difference gradient check. `build` must register every tensor in
// `params` as a leaf on the tape it is handed and return a scalar loss; the
// checker then perturbs each parameter element by +/-h and compares the
// analytic gradient against (f+ - f-) / 2h.
inline void fd_gradcheck(const std::function<gdf::Tensor64(gdf::Tape64&)>& build,
                         std::vector<gdf::Tensor64*> params, double tol = 1e-4,
                         double h = 1e-5) {
    std::vector<std::vector<double>> analytic;
    {
        gdf::Tape64 tape;
        gdf::Tensor64 loss = build(tape);
        tape.backward(loss);
        for (auto* p : params) {
            gdf::Tensor64 g = tape.gradient(p->node);
            analytic.emplace_back(g.data(), g.data() + g.numel());
        }
    }
    gdf::Tape64 silent = gdf::Tape64::inference();
    for (size_t pi = 0; pi < params.size(); ++pi) {
        gdf::Tensor64& p = *params[pi];
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            const double keep = p.data()[i];
            p.mutable_data()[i] = keep + h;
            const double fp = build(silent).scalar();
            p.mutable_data()[i] = keep - h;
            const double fm = build(silent).scalar();
            p.mutable_data()[i] = keep;
            const double numeric = (fp - fm) / (2.0 * h);
            const double exact = analytic[pi][size_t(i)];
            CAPTURE(pi, i, numeric, exact);
            REQUIRE(rel_err(numeric, exact) < tol);
        }
    }
}

// Same contract as fd_gradcheck, but only a random fraction of each
// parameter's elements is probed (at least one per tensor). Meant for whole
// models where exhaustive differencing is too slow.
inline void fd_gradcheck_sampled(const std::function<gdf::Tensor64(gdf::Tape64&)>& build,
                                 std::vector<gdf::Tensor64*> params, double fraction,
                                 std::uint64_t seed, double tol = 1e-3, double h = 1e-5) {
    std::vector<std::vector<double>> analytic;
    {
        gdf::Tape64 tape;
        gdf::Tensor64 loss = build(tape);
        tape.backward(loss);
        for (auto* p : params) {
            gdf::Tensor64 g = tape.gradient(p->node);
            analytic.emplace_back(g.data(), g.data() + g.numel());
        }
    }
    gdf::Rng pick(seed);
    gdf::Tape64 silent = gdf::Tape64::inference();
    for (size_t pi = 0; pi < params.size(); ++pi) {
        gdf::Tensor64& p = *params[pi];
        const std::int64_t want =
            std::max<std::int64_t>(1, std::int64_t(std::ceil(fraction * double(p.numel()))));
        for (std::int64_t s = 0; s < want; ++s) {
            const std::int64_t i = pick.uniform_int(0, p.numel() - 1);
            const double keep = p.data()[i];
            p.mutable_data()[i] = keep + h;
            const double fp = build(silent).scalar();
            p.mutable_data()[i] = keep - h;
            const double fm = build(silent).scalar();
            p.mutable_data()[i] = keep;
            const double numeric = (fp - fm) / (2.0 * h);
            const double exact = analytic[pi][size_t(i)];
            CAPTURE(pi, i, numeric, exact);
            REQUIRE(rel_err(numeric, exact) < tol);
        }
    }
}

}  // namespace gdft
