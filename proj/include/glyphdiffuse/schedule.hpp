#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "glyphdiffuse/errors.hpp"
#include "glyphdiffuse/tensor.hpp"

// Noise-variance schedule and the two diffusion-process primitives: the
// closed-form forward marginal and the single reverse transition. Timesteps
// are 1-based, t in [1, T]. All schedule math is done in 64-bit.

namespace gdf {

struct Schedule {
    int T = 0;
    double beta_start = 0.0, beta_end = 0.0;
    std::vector<double> beta;       // beta[t-1] = beta_t
    std::vector<double> alpha;      // 1 - beta_t
    std::vector<double> alpha_bar;  // prod_{s<=t} alpha_s

    void check_t(int t) const {
        if (t < 1 || t > T)
            throw validation_error("timestep " + std::to_string(t) + " outside [1, " +
                                   std::to_string(T) + "]");
    }

    double beta_at(int t) const {
        check_t(t);
        return beta[size_t(t - 1)];
    }
    double alpha_at(int t) const {
        check_t(t);
        return alpha[size_t(t - 1)];
    }
    double alpha_bar_at(int t) const {
        check_t(t);
        return alpha_bar[size_t(t - 1)];
    }
};

inline Schedule linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw validation_error("schedule needs T >= 1, got " + std::to_string(T));
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw validation_error("schedule needs 0 < beta_start <= beta_end < 1, got " +
                               std::to_string(beta_start) + ", " + std::to_string(beta_end));
    Schedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.resize(size_t(T));
    for (int t = 0; t < T; ++t)
        s.beta[size_t(t)] = beta_start + (beta_end - beta_start) * double(t) / double(T - 1 > 0 ? T - 1 : 1);
    s.beta.front() = beta_start;  // endpoints exact by construction
    s.beta.back() = T > 1 ? beta_end : beta_start;
    s.alpha.resize(size_t(T));
    s.alpha_bar.resize(size_t(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        s.alpha[size_t(t)] = 1.0 - s.beta[size_t(t)];
        prod *= s.alpha[size_t(t)];
        s.alpha_bar[size_t(t)] = prod;
    }
    return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <class S>
TensorT<S> q_sample(const Schedule& sc, const TensorT<S>& x0, int t, const TensorT<S>& eps) {
    sc.check_t(t);
    if (!x0.same_shape(eps))
        throw shape_error("q_sample: eps shape " + shape_str(eps.shape) + " does not match x0 " +
                          shape_str(x0.shape));
    const double ab = sc.alpha_bar_at(t);
    const S a = S(std::sqrt(ab)), b = S(std::sqrt(1.0 - ab));
    TensorT<S> out(x0.shape);
    const S* px = x0.data();
    const S* pe = eps.data();
    S* po = out.mutable_data();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] = a * px[i] + b * pe[i];
    check_finite(out, "q_sample");
    return out;
}

// x_{t-1} = mu + sigma_t * noise, where
//   mu      = (x_t - (beta_t / sqrt(1 - abar_t)) eps_hat) / sqrt(alpha_t)
//   sigma_t = sqrt(beta_t) for t > 1, 0 at the final step.
template <class S>
TensorT<S> posterior_step(const Schedule& sc, const TensorT<S>& x_t, const TensorT<S>& eps_hat,
                          int t, const TensorT<S>& noise) {
    sc.check_t(t);
    if (!x_t.same_shape(eps_hat) || !x_t.same_shape(noise))
        throw shape_error("posterior_step: shapes must match, got x_t " + shape_str(x_t.shape) +
                          ", eps_hat " + shape_str(eps_hat.shape) + ", noise " +
                          shape_str(noise.shape));
    const double beta = sc.beta_at(t);
    const double ab = sc.alpha_bar_at(t);
    const S inv_sqrt_alpha = S(1.0 / std::sqrt(sc.alpha_at(t)));
    const S eps_coef = S(beta / std::sqrt(1.0 - ab));
    TensorT<S> out(x_t.shape);
    const S* px = x_t.data();
    const S* pe = eps_hat.data();
    const S* pn = noise.data();
    S* po = out.mutable_data();
    if (t > 1) {
        const S sigma = S(std::sqrt(beta));
        for (std::int64_t i = 0; i < out.numel(); ++i)
            po[i] = inv_sqrt_alpha * (px[i] - eps_coef * pe[i]) + sigma * pn[i];
    } else {
        // final step is deterministic: the noise argument is ignored entirely
        for (std::int64_t i = 0; i < out.numel(); ++i)
            po[i] = inv_sqrt_alpha * (px[i] - eps_coef * pe[i]);
    }
    check_finite(out, "posterior_step");
    return out;
}

}  // namespace gdf
