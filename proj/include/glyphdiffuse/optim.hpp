#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "glyphdiffuse/errors.hpp"
#include "glyphdiffuse/tape.hpp"
#include "glyphdiffuse/tensor.hpp"

namespace gdf {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decay applies to matrix/conv weights only. 1-D tensors (biases, norm
// affines) and lookup tables are exempt, so table rows a batch never touched
// stay bitwise identical across a step.
inline bool adamw_should_decay(const std::string& name, int ndim) {
    if (ndim < 2) return false;
    return name != "style.table" && name != "text.embed";
}

// Adam with decoupled weight decay. Moments are kept in double regardless of
// the parameter scalar type; updates are elementwise, so results do not
// depend on thread count.
template <class S>
class AdamWT {
  public:
    explicit AdamWT(AdamWConfig cfg = {}) : cfg_(cfg) {
        if (cfg_.lr < 0.0 || cfg_.weight_decay < 0.0 || cfg_.eps <= 0.0)
            throw validation_error("adamw: rates must be non-negative and eps positive");
        if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
            throw validation_error("adamw: betas must lie in [0, 1)");
    }

    const AdamWConfig& config() const { return cfg_; }

    // The tensor must outlive the optimizer and stay attached to each tape
    // that step() reads gradients from.
    void add(TensorT<S>& param, bool decay = true) {
        Slot s;
        s.param = &param;
        s.decay = decay;
        s.m.assign(size_t(param.numel()), 0.0);
        s.v.assign(size_t(param.numel()), 0.0);
        slots_.push_back(std::move(s));
    }

    std::int64_t steps() const { return t_; }

    void step(TapeT<S>& tape) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (auto& s : slots_) {
            TensorT<S> g = tape.gradient(s.param->node);
            S* p = s.param->mutable_data();
            const S* gd = g.data();
            const std::int64_t n = s.param->numel();
            for (std::int64_t i = 0; i < n; ++i) {
                const double gi = double(gd[i]);
                double& m = s.m[size_t(i)];
                double& v = s.v[size_t(i)];
                m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * gi;
                v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * gi * gi;
                double upd = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
                if (s.decay) upd += cfg_.weight_decay * double(p[i]);
                p[i] = S(double(p[i]) - cfg_.lr * upd);
            }
        }
    }

  private:
    struct Slot {
        TensorT<S>* param;
        bool decay;
        std::vector<double> m, v;
    };

    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    std::int64_t t_ = 0;
};

using AdamW = AdamWT<float>;

}  // namespace gdf
