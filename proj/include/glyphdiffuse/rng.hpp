#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace gdf {

// Single source of randomness for a run. Every draw goes through one of
// these, seeded explicitly, so a (config, seed) pair pins all output bytes.
// Normal variates use Box-Muller directly instead of std::normal_distribution
// to keep the draw sequence independent of the standard library version.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    // Uniform in [0, 1).
    double uniform() {
        // 53 random bits -> double mantissa
        return double(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        std::uint64_t span = std::uint64_t(hi - lo) + 1;
        // modulo bias is < 2^-40 for the spans used here (timesteps, indices)
        return lo + std::int64_t(gen_() % span);
    }

    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <class S>
    void fill_normal(S* out, std::int64_t n) {
        for (std::int64_t i = 0; i < n; ++i) out[i] = S(normal());
    }

    template <class S>
    void fill_normal(std::vector<S>& out) {
        fill_normal(out.data(), std::int64_t(out.size()));
    }

    template <class S>
    void fill_uniform(S* out, std::int64_t n, double lo, double hi) {
        for (std::int64_t i = 0; i < n; ++i) out[i] = S(lo + (hi - lo) * uniform());
    }

    template <class S>
    void fill_uniform(std::vector<S>& out, double lo, double hi) {
        fill_uniform(out.data(), std::int64_t(out.size()), lo, hi);
    }

    // Fisher-Yates over 0..n-1.
    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        for (int i = n - 1; i > 0; --i) {
            int j = int(uniform_int(0, i));
            std::swap(p[i], p[j]);
        }
        return p;
    }

    // Derive an independent stream (e.g. per-epoch shuffles).
    Rng fork(std::uint64_t salt) {
        std::uint64_t s = gen_() ^ (salt * 0x9e3779b97f4a7c15ull);
        return Rng(s);
    }

  private:
    std::mt19937_64 gen_;
};

}  // namespace gdf
