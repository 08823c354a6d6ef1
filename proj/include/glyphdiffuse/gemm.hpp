#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "glyphdiffuse/parallel.hpp"

namespace gdf {

// Plain row-major kernels. The i/p/j loop order keeps the inner loop a
// contiguous axpy over a row of B, which the compiler vectorizes; every C
// element is produced by one fixed-order reduction, so results are identical
// for any thread count.

// C[m x n] = A[m x k] * B[k x n]
template <class S>
void gemm(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    parallel_for(
        m,
        [=](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) {
                S* crow = c + i * n;
                std::fill(crow, crow + n, S(0));
                const S* arow = a + i * k;
                for (std::int64_t p = 0; p < k; ++p) {
                    const S av = arow[p];
                    const S* brow = b + p * n;
                    for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                }
            }
        },
        /*grain=*/8);
}

// C[m x n] += A[m x k] * B[k x n]
template <class S>
void gemm_acc(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    parallel_for(
        m,
        [=](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) {
                S* crow = c + i * n;
                const S* arow = a + i * k;
                for (std::int64_t p = 0; p < k; ++p) {
                    const S av = arow[p];
                    const S* brow = b + p * n;
                    for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                }
            }
        },
        /*grain=*/8);
}

// C[m x n] = A^T[m x k] * B[k x n] where A is stored [k x m].
template <class S>
void gemm_at(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    parallel_for(
        m,
        [=](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) {
                S* crow = c + i * n;
                std::fill(crow, crow + n, S(0));
                for (std::int64_t p = 0; p < k; ++p) {
                    const S av = a[p * m + i];
                    const S* brow = b + p * n;
                    for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                }
            }
        },
        /*grain=*/8);
}

// C[m x n] = A[m x k] * B^T[k x n] where B is stored [n x k].
// Dot-product form; the inner loop runs over contiguous rows of both.
template <class S>
void gemm_bt(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    parallel_for(
        m,
        [=](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) {
                const S* arow = a + i * k;
                S* crow = c + i * n;
                for (std::int64_t j = 0; j < n; ++j) {
                    const S* brow = b + j * k;
                    S acc = S(0);
                    for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                    crow[j] = acc;
                }
            }
        },
        /*grain=*/8);
}

// C[m x n] += A[m x k] * B^T, B stored [n x k].
template <class S>
void gemm_bt_acc(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    parallel_for(
        m,
        [=](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) {
                const S* arow = a + i * k;
                S* crow = c + i * n;
                for (std::int64_t j = 0; j < n; ++j) {
                    const S* brow = b + j * k;
                    S acc = S(0);
                    for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                    crow[j] += acc;
                }
            }
        },
        /*grain=*/8);
}

}  // namespace gdf
