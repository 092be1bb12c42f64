#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <vector>

#include "tcr/common.hpp"

namespace tcr {

// Dense row-major matrix. S is float for training/inference and double for
// the finite-difference gradient checks; the same kernels serve both.
template <class S>
struct Mat {
    size_t rows = 0, cols = 0;
    std::vector<S> v;

    Mat() = default;
    Mat(size_t r, size_t c) : rows(r), cols(c), v(r * c, S(0)) {}

    S* row(size_t r) { return v.data() + r * cols; }
    const S* row(size_t r) const { return v.data() + r * cols; }
    S& at(size_t r, size_t c) { return v[r * cols + c]; }
    const S& at(size_t r, size_t c) const { return v[r * cols + c]; }
    size_t size() const { return v.size(); }
    void zero() { std::fill(v.begin(), v.end(), S(0)); }
};

// Named parameter tensor; shape is kept explicitly for checkpoints.
template <class S>
struct Tensor {
    std::vector<uint32_t> shape;
    std::vector<S> v;

    Tensor() = default;
    explicit Tensor(std::vector<uint32_t> sh) : shape(std::move(sh)) {
        size_t n = 1;
        for (uint32_t d : shape) n *= d;
        v.assign(n, S(0));
    }
    size_t size() const { return v.size(); }
    uint32_t dim(size_t i) const { return shape[i]; }
    S* data() { return v.data(); }
    const S* data() const { return v.data(); }
    void zero() { std::fill(v.begin(), v.end(), S(0)); }
};

// C = A(m x k) * B(k x n)
template <class S>
void gemm(const S* a, const S* b, S* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        S* ci = c + i * n;
        for (size_t j = 0; j < n; ++j) ci[j] = S(0);
        const S* ai = a + i * k;
        for (size_t p = 0; p < k; ++p) {
            const S aip = ai[p];
            const S* bp = b + p * n;
            for (size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// C += A^T(m x k -> k x m) * B(m x n); used for weight gradients.
template <class S>
void gemm_acc_tA(const S* a, const S* b, S* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const S* ai = a + i * k;
        const S* bi = b + i * n;
        for (size_t p = 0; p < k; ++p) {
            const S aip = ai[p];
            S* cp = c + p * n;
            for (size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
        }
    }
}

// C = A(m x k) * B^T(n x k); used for activation gradients.
template <class S>
void gemm_tB(const S* a, const S* b, S* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const S* ai = a + i * k;
        S* ci = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const S* bj = b + j * k;
            S acc = S(0);
            for (size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = acc;
        }
    }
}

template <class S>
void add_bias_rows(Mat<S>& x, const S* bias) {
    for (size_t r = 0; r < x.rows; ++r) {
        S* xr = x.row(r);
        for (size_t c = 0; c < x.cols; ++c) xr[c] += bias[c];
    }
}

template <class S>
bool mat_finite(const Mat<S>& m) {
    return all_finite(m.v);
}

}  // namespace tcr
