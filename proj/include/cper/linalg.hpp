#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace cper {

using Vec = std::vector<double>;

// Row-major matrix view over external storage. Parameter blocks keep all
// tensors in one flat array so SGD updates and finite-difference checks can
// treat them uniformly.
struct MatView {
    double* p = nullptr;
    int rows = 0, cols = 0;
    double& operator()(int r, int c) const { return p[static_cast<std::size_t>(r) * cols + c]; }
    std::span<double> row(int r) const { return {p + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
};

struct ConstMatView {
    const double* p = nullptr;
    int rows = 0, cols = 0;
    ConstMatView() = default;
    ConstMatView(const double* q, int r, int c) : p(q), rows(r), cols(c) {}
    ConstMatView(MatView m) : p(m.p), rows(m.rows), cols(m.cols) {}
    const double& operator()(int r, int c) const { return p[static_cast<std::size_t>(r) * cols + c]; }
    std::span<const double> row(int r) const { return {p + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    assert(a.size() == b.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
    assert(x.size() == y.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

// out = A x
inline void matvec(ConstMatView A, std::span<const double> x, std::span<double> out) {
    assert(static_cast<int>(x.size()) == A.cols && static_cast<int>(out.size()) == A.rows);
    for (int r = 0; r < A.rows; ++r) out[r] = dot(A.row(r), x);
}

// out = A^T x
inline void matvec_t(ConstMatView A, std::span<const double> x, std::span<double> out) {
    assert(static_cast<int>(x.size()) == A.rows && static_cast<int>(out.size()) == A.cols);
    for (int c = 0; c < A.cols; ++c) out[c] = 0.0;
    for (int r = 0; r < A.rows; ++r) {
        const double xr = x[r];
        if (xr == 0.0) continue;
        axpy(xr, A.row(r), out);
    }
}

// G += g x^T
inline void outer_acc(std::span<const double> g, std::span<const double> x, MatView G) {
    assert(static_cast<int>(g.size()) == G.rows && static_cast<int>(x.size()) == G.cols);
    for (int r = 0; r < G.rows; ++r) axpy(g[r], x, G.row(r));
}

// In-place numerically stable softmax.
inline void softmax_inplace(std::span<double> v) {
    if (v.empty()) return;
    double m = v[0];
    for (double x : v) m = std::max(m, x);
    double z = 0.0;
    for (double& x : v) {
        x = std::exp(x - m);
        z += x;
    }
    for (double& x : v) x /= z;
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(1 + e^x) without overflow; -log sigmoid(x) == softplus(-x).
inline double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline double l2_norm_sq(std::span<const double> v) { return dot(v, v); }

inline double l1_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += std::abs(x);
    return s;
}

inline bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace cper
