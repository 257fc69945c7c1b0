// Test-only reference implementations, independent of the library's
// computation paths.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "cper/graph.hpp"
#include "cper/linalg.hpp"

namespace oracle {

inline double cosine(std::span<const double> a, std::span<const double> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / (std::sqrt(aa) * std::sqrt(bb) + 1e-300);
}

// Central finite differences of a scalar function over a flat parameter
// vector, probing through the supplied mutable view.
inline std::vector<double> finite_difference(std::span<double> params,
                                             const std::function<double()>& eval,
                                             double h = 1e-5) {
    std::vector<double> grad(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = params[i];
        params[i] = saved + h;
        const double up = eval();
        params[i] = saved - h;
        const double down = eval();
        params[i] = saved;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

// Worst relative error between two gradients; components that are both tiny
// are ignored.
inline double max_relative_error(std::span<const double> a, std::span<const double> b,
                                 double ignore_below = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max(std::abs(a[i]), std::abs(b[i]));
        if (scale < ignore_below) continue;
        worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    }
    return worst;
}

// Exhaustive enumeration of the path-exploration output: every simple walk of
// node count in [min_len, max_len] whose terminal is an item, attributed to
// the start user or to every user adjacent to the start item.
struct EnumeratedPaths {
    // (user, item) -> set of node sequences
    std::map<std::pair<cper::NodeId, cper::NodeId>, std::set<std::vector<cper::NodeId>>> sets;
};

inline void enumerate_walks(const cper::RecGraph& g, cper::NodeId start, int min_len, int max_len,
                            EnumeratedPaths& out) {
    std::vector<cper::NodeId> stack{start};
    const std::function<void()> dfs = [&] {
        const cper::NodeId cur = stack.back();
        if (static_cast<int>(stack.size()) >= min_len &&
            g.kind(cur) == cper::NodeKind::Item) {
            if (g.kind(start) == cper::NodeKind::User) {
                out.sets[{start, cur}].insert(stack);
            } else {
                for (const cper::NodeId u : g.neighbors(start))
                    if (g.kind(u) == cper::NodeKind::User) out.sets[{u, cur}].insert(stack);
            }
        }
        if (static_cast<int>(stack.size()) == max_len) return;
        for (const cper::NodeId next : g.neighbors(cur)) {
            if (std::find(stack.begin(), stack.end(), next) != stack.end()) continue;
            stack.push_back(next);
            dfs();
            stack.pop_back();
        }
    };
    dfs();
}

inline EnumeratedPaths enumerate_all_paths(const cper::RecGraph& g, int min_len, int max_len) {
    EnumeratedPaths out;
    for (cper::NodeId v = 0; v < g.user_count() + g.item_count(); ++v)
        enumerate_walks(g, v, min_len, max_len, out);
    return out;
}

// Step-by-step single-query attention computation used to cross-check the
// encoder; written against the definition, not the library code.
inline cper::Vec reference_attention(const std::vector<cper::Vec>& seq_inputs,
                                     cper::ConstMatView wq, cper::ConstMatView wk,
                                     cper::ConstMatView wv, cper::ConstMatView pos) {
    const int d = wq.rows;
    const int L = static_cast<int>(seq_inputs.size());
    std::vector<cper::Vec> s(L, cper::Vec(d, 0.0));
    for (int j = 0; j < L; ++j)
        for (int i = 0; i < d; ++i) s[j][i] = seq_inputs[j][i] + pos(j, i);

    cper::Vec q(d, 0.0);
    for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) q[r] += wq(r, c) * s[L - 1][c];

    std::vector<double> logits(L, 0.0);
    std::vector<cper::Vec> v(L, cper::Vec(d, 0.0));
    for (int j = 0; j < L; ++j) {
        cper::Vec k(d, 0.0);
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) {
                k[r] += wk(r, c) * s[j][c];
                v[j][r] += wv(r, c) * s[j][c];
            }
        double dotqk = 0.0;
        for (int i = 0; i < d; ++i) dotqk += q[i] * k[i];
        logits[j] = dotqk / std::sqrt(static_cast<double>(d));
    }
    double m = logits[0];
    for (const double x : logits) m = std::max(m, x);
    double z = 0.0;
    for (double& x : logits) {
        x = std::exp(x - m);
        z += x;
    }
    cper::Vec attn(d, 0.0);
    for (int j = 0; j < L; ++j)
        for (int i = 0; i < d; ++i) attn[i] += (logits[j] / z) * v[j][i];
    return attn;
}

}  // namespace oracle
