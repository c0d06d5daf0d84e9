#pragma once

// Architecture-distribution machinery: softmax relaxation weights, Gumbel
// top-k ordering without replacement (Plackett-Luce), single-path sampling,
// the sandwich triple, and the straight-through gradient for alpha.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "dwnas/rng.hpp"
#include "dwnas/search_space.hpp"
#include "dwnas/tensor.hpp"

namespace dwnas {

using Mat = std::vector<std::vector<double>>;

inline Mat gumbel_noise(int64_t rows, int64_t cols, Rng& rng) {
    Mat g(static_cast<size_t>(rows), std::vector<double>(static_cast<size_t>(cols)));
    for (auto& row : g)
        for (double& v : row) v = rng.gumbel();
    return g;
}

inline std::vector<double> log_softmax(const std::vector<double>& v) {
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double z = 0;
    for (double x : v) z += std::exp(x - mx);
    const double lz = mx + std::log(z);
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lz;
    return out;
}

inline Mat alpha_rows(const ArchParams& alpha) {
    Mat rows(static_cast<size_t>(alpha.dim(0)), std::vector<double>(static_cast<size_t>(alpha.dim(1))));
    for (int64_t l = 0; l < alpha.dim(0); ++l)
        for (int64_t n = 0; n < alpha.dim(1); ++n) rows[static_cast<size_t>(l)][static_cast<size_t>(n)] = alpha.at2(l, n);
    return rows;
}

// Per-layer softmax(alpha) mixing weights (the all-paths baseline).
inline Mat darts_weights(const ArchParams& alpha) {
    Mat w = alpha_rows(alpha);
    for (auto& row : w) {
        row = log_softmax(row);
        for (double& v : row) v = std::exp(v);
    }
    return w;
}

struct PathSample {
    std::vector<int> index;  // per-layer chosen operator
    Mat u;                   // soft weights, zero outside the allowed set
    bool straight_through = true;

    OneHotArch arch(int n_ops) const { return OneHotArch{n_ops, index}; }
};

// One Gumbel perturbation per iteration. Sorting (log softmax(alpha) + g)
// descending yields an ordering distributed as Plackett-Luce sampling
// without replacement with re-normalized probabilities.
struct Ranking {
    std::vector<std::vector<int>> order;  // [L][N], operator indices by descending score
    Mat logp;                             // [L][N] log softmax(alpha)
    Mat g;                                // [L][N] gumbel draws
    double tau = 5.0;

    int layers() const { return static_cast<int>(order.size()); }
    int n_ops() const { return order.empty() ? 0 : static_cast<int>(order[0].size()); }
};

inline Ranking gumbel_topk_order(const ArchParams& alpha, double tau, Rng& rng) {
    if (tau <= 0) throw NumericError("gumbel_topk_order: tau must be positive");
    Ranking r;
    r.tau = tau;
    r.logp = alpha_rows(alpha);
    for (auto& row : r.logp) row = log_softmax(row);
    r.g = gumbel_noise(alpha.dim(0), alpha.dim(1), rng);
    r.order.resize(r.logp.size());
    for (size_t l = 0; l < r.logp.size(); ++l) {
        const size_t n = r.logp[l].size();
        std::vector<int> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            return r.logp[l][static_cast<size_t>(a)] + r.g[l][static_cast<size_t>(a)] >
                   r.logp[l][static_cast<size_t>(b)] + r.g[l][static_cast<size_t>(b)];
        });
        r.order[l] = std::move(idx);
    }
    return r;
}

// Soft weights for a chosen index over an allowed set:
// u = softmax over allowed of (log p + g)/tau.
inline std::vector<double> soft_weights(const Ranking& r, size_t layer, const std::vector<bool>& allowed) {
    const size_t n = r.logp[layer].size();
    std::vector<double> s(n, -1e300);
    for (size_t i = 0; i < n; ++i)
        if (allowed[i]) s[i] = (r.logp[layer][i] + r.g[layer][i]) / r.tau;
    std::vector<double> u = log_softmax(s);
    for (size_t i = 0; i < n; ++i) u[i] = allowed[i] ? std::exp(u[i]) : 0.0;
    return u;
}

// Path at a given rank, with soft weights over the not-yet-excluded set
// (ranks above it are excluded, as in iterative sampling without replacement).
inline PathSample path_at_rank(const Ranking& r, int rank) {
    PathSample p;
    const size_t L = r.order.size();
    p.index.resize(L);
    p.u.resize(L);
    for (size_t l = 0; l < L; ++l) {
        const size_t n = r.order[l].size();
        std::vector<bool> allowed(n, true);
        for (int k = 0; k < rank; ++k) allowed[static_cast<size_t>(r.order[l][static_cast<size_t>(k)])] = false;
        p.index[l] = r.order[l][static_cast<size_t>(rank)];
        p.u[l] = soft_weights(r, l, allowed);
    }
    return p;
}

inline PathSample single_path_sample(const ArchParams& alpha, double tau, Rng& rng) {
    return path_at_rank(gumbel_topk_order(alpha, tau, rng), 0);
}

struct SandwichTriple {
    PathSample most, random, least;
};

// most = rank 1, least = rank N, random uniform over the middle ranks; one
// shared perturbation. Soft-weight exclusion follows the selection sequence
// most -> random -> least.
inline SandwichTriple sandwich_select(const Ranking& r, Rng& rng) {
    const int N = r.n_ops();
    if (N < 3) throw NumericError("sandwich_select: need at least 3 operators, got " + std::to_string(N));
    SandwichTriple t;
    t.most = path_at_rank(r, 0);
    const size_t L = r.order.size();
    t.random.index.resize(L);
    t.random.u.resize(L);
    t.least.index.resize(L);
    t.least.u.resize(L);
    for (size_t l = 0; l < L; ++l) {
        const int mid_rank = 1 + static_cast<int>(rng.randint(N - 2));
        const int mi = r.order[l][0];
        const int ri = r.order[l][static_cast<size_t>(mid_rank)];
        const int li = r.order[l][static_cast<size_t>(N - 1)];
        t.random.index[l] = ri;
        t.least.index[l] = li;
        std::vector<bool> allowed(static_cast<size_t>(N), true);
        allowed[static_cast<size_t>(mi)] = false;
        t.random.u[l] = soft_weights(r, l, allowed);
        allowed[static_cast<size_t>(ri)] = false;
        t.least.u[l] = soft_weights(r, l, allowed);
    }
    return t;
}

// Straight-through gradient of the loss w.r.t. one alpha row.
// dldu holds dL/du_n (zero where the path did not contribute); u are the soft
// weights over the allowed set; alpha_row is the raw row. Chain:
//   s_m = (log p_m + g_m)/tau (allowed m),  u = softmax_allowed(s),
//   dL/ds_m = sum_n dldu_n u_n (delta_nm - u_m),
//   dL/da_j = sum_m dL/ds_m (delta_mj - p_j)/tau,  p = softmax(alpha).
inline std::vector<double> st_alpha_grad(const std::vector<double>& dldu, const std::vector<double>& u,
                                         const std::vector<double>& alpha_row, double tau) {
    const size_t N = alpha_row.size();
    std::vector<double> p = log_softmax(alpha_row);
    for (double& v : p) v = std::exp(v);
    std::vector<double> ds(N, 0.0);
    double inner = 0;  // sum_n dldu_n u_n
    for (size_t n = 0; n < N; ++n) inner += dldu[n] * u[n];
    for (size_t m = 0; m < N; ++m)
        if (u[m] > 0.0) ds[m] = dldu[m] * u[m] - u[m] * inner;
    double dsum = 0;
    for (double v : ds) dsum += v;
    std::vector<double> grad(N, 0.0);
    for (size_t j = 0; j < N; ++j) grad[j] = (ds[j] - p[j] * dsum) / tau;
    return grad;
}

}  // namespace dwnas
