#pragma once

// Synthetic latency oracle (stand-in for device measurement), the
// architecture->latency pair generator, and the MLP latency predictor with a
// backward pass for search gradients.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "dwnas/optim.hpp"
#include "dwnas/rng.hpp"
#include "dwnas/search_space.hpp"

namespace dwnas {

struct OracleParams {
    double c0 = 0.08;    // per-layer fixed overhead, ms
    double c1 = 0.04;    // MAC cost, ms per M-MAC
    double gamma = 0.8;  // sublinear MAC exponent
    double sigma = 0.01; // measurement noise, ms

    void validate() const {
        if (c0 <= 0 || c1 <= 0) throw ConfigError("oracle: c0 and c1 must be positive");
        if (gamma <= 0 || gamma > 1.5) throw ConfigError("oracle: gamma must be in (0, 1.5]");
        if (sigma < 0) throw ConfigError("oracle: sigma must be non-negative");
    }
};

// Conv MACs = Cin * Cout * K^2 * Hout * Wout / groups.
inline double conv_macs(int64_t cin, int64_t cout, int k, int64_t hout, int64_t wout, int groups) {
    return static_cast<double>(cin) * static_cast<double>(cout) * k * k * static_cast<double>(hout) *
           static_cast<double>(wout) / static_cast<double>(groups);
}

// Per-conv-layer MAC counts for the deployed (post-transform) form of an
// architecture: a linear block collapses to 1 dense KxK conv, a non-linear
// block stays 3 conv layers. Stem and classifier head count as one layer each.
inline std::vector<double> costs_from_arch(const SupernetConfig& cfg, const std::vector<int>& arch) {
    const auto& specs = operator_space();
    std::vector<double> costs;
    int side = cfg.input_hw / 2;
    costs.push_back(conv_macs(cfg.input_c, cfg.stem_channels, 3, side, side, 1));
    for (size_t l = 0; l < arch.size(); ++l) {
        const OperatorSpec& sp = specs[static_cast<size_t>(arch[l])];
        const int cin = cfg.cin_of(static_cast<int>(l));
        const int cout = cfg.layers[l].cout;
        const int stride = cfg.layers[l].stride;
        const int out_side = side / stride;
        if (sp.linear) {
            costs.push_back(conv_macs(cin, cout, sp.kernel, out_side, out_side, 1));
        } else {
            const int ec = cin * sp.expansion;
            const int pad_side = side + (sp.kernel - 1);  // block input is pre-padded
            costs.push_back(conv_macs(cin, ec, 1, pad_side, pad_side, 1));
            costs.push_back(conv_macs(ec, ec, sp.kernel, out_side, out_side, ec));
            costs.push_back(conv_macs(ec, cout, 1, out_side, out_side, 1));
        }
        side = out_side;
    }
    costs.push_back(static_cast<double>(cfg.layers.back().cout) * cfg.classes);  // head FC
    return costs;
}

// Same counting applied to an instantiated network (agrees with
// costs_from_arch once the network is transformed).
template <typename T>
std::vector<double> costs_from_network(const Network<T>& net) {
    std::vector<double> costs;
    int side = net.cfg.input_hw / 2;
    costs.push_back(conv_macs(net.cfg.input_c, net.cfg.stem_channels, 3, side, side, 1));
    for (const Block<T>& b : net.blocks) {
        if (b.kind == Block<T>::Kind::Collapsed) {
            const auto& c = b.col.conv;
            const int out_side = side / c.stride;
            costs.push_back(conv_macs(c.cin(), c.cout(), static_cast<int>(c.k()), out_side, out_side, 1));
            side = out_side;
        } else {
            const auto& m = b.mb;
            const int pad_side = side + 2 * m.expand.padding;
            const int out_side = (pad_side - static_cast<int>(m.dw.k())) / m.dw.stride + 1;
            costs.push_back(conv_macs(m.expand.cin(), m.expand.cout(), 1, pad_side, pad_side, 1));
            costs.push_back(conv_macs(m.dw.cin(), m.dw.cout(), static_cast<int>(m.dw.k()), out_side,
                                      out_side, m.dw.groups));
            costs.push_back(conv_macs(m.project.cin(), m.project.cout(), 1, out_side, out_side, 1));
            side = out_side;
        }
    }
    costs.push_back(static_cast<double>(net.cfg.layers.back().cout) * net.cfg.classes);
    return costs;
}

// latency = sum_layers (c0 + c1 * (MACs/1e6)^gamma) + noise, noise clipped at
// -50% of the deterministic part. Deterministic with sigma = 0.
inline double synthetic_oracle(const std::vector<double>& layer_macs, const OracleParams& p, Rng& rng) {
    p.validate();
    double lat = 0;
    for (double m : layer_macs) lat += p.c0 + p.c1 * std::pow(m / 1e6, p.gamma);
    if (p.sigma > 0) {
        const double noise = std::max(rng.normal(0.0, p.sigma), -0.5 * lat);
        lat += noise;
    }
    return lat;
}

struct LatencyPair {
    OneHotArch arch;
    double latency_ms = 0;
};

inline std::vector<LatencyPair> generate_pairs(const SupernetConfig& cfg, int n, const OracleParams& params,
                                               Rng& rng) {
    std::vector<LatencyPair> pairs;
    pairs.reserve(static_cast<size_t>(n));
    const int L = cfg.num_layers();
    for (int i = 0; i < n; ++i) {
        LatencyPair p;
        p.arch.n_ops = kNumOperators;
        p.arch.index.resize(static_cast<size_t>(L));
        for (int l = 0; l < L; ++l) p.arch.index[static_cast<size_t>(l)] = static_cast<int>(rng.randint(kNumOperators));
        Rng orng = rng.fork(static_cast<uint64_t>(i) + 1);
        p.latency_ms = synthetic_oracle(costs_from_arch(cfg, p.arch.index), params, orng);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

// Flatten a (possibly soft) L x N encoding row-major.
inline std::vector<double> flatten_encoding(const OneHotArch& arch) {
    std::vector<double> v(arch.index.size() * static_cast<size_t>(arch.n_ops), 0.0);
    for (size_t l = 0; l < arch.index.size(); ++l)
        v[l * static_cast<size_t>(arch.n_ops) + static_cast<size_t>(arch.index[l])] = 1.0;
    return v;
}

// ---------------------------------------------------------------------------
// Latency predictor: (L*N) -> 256 -> 128 -> 1 MLP with ReLU between layers
// and a max(., 0) clamp on the output.

template <typename T>
struct LatencyModel {
    Tensor<T> w1, b1, w2, b2, w3, b3;
    bool trained = false;

    int64_t in_dim() const { return w1.dim(0); }

    void visit_params(const std::function<void(Tensor<T>&)>& fn) {
        fn(w1); fn(b1); fn(w2); fn(b2); fn(w3); fn(b3);
    }

    void visit_named(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
        fn("fc1.weight", w1); fn("fc1.bias", b1);
        fn("fc2.weight", w2); fn("fc2.bias", b2);
        fn("fc3.weight", w3); fn("fc3.bias", b3);
    }

    template <typename U>
    LatencyModel<U> cast() const {
        LatencyModel<U> o;
        o.w1 = w1.template cast<U>(); o.b1 = b1.template cast<U>();
        o.w2 = w2.template cast<U>(); o.b2 = b2.template cast<U>();
        o.w3 = w3.template cast<U>(); o.b3 = b3.template cast<U>();
        o.trained = trained;
        return o;
    }
};

template <typename T>
LatencyModel<T> make_latency_model(int64_t in_dim, Rng& rng, int64_t h1 = 256, int64_t h2 = 128) {
    LatencyModel<T> m;
    m.w1 = Tensor<T>({in_dim, h1}); m.b1 = Tensor<T>({h1});
    m.w2 = Tensor<T>({h1, h2});     m.b2 = Tensor<T>({h2});
    m.w3 = Tensor<T>({h2, 1});      m.b3 = Tensor<T>({1});
    he_init(m.w1, in_dim, rng);
    he_init(m.w2, h1, rng);
    he_init(m.w3, h2, rng);
    return m;
}

template <typename T>
struct MlpCache {
    Tensor<T> x, z1, a1, z2, a2, z3;  // pre/post activations
};

template <typename T>
Tensor<T> relu_plain(const Tensor<T>& x) {
    Tensor<T> y = x;
    for (T& v : y.data) v = std::max(v, T(0));
    return y;
}

// Forward over a batch [N, D] -> clamped predictions [N, 1].
template <typename T>
Tensor<T> mlp_forward(const LatencyModel<T>& m, const Tensor<T>& x, MlpCache<T>* cache = nullptr) {
    Tensor<T> z1 = fully_connected(x, m.w1, m.b1);
    Tensor<T> a1 = relu_plain(z1);
    Tensor<T> z2 = fully_connected(a1, m.w2, m.b2);
    Tensor<T> a2 = relu_plain(z2);
    Tensor<T> z3 = fully_connected(a2, m.w3, m.b3);
    Tensor<T> y = z3;
    for (T& v : y.data) v = std::max(v, T(0));
    if (cache) {
        cache->x = x;
        cache->z1 = std::move(z1);
        cache->a1 = std::move(a1);
        cache->z2 = std::move(z2);
        cache->a2 = std::move(a2);
        cache->z3 = std::move(z3);
    }
    return y;
}

// Backward through the MLP; accumulates parameter grads, optionally returns
// the input gradient.
template <typename T>
void mlp_backward(LatencyModel<T>& m, const MlpCache<T>& cache, const Tensor<T>& gy, Tensor<T>* gx) {
    Tensor<T> g = gy;
    for (size_t i = 0; i < g.data.size(); ++i)
        if (cache.z3.data[i] <= T(0)) g.data[i] = T(0);  // output clamp
    Tensor<T> ga2;
    fully_connected_backward(cache.a2, m.w3, m.b3, g, &ga2);
    for (size_t i = 0; i < ga2.data.size(); ++i)
        if (cache.z2.data[i] <= T(0)) ga2.data[i] = T(0);
    Tensor<T> ga1;
    fully_connected_backward(cache.a1, m.w2, m.b2, ga2, &ga1);
    for (size_t i = 0; i < ga1.data.size(); ++i)
        if (cache.z1.data[i] <= T(0)) ga1.data[i] = T(0);
    fully_connected_backward(cache.x, m.w1, m.b1, ga1, gx);
}

// Predicted latency plus its gradient w.r.t. the flattened encoding.
template <typename T>
std::pair<double, std::vector<T>> predict_with_grad(LatencyModel<T>& m, const std::vector<T>& encoding) {
    if (static_cast<int64_t>(encoding.size()) != m.in_dim())
        throw DimensionError("predict: encoding size " + std::to_string(encoding.size()) +
                             " != predictor input dim " + std::to_string(m.in_dim()));
    Tensor<T> x({1, m.in_dim()});
    x.data = encoding;
    MlpCache<T> cache;
    Tensor<T> y = mlp_forward(m, x, &cache);
    Tensor<T> gy({1, 1}, T(1));
    Tensor<T> gx;
    mlp_backward(m, cache, gy, &gx);
    // parameter grads from this probe are scratch; drop them
    m.visit_params([](Tensor<T>& p) { p.grad.clear(); });
    return {static_cast<double>(y.data[0]), gx.data};
}

template <typename T>
double predict(LatencyModel<T>& m, const OneHotArch& arch) {
    std::vector<double> enc = flatten_encoding(arch);
    std::vector<T> e(enc.begin(), enc.end());
    Tensor<T> x({1, m.in_dim()});
    x.data = e;
    return static_cast<double>(mlp_forward(m, x).data[0]);
}

struct FitReport {
    double val_rmse = 0;
    double train_rmse = 0;
    int epochs = 0;
};

// Adam-trained MSE regression on flattened one-hot inputs (no input
// normalization needed: entries are already in {0,1}).
template <typename T>
FitReport fit_predictor(LatencyModel<T>& m, const std::vector<LatencyPair>& pairs, double train_frac,
                        int epochs, Rng& rng, int batch = 32, double lr = 1e-3) {
    if (pairs.size() < 50)
        throw DataError("fit_predictor: need at least 50 pairs, got " + std::to_string(pairs.size()));
    std::vector<size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), size_t{0});
    rng.shuffle(order);
    const size_t ntrain = std::max<size_t>(1, static_cast<size_t>(train_frac * static_cast<double>(pairs.size())));
    std::vector<size_t> train(order.begin(), order.begin() + static_cast<long>(ntrain));
    std::vector<size_t> val(order.begin() + static_cast<long>(ntrain), order.end());
    if (val.empty()) val = train;  // degenerate split: report train error

    // Mild weight decay: the oracle target is near-additive over one-hot
    // entries, so regularizing toward small weights generalizes far better
    // than pure memorization of the training split.
    Adam<T> opt(static_cast<T>(lr), T(0.9), T(0.999), T(1e-8), T(1e-3));
    std::vector<Tensor<T>*> params;
    m.visit_params([&](Tensor<T>& p) { params.push_back(&p); });

    // Start the output at the mean target so the non-negativity clamp cannot
    // zero out the gradient of every sample at initialization.
    if (!m.trained) {
        double mean = 0;
        for (const LatencyPair& p : pairs) mean += p.latency_ms;
        m.b3.data[0] = static_cast<T>(mean / static_cast<double>(pairs.size()));
    }

    auto rmse_on = [&](const std::vector<size_t>& idx) {
        double se = 0;
        for (size_t i : idx) {
            const double err = predict(m, pairs[i].arch) - pairs[i].latency_ms;
            se += err * err;
        }
        return std::sqrt(se / static_cast<double>(idx.size()));
    };

    for (int e = 0; e < epochs; ++e) {
        // cosine decay to ~0 sharpens the late-stage fit considerably
        opt.set_lr(static_cast<T>(lr * 0.5 * (1.0 + std::cos(M_PI * e / std::max(1, epochs)))));
        rng.shuffle(train);
        for (size_t start = 0; start < train.size(); start += static_cast<size_t>(batch)) {
            const size_t end = std::min(train.size(), start + static_cast<size_t>(batch));
            const int64_t B = static_cast<int64_t>(end - start);
            Tensor<T> x({B, m.in_dim()});
            Tensor<T> t({B, 1});
            for (int64_t b = 0; b < B; ++b) {
                const LatencyPair& p = pairs[train[start + static_cast<size_t>(b)]];
                std::vector<double> enc = flatten_encoding(p.arch);
                for (int64_t d = 0; d < m.in_dim(); ++d) x.at2(b, d) = static_cast<T>(enc[static_cast<size_t>(d)]);
                t.at2(b, 0) = static_cast<T>(p.latency_ms);
            }
            MlpCache<T> cache;
            Tensor<T> y = mlp_forward(m, x, &cache);
            Tensor<T> gy({B, 1});
            for (int64_t b = 0; b < B; ++b)
                gy.at2(b, 0) = static_cast<T>(2.0 * (y.at2(b, 0) - t.at2(b, 0)) / static_cast<double>(B));
            for (Tensor<T>* p : params) p->zero_grad();
            mlp_backward(m, cache, gy, static_cast<Tensor<T>*>(nullptr));
            opt.step(params);
        }
    }
    m.trained = true;
    FitReport r;
    r.val_rmse = rmse_on(val);
    r.train_rmse = rmse_on(train);
    r.epochs = epochs;
    return r;
}

}  // namespace dwnas
