#pragma once

// The 12-operator hybrid transformable space, the supernet built from it,
// stand-alone decoded networks, and architecture encodings.

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dwnas/ops.hpp"
#include "dwnas/rng.hpp"
#include "dwnas/tensor.hpp"

namespace dwnas {

struct OperatorSpec {
    int kernel;     // K in {3,5,7}
    int expansion;  // E in {3,6}
    bool linear;    // true: identity internals + trailing ReLU6; false: ReLU6 internals

    bool operator==(const OperatorSpec&) const = default;
};

constexpr int kNumOperators = 12;

// Fixed enumeration, sorted by (linear, K, E). Index 0 is (non-linear, K3, E3).
inline const std::array<OperatorSpec, kNumOperators>& operator_space() {
    static const std::array<OperatorSpec, kNumOperators> specs = [] {
        std::array<OperatorSpec, kNumOperators> s{};
        int i = 0;
        for (int lin = 0; lin <= 1; ++lin)
            for (int k : {3, 5, 7})
                for (int e : {3, 6}) s[static_cast<size_t>(i++)] = OperatorSpec{k, e, lin == 1};
        return s;
    }();
    return specs;
}

// |O|^L; reported as a double since it overflows 64 bits at paper scale.
inline double space_cardinality(int layers, int n_ops = kNumOperators) {
    return std::pow(static_cast<double>(n_ops), static_cast<double>(layers));
}

struct SupernetConfig {
    struct Layer {
        int cout;
        int stride;  // in {1,2}
    };
    int input_c = 3;
    int input_hw = 32;
    int stem_channels = 8;
    int classes = 10;
    std::vector<Layer> layers;

    // Desk-scale default: 8 -> 16(s2) -> 16 -> 32(s2) -> 32 -> 64 -> 64.
    static SupernetConfig desk_default() {
        SupernetConfig c;
        c.layers = {{16, 2}, {16, 1}, {32, 2}, {32, 1}, {64, 1}, {64, 1}};
        return c;
    }

    int num_layers() const { return static_cast<int>(layers.size()); }

    int cin_of(int l) const { return l == 0 ? stem_channels : layers[static_cast<size_t>(l - 1)].cout; }

    // Spatial side seen by layer l for a given input side (stem has stride 2).
    int spatial_of(int l, int input_side) const {
        int s = input_side / 2;
        for (int i = 0; i < l; ++i) s /= layers[static_cast<size_t>(i)].stride;
        return s;
    }

    int total_stride() const {
        int s = 2;
        for (const Layer& l : layers) s *= l.stride;
        return s;
    }

    void validate() const {
        if (layers.empty()) throw ConfigError("supernet: no searchable layers configured");
        if (input_hw % total_stride() != 0)
            throw ConfigError("supernet: input size " + std::to_string(input_hw) +
                              " not divisible by total stride " + std::to_string(total_stride()));
        for (const Layer& l : layers) {
            if (l.stride != 1 && l.stride != 2)
                throw ConfigError("supernet: layer stride must be 1 or 2, got " + std::to_string(l.stride));
            if (l.cout <= 0) throw ConfigError("supernet: layer channels must be positive");
        }
    }
};

// ---------------------------------------------------------------------------
// MBConv operator: 1x1 expand -> BN -> act -> KxK depthwise -> BN -> act ->
// 1x1 project -> BN (+ residual) (+ trailing ReLU6 for linear specs).
//
// Padding is applied to the block input (the 1x1 expand runs with padding
// (K-1)/2 and the depthwise runs valid). A 1x1 conv commutes with zero
// padding, so the block computes the usual "same" geometry, and the whole
// linear chain stays an exact conv of the zero-extended input -- this is what
// makes the post-training collapse exact everywhere, borders included.

template <typename T>
struct MBConvOperator {
    ConvWeights<T> expand;
    BatchNormState<T> bn1;
    ConvWeights<T> dw;
    BatchNormState<T> bn2;
    ConvWeights<T> project;
    BatchNormState<T> bn3;
    OperatorSpec spec{3, 3, false};
    bool residual = false;

    double internal_eps(double graft_eps) const { return spec.linear ? graft_eps : 0.0; }

    template <typename U>
    MBConvOperator<U> cast() const {
        MBConvOperator<U> o;
        o.expand = expand.template cast<U>();
        o.bn1 = bn1.template cast<U>();
        o.dw = dw.template cast<U>();
        o.bn2 = bn2.template cast<U>();
        o.project = project.template cast<U>();
        o.bn3 = bn3.template cast<U>();
        o.spec = spec;
        o.residual = residual;
        return o;
    }
};

template <typename T>
void he_init(Tensor<T>& w, int64_t fan_in, Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (T& v : w.data) v = static_cast<T>(rng.normal(0.0, std));
}

template <typename T>
MBConvOperator<T> make_mbconv(int cin, int cout, int stride, const OperatorSpec& spec, Rng& rng) {
    const int ec = cin * spec.expansion;
    const int pad = (spec.kernel - 1) / 2;
    MBConvOperator<T> op;
    op.spec = spec;
    op.residual = (stride == 1 && cin == cout);
    op.expand = make_conv<T>(cin, ec, 1, 1, pad, 1);
    op.bn1 = make_bn<T>(ec);
    op.dw = make_conv<T>(ec, ec, spec.kernel, stride, 0, ec);
    op.bn2 = make_bn<T>(ec);
    op.project = make_conv<T>(ec, cout, 1, 1, 0, 1);
    op.bn3 = make_bn<T>(cout);
    he_init(op.expand.weight, cin, rng);
    he_init(op.dw.weight, spec.kernel * spec.kernel, rng);
    he_init(op.project.weight, ec, rng);
    return op;
}

template <typename T>
struct MBCache {
    Tensor<T> x0;
    BnCache<T> bn1c, bn2c, bn3c;
    Tensor<T> y1, a1, y2, a2, pre_trail;
};

// Per-BN hook used by inference/calibration paths: (bn_slot, bn, input) -> output.
template <typename T>
using BnApplyFn = std::function<Tensor<T>(int, const BatchNormState<T>&, const Tensor<T>&)>;

template <typename T>
Tensor<T> mbconv_forward_train(MBConvOperator<T>& op, const Tensor<T>& x, double graft_eps,
                               MBCache<T>& cache, bool update_running = true) {
    const double eps_int = op.internal_eps(graft_eps);
    cache.x0 = x;
    Tensor<T> t = conv2d(x, op.expand);
    t = bn_forward_train(t, op.bn1, &cache.bn1c, update_running);
    cache.y1 = t;
    cache.a1 = grafted_activation(t, eps_int);
    t = conv2d(cache.a1, op.dw);
    t = bn_forward_train(t, op.bn2, &cache.bn2c, update_running);
    cache.y2 = t;
    cache.a2 = grafted_activation(t, eps_int);
    t = conv2d(cache.a2, op.project);
    t = bn_forward_train(t, op.bn3, &cache.bn3c, update_running);
    if (op.residual)
        for (size_t i = 0; i < t.data.size(); ++i) t.data[i] += x.data[i];
    if (op.spec.linear) {
        cache.pre_trail = t;
        return relu6(t);
    }
    return t;
}

template <typename T>
Tensor<T> mbconv_forward_eval(const MBConvOperator<T>& op, const Tensor<T>& x, double graft_eps,
                              const BnApplyFn<T>& apply_bn) {
    const double eps_int = op.internal_eps(graft_eps);
    Tensor<T> t = conv2d(x, op.expand);
    t = apply_bn(0, op.bn1, t);
    t = grafted_activation(t, eps_int);
    t = conv2d(t, op.dw);
    t = apply_bn(1, op.bn2, t);
    t = grafted_activation(t, eps_int);
    t = conv2d(t, op.project);
    t = apply_bn(2, op.bn3, t);
    if (op.residual)
        for (size_t i = 0; i < t.data.size(); ++i) t.data[i] += x.data[i];
    if (op.spec.linear) return relu6(t);
    return t;
}

template <typename T>
void mbconv_backward(MBConvOperator<T>& op, const MBCache<T>& cache, double graft_eps,
                     const Tensor<T>& gy, Tensor<T>& gx) {
    const double eps_int = op.internal_eps(graft_eps);
    Tensor<T> g = gy;
    if (op.spec.linear) {
        Tensor<T> tmp;
        relu6_backward(cache.pre_trail, g, tmp);
        g = std::move(tmp);
    }
    Tensor<T> g_res;
    if (op.residual) g_res = g;  // identity branch of the residual add
    Tensor<T> gt;
    bn_backward_train(cache.bn3c, op.bn3, g, gt);
    Tensor<T> ga2;
    conv2d_backward(cache.a2, op.project, gt, &ga2);
    Tensor<T> gy2;
    grafted_backward(cache.y2, eps_int, ga2, gy2);
    bn_backward_train(cache.bn2c, op.bn2, gy2, gt);
    Tensor<T> ga1;
    conv2d_backward(cache.a1, op.dw, gt, &ga1);
    Tensor<T> gy1;
    grafted_backward(cache.y1, eps_int, ga1, gy1);
    bn_backward_train(cache.bn1c, op.bn1, gy1, gt);
    conv2d_backward(cache.x0, op.expand, gt, &gx);
    if (op.residual)
        for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += g_res.data[i];
}

template <typename T>
void mbconv_visit_params(MBConvOperator<T>& op, const std::function<void(Tensor<T>&)>& fn) {
    fn(op.expand.weight);
    fn(op.expand.bias);
    fn(op.bn1.gamma);
    fn(op.bn1.beta);
    fn(op.dw.weight);
    fn(op.dw.bias);
    fn(op.bn2.gamma);
    fn(op.bn2.beta);
    fn(op.project.weight);
    fn(op.project.bias);
    fn(op.bn3.gamma);
    fn(op.bn3.beta);
}

// Named tensors including running stats, for checkpoints.
template <typename T>
void mbconv_visit_named(MBConvOperator<T>& op, const std::string& prefix,
                        const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    auto bn = [&](const std::string& p, BatchNormState<T>& b) {
        fn(p + ".gamma", b.gamma);
        fn(p + ".beta", b.beta);
        fn(p + ".running_mean", b.running_mean);
        fn(p + ".running_var", b.running_var);
    };
    fn(prefix + ".expand.weight", op.expand.weight);
    fn(prefix + ".expand.bias", op.expand.bias);
    bn(prefix + ".bn1", op.bn1);
    fn(prefix + ".dw.weight", op.dw.weight);
    fn(prefix + ".dw.bias", op.dw.bias);
    bn(prefix + ".bn2", op.bn2);
    fn(prefix + ".project.weight", op.project.weight);
    fn(prefix + ".project.bias", op.project.bias);
    bn(prefix + ".bn3", op.bn3);
}

// ---------------------------------------------------------------------------
// Architecture encodings.

// L x N real matrix, no normalization constraint.
using ArchParams = Tensor<float>;

// One selected operator per layer; row sums of the implied binary matrix are 1.
struct OneHotArch {
    int n_ops = kNumOperators;
    std::vector<int> index;  // per-layer selected operator

    bool operator==(const OneHotArch&) const = default;

    std::vector<std::vector<int>> to_matrix() const {
        std::vector<std::vector<int>> m(index.size(), std::vector<int>(static_cast<size_t>(n_ops), 0));
        for (size_t l = 0; l < index.size(); ++l) m[l][static_cast<size_t>(index[l])] = 1;
        return m;
    }

    void validate() const {
        for (int i : index)
            if (i < 0 || i >= n_ops)
                throw DataError("one-hot architecture: operator index " + std::to_string(i) +
                                " out of range [0," + std::to_string(n_ops) + ")");
    }
};

// Per-row argmax; ties broken by lowest index.
inline OneHotArch encode_onehot(const ArchParams& alpha) {
    const int64_t L = alpha.dim(0), N = alpha.dim(1);
    OneHotArch arch;
    arch.n_ops = static_cast<int>(N);
    arch.index.resize(static_cast<size_t>(L));
    for (int64_t l = 0; l < L; ++l) {
        int best = 0;
        for (int64_t n = 1; n < N; ++n)
            if (alpha.at2(l, n) > alpha.at2(l, best)) best = static_cast<int>(n);
        arch.index[static_cast<size_t>(l)] = best;
    }
    return arch;
}

// ---------------------------------------------------------------------------
// Stand-alone network (decoded or transformed).

template <typename T>
struct Stem {
    ConvWeights<T> conv;
    BatchNormState<T> bn;
    bool has_bn = true;
};

template <typename T>
struct Head {
    Tensor<T> w;  // [D, classes]
    Tensor<T> b;  // [classes]
};

template <typename T>
struct CollapsedConv {
    ConvWeights<T> conv;  // groups 1, padding (K-1)/2
    bool trailing_relu6 = true;
};

template <typename T>
struct Block {
    enum class Kind { MBConv, Collapsed };
    Kind kind = Kind::MBConv;
    MBConvOperator<T> mb;
    CollapsedConv<T> col;
};

template <typename T>
struct Network {
    SupernetConfig cfg;
    std::vector<int> arch;  // operator index per searchable layer
    bool transformed = false;
    Stem<T> stem;
    std::vector<Block<T>> blocks;
    Head<T> head;

    void visit_params(const std::function<void(Tensor<T>&)>& fn) {
        fn(stem.conv.weight);
        fn(stem.conv.bias);
        if (stem.has_bn) {
            fn(stem.bn.gamma);
            fn(stem.bn.beta);
        }
        for (Block<T>& b : blocks) {
            if (b.kind == Block<T>::Kind::MBConv)
                mbconv_visit_params(b.mb, fn);
            else {
                fn(b.col.conv.weight);
                fn(b.col.conv.bias);
            }
        }
        fn(head.w);
        fn(head.b);
    }

    void visit_named(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
        fn("stem.conv.weight", stem.conv.weight);
        fn("stem.conv.bias", stem.conv.bias);
        if (stem.has_bn) {
            fn("stem.bn.gamma", stem.bn.gamma);
            fn("stem.bn.beta", stem.bn.beta);
            fn("stem.bn.running_mean", stem.bn.running_mean);
            fn("stem.bn.running_var", stem.bn.running_var);
        }
        for (size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "layer" + std::to_string(i);
            if (blocks[i].kind == Block<T>::Kind::MBConv)
                mbconv_visit_named(blocks[i].mb, p, fn);
            else {
                fn(p + ".collapsed.weight", blocks[i].col.conv.weight);
                fn(p + ".collapsed.bias", blocks[i].col.conv.bias);
            }
        }
        fn("head.fc.weight", head.w);
        fn("head.fc.bias", head.b);
    }

    // Enumerates live BN layers with stable names (calibration targets).
    void visit_bn(const std::function<void(const std::string&, BatchNormState<T>&)>& fn) {
        if (stem.has_bn) fn("stem.bn", stem.bn);
        for (size_t i = 0; i < blocks.size(); ++i) {
            if (blocks[i].kind != Block<T>::Kind::MBConv) continue;
            const std::string p = "layer" + std::to_string(i);
            fn(p + ".bn1", blocks[i].mb.bn1);
            fn(p + ".bn2", blocks[i].mb.bn2);
            fn(p + ".bn3", blocks[i].mb.bn3);
        }
    }

    // Conv-layer count of the searchable part (stem/head excluded).
    int searchable_depth() const {
        int d = 0;
        for (const Block<T>& b : blocks) d += (b.kind == Block<T>::Kind::MBConv) ? 3 : 1;
        return d;
    }

    bool has_linear_op() const {
        for (const Block<T>& b : blocks)
            if (b.kind == Block<T>::Kind::MBConv && b.mb.spec.linear) return true;
        return false;
    }
};

template <typename U, typename T>
Network<U> network_cast(const Network<T>& src) {
    Network<U> out;
    out.cfg = src.cfg;
    out.arch = src.arch;
    out.transformed = src.transformed;
    out.stem.conv = src.stem.conv.template cast<U>();
    out.stem.bn = src.stem.bn.template cast<U>();
    out.stem.has_bn = src.stem.has_bn;
    for (const Block<T>& b : src.blocks) {
        Block<U> nb;
        nb.kind = (b.kind == Block<T>::Kind::MBConv) ? Block<U>::Kind::MBConv : Block<U>::Kind::Collapsed;
        if (b.kind == Block<T>::Kind::MBConv) {
            nb.mb = b.mb.template cast<U>();
        } else {
            nb.col.conv = b.col.conv.template cast<U>();
            nb.col.trailing_relu6 = b.col.trailing_relu6;
        }
        out.blocks.push_back(std::move(nb));
    }
    out.head.w = src.head.w.template cast<U>();
    out.head.b = src.head.b.template cast<U>();
    return out;
}

template <typename T>
struct NetCache {
    Tensor<T> x;
    BnCache<T> stem_bnc;
    Tensor<T> stem_pre;                 // pre-ReLU6 stem output
    std::vector<MBCache<T>> mb;
    std::vector<Tensor<T>> block_in;    // input of each block
    std::vector<Tensor<T>> col_pre;     // pre-ReLU6 output of collapsed blocks
    Tensor<T> gap_in;
    std::vector<int64_t> gap_in_shape;
    Tensor<T> fc_in;
};

template <typename T>
Tensor<T> network_forward_train(Network<T>& net, const Tensor<T>& x, double graft_eps, NetCache<T>& cache,
                                bool update_running = true) {
    cache.x = x;
    Tensor<T> t = conv2d(x, net.stem.conv);
    if (net.stem.has_bn) t = bn_forward_train(t, net.stem.bn, &cache.stem_bnc, update_running);
    cache.stem_pre = t;
    t = relu6(t);
    cache.mb.resize(net.blocks.size());
    cache.block_in.resize(net.blocks.size());
    cache.col_pre.resize(net.blocks.size());
    for (size_t i = 0; i < net.blocks.size(); ++i) {
        cache.block_in[i] = t;
        Block<T>& b = net.blocks[i];
        if (b.kind == Block<T>::Kind::MBConv) {
            t = mbconv_forward_train(b.mb, t, graft_eps, cache.mb[i], update_running);
        } else {
            Tensor<T> y = conv2d(t, b.col.conv);
            cache.col_pre[i] = y;
            t = b.col.trailing_relu6 ? relu6(y) : y;
        }
    }
    cache.gap_in_shape = t.shape;
    cache.gap_in = t;
    Tensor<T> pooled = global_avg_pool(t);
    cache.fc_in = pooled;
    return fully_connected(pooled, net.head.w, net.head.b);
}

template <typename T>
void network_backward(Network<T>& net, NetCache<T>& cache, double graft_eps, const Tensor<T>& glogits) {
    Tensor<T> g;
    fully_connected_backward(cache.fc_in, net.head.w, net.head.b, glogits, &g);
    Tensor<T> g4;
    global_avg_pool_backward(cache.gap_in_shape, g, g4);
    for (size_t ii = net.blocks.size(); ii > 0; --ii) {
        const size_t i = ii - 1;
        Block<T>& b = net.blocks[i];
        Tensor<T> gx;
        if (b.kind == Block<T>::Kind::MBConv) {
            mbconv_backward(b.mb, cache.mb[i], graft_eps, g4, gx);
        } else {
            Tensor<T> gpre;
            if (b.col.trailing_relu6)
                relu6_backward(cache.col_pre[i], g4, gpre);
            else
                gpre = g4;
            conv2d_backward(cache.block_in[i], b.col.conv, gpre, &gx);
        }
        g4 = std::move(gx);
    }
    Tensor<T> gstem;
    relu6_backward(cache.stem_pre, g4, gstem);
    if (net.stem.has_bn) {
        Tensor<T> gb;
        bn_backward_train(cache.stem_bnc, net.stem.bn, gstem, gb);
        gstem = std::move(gb);
    }
    conv2d_backward(cache.x, net.stem.conv, gstem, static_cast<Tensor<T>*>(nullptr));
}

// Per-resolution calibrated statistics: bn name -> (mean, var).
template <typename T>
struct BnStatsMap {
    std::vector<std::pair<std::string, std::pair<std::vector<T>, std::vector<T>>>> stats;

    const std::pair<std::vector<T>, std::vector<T>>* find(const std::string& name) const {
        for (const auto& kv : stats)
            if (kv.first == name) return &kv.second;
        return nullptr;
    }
};

// Inference forward. stats_override substitutes per-layer BN statistics
// (post-training calibration); collector, when set, is called with each BN
// layer's input for statistics accumulation (BNs then normalize by batch
// statistics, as in calibration passes).
template <typename T>
Tensor<T> network_forward_infer(
    const Network<T>& net, const Tensor<T>& x, double graft_eps = 1.0,
    const BnStatsMap<T>* stats_override = nullptr,
    const std::function<void(const std::string&, const Tensor<T>&)>* collector = nullptr) {
    auto apply = [&](const std::string& name, const BatchNormState<T>& bn, const Tensor<T>& in) -> Tensor<T> {
        if (collector) {
            (*collector)(name, in);
            BnCache<T> c;
            return bn_forward_train(in, const_cast<BatchNormState<T>&>(bn), &c, false);
        }
        if (stats_override) {
            if (const auto* s = stats_override->find(name))
                return bn_forward_infer(in, bn, &s->first, &s->second);
        }
        return bn_forward_infer(in, bn);
    };
    Tensor<T> t = conv2d(x, net.stem.conv);
    if (net.stem.has_bn) t = apply("stem.bn", net.stem.bn, t);
    t = relu6(t);
    for (size_t i = 0; i < net.blocks.size(); ++i) {
        const Block<T>& b = net.blocks[i];
        if (b.kind == Block<T>::Kind::MBConv) {
            const std::string p = "layer" + std::to_string(i);
            BnApplyFn<T> fn = [&](int slot, const BatchNormState<T>& bn, const Tensor<T>& in) {
                static const char* names[3] = {".bn1", ".bn2", ".bn3"};
                return apply(p + names[slot], bn, in);
            };
            t = mbconv_forward_eval(b.mb, t, graft_eps, fn);
        } else {
            t = conv2d(t, b.col.conv);
            if (b.col.trailing_relu6) t = relu6(t);
        }
    }
    Tensor<T> pooled = global_avg_pool(t);
    return fully_connected(pooled, net.head.w, net.head.b);
}

// ---------------------------------------------------------------------------
// Supernet.

template <typename T>
struct Supernet {
    SupernetConfig cfg;
    Stem<T> stem;
    std::vector<std::vector<MBConvOperator<T>>> ops;  // [L][12]
    Head<T> head;

    int num_layers() const { return static_cast<int>(ops.size()); }
    int num_candidates() const { return num_layers() * kNumOperators; }

    void visit_params(const std::function<void(Tensor<T>&)>& fn) {
        fn(stem.conv.weight);
        fn(stem.conv.bias);
        fn(stem.bn.gamma);
        fn(stem.bn.beta);
        for (auto& layer : ops)
            for (auto& op : layer) mbconv_visit_params(op, fn);
        fn(head.w);
        fn(head.b);
    }

    void visit_named(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
        fn("stem.conv.weight", stem.conv.weight);
        fn("stem.conv.bias", stem.conv.bias);
        fn("stem.bn.gamma", stem.bn.gamma);
        fn("stem.bn.beta", stem.bn.beta);
        fn("stem.bn.running_mean", stem.bn.running_mean);
        fn("stem.bn.running_var", stem.bn.running_var);
        for (size_t l = 0; l < ops.size(); ++l)
            for (size_t n = 0; n < ops[l].size(); ++n)
                mbconv_visit_named(ops[l][n], "layer" + std::to_string(l) + ".op" + std::to_string(n), fn);
        fn("head.fc.weight", head.w);
        fn("head.fc.bias", head.b);
    }
};

template <typename T>
Supernet<T> build_supernet(const SupernetConfig& cfg, Rng& rng) {
    cfg.validate();
    Supernet<T> net;
    net.cfg = cfg;
    net.stem.conv = make_conv<T>(cfg.input_c, cfg.stem_channels, 3, 2, 1, 1);
    he_init(net.stem.conv.weight, cfg.input_c * 9, rng);
    net.stem.bn = make_bn<T>(cfg.stem_channels);
    const auto& specs = operator_space();
    for (int l = 0; l < cfg.num_layers(); ++l) {
        std::vector<MBConvOperator<T>> layer;
        layer.reserve(kNumOperators);
        for (int n = 0; n < kNumOperators; ++n)
            layer.push_back(make_mbconv<T>(cfg.cin_of(l), cfg.layers[static_cast<size_t>(l)].cout,
                                           cfg.layers[static_cast<size_t>(l)].stride,
                                           specs[static_cast<size_t>(n)], rng));
        net.ops.push_back(std::move(layer));
    }
    const int cls = cfg.classes;
    const int d = cfg.layers.back().cout;
    net.head.w = Tensor<T>({d, cls});
    net.head.b = Tensor<T>({cls});
    he_init(net.head.w, d, rng);
    return net;
}

template <typename T>
struct SupernetPathCache {
    Tensor<T> x;
    BnCache<T> stem_bnc;
    Tensor<T> stem_pre;
    std::vector<MBCache<T>> mb;
    std::vector<Tensor<T>> layer_in;
    std::vector<Tensor<T>> layer_out;  // operator outputs, for straight-through dots
    Tensor<T> gap_in;
    std::vector<int64_t> gap_in_shape;
    Tensor<T> fc_in;
};

// Single-path forward in train mode (graft_eps is 1: linear ops run linear).
template <typename T>
Tensor<T> supernet_forward_path(Supernet<T>& net, const Tensor<T>& x, const std::vector<int>& path,
                                SupernetPathCache<T>& cache, bool update_running = true) {
    cache.x = x;
    Tensor<T> t = conv2d(x, net.stem.conv);
    t = bn_forward_train(t, net.stem.bn, &cache.stem_bnc, update_running);
    cache.stem_pre = t;
    t = relu6(t);
    const size_t L = net.ops.size();
    cache.mb.resize(L);
    cache.layer_in.resize(L);
    cache.layer_out.resize(L);
    for (size_t l = 0; l < L; ++l) {
        cache.layer_in[l] = t;
        t = mbconv_forward_train(net.ops[l][static_cast<size_t>(path[l])], t, 1.0, cache.mb[l],
                                 update_running);
        cache.layer_out[l] = t;
    }
    cache.gap_in_shape = t.shape;
    cache.gap_in = t;
    Tensor<T> pooled = global_avg_pool(t);
    cache.fc_in = pooled;
    return fully_connected(pooled, net.head.w, net.head.b);
}

// Backward along a path. When alpha_dots is non-null it receives, per layer,
// <d loss / d layer_output, layer_output> -- the straight-through gradient of
// the loss w.r.t. the (hard, == 1) selection weight of the chosen operator.
template <typename T>
void supernet_backward_path(Supernet<T>& net, const std::vector<int>& path, SupernetPathCache<T>& cache,
                            const Tensor<T>& glogits, std::vector<double>* alpha_dots) {
    Tensor<T> g;
    fully_connected_backward(cache.fc_in, net.head.w, net.head.b, glogits, &g);
    Tensor<T> g4;
    global_avg_pool_backward(cache.gap_in_shape, g, g4);
    const size_t L = net.ops.size();
    if (alpha_dots) alpha_dots->assign(L, 0.0);
    for (size_t li = L; li > 0; --li) {
        const size_t l = li - 1;
        if (alpha_dots) {
            double dot = 0;
            const Tensor<T>& yl = cache.layer_out[l];
            for (size_t i = 0; i < yl.data.size(); ++i) dot += static_cast<double>(g4.data[i]) * yl.data[i];
            (*alpha_dots)[l] = dot;
        }
        Tensor<T> gx;
        mbconv_backward(net.ops[l][static_cast<size_t>(path[l])], cache.mb[l], 1.0, g4, gx);
        g4 = std::move(gx);
    }
    Tensor<T> gstem;
    relu6_backward(cache.stem_pre, g4, gstem);
    Tensor<T> gb;
    bn_backward_train(cache.stem_bnc, net.stem.bn, gstem, gb);
    conv2d_backward(cache.x, net.stem.conv, gb, static_cast<Tensor<T>*>(nullptr));
}

// Multi-path weighted-sum forward (softmax relaxation); memory-heavy baseline.
template <typename T>
struct SupernetMixCache {
    Tensor<T> x;
    BnCache<T> stem_bnc;
    Tensor<T> stem_pre;
    std::vector<std::vector<MBCache<T>>> mb;     // [L][N]
    std::vector<std::vector<Tensor<T>>> op_out;  // [L][N]
    std::vector<Tensor<T>> layer_in;
    Tensor<T> gap_in;
    std::vector<int64_t> gap_in_shape;
    Tensor<T> fc_in;
};

template <typename T>
Tensor<T> supernet_forward_mix(Supernet<T>& net, const Tensor<T>& x,
                               const std::vector<std::vector<double>>& weights, SupernetMixCache<T>& cache,
                               bool update_running = true) {
    cache.x = x;
    Tensor<T> t = conv2d(x, net.stem.conv);
    t = bn_forward_train(t, net.stem.bn, &cache.stem_bnc, update_running);
    cache.stem_pre = t;
    t = relu6(t);
    const size_t L = net.ops.size();
    cache.mb.assign(L, {});
    cache.op_out.assign(L, {});
    cache.layer_in.resize(L);
    for (size_t l = 0; l < L; ++l) {
        cache.layer_in[l] = t;
        cache.mb[l].resize(net.ops[l].size());
        cache.op_out[l].resize(net.ops[l].size());
        Tensor<T> mix;
        for (size_t n = 0; n < net.ops[l].size(); ++n) {
            Tensor<T> yn = mbconv_forward_train(net.ops[l][n], t, 1.0, cache.mb[l][n], update_running);
            const T wgt = static_cast<T>(weights[l][n]);
            if (n == 0) {
                mix = yn;
                for (T& v : mix.data) v *= wgt;
            } else {
                for (size_t i = 0; i < mix.data.size(); ++i) mix.data[i] += wgt * yn.data[i];
            }
            cache.op_out[l][n] = std::move(yn);
        }
        t = std::move(mix);
    }
    cache.gap_in_shape = t.shape;
    cache.gap_in = t;
    Tensor<T> pooled = global_avg_pool(t);
    cache.fc_in = pooled;
    return fully_connected(pooled, net.head.w, net.head.b);
}

template <typename T>
void supernet_backward_mix(Supernet<T>& net, const std::vector<std::vector<double>>& weights,
                           SupernetMixCache<T>& cache, const Tensor<T>& glogits,
                           std::vector<std::vector<double>>* weight_grads) {
    Tensor<T> g;
    fully_connected_backward(cache.fc_in, net.head.w, net.head.b, glogits, &g);
    Tensor<T> g4;
    global_avg_pool_backward(cache.gap_in_shape, g, g4);
    const size_t L = net.ops.size();
    if (weight_grads) weight_grads->assign(L, {});
    for (size_t li = L; li > 0; --li) {
        const size_t l = li - 1;
        Tensor<T> gin(cache.layer_in[l].shape, T(0));
        if (weight_grads) (*weight_grads)[l].assign(net.ops[l].size(), 0.0);
        for (size_t n = 0; n < net.ops[l].size(); ++n) {
            if (weight_grads) {
                double dot = 0;
                const Tensor<T>& yn = cache.op_out[l][n];
                for (size_t i = 0; i < yn.data.size(); ++i)
                    dot += static_cast<double>(g4.data[i]) * yn.data[i];
                (*weight_grads)[l][n] = dot;
            }
            Tensor<T> gyn = g4;
            const T wgt = static_cast<T>(weights[l][n]);
            for (T& v : gyn.data) v *= wgt;
            Tensor<T> gx;
            mbconv_backward(net.ops[l][n], cache.mb[l][n], 1.0, gyn, gx);
            for (size_t i = 0; i < gin.data.size(); ++i) gin.data[i] += gx.data[i];
        }
        g4 = std::move(gin);
    }
    Tensor<T> gstem;
    relu6_backward(cache.stem_pre, g4, gstem);
    Tensor<T> gb;
    bn_backward_train(cache.stem_bnc, net.stem.bn, gstem, gb);
    conv2d_backward(cache.x, net.stem.conv, gb, static_cast<Tensor<T>*>(nullptr));
}

// Stand-alone network with the selected operators' weights copied out.
template <typename T>
Network<T> decode_architecture(const OneHotArch& arch, const Supernet<T>& supernet) {
    arch.validate();
    if (static_cast<int>(arch.index.size()) != supernet.num_layers())
        throw DimensionError("decode: architecture has " + std::to_string(arch.index.size()) +
                             " layers, supernet has " + std::to_string(supernet.num_layers()));
    Network<T> net;
    net.cfg = supernet.cfg;
    net.arch = arch.index;
    net.stem = supernet.stem;
    for (size_t l = 0; l < arch.index.size(); ++l) {
        Block<T> b;
        b.kind = Block<T>::Kind::MBConv;
        b.mb = supernet.ops[l][static_cast<size_t>(arch.index[l])];
        net.blocks.push_back(std::move(b));
    }
    net.head = supernet.head;
    return net;
}

// Fresh-weight network for a given architecture (train-from-scratch path).
template <typename T>
Network<T> build_network(const SupernetConfig& cfg, const std::vector<int>& arch, Rng& rng) {
    cfg.validate();
    if (static_cast<int>(arch.size()) != cfg.num_layers())
        throw DimensionError("build_network: arch length != layer count");
    Network<T> net;
    net.cfg = cfg;
    net.arch = arch;
    net.stem.conv = make_conv<T>(cfg.input_c, cfg.stem_channels, 3, 2, 1, 1);
    he_init(net.stem.conv.weight, cfg.input_c * 9, rng);
    net.stem.bn = make_bn<T>(cfg.stem_channels);
    const auto& specs = operator_space();
    for (int l = 0; l < cfg.num_layers(); ++l) {
        Block<T> b;
        b.kind = Block<T>::Kind::MBConv;
        b.mb = make_mbconv<T>(cfg.cin_of(l), cfg.layers[static_cast<size_t>(l)].cout,
                              cfg.layers[static_cast<size_t>(l)].stride,
                              specs[static_cast<size_t>(arch[static_cast<size_t>(l)])], rng);
        net.blocks.push_back(std::move(b));
    }
    const int d = cfg.layers.back().cout;
    net.head.w = Tensor<T>({d, cfg.classes});
    net.head.b = Tensor<T>({cfg.classes});
    he_init(net.head.w, d, rng);
    return net;
}

}  // namespace dwnas
