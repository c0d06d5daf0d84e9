// Acceptance suite: one pass/fail line per criterion. Each criterion states
// its oracle and tolerance inline; runtime limits are part of the criterion.
// Run without arguments for the full suite, or pass criterion numbers to run
// a subset (exit code 0 iff everything requested passed).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "dwnas/commands.hpp"
#include "dwnas/config.hpp"
#include "dwnas/gradcheck.hpp"
#include "dwnas/search.hpp"
#include "dwnas/training.hpp"
#include "dwnas/transform.hpp"

using namespace dwnas;
namespace fs = std::filesystem;

namespace {

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename T>
Tensor<T> randn(std::vector<int64_t> shape, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (T& v : t.data) v = static_cast<T>(rng.normal());
    return t;
}

template <typename T>
void randomize_bn(BatchNormState<T>& bn, Rng& rng) {
    for (T& v : bn.gamma.data) v = static_cast<T>(1.0 + 0.3 * rng.normal());
    for (T& v : bn.beta.data) v = static_cast<T>(0.2 * rng.normal());
    for (T& v : bn.running_mean.data) v = static_cast<T>(0.3 * rng.normal());
    for (T& v : bn.running_var.data) v = static_cast<T>(0.5 + 0.4 * rng.uniform());
}

template <typename T>
MBConvOperator<T> random_linear_op(int cin, int cout, int stride, const OperatorSpec& sp, Rng& rng) {
    auto op = make_mbconv<T>(cin, cout, stride, sp, rng);
    randomize_bn(op.bn1, rng);
    randomize_bn(op.bn2, rng);
    randomize_bn(op.bn3, rng);
    for (T& v : op.expand.bias.data) v = static_cast<T>(0.2 * rng.normal());
    for (T& v : op.dw.bias.data) v = static_cast<T>(0.2 * rng.normal());
    for (T& v : op.project.bias.data) v = static_cast<T>(0.2 * rng.normal());
    return op;
}

template <typename T>
BnApplyFn<T> infer_bn() {
    return [](int, const BatchNormState<T>& bn, const Tensor<T>& in) { return bn_forward_infer(in, bn); };
}

// Mixed architecture used by the end-to-end checks: linear operators at
// layers 0, 1, 3, 5 (two of them residual), non-linear elsewhere.
const std::vector<int> kMixedArch = {6, 7, 2, 9, 4, 11};

Dataset head_split(const Dataset& ds, int64_t n) {
    Dataset v;
    v.C = ds.C;
    v.H = ds.H;
    v.W = ds.W;
    v.classes = ds.classes;
    v.count = n;
    const size_t stride = static_cast<size_t>(ds.C * ds.H * ds.W);
    v.images.assign(ds.images.begin(),
                    ds.images.begin() + static_cast<long>(stride * static_cast<size_t>(n)));
    v.labels.assign(ds.labels.begin(), ds.labels.begin() + static_cast<long>(n));
    return v;
}

Dataset tail_split(const Dataset& ds, int64_t n) {
    Dataset v;
    v.C = ds.C;
    v.H = ds.H;
    v.W = ds.W;
    v.classes = ds.classes;
    v.count = n;
    const size_t stride = static_cast<size_t>(ds.C * ds.H * ds.W);
    v.images.assign(ds.images.end() - static_cast<long>(stride * static_cast<size_t>(n)),
                    ds.images.end());
    v.labels.assign(ds.labels.end() - static_cast<long>(n), ds.labels.end());
    return v;
}

// ---------------------------------------------------------------------------
// 1. Transformation exactness.

bool criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(101);
    std::vector<OperatorSpec> linear_specs;
    for (const OperatorSpec& sp : operator_space())
        if (sp.linear) linear_specs.push_back(sp);

    double worst64 = 0, worst32 = 0;
    for (int rep = 0; rep < 100; ++rep) {
        const OperatorSpec sp = linear_specs[static_cast<size_t>(rep) % linear_specs.size()];
        const int stride = (rep / 6) % 2 + 1;
        const int cin = 4;
        const int cout = (stride == 1 && rep % 2 == 0) ? 4 : 6;  // residual on/off
        auto op = random_linear_op<double>(cin, cout, stride, sp, rng);
        CollapsedConv<double> c = collapse_mbconv(op);
        auto op32 = op.template cast<float>();
        CollapsedConv<float> c32 = collapse_mbconv(op32);
        Tensor<double> x = randn<double>({100, cin, 10, 10}, rng);  // 100 inputs, batched
        Tensor<double> ref = mbconv_forward_eval(op, x, 1.0, infer_bn<double>());
        Tensor<double> got = relu6(conv2d(x, c.conv));
        for (size_t i = 0; i < ref.data.size(); ++i)
            worst64 = std::max(worst64, std::abs(ref.data[i] - got.data[i]));
        Tensor<float> x32 = x.cast<float>();
        Tensor<float> ref32 = mbconv_forward_eval(op32, x32, 1.0, infer_bn<float>());
        Tensor<float> got32 = relu6(conv2d(x32, c32.conv));
        for (size_t i = 0; i < ref32.data.size(); ++i)
            worst32 = std::max(worst32, static_cast<double>(std::abs(ref32.data[i] - got32.data[i])));
    }

    // end to end: briefly train a mixed network so BN statistics are live,
    // then transform and compare logits over 10^4 random inputs
    SupernetConfig cfg = SupernetConfig::desk_default();
    Rng init(102);
    Network<float> net = build_network<float>(cfg, kMixedArch, init);
    Dataset ds = synth_dataset(103, 10, 512, 3, 32, 32);
    TrainSchedule sched;
    sched.total_epochs = 1;
    sched.e_total = 0;
    Rng trng(104);
    train_standard(net, ds, sched, trng);
    Network<float> shallow = transform_network(net);
    Rng probe(105);
    EquivalenceReport rep = verify_equivalence(net, shallow, 10000, 1e-3, probe, 40);

    const double el = seconds_since(t0);
    const bool ok = worst64 <= 1e-10 && worst32 <= 1e-4 && rep.max_abs <= 1e-3 &&
                    rep.argmax_agreement >= 0.999 && el <= 120.0;
    std::printf("criterion 1 (transformation exactness): %s  [op diff f64=%.3g f32=%.3g, "
                "logit max=%.3g, argmax=%.4f, %.1fs]\n",
                ok ? "PASS" : "FAIL", worst64, worst32, rep.max_abs, rep.argmax_agreement, el);
    return ok;
}

// ---------------------------------------------------------------------------
// 2. Kernel-size law K* = K1 + K2 - 1.

bool criterion2() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(201);
    bool shapes_ok = true;
    for (int k1 : {1, 3, 5, 7})
        for (int k2 : {1, 3, 5, 7}) {
            auto a = make_conv<double>(3, 4, k1, 1, (k1 - 1) / 2, 1);
            auto b = make_conv<double>(4, 5, k2, 1, (k2 - 1) / 2, 1);
            for (double& v : a.weight.data) v = rng.normal();
            for (double& v : b.weight.data) v = rng.normal();
            ConvWeights<double> m = merge_conv_pair(a, b);
            shapes_ok = shapes_ok && static_cast<int>(m.k()) == k1 + k2 - 1 &&
                        m.padding == a.padding + b.padding && m.cin() == 3 && m.cout() == 5;
        }

    // dual construction: direct triple-product collapse vs expanding the
    // depthwise to a sparse groups-1 conv and double-merging
    double worst = 0;
    for (const OperatorSpec& sp : operator_space()) {
        if (!sp.linear) continue;
        auto op = random_linear_op<double>(3, 5, 1, sp, rng);
        op.residual = false;  // merge path does not model the residual
        CollapsedConv<double> c = collapse_mbconv(op);
        const ConvWeights<double> e = fold_bn(op.expand, op.bn1);
        const ConvWeights<double> d = fold_bn(op.dw, op.bn2);
        const ConvWeights<double> p = fold_bn(op.project, op.bn3);
        const int64_t Cm = d.cin();
        const int K = static_cast<int>(d.k());
        auto dd = make_conv<double>(Cm, Cm, K, 1, 0, 1);
        for (int64_t ch = 0; ch < Cm; ++ch)
            for (int kk = 0; kk < K * K; ++kk)
                dd.weight.data[static_cast<size_t>((ch * Cm + ch) * K * K + kk)] =
                    d.weight.data[static_cast<size_t>(ch * K * K + kk)];
        dd.bias = d.bias;
        ConvWeights<double> full = merge_conv_pair(merge_conv_pair(e, dd), p);
        for (size_t i = 0; i < full.weight.data.size(); ++i)
            worst = std::max(worst, std::abs(full.weight.data[i] - c.conv.weight.data[i]));
        for (size_t i = 0; i < full.bias.data.size(); ++i)
            worst = std::max(worst, std::abs(full.bias.data[i] - c.conv.bias.data[i]));
    }

    const double el = seconds_since(t0);
    const bool ok = shapes_ok && worst <= 1e-12 && el <= 60.0;
    std::printf("criterion 2 (kernel-size law): %s  [shapes %s, dual-construction diff=%.3g, %.1fs]\n",
                ok ? "PASS" : "FAIL", shapes_ok ? "ok" : "bad", worst, el);
    return ok;
}

// ---------------------------------------------------------------------------
// 3. Gradient integrity: finite differences in f64, rel err <= 1e-5.

struct LayerCheck {
    std::vector<Tensor<double>*> params;
    std::function<Tensor<double>()> fwd;
    std::function<void(const Tensor<double>&)> bwd;  // fills params' grads
};

double run_layer_check(LayerCheck& lc, Rng& rng) {
    Tensor<double> y0 = lc.fwd();
    Tensor<double> proj = randn<double>(y0.shape, rng);
    auto pack = [&]() {
        std::vector<double> v;
        for (auto* p : lc.params) v.insert(v.end(), p->data.begin(), p->data.end());
        return v;
    };
    auto unpack = [&](const std::vector<double>& v) {
        size_t o = 0;
        for (auto* p : lc.params) {
            std::copy(v.begin() + static_cast<long>(o), v.begin() + static_cast<long>(o + p->data.size()),
                      p->data.begin());
            o += p->data.size();
        }
    };
    const std::vector<double> x0 = pack();
    for (auto* p : lc.params) {
        p->ensure_grad();
        p->zero_grad();
    }
    lc.fwd();
    lc.bwd(proj);
    std::vector<double> analytic;
    for (auto* p : lc.params) analytic.insert(analytic.end(), p->grad.begin(), p->grad.end());
    auto f = [&](const std::vector<double>& v) {
        unpack(v);
        Tensor<double> y = lc.fwd();
        double s = 0;
        for (size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * proj.data[i];
        return s;
    };
    const double rel = grad_check(f, x0, analytic);
    unpack(x0);
    return rel;
}

// Samples away from the ReLU6 kinks at 0 and 6 so central differences stay
// one-sided-free.
double kink_safe(Rng& rng) {
    for (;;) {
        const double v = rng.uniform(-3.0, 9.0);
        if (std::abs(v) > 1e-3 && std::abs(v - 6.0) > 1e-3) return v;
    }
}

bool criterion3() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0;
    std::string worst_layer = "none";
    auto record = [&](const char* name, double rel) {
        if (rel > worst) {
            worst = rel;
            worst_layer = name;
        }
    };

    for (int trial = 0; trial < 10; ++trial) {
        Rng rng(301 + static_cast<uint64_t>(trial));

        {  // dense conv, stride 1/2 alternating, padding 1
            auto cw = make_conv<double>(3, 4, 3, trial % 2 + 1, 1, 1);
            for (double& v : cw.weight.data) v = 0.5 * rng.normal();
            for (double& v : cw.bias.data) v = 0.2 * rng.normal();
            Tensor<double> x = randn<double>({2, 3, 8, 8}, rng);
            LayerCheck lc;
            lc.params = {&cw.weight, &cw.bias, &x};
            lc.fwd = [&]() { return conv2d(x, cw); };
            lc.bwd = [&](const Tensor<double>& gy) {
                Tensor<double> gx;
                conv2d_backward(x, cw, gy, &gx);
                x.grad = gx.data;
            };
            record("conv_dense", run_layer_check(lc, rng));
        }
        {  // 1x1 conv with padding (the padded-expand geometry)
            auto cw = make_conv<double>(3, 5, 1, trial % 2 + 1, 1, 1);
            for (double& v : cw.weight.data) v = 0.5 * rng.normal();
            for (double& v : cw.bias.data) v = 0.2 * rng.normal();
            Tensor<double> x = randn<double>({2, 3, 7, 7}, rng);
            LayerCheck lc;
            lc.params = {&cw.weight, &cw.bias, &x};
            lc.fwd = [&]() { return conv2d(x, cw); };
            lc.bwd = [&](const Tensor<double>& gy) {
                Tensor<double> gx;
                conv2d_backward(x, cw, gy, &gx);
                x.grad = gx.data;
            };
            record("conv_1x1_padded", run_layer_check(lc, rng));
        }
        {  // depthwise, K 3/5/7 rotating, valid padding
            const int K = 3 + 2 * (trial % 3);
            auto cw = make_conv<double>(4, 4, K, trial % 2 + 1, 0, 4);
            for (double& v : cw.weight.data) v = 0.5 * rng.normal();
            for (double& v : cw.bias.data) v = 0.2 * rng.normal();
            Tensor<double> x = randn<double>({2, 4, 9, 9}, rng);
            LayerCheck lc;
            lc.params = {&cw.weight, &cw.bias, &x};
            lc.fwd = [&]() { return conv2d(x, cw); };
            lc.bwd = [&](const Tensor<double>& gy) {
                Tensor<double> gx;
                conv2d_backward(x, cw, gy, &gx);
                x.grad = gx.data;
            };
            record("conv_depthwise", run_layer_check(lc, rng));
        }
        {  // batch norm, train mode
            auto bn = make_bn<double>(4);
            for (double& v : bn.gamma.data) v = 1.0 + 0.3 * rng.normal();
            for (double& v : bn.beta.data) v = 0.2 * rng.normal();
            Tensor<double> x = randn<double>({3, 4, 5, 5}, rng);
            BnCache<double> cache;
            LayerCheck lc;
            lc.params = {&bn.gamma, &bn.beta, &x};
            lc.fwd = [&]() { return bn_forward_train(x, bn, &cache, false); };
            lc.bwd = [&](const Tensor<double>& gy) {
                Tensor<double> gx;
                bn_backward_train(cache, bn, gy, gx);
                x.grad = gx.data;
            };
            record("batch_norm", run_layer_check(lc, rng));
        }
        {  // relu6 away from its kinks
            Tensor<double> x({2, 3, 4, 4});
            for (double& v : x.data) v = kink_safe(rng);
            LayerCheck lc;
            lc.params = {&x};
            lc.fwd = [&]() { return relu6(x); };
            lc.bwd = [&](const Tensor<double>& gy) {
                Tensor<double> gx;
                relu6_backward(x, gy, gx);
                x.grad = gx.data;
            };
            record("relu6", run_layer_check(lc, rng));
        }
        {  // grafted activation at eps = 0.5
            Tensor<double> x({2, 3, 4, 4});
            for (double& v : x.data) v = kink_safe(rng);
            LayerCheck lc;
            lc.params = {&x};
            lc.fwd = [&]() { return grafted_activation(x, 0.5); };
            lc.bwd = [&](const Tensor<double>& gy) {
                Tensor<double> gx;
                grafted_backward(x, 0.5, gy, gx);
                x.grad = gx.data;
            };
            record("grafted", run_layer_check(lc, rng));
        }
        {  // global average pool
            Tensor<double> x = randn<double>({2, 5, 4, 4}, rng);
            LayerCheck lc;
            lc.params = {&x};
            lc.fwd = [&]() { return global_avg_pool(x); };
            lc.bwd = [&](const Tensor<double>& gy) {
                Tensor<double> gx;
                global_avg_pool_backward(x.shape, gy, gx);
                x.grad = gx.data;
            };
            record("global_avg_pool", run_layer_check(lc, rng));
        }
        {  // fully connected
            Tensor<double> w = randn<double>({4, 3}, rng);
            Tensor<double> b = randn<double>({3}, rng);
            Tensor<double> x = randn<double>({2, 4}, rng);
            LayerCheck lc;
            lc.params = {&w, &b, &x};
            lc.fwd = [&]() { return fully_connected(x, w, b); };
            lc.bwd = [&](const Tensor<double>& gy) {
                Tensor<double> gx;
                fully_connected_backward(x, w, b, gy, &gx);
                x.grad = gx.data;
            };
            record("fully_connected", run_layer_check(lc, rng));
        }
        {  // softmax cross entropy: scalar loss, input gradient
            Tensor<double> logits = randn<double>({3, 5}, rng);
            std::vector<int> labels(3);
            for (int& l : labels) l = static_cast<int>(rng.randint(5));
            Tensor<double> g;
            softmax_cross_entropy(logits, labels, &g);
            auto f = [&](const std::vector<double>& v) {
                Tensor<double> t = logits;
                t.data = v;
                return softmax_cross_entropy(t, labels, static_cast<Tensor<double>*>(nullptr));
            };
            record("softmax_ce", grad_check(f, logits.data, g.data));
        }
        {  // KL divergence: student-logit gradient (teacher detached)
            Tensor<double> student = randn<double>({3, 5}, rng);
            Tensor<double> teacher = randn<double>({3, 5}, rng);
            Tensor<double> g;
            kl_divergence(student, teacher, &g);
            auto f = [&](const std::vector<double>& v) {
                Tensor<double> t = student;
                t.data = v;
                return kl_divergence(t, teacher, static_cast<Tensor<double>*>(nullptr));
            };
            record("kl_divergence", grad_check(f, student.data, g.data));
        }
        {  // full MBConv block (linear and non-linear alternating), eps 0.5
            const OperatorSpec sp =
                trial % 2 ? OperatorSpec{3, 3, true} : OperatorSpec{5, 3, false};
            auto op = make_mbconv<double>(3, 3, 1, sp, rng);
            Tensor<double> x = randn<double>({2, 3, 8, 8}, rng);
            MBCache<double> cache;
            LayerCheck lc;
            mbconv_visit_params<double>(op, [&](Tensor<double>& p) { lc.params.push_back(&p); });
            lc.params.push_back(&x);
            lc.fwd = [&]() { return mbconv_forward_train(op, x, 0.5, cache, false); };
            lc.bwd = [&](const Tensor<double>& gy) {
                Tensor<double> gx;
                mbconv_backward(op, cache, 0.5, gy, gx);
                x.grad = gx.data;
            };
            record("mbconv_block", run_layer_check(lc, rng));
        }
        {  // latency predictor MLP: parameters and input
            LatencyModel<double> m = make_latency_model<double>(12, rng, 16, 8);
            Tensor<double> x({2, 12});
            for (double& v : x.data) v = rng.uniform();
            MlpCache<double> cache;
            LayerCheck lc;
            m.visit_params([&](Tensor<double>& p) { lc.params.push_back(&p); });
            lc.params.push_back(&x);
            lc.fwd = [&]() { return mlp_forward(m, x, &cache); };
            lc.bwd = [&](const Tensor<double>& gy) {
                Tensor<double> gx;
                mlp_backward(m, cache, gy, &gx);
                x.grad = gx.data;
            };
            record("latency_predictor", run_layer_check(lc, rng));
        }
    }

    const double el = seconds_since(t0);
    const bool ok = worst <= 1e-5 && el <= 120.0;
    std::printf("criterion 3 (gradient integrity): %s  [worst rel=%.3g at %s, %.1fs]\n",
                ok ? "PASS" : "FAIL", worst, worst_layer.c_str(), el);
    return ok;
}

// ---------------------------------------------------------------------------
// 4. Constraint controller at the latency-range midpoint, 3 seeds.

LatencyModel<float> fit_desk_predictor(const SupernetConfig& cfg, const OracleParams& oracle) {
    OracleParams o0 = oracle;
    o0.sigma = 0;
    Rng prng(1234);
    std::vector<LatencyPair> pairs = generate_pairs(cfg, 1000, o0, prng);
    LatencyModel<float> pred = make_latency_model<float>(cfg.num_layers() * kNumOperators, prng);
    fit_predictor(pred, pairs, 0.8, 150, prng);
    return pred;
}

bool criterion4() {
    SupernetConfig cfg = SupernetConfig::desk_default();
    OracleParams oracle;
    OracleParams o0 = oracle;
    o0.sigma = 0;
    LatencyModel<float> pred = fit_desk_predictor(cfg, oracle);
    const auto [lo, hi] = latency_range(cfg, oracle);
    const double T = 0.5 * (lo + hi);

    bool ok = true;
    std::vector<double> rels;
    int sign_viol = 0;
    double worst_seed_time = 0;
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        const auto t0 = std::chrono::steady_clock::now();
        Dataset ds = synth_dataset(seed * 1000 + 7, 10, 2048, 3, 32, 32);
        SearchConfig sc;
        sc.constraint_ms = T;
        SearchState st(cfg, sc, Rng(seed));
        SearchResult res = run_search(st, ds, pred, sc, oracle);
        Rng dummy(0);
        const double lat = synthetic_oracle(costs_from_arch(cfg, res.arch.index), o0, dummy);
        rels.push_back(std::abs(lat - T) / T);
        double prev = 0;
        for (const json& t : res.trace) {
            const double l = t.at("lambda").get<double>();
            const double inc = l - prev;
            const double diff = t.at("lat_pred_ms").get<double>() - T;
            if ((inc > 0 && diff <= 0) || (inc < 0 && diff >= 0) || (inc == 0 && diff != 0)) ++sign_viol;
            prev = l;
        }
        const double el = seconds_since(t0);
        worst_seed_time = std::max(worst_seed_time, el);
        ok = ok && rels.back() <= 0.05 && el <= 600.0;
    }
    ok = ok && sign_viol == 0;
    std::printf("criterion 4 (constraint controller): %s  [T=%.3f ms, rel err %.3f/%.3f/%.3f, "
                "sign violations=%d, worst seed %.0fs]\n",
                ok ? "PASS" : "FAIL", T, rels[0], rels[1], rels[2], sign_viol, worst_seed_time);
    return ok;
}

// ---------------------------------------------------------------------------
// 5. Sampler distribution.

bool criterion5() {
    const auto t0 = std::chrono::steady_clock::now();

    // (a) Plackett-Luce chi-square over all 6 orderings of N=3
    ArchParams alpha({1, 3});
    alpha.at2(0, 0) = 0.6f;
    alpha.at2(0, 1) = 0.0f;
    alpha.at2(0, 2) = -0.4f;
    std::vector<double> p = {0, 0, 0};
    {
        double z = 0;
        for (int i = 0; i < 3; ++i) z += std::exp(static_cast<double>(alpha.at2(0, i)));
        for (int i = 0; i < 3; ++i) p[static_cast<size_t>(i)] = std::exp(static_cast<double>(alpha.at2(0, i))) / z;
    }
    std::map<std::vector<int>, int64_t> counts;
    Rng rng(501);
    const int64_t draws = 100000;
    for (int64_t i = 0; i < draws; ++i) ++counts[gumbel_topk_order(alpha, 5.0, rng).order[0]];
    double chi2 = 0;
    int perms = 0;
    std::vector<int> perm = {0, 1, 2};
    std::sort(perm.begin(), perm.end());
    do {
        const double pa = p[static_cast<size_t>(perm[0])];
        const double pb = p[static_cast<size_t>(perm[1])];
        const double pc = p[static_cast<size_t>(perm[2])];
        const double expect = static_cast<double>(draws) * pa * pb / (pb + pc);
        const double c = static_cast<double>(counts[perm]);
        chi2 += (c - expect) * (c - expect) / expect;
        ++perms;
    } while (std::next_permutation(perm.begin(), perm.end()));
    // 5 degrees of freedom; statistic below the p=0.001 critical value 20.515
    const bool chi_ok = perms == 6 && chi2 < 20.515;

    // (b) sandwich coverage >= single-path coverage, 3 paired seeds
    SupernetConfig tiny;
    tiny.input_c = 3;
    tiny.input_hw = 16;
    tiny.stem_channels = 8;
    tiny.classes = 4;
    tiny.layers = {{8, 2}, {8, 1}};
    OracleParams oracle;
    bool paired_ok = true;
    Rng prng(502);
    LatencyModel<float> pred = make_latency_model<float>(tiny.num_layers() * kNumOperators, prng);
    for (uint64_t seed : {51ull, 52ull, 53ull}) {
        Dataset ds = synth_dataset(seed, 4, 256, 3, 16, 16);
        double cov[2];
        int i = 0;
        for (const char* strat : {"sandwich", "gdas_single"}) {
            SearchConfig sc;
            sc.strategy = strat;
            sc.epochs = 2;
            sc.alpha_freeze_epochs = 2;
            sc.batch = 32;
            sc.constraint_ms = 1.0;
            SearchState st(tiny, sc, Rng(seed));
            run_search(st, ds, pred, sc, oracle);
            cov[i++] = st.coverage();
        }
        paired_ok = paired_ok && cov[0] >= cov[1];
    }

    // (c) sandwich covers all 12 operators per layer within the first
    // (frozen-alpha) epoch of the desk search
    SupernetConfig cfg = SupernetConfig::desk_default();
    Rng prng2(503);
    LatencyModel<float> pred2 = make_latency_model<float>(cfg.num_layers() * kNumOperators, prng2);
    Dataset ds = synth_dataset(504, 10, 2048, 3, 32, 32);
    SearchConfig sc;
    sc.epochs = 1;
    sc.alpha_freeze_epochs = 1;
    sc.constraint_ms = 1.0;
    SearchState st(cfg, sc, Rng(505));
    run_search(st, ds, pred2, sc, oracle);
    const bool full_cov = st.coverage() == 1.0;

    const double el = seconds_since(t0);
    const bool ok = chi_ok && paired_ok && full_cov && el <= 180.0;
    std::printf("criterion 5 (sampler distribution): %s  [chi2=%.2f (<20.515), paired coverage %s, "
                "first-epoch coverage %.3f, %.1fs]\n",
                ok ? "PASS" : "FAIL", chi2, paired_ok ? "ok" : "bad", st.coverage(), el);
    return ok;
}

// ---------------------------------------------------------------------------
// 6. Latency predictor accuracy and rank fidelity.

bool criterion6() {
    const auto t0 = std::chrono::steady_clock::now();
    SupernetConfig cfg = SupernetConfig::desk_default();
    OracleParams op;
    op.sigma = 0;
    Rng rng(601);
    std::vector<LatencyPair> pairs = generate_pairs(cfg, 1000, op, rng);
    double lo = 1e300, hi = -1e300;
    for (const LatencyPair& p : pairs) {
        lo = std::min(lo, p.latency_ms);
        hi = std::max(hi, p.latency_ms);
    }
    LatencyModel<float> m = make_latency_model<float>(72, rng);
    FitReport rep = fit_predictor(m, pairs, 0.8, 150, rng);

    // rank fidelity on fresh architectures
    Rng hrng(602);
    std::vector<double> pred, truth;
    for (int i = 0; i < 200; ++i) {
        std::vector<int> arch(6);
        for (int& v : arch) v = static_cast<int>(hrng.randint(kNumOperators));
        Rng orng(0);
        truth.push_back(synthetic_oracle(costs_from_arch(cfg, arch), op, orng));
        pred.push_back(predict(m, OneHotArch{12, arch}));
    }
    auto ranks = [](const std::vector<double>& v) {
        std::vector<size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), size_t{0});
        std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) { return v[i] < v[j]; });
        std::vector<double> r(v.size());
        for (size_t k = 0; k < idx.size(); ++k) r[idx[k]] = static_cast<double>(k);
        return r;
    };
    const std::vector<double> ra = ranks(pred), rb = ranks(truth);
    double ma = 0, mb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= static_cast<double>(ra.size());
    mb /= static_cast<double>(rb.size());
    double num = 0, da = 0, db = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    const double rho = num / std::sqrt(da * db);

    const double el = seconds_since(t0);
    const bool ok = rep.val_rmse <= 0.02 * (hi - lo) && rho >= 0.95 && el <= 120.0;
    std::printf("criterion 6 (latency predictor): %s  [val RMSE=%.4f (<=%.4f), spearman=%.4f, %.1fs]\n",
                ok ? "PASS" : "FAIL", rep.val_rmse, 0.02 * (hi - lo), rho, el);
    return ok;
}

// ---------------------------------------------------------------------------
// 7. Grafted activation endpoints, bitwise.

Tensor<float> pure_linear_forward(const Network<float>& net, const Tensor<float>& x) {
    Tensor<float> t = conv2d(x, net.stem.conv);
    if (net.stem.has_bn) t = bn_forward_infer(t, net.stem.bn);
    t = relu6(t);
    for (const Block<float>& b : net.blocks) {
        if (b.kind == Block<float>::Kind::MBConv && b.mb.spec.linear) {
            // the collapsible chain written with no internal activation calls
            Tensor<float> u = conv2d(t, b.mb.expand);
            u = bn_forward_infer(u, b.mb.bn1);
            u = conv2d(u, b.mb.dw);
            u = bn_forward_infer(u, b.mb.bn2);
            u = conv2d(u, b.mb.project);
            u = bn_forward_infer(u, b.mb.bn3);
            if (b.mb.residual)
                for (size_t i = 0; i < u.data.size(); ++i) u.data[i] += t.data[i];
            t = relu6(u);
        } else if (b.kind == Block<float>::Kind::MBConv) {
            t = mbconv_forward_eval(b.mb, t, 1.0, infer_bn<float>());
        } else {
            t = conv2d(t, b.col.conv);
            if (b.col.trailing_relu6) t = relu6(t);
        }
    }
    Tensor<float> pooled = global_avg_pool(t);
    return fully_connected(pooled, net.head.w, net.head.b);
}

bool criterion7() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(701);
    Tensor<float> x = randn<float>({4, 3, 6, 6}, rng);
    Tensor<float> e0 = grafted_activation(x, 0.0);
    Tensor<float> r = relu6(x);
    Tensor<float> e1 = grafted_activation(x, 1.0);
    const bool ends_ok = e0.data == r.data && e1.data == x.data;

    // after the grafting horizon the schedule is exactly 1
    const bool sched_ok = epsilon_schedule(10, 10) == 1.0 && epsilon_schedule(37, 10) == 1.0;

    // hybrid forward at eps=1 equals the pure-linear forward bitwise
    SupernetConfig cfg = SupernetConfig::desk_default();
    Rng init(702);
    Network<float> net = build_network<float>(cfg, kMixedArch, init);
    for (Block<float>& b : net.blocks) {
        if (b.kind != Block<float>::Kind::MBConv) continue;
        Rng brng(703);
        randomize_bn(b.mb.bn1, brng);
        randomize_bn(b.mb.bn2, brng);
        randomize_bn(b.mb.bn3, brng);
    }
    Tensor<float> xb = randn<float>({8, 3, 32, 32}, rng);
    Tensor<float> ya = network_forward_infer(net, xb, 1.0);
    Tensor<float> yb = pure_linear_forward(net, xb);
    const bool net_ok = ya.data == yb.data;

    const double el = seconds_since(t0);
    const bool ok = ends_ok && sched_ok && net_ok && el <= 60.0;
    std::printf("criterion 7 (grafted endpoints): %s  [eps=0 relu6 %s, eps=1 identity %s, "
                "network bitwise %s, %.1fs]\n",
                ok ? "PASS" : "FAIL", e0.data == r.data ? "ok" : "bad",
                e1.data == x.data ? "ok" : "bad", net_ok ? "ok" : "bad", el);
    return ok;
}

// ---------------------------------------------------------------------------
// 8. Elastic/calibration qualitative analogs, 3 seeds (soft 2-of-3).

void run_elastic_training(Network<float>& net, const Dataset& train, const ResolutionGrid& grid,
                          int epochs, bool distill, uint64_t seed) {
    SgdMomentum<float> opt(0.02f, 0.9f, 1e-4f);
    Rng rng(seed);
    std::vector<size_t> order(static_cast<size_t>(train.count));
    std::iota(order.begin(), order.end(), size_t{0});
    for (int e = 0; e < epochs; ++e) {
        opt.set_lr(static_cast<float>(cosine_lr(0.02, e, epochs)));
        rng.shuffle(order);
        for (size_t start = 0; start + 2 <= order.size(); start += 64) {
            const size_t end = std::min(order.size(), start + 64);
            if (end - start < 2) break;
            std::vector<size_t> sel(order.begin() + static_cast<long>(start),
                                    order.begin() + static_cast<long>(end));
            Tensor<float> xb = train.batch(sel);
            elastic_step(net, xb, train.batch_labels(sel), grid, rng, opt, distill);
        }
    }
}

bool criterion8() {
    const auto t0 = std::chrono::steady_clock::now();
    SupernetConfig cfg = SupernetConfig::desk_default();
    ResolutionGrid grid;  // 16..32 step 8
    int cal_wins = 0, dist_wins = 0;
    std::vector<double> cal_acc, nocal_acc, dist_acc, nodist_acc;
    for (uint64_t seed : {21ull, 22ull, 23ull}) {
        Dataset ds = synth_dataset(seed * 100 + 1, 10, 960, 3, 32, 32);
        Dataset train = head_split(ds, 768);
        Dataset val = tail_split(ds, 192);
        Rng init(seed);
        Network<float> a = build_network<float>(cfg, kMixedArch, init);
        Network<float> b = a;
        run_elastic_training(a, train, grid, 12, true, seed * 7 + 1);
        run_elastic_training(b, train, grid, 12, false, seed * 7 + 1);
        CalibratedStats sa = calibrate_bn(a, train, grid, 384);
        CalibratedStats sb = calibrate_bn(b, train, grid, 384);
        const double with_cal = evaluate_at_resolution(a, &sa, val, grid.r_min);
        const double no_cal = evaluate_at_resolution(a, nullptr, val, grid.r_min);
        const double no_dist = evaluate_at_resolution(b, &sb, val, grid.r_min);
        cal_acc.push_back(with_cal);
        nocal_acc.push_back(no_cal);
        dist_acc.push_back(with_cal);
        nodist_acc.push_back(no_dist);
        if (with_cal >= no_cal) ++cal_wins;
        if (with_cal >= no_dist) ++dist_wins;
        std::printf("  seed %llu: r_min acc cal=%.3f nocal=%.3f nodistill=%.3f\n",
                    static_cast<unsigned long long>(seed), with_cal, no_cal, no_dist);
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    const bool med_ok = median(cal_acc) >= median(nocal_acc) && median(dist_acc) >= median(nodist_acc);
    const double el = seconds_since(t0);
    const bool ok = cal_wins >= 2 && dist_wins >= 2 && med_ok && el <= 900.0;
    std::printf("criterion 8 (elastic/calibration): %s  [calibration wins %d/3, distillation wins %d/3, "
                "medians %s, %.0fs]\n",
                ok ? "PASS" : "FAIL", cal_wins, dist_wins, med_ok ? "ok" : "bad", el);
    return ok;
}

// ---------------------------------------------------------------------------
// 9. Hybrid transformable training analog, 3 paired seeds (soft 2-of-3).

bool criterion9() {
    const auto t0 = std::chrono::steady_clock::now();
    SupernetConfig cfg = SupernetConfig::desk_default();
    TrainSchedule sched;  // 30 epochs, grafting horizon 10
    int wins = 0;
    double mean_h = 0, mean_s = 0;
    for (uint64_t seed : {11ull, 12ull, 13ull}) {
        Dataset ds = synth_dataset(seed * 100 + 1, 10, 768, 3, 32, 32);
        Rng init(seed);
        Network<float> a = build_network<float>(cfg, kMixedArch, init);
        Network<float> b = a;
        Rng ra(seed * 7 + 1), rb(seed * 7 + 1);
        auto ha = train_hybrid_transformable(a, ds, sched, ra);
        auto hb = train_standard(b, ds, sched, rb);
        mean_h += ha.back().val_acc / 3.0;
        mean_s += hb.back().val_acc / 3.0;
        if (ha.back().val_acc >= hb.back().val_acc) ++wins;
        std::printf("  seed %llu: hybrid=%.3f standard=%.3f\n", static_cast<unsigned long long>(seed),
                    ha.back().val_acc, hb.back().val_acc);
    }
    const double el = seconds_since(t0);
    const bool ok = wins >= 2 && mean_h >= mean_s && el <= 900.0;
    std::printf("criterion 9 (hybrid training): %s  [wins %d/3, mean hybrid=%.3f vs standard=%.3f, %.0fs]\n",
                ok ? "PASS" : "FAIL", wins, mean_h, mean_s, el);
    return ok;
}

// ---------------------------------------------------------------------------
// 10. Determinism: byte-identical artifacts across two runs.

bool criterion10() {
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path dir = fs::temp_directory_path() / ("dwnas_acc_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    const fs::path out = dir / "out";
    json cfg{{"dataset", {{"count", 64}, {"classes", 4}, {"size", 16}}},
             {"supernet", {{"layers", json::array({{{"channels", 8}, {"stride", 2}},
                                                   {{"channels", 8}, {"stride", 1}}})}}},
             {"search", {{"epochs", 2}, {"alpha_freeze_epochs", 1}, {"batch", 16}, {"constraint_ms", 0.5}}},
             {"latency_oracle", {{"n_pairs", 60}, {"fit_epochs", 10}}},
             {"train", {{"total_epochs", 2}, {"grafting_epochs", 1}, {"batch", 16}}},
             {"elastic", {{"r_min", 8}, {"r_max", 16}, {"step", 8}, {"epochs", 2}, {"batch", 16},
                          {"n_calib", 32}}},
             {"output_dir", out.string()}};
    const std::string cfg_path = (dir / "cfg.json").string();
    write_file_atomic(cfg_path, cfg.dump(2));
    CliOptions opt;
    opt.config_path = cfg_path;

    const std::vector<std::string> commands = {"gen-data", "latency-fit", "search",    "train",
                                               "transform", "verify",      "calibrate", "eval",
                                               "ablate",    "report"};
    bool cmds_ok = true;
    auto run_all = [&]() {
        for (const std::string& c : commands)
            if (run_command(c, opt) != 0) {
                std::printf("  command '%s' failed\n", c.c_str());
                cmds_ok = false;
            }
    };
    run_all();
    const fs::path out_a = dir / "out_first";
    fs::rename(out, out_a);
    run_all();

    bool identical = cmds_ok;
    int n_files = 0;
    if (cmds_ok) {
        std::set<std::string> names_a, names_b;
        for (const auto& e : fs::recursive_directory_iterator(out_a))
            if (e.is_regular_file()) names_a.insert(fs::relative(e.path(), out_a).string());
        for (const auto& e : fs::recursive_directory_iterator(out))
            if (e.is_regular_file()) names_b.insert(fs::relative(e.path(), out).string());
        identical = names_a == names_b && !names_a.empty();
        for (const std::string& name : names_a) {
            if (!identical) break;
            ++n_files;
            if (read_file((out_a / name).string()) != read_file((out / name).string())) {
                std::printf("  artifact differs between runs: %s\n", name.c_str());
                identical = false;
            }
        }
    }
    fs::remove_all(dir);
    const double el = seconds_since(t0);
    const bool ok = cmds_ok && identical;
    std::printf("criterion 10 (determinism): %s  [%d artifacts byte-compared across two runs, %.0fs]\n",
                ok ? "PASS" : "FAIL", n_files, el);
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::pair<int, bool (*)()>> all = {
        {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4}, {5, criterion5},
        {6, criterion6}, {7, criterion7}, {8, criterion8}, {9, criterion9}, {10, criterion10}};
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
    bool ok = true;
    for (auto& [num, fn] : all) {
        if (!wanted.empty() && !wanted.count(num)) continue;
        std::fflush(stdout);
        ok = fn() && ok;
    }
    std::fflush(stdout);
    return ok ? 0 : 1;
}
