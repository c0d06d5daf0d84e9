#pragma once

// Arbitrary-resolution elastic training: deterministic bilinear resizing,
// the multi-resolution sandwich update with cross-resolution distillation,
// post-training BN statistics calibration, and per-resolution evaluation.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dwnas/data_io.hpp"
#include "dwnas/optim.hpp"
#include "dwnas/search_space.hpp"

namespace dwnas {

struct ResolutionGrid {
    int r_min = 16, r_max = 32, step = 8;

    std::vector<int> resolutions() const {
        std::vector<int> rs;
        for (int r = r_min; r <= r_max; r += step) rs.push_back(r);
        return rs;
    }

    int m() const { return (r_max - r_min) / step + 1; }

    void validate(int total_stride) const {
        if (step <= 0 || step % 8 != 0) throw ConfigError("grid: step must be a positive multiple of 8");
        if (r_min % 8 != 0 || r_max % 8 != 0) throw ConfigError("grid: resolutions must be multiples of 8");
        if (r_min > r_max) throw ConfigError("grid: r_min > r_max");
        if ((r_max - r_min) % step != 0) throw ConfigError("grid: (r_max - r_min) not divisible by step");
        for (int r : resolutions())
            if (r % total_stride != 0 || r / total_stride < 1)
                throw ConfigError("grid: resolution " + std::to_string(r) +
                                  " incompatible with total stride " + std::to_string(total_stride));
    }
};

// Bilinear downscale with half-pixel centers: src = (dst + 0.5) * (H/r) - 0.5,
// clamped to [0, H-1]. r == H returns the input bitwise.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int r) {
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H != W) throw DimensionError("resize: input must be square, got " + shape_str(x.shape));
    if (r <= 0) throw DimensionError("resize: target side must be positive");
    if (r > H) throw DimensionError("resize: upscaling unsupported (" + std::to_string(r) + " > " +
                                    std::to_string(H) + ")");
    if (r == H) return x;
    Tensor<T> y({N, C, r, r});
    const double scale = static_cast<double>(H) / static_cast<double>(r);
    std::vector<int64_t> i0(static_cast<size_t>(r)), i1(static_cast<size_t>(r));
    std::vector<double> w1(static_cast<size_t>(r));
    for (int d = 0; d < r; ++d) {
        double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
        src = std::min(std::max(src, 0.0), static_cast<double>(H - 1));
        const int64_t lo = static_cast<int64_t>(std::floor(src));
        i0[static_cast<size_t>(d)] = lo;
        i1[static_cast<size_t>(d)] = std::min(lo + 1, H - 1);
        w1[static_cast<size_t>(d)] = src - static_cast<double>(lo);
    }
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const T* src = &x.data[x.idx4(n, c, 0, 0)];
            for (int dy = 0; dy < r; ++dy) {
                const double fy = w1[static_cast<size_t>(dy)];
                const int64_t y0 = i0[static_cast<size_t>(dy)], y1i = i1[static_cast<size_t>(dy)];
                for (int dx = 0; dx < r; ++dx) {
                    const double fx = w1[static_cast<size_t>(dx)];
                    const int64_t x0 = i0[static_cast<size_t>(dx)], x1i = i1[static_cast<size_t>(dx)];
                    const double v = (1 - fy) * ((1 - fx) * src[y0 * W + x0] + fx * src[y0 * W + x1i]) +
                                     fy * ((1 - fx) * src[y1i * W + x0] + fx * src[y1i * W + x1i]);
                    y.at4(n, c, dy, dx) = static_cast<T>(v);
                }
            }
        }
    return y;
}

struct ElasticStepReport {
    double loss_total = 0;
    double ce_large = 0;
    double loss_small = 0;   // KL (or CE when distillation is off)
    double loss_middle = 0;
    int middle_resolution = 0;
    bool distilled = true;
};

// One sandwich update: CE at r_max against labels, plus distillation of
// r_min and one random middle resolution against the detached r_max logits,
// weighted 1/(#smaller passes). One optimizer step over all touched params.
inline ElasticStepReport elastic_step(Network<float>& net, const Tensor<float>& x,
                                      const std::vector<int>& labels, const ResolutionGrid& grid, Rng& rng,
                                      SgdMomentum<float>& opt, bool distill = true, double graft_eps = 1.0) {
    const std::vector<int> rs = grid.resolutions();
    const int M = static_cast<int>(rs.size());
    ElasticStepReport rep;
    rep.distilled = distill;

    std::vector<Tensor<float>*> params;
    net.visit_params([&](Tensor<float>& p) { params.push_back(&p); });
    for (Tensor<float>* p : params) p->zero_grad();

    // largest resolution: cross entropy against ground truth
    NetCache<float> cache;
    Tensor<float> x_large = resize_bilinear(x, rs.back());
    Tensor<float> teacher_logits = network_forward_train(net, x_large, graft_eps, cache);
    Tensor<float> glogits;
    rep.ce_large = softmax_cross_entropy(teacher_logits, labels, &glogits);
    network_backward(net, cache, graft_eps, glogits);

    // smaller resolutions: r_min plus one random middle
    std::vector<int> small;
    if (M >= 2) small.push_back(rs.front());
    if (M >= 3) {
        const int mid = 1 + static_cast<int>(rng.randint(M - 2));
        small.push_back(rs[static_cast<size_t>(mid)]);
        rep.middle_resolution = rs[static_cast<size_t>(mid)];
    }
    const double wsmall = small.empty() ? 0.0 : 1.0 / static_cast<double>(small.size());
    for (size_t si = 0; si < small.size(); ++si) {
        NetCache<float> c2;
        Tensor<float> xs = resize_bilinear(x, small[si]);
        Tensor<float> logits = network_forward_train(net, xs, graft_eps, c2);
        Tensor<float> g2;
        double loss;
        if (distill)
            loss = kl_divergence(logits, teacher_logits, &g2);  // teacher detached: no grad to it
        else
            loss = softmax_cross_entropy(logits, labels, &g2);
        for (float& v : g2.data) v *= static_cast<float>(wsmall);
        network_backward(net, c2, graft_eps, g2);
        if (si == 0)
            rep.loss_small = loss;
        else
            rep.loss_middle = loss;
    }
    rep.loss_total = rep.ce_large + wsmall * (rep.loss_small + rep.loss_middle);
    opt.step(params);
    return rep;
}

// Streaming-exact per-channel statistics accumulator.
struct StatsAccum {
    std::vector<double> sum, sumsq;
    int64_t count = 0;  // samples per channel

    void add(const Tensor<float>& x) {
        const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        if (sum.empty()) {
            sum.assign(static_cast<size_t>(C), 0.0);
            sumsq.assign(static_cast<size_t>(C), 0.0);
        }
        for (int64_t c = 0; c < C; ++c) {
            double s = 0, q = 0;
            for (int64_t n = 0; n < N; ++n) {
                const float* row = &x.data[x.idx4(n, c, 0, 0)];
                for (int64_t i = 0; i < H * W; ++i) {
                    s += row[i];
                    q += static_cast<double>(row[i]) * row[i];
                }
            }
            sum[static_cast<size_t>(c)] += s;
            sumsq[static_cast<size_t>(c)] += q;
        }
        count += N * x.dim(2) * x.dim(3);
    }

    std::pair<std::vector<float>, std::vector<float>> finalize() const {
        std::vector<float> mean(sum.size()), var(sum.size());
        for (size_t c = 0; c < sum.size(); ++c) {
            const double mu = sum[c] / static_cast<double>(count);
            mean[c] = static_cast<float>(mu);
            var[c] = static_cast<float>(std::max(0.0, sumsq[c] / static_cast<double>(count) - mu * mu));
        }
        return {mean, var};
    }
};

// Exact dataset mean/variance of every BN layer's input, per resolution.
// Trainable parameters are untouched; the inference pass normalizes by
// batch statistics while accumulating (so downstream layers see the same
// distribution the substituted statistics will produce).
inline CalibratedStats calibrate_bn(const Network<float>& net, const Dataset& data,
                                    const ResolutionGrid& grid, int64_t n_calib, double graft_eps = 1.0,
                                    int batch = 64, bool* truncated_warning = nullptr) {
    grid.validate(net.cfg.total_stride());
    if (n_calib > data.count) {
        n_calib = data.count;
        if (truncated_warning) *truncated_warning = true;
    }
    CalibratedStats out;
    for (int r : grid.resolutions()) {
        std::map<std::string, StatsAccum> accum;
        std::function<void(const std::string&, const Tensor<float>&)> collector =
            [&](const std::string& name, const Tensor<float>& in) { accum[name].add(in); };
        for (int64_t start = 0; start < n_calib; start += batch) {
            const int64_t end = std::min(n_calib, start + batch);
            std::vector<size_t> idx;
            for (int64_t i = start; i < end; ++i) idx.push_back(static_cast<size_t>(i));
            Tensor<float> x = resize_bilinear(data.batch(idx), r);
            network_forward_infer(net, x, graft_eps, static_cast<const BnStatsMap<float>*>(nullptr), &collector);
        }
        BnStatsMap<float> m;
        // enumerate in the network's stable BN order
        const_cast<Network<float>&>(net).visit_bn([&](const std::string& name, BatchNormState<float>&) {
            auto it = accum.find(name);
            if (it != accum.end()) m.stats.push_back({name, it->second.finalize()});
        });
        out.per_resolution[r] = std::move(m);
    }
    return out;
}

// Top-1 accuracy at a resolution, substituting that resolution's calibrated
// statistics when available.
inline double evaluate_at_resolution(const Network<float>& net, const CalibratedStats* stats,
                                     const Dataset& data, int r, double graft_eps = 1.0, int batch = 64,
                                     int64_t limit = 0) {
    const int64_t n = (limit > 0 && limit < data.count) ? limit : data.count;
    const BnStatsMap<float>* override_stats = nullptr;
    if (stats) {
        auto it = stats->per_resolution.find(r);
        if (it != stats->per_resolution.end()) override_stats = &it->second;
    }
    int64_t correct = 0;
    for (int64_t start = 0; start < n; start += batch) {
        const int64_t end = std::min(n, start + batch);
        std::vector<size_t> idx;
        for (int64_t i = start; i < end; ++i) idx.push_back(static_cast<size_t>(i));
        Tensor<float> x = resize_bilinear(data.batch(idx), r);
        Tensor<float> logits = network_forward_infer(net, x, graft_eps, override_stats);
        const std::vector<int> labels = data.batch_labels(idx);
        const int64_t C = logits.dim(1);
        for (int64_t b = 0; b < end - start; ++b) {
            int64_t am = 0;
            for (int64_t c = 1; c < C; ++c)
                if (logits.at2(b, c) > logits.at2(b, am)) am = c;
            if (static_cast<int>(am) == labels[static_cast<size_t>(b)]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace dwnas
