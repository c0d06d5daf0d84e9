#pragma once

// Post-training transform: folds batch norms into convolutions and collapses
// linear MBConv blocks into single dense convolutions, exactly.

#include <cmath>
#include <vector>

#include "dwnas/ops.hpp"
#include "dwnas/search_space.hpp"

namespace dwnas {

// Folds an inference-mode BN into the preceding conv. Per output channel:
//   w' = w * gamma / sqrt(rv + eps)
//   b' = (b - mean) * gamma / sqrt(rv + eps) + beta
// Internally f64, cast back to T at the end.
template <typename T>
ConvWeights<T> fold_bn(const ConvWeights<T>& conv, const BatchNormState<T>& bn) {
    if (bn.gamma.dim(0) != conv.cout())
        throw DimensionError("fold_bn: BN channels " + std::to_string(bn.gamma.dim(0)) +
                             " != conv output channels " + std::to_string(conv.cout()));
    const int64_t Cin = conv.cin(), Cout = conv.cout();
    const int K = static_cast<int>(conv.k());
    const int64_t opg = Cout / conv.groups, cpg = Cin / conv.groups;
    ConvWeights<T> out = conv;
    for (int64_t co = 0; co < Cout; ++co) {
        const size_t i = static_cast<size_t>(co);
        const double s = static_cast<double>(bn.gamma.data[i]) /
                         std::sqrt(static_cast<double>(bn.running_var.data[i]) + static_cast<double>(bn.eps));
        const int64_t g = co / opg, col = co % opg;
        for (int64_t cil = 0; cil < cpg; ++cil) {
            const int64_t ci = g * cpg + cil;
            for (int kk = 0; kk < K * K; ++kk) {
                const size_t wi = static_cast<size_t>(((ci * opg + col) * K) * K + kk);
                out.weight.data[wi] = static_cast<T>(static_cast<double>(conv.weight.data[wi]) * s);
            }
        }
        out.bias.data[i] = static_cast<T>(
            (static_cast<double>(conv.bias.data[i]) - static_cast<double>(bn.running_mean.data[i])) * s +
            static_cast<double>(bn.beta.data[i]));
    }
    return out;
}

// Identity BN: folding it is a numerical no-op, and the inference forward
// through it is exact. running_var is set so that rv + eps rounds to 1.
template <typename T>
void set_identity_bn(BatchNormState<T>& bn) {
    const int64_t c = bn.gamma.dim(0);
    bn.gamma = Tensor<T>({c}, T(1));
    bn.beta = Tensor<T>({c}, T(0));
    bn.running_mean = Tensor<T>({c}, T(0));
    bn.running_var = Tensor<T>({c}, T(1) - bn.eps);
}

// Composes two stride-1 ungrouped convs into one with K* = K1 + K2 - 1 and
// padding p1 + p2. Exact for valid padding; with "same" padding the result
// matches everywhere except where the first conv's bias would have leaked
// into zero-padded intermediates (interior-exact).
template <typename T>
ConvWeights<T> merge_conv_pair(const ConvWeights<T>& a, const ConvWeights<T>& b) {
    if (a.stride != 1 || b.stride != 1) throw DimensionError("merge_conv_pair: strides must be 1");
    if (a.groups != 1 || b.groups != 1) throw DimensionError("merge_conv_pair: groups must be 1");
    if (a.cout() != b.cin())
        throw DimensionError("merge_conv_pair: channel mismatch " + std::to_string(a.cout()) + " vs " +
                             std::to_string(b.cin()));
    const int64_t Cin = a.cin(), Cmid = a.cout(), Cout = b.cout();
    const int K1 = static_cast<int>(a.k()), K2 = static_cast<int>(b.k());
    const int Ks = K1 + K2 - 1;
    ConvWeights<T> m = make_conv<T>(Cin, Cout, Ks, 1, a.padding + b.padding, 1);
    std::vector<double> acc(static_cast<size_t>(Cin * Cout * Ks * Ks), 0.0);
    for (int64_t ci = 0; ci < Cin; ++ci)
        for (int64_t cm = 0; cm < Cmid; ++cm)
            for (int64_t co = 0; co < Cout; ++co)
                for (int h1 = 0; h1 < K1; ++h1)
                    for (int w1 = 0; w1 < K1; ++w1) {
                        const double wa =
                            a.weight.data[static_cast<size_t>(((ci * Cmid + cm) * K1 + h1) * K1 + w1)];
                        if (wa == 0.0) continue;
                        for (int h2 = 0; h2 < K2; ++h2)
                            for (int w2 = 0; w2 < K2; ++w2) {
                                const double wb = b.weight.data[static_cast<size_t>(
                                    ((cm * Cout + co) * K2 + h2) * K2 + w2)];
                                acc[static_cast<size_t>(((ci * Cout + co) * Ks + h1 + h2) * Ks + w1 + w2)] +=
                                    wa * wb;
                            }
                    }
    for (size_t i = 0; i < acc.size(); ++i) m.weight.data[i] = static_cast<T>(acc[i]);
    // b*_co = b2_co + sum_cm b1_cm * (sum of b's taps feeding (cm, co))
    for (int64_t co = 0; co < Cout; ++co) {
        double bias = b.bias.data[static_cast<size_t>(co)];
        for (int64_t cm = 0; cm < Cmid; ++cm) {
            double taps = 0;
            for (int kk = 0; kk < K2 * K2; ++kk)
                taps += b.weight.data[static_cast<size_t>(((cm * Cout + co) * K2) * K2 + kk)];
            bias += static_cast<double>(a.bias.data[static_cast<size_t>(cm)]) * taps;
        }
        m.bias.data[static_cast<size_t>(co)] = static_cast<T>(bias);
    }
    return m;
}

// Collapses a fully linear MBConv (identity internals) into one dense KxK
// conv. Folds all three BNs first, then forms
//   W*[ci,co,h,w] = sum_cj We[ci,cj] * Wd[cj,h,w] * Wp[cj,co]
//   b*_co = sum_cj Wp[cj,co] * (be_cj * S_cj + bd_cj) + bp_co,  S_cj = sum of dw taps
// The block pads its input before the 1x1 expand and the depthwise runs
// valid, so the composition is exact at every output position. The residual
// branch adds a Dirac kernel at the center tap.
template <typename T>
CollapsedConv<T> collapse_mbconv(const MBConvOperator<T>& op) {
    if (!op.spec.linear) throw NumericError("collapse: operator has non-linear internals");
    const ConvWeights<T> e = fold_bn(op.expand, op.bn1);
    const ConvWeights<T> d = fold_bn(op.dw, op.bn2);
    const ConvWeights<T> p = fold_bn(op.project, op.bn3);
    const int64_t Cin = e.cin(), Cmid = e.cout(), Cout = p.cout();
    const int K = static_cast<int>(d.k());

    CollapsedConv<T> out;
    out.conv = make_conv<T>(Cin, Cout, K, d.stride, (K - 1) / 2, 1);
    out.trailing_relu6 = true;

    std::vector<double> acc(static_cast<size_t>(Cin * Cout * K * K), 0.0);
    for (int64_t cj = 0; cj < Cmid; ++cj) {
        for (int64_t ci = 0; ci < Cin; ++ci) {
            const double we = e.weight.data[static_cast<size_t>(ci * Cmid + cj)];
            if (we == 0.0) continue;
            for (int64_t co = 0; co < Cout; ++co) {
                const double wp = p.weight.data[static_cast<size_t>(cj * Cout + co)];
                const double f = we * wp;
                const T* dk = &d.weight.data[static_cast<size_t>(cj * K * K)];
                double* arow = &acc[static_cast<size_t>((ci * Cout + co) * K * K)];
                for (int kk = 0; kk < K * K; ++kk) arow[kk] += f * static_cast<double>(dk[kk]);
            }
        }
    }
    if (op.residual) {
        const int c = (K - 1) / 2;
        for (int64_t ch = 0; ch < Cin; ++ch)
            acc[static_cast<size_t>(((ch * Cout + ch) * K + c) * K + c)] += 1.0;
    }
    for (size_t i = 0; i < acc.size(); ++i) out.conv.weight.data[i] = static_cast<T>(acc[i]);

    for (int64_t co = 0; co < Cout; ++co) {
        double bias = p.bias.data[static_cast<size_t>(co)];
        for (int64_t cj = 0; cj < Cmid; ++cj) {
            double taps = 0;
            for (int kk = 0; kk < K * K; ++kk) taps += d.weight.data[static_cast<size_t>(cj * K * K + kk)];
            bias += static_cast<double>(p.weight.data[static_cast<size_t>(cj * Cout + co)]) *
                    (static_cast<double>(e.bias.data[static_cast<size_t>(cj)]) * taps +
                     static_cast<double>(d.bias.data[static_cast<size_t>(cj)]));
        }
        out.conv.bias.data[static_cast<size_t>(co)] = static_cast<T>(bias);
    }
    return out;
}

struct TransformReport {
    int depth_before = 0;  // conv layers in the searchable part
    int depth_after = 0;
    int collapsed_blocks = 0;
    int folded_blocks = 0;  // non-linear blocks with BNs folded in place
};

// Collapses every linear block; for non-linear blocks, folds the BNs into
// the convs and installs identity BNs so inference is unchanged. A network
// that is already transformed passes through untouched (the transform is
// idempotent).
template <typename T>
Network<T> transform_network(const Network<T>& net, TransformReport* report = nullptr) {
    Network<T> out = net;
    if (report) {
        report->depth_before = net.searchable_depth();
        report->collapsed_blocks = 0;
        report->folded_blocks = 0;
    }
    if (net.transformed) {
        if (report) report->depth_after = report->depth_before;
        return out;
    }
    for (Block<T>& b : out.blocks) {
        if (b.kind != Block<T>::Kind::MBConv) continue;
        if (b.mb.spec.linear) {
            b.col = collapse_mbconv(b.mb);
            b.kind = Block<T>::Kind::Collapsed;
            b.mb = MBConvOperator<T>{};
            if (report) ++report->collapsed_blocks;
        } else {
            b.mb.expand = fold_bn(b.mb.expand, b.mb.bn1);
            b.mb.dw = fold_bn(b.mb.dw, b.mb.bn2);
            b.mb.project = fold_bn(b.mb.project, b.mb.bn3);
            set_identity_bn(b.mb.bn1);
            set_identity_bn(b.mb.bn2);
            set_identity_bn(b.mb.bn3);
            if (report) ++report->folded_blocks;
        }
    }
    out.transformed = true;
    if (report) report->depth_after = out.searchable_depth();
    return out;
}

// Max absolute logit difference between two networks on a batch (inference
// mode, running statistics).
template <typename T>
double max_logit_diff(const Network<T>& a, const Network<T>& b, const Tensor<T>& x,
                      double graft_eps = 1.0) {
    Tensor<T> ya = network_forward_infer(a, x, graft_eps);
    Tensor<T> yb = network_forward_infer(b, x, graft_eps);
    if (ya.shape != yb.shape) throw DimensionError("verify_equivalence: logit shapes differ");
    double worst = 0;
    for (size_t i = 0; i < ya.data.size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(ya.data[i]) - static_cast<double>(yb.data[i])));
    return worst;
}

struct EquivalenceReport {
    double max_abs = 0;
    double mean_abs = 0;
    double argmax_agreement = 1.0;  // fraction of probes with identical argmax
    int n_samples = 0;
    double tol = 0;
    bool passed = true;
};

// Deterministic random probe suite comparing two networks' logits.
template <typename T>
EquivalenceReport verify_equivalence(const Network<T>& deep, const Network<T>& shallow, int n_samples,
                                     double tol, Rng& rng, int batch = 8) {
    EquivalenceReport rep;
    rep.n_samples = n_samples;
    rep.tol = tol;
    double abs_sum = 0;
    int64_t abs_count = 0, agree = 0, total = 0;
    const int hw = deep.cfg.input_hw, c = deep.cfg.input_c;
    for (int done = 0; done < n_samples; done += batch) {
        const int64_t B = std::min(batch, n_samples - done);
        Tensor<T> x({B, c, hw, hw});
        for (T& v : x.data) v = static_cast<T>(rng.normal());
        Tensor<T> ya = network_forward_infer(deep, x);
        Tensor<T> yb = network_forward_infer(shallow, x);
        const int64_t C = ya.dim(1);
        for (int64_t n = 0; n < B; ++n) {
            int64_t am_a = 0, am_b = 0;
            for (int64_t k = 0; k < C; ++k) {
                const double d = std::abs(static_cast<double>(ya.at2(n, k)) - static_cast<double>(yb.at2(n, k)));
                rep.max_abs = std::max(rep.max_abs, d);
                abs_sum += d;
                ++abs_count;
                if (ya.at2(n, k) > ya.at2(n, am_a)) am_a = k;
                if (yb.at2(n, k) > yb.at2(n, am_b)) am_b = k;
            }
            if (am_a == am_b) ++agree;
            ++total;
        }
    }
    rep.mean_abs = abs_count ? abs_sum / static_cast<double>(abs_count) : 0.0;
    rep.argmax_agreement = total ? static_cast<double>(agree) / static_cast<double>(total) : 1.0;
    rep.passed = rep.max_abs <= tol;
    return rep;
}

}  // namespace dwnas
