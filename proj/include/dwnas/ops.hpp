#pragma once

// Forward and hand-written backward passes for the fixed layer set:
// conv2d (grouped, strided, zero-padded), batch norm, ReLU6, the grafted
// activation, fully connected, global average pooling, and the two losses.

#include <algorithm>
#include <cmath>
#include <vector>

#include "dwnas/tensor.hpp"

namespace dwnas {

// Weight layout is [C_in, C_out/groups, K, K]; for groups == 1 this is the
// plain [C_in, C_out, K, K] layout used in checkpoints, and for depthwise
// convs it degenerates to [C, 1, K, K].
template <typename T>
struct ConvWeights {
    Tensor<T> weight;
    Tensor<T> bias;  // [C_out]
    int stride = 1;
    int padding = 0;
    int groups = 1;

    int64_t cin() const { return weight.dim(0); }
    int64_t cout() const { return weight.dim(1) * groups; }
    int64_t k() const { return weight.dim(2); }

    template <typename U>
    ConvWeights<U> cast() const {
        ConvWeights<U> o;
        o.weight = weight.template cast<U>();
        o.bias = bias.template cast<U>();
        o.stride = stride;
        o.padding = padding;
        o.groups = groups;
        return o;
    }
};

template <typename T>
ConvWeights<T> make_conv(int64_t cin, int64_t cout, int k, int stride, int padding, int groups) {
    if (cin % groups != 0 || cout % groups != 0)
        throw DimensionError("conv channels not divisible by groups: cin=" + std::to_string(cin) +
                             " cout=" + std::to_string(cout) + " groups=" + std::to_string(groups));
    ConvWeights<T> cw;
    cw.weight = Tensor<T>({cin, cout / groups, k, k});
    cw.bias = Tensor<T>({cout});
    cw.stride = stride;
    cw.padding = padding;
    cw.groups = groups;
    return cw;
}

inline int64_t conv_out_size(int64_t in, int k, int stride, int padding) {
    return (in + 2 * padding - k) / stride + 1;
}

namespace detail {

// Depthwise valid conv, pixel-major with a compile-time kernel size so the
// tap loops fully unroll.
template <int KK, typename T>
void dw_fwd(const Tensor<T>& x, const ConvWeights<T>& cw, Tensor<T>& y) {
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Hout = y.dim(2), Wout = y.dim(3);
    const int s = cw.stride;
    (void)H;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const T* xplane = &x.data[x.idx4(n, c, 0, 0)];
            T* yplane = &y.data[y.idx4(n, c, 0, 0)];
            const T* wk = &cw.weight.data[static_cast<size_t>(c) * KK * KK];
            const T b = cw.bias.data[static_cast<size_t>(c)];
            for (int64_t ho = 0; ho < Hout; ++ho) {
                const T* xr = xplane + ho * s * W;
                T* yrow = yplane + ho * Wout;
                for (int64_t wo = 0; wo < Wout; ++wo) {
                    const T* xp = xr + wo * s;
                    T acc = b;
                    for (int kh = 0; kh < KK; ++kh) {
                        const T* row = xp + kh * W;
                        for (int kw = 0; kw < KK; ++kw) acc += wk[kh * KK + kw] * row[kw];
                    }
                    yrow[wo] = acc;
                }
            }
        }
}

template <int KK, typename T>
void dw_bwd(const Tensor<T>& x, ConvWeights<T>& cw, const Tensor<T>& gy, Tensor<T>* gx) {
    const int64_t N = x.dim(0), C = x.dim(1), W = x.dim(3);
    const int64_t Hout = gy.dim(2), Wout = gy.dim(3);
    const int s = cw.stride;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const T* xplane = &x.data[x.idx4(n, c, 0, 0)];
            T* gxplane = gx ? &gx->data[gx->idx4(n, c, 0, 0)] : nullptr;
            const T* gplane = &gy.data[gy.idx4(n, c, 0, 0)];
            const T* wk = &cw.weight.data[static_cast<size_t>(c) * KK * KK];
            T gwacc[KK * KK] = {};
            T gb = T(0);
            for (int64_t ho = 0; ho < Hout; ++ho) {
                const T* grow = gplane + ho * Wout;
                for (int64_t wo = 0; wo < Wout; ++wo) {
                    const T go = grow[wo];
                    gb += go;
                    const T* xp = xplane + ho * s * W + wo * s;
                    T* gxp = gxplane ? gxplane + ho * s * W + wo * s : nullptr;
                    for (int kh = 0; kh < KK; ++kh)
                        for (int kw = 0; kw < KK; ++kw) {
                            gwacc[kh * KK + kw] += go * xp[kh * W + kw];
                            if (gxp) gxp[kh * W + kw] += go * wk[kh * KK + kw];
                        }
                }
            }
            T* gwk = &cw.weight.grad[static_cast<size_t>(c) * KK * KK];
            for (int i = 0; i < KK * KK; ++i) gwk[i] += gwacc[i];
            cw.bias.grad[static_cast<size_t>(c)] += gb;
        }
}

}  // namespace detail

// Direct cross-correlation with zero padding; the reference implementation.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvWeights<T>& cw) {
    if (x.shape.size() != 4)
        throw DimensionError("conv2d: input must be 4-D, got " + shape_str(x.shape));
    const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (Cin != cw.cin())
        throw DimensionError("conv2d: input channel axis " + std::to_string(Cin) +
                             " != weight C_in " + std::to_string(cw.cin()));
    const int K = static_cast<int>(cw.k());
    const int s = cw.stride, p = cw.padding;
    const int64_t Hout = conv_out_size(H, K, s, p);
    const int64_t Wout = conv_out_size(W, K, s, p);
    if (Hout <= 0 || Wout <= 0)
        throw DimensionError("conv2d: non-positive output size for H=" + std::to_string(H) +
                             " K=" + std::to_string(K));
    const int64_t Cout = cw.cout();
    const int64_t opg = Cout / cw.groups, cpg = Cin / cw.groups;

    Tensor<T> y({N, Cout, Hout, Wout});

    // Fast path: 1x1 ungrouped conv (zero-padded border contributes only the
    // bias). Innermost loops run contiguously over the spatial axis.
    if (K == 1 && cw.groups == 1) {
        const int64_t ho_lo = (p + s - 1) / s, ho_hi = std::min<int64_t>(Hout - 1, (H - 1 + p) / s);
        const int64_t wo_lo = ho_lo, wo_hi = std::min<int64_t>(Wout - 1, (W - 1 + p) / s);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Cout; ++co) {
                T* yplane = &y.data[y.idx4(n, co, 0, 0)];
                std::fill(yplane, yplane + Hout * Wout, cw.bias.data[static_cast<size_t>(co)]);
            }
        if (s == 1) {
            // Pixel-major kernel: the spatial extent is small at desk scale,
            // so vectorize over the (wide) output-channel axis instead.
            std::vector<T> acc(static_cast<size_t>(Cout));
            const int64_t plane = H * W, oplane = Hout * Wout;
            for (int64_t n = 0; n < N; ++n) {
                const T* xbase = &x.data[x.idx4(n, 0, 0, 0)];
                T* ybase = &y.data[y.idx4(n, 0, 0, 0)];
                for (int64_t hi = 0; hi < H; ++hi)
                    for (int64_t wi = 0; wi < W; ++wi) {
                        std::copy(cw.bias.data.begin(), cw.bias.data.end(), acc.begin());
                        const T* xpix = xbase + hi * W + wi;
                        for (int64_t ci = 0; ci < Cin; ++ci) {
                            const T xv = xpix[ci * plane];
                            const T* wr = &cw.weight.data[static_cast<size_t>(ci * Cout)];
                            for (int64_t co = 0; co < Cout; ++co) acc[static_cast<size_t>(co)] += xv * wr[co];
                        }
                        T* ypix = ybase + (hi + p) * Wout + (wi + p);
                        for (int64_t co = 0; co < Cout; ++co)
                            ypix[co * oplane] = acc[static_cast<size_t>(co)];
                    }
            }
            return y;
        }
        for (int64_t n = 0; n < N; ++n)
            for (int64_t ci = 0; ci < Cin; ++ci) {
                const T* xplane = &x.data[x.idx4(n, ci, 0, 0)];
                for (int64_t co = 0; co < Cout; ++co) {
                    const T w = cw.weight.data[static_cast<size_t>(ci * Cout + co)];
                    T* yplane = &y.data[y.idx4(n, co, 0, 0)];
                    for (int64_t ho = ho_lo; ho <= ho_hi; ++ho) {
                        const T* xrow = xplane + (ho * s - p) * W - p;
                        T* yrow = yplane + ho * Wout;
                        for (int64_t wo = wo_lo; wo <= wo_hi; ++wo) yrow[wo] += w * xrow[wo * s];
                    }
                }
            }
        return y;
    }

    // Fast path: depthwise valid conv, no bounds checks in the inner loops.
    if (cpg == 1 && opg == 1 && p == 0) {
        if (K == 3) {
            detail::dw_fwd<3>(x, cw, y);
            return y;
        }
        if (K == 5) {
            detail::dw_fwd<5>(x, cw, y);
            return y;
        }
        if (K == 7) {
            detail::dw_fwd<7>(x, cw, y);
            return y;
        }
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < Cout; ++c) {
                const T* xplane = &x.data[x.idx4(n, c, 0, 0)];
                T* yplane = &y.data[y.idx4(n, c, 0, 0)];
                const T* wk = &cw.weight.data[static_cast<size_t>(c * K * K)];
                const T b = cw.bias.data[static_cast<size_t>(c)];
                for (int64_t ho = 0; ho < Hout; ++ho) {
                    T* yrow = yplane + ho * Wout;
                    std::fill(yrow, yrow + Wout, b);
                    for (int kh = 0; kh < K; ++kh) {
                        const T* xrow = xplane + (ho * s + kh) * W;
                        for (int kw = 0; kw < K; ++kw) {
                            const T w = wk[kh * K + kw];
                            if (s == 1)
                                for (int64_t wo = 0; wo < Wout; ++wo) yrow[wo] += w * xrow[wo + kw];
                            else
                                for (int64_t wo = 0; wo < Wout; ++wo) yrow[wo] += w * xrow[wo * s + kw];
                        }
                    }
                }
            }
        return y;
    }

    for (int64_t n = 0; n < N; ++n) {
        for (int64_t co = 0; co < Cout; ++co) {
            const int64_t g = co / opg, col = co % opg;
            const T b = cw.bias.data[static_cast<size_t>(co)];
            for (int64_t ho = 0; ho < Hout; ++ho) {
                for (int64_t wo = 0; wo < Wout; ++wo) {
                    T acc = b;
                    for (int64_t cil = 0; cil < cpg; ++cil) {
                        const int64_t ci = g * cpg + cil;
                        const T* wrow = &cw.weight.data[static_cast<size_t>(((ci * opg + col) * K) * K)];
                        const T* xrow = &x.data[x.idx4(n, ci, 0, 0)];
                        for (int kh = 0; kh < K; ++kh) {
                            const int64_t hi = ho * s - p + kh;
                            if (hi < 0 || hi >= H) continue;
                            for (int kw = 0; kw < K; ++kw) {
                                const int64_t wi = wo * s - p + kw;
                                if (wi < 0 || wi >= W) continue;
                                acc += wrow[kh * K + kw] * xrow[hi * W + wi];
                            }
                        }
                    }
                    y.at4(n, co, ho, wo) = acc;
                }
            }
        }
    }
    return y;
}

// Fills x/weight/bias grads given the output grad. gx may be null when the
// input gradient is not needed (e.g. first layer).
template <typename T>
void conv2d_backward(const Tensor<T>& x, ConvWeights<T>& cw, const Tensor<T>& gy, Tensor<T>* gx) {
    const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int K = static_cast<int>(cw.k());
    const int s = cw.stride, p = cw.padding;
    const int64_t Hout = gy.dim(2), Wout = gy.dim(3);
    const int64_t Cout = cw.cout();
    const int64_t opg = Cout / cw.groups, cpg = Cin / cw.groups;

    cw.weight.ensure_grad();
    cw.bias.ensure_grad();
    if (gx) {
        gx->shape = x.shape;
        gx->data.assign(x.data.size(), T(0));
    }

    // Fast path: 1x1 ungrouped conv.
    if (K == 1 && cw.groups == 1) {
        const int64_t ho_lo = (p + s - 1) / s, ho_hi = std::min<int64_t>(Hout - 1, (H - 1 + p) / s);
        const int64_t wo_lo = ho_lo, wo_hi = std::min<int64_t>(Wout - 1, (W - 1 + p) / s);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Cout; ++co) {
                const T* gplane = &gy.data[gy.idx4(n, co, 0, 0)];
                T gb = T(0);
                for (int64_t i = 0; i < Hout * Wout; ++i) gb += gplane[i];
                cw.bias.grad[static_cast<size_t>(co)] += gb;
            }
        if (s == 1) {
            // Pixel-major kernel mirroring the forward: gather the output
            // gradient per pixel, then run wide FMAs over the channel axes.
            std::vector<T> gvec(static_cast<size_t>(Cout));
            std::vector<T> gxacc(gx ? static_cast<size_t>(Cin) : 0);
            std::vector<T> wt;  // transposed weights [Cout, Cin], for the gx pass
            if (gx) {
                wt.resize(static_cast<size_t>(Cout * Cin));
                for (int64_t ci = 0; ci < Cin; ++ci)
                    for (int64_t co = 0; co < Cout; ++co)
                        wt[static_cast<size_t>(co * Cin + ci)] =
                            cw.weight.data[static_cast<size_t>(ci * Cout + co)];
            }
            const int64_t plane = H * W, oplane = Hout * Wout;
            for (int64_t n = 0; n < N; ++n) {
                const T* xbase = &x.data[x.idx4(n, 0, 0, 0)];
                const T* gbase = &gy.data[gy.idx4(n, 0, 0, 0)];
                T* gxbase = gx ? &gx->data[gx->idx4(n, 0, 0, 0)] : nullptr;
                for (int64_t hi = 0; hi < H; ++hi)
                    for (int64_t wi = 0; wi < W; ++wi) {
                        const T* gpix = gbase + (hi + p) * Wout + (wi + p);
                        for (int64_t co = 0; co < Cout; ++co)
                            gvec[static_cast<size_t>(co)] = gpix[co * oplane];
                        const T* xpix = xbase + hi * W + wi;
                        for (int64_t ci = 0; ci < Cin; ++ci) {
                            const T xv = xpix[ci * plane];
                            T* gwr = &cw.weight.grad[static_cast<size_t>(ci * Cout)];
                            for (int64_t co = 0; co < Cout; ++co)
                                gwr[co] += gvec[static_cast<size_t>(co)] * xv;
                        }
                        if (gx) {
                            std::fill(gxacc.begin(), gxacc.end(), T(0));
                            for (int64_t co = 0; co < Cout; ++co) {
                                const T gv = gvec[static_cast<size_t>(co)];
                                const T* wr = &wt[static_cast<size_t>(co * Cin)];
                                for (int64_t ci = 0; ci < Cin; ++ci)
                                    gxacc[static_cast<size_t>(ci)] += gv * wr[ci];
                            }
                            T* gxpix = gxbase + hi * W + wi;
                            for (int64_t ci = 0; ci < Cin; ++ci)
                                gxpix[ci * plane] = gxacc[static_cast<size_t>(ci)];
                        }
                    }
            }
            return;
        }
        for (int64_t n = 0; n < N; ++n)
            for (int64_t ci = 0; ci < Cin; ++ci) {
                const T* xplane = &x.data[x.idx4(n, ci, 0, 0)];
                T* gxplane = gx ? &gx->data[gx->idx4(n, ci, 0, 0)] : nullptr;
                for (int64_t co = 0; co < Cout; ++co) {
                    const T w = cw.weight.data[static_cast<size_t>(ci * Cout + co)];
                    const T* gplane = &gy.data[gy.idx4(n, co, 0, 0)];
                    T gw = T(0);
                    for (int64_t ho = ho_lo; ho <= ho_hi; ++ho) {
                        const int64_t off = (ho * s - p) * W - p;
                        const T* xrow = xplane + off;
                        T* gxrow = gxplane ? gxplane + off : nullptr;
                        const T* grow = gplane + ho * Wout;
                        for (int64_t wo = wo_lo; wo <= wo_hi; ++wo) {
                            const T go = grow[wo];
                            gw += go * xrow[wo * s];
                            if (gxrow) gxrow[wo * s] += go * w;
                        }
                    }
                    cw.weight.grad[static_cast<size_t>(ci * Cout + co)] += gw;
                }
            }
        return;
    }

    // Fast path: depthwise valid conv.
    if (cpg == 1 && opg == 1 && p == 0) {
        if (K == 3) {
            detail::dw_bwd<3>(x, cw, gy, gx);
            return;
        }
        if (K == 5) {
            detail::dw_bwd<5>(x, cw, gy, gx);
            return;
        }
        if (K == 7) {
            detail::dw_bwd<7>(x, cw, gy, gx);
            return;
        }
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < Cout; ++c) {
                const T* xplane = &x.data[x.idx4(n, c, 0, 0)];
                T* gxplane = gx ? &gx->data[gx->idx4(n, c, 0, 0)] : nullptr;
                const T* gplane = &gy.data[gy.idx4(n, c, 0, 0)];
                const T* wk = &cw.weight.data[static_cast<size_t>(c * K * K)];
                T* gwk = &cw.weight.grad[static_cast<size_t>(c * K * K)];
                T gb = T(0);
                for (int64_t i = 0; i < Hout * Wout; ++i) gb += gplane[i];
                cw.bias.grad[static_cast<size_t>(c)] += gb;
                for (int64_t ho = 0; ho < Hout; ++ho) {
                    const T* grow = gplane + ho * Wout;
                    for (int kh = 0; kh < K; ++kh) {
                        const T* xrow = xplane + (ho * s + kh) * W;
                        T* gxrow = gxplane ? gxplane + (ho * s + kh) * W : nullptr;
                        for (int kw = 0; kw < K; ++kw) {
                            const T w = wk[kh * K + kw];
                            T gw = T(0);
                            for (int64_t wo = 0; wo < Wout; ++wo) {
                                const T go = grow[wo];
                                gw += go * xrow[wo * s + kw];
                                if (gxrow) gxrow[wo * s + kw] += go * w;
                            }
                            gwk[kh * K + kw] += gw;
                        }
                    }
                }
            }
        return;
    }

    for (int64_t n = 0; n < N; ++n) {
        for (int64_t co = 0; co < Cout; ++co) {
            const int64_t g = co / opg, col = co % opg;
            for (int64_t ho = 0; ho < Hout; ++ho) {
                for (int64_t wo = 0; wo < Wout; ++wo) {
                    const T go = gy.at4(n, co, ho, wo);
                    cw.bias.grad[static_cast<size_t>(co)] += go;
                    for (int64_t cil = 0; cil < cpg; ++cil) {
                        const int64_t ci = g * cpg + cil;
                        T* gwrow = &cw.weight.grad[static_cast<size_t>(((ci * opg + col) * K) * K)];
                        const T* xrow = &x.data[x.idx4(n, ci, 0, 0)];
                        T* gxrow = gx ? &gx->data[gx->idx4(n, ci, 0, 0)] : nullptr;
                        const T* wrow = &cw.weight.data[static_cast<size_t>(((ci * opg + col) * K) * K)];
                        for (int kh = 0; kh < K; ++kh) {
                            const int64_t hi = ho * s - p + kh;
                            if (hi < 0 || hi >= H) continue;
                            for (int kw = 0; kw < K; ++kw) {
                                const int64_t wi = wo * s - p + kw;
                                if (wi < 0 || wi >= W) continue;
                                gwrow[kh * K + kw] += go * xrow[hi * W + wi];
                                if (gxrow) gxrow[hi * W + wi] += go * wrow[kh * K + kw];
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization.

template <typename T>
struct BatchNormState {
    Tensor<T> gamma, beta;               // [C]
    Tensor<T> running_mean, running_var;  // [C]
    T eps = T(1e-5);
    T momentum = T(0.1);

    template <typename U>
    BatchNormState<U> cast() const {
        BatchNormState<U> o;
        o.gamma = gamma.template cast<U>();
        o.beta = beta.template cast<U>();
        o.running_mean = running_mean.template cast<U>();
        o.running_var = running_var.template cast<U>();
        o.eps = static_cast<U>(eps);
        o.momentum = static_cast<U>(momentum);
        return o;
    }
};

template <typename T>
BatchNormState<T> make_bn(int64_t c) {
    BatchNormState<T> bn;
    bn.gamma = Tensor<T>({c}, T(1));
    bn.beta = Tensor<T>({c}, T(0));
    bn.running_mean = Tensor<T>({c}, T(0));
    bn.running_var = Tensor<T>({c}, T(1));
    return bn;
}

template <typename T>
struct BnCache {
    Tensor<T> x;
    std::vector<T> mean, var;  // batch statistics (biased var)
};

// Train-mode forward: normalizes by batch statistics. Updates the running
// stats with the stored momentum when update_running is set; calibration
// passes through with update_running == false.
template <typename T>
Tensor<T> bn_forward_train(const Tensor<T>& x, BatchNormState<T>& bn, BnCache<T>* cache,
                           bool update_running = true) {
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (C != bn.gamma.dim(0))
        throw DimensionError("batch_norm: channel axis " + std::to_string(C) + " != gamma size " +
                             std::to_string(bn.gamma.dim(0)));
    if (N < 2) throw NumericError("batch_norm: degenerate batch of size " + std::to_string(N) + " in train mode");
    const int64_t m = N * H * W;
    std::vector<T> mean(static_cast<size_t>(C), T(0)), var(static_cast<size_t>(C), T(0));
    for (int64_t c = 0; c < C; ++c) {
        double s = 0;
        for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w) s += x.at4(n, c, h, w);
        const double mu = s / static_cast<double>(m);
        double v = 0;
        for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w) {
                    const double d = x.at4(n, c, h, w) - mu;
                    v += d * d;
                }
        mean[static_cast<size_t>(c)] = static_cast<T>(mu);
        var[static_cast<size_t>(c)] = static_cast<T>(v / static_cast<double>(m));
    }
    if (update_running) {
        for (int64_t c = 0; c < C; ++c) {
            const size_t i = static_cast<size_t>(c);
            const T unbiased = var[i] * static_cast<T>(static_cast<double>(m) / static_cast<double>(m - 1));
            bn.running_mean.data[i] = (T(1) - bn.momentum) * bn.running_mean.data[i] + bn.momentum * mean[i];
            bn.running_var.data[i] = (T(1) - bn.momentum) * bn.running_var.data[i] + bn.momentum * unbiased;
        }
    }
    Tensor<T> y(x.shape);
    for (int64_t c = 0; c < C; ++c) {
        const size_t i = static_cast<size_t>(c);
        const T inv = T(1) / std::sqrt(var[i] + bn.eps);
        const T g = bn.gamma.data[i], b = bn.beta.data[i], mu = mean[i];
        for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w) y.at4(n, c, h, w) = g * (x.at4(n, c, h, w) - mu) * inv + b;
    }
    if (cache) {
        cache->x = x;
        cache->mean = std::move(mean);
        cache->var = std::move(var);
    }
    return y;
}

// Inference-mode forward using (mean, var) statistics; defaults to the
// stored running stats, with an override hook for calibrated stats.
template <typename T>
Tensor<T> bn_forward_infer(const Tensor<T>& x, const BatchNormState<T>& bn,
                           const std::vector<T>* mean_override = nullptr,
                           const std::vector<T>* var_override = nullptr) {
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (C != bn.gamma.dim(0))
        throw DimensionError("batch_norm: channel axis " + std::to_string(C) + " != gamma size " +
                             std::to_string(bn.gamma.dim(0)));
    Tensor<T> y(x.shape);
    for (int64_t c = 0; c < C; ++c) {
        const size_t i = static_cast<size_t>(c);
        const T mu = mean_override ? (*mean_override)[i] : bn.running_mean.data[i];
        const T va = var_override ? (*var_override)[i] : bn.running_var.data[i];
        const T inv = T(1) / std::sqrt(va + bn.eps);
        const T g = bn.gamma.data[i], b = bn.beta.data[i];
        for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w) y.at4(n, c, h, w) = g * (x.at4(n, c, h, w) - mu) * inv + b;
    }
    return y;
}

template <typename T>
void bn_backward_train(const BnCache<T>& cache, BatchNormState<T>& bn, const Tensor<T>& gy, Tensor<T>& gx) {
    const Tensor<T>& x = cache.x;
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const double m = static_cast<double>(N * H * W);
    bn.gamma.ensure_grad();
    bn.beta.ensure_grad();
    gx.shape = x.shape;
    gx.data.assign(x.data.size(), T(0));
    for (int64_t c = 0; c < C; ++c) {
        const size_t i = static_cast<size_t>(c);
        const double mu = cache.mean[i];
        const double invstd = 1.0 / std::sqrt(static_cast<double>(cache.var[i]) + static_cast<double>(bn.eps));
        const double g = bn.gamma.data[i];
        double sum_gy = 0, sum_gy_xhat = 0;
        for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w) {
                    const double go = gy.at4(n, c, h, w);
                    const double xhat = (x.at4(n, c, h, w) - mu) * invstd;
                    sum_gy += go;
                    sum_gy_xhat += go * xhat;
                }
        bn.gamma.grad[i] += static_cast<T>(sum_gy_xhat);
        bn.beta.grad[i] += static_cast<T>(sum_gy);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w) {
                    const double go = gy.at4(n, c, h, w);
                    const double xhat = (x.at4(n, c, h, w) - mu) * invstd;
                    gx.at4(n, c, h, w) =
                        static_cast<T>(g * invstd * (go - sum_gy / m - xhat * sum_gy_xhat / m));
                }
    }
}

// ---------------------------------------------------------------------------
// Activations.

// min(max(x,0),6); subgradient 0 at both kinks.
template <typename T>
Tensor<T> relu6(const Tensor<T>& x) {
    Tensor<T> y = x;
    for (T& v : y.data) v = std::min(std::max(v, T(0)), T(6));
    return y;
}

template <typename T>
void relu6_backward(const Tensor<T>& x, const Tensor<T>& gy, Tensor<T>& gx) {
    gx.shape = x.shape;
    gx.data.resize(x.data.size());
    for (size_t i = 0; i < x.data.size(); ++i)
        gx.data[i] = (x.data[i] > T(0) && x.data[i] < T(6)) ? gy.data[i] : T(0);
}

// Act(x) + eps * (x - Act(x)) with Act = ReLU6. eps == 1 short-circuits to a
// bitwise copy of the input.
template <typename T>
Tensor<T> grafted_activation(const Tensor<T>& x, double eps) {
    if (eps < 0.0 || eps > 1.0) throw NumericError("grafted_activation: eps outside [0,1]");
    if (eps == 1.0) return x;
    Tensor<T> y = x;
    const T e = static_cast<T>(eps);
    for (T& v : y.data) {
        const T a = std::min(std::max(v, T(0)), T(6));
        v = a + e * (v - a);
    }
    return y;
}

template <typename T>
void grafted_backward(const Tensor<T>& x, double eps, const Tensor<T>& gy, Tensor<T>& gx) {
    gx.shape = x.shape;
    gx.data.resize(x.data.size());
    if (eps == 1.0) {
        gx.data = gy.data;
        return;
    }
    const T e = static_cast<T>(eps);
    for (size_t i = 0; i < x.data.size(); ++i) {
        const T d = (x.data[i] > T(0) && x.data[i] < T(6)) ? T(1) : T(0);
        gx.data[i] = gy.data[i] * (d + e * (T(1) - d));
    }
}

// ---------------------------------------------------------------------------
// Fully connected, pooling, losses.

// y = x w + b with x [N,D], w [D,M], b [M].
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    const int64_t N = x.dim(0), D = x.dim(1);
    if (w.dim(0) != D)
        throw DimensionError("fully_connected: input dim " + std::to_string(D) + " != weight rows " +
                             std::to_string(w.dim(0)));
    const int64_t M = w.dim(1);
    Tensor<T> y({N, M});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t mcol = 0; mcol < M; ++mcol) {
            T acc = b.data[static_cast<size_t>(mcol)];
            for (int64_t d = 0; d < D; ++d) acc += x.at2(n, d) * w.at2(d, mcol);
            y.at2(n, mcol) = acc;
        }
    return y;
}

template <typename T>
void fully_connected_backward(const Tensor<T>& x, Tensor<T>& w, Tensor<T>& b, const Tensor<T>& gy,
                              Tensor<T>* gx) {
    const int64_t N = x.dim(0), D = x.dim(1), M = w.dim(1);
    w.ensure_grad();
    b.ensure_grad();
    if (gx) {
        gx->shape = x.shape;
        gx->data.assign(x.data.size(), T(0));
    }
    for (int64_t n = 0; n < N; ++n)
        for (int64_t mcol = 0; mcol < M; ++mcol) {
            const T go = gy.at2(n, mcol);
            b.grad[static_cast<size_t>(mcol)] += go;
            for (int64_t d = 0; d < D; ++d) {
                w.grad[w.idx2(d, mcol)] += go * x.at2(n, d);
                if (gx) gx->data[gx->idx2(n, d)] += go * w.at2(d, mcol);
            }
        }
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> y({N, C});
    const T inv = T(1) / static_cast<T>(H * W);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            T s = 0;
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w) s += x.at4(n, c, h, w);
            y.at2(n, c) = s * inv;
        }
    return y;
}

template <typename T>
void global_avg_pool_backward(const std::vector<int64_t>& xshape, const Tensor<T>& gy, Tensor<T>& gx) {
    const int64_t H = xshape[2], W = xshape[3];
    gx.shape = xshape;
    gx.data.resize(static_cast<size_t>(Tensor<T>::numel_of(xshape)));
    const T inv = T(1) / static_cast<T>(H * W);
    for (int64_t n = 0; n < xshape[0]; ++n)
        for (int64_t c = 0; c < xshape[1]; ++c) {
            const T g = gy.at2(n, c) * inv;
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w) gx.at4(n, c, h, w) = g;
        }
}

template <typename T>
std::vector<T> softmax_row(const T* logits, int64_t n) {
    T mx = logits[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
    std::vector<T> p(static_cast<size_t>(n));
    T z = 0;
    for (int64_t i = 0; i < n; ++i) {
        p[static_cast<size_t>(i)] = std::exp(logits[i] - mx);
        z += p[static_cast<size_t>(i)];
    }
    for (T& v : p) v /= z;
    return p;
}

// Mean cross-entropy over the batch; also fills the logit gradient.
template <typename T>
double softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels, Tensor<T>* glogits) {
    const int64_t N = logits.dim(0), C = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != N)
        throw DimensionError("cross_entropy: label count != batch size");
    if (glogits) {
        glogits->shape = logits.shape;
        glogits->data.assign(logits.data.size(), T(0));
    }
    double loss = 0;
    for (int64_t n = 0; n < N; ++n) {
        const int lab = labels[static_cast<size_t>(n)];
        if (lab < 0 || lab >= C)
            throw DataError("cross_entropy: label " + std::to_string(lab) + " out of range [0," +
                            std::to_string(C) + ")");
        std::vector<T> p = softmax_row(&logits.data[logits.idx2(n, 0)], C);
        loss -= std::log(std::max(static_cast<double>(p[static_cast<size_t>(lab)]), 1e-300));
        if (glogits)
            for (int64_t c = 0; c < C; ++c) {
                T g = p[static_cast<size_t>(c)];
                if (c == lab) g -= T(1);
                glogits->at2(n, c) = g / static_cast<T>(N);
            }
    }
    return loss / static_cast<double>(N);
}

// KL(teacher || student) between softmax distributions, mean over the batch.
// Teacher logits are detached by contract: no gradient is produced for them.
template <typename T>
double kl_divergence(const Tensor<T>& student_logits, const Tensor<T>& teacher_logits, Tensor<T>* gstudent) {
    if (student_logits.shape != teacher_logits.shape)
        throw DimensionError("kl_divergence: logit shapes differ");
    const int64_t N = student_logits.dim(0), C = student_logits.dim(1);
    if (gstudent) {
        gstudent->shape = student_logits.shape;
        gstudent->data.assign(student_logits.data.size(), T(0));
    }
    double loss = 0;
    for (int64_t n = 0; n < N; ++n) {
        std::vector<T> q = softmax_row(&student_logits.data[student_logits.idx2(n, 0)], C);
        std::vector<T> p = softmax_row(&teacher_logits.data[teacher_logits.idx2(n, 0)], C);
        for (int64_t c = 0; c < C; ++c) {
            const double pc = p[static_cast<size_t>(c)], qc = q[static_cast<size_t>(c)];
            if (pc > 0) loss += pc * (std::log(pc) - std::log(std::max(qc, 1e-300)));
            if (gstudent) gstudent->at2(n, c) = (q[static_cast<size_t>(c)] - p[static_cast<size_t>(c)]) / static_cast<T>(N);
        }
    }
    return loss / static_cast<double>(N);
}

}  // namespace dwnas
