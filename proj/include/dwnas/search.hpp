#pragma once

// Hardware-aware bi-level search: sandwich (or ablation-strategy) weight
// descent, straight-through alpha descent with the latency penalty, and the
// lambda multiplier ascending toward the constraint.

#include <chrono>
#include <string>
#include <vector>

#include "dwnas/data_io.hpp"
#include "dwnas/latency.hpp"
#include "dwnas/optim.hpp"
#include "dwnas/sampler.hpp"
#include "dwnas/search_space.hpp"

namespace dwnas {

struct SearchConfig {
    double constraint_ms = 1.0;     // T
    double eta_w = 0.05;
    double eta_alpha = 0.003;       // desk default; paper value 0.001 selectable
    double eta_lambda = 0.05;       // desk default; paper value 0.0005 selectable
    int alpha_freeze_epochs = 3;
    int epochs = 30;
    int batch = 64;
    std::string strategy = "sandwich";  // darts_softmax | gdas_single | topk_full | sandwich
    double tau = 5.0;
    bool clamp_lambda = false;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double val_frac = 0.2;

    void validate() const {
        if (constraint_ms <= 0) throw ConfigError("search: constraint_ms must be positive");
        if (eta_w < 0 || eta_alpha < 0 || eta_lambda < 0) throw ConfigError("search: learning rates must be >= 0");
        if (epochs <= 0 || batch <= 0) throw ConfigError("search: epochs and batch must be positive");
        if (alpha_freeze_epochs < 0 || alpha_freeze_epochs > epochs)
            throw ConfigError("search: alpha_freeze_epochs out of range");
        if (tau <= 0) throw ConfigError("search: tau must be positive");
        if (strategy != "darts_softmax" && strategy != "gdas_single" && strategy != "topk_full" &&
            strategy != "sandwich")
            throw ConfigError("search: unknown strategy '" + strategy + "'");
    }
};

struct SearchState {
    Supernet<float> net;
    ArchParams alpha;  // [L, 12], zero-initialized
    double lambda = 0;
    int iter = 0;
    int epoch = 0;
    SgdMomentum<float> opt_w;
    Adam<float> opt_alpha;
    Rng rng;
    std::vector<json> trace;
    std::vector<std::vector<int64_t>> touch_count;  // [L][N] training touches

    SearchState(const SupernetConfig& cfg, const SearchConfig& sc, Rng r)
        : net(build_supernet<float>(cfg, r)),
          alpha({cfg.num_layers(), kNumOperators}, 0.0f),
          opt_w(static_cast<float>(sc.eta_w), static_cast<float>(sc.momentum),
                static_cast<float>(sc.weight_decay)),
          opt_alpha(static_cast<float>(sc.eta_alpha)),
          rng(r.fork(0x5EA7C4)),
          touch_count(static_cast<size_t>(cfg.num_layers()),
                      std::vector<int64_t>(kNumOperators, 0)) {}

    double coverage() const {
        int64_t touched = 0, total = 0;
        for (const auto& row : touch_count)
            for (int64_t c : row) {
                ++total;
                if (c > 0) ++touched;
            }
        return total ? static_cast<double>(touched) / static_cast<double>(total) : 0.0;
    }
};

// Hard one-hot encoding of a path, flattened row-major.
inline std::vector<float> path_encoding(const std::vector<int>& path, int n_ops) {
    std::vector<float> enc(path.size() * static_cast<size_t>(n_ops), 0.0f);
    for (size_t l = 0; l < path.size(); ++l)
        enc[l * static_cast<size_t>(n_ops) + static_cast<size_t>(path[l])] = 1.0f;
    return enc;
}

// Quadratic-penalty weight on the latency constraint in the alpha objective
// (augmented Lagrangian). Stabilizes the learnable-lambda controller.
inline constexpr double kLatencyPenalty = 2.0;

// Zero-noise soft weights of one alpha row: u = softmax(log softmax(row)/tau),
// the g = 0 limit of the Gumbel soft weights. Used to route the latency
// gradient straight-through the most-important (argmax) path.
inline std::vector<double> zero_noise_u(const std::vector<double>& row, double tau) {
    std::vector<double> s = log_softmax(row);
    for (double& v : s) v /= tau;
    s = log_softmax(s);
    for (double& v : s) v = std::exp(v);
    return s;
}

namespace detail {

inline void clear_grads(Supernet<float>& net) {
    net.visit_params([](Tensor<float>& p) { p.grad.clear(); });
}

inline double path_ce_step(Supernet<float>& net, const Tensor<float>& x, const std::vector<int>& labels,
                           const std::vector<int>& path) {
    SupernetPathCache<float> cache;
    Tensor<float> logits = supernet_forward_path(net, x, path, cache);
    Tensor<float> glogits;
    const double loss = softmax_cross_entropy(logits, labels, &glogits);
    supernet_backward_path(net, path, cache, glogits, nullptr);
    return loss;
}

inline void touch(SearchState& s, const std::vector<int>& path) {
    for (size_t l = 0; l < path.size(); ++l) ++s.touch_count[l][static_cast<size_t>(path[l])];
}

}  // namespace detail

struct StepReport {
    double train_loss = 0;
    double valid_loss = 0;
    double lat_pred_ms = 0;
    double lambda_increment = 0;
    bool alpha_updated = false;
};

// One bi-level iteration:
//  (1) descend w on the training batch under the configured strategy;
//  (2) if alpha is unfrozen, descend alpha on the validation batch on
//      L_valid + lambda * (LAT(alpha)/T - 1): the CE term is routed
//      straight-through the sampled most-important path; LAT(alpha) is the
//      predictor on the hard encoding of the argmax (most-important) path,
//      its gradient routed straight-through the zero-noise soft weights;
//  (3) ascend lambda by eta_lambda * (LAT(alpha)/T - 1), with LAT(alpha)
//      re-evaluated on the argmax path under the updated alpha.
inline StepReport search_step(SearchState& s, const Tensor<float>& x_train,
                              const std::vector<int>& y_train, const Tensor<float>& x_valid,
                              const std::vector<int>& y_valid, LatencyModel<float>& predictor,
                              const SearchConfig& cfg, bool alpha_frozen) {
    StepReport rep;
    const double T = cfg.constraint_ms;
    Ranking ranking = gumbel_topk_order(s.alpha, cfg.tau, s.rng);

    // (1) weight descent
    detail::clear_grads(s.net);
    std::vector<Tensor<float>*> params;
    s.net.visit_params([&](Tensor<float>& p) { params.push_back(&p); });
    if (cfg.strategy == "sandwich") {
        SandwichTriple triple = sandwich_select(ranking, s.rng);
        rep.train_loss = detail::path_ce_step(s.net, x_train, y_train, triple.most.index) +
                         detail::path_ce_step(s.net, x_train, y_train, triple.random.index) +
                         detail::path_ce_step(s.net, x_train, y_train, triple.least.index);
        detail::touch(s, triple.most.index);
        detail::touch(s, triple.random.index);
        detail::touch(s, triple.least.index);
    } else if (cfg.strategy == "gdas_single") {
        PathSample p = path_at_rank(ranking, 0);
        rep.train_loss = detail::path_ce_step(s.net, x_train, y_train, p.index);
        detail::touch(s, p.index);
    } else if (cfg.strategy == "topk_full") {
        for (int r = 0; r < ranking.n_ops(); ++r) {
            PathSample p = path_at_rank(ranking, r);
            rep.train_loss += detail::path_ce_step(s.net, x_train, y_train, p.index);
            detail::touch(s, p.index);
        }
    } else {  // darts_softmax
        Mat w = darts_weights(s.alpha);
        SupernetMixCache<float> cache;
        Tensor<float> logits = supernet_forward_mix(s.net, x_train, w, cache);
        Tensor<float> glogits;
        rep.train_loss = softmax_cross_entropy(logits, y_train, &glogits);
        supernet_backward_mix(s.net, w, cache, glogits, nullptr);
        for (auto& row : s.touch_count)
            for (int64_t& c : row) ++c;
    }
    if (!std::isfinite(rep.train_loss))
        throw NumericError("search: non-finite training loss at iter " + std::to_string(s.iter) +
                           " (lambda=" + std::to_string(s.lambda) + ")");
    s.opt_w.step(params);

    // (2) alpha descent on the validation batch
    PathSample most = path_at_rank(ranking, 0);
    {
        detail::clear_grads(s.net);
        SupernetPathCache<float> cache;
        Tensor<float> logits = supernet_forward_path(s.net, x_valid, most.index, cache, false);
        Tensor<float> glogits;
        rep.valid_loss = softmax_cross_entropy(logits, y_valid, &glogits);
        if (!std::isfinite(rep.valid_loss))
            throw NumericError("search: non-finite validation loss at iter " + std::to_string(s.iter));
        if (!alpha_frozen) {
            std::vector<double> dots;
            supernet_backward_path(s.net, most.index, cache, glogits, &dots);
            detail::clear_grads(s.net);  // validation loss never trains w
            const OneHotArch arch_now = encode_onehot(s.alpha);
            auto [lat, glat] = predict_with_grad(predictor, path_encoding(arch_now.index, kNumOperators));
            // Method-of-multipliers coefficient: the quadratic penalty
            // (kappa/2)(LAT/T - 1)^2 damps the dual oscillation that a pure
            // Lagrangian term exhibits against the discrete latency landscape;
            // the lambda ascent law itself is unchanged.
            const double lat_coef = (s.lambda + kLatencyPenalty * (lat / T - 1.0)) / T;
            const int64_t L = s.alpha.dim(0), N = s.alpha.dim(1);
            s.alpha.ensure_grad();
            s.alpha.zero_grad();
            const Mat arows = alpha_rows(s.alpha);
            for (int64_t l = 0; l < L; ++l) {
                // CE term: straight-through gradient at the sampled path.
                std::vector<double> dldu(static_cast<size_t>(N), 0.0);
                dldu[static_cast<size_t>(most.index[static_cast<size_t>(l)])] = dots[static_cast<size_t>(l)];
                std::vector<double> g =
                    st_alpha_grad(dldu, most.u[static_cast<size_t>(l)], arows[static_cast<size_t>(l)], cfg.tau);
                // Latency term: straight-through at the argmax path, g = 0 weights.
                std::vector<double> dldu_lat(static_cast<size_t>(N), 0.0);
                for (int64_t n = 0; n < N; ++n)
                    dldu_lat[static_cast<size_t>(n)] =
                        lat_coef * static_cast<double>(glat[static_cast<size_t>(l * N + n)]);
                const std::vector<double> u0 = zero_noise_u(arows[static_cast<size_t>(l)], cfg.tau);
                const std::vector<double> gl =
                    st_alpha_grad(dldu_lat, u0, arows[static_cast<size_t>(l)], cfg.tau);
                for (int64_t n = 0; n < N; ++n)
                    s.alpha.grad[s.alpha.idx2(l, n)] =
                        static_cast<float>(g[static_cast<size_t>(n)] + gl[static_cast<size_t>(n)]);
            }
            s.opt_alpha.step_one(s.alpha);
            rep.alpha_updated = true;
        }
    }

    // (3) lambda ascent on the argmax-path latency under the updated alpha
    {
        Tensor<float> enc({1, s.alpha.numel()});
        enc.data = path_encoding(encode_onehot(s.alpha).index, kNumOperators);
        rep.lat_pred_ms = static_cast<double>(mlp_forward(predictor, enc).data[0]);
        rep.lambda_increment = cfg.eta_lambda * (rep.lat_pred_ms / T - 1.0);
        s.lambda += rep.lambda_increment;
        if (cfg.clamp_lambda && s.lambda < 0) s.lambda = 0;
    }

    s.trace.push_back(json{{"iter", s.iter},
                           {"lambda", s.lambda},
                           {"lat_pred_ms", rep.lat_pred_ms},
                           {"valid_loss", rep.valid_loss}});
    ++s.iter;
    return rep;
}

// sigma=0 oracle latency range of the space (per-layer additive, so the
// min/max decompose per layer).
inline std::pair<double, double> latency_range(const SupernetConfig& cfg, const OracleParams& oracle) {
    OracleParams p = oracle;
    p.sigma = 0;
    Rng dummy(0);
    const int L = cfg.num_layers();
    std::vector<int> arch(static_cast<size_t>(L), 0);
    double lo = 0, hi = 0;
    // per-layer decomposition: vary one layer at a time against a fixed base
    std::vector<int> base(static_cast<size_t>(L), 0);
    const double base_lat = synthetic_oracle(costs_from_arch(cfg, base), p, dummy);
    lo = hi = base_lat;
    for (int l = 0; l < L; ++l) {
        double lmin = 1e300, lmax = -1e300;
        for (int n = 0; n < kNumOperators; ++n) {
            std::vector<int> a = base;
            a[static_cast<size_t>(l)] = n;
            const double d = synthetic_oracle(costs_from_arch(cfg, a), p, dummy) - base_lat;
            lmin = std::min(lmin, d);
            lmax = std::max(lmax, d);
        }
        lo += lmin;
        hi += lmax;
    }
    return {lo, hi};
}

struct SearchResult {
    OneHotArch arch;
    double lambda = 0;
    std::vector<json> trace;
    double coverage = 0;
    double final_lat_pred_ms = 0;
    std::vector<std::string> warnings;
    ArchParams alpha{{1, 1}};
    Supernet<float>* net = nullptr;  // owned by caller-held state
};

// Full search: epochs of bi-level steps with alpha frozen for the first
// alpha_freeze_epochs, final per-row argmax discretization.
inline SearchResult run_search(SearchState& s, const Dataset& ds, LatencyModel<float>& predictor,
                               const SearchConfig& cfg, const OracleParams& oracle) {
    cfg.validate();
    SearchResult res;
    const auto [lo, hi] = latency_range(s.net.cfg, oracle);
    if (cfg.constraint_ms < lo || cfg.constraint_ms > hi)
        res.warnings.push_back("constraint " + std::to_string(cfg.constraint_ms) +
                               " ms outside reachable latency range [" + std::to_string(lo) + ", " +
                               std::to_string(hi) + "] ms; best-effort result");

    // bi-level 80/20 split: w on train, alpha on valid
    const int64_t n_val = std::max<int64_t>(1, static_cast<int64_t>(cfg.val_frac * static_cast<double>(ds.count)));
    std::vector<size_t> train_idx, val_idx;
    for (int64_t i = 0; i < ds.count - n_val; ++i) train_idx.push_back(static_cast<size_t>(i));
    for (int64_t i = ds.count - n_val; i < ds.count; ++i) val_idx.push_back(static_cast<size_t>(i));

    Rng order_rng = s.rng.fork(0xBA7C4);
    size_t vcursor = 0;
    // Cosine decay of the alpha step size: the architecture settles
    // adiabatically instead of chattering around the constraint at the end.
    int64_t steps_per_epoch = 0;
    for (size_t start = 0; start + 2 <= train_idx.size(); start += static_cast<size_t>(cfg.batch)) {
        if (std::min(train_idx.size(), start + static_cast<size_t>(cfg.batch)) - start < 2) break;
        ++steps_per_epoch;
    }
    const int64_t total_steps = std::max<int64_t>(1, steps_per_epoch * cfg.epochs);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        s.epoch = epoch;
        const bool frozen = epoch < cfg.alpha_freeze_epochs;
        const ArchParams alpha_before = s.alpha;
        order_rng.shuffle(train_idx);
        for (size_t start = 0; start + 2 <= train_idx.size(); start += static_cast<size_t>(cfg.batch)) {
            const size_t end = std::min(train_idx.size(), start + static_cast<size_t>(cfg.batch));
            if (end - start < 2) break;
            std::vector<size_t> tsel(train_idx.begin() + static_cast<long>(start),
                                     train_idx.begin() + static_cast<long>(end));
            std::vector<size_t> vsel;
            for (size_t k = 0; k < tsel.size(); ++k) {
                vsel.push_back(val_idx[vcursor]);
                vcursor = (vcursor + 1) % val_idx.size();
            }
            Tensor<float> xt = ds.batch(tsel);
            Tensor<float> xv = ds.batch(vsel);
            const double prog = static_cast<double>(s.iter) / static_cast<double>(total_steps);
            s.opt_alpha.set_lr(static_cast<float>(cfg.eta_alpha * 0.5 * (1.0 + std::cos(M_PI * prog))));
            search_step(s, xt, ds.batch_labels(tsel), xv, ds.batch_labels(vsel), predictor, cfg, frozen);
        }
        if (frozen && !(alpha_before.data == s.alpha.data))
            throw NumericError("search: alpha changed while frozen");
    }
    res.arch = encode_onehot(s.alpha);
    res.lambda = s.lambda;
    res.trace = s.trace;
    res.coverage = s.coverage();
    res.final_lat_pred_ms = predict(predictor, res.arch);
    res.alpha = s.alpha;
    return res;
}

struct StrategyReport {
    std::string strategy;
    double coverage = 0;
    double wall_time_ms = 0;        // console-only; excluded from artifacts
    int64_t peak_live_tensors = 0;  // memory proxy
    double final_lat_pred_ms = 0;
    double latency_error_rel = 0;   // |LAT - T| / T
};

// Identical budgets per strategy; reports coverage, wall time, the live
// tensor peak, and final latency error.
inline std::vector<StrategyReport> ablate_strategies(const SupernetConfig& scfg, const SearchConfig& base,
                                                     const std::vector<std::string>& strategies,
                                                     const Dataset& ds, LatencyModel<float>& predictor,
                                                     const OracleParams& oracle, uint64_t seed) {
    std::vector<StrategyReport> out;
    for (const std::string& strat : strategies) {
        SearchConfig cfg = base;
        cfg.strategy = strat;
        cfg.validate();
        SearchState s(scfg, cfg, Rng(seed));
        TensorCounters::reset_peak();
        const auto t0 = std::chrono::steady_clock::now();
        SearchResult res = run_search(s, ds, predictor, cfg, oracle);
        const auto t1 = std::chrono::steady_clock::now();
        StrategyReport r;
        r.strategy = strat;
        r.coverage = res.coverage;
        r.wall_time_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        r.peak_live_tensors = TensorCounters::peak();
        r.final_lat_pred_ms = res.final_lat_pred_ms;
        r.latency_error_rel = std::abs(res.final_lat_pred_ms - cfg.constraint_ms) / cfg.constraint_ms;
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace dwnas
