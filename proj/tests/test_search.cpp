#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dwnas/search.hpp"

using namespace dwnas;

namespace {

SupernetConfig tiny_cfg() {
    SupernetConfig cfg;
    cfg.input_c = 3;
    cfg.input_hw = 8;
    cfg.stem_channels = 4;
    cfg.classes = 4;
    cfg.layers = {{8, 2}};
    cfg.validate();
    return cfg;
}

// Predictor with zero weights and a fixed output bias: predicts `value` for
// every encoding, so latency laws can be asserted in closed form.
LatencyModel<float> constant_predictor(int64_t in_dim, double value) {
    Rng rng(0);
    LatencyModel<float> m = make_latency_model<float>(in_dim, rng, 8, 4);
    m.visit_params([](Tensor<float>& p) { std::fill(p.data.begin(), p.data.end(), 0.0f); });
    m.b3.data[0] = static_cast<float>(value);
    m.trained = true;
    return m;
}

struct StepEnv {
    SupernetConfig cfg = tiny_cfg();
    SearchConfig sc;
    Dataset ds;
    Tensor<float> xt, xv;
    std::vector<int> yt, yv;

    StepEnv() : ds(synth_dataset(1, 4, 32, 3, 8, 8)) {
        sc.constraint_ms = 1.0;
        sc.epochs = 1;
        sc.batch = 8;
        std::vector<size_t> ti{0, 1, 2, 3}, vi{4, 5, 6, 7};
        xt = ds.batch(ti);
        xv = ds.batch(vi);
        yt = ds.batch_labels(ti);
        yv = ds.batch_labels(vi);
    }
};

}  // namespace

TEST_CASE("search config validation") {
    SearchConfig c;
    c.constraint_ms = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SearchConfig{};
    c.strategy = "bogus";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SearchConfig{};
    c.tau = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SearchConfig{};
    c.alpha_freeze_epochs = c.epochs + 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("lambda unchanged when predicted latency equals the constraint") {
    StepEnv env;
    LatencyModel<float> pred = constant_predictor(12, env.sc.constraint_ms);
    SearchState s(env.cfg, env.sc, Rng(2));
    StepReport rep = search_step(s, env.xt, env.yt, env.xv, env.yv, pred, env.sc, true);
    CHECK(rep.lambda_increment == 0.0);
    CHECK(s.lambda == 0.0);
    CHECK(rep.lat_pred_ms == doctest::Approx(env.sc.constraint_ms));
}

TEST_CASE("lambda rises by exactly eta_lambda when LAT = 2T") {
    StepEnv env;
    env.sc.eta_lambda = 0.0005;
    LatencyModel<float> pred = constant_predictor(12, 2.0 * env.sc.constraint_ms);
    SearchState s(env.cfg, env.sc, Rng(3));
    StepReport rep = search_step(s, env.xt, env.yt, env.xv, env.yv, pred, env.sc, true);
    CHECK(rep.lambda_increment == doctest::Approx(0.0005).epsilon(1e-12));
    CHECK(s.lambda == doctest::Approx(0.0005).epsilon(1e-12));
}

TEST_CASE("lambda increment sign equals sign(LAT - T) and lambda may go negative") {
    StepEnv env;
    LatencyModel<float> fast = constant_predictor(12, 0.5 * env.sc.constraint_ms);
    SearchState s(env.cfg, env.sc, Rng(4));
    for (int it = 0; it < 5; ++it) {
        StepReport rep = search_step(s, env.xt, env.yt, env.xv, env.yv, fast, env.sc, true);
        CHECK(rep.lambda_increment < 0.0);
    }
    CHECK(s.lambda < 0.0);

    LatencyModel<float> slow = constant_predictor(12, 3.0 * env.sc.constraint_ms);
    SearchState s2(env.cfg, env.sc, Rng(5));
    double prev = 0;
    for (int it = 0; it < 5; ++it) {
        StepReport rep = search_step(s2, env.xt, env.yt, env.xv, env.yv, slow, env.sc, true);
        CHECK(rep.lambda_increment > 0.0);
        CHECK(s2.lambda > prev);  // monotone growth while saturated above T
        prev = s2.lambda;
    }
}

TEST_CASE("clamped variant keeps lambda non-negative") {
    StepEnv env;
    env.sc.clamp_lambda = true;
    LatencyModel<float> fast = constant_predictor(12, 0.5 * env.sc.constraint_ms);
    SearchState s(env.cfg, env.sc, Rng(6));
    for (int it = 0; it < 3; ++it)
        search_step(s, env.xt, env.yt, env.xv, env.yv, fast, env.sc, true);
    CHECK(s.lambda == 0.0);
}

TEST_CASE("frozen alpha is bitwise unchanged; unfrozen alpha moves") {
    StepEnv env;
    LatencyModel<float> pred = constant_predictor(12, 2.0);
    SearchState s(env.cfg, env.sc, Rng(7));
    const std::vector<float> before = s.alpha.data;
    StepReport rep = search_step(s, env.xt, env.yt, env.xv, env.yv, pred, env.sc, true);
    CHECK(!rep.alpha_updated);
    CHECK(s.alpha.data == before);

    rep = search_step(s, env.xt, env.yt, env.xv, env.yv, pred, env.sc, false);
    CHECK(rep.alpha_updated);
    CHECK(s.alpha.data != before);
}

TEST_CASE("every strategy updates weights and counts touches") {
    for (const std::string& strat : {"sandwich", "gdas_single", "topk_full", "darts_softmax"}) {
        StepEnv env;
        env.sc.strategy = strat;
        LatencyModel<float> pred = constant_predictor(12, 1.0);
        SearchState s(env.cfg, env.sc, Rng(8));
        std::vector<std::vector<float>> before;
        s.net.visit_params([&](Tensor<float>& p) { before.push_back(p.data); });
        StepReport rep = search_step(s, env.xt, env.yt, env.xv, env.yv, pred, env.sc, true);
        CHECK(std::isfinite(rep.train_loss));
        int64_t touched = 0;
        for (const auto& row : s.touch_count)
            for (int64_t c : row) touched += c;
        const int64_t expect = strat == "gdas_single" ? 1 : strat == "sandwich" ? 3 : 12;
        CHECK(touched == expect);
        std::vector<std::vector<float>> after;
        s.net.visit_params([&](Tensor<float>& p) { after.push_back(p.data); });
        CHECK(before != after);
    }
}

TEST_CASE("search steps are deterministic under a fixed seed") {
    auto run = [&]() {
        StepEnv env;
        LatencyModel<float> pred = constant_predictor(12, 1.5);
        SearchState s(env.cfg, env.sc, Rng(9));
        for (int it = 0; it < 4; ++it)
            search_step(s, env.xt, env.yt, env.xv, env.yv, pred, env.sc, it < 2);
        return std::make_pair(s.alpha.data, s.trace);
    };
    auto [a1, t1] = run();
    auto [a2, t2] = run();
    CHECK(a1 == a2);
    REQUIRE(t1.size() == t2.size());
    for (size_t i = 0; i < t1.size(); ++i) CHECK(t1[i].dump() == t2[i].dump());
}

TEST_CASE("1-D controller converges the latency to the constraint") {
    // Toy bi-level system with instantaneous best response: a knob a minimizes
    // (a - a0)^2 + lambda * (LAT(a)/T - 1) with LAT(a) = c * a, so
    // a*(lambda) = a0 - lambda * c / (2T). Only lambda follows the controller
    // update; the weight/alpha rates are zero by construction.
    const double a0 = 1.0, c = 1.0, T = 0.5, eta = 0.05;
    double lambda = 0, lat = c * a0;
    int converged_at = -1;
    for (int step = 0; step < 500; ++step) {
        const double a = a0 - lambda * c / (2.0 * T);
        lat = c * a;
        const double incr = eta * (lat / T - 1.0);
        CHECK((incr > 0) == (lat > T));  // sign law holds along the trajectory
        lambda += incr;
        if (std::abs(lat - T) / T <= 0.01 && converged_at < 0) converged_at = step;
    }
    CHECK(converged_at >= 0);
    CHECK(std::abs(lat - T) / T <= 0.01);
}

TEST_CASE("latency_range bounds every architecture's sigma=0 latency") {
    SupernetConfig cfg = SupernetConfig::desk_default();
    OracleParams op;
    const auto [lo, hi] = latency_range(cfg, op);
    CHECK(lo < hi);
    Rng rng(10), orng(0);
    OracleParams p0 = op;
    p0.sigma = 0;
    for (int t = 0; t < 20; ++t) {
        std::vector<int> arch(6);
        for (int& v : arch) v = static_cast<int>(rng.randint(kNumOperators));
        const double lat = synthetic_oracle(costs_from_arch(cfg, arch), p0, orng);
        CHECK(lat >= lo - 1e-9);
        CHECK(lat <= hi + 1e-9);
    }
    // extremes are attained by per-layer extremal choices
    std::vector<int> cheapest(6), dearest(6);
    for (int l = 0; l < 6; ++l) {
        double lmin = 1e300, lmax = -1e300;
        for (int n = 0; n < kNumOperators; ++n) {
            std::vector<int> a(6, 0);
            a[static_cast<size_t>(l)] = n;
            const double lat = synthetic_oracle(costs_from_arch(cfg, a), p0, orng);
            if (lat < lmin) { lmin = lat; cheapest[static_cast<size_t>(l)] = n; }
            if (lat > lmax) { lmax = lat; dearest[static_cast<size_t>(l)] = n; }
        }
    }
    CHECK(synthetic_oracle(costs_from_arch(cfg, cheapest), p0, orng) == doctest::Approx(lo).epsilon(1e-9));
    CHECK(synthetic_oracle(costs_from_arch(cfg, dearest), p0, orng) == doctest::Approx(hi).epsilon(1e-9));
}

TEST_CASE("run_search: warning outside the reachable range, frozen epochs, determinism") {
    SupernetConfig cfg = tiny_cfg();
    OracleParams op;
    SearchConfig sc;
    sc.epochs = 2;
    sc.alpha_freeze_epochs = 1;
    sc.batch = 8;
    sc.constraint_ms = 1e6;  // far above the reachable range
    Dataset ds = synth_dataset(11, 4, 48, 3, 8, 8);
    LatencyModel<float> pred = constant_predictor(12, 0.4);

    auto run = [&]() {
        SearchState s(cfg, sc, Rng(12));
        return run_search(s, ds, pred, sc, op);
    };
    SearchResult r1 = run();
    SearchResult r2 = run();
    REQUIRE(r1.warnings.size() == 1);
    CHECK(r1.warnings[0].find("outside reachable latency range") != std::string::npos);
    CHECK(r1.arch.index == r2.arch.index);
    CHECK(r1.lambda == r2.lambda);
    REQUIRE(r1.trace.size() == r2.trace.size());
    for (size_t i = 0; i < r1.trace.size(); ++i) CHECK(r1.trace[i].dump() == r2.trace[i].dump());
    // discretization is the per-row argmax of the final alpha
    CHECK(encode_onehot(r1.alpha) == r1.arch);
    CHECK(r1.coverage > 0.0);
}
