#include "dwnas/commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "dwnas/elastic.hpp"
#include "dwnas/search.hpp"
#include "dwnas/training.hpp"
#include "dwnas/transform.hpp"

namespace dwnas {

namespace fs = std::filesystem;

int worker_threads() {
    const char* env = std::getenv("DWNAS_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

ExperimentConfig load_experiment(const CliOptions& opt) {
    if (opt.config_path.empty()) throw ConfigError("--config is required");
    json j;
    try {
        j = json::parse(read_file(opt.config_path));
    } catch (const json::parse_error& e) {
        throw ConfigError(opt.config_path + ": " + e.what());
    }
    ExperimentConfig cfg = parse_config(j);
    if (opt.seed_override >= 0) cfg.seed = static_cast<uint64_t>(opt.seed_override);
    if (!opt.out_override.empty()) cfg.output_dir = opt.out_override;
    if (opt.constraint_override > 0) cfg.search.constraint_ms = opt.constraint_override;
    return cfg;
}

namespace {

std::string artifact(const ExperimentConfig& cfg, const std::string& name) {
    return (fs::path(cfg.output_dir) / name).string();
}

json base_meta(const ExperimentConfig& cfg) {
    return json{{"seed", cfg.seed}, {"config_hash", config_hash(cfg)}, {"config", config_echo(cfg)}};
}

void write_summary(const ExperimentConfig& cfg, const std::string& name, json body) {
    json meta = base_meta(cfg);
    for (auto it = meta.begin(); it != meta.end(); ++it) body[it.key()] = it.value();
    write_file_atomic(artifact(cfg, name), body.dump(2) + "\n");
}

Dataset require_dataset(const ExperimentConfig& cfg) {
    const std::string p = artifact(cfg, "dataset.dwds");
    if (!fs::exists(p)) throw DataError("missing input artifact: " + p + " (run gen-data first)");
    return load_dataset(p);
}

LatencyModel<float> require_predictor(const ExperimentConfig& cfg) {
    const std::string p = artifact(cfg, "predictor.ckpt");
    if (!fs::exists(p)) throw DataError("missing input artifact: " + p + " (run latency-fit first)");
    LatencyModel<float> m = load_predictor(p);
    if (!m.trained) throw DataError(p + ": predictor is not trained");
    return m;
}

Network<float> require_network(const ExperimentConfig& cfg, const std::string& name, json* meta = nullptr,
                               CalibratedStats* stats = nullptr) {
    const std::string p = artifact(cfg, name);
    if (!fs::exists(p)) throw DataError("missing input artifact: " + p);
    return load_network(p, meta, stats);
}

double oracle_latency_sigma0(const ExperimentConfig& cfg, const std::vector<int>& arch) {
    OracleParams p = cfg.oracle;
    p.sigma = 0;
    Rng dummy(0);
    return synthetic_oracle(costs_from_arch(cfg.supernet, arch), p, dummy);
}

}  // namespace

void cmd_gen_data(const ExperimentConfig& cfg) {
    Dataset ds = synth_dataset(cfg.seed, cfg.dataset.classes, cfg.dataset.count, cfg.dataset.channels,
                               cfg.dataset.size, cfg.dataset.size);
    save_dataset(artifact(cfg, "dataset.dwds"), ds);
    write_summary(cfg, "gen_data_summary.json",
                  {{"count", ds.count}, {"classes", ds.classes}, {"channels", ds.C}, {"size", ds.H}});
    std::cout << "gen-data: wrote " << ds.count << " images (" << ds.classes << " classes)\n";
}

void cmd_latency_fit(const ExperimentConfig& cfg) {
    Rng rng(cfg.seed);
    Rng pair_rng = rng.fork(0x1A7);
    std::vector<LatencyPair> pairs =
        generate_pairs(cfg.supernet, cfg.latency_fit.n_pairs, cfg.oracle, pair_rng);
    save_pairs(artifact(cfg, "pairs.jsonl"), pairs);
    double lo = 1e300, hi = -1e300;
    for (const LatencyPair& p : pairs) {
        lo = std::min(lo, p.latency_ms);
        hi = std::max(hi, p.latency_ms);
    }
    Rng fit_rng = rng.fork(0xF17);
    LatencyModel<float> model =
        make_latency_model<float>(static_cast<int64_t>(cfg.supernet.num_layers()) * kNumOperators, fit_rng);
    FitReport rep = fit_predictor(model, pairs, cfg.latency_fit.train_frac, cfg.latency_fit.fit_epochs,
                                  fit_rng);
    save_predictor(artifact(cfg, "predictor.ckpt"), model, base_meta(cfg));
    write_summary(cfg, "latency_fit_summary.json",
                  {{"n_pairs", pairs.size()},
                   {"val_rmse_ms", rep.val_rmse},
                   {"train_rmse_ms", rep.train_rmse},
                   {"latency_min_ms", lo},
                   {"latency_max_ms", hi},
                   {"val_rmse_over_range", rep.val_rmse / (hi - lo)}});
    std::cout << "latency-fit: val RMSE " << rep.val_rmse << " ms over range [" << lo << ", " << hi
              << "] ms\n";
}

void cmd_search(const ExperimentConfig& cfg) {
    Dataset ds = require_dataset(cfg);
    LatencyModel<float> predictor = require_predictor(cfg);
    SearchState state(cfg.supernet, cfg.search, Rng(cfg.seed));
    SearchResult res = run_search(state, ds, predictor, cfg.search, cfg.oracle);
    for (const std::string& w : res.warnings) std::cout << "search: warning: " << w << "\n";

    save_supernet(artifact(cfg, "supernet.ckpt"), state.net, state.alpha, state.lambda, base_meta(cfg));
    JsonlWriter trace;
    for (const json& t : res.trace) trace.append(t);
    trace.save(artifact(cfg, "search_trace.jsonl"));
    const double lat_oracle = oracle_latency_sigma0(cfg, res.arch.index);
    write_summary(cfg, "search_result.json",
                  {{"arch", res.arch.index},
                   {"lambda", res.lambda},
                   {"coverage", res.coverage},
                   {"final_lat_pred_ms", res.final_lat_pred_ms},
                   {"final_lat_oracle_ms", lat_oracle},
                   {"constraint_ms", cfg.search.constraint_ms},
                   {"warnings", res.warnings}});
    std::cout << "search: arch [";
    for (size_t i = 0; i < res.arch.index.size(); ++i)
        std::cout << (i ? "," : "") << res.arch.index[i];
    std::cout << "] lambda " << res.lambda << " predicted " << res.final_lat_pred_ms << " ms, oracle "
              << lat_oracle << " ms (T=" << cfg.search.constraint_ms << ")\n";
}

void cmd_train(const ExperimentConfig& cfg) {
    Dataset ds = require_dataset(cfg);
    const std::string rp = artifact(cfg, "search_result.json");
    if (!fs::exists(rp)) throw DataError("missing input artifact: " + rp + " (run search first)");
    const json result = json::parse(read_file(rp));
    const std::vector<int> arch = result.at("arch").get<std::vector<int>>();

    Rng rng(cfg.seed);
    Rng init_rng = rng.fork(0x7241);
    Network<float> net = build_network<float>(cfg.supernet, arch, init_rng);
    Rng train_rng = rng.fork(0x7242);
    bool fell_back = false;
    std::vector<EpochMetrics> hist;
    if (cfg.train_hybrid)
        hist = train_hybrid_transformable(net, ds, cfg.train, train_rng, &fell_back);
    else
        hist = train_standard(net, ds, cfg.train, train_rng);
    if (fell_back)
        std::cout << "train: warning: no linear operators in architecture; hybrid schedule fell back to "
                     "standard training\n";

    // elastic multi-resolution fine-tuning phase
    json elastic_hist = json::array();
    if (cfg.elastic.epochs > 0) {
        if (cfg.elastic.grid.m() < 3)
            std::cout << "train: warning: resolution grid has fewer than 3 entries; sandwich degrades\n";
        SgdMomentum<float> opt(static_cast<float>(cfg.elastic.lr), static_cast<float>(cfg.elastic.momentum),
                               static_cast<float>(cfg.elastic.weight_decay));
        Rng erng = rng.fork(0x7243);
        const DataSplit split = split_dataset(ds, cfg.train.val_frac);
        std::vector<size_t> order = split.train;
        for (int epoch = 0; epoch < cfg.elastic.epochs; ++epoch) {
            erng.shuffle(order);
            double loss_sum = 0;
            int64_t nb = 0;
            for (size_t start = 0; start + 2 <= order.size(); start += static_cast<size_t>(cfg.elastic.batch)) {
                const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.elastic.batch));
                if (end - start < 2) break;
                std::vector<size_t> sel(order.begin() + static_cast<long>(start),
                                        order.begin() + static_cast<long>(end));
                Tensor<float> x = ds.batch(sel);
                hflip_inplace(x, erng);
                ElasticStepReport rep = elastic_step(net, x, ds.batch_labels(sel), cfg.elastic.grid, erng,
                                                     opt, cfg.elastic.distill);
                loss_sum += rep.loss_total;
                ++nb;
            }
            const double vacc = val_accuracy(net, ds, split.val, 1.0, cfg.train.batch);
            elastic_hist.push_back({{"epoch", epoch},
                                    {"train_loss", nb ? loss_sum / static_cast<double>(nb) : 0.0},
                                    {"val_acc", vacc}});
        }
    }

    save_network(artifact(cfg, "network.ckpt"), net, base_meta(cfg));
    JsonlWriter metrics;
    for (const EpochMetrics& m : hist)
        metrics.append({{"epoch", m.epoch}, {"train_loss", m.train_loss}, {"val_acc", m.val_acc}, {"eps", m.eps}});
    metrics.save(artifact(cfg, "train_metrics.jsonl"));
    write_summary(cfg, "train_summary.json",
                  {{"arch", arch},
                   {"hybrid", cfg.train_hybrid && !fell_back},
                   {"final_val_acc", hist.back().val_acc},
                   {"elastic_epochs", cfg.elastic.epochs},
                   {"elastic_history", elastic_hist}});
    std::cout << "train: final val acc " << hist.back().val_acc << "\n";
}

void cmd_transform(const ExperimentConfig& cfg) {
    Network<float> net = require_network(cfg, "network.ckpt");
    TransformReport rep;
    Network<float> shallow = transform_network(net, &rep);
    save_network(artifact(cfg, "network_transformed.ckpt"), shallow, base_meta(cfg));
    const double lat_before = [&] {
        OracleParams p = cfg.oracle;
        p.sigma = 0;
        Rng dummy(0);
        return synthetic_oracle(costs_from_network(net), p, dummy);
    }();
    const double lat_after = [&] {
        OracleParams p = cfg.oracle;
        p.sigma = 0;
        Rng dummy(0);
        return synthetic_oracle(costs_from_network(shallow), p, dummy);
    }();
    write_summary(cfg, "transform_summary.json",
                  {{"depth_before", rep.depth_before},
                   {"depth_after", rep.depth_after},
                   {"collapsed_blocks", rep.collapsed_blocks},
                   {"folded_blocks", rep.folded_blocks},
                   {"latency_before_ms", lat_before},
                   {"latency_after_ms", lat_after}});
    std::cout << "transform: depth " << rep.depth_before << " -> " << rep.depth_after << ", latency "
              << lat_before << " -> " << lat_after << " ms\n";
}

void cmd_verify(const ExperimentConfig& cfg, bool f64) {
    Network<float> deep = require_network(cfg, "network.ckpt");
    Network<float> shallow = require_network(cfg, "network_transformed.ckpt");
    const int n_samples = 200;
    const double tol = f64 ? 1e-9 : 1e-3;
    Rng rng(splitmix64(cfg.seed ^ 0xFE));
    EquivalenceReport rep;
    if (f64) {
        // f64 mode re-runs the transform in double from the stored f32
        // weights, isolating the math from storage precision
        Network<double> d64 = network_cast<double>(deep);
        Network<double> s64 = transform_network(d64);
        rep = verify_equivalence(d64, s64, n_samples, tol, rng);
    } else {
        rep = verify_equivalence(deep, shallow, n_samples, tol, rng);
    }
    write_summary(cfg, "verify_summary.json",
                  {{"max_abs", rep.max_abs},
                   {"mean_abs", rep.mean_abs},
                   {"argmax_agreement", rep.argmax_agreement},
                   {"n_samples", rep.n_samples},
                   {"tol", rep.tol},
                   {"f64", f64},
                   {"passed", rep.passed}});
    std::cout << "verify: max abs " << rep.max_abs << " (tol " << tol << ") "
              << (rep.passed ? "OK" : "FAILED") << "\n";
    if (!rep.passed) throw NumericError("verify: equivalence bound exceeded");
}

void cmd_calibrate(const ExperimentConfig& cfg) {
    Dataset ds = require_dataset(cfg);
    Network<float> net = require_network(cfg, "network.ckpt");
    bool truncated = false;
    CalibratedStats stats =
        calibrate_bn(net, ds, cfg.elastic.grid, cfg.elastic.n_calib, 1.0, cfg.elastic.batch, &truncated);
    if (truncated)
        std::cout << "calibrate: warning: n_calib exceeds dataset size, using full dataset\n";
    save_network(artifact(cfg, "network_calibrated.ckpt"), net, base_meta(cfg), &stats);
    json res = json::array();
    for (const auto& [r, m] : stats.per_resolution) res.push_back(r);
    write_summary(cfg, "calibrate_summary.json",
                  {{"resolutions", res},
                   {"n_calib", std::min<int64_t>(cfg.elastic.n_calib, ds.count)},
                   {"truncated", truncated}});
    std::cout << "calibrate: " << stats.per_resolution.size() << " resolutions calibrated\n";
}

void cmd_eval(const ExperimentConfig& cfg) {
    Dataset ds = require_dataset(cfg);
    CalibratedStats stats;
    Network<float> net = require_network(cfg, "network_calibrated.ckpt", nullptr, &stats);
    json rows = json::array();
    for (int r : cfg.elastic.grid.resolutions()) {
        const double acc_cal = evaluate_at_resolution(net, &stats, ds, r);
        const double acc_raw = evaluate_at_resolution(net, nullptr, ds, r);
        rows.push_back({{"resolution", r}, {"acc_calibrated", acc_cal}, {"acc_uncalibrated", acc_raw}});
        std::cout << "eval: r=" << r << " calibrated " << acc_cal << " uncalibrated " << acc_raw << "\n";
    }
    write_summary(cfg, "eval_summary.json", {{"per_resolution", rows}});
}

void cmd_ablate(const ExperimentConfig& cfg) {
    Dataset ds = require_dataset(cfg);
    LatencyModel<float> predictor = require_predictor(cfg);

    // strategy ablation at a reduced, identical budget per strategy
    Dataset small;
    small.classes = ds.classes;
    small.C = ds.C;
    small.H = ds.H;
    small.W = ds.W;
    small.count = std::min<int64_t>(ds.count, 320);
    small.images.assign(ds.images.begin(),
                        ds.images.begin() + static_cast<long>(small.count * small.C * small.H * small.W));
    small.labels.assign(ds.labels.begin(), ds.labels.begin() + static_cast<long>(small.count));
    SearchConfig sc = cfg.search;
    sc.epochs = 2;
    sc.alpha_freeze_epochs = 1;
    sc.batch = 32;
    std::vector<StrategyReport> reports = ablate_strategies(
        cfg.supernet, sc, {"darts_softmax", "gdas_single", "topk_full", "sandwich"}, small, predictor,
        cfg.oracle, cfg.seed);
    json strat = json::array();
    for (const StrategyReport& r : reports) {
        // wall time goes to the console only, keeping the artifact deterministic
        std::cout << "ablate: " << r.strategy << " coverage " << r.coverage << " wall " << r.wall_time_ms
                  << " ms peak-tensors " << r.peak_live_tensors << " lat-err " << r.latency_error_rel
                  << "\n";
        strat.push_back({{"strategy", r.strategy},
                         {"coverage", r.coverage},
                         {"peak_live_tensors", r.peak_live_tensors},
                         {"final_lat_pred_ms", r.final_lat_pred_ms},
                         {"latency_error_rel", r.latency_error_rel}});
    }

    // elastic factorial: {distillation on/off} x {calibration on/off}
    json factorial = json::array();
    const std::vector<int> arch(static_cast<size_t>(cfg.supernet.num_layers()), 0);
    for (int distill = 0; distill <= 1; ++distill) {
        Rng rng(splitmix64(cfg.seed ^ 0xE1A));
        Network<float> net = build_network<float>(cfg.supernet, arch, rng);
        SgdMomentum<float> opt(static_cast<float>(cfg.elastic.lr), static_cast<float>(cfg.elastic.momentum),
                               static_cast<float>(cfg.elastic.weight_decay));
        const DataSplit split = split_dataset(small, cfg.train.val_frac);
        std::vector<size_t> order = split.train;
        for (int epoch = 0; epoch < 3; ++epoch) {
            rng.shuffle(order);
            for (size_t start = 0; start + 2 <= order.size(); start += 32) {
                const size_t end = std::min(order.size(), start + 32);
                if (end - start < 2) break;
                std::vector<size_t> sel(order.begin() + static_cast<long>(start),
                                        order.begin() + static_cast<long>(end));
                elastic_step(net, small.batch(sel), small.batch_labels(sel), cfg.elastic.grid, rng, opt,
                             distill == 1);
            }
        }
        CalibratedStats stats = calibrate_bn(net, small, cfg.elastic.grid,
                                             std::min<int64_t>(small.count, cfg.elastic.n_calib));
        for (int calib = 0; calib <= 1; ++calib) {
            const double acc = evaluate_at_resolution(net, calib ? &stats : nullptr, small,
                                                      cfg.elastic.grid.r_min);
            factorial.push_back({{"distillation", distill == 1},
                                 {"calibration", calib == 1},
                                 {"acc_at_r_min", acc}});
            std::cout << "ablate: elastic distill=" << distill << " calib=" << calib << " acc " << acc
                      << "\n";
        }
    }
    write_summary(cfg, "ablate_summary.json", {{"strategies", strat}, {"elastic_factorial", factorial}});
}

void cmd_report(const ExperimentConfig& cfg, bool force) {
    const std::string hash = config_hash(cfg);
    json report;
    std::vector<std::string> artifacts;
    auto ingest = [&](const std::string& name, const std::string& key) {
        const std::string p = artifact(cfg, name);
        if (!fs::exists(p)) return;
        json j = json::parse(read_file(p));
        if (j.contains("config_hash") && j.at("config_hash").get<std::string>() != hash && !force)
            throw ConfigError("report: artifact " + name + " has config hash " +
                              j.at("config_hash").get<std::string>() + ", expected " + hash +
                              " (use --force to mix)");
        j.erase("config");
        report[key] = j;
        artifacts.push_back(name);
    };
    ingest("search_result.json", "search");
    ingest("latency_fit_summary.json", "latency_fit");
    ingest("train_summary.json", "train");
    ingest("transform_summary.json", "transform");
    ingest("verify_summary.json", "verify");
    ingest("eval_summary.json", "eval");
    ingest("ablate_summary.json", "ablate");

    const std::string tracep = artifact(cfg, "search_trace.jsonl");
    std::vector<double> lambdas, lats;
    if (fs::exists(tracep)) {
        for (const json& t : load_jsonl(tracep)) {
            lambdas.push_back(t.at("lambda").get<double>());
            lats.push_back(t.at("lat_pred_ms").get<double>());
        }
    }
    if (!lats.empty()) {
        const double T = cfg.search.constraint_ms;
        report["final_lat_rel_error"] = std::abs(lats.back() - T) / T;
        report["final_lambda"] = lambdas.back();
        report["trace_points"] = lats.size();
    }
    write_summary(cfg, "report.json", report);

    // simple deterministic SVG of lambda and predicted latency vs iteration
    if (!lats.empty()) {
        const int W = 640, H = 320, pad = 40;
        auto minmax = [](const std::vector<double>& v) {
            double lo = v[0], hi = v[0];
            for (double x : v) {
                lo = std::min(lo, x);
                hi = std::max(hi, x);
            }
            if (hi - lo < 1e-12) hi = lo + 1e-12;
            return std::pair<double, double>{lo, hi};
        };
        auto poly = [&](const std::vector<double>& v, const char* color) {
            const auto [lo, hi] = minmax(v);
            std::string s = "<polyline fill=\"none\" stroke=\"";
            s += color;
            s += "\" stroke-width=\"1.5\" points=\"";
            char buf[64];
            for (size_t i = 0; i < v.size(); ++i) {
                const double x = pad + (W - 2.0 * pad) * static_cast<double>(i) /
                                           static_cast<double>(std::max<size_t>(1, v.size() - 1));
                const double y = H - pad - (H - 2.0 * pad) * (v[i] - lo) / (hi - lo);
                std::snprintf(buf, sizeof(buf), "%.2f,%.2f ", x, y);
                s += buf;
            }
            s += "\"/>\n";
            return s;
        };
        std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(W) +
                          "\" height=\"" + std::to_string(H) + "\">\n";
        svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
        svg += poly(lats, "#1f77b4");
        svg += poly(lambdas, "#d62728");
        svg += "<text x=\"44\" y=\"20\" font-size=\"12\">blue: predicted latency (ms), red: lambda "
               "(both self-scaled), x: iteration</text>\n";
        svg += "</svg>\n";
        write_file_atomic(artifact(cfg, "report.svg"), svg);
    }
    std::cout << "report: aggregated " << artifacts.size() << " artifacts";
    if (!lats.empty())
        std::cout << ", final |LAT-T|/T = " << report["final_lat_rel_error"].get<double>();
    std::cout << "\n";
}

int run_command(const std::string& name, const CliOptions& opt) {
    try {
        ExperimentConfig cfg = load_experiment(opt);
        if (name == "gen-data") cmd_gen_data(cfg);
        else if (name == "latency-fit") cmd_latency_fit(cfg);
        else if (name == "search") cmd_search(cfg);
        else if (name == "train") cmd_train(cfg);
        else if (name == "transform") cmd_transform(cfg);
        else if (name == "verify") cmd_verify(cfg, opt.f64);
        else if (name == "calibrate") cmd_calibrate(cfg);
        else if (name == "eval") cmd_eval(cfg);
        else if (name == "ablate") cmd_ablate(cfg);
        else if (name == "report") cmd_report(cfg, opt.force);
        else throw ConfigError("unknown command: " + name);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const DimensionError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace dwnas
