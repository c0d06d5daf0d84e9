#pragma once

// Experiment configuration: JSON with fixed sections, strict unknown-key
// rejection, documented desk-scale defaults, and a stable config hash that
// every artifact embeds.

#include <set>
#include <string>

#include "dwnas/data_io.hpp"
#include "dwnas/elastic.hpp"
#include "dwnas/latency.hpp"
#include "dwnas/search.hpp"
#include "dwnas/training.hpp"

namespace dwnas {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: section '" + where + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

struct DatasetCfg {
    int classes = 10;
    int64_t count = 1024;
    int channels = 3;
    int size = 32;
};

struct ElasticCfg {
    ResolutionGrid grid;  // 16..32 step 8, M=3
    int epochs = 12;
    double lr = 0.02;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch = 64;
    bool distill = true;
    int64_t n_calib = 512;
};

struct LatencyFitCfg {
    int n_pairs = 1000;
    int fit_epochs = 150;
    double train_frac = 0.8;
};

struct ExperimentConfig {
    DatasetCfg dataset;
    SupernetConfig supernet = SupernetConfig::desk_default();
    SearchConfig search;
    OracleParams oracle;
    LatencyFitCfg latency_fit;
    TrainSchedule train;
    bool train_hybrid = true;
    ElasticCfg elastic;
    uint64_t seed = 1;
    std::string output_dir = "out";
};

inline ExperimentConfig parse_config(const json& j) {
    check_keys(j, {"dataset", "supernet", "search", "latency_oracle", "train", "elastic", "seed",
                   "output_dir"},
               "top level");
    ExperimentConfig c;
    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        check_keys(d, {"classes", "count", "channels", "size"}, "dataset");
        get_if(d, "classes", c.dataset.classes);
        get_if(d, "count", c.dataset.count);
        get_if(d, "channels", c.dataset.channels);
        get_if(d, "size", c.dataset.size);
    }
    if (j.contains("supernet")) {
        const json& s = j.at("supernet");
        check_keys(s, {"input_channels", "input_size", "stem_channels", "classes", "layers"}, "supernet");
        get_if(s, "input_channels", c.supernet.input_c);
        get_if(s, "input_size", c.supernet.input_hw);
        get_if(s, "stem_channels", c.supernet.stem_channels);
        get_if(s, "classes", c.supernet.classes);
        if (s.contains("layers")) {
            c.supernet.layers.clear();
            for (const auto& l : s.at("layers")) {
                check_keys(l, {"channels", "stride"}, "supernet.layers[]");
                c.supernet.layers.push_back({l.at("channels").get<int>(), l.at("stride").get<int>()});
            }
        }
    }
    c.supernet.input_c = c.dataset.channels;
    c.supernet.input_hw = c.dataset.size;
    c.supernet.classes = c.dataset.classes;
    if (j.contains("search")) {
        const json& s = j.at("search");
        check_keys(s,
                   {"constraint_ms", "eta_w", "eta_alpha", "eta_lambda", "alpha_freeze_epochs", "epochs",
                    "batch", "strategy", "tau", "clamp_lambda", "momentum", "weight_decay", "val_frac"},
                   "search");
        get_if(s, "constraint_ms", c.search.constraint_ms);
        get_if(s, "eta_w", c.search.eta_w);
        get_if(s, "eta_alpha", c.search.eta_alpha);
        get_if(s, "eta_lambda", c.search.eta_lambda);
        get_if(s, "alpha_freeze_epochs", c.search.alpha_freeze_epochs);
        get_if(s, "epochs", c.search.epochs);
        get_if(s, "batch", c.search.batch);
        get_if(s, "strategy", c.search.strategy);
        get_if(s, "tau", c.search.tau);
        get_if(s, "clamp_lambda", c.search.clamp_lambda);
        get_if(s, "momentum", c.search.momentum);
        get_if(s, "weight_decay", c.search.weight_decay);
        get_if(s, "val_frac", c.search.val_frac);
    }
    if (j.contains("latency_oracle")) {
        const json& o = j.at("latency_oracle");
        check_keys(o, {"c0", "c1", "gamma", "sigma", "n_pairs", "fit_epochs", "train_frac"},
                   "latency_oracle");
        get_if(o, "c0", c.oracle.c0);
        get_if(o, "c1", c.oracle.c1);
        get_if(o, "gamma", c.oracle.gamma);
        get_if(o, "sigma", c.oracle.sigma);
        get_if(o, "n_pairs", c.latency_fit.n_pairs);
        get_if(o, "fit_epochs", c.latency_fit.fit_epochs);
        get_if(o, "train_frac", c.latency_fit.train_frac);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        check_keys(t,
                   {"total_epochs", "grafting_epochs", "lr", "momentum", "weight_decay", "batch",
                    "val_frac", "hybrid"},
                   "train");
        get_if(t, "total_epochs", c.train.total_epochs);
        get_if(t, "grafting_epochs", c.train.e_total);
        get_if(t, "lr", c.train.lr);
        get_if(t, "momentum", c.train.momentum);
        get_if(t, "weight_decay", c.train.weight_decay);
        get_if(t, "batch", c.train.batch);
        get_if(t, "val_frac", c.train.val_frac);
        get_if(t, "hybrid", c.train_hybrid);
    }
    if (j.contains("elastic")) {
        const json& e = j.at("elastic");
        check_keys(e,
                   {"r_min", "r_max", "step", "epochs", "lr", "momentum", "weight_decay", "batch",
                    "distill", "n_calib"},
                   "elastic");
        get_if(e, "r_min", c.elastic.grid.r_min);
        get_if(e, "r_max", c.elastic.grid.r_max);
        get_if(e, "step", c.elastic.grid.step);
        get_if(e, "epochs", c.elastic.epochs);
        get_if(e, "lr", c.elastic.lr);
        get_if(e, "momentum", c.elastic.momentum);
        get_if(e, "weight_decay", c.elastic.weight_decay);
        get_if(e, "batch", c.elastic.batch);
        get_if(e, "distill", c.elastic.distill);
        get_if(e, "n_calib", c.elastic.n_calib);
    }
    get_if(j, "seed", c.seed);
    get_if(j, "output_dir", c.output_dir);

    c.supernet.validate();
    c.search.validate();
    c.oracle.validate();
    c.train.validate();
    c.elastic.grid.validate(c.supernet.total_stride());
    if (c.dataset.classes <= 1 || c.dataset.count < 10)
        throw ConfigError("config: dataset must have >1 classes and >=10 samples");
    return c;
}

// Canonical fully-populated echo (defaults materialized).
inline json config_echo(const ExperimentConfig& c) {
    return json{
        {"dataset",
         {{"classes", c.dataset.classes},
          {"count", c.dataset.count},
          {"channels", c.dataset.channels},
          {"size", c.dataset.size}}},
        {"supernet", supernet_cfg_to_json(c.supernet)},
        {"search",
         {{"constraint_ms", c.search.constraint_ms},
          {"eta_w", c.search.eta_w},
          {"eta_alpha", c.search.eta_alpha},
          {"eta_lambda", c.search.eta_lambda},
          {"alpha_freeze_epochs", c.search.alpha_freeze_epochs},
          {"epochs", c.search.epochs},
          {"batch", c.search.batch},
          {"strategy", c.search.strategy},
          {"tau", c.search.tau},
          {"clamp_lambda", c.search.clamp_lambda},
          {"momentum", c.search.momentum},
          {"weight_decay", c.search.weight_decay},
          {"val_frac", c.search.val_frac}}},
        {"latency_oracle",
         {{"c0", c.oracle.c0},
          {"c1", c.oracle.c1},
          {"gamma", c.oracle.gamma},
          {"sigma", c.oracle.sigma},
          {"n_pairs", c.latency_fit.n_pairs},
          {"fit_epochs", c.latency_fit.fit_epochs},
          {"train_frac", c.latency_fit.train_frac}}},
        {"train",
         {{"total_epochs", c.train.total_epochs},
          {"grafting_epochs", c.train.e_total},
          {"lr", c.train.lr},
          {"momentum", c.train.momentum},
          {"weight_decay", c.train.weight_decay},
          {"batch", c.train.batch},
          {"val_frac", c.train.val_frac},
          {"hybrid", c.train_hybrid}}},
        {"elastic",
         {{"r_min", c.elastic.grid.r_min},
          {"r_max", c.elastic.grid.r_max},
          {"step", c.elastic.grid.step},
          {"epochs", c.elastic.epochs},
          {"lr", c.elastic.lr},
          {"momentum", c.elastic.momentum},
          {"weight_decay", c.elastic.weight_decay},
          {"batch", c.elastic.batch},
          {"distill", c.elastic.distill},
          {"n_calib", c.elastic.n_calib}}},
        {"seed", c.seed},
        {"output_dir", c.output_dir}};
}

// FNV-1a over the canonical echo dump. output_dir is excluded so relocating
// outputs does not orphan an artifact lineage; everything else, seed
// included, feeds the hash.
inline std::string config_hash(const ExperimentConfig& c) {
    json j = config_echo(c);
    j.erase("output_dir");
    const std::string s = j.dump();
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace dwnas
