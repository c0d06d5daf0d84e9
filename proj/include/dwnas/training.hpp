#pragma once

// Stand-alone network training: standard recipe, hybrid transformable
// training with the grafted-activation schedule, and the train-first vs
// transform-first comparison harness.

#include <cmath>
#include <string>
#include <vector>

#include "dwnas/elastic.hpp"
#include "dwnas/optim.hpp"
#include "dwnas/transform.hpp"

namespace dwnas {

struct TrainSchedule {
    int total_epochs = 30;
    int e_total = 10;  // grafting horizon (1/3 of total by default)
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch = 64;
    double val_frac = 0.2;

    void validate() const {
        if (total_epochs <= 0) throw ConfigError("train: total_epochs must be positive");
        if (e_total < 0 || e_total > total_epochs)
            throw ConfigError("train: grafting horizon must be in [0, total_epochs]");
        if (lr < 0 || batch <= 0) throw ConfigError("train: bad lr or batch size");
        if (val_frac <= 0 || val_frac >= 1) throw ConfigError("train: val_frac must be in (0,1)");
    }
};

// E_curr/E_total, clamped at 1 (and 1 when the horizon is 0).
inline double epsilon_schedule(int e_curr, int e_total) {
    if (e_curr < 0) throw NumericError("epsilon_schedule: negative epoch");
    if (e_total <= 0 || e_curr >= e_total) return 1.0;
    return static_cast<double>(e_curr) / static_cast<double>(e_total);
}

inline double cosine_lr(double lr0, int epoch, int total) {
    return 0.5 * lr0 * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(total)));
}

struct EpochMetrics {
    int epoch = 0;
    double train_loss = 0;
    double val_acc = 0;
    double eps = 1.0;
};

struct DataSplit {
    std::vector<size_t> train, val;
};

// Deterministic leading/trailing split; the generator already shuffles.
inline DataSplit split_dataset(const Dataset& ds, double val_frac) {
    const int64_t n_val = std::max<int64_t>(1, static_cast<int64_t>(val_frac * static_cast<double>(ds.count)));
    DataSplit s;
    for (int64_t i = 0; i < ds.count - n_val; ++i) s.train.push_back(static_cast<size_t>(i));
    for (int64_t i = ds.count - n_val; i < ds.count; ++i) s.val.push_back(static_cast<size_t>(i));
    return s;
}

inline void hflip_inplace(Tensor<float>& x, Rng& rng) {
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    for (int64_t n = 0; n < N; ++n) {
        if (rng.uniform() >= 0.5) continue;
        for (int64_t c = 0; c < C; ++c)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W / 2; ++w)
                    std::swap(x.at4(n, c, h, w), x.at4(n, c, h, W - 1 - w));
    }
}

inline double val_accuracy(const Network<float>& net, const Dataset& ds, const std::vector<size_t>& idx,
                           double graft_eps, int batch = 64) {
    int64_t correct = 0;
    for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch)) {
        const size_t end = std::min(idx.size(), start + static_cast<size_t>(batch));
        std::vector<size_t> sel(idx.begin() + static_cast<long>(start), idx.begin() + static_cast<long>(end));
        Tensor<float> x = ds.batch(sel);
        Tensor<float> logits = network_forward_infer(net, x, graft_eps);
        const std::vector<int> labels = ds.batch_labels(sel);
        const int64_t C = logits.dim(1);
        for (int64_t b = 0; b < static_cast<int64_t>(sel.size()); ++b) {
            int64_t am = 0;
            for (int64_t c = 1; c < C; ++c)
                if (logits.at2(b, c) > logits.at2(b, am)) am = c;
            if (static_cast<int>(am) == labels[static_cast<size_t>(b)]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(idx.size());
}

// Shared loop; hybrid mode follows the grafting schedule, standard mode runs
// with identity internals (the network's final functional form) throughout.
inline std::vector<EpochMetrics> train_network(Network<float>& net, const Dataset& ds,
                                               const TrainSchedule& sched, Rng& rng, bool hybrid) {
    sched.validate();
    const DataSplit split = split_dataset(ds, sched.val_frac);
    SgdMomentum<float> opt(static_cast<float>(sched.lr), static_cast<float>(sched.momentum),
                           static_cast<float>(sched.weight_decay));
    std::vector<Tensor<float>*> params;
    net.visit_params([&](Tensor<float>& p) { params.push_back(&p); });
    std::vector<EpochMetrics> history;
    std::vector<size_t> order = split.train;
    for (int epoch = 0; epoch < sched.total_epochs; ++epoch) {
        const double eps = hybrid ? epsilon_schedule(epoch, sched.e_total) : 1.0;
        opt.set_lr(static_cast<float>(cosine_lr(sched.lr, epoch, sched.total_epochs)));
        rng.shuffle(order);
        double loss_sum = 0;
        int64_t nb = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(sched.batch)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(sched.batch));
            if (end - start < 2) continue;  // BN needs a real batch
            std::vector<size_t> sel(order.begin() + static_cast<long>(start),
                                    order.begin() + static_cast<long>(end));
            Tensor<float> x = ds.batch(sel);
            hflip_inplace(x, rng);
            const std::vector<int> labels = ds.batch_labels(sel);
            NetCache<float> cache;
            Tensor<float> logits = network_forward_train(net, x, eps, cache);
            Tensor<float> glogits;
            const double loss = softmax_cross_entropy(logits, labels, &glogits);
            if (!std::isfinite(loss)) throw NumericError("training: non-finite loss at epoch " + std::to_string(epoch));
            for (Tensor<float>* p : params) p->zero_grad();
            network_backward(net, cache, eps, glogits);
            opt.step(params);
            loss_sum += loss;
            ++nb;
        }
        EpochMetrics m;
        m.epoch = epoch;
        m.eps = eps;
        m.train_loss = nb ? loss_sum / static_cast<double>(nb) : 0.0;
        m.val_acc = val_accuracy(net, ds, split.val, eps, sched.batch);
        history.push_back(m);
    }
    return history;
}

inline std::vector<EpochMetrics> train_standard(Network<float>& net, const Dataset& ds,
                                                const TrainSchedule& sched, Rng& rng) {
    return train_network(net, ds, sched, rng, false);
}

// Grafted training: linear operators' internal activations run at
// eps = epoch/E_total (ReLU6 early, exact identity from E_total on). Falls
// back to the standard recipe when the network has no linear operator.
inline std::vector<EpochMetrics> train_hybrid_transformable(Network<float>& net, const Dataset& ds,
                                                            const TrainSchedule& sched, Rng& rng,
                                                            bool* fell_back = nullptr) {
    if (!net.has_linear_op()) {
        if (fell_back) *fell_back = true;
        return train_network(net, ds, sched, rng, false);
    }
    if (fell_back) *fell_back = false;
    return train_network(net, ds, sched, rng, true);
}

// Branch A: train the deep form, then transform. Branch B: transform the
// randomly initialized network first, then train the shallow form. Same
// budgets, same seeds.
inline json compare_train_first_vs_transform_first(const SupernetConfig& cfg, const std::vector<int>& arch,
                                                   const Dataset& ds, const TrainSchedule& sched,
                                                   uint64_t seed) {
    Rng init_rng(seed);
    Network<float> a = build_network<float>(cfg, arch, init_rng);
    Network<float> b_src = a;  // identical initialization
    Rng rng_a(splitmix64(seed ^ 0xA));
    std::vector<EpochMetrics> hist_a = train_hybrid_transformable(a, ds, sched, rng_a);
    TransformReport tra;
    Network<float> a_shallow = transform_network(a, &tra);

    Network<float> b = transform_network(b_src);
    Rng rng_b(splitmix64(seed ^ 0xB));
    std::vector<EpochMetrics> hist_b = train_standard(b, ds, sched, rng_b);

    Rng probe(splitmix64(seed ^ 0xC));
    Tensor<float> x({8, cfg.input_c, cfg.input_hw, cfg.input_hw});
    for (float& v : x.data) v = static_cast<float>(probe.normal());
    const double transform_diff = max_logit_diff(a, a_shallow, x);

    auto curve = [](const std::vector<EpochMetrics>& h) {
        json c = json::array();
        for (const EpochMetrics& m : h)
            c.push_back({{"epoch", m.epoch}, {"train_loss", m.train_loss}, {"val_acc", m.val_acc}, {"eps", m.eps}});
        return c;
    };
    return json{{"train_first", {{"curve", curve(hist_a)}, {"final_val_acc", hist_a.back().val_acc},
                                 {"depth_after_transform", a_shallow.searchable_depth()}}},
                {"transform_first", {{"curve", curve(hist_b)}, {"final_val_acc", hist_b.back().val_acc},
                                     {"depth", b.searchable_depth()}}},
                {"depths_equal", a_shallow.searchable_depth() == b.searchable_depth()},
                {"train_first_transform_max_abs_diff", transform_diff}};
}

}  // namespace dwnas
