#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <unistd.h>

#include "dwnas/config.hpp"
#include "dwnas/training.hpp"

using namespace dwnas;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path dir;
    TempDir() {
        dir = fs::temp_directory_path() / ("dwnas_test_" + std::to_string(::getpid()));
        fs::create_directories(dir);
    }
    ~TempDir() { fs::remove_all(dir); }
    std::string path(const std::string& name) const { return (dir / name).string(); }
};

SupernetConfig tiny_cfg() {
    SupernetConfig cfg;
    cfg.input_c = 3;
    cfg.input_hw = 16;
    cfg.stem_channels = 8;
    cfg.classes = 4;
    cfg.layers = {{8, 2}, {8, 1}};
    cfg.validate();
    return cfg;
}

}  // namespace

TEST_CASE("dataset round trip is byte identical") {
    TempDir tmp;
    Dataset ds = synth_dataset(1, 4, 32, 3, 8, 8);
    save_dataset(tmp.path("a.dwds"), ds);
    Dataset back = load_dataset(tmp.path("a.dwds"));
    CHECK(back.count == ds.count);
    CHECK(back.images == ds.images);
    CHECK(back.labels == ds.labels);
    save_dataset(tmp.path("b.dwds"), back);
    CHECK(read_file(tmp.path("a.dwds")) == read_file(tmp.path("b.dwds")));
}

TEST_CASE("truncated dataset file reports expected vs actual size") {
    TempDir tmp;
    Dataset ds = synth_dataset(2, 4, 16, 3, 8, 8);
    save_dataset(tmp.path("t.dwds"), ds);
    std::string bytes = read_file(tmp.path("t.dwds"));
    bytes.resize(bytes.size() - 100);
    write_file_atomic(tmp.path("t.dwds"), bytes);
    try {
        load_dataset(tmp.path("t.dwds"));
        FAIL("expected DataError");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("expected") != std::string::npos);
        CHECK(msg.find(std::to_string(bytes.size())) != std::string::npos);
    }
}

TEST_CASE("bad magic and bad version are rejected") {
    TempDir tmp;
    write_file_atomic(tmp.path("bad.dwds"), "NOPE0123456789abcdef0123456789abcdef");
    CHECK_THROWS_AS(load_dataset(tmp.path("bad.dwds")), DataError);
    CHECK_THROWS_AS(load_checkpoint(tmp.path("bad.dwds")), DataError);
    CHECK_THROWS_AS(load_dataset(tmp.path("missing.dwds")), DataError);
}

TEST_CASE("synthetic dataset labels are near-uniform") {
    Dataset ds = synth_dataset(3, 10, 1000, 3, 8, 8);
    std::vector<int> counts(10, 0);
    for (int l : ds.labels) ++counts[static_cast<size_t>(l)];
    for (int c : counts) {
        CHECK(c >= 95);   // within 5% of count/classes
        CHECK(c <= 105);
    }
}

TEST_CASE("synthetic dataset is learnable by a small reference network") {
    SupernetConfig cfg = tiny_cfg();
    Dataset ds = synth_dataset(4, 4, 256, 3, 16, 16);
    Rng rng(5);
    Network<float> net = build_network<float>(cfg, {0, 0}, rng);
    TrainSchedule sched;
    sched.total_epochs = 20;
    sched.e_total = 0;
    sched.batch = 32;
    sched.val_frac = 0.25;
    sched.lr = 0.1;
    Rng trng(6);
    auto hist = train_standard(net, ds, sched, trng);
    double best = 0;
    for (const EpochMetrics& m : hist) best = std::max(best, m.val_acc);
    CHECK(best >= 0.95);
}

TEST_CASE("network checkpoint round trip preserves every tensor and the forward pass") {
    TempDir tmp;
    SupernetConfig cfg = tiny_cfg();
    Rng rng(7);
    Network<float> net = build_network<float>(cfg, {6, 0}, rng);
    save_network(tmp.path("net.ckpt"), net, json{{"note", "t"}});
    json meta;
    Network<float> back = load_network(tmp.path("net.ckpt"), &meta);
    CHECK(meta.at("kind") == "network");
    CHECK(back.arch == net.arch);
    CHECK(!back.transformed);
    std::vector<std::vector<float>> a, b;
    net.visit_named([&](const std::string&, Tensor<float>& t) { a.push_back(t.data); });
    back.visit_named([&](const std::string&, Tensor<float>& t) { b.push_back(t.data); });
    CHECK(a == b);
    Tensor<float> x({2, 3, 16, 16});
    Rng prng(8);
    for (float& v : x.data) v = static_cast<float>(prng.normal());
    CHECK(network_forward_infer(net, x).data == network_forward_infer(back, x).data);
    // second save of the loaded network is byte identical
    save_network(tmp.path("net2.ckpt"), back, json{{"note", "t"}});
    CHECK(read_file(tmp.path("net.ckpt")) == read_file(tmp.path("net2.ckpt")));
}

TEST_CASE("transformed network checkpoint restores the collapsed structure") {
    TempDir tmp;
    SupernetConfig cfg = tiny_cfg();
    Rng rng(9);
    Network<float> net = build_network<float>(cfg, {6, 7}, rng);
    Network<float> shallow = transform_network(net);
    save_network(tmp.path("s.ckpt"), shallow, json::object());
    Network<float> back = load_network(tmp.path("s.ckpt"));
    CHECK(back.transformed);
    CHECK(back.searchable_depth() == shallow.searchable_depth());
    Tensor<float> x({2, 3, 16, 16});
    Rng prng(10);
    for (float& v : x.data) v = static_cast<float>(prng.normal());
    CHECK(network_forward_infer(back, x).data == network_forward_infer(shallow, x).data);
}

TEST_CASE("supernet checkpoint round trip preserves weights, alpha and lambda") {
    TempDir tmp;
    SupernetConfig cfg = tiny_cfg();
    Rng rng(11);
    Supernet<float> net = build_supernet<float>(cfg, rng);
    ArchParams alpha({2, 12});
    Rng arng(12);
    for (float& v : alpha.data) v = static_cast<float>(arng.normal());
    save_supernet(tmp.path("sn.ckpt"), net, alpha, -0.375, json::object());
    ArchParams alpha2({1, 1});
    double lambda = 0;
    Supernet<float> back = load_supernet(tmp.path("sn.ckpt"), &alpha2, &lambda);
    CHECK(lambda == -0.375);
    CHECK(alpha2.shape == alpha.shape);
    CHECK(alpha2.data == alpha.data);
    std::vector<std::vector<float>> a, b;
    net.visit_named([&](const std::string&, Tensor<float>& t) { a.push_back(t.data); });
    back.visit_named([&](const std::string&, Tensor<float>& t) { b.push_back(t.data); });
    CHECK(a == b);
}

TEST_CASE("predictor checkpoint reload predicts identically on 100 probes") {
    TempDir tmp;
    Rng rng(13);
    LatencyModel<float> m = make_latency_model<float>(24, rng, 32, 16);
    m.trained = true;
    save_predictor(tmp.path("p.ckpt"), m, json::object());
    LatencyModel<float> back = load_predictor(tmp.path("p.ckpt"));
    CHECK(back.trained);
    Rng prng(14);
    for (int i = 0; i < 100; ++i) {
        std::vector<float> enc(24);
        for (float& v : enc) v = static_cast<float>(prng.uniform());
        CHECK(predict_with_grad(m, enc).first == predict_with_grad(back, enc).first);
    }
}

TEST_CASE("checkpoint kind mismatch is a data error naming both kinds") {
    TempDir tmp;
    Rng rng(15);
    LatencyModel<float> m = make_latency_model<float>(24, rng, 32, 16);
    save_predictor(tmp.path("p.ckpt"), m, json::object());
    try {
        load_network(tmp.path("p.ckpt"));
        FAIL("expected DataError");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("network") != std::string::npos);
        CHECK(msg.find("predictor") != std::string::npos);
    }
}

TEST_CASE("latency pairs round trip and reject non-positive latency") {
    TempDir tmp;
    SupernetConfig cfg = tiny_cfg();
    OracleParams op;
    Rng rng(16);
    std::vector<LatencyPair> pairs = generate_pairs(cfg, 50, op, rng);
    save_pairs(tmp.path("p.jsonl"), pairs);
    std::vector<LatencyPair> back = load_pairs(tmp.path("p.jsonl"));
    REQUIRE(back.size() == pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) {
        CHECK(back[i].arch.index == pairs[i].arch.index);
        CHECK(back[i].latency_ms == pairs[i].latency_ms);
    }
    write_file_atomic(tmp.path("bad.jsonl"), "{\"arch\": [0, 0], \"latency_ms\": -1.0}\n");
    CHECK_THROWS_AS(load_pairs(tmp.path("bad.jsonl")), DataError);
}

TEST_CASE("jsonl writer round trip") {
    TempDir tmp;
    JsonlWriter w;
    w.append(json{{"a", 1}});
    w.append(json{{"b", 2.5}});
    w.save(tmp.path("x.jsonl"));
    std::vector<json> back = load_jsonl(tmp.path("x.jsonl"));
    REQUIRE(back.size() == 2);
    CHECK(back[0].at("a") == 1);
    CHECK(back[1].at("b") == 2.5);
}
