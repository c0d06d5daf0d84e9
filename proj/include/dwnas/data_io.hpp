#pragma once

// Dataset format (DWDS), checkpoint format (DWCK), the synthetic learnable
// dataset generator, latency-pair / JSONL persistence. All formats are
// little-endian f32 on disk and written atomically (temp file + rename).

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "dwnas/latency.hpp"
#include "dwnas/rng.hpp"
#include "dwnas/search_space.hpp"

namespace dwnas {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Low-level little-endian IO.

inline void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
    uint32_t u;
    static_assert(sizeof(u) == sizeof(v));
    std::memcpy(&u, &v, 4);
    put_u32(out, u);
}

class ByteReader {
   public:
    ByteReader(const std::string& bytes, std::string origin) : b_(bytes), origin_(std::move(origin)) {}

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(b_[pos_ + static_cast<size_t>(i)])) << (8 * i);
        pos_ += 4;
        return v;
    }

    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(b_[pos_ + static_cast<size_t>(i)])) << (8 * i);
        pos_ += 8;
        return v;
    }

    float f32() {
        const uint32_t u = u32();
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }

    std::string bytes(size_t n) {
        need(n);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void need(size_t n) const {
        if (pos_ + n > b_.size())
            throw DataError(origin_ + ": truncated, need " + std::to_string(pos_ + n) + " bytes, have " +
                            std::to_string(b_.size()));
    }

    size_t pos() const { return pos_; }
    size_t remaining() const { return b_.size() - pos_; }

   private:
    const std::string& b_;
    std::string origin_;
    size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open file: " + path);
    std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return s;
}

inline void write_file_atomic(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write file: " + tmp);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw DataError("short write: " + tmp);
    }
    fs::rename(tmp, target);
}

// ---------------------------------------------------------------------------
// Dataset.

struct Dataset {
    int64_t count = 0, C = 0, H = 0, W = 0;
    int classes = 0;
    std::vector<float> images;  // count*C*H*W
    std::vector<int> labels;

    Tensor<float> batch(const std::vector<size_t>& idx) const {
        Tensor<float> x({static_cast<int64_t>(idx.size()), C, H, W});
        const size_t stride = static_cast<size_t>(C * H * W);
        for (size_t b = 0; b < idx.size(); ++b)
            std::copy(images.begin() + static_cast<long>(idx[b] * stride),
                      images.begin() + static_cast<long>((idx[b] + 1) * stride),
                      x.data.begin() + static_cast<long>(b * stride));
        return x;
    }

    std::vector<int> batch_labels(const std::vector<size_t>& idx) const {
        std::vector<int> out(idx.size());
        for (size_t b = 0; b < idx.size(); ++b) out[b] = labels[idx[b]];
        return out;
    }
};

// Class-conditional oriented sinusoid patterns plus Gaussian pixel noise;
// learnable by a small conv net by construction.
inline Dataset synth_dataset(uint64_t seed, int classes, int64_t count, int64_t C, int64_t H, int64_t W) {
    if (classes <= 0 || count <= 0 || C <= 0 || H <= 0 || W <= 0)
        throw ConfigError("synth_dataset: all dimensions must be positive");
    Rng rng(seed);
    Dataset ds;
    ds.count = count;
    ds.C = C;
    ds.H = H;
    ds.W = W;
    ds.classes = classes;
    ds.images.resize(static_cast<size_t>(count * C * H * W));
    ds.labels.resize(static_cast<size_t>(count));
    std::vector<size_t> order(static_cast<size_t>(count));
    std::iota(order.begin(), order.end(), size_t{0});
    rng.shuffle(order);
    const size_t stride = static_cast<size_t>(C * H * W);
    for (int64_t i = 0; i < count; ++i) {
        const int k = static_cast<int>(i % classes);
        const size_t slot = order[static_cast<size_t>(i)];
        ds.labels[slot] = k;
        const double theta = M_PI * static_cast<double>(k) / static_cast<double>(classes);
        const double freq = 2.0 + static_cast<double>(k % 3);
        const double phase = 0.7 * static_cast<double>(k);
        float* img = &ds.images[slot * stride];
        for (int64_t c = 0; c < C; ++c) {
            const double chan = 1.0 + 0.25 * static_cast<double>(c);
            for (int64_t y = 0; y < H; ++y)
                for (int64_t x = 0; x < W; ++x) {
                    const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
                    const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
                    const double t = u * std::cos(theta) + v * std::sin(theta);
                    const double val = chan * std::sin(2.0 * M_PI * freq * t + phase) + rng.normal(0.0, 0.1);
                    img[(c * H + y) * W + x] = static_cast<float>(val);
                }
        }
    }
    return ds;
}

constexpr uint32_t kDatasetVersion = 1;

inline void save_dataset(const std::string& path, const Dataset& ds) {
    std::string out;
    out += "DWDS";
    put_u32(out, kDatasetVersion);
    put_u32(out, static_cast<uint32_t>(ds.count));
    put_u32(out, static_cast<uint32_t>(ds.C));
    put_u32(out, static_cast<uint32_t>(ds.H));
    put_u32(out, static_cast<uint32_t>(ds.W));
    put_u32(out, static_cast<uint32_t>(ds.classes));
    for (float v : ds.images) put_f32(out, v);
    for (int v : ds.labels) put_u32(out, static_cast<uint32_t>(v));
    write_file_atomic(path, out);
}

inline Dataset load_dataset(const std::string& path) {
    const std::string bytes = read_file(path);
    ByteReader r(bytes, path);
    if (r.bytes(4) != "DWDS") throw DataError(path + ": bad dataset magic");
    const uint32_t version = r.u32();
    if (version != kDatasetVersion)
        throw DataError(path + ": unsupported dataset version " + std::to_string(version));
    Dataset ds;
    ds.count = r.u32();
    ds.C = r.u32();
    ds.H = r.u32();
    ds.W = r.u32();
    ds.classes = static_cast<int>(r.u32());
    const size_t expect = 28 + 4 * static_cast<size_t>(ds.count) * (static_cast<size_t>(ds.C * ds.H * ds.W) + 1);
    if (bytes.size() != expect)
        throw DataError(path + ": expected " + std::to_string(expect) + " bytes, got " +
                        std::to_string(bytes.size()));
    ds.images.resize(static_cast<size_t>(ds.count * ds.C * ds.H * ds.W));
    for (float& v : ds.images) v = r.f32();
    ds.labels.resize(static_cast<size_t>(ds.count));
    for (int& v : ds.labels) {
        v = static_cast<int>(r.u32());
        if (v >= ds.classes) throw DataError(path + ": label " + std::to_string(v) + " >= classes");
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Config <-> JSON fragments.

inline json supernet_cfg_to_json(const SupernetConfig& cfg) {
    json layers = json::array();
    for (const auto& l : cfg.layers) layers.push_back({{"channels", l.cout}, {"stride", l.stride}});
    return json{{"input_channels", cfg.input_c},
                {"input_size", cfg.input_hw},
                {"stem_channels", cfg.stem_channels},
                {"classes", cfg.classes},
                {"layers", layers}};
}

inline SupernetConfig supernet_cfg_from_json(const json& j) {
    SupernetConfig cfg;
    cfg.input_c = j.at("input_channels").get<int>();
    cfg.input_hw = j.at("input_size").get<int>();
    cfg.stem_channels = j.at("stem_channels").get<int>();
    cfg.classes = j.at("classes").get<int>();
    cfg.layers.clear();
    for (const auto& l : j.at("layers"))
        cfg.layers.push_back({l.at("channels").get<int>(), l.at("stride").get<int>()});
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Calibrated BN statistics (per resolution).

struct CalibratedStats {
    // resolution -> bn layer name -> (mean, var)
    std::map<int, BnStatsMap<float>> per_resolution;

    bool empty() const { return per_resolution.empty(); }

    json to_json() const {
        json j = json::object();
        for (const auto& [r, m] : per_resolution) {
            json layers = json::object();
            for (const auto& kv : m.stats)
                layers[kv.first] = {{"mean", kv.second.first}, {"var", kv.second.second}};
            j[std::to_string(r)] = layers;
        }
        return j;
    }

    static CalibratedStats from_json(const json& j) {
        CalibratedStats s;
        for (auto it = j.begin(); it != j.end(); ++it) {
            BnStatsMap<float> m;
            for (auto lt = it.value().begin(); lt != it.value().end(); ++lt) {
                std::vector<float> mean = lt.value().at("mean").get<std::vector<float>>();
                std::vector<float> var = lt.value().at("var").get<std::vector<float>>();
                m.stats.push_back({lt.key(), {std::move(mean), std::move(var)}});
            }
            s.per_resolution[std::stoi(it.key())] = std::move(m);
        }
        return s;
    }
};

// ---------------------------------------------------------------------------
// Checkpoint format: "DWCK" | u32 version | u64 manifest length | manifest
// JSON (sorted keys) | f32 LE tensor blob.

constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    json manifest;     // includes "kind", "tensors" directory, config echo
    std::string blob;  // concatenated f32 tensors

    std::vector<float> tensor(const std::string& name, std::vector<int64_t>* shape = nullptr) const {
        const auto& dir = manifest.at("tensors");
        if (!dir.contains(name)) throw DataError("checkpoint: missing tensor '" + name + "'");
        const auto& e = dir.at(name);
        const size_t off = e.at("offset").get<size_t>();
        const size_t len = e.at("length").get<size_t>();
        if (off + len > blob.size()) throw DataError("checkpoint: tensor '" + name + "' outside blob");
        std::vector<float> v(len / 4);
        std::memcpy(v.data(), blob.data() + off, len);
        if (shape) *shape = e.at("shape").get<std::vector<int64_t>>();
        return v;
    }
};

class CheckpointWriter {
   public:
    explicit CheckpointWriter(json manifest_base) : manifest_(std::move(manifest_base)) {
        manifest_["format_version"] = kCheckpointVersion;
        manifest_["tensors"] = json::object();
    }

    void add(const std::string& name, const Tensor<float>& t) {
        const size_t off = blob_.size();
        for (float v : t.data) put_f32(blob_, v);
        manifest_["tensors"][name] = {
            {"shape", t.shape}, {"offset", off}, {"length", blob_.size() - off}};
    }

    void save(const std::string& path) {
        std::string out;
        out += "DWCK";
        put_u32(out, kCheckpointVersion);
        const std::string m = manifest_.dump();
        put_u64(out, m.size());
        out += m;
        out += blob_;
        write_file_atomic(path, out);
    }

    json& manifest() { return manifest_; }

   private:
    json manifest_;
    std::string blob_;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    const std::string bytes = read_file(path);
    ByteReader r(bytes, path);
    if (r.bytes(4) != "DWCK") throw DataError(path + ": bad checkpoint magic");
    const uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
    const uint64_t mlen = r.u64();
    Checkpoint ck;
    ck.manifest = json::parse(r.bytes(mlen));
    ck.blob = r.bytes(r.remaining());
    return ck;
}

inline void require_kind(const Checkpoint& ck, const std::string& kind, const std::string& path) {
    const std::string k = ck.manifest.value("kind", "");
    if (k != kind)
        throw DataError(path + ": expected checkpoint kind '" + kind + "', found '" + k + "'");
}

// ---------------------------------------------------------------------------
// Network checkpoints.

// Allocates a network with the right structure but unset weights.
inline Network<float> make_network_skeleton(const SupernetConfig& cfg, const std::vector<int>& arch,
                                            bool transformed) {
    Rng dummy(0);
    Network<float> net = build_network<float>(cfg, arch, dummy);
    if (transformed) {
        const auto& specs = operator_space();
        for (size_t l = 0; l < net.blocks.size(); ++l) {
            const OperatorSpec& sp = specs[static_cast<size_t>(arch[l])];
            if (!sp.linear) continue;
            Block<float>& b = net.blocks[l];
            const int cin = cfg.cin_of(static_cast<int>(l));
            const int cout = cfg.layers[l].cout;
            b.kind = Block<float>::Kind::Collapsed;
            b.col.conv = make_conv<float>(cin, cout, sp.kernel, cfg.layers[l].stride, (sp.kernel - 1) / 2, 1);
            b.col.trailing_relu6 = true;
            b.mb = MBConvOperator<float>{};
        }
        net.transformed = true;
    }
    return net;
}

inline void save_network(const std::string& path, Network<float>& net, const json& meta,
                         const CalibratedStats* stats = nullptr) {
    json m = meta;
    m["kind"] = "network";
    m["supernet_config"] = supernet_cfg_to_json(net.cfg);
    m["arch"] = net.arch;
    m["transformed"] = net.transformed;
    if (stats && !stats->empty()) m["calibrated_stats"] = stats->to_json();
    CheckpointWriter w(m);
    net.visit_named([&](const std::string& name, Tensor<float>& t) { w.add(name, t); });
    w.save(path);
}

inline Network<float> load_network(const std::string& path, json* meta = nullptr,
                                   CalibratedStats* stats = nullptr) {
    Checkpoint ck = load_checkpoint(path);
    require_kind(ck, "network", path);
    const SupernetConfig cfg = supernet_cfg_from_json(ck.manifest.at("supernet_config"));
    const std::vector<int> arch = ck.manifest.at("arch").get<std::vector<int>>();
    Network<float> net = make_network_skeleton(cfg, arch, ck.manifest.value("transformed", false));
    net.visit_named([&](const std::string& name, Tensor<float>& t) {
        std::vector<int64_t> shape;
        std::vector<float> v = ck.tensor(name, &shape);
        if (shape != t.shape)
            throw DataError(path + ": tensor '" + name + "' shape mismatch: file " + shape_str(shape) +
                            " vs expected " + shape_str(t.shape));
        t.data = std::move(v);
    });
    if (meta) *meta = ck.manifest;
    if (stats && ck.manifest.contains("calibrated_stats"))
        *stats = CalibratedStats::from_json(ck.manifest.at("calibrated_stats"));
    return net;
}

// ---------------------------------------------------------------------------
// Supernet checkpoints (search state: weights + alpha + lambda).

inline void save_supernet(const std::string& path, Supernet<float>& net, const ArchParams& alpha,
                          double lambda, const json& meta) {
    json m = meta;
    m["kind"] = "supernet";
    m["supernet_config"] = supernet_cfg_to_json(net.cfg);
    m["lambda"] = lambda;
    CheckpointWriter w(m);
    net.visit_named([&](const std::string& name, Tensor<float>& t) { w.add(name, t); });
    w.add("alpha", alpha);
    w.save(path);
}

inline Supernet<float> load_supernet(const std::string& path, ArchParams* alpha = nullptr,
                                     double* lambda = nullptr, json* meta = nullptr) {
    Checkpoint ck = load_checkpoint(path);
    require_kind(ck, "supernet", path);
    const SupernetConfig cfg = supernet_cfg_from_json(ck.manifest.at("supernet_config"));
    Rng dummy(0);
    Supernet<float> net = build_supernet<float>(cfg, dummy);
    net.visit_named([&](const std::string& name, Tensor<float>& t) {
        std::vector<int64_t> shape;
        std::vector<float> v = ck.tensor(name, &shape);
        if (shape != t.shape)
            throw DataError(path + ": tensor '" + name + "' shape mismatch");
        t.data = std::move(v);
    });
    if (alpha) {
        std::vector<int64_t> shape;
        std::vector<float> v = ck.tensor("alpha", &shape);
        *alpha = ArchParams(shape);
        alpha->data = std::move(v);
    }
    if (lambda) *lambda = ck.manifest.value("lambda", 0.0);
    if (meta) *meta = ck.manifest;
    return net;
}

// ---------------------------------------------------------------------------
// Predictor checkpoints.

inline void save_predictor(const std::string& path, LatencyModel<float>& m, const json& meta) {
    json mm = meta;
    mm["kind"] = "predictor";
    mm["input_dim"] = m.in_dim();
    mm["hidden1"] = m.w1.dim(1);
    mm["hidden2"] = m.w2.dim(1);
    mm["trained"] = m.trained;
    CheckpointWriter w(mm);
    m.visit_named([&](const std::string& name, Tensor<float>& t) { w.add(name, t); });
    w.save(path);
}

inline LatencyModel<float> load_predictor(const std::string& path, json* meta = nullptr) {
    Checkpoint ck = load_checkpoint(path);
    require_kind(ck, "predictor", path);
    Rng dummy(0);
    LatencyModel<float> m =
        make_latency_model<float>(ck.manifest.at("input_dim").get<int64_t>(), dummy,
                                  ck.manifest.value("hidden1", 256), ck.manifest.value("hidden2", 128));
    m.visit_named([&](const std::string& name, Tensor<float>& t) {
        std::vector<int64_t> shape;
        std::vector<float> v = ck.tensor(name, &shape);
        if (shape != t.shape) throw DataError(path + ": tensor '" + name + "' shape mismatch");
        t.data = std::move(v);
    });
    m.trained = ck.manifest.value("trained", false);
    if (meta) *meta = ck.manifest;
    return m;
}

// ---------------------------------------------------------------------------
// Latency pairs and generic JSONL.

inline void save_pairs(const std::string& path, const std::vector<LatencyPair>& pairs) {
    std::string out;
    for (const LatencyPair& p : pairs) {
        json j{{"arch", p.arch.index}, {"latency_ms", p.latency_ms}};
        out += j.dump();
        out += '\n';
    }
    write_file_atomic(path, out);
}

inline std::vector<LatencyPair> load_pairs(const std::string& path, int n_ops = kNumOperators) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open pairs file: " + path);
    std::vector<LatencyPair> pairs;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        LatencyPair p;
        p.arch.n_ops = n_ops;
        p.arch.index = j.at("arch").get<std::vector<int>>();
        p.latency_ms = j.at("latency_ms").get<double>();
        if (p.latency_ms <= 0) throw DataError(path + ": non-positive latency in pair");
        p.arch.validate();
        pairs.push_back(std::move(p));
    }
    return pairs;
}

class JsonlWriter {
   public:
    void append(const json& j) {
        buf_ += j.dump();
        buf_ += '\n';
    }

    void save(const std::string& path) const { write_file_atomic(path, buf_); }

    const std::string& bytes() const { return buf_; }

   private:
    std::string buf_;
};

inline std::vector<json> load_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open file: " + path);
    std::vector<json> out;
    std::string line;
    while (std::getline(f, line))
        if (!line.empty()) out.push_back(json::parse(line));
    return out;
}

}  // namespace dwnas
