#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dwnas/errors.hpp"

namespace dwnas {

// Live-tensor bookkeeping, used as the peak-memory proxy in ablation reports.
struct TensorCounters {
    static std::atomic<long long>& live() {
        static std::atomic<long long> v{0};
        return v;
    }
    static std::atomic<long long>& peak() {
        static std::atomic<long long> v{0};
        return v;
    }
    static void on_create() {
        long long l = ++live();
        long long p = peak().load();
        while (l > p && !peak().compare_exchange_weak(p, l)) {
        }
    }
    static void on_destroy() { --live(); }
    static void reset_peak() { peak().store(live().load()); }
};

// Dense up-to-4D tensor, NCHW layout, with an optional same-shape gradient slot.
template <typename T>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until requested

    Tensor() { TensorCounters::on_create(); }
    explicit Tensor(std::vector<int64_t> s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), fill);
        TensorCounters::on_create();
    }
    Tensor(const Tensor& o) : shape(o.shape), data(o.data), grad(o.grad) { TensorCounters::on_create(); }
    Tensor(Tensor&& o) noexcept : shape(std::move(o.shape)), data(std::move(o.data)), grad(std::move(o.grad)) {
        TensorCounters::on_create();
    }
    Tensor& operator=(const Tensor& o) = default;
    Tensor& operator=(Tensor&& o) noexcept = default;
    ~Tensor() { TensorCounters::on_destroy(); }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            if (d <= 0) throw DimensionError("tensor dimension must be positive, got " + std::to_string(d));
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }

    // 4-D index helper (n, c, h, w).
    size_t idx4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w);
    }
    T& at4(int64_t n, int64_t c, int64_t h, int64_t w) { return data[idx4(n, c, h, w)]; }
    const T& at4(int64_t n, int64_t c, int64_t h, int64_t w) const { return data[idx4(n, c, h, w)]; }

    size_t idx2(int64_t r, int64_t c) const { return static_cast<size_t>(r * shape[1] + c); }
    T& at2(int64_t r, int64_t c) { return data[idx2(r, c)]; }
    const T& at2(int64_t r, int64_t c) const { return data[idx2(r, c)]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

template <typename T>
void check_shape(const Tensor<T>& t, const std::vector<int64_t>& want, const char* what) {
    if (t.shape != want)
        throw DimensionError(std::string(what) + ": expected shape " + shape_str(want) + ", got " +
                             shape_str(t.shape));
}

}  // namespace dwnas
