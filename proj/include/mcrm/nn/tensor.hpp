#pragma once

#include <cstddef>
#include <random>
#include <vector>

namespace mcrm::nn {

// Dense NCHW tensor. Parameters reuse the same container with their natural
// shapes (conv weights as [out, in, k, k], vectors as [1, c, 1, 1]).
template <typename T>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_),
          data(static_cast<size_t>(n_) * c_ * h_ * w_, T(0)) {}

    size_t size() const { return data.size(); }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& at(int in, int ic, int iy, int ix) {
        return data[((static_cast<size_t>(in) * c + ic) * h + iy) * w + ix];
    }
    T at(int in, int ic, int iy, int ix) const {
        return data[((static_cast<size_t>(in) * c + ic) * h + iy) * w + ix];
    }
    T* image(int in) { return data.data() + static_cast<size_t>(in) * c * h * w; }
    const T* image(int in) const { return data.data() + static_cast<size_t>(in) * c * h * w; }

    void zero() { std::fill(data.begin(), data.end(), T(0)); }
    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }

    template <typename Rng>
    void fill_normal(Rng& rng, T mean, T stddev) {
        std::normal_distribution<double> dist(static_cast<double>(mean),
                                              static_cast<double>(stddev));
        for (auto& v : data) v = static_cast<T>(dist(rng));
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(n, c, h, w);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <typename T>
struct ParamRef {
    std::string name;
    Tensor<T>* value = nullptr;
    Tensor<T>* grad = nullptr;
};

// Per-forward runtime state: training toggles batch statistics and dropout,
// rng drives dropout masks.
struct RunCtx {
    bool training = false;
    std::mt19937_64* rng = nullptr;
};

} // namespace mcrm::nn
