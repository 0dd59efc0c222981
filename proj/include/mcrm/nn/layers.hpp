#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcrm/nn/blas.hpp"
#include "mcrm/nn/tensor.hpp"

namespace mcrm::nn {

inline int conv_out_side(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}
inline int tconv_out_side(int in, int kernel, int stride, int pad) {
    return (in - 1) * stride - 2 * pad + kernel;
}

// x: one image [C,H,W] -> cols [C*K*K, OH*OW].
template <typename T>
void im2col(const T* x, int C, int H, int W, int K, int stride, int pad, int OH, int OW,
            T* cols) {
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < K; ++ky) {
            for (int kx = 0; kx < K; ++kx) {
                T* row = cols + (static_cast<size_t>(c) * K * K + ky * K + kx) *
                                    (static_cast<size_t>(OH) * OW);
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        for (int ox = 0; ox < OW; ++ox) row[oy * OW + ox] = T(0);
                        continue;
                    }
                    const T* src = x + (static_cast<size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        row[oy * OW + ox] = (ix >= 0 && ix < W) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

// Scatter-add the column representation back into the image (caller zeroes x).
template <typename T>
void col2im(const T* cols, int C, int H, int W, int K, int stride, int pad, int OH, int OW,
            T* x) {
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < K; ++ky) {
            for (int kx = 0; kx < K; ++kx) {
                const T* row = cols + (static_cast<size_t>(c) * K * K + ky * K + kx) *
                                          (static_cast<size_t>(OH) * OW);
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    T* dst = x + (static_cast<size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += row[oy * OW + ox];
                    }
                }
            }
        }
    }
}

template <typename T>
class Conv2d {
public:
    Conv2d(std::string name, int in_ch, int out_ch, int kernel, int stride, int pad)
        : name_(std::move(name)), in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel),
          stride_(stride), pad_(pad), weight_(out_ch, in_ch, kernel, kernel),
          bias_(1, out_ch, 1, 1), wgrad_(out_ch, in_ch, kernel, kernel), bgrad_(1, out_ch, 1, 1) {}

    template <typename Rng>
    void init(Rng& rng, T stddev = T(0.02)) {
        weight_.fill_normal(rng, T(0), stddev);
        bias_.zero();
    }

    Tensor<T> forward(const Tensor<T>& x, RunCtx&) {
        input_ = x;
        const int oh = conv_out_side(x.h, kernel_, stride_, pad_);
        const int ow = conv_out_side(x.w, kernel_, stride_, pad_);
        Tensor<T> out(x.n, out_ch_, oh, ow);
        const int ckk = in_ch_ * kernel_ * kernel_;
        cols_.assign(static_cast<size_t>(ckk) * oh * ow, T(0));
        for (int b = 0; b < x.n; ++b) {
            im2col(x.image(b), in_ch_, x.h, x.w, kernel_, stride_, pad_, oh, ow, cols_.data());
            gemm(false, false, out_ch_, oh * ow, ckk, T(1), weight_.ptr(), ckk, cols_.data(),
                 oh * ow, T(0), out.image(b), oh * ow);
            T* img = out.image(b);
            for (int c = 0; c < out_ch_; ++c) {
                const T bv = bias_.data[c];
                for (int i = 0; i < oh * ow; ++i) img[static_cast<size_t>(c) * oh * ow + i] += bv;
            }
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        const auto& x = input_;
        const int oh = gy.h, ow = gy.w;
        const int ckk = in_ch_ * kernel_ * kernel_;
        Tensor<T> gx(x.n, x.c, x.h, x.w);
        std::vector<T> dcols(static_cast<size_t>(ckk) * oh * ow);
        for (int b = 0; b < x.n; ++b) {
            // im2col is recomputed rather than cached across the batch to
            // bound memory at production tile sizes.
            im2col(x.image(b), in_ch_, x.h, x.w, kernel_, stride_, pad_, oh, ow, cols_.data());
            gemm(false, true, out_ch_, ckk, oh * ow, T(1), gy.image(b), oh * ow, cols_.data(),
                 oh * ow, T(1), wgrad_.ptr(), ckk);
            gemm(true, false, ckk, oh * ow, out_ch_, T(1), weight_.ptr(), ckk, gy.image(b),
                 oh * ow, T(0), dcols.data(), oh * ow);
            col2im(dcols.data(), in_ch_, x.h, x.w, kernel_, stride_, pad_, oh, ow, gx.image(b));
            const T* img = gy.image(b);
            for (int c = 0; c < out_ch_; ++c) {
                T s = T(0);
                for (int i = 0; i < oh * ow; ++i) s += img[static_cast<size_t>(c) * oh * ow + i];
                bgrad_.data[c] += s;
            }
        }
        return gx;
    }

    void params(std::vector<ParamRef<T>>& out) {
        out.push_back({name_ + ".weight", &weight_, &wgrad_});
        out.push_back({name_ + ".bias", &bias_, &bgrad_});
    }

    int out_channels() const { return out_ch_; }
    int in_channels() const { return in_ch_; }

private:
    std::string name_;
    int in_ch_, out_ch_, kernel_, stride_, pad_;
    Tensor<T> weight_, bias_, wgrad_, bgrad_;
    Tensor<T> input_;
    std::vector<T> cols_;
};

template <typename T>
class TransposedConv2d {
public:
    TransposedConv2d(std::string name, int in_ch, int out_ch, int kernel, int stride, int pad)
        : name_(std::move(name)), in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel),
          stride_(stride), pad_(pad), weight_(in_ch, out_ch, kernel, kernel),
          bias_(1, out_ch, 1, 1), wgrad_(in_ch, out_ch, kernel, kernel), bgrad_(1, out_ch, 1, 1) {}

    template <typename Rng>
    void init(Rng& rng, T stddev = T(0.02)) {
        weight_.fill_normal(rng, T(0), stddev);
        bias_.zero();
    }

    Tensor<T> forward(const Tensor<T>& x, RunCtx&) {
        input_ = x;
        const int oh = tconv_out_side(x.h, kernel_, stride_, pad_);
        const int ow = tconv_out_side(x.w, kernel_, stride_, pad_);
        Tensor<T> out(x.n, out_ch_, oh, ow);
        const int ockk = out_ch_ * kernel_ * kernel_;
        cols_.assign(static_cast<size_t>(ockk) * x.h * x.w, T(0));
        for (int b = 0; b < x.n; ++b) {
            // cols = W^T * x, then scatter back through the conv geometry
            // that maps (oh, ow) windows onto the (h, w) grid.
            gemm(true, false, ockk, x.h * x.w, in_ch_, T(1), weight_.ptr(), ockk, x.image(b),
                 x.h * x.w, T(0), cols_.data(), x.h * x.w);
            col2im(cols_.data(), out_ch_, oh, ow, kernel_, stride_, pad_, x.h, x.w, out.image(b));
            T* img = out.image(b);
            for (int c = 0; c < out_ch_; ++c) {
                const T bv = bias_.data[c];
                for (int i = 0; i < oh * ow; ++i) img[static_cast<size_t>(c) * oh * ow + i] += bv;
            }
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        const auto& x = input_;
        const int ockk = out_ch_ * kernel_ * kernel_;
        Tensor<T> gx(x.n, x.c, x.h, x.w);
        std::vector<T> gycols(static_cast<size_t>(ockk) * x.h * x.w);
        for (int b = 0; b < x.n; ++b) {
            im2col(gy.image(b), out_ch_, gy.h, gy.w, kernel_, stride_, pad_, x.h, x.w,
                   gycols.data());
            gemm(false, false, in_ch_, x.h * x.w, ockk, T(1), weight_.ptr(), ockk, gycols.data(),
                 x.h * x.w, T(0), gx.image(b), x.h * x.w);
            gemm(false, true, in_ch_, ockk, x.h * x.w, T(1), x.image(b), x.h * x.w, gycols.data(),
                 x.h * x.w, T(1), wgrad_.ptr(), ockk);
            const T* img = gy.image(b);
            for (int c = 0; c < out_ch_; ++c) {
                T s = T(0);
                for (int i = 0; i < gy.h * gy.w; ++i)
                    s += img[static_cast<size_t>(c) * gy.h * gy.w + i];
                bgrad_.data[c] += s;
            }
        }
        return gx;
    }

    void params(std::vector<ParamRef<T>>& out) {
        out.push_back({name_ + ".weight", &weight_, &wgrad_});
        out.push_back({name_ + ".bias", &bias_, &bgrad_});
    }

    int out_channels() const { return out_ch_; }

private:
    std::string name_;
    int in_ch_, out_ch_, kernel_, stride_, pad_;
    Tensor<T> weight_, bias_, wgrad_, bgrad_;
    Tensor<T> input_;
    std::vector<T> cols_;
};

template <typename T>
class BatchNorm2d {
public:
    explicit BatchNorm2d(std::string name, int channels, T eps = T(1e-5), T momentum = T(0.1))
        : name_(std::move(name)), channels_(channels), eps_(eps), momentum_(momentum),
          gamma_(1, channels, 1, 1), beta_(1, channels, 1, 1), ggrad_(1, channels, 1, 1),
          bgrad_(1, channels, 1, 1), running_mean_(1, channels, 1, 1),
          running_var_(1, channels, 1, 1) {
        for (auto& v : gamma_.data) v = T(1);
        for (auto& v : running_var_.data) v = T(1);
    }

    template <typename Rng>
    void init(Rng& rng, T stddev = T(0.02)) {
        gamma_.fill_normal(rng, T(1), stddev);
        beta_.zero();
    }

    Tensor<T> forward(const Tensor<T>& x, RunCtx& ctx) {
        trained_forward_ = ctx.training;
        Tensor<T> out(x.n, x.c, x.h, x.w);
        const size_t plane = static_cast<size_t>(x.h) * x.w;
        const size_t m = static_cast<size_t>(x.n) * plane;
        inv_std_.assign(channels_, T(0));
        if (ctx.training) {
            xhat_ = Tensor<T>(x.n, x.c, x.h, x.w);
            for (int c = 0; c < channels_; ++c) {
                T mean = T(0);
                for (int b = 0; b < x.n; ++b) {
                    const T* src = x.image(b) + c * plane;
                    for (size_t i = 0; i < plane; ++i) mean += src[i];
                }
                mean /= static_cast<T>(m);
                T var = T(0);
                for (int b = 0; b < x.n; ++b) {
                    const T* src = x.image(b) + c * plane;
                    for (size_t i = 0; i < plane; ++i) {
                        const T d = src[i] - mean;
                        var += d * d;
                    }
                }
                var /= static_cast<T>(m);
                const T inv = T(1) / std::sqrt(var + eps_);
                inv_std_[c] = inv;
                const T g = gamma_.data[c], bta = beta_.data[c];
                for (int b = 0; b < x.n; ++b) {
                    const T* src = x.image(b) + c * plane;
                    T* xh = xhat_.image(b) + c * plane;
                    T* dst = out.image(b) + c * plane;
                    for (size_t i = 0; i < plane; ++i) {
                        xh[i] = (src[i] - mean) * inv;
                        dst[i] = g * xh[i] + bta;
                    }
                }
                running_mean_.data[c] = (T(1) - momentum_) * running_mean_.data[c] + momentum_ * mean;
                const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
                running_var_.data[c] = (T(1) - momentum_) * running_var_.data[c] + momentum_ * unbiased;
            }
        } else {
            for (int c = 0; c < channels_; ++c) {
                const T inv = T(1) / std::sqrt(running_var_.data[c] + eps_);
                inv_std_[c] = inv;
                const T g = gamma_.data[c], bta = beta_.data[c];
                const T mean = running_mean_.data[c];
                for (int b = 0; b < x.n; ++b) {
                    const T* src = x.image(b) + c * plane;
                    T* dst = out.image(b) + c * plane;
                    for (size_t i = 0; i < plane; ++i) dst[i] = g * (src[i] - mean) * inv + bta;
                }
            }
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        const size_t plane = static_cast<size_t>(gy.h) * gy.w;
        Tensor<T> gx(gy.n, gy.c, gy.h, gy.w);
        if (!trained_forward_) {
            for (int c = 0; c < channels_; ++c) {
                const T k = gamma_.data[c] * inv_std_[c];
                for (int b = 0; b < gy.n; ++b) {
                    const T* g = gy.image(b) + c * plane;
                    T* dst = gx.image(b) + c * plane;
                    for (size_t i = 0; i < plane; ++i) dst[i] = k * g[i];
                }
            }
            return gx;
        }
        const size_t m = static_cast<size_t>(gy.n) * plane;
        for (int c = 0; c < channels_; ++c) {
            T sum_gy = T(0), sum_gy_xhat = T(0);
            for (int b = 0; b < gy.n; ++b) {
                const T* g = gy.image(b) + c * plane;
                const T* xh = xhat_.image(b) + c * plane;
                for (size_t i = 0; i < plane; ++i) {
                    sum_gy += g[i];
                    sum_gy_xhat += g[i] * xh[i];
                }
            }
            ggrad_.data[c] += sum_gy_xhat;
            bgrad_.data[c] += sum_gy;
            const T k = gamma_.data[c] * inv_std_[c] / static_cast<T>(m);
            for (int b = 0; b < gy.n; ++b) {
                const T* g = gy.image(b) + c * plane;
                const T* xh = xhat_.image(b) + c * plane;
                T* dst = gx.image(b) + c * plane;
                for (size_t i = 0; i < plane; ++i)
                    dst[i] = k * (static_cast<T>(m) * g[i] - sum_gy - xh[i] * sum_gy_xhat);
            }
        }
        return gx;
    }

    void params(std::vector<ParamRef<T>>& out) {
        out.push_back({name_ + ".gamma", &gamma_, &ggrad_});
        out.push_back({name_ + ".beta", &beta_, &bgrad_});
    }
    // Running statistics are state, not parameters; checkpointed separately.
    void buffers(std::vector<ParamRef<T>>& out) {
        out.push_back({name_ + ".running_mean", &running_mean_, nullptr});
        out.push_back({name_ + ".running_var", &running_var_, nullptr});
    }

private:
    std::string name_;
    int channels_;
    T eps_, momentum_;
    Tensor<T> gamma_, beta_, ggrad_, bgrad_;
    Tensor<T> running_mean_, running_var_;
    Tensor<T> xhat_;
    std::vector<T> inv_std_;
    bool trained_forward_ = false;
};

enum class Act { None, Relu, LeakyRelu, Tanh };

template <typename T>
class Activation {
public:
    Activation(Act kind, T slope = T(0.2)) : kind_(kind), slope_(slope) {}

    Tensor<T> forward(const Tensor<T>& x, RunCtx&) {
        Tensor<T> out = x;
        switch (kind_) {
        case Act::None: break;
        case Act::Relu:
            for (auto& v : out.data) v = v > T(0) ? v : T(0);
            break;
        case Act::LeakyRelu:
            for (auto& v : out.data) v = v > T(0) ? v : slope_ * v;
            break;
        case Act::Tanh:
            for (auto& v : out.data) v = std::tanh(v);
            break;
        }
        cache_ = (kind_ == Act::Tanh) ? out : x;
        return out;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        Tensor<T> gx = gy;
        switch (kind_) {
        case Act::None: break;
        case Act::Relu:
            for (size_t i = 0; i < gx.size(); ++i)
                if (cache_.data[i] <= T(0)) gx.data[i] = T(0);
            break;
        case Act::LeakyRelu:
            for (size_t i = 0; i < gx.size(); ++i)
                if (cache_.data[i] <= T(0)) gx.data[i] *= slope_;
            break;
        case Act::Tanh:
            for (size_t i = 0; i < gx.size(); ++i)
                gx.data[i] *= (T(1) - cache_.data[i] * cache_.data[i]);
            break;
        }
        return gx;
    }

private:
    Act kind_;
    T slope_;
    Tensor<T> cache_;
};

template <typename T>
class Dropout {
public:
    explicit Dropout(T prob) : prob_(prob) {}

    Tensor<T> forward(const Tensor<T>& x, RunCtx& ctx) {
        active_ = ctx.training && prob_ > T(0);
        if (!active_) return x;
        if (!ctx.rng) throw std::logic_error("dropout requires a training rng");
        mask_.assign(x.size(), T(0));
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        const T keep = T(1) - prob_;
        Tensor<T> out = x;
        for (size_t i = 0; i < x.size(); ++i) {
            if (unit(*ctx.rng) >= static_cast<double>(prob_)) {
                mask_[i] = T(1) / keep;
                out.data[i] *= mask_[i];
            } else {
                out.data[i] = T(0);
            }
        }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        if (!active_) return gy;
        Tensor<T> gx = gy;
        for (size_t i = 0; i < gx.size(); ++i) gx.data[i] *= mask_[i];
        return gx;
    }

private:
    T prob_;
    bool active_ = false;
    std::vector<T> mask_;
};

template <typename T>
class MaxPool2d {
public:
    MaxPool2d(int kernel, int stride) : kernel_(kernel), stride_(stride) {}

    Tensor<T> forward(const Tensor<T>& x, RunCtx&) {
        const int oh = (x.h - kernel_) / stride_ + 1;
        const int ow = (x.w - kernel_) / stride_ + 1;
        Tensor<T> out(x.n, x.c, oh, ow);
        in_shape_ = {x.n, x.c, x.h, x.w};
        argmax_.assign(out.size(), 0);
        size_t o = 0;
        for (int b = 0; b < x.n; ++b)
            for (int c = 0; c < x.c; ++c)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox, ++o) {
                        T best = -std::numeric_limits<T>::infinity();
                        size_t best_idx = 0;
                        for (int ky = 0; ky < kernel_; ++ky)
                            for (int kx = 0; kx < kernel_; ++kx) {
                                const int iy = oy * stride_ + ky;
                                const int ix = ox * stride_ + kx;
                                const size_t idx =
                                    ((static_cast<size_t>(b) * x.c + c) * x.h + iy) * x.w + ix;
                                if (x.data[idx] > best) {
                                    best = x.data[idx];
                                    best_idx = idx;
                                }
                            }
                        out.data[o] = best;
                        argmax_[o] = best_idx;
                    }
        return out;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        Tensor<T> gx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
        for (size_t i = 0; i < gy.size(); ++i) gx.data[argmax_[i]] += gy.data[i];
        return gx;
    }

private:
    int kernel_, stride_;
    std::array<int, 4> in_shape_{};
    std::vector<size_t> argmax_;
};

template <typename T>
class Dense {
public:
    Dense(std::string name, int in_features, int out_features)
        : name_(std::move(name)), in_(in_features), out_(out_features),
          weight_(out_features, in_features, 1, 1), bias_(1, out_features, 1, 1),
          wgrad_(out_features, in_features, 1, 1), bgrad_(1, out_features, 1, 1) {}

    template <typename Rng>
    void init(Rng& rng, T stddev = T(0.02)) {
        weight_.fill_normal(rng, T(0), stddev);
        bias_.zero();
    }

    Tensor<T> forward(const Tensor<T>& x, RunCtx&) {
        if (static_cast<int>(x.size() / x.n) != in_)
            throw std::logic_error("dense input size mismatch");
        input_ = x;
        Tensor<T> out(x.n, out_, 1, 1);
        gemm(false, true, x.n, out_, in_, T(1), x.ptr(), in_, weight_.ptr(), in_, T(0), out.ptr(),
             out_);
        for (int b = 0; b < x.n; ++b)
            for (int c = 0; c < out_; ++c) out.data[static_cast<size_t>(b) * out_ + c] +=
                bias_.data[c];
        return out;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        Tensor<T> gx(input_.n, input_.c, input_.h, input_.w);
        gemm(false, false, gy.n, in_, out_, T(1), gy.ptr(), out_, weight_.ptr(), in_, T(0),
             gx.ptr(), in_);
        gemm(true, false, out_, in_, gy.n, T(1), gy.ptr(), out_, input_.ptr(), in_, T(1),
             wgrad_.ptr(), in_);
        for (int b = 0; b < gy.n; ++b)
            for (int c = 0; c < out_; ++c)
                bgrad_.data[c] += gy.data[static_cast<size_t>(b) * out_ + c];
        return gx;
    }

    void params(std::vector<ParamRef<T>>& out) {
        out.push_back({name_ + ".weight", &weight_, &wgrad_});
        out.push_back({name_ + ".bias", &bias_, &bgrad_});
    }

private:
    std::string name_;
    int in_, out_;
    Tensor<T> weight_, bias_, wgrad_, bgrad_;
    Tensor<T> input_;
};

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.n != b.n || a.h != b.h || a.w != b.w)
        throw std::logic_error("concat_channels shape mismatch");
    Tensor<T> out(a.n, a.c + b.c, a.h, a.w);
    const size_t plane_a = static_cast<size_t>(a.c) * a.h * a.w;
    const size_t plane_b = static_cast<size_t>(b.c) * b.h * b.w;
    for (int i = 0; i < a.n; ++i) {
        std::copy(a.image(i), a.image(i) + plane_a, out.image(i));
        std::copy(b.image(i), b.image(i) + plane_b, out.image(i) + plane_a);
    }
    return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
    Tensor<T> out(x.n, c1 - c0, x.h, x.w);
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    for (int b = 0; b < x.n; ++b)
        std::copy(x.image(b) + c0 * plane, x.image(b) + c1 * plane, out.image(b));
    return out;
}

} // namespace mcrm::nn
