#ifndef SWIPE_NN_HPP
#define SWIPE_NN_HPP

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"

// Minimal layer toolkit with hand-written backward passes.
//
// Every layer exposes forward(x, cache*) and backward(dy, cache). A null cache
// pointer means inference only. Parameter gradients accumulate into
// Param::grad until zero_grad().

namespace swipe::nn {

template <typename T>
struct Param {
    std::string name;
    Mat<T> value;
    Mat<T> grad;

    Param() = default;
    Param(std::string n, int rows, int cols) : name(std::move(n)), value(Mat<T>::Zero(rows, cols)), grad(Mat<T>::Zero(rows, cols)) {}

    Eigen::Index size() const { return value.size(); }
    void zero_grad() { grad.setZero(); }
};

template <typename T>
using ParamRefs = std::vector<Param<T>*>;

/// Fan-in scaled uniform init, bound sqrt(3 / fan_in) (unit-variance preserving
/// for linear maps). Biases start at zero.
template <typename T, typename Rng>
void init_fan_in_uniform(Param<T>& weight, int fan_in, Rng& rng)
{
    const double bound = std::sqrt(3.0 / std::max(1, fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index i = 0; i < weight.value.size(); ++i) {
        weight.value.data()[i] = static_cast<T>(dist(rng));
    }
}

/// Channels x (height * width), row-major so each channel plane is contiguous.
template <typename T>
struct FeatureMap {
    int channels = 0;
    int height = 0;
    int width = 0;
    Mat<T> data;

    FeatureMap() = default;
    FeatureMap(int c, int h, int w) : channels(c), height(h), width(w), data(Mat<T>::Zero(c, h * w)) {}

    int pixels() const { return height * width; }
    T& at(int c, int y, int x) { return data(c, y * width + x); }
    T at(int c, int y, int x) const { return data(c, y * width + x); }

    bool same_shape(const FeatureMap& other) const
    {
        return channels == other.channels && height == other.height && width == other.width;
    }
};

struct ConvSpec {
    int in = 1;
    int out = 1;
    int kernel_h = 3;
    int kernel_w = 3;
    int stride = 1;
    int pad_h = 1;
    int pad_w = 1;
    int dilation_h = 1;
    int dilation_w = 1;

    int weights_per_output() const { return in * kernel_h * kernel_w; }
    int out_size(int in_size, int kernel, int pad, int dilation) const
    {
        return (in_size + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1;
    }

    static ConvSpec square(int in, int out, int k, int stride = 1, int dilation = 1)
    {
        return ConvSpec{in, out, k, k, stride, dilation * (k / 2), dilation * (k / 2), dilation, dilation};
    }
    static ConvSpec pointwise(int in, int out) { return ConvSpec{in, out, 1, 1, 1, 0, 0, 1, 1}; }
    /// k x 1 (vertical) when vertical is true, else 1 x k; "same" padding.
    static ConvSpec strip(int in, int out, int k, bool vertical, int dilation = 1)
    {
        const int pad = dilation * (k / 2);
        return vertical ? ConvSpec{in, out, k, 1, 1, pad, 0, dilation, 1}
                        : ConvSpec{in, out, 1, k, 1, 0, pad, 1, dilation};
    }
};

template <typename T>
class Conv2d {
public:
    struct Cache {
        Mat<T> cols;
        int in_h = 0;
        int in_w = 0;
    };

    Conv2d() = default;
    Conv2d(const std::string& name, ConvSpec spec)
        : spec_(spec), weight_(name + ".weight", spec.out, spec.weights_per_output()), bias_(name + ".bias", spec.out, 1)
    {
    }

    const ConvSpec& spec() const { return spec_; }
    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }

    template <typename Rng>
    void init(Rng& rng)
    {
        init_fan_in_uniform(weight_, spec_.weights_per_output(), rng);
        bias_.value.setZero();
    }

    void collect(ParamRefs<T>& out)
    {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    std::size_t parameter_count() const { return static_cast<std::size_t>(weight_.size() + bias_.size()); }

    FeatureMap<T> forward(const FeatureMap<T>& x, Cache* cache) const
    {
        if (x.channels != spec_.in) {
            throw ConfigError(weight_.name + ": expected " + std::to_string(spec_.in) + " input channels, got " +
                              std::to_string(x.channels));
        }
        const int oh = spec_.out_size(x.height, spec_.kernel_h, spec_.pad_h, spec_.dilation_h);
        const int ow = spec_.out_size(x.width, spec_.kernel_w, spec_.pad_w, spec_.dilation_w);
        FeatureMap<T> y(spec_.out, oh, ow);
        Mat<T> local;
        Mat<T>& cols = cache ? cache->cols : local;
        im2col(x, oh, ow, cols);
        y.data.noalias() = weight_.value * cols;
        y.data.colwise() += bias_.value.col(0);
        if (cache) {
            cache->in_h = x.height;
            cache->in_w = x.width;
        }
        return y;
    }

    /// Accumulates parameter gradients; returns dL/dx when need_input_grad.
    FeatureMap<T> backward(const FeatureMap<T>& dy, const Cache& cache, bool need_input_grad = true)
    {
        weight_.grad.noalias() += dy.data * cache.cols.transpose();
        bias_.grad.col(0) += dy.data.rowwise().sum().transpose();
        FeatureMap<T> dx;
        if (!need_input_grad) {
            return dx;
        }
        Mat<T> dcols = weight_.value.transpose() * dy.data;
        dx = FeatureMap<T>(spec_.in, cache.in_h, cache.in_w);
        col2im(dcols, dy.height, dy.width, dx);
        return dx;
    }

private:
    bool is_pointwise() const
    {
        return spec_.kernel_h == 1 && spec_.kernel_w == 1 && spec_.stride == 1 && spec_.pad_h == 0 && spec_.pad_w == 0;
    }

    void im2col(const FeatureMap<T>& x, int oh, int ow, Mat<T>& cols) const
    {
        if (is_pointwise()) {
            cols = x.data;
            return;
        }
        const int kh = spec_.kernel_h;
        const int kw = spec_.kernel_w;
        cols.setZero(static_cast<Eigen::Index>(spec_.in) * kh * kw, static_cast<Eigen::Index>(oh) * ow);
        for (int c = 0; c < spec_.in; ++c) {
            const T* plane = x.data.row(c).data();
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    T* dst = cols.row((c * kh + ky) * kw + kx).data();
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * spec_.stride - spec_.pad_h + ky * spec_.dilation_h;
                        if (iy < 0 || iy >= x.height) {
                            continue;
                        }
                        const T* src = plane + iy * x.width;
                        T* out = dst + oy * ow;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * spec_.stride - spec_.pad_w + kx * spec_.dilation_w;
                            if (ix >= 0 && ix < x.width) {
                                out[ox] = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }

    void col2im(const Mat<T>& dcols, int oh, int ow, FeatureMap<T>& dx) const
    {
        if (is_pointwise()) {
            dx.data = dcols;
            return;
        }
        const int kh = spec_.kernel_h;
        const int kw = spec_.kernel_w;
        for (int c = 0; c < spec_.in; ++c) {
            T* plane = dx.data.row(c).data();
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    const T* src = dcols.row((c * kh + ky) * kw + kx).data();
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * spec_.stride - spec_.pad_h + ky * spec_.dilation_h;
                        if (iy < 0 || iy >= dx.height) {
                            continue;
                        }
                        T* dst = plane + iy * dx.width;
                        const T* in = src + oy * ow;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * spec_.stride - spec_.pad_w + kx * spec_.dilation_w;
                            if (ix >= 0 && ix < dx.width) {
                                dst[ix] += in[ox];
                            }
                        }
                    }
                }
            }
        }
    }

    ConvSpec spec_;
    Param<T> weight_;
    Param<T> bias_;
};

/// Fully connected layer on row-batched inputs: Y = X W^T + b.
template <typename T>
class Linear {
public:
    struct Cache {
        Mat<T> input;
    };

    Linear() = default;
    Linear(const std::string& name, int in, int out) : weight_(name + ".weight", out, in), bias_(name + ".bias", 1, out) {}

    int in_features() const { return static_cast<int>(weight_.value.cols()); }
    int out_features() const { return static_cast<int>(weight_.value.rows()); }
    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }
    const Param<T>& weight() const { return weight_; }

    template <typename Rng>
    void init(Rng& rng)
    {
        init_fan_in_uniform(weight_, in_features(), rng);
        bias_.value.setZero();
    }

    void collect(ParamRefs<T>& out)
    {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }

    std::size_t parameter_count() const { return static_cast<std::size_t>(weight_.size() + bias_.size()); }

    template <typename Derived>
    Mat<T> forward(const Eigen::MatrixBase<Derived>& x, Cache* cache) const
    {
        if (x.cols() != in_features()) {
            throw ConfigError(weight_.name + ": expected input width " + std::to_string(in_features()) + ", got " +
                              std::to_string(x.cols()));
        }
        Mat<T> y = x * weight_.value.transpose();
        y.rowwise() += bias_.value.row(0);
        if (cache) {
            cache->input = x;
        }
        return y;
    }

    Mat<T> backward(const Mat<T>& dy, const Cache& cache, bool need_input_grad = true)
    {
        weight_.grad.noalias() += dy.transpose() * cache.input;
        bias_.grad.row(0) += dy.colwise().sum();
        if (!need_input_grad) {
            return {};
        }
        return dy * weight_.value;
    }

private:
    Param<T> weight_;
    Param<T> bias_;
};

template <typename T>
Mat<T> relu(const Mat<T>& x)
{
    return x.cwiseMax(T(0));
}

/// dL/dx of y = relu(x), expressed through the forward output.
template <typename T>
Mat<T> relu_backward(const Mat<T>& dy, const Mat<T>& y)
{
    return (y.array() > T(0)).select(dy, T(0));
}

template <typename T>
FeatureMap<T> relu(FeatureMap<T> x)
{
    x.data = x.data.cwiseMax(T(0));
    return x;
}

template <typename T>
FeatureMap<T> relu_backward(FeatureMap<T> dy, const FeatureMap<T>& y)
{
    dy.data = (y.data.array() > T(0)).select(dy.data, T(0));
    return dy;
}

/// Linear layers with ReLU between them (none after the last).
template <typename T>
class Mlp {
public:
    struct Cache {
        std::vector<typename Linear<T>::Cache> layers;
        std::vector<Mat<T>> activations;
    };

    Mlp() = default;
    Mlp(const std::string& name, int in, const std::vector<int>& hidden, int out)
    {
        int width = in;
        for (std::size_t i = 0; i < hidden.size(); ++i) {
            layers_.emplace_back(name + ".fc" + std::to_string(i), width, hidden[i]);
            width = hidden[i];
        }
        layers_.emplace_back(name + ".out", width, out);
    }

    int in_features() const { return layers_.front().in_features(); }
    int out_features() const { return layers_.back().out_features(); }
    std::vector<Linear<T>>& layers() { return layers_; }
    const std::vector<Linear<T>>& layers() const { return layers_; }

    template <typename Rng>
    void init(Rng& rng)
    {
        for (auto& l : layers_) {
            l.init(rng);
        }
    }

    void collect(ParamRefs<T>& out)
    {
        for (auto& l : layers_) {
            l.collect(out);
        }
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& l : layers_) {
            n += l.parameter_count();
        }
        return n;
    }

    Mat<T> forward(const Mat<T>& x, Cache* cache) const
    {
        if (cache) {
            cache->layers.assign(layers_.size(), {});
            cache->activations.assign(layers_.size(), {});
        }
        Mat<T> h = x;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            h = layers_[i].forward(h, cache ? &cache->layers[i] : nullptr);
            if (i + 1 < layers_.size()) {
                h = relu(h);
                if (cache) {
                    cache->activations[i] = h;
                }
            }
        }
        return h;
    }

    Mat<T> backward(const Mat<T>& dy, const Cache& cache, bool need_input_grad = true)
    {
        Mat<T> g = dy;
        for (std::size_t i = layers_.size(); i-- > 0;) {
            if (i + 1 < layers_.size()) {
                g = relu_backward(g, cache.activations[i]);
            }
            g = layers_[i].backward(g, cache.layers[i], i > 0 || need_input_grad);
        }
        return g;
    }

private:
    std::vector<Linear<T>> layers_;
};

/// Row-wise softmax.
template <typename T>
Mat<T> softmax_rows(const Mat<T>& logits)
{
    Mat<T> p(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const T m = logits.row(r).maxCoeff();
        p.row(r) = (logits.row(r).array() - m).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

/// dL/dlogits given dL/dp and p = softmax(logits), row-wise.
template <typename T>
Mat<T> softmax_rows_backward(const Mat<T>& dp, const Mat<T>& p)
{
    Mat<T> dz(p.rows(), p.cols());
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const T dot = dp.row(r).dot(p.row(r));
        dz.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
    }
    return dz;
}

} // namespace swipe::nn

#endif
