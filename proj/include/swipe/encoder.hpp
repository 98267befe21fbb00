#ifndef SWIPE_ENCODER_HPP
#define SWIPE_ENCODER_HPP

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "geometry.hpp"
#include "nn.hpp"

// Image encoder: residual CNN backbone (strides 4..32 exposed), RFB-Lite
// context blocks, top-down cascaded aggregation to stride 32, bilinear resize
// onto the patch grid, and multi-stage embedding attention (MEA).

namespace swipe::encoder {

using nn::ConvSpec;
using nn::Conv2d;
using nn::FeatureMap;
using nn::Linear;
using nn::ParamRefs;

inline constexpr int kStages = 4; // F_2 .. F_5

enum class MeaMode { Attention, Add, Concat };

inline std::string to_string(MeaMode m)
{
    switch (m) {
    case MeaMode::Attention: return "on";
    case MeaMode::Add: return "add";
    case MeaMode::Concat: return "concat";
    }
    return "on";
}

inline MeaMode mea_mode_from_string(const std::string& s)
{
    if (s == "on" || s == "attention") {
        return MeaMode::Attention;
    }
    if (s == "add") {
        return MeaMode::Add;
    }
    if (s == "concat") {
        return MeaMode::Concat;
    }
    throw ConfigError("mea must be one of on|add|concat, got '" + s + "'");
}

struct EncoderConfig {
    int in_channels = 1;
    std::array<int, 5> widths{8, 16, 24, 32, 48};
    int blocks_per_stage = 2;
    int embed_dim = 128;
    MeaMode mea = MeaMode::Attention;
    bool resize_input = false; // otherwise non-multiple-of-32 inputs are rejected

    void validate() const
    {
        if (in_channels < 1 || embed_dim < 2 || blocks_per_stage < 0) {
            throw ConfigError("invalid encoder configuration");
        }
        for (int w : widths) {
            if (w < 1) {
                throw ConfigError("backbone widths must be >= 1");
            }
        }
    }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c)
{
    j = nlohmann::json{{"in_channels", c.in_channels},  {"widths", c.widths},         {"blocks_per_stage", c.blocks_per_stage},
                       {"embed_dim", c.embed_dim},      {"mea", to_string(c.mea)},    {"resize_input", c.resize_input}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c)
{
    j.at("in_channels").get_to(c.in_channels);
    j.at("widths").get_to(c.widths);
    j.at("blocks_per_stage").get_to(c.blocks_per_stage);
    j.at("embed_dim").get_to(c.embed_dim);
    c.mea = mea_mode_from_string(j.at("mea").get<std::string>());
    c.resize_input = j.value("resize_input", false);
}

template <typename T>
using StageMaps = std::array<FeatureMap<T>, kStages>;

template <typename T>
FeatureMap<T> add(FeatureMap<T> a, const FeatureMap<T>& b)
{
    a.data += b.data;
    return a;
}

// ---------------------------------------------------------------------------
// Backbone

template <typename T>
class ResidualBlock {
public:
    struct Cache {
        typename Conv2d<T>::Cache c1, c2;
        FeatureMap<T> hidden;
        FeatureMap<T> output;
    };

    ResidualBlock() = default;
    ResidualBlock(const std::string& name, int channels)
        : conv1_(name + ".conv1", ConvSpec::square(channels, channels, 3)),
          conv2_(name + ".conv2", ConvSpec::square(channels, channels, 3))
    {
    }

    template <typename Rng>
    void init(Rng& rng)
    {
        conv1_.init(rng);
        conv2_.init(rng);
    }
    void collect(ParamRefs<T>& out)
    {
        conv1_.collect(out);
        conv2_.collect(out);
    }

    FeatureMap<T> forward(const FeatureMap<T>& x, Cache* cache) const
    {
        auto h = nn::relu(conv1_.forward(x, cache ? &cache->c1 : nullptr));
        auto y = nn::relu(add(conv2_.forward(h, cache ? &cache->c2 : nullptr), x));
        if (cache) {
            cache->hidden = h;
            cache->output = y;
        }
        return y;
    }

    FeatureMap<T> backward(const FeatureMap<T>& dy, Cache& cache)
    {
        auto ds = nn::relu_backward(dy, cache.output);
        auto dh = nn::relu_backward(conv2_.backward(ds, cache.c2), cache.hidden);
        return add(conv1_.backward(dh, cache.c1), ds);
    }

private:
    Conv2d<T> conv1_, conv2_;
};

/// Five stride-2 stages; stages 2..5 are exposed as F_2..F_5.
template <typename T>
class Backbone {
public:
    struct StageCache {
        typename Conv2d<T>::Cache down;
        FeatureMap<T> down_out;
        std::vector<typename ResidualBlock<T>::Cache> blocks;
    };
    struct Cache {
        std::array<StageCache, 5> stages;
    };

    Backbone() = default;
    explicit Backbone(const EncoderConfig& cfg)
    {
        int in = cfg.in_channels;
        for (int s = 0; s < 5; ++s) {
            const std::string name = "backbone.stage" + std::to_string(s + 1);
            down_[s] = Conv2d<T>(name + ".down", ConvSpec::square(in, cfg.widths[s], 3, 2));
            for (int b = 0; b < cfg.blocks_per_stage; ++b) {
                blocks_[s].emplace_back(name + ".block" + std::to_string(b), cfg.widths[s]);
            }
            in = cfg.widths[s];
        }
    }

    template <typename Rng>
    void init(Rng& rng)
    {
        for (int s = 0; s < 5; ++s) {
            down_[s].init(rng);
            for (auto& b : blocks_[s]) {
                b.init(rng);
            }
        }
    }

    void collect(ParamRefs<T>& out)
    {
        for (int s = 0; s < 5; ++s) {
            down_[s].collect(out);
            for (auto& b : blocks_[s]) {
                b.collect(out);
            }
        }
    }

    StageMaps<T> forward(const FeatureMap<T>& image, Cache* cache) const
    {
        if (image.height % 32 != 0 || image.width % 32 != 0) {
            throw ConfigError("backbone input must be divisible by 32, got " + std::to_string(image.height) + "x" +
                              std::to_string(image.width));
        }
        StageMaps<T> features;
        FeatureMap<T> x = image;
        for (int s = 0; s < 5; ++s) {
            StageCache* sc = cache ? &cache->stages[s] : nullptr;
            x = nn::relu(down_[s].forward(x, sc ? &sc->down : nullptr));
            if (sc) {
                sc->down_out = x;
                sc->blocks.assign(blocks_[s].size(), {});
            }
            for (std::size_t b = 0; b < blocks_[s].size(); ++b) {
                x = blocks_[s][b].forward(x, sc ? &sc->blocks[b] : nullptr);
            }
            if (s >= 1) {
                features[s - 1] = x;
            }
        }
        return features;
    }

    /// Returns dL/d(image).
    FeatureMap<T> backward(const StageMaps<T>& d_features, Cache& cache)
    {
        FeatureMap<T> g;
        for (int s = 4; s >= 0; --s) {
            if (s >= 1) {
                g = (s == 4) ? d_features[s - 1] : add(g, d_features[s - 1]);
            }
            auto& sc = cache.stages[s];
            for (std::size_t b = blocks_[s].size(); b-- > 0;) {
                g = blocks_[s][b].backward(g, sc.blocks[b]);
            }
            g = down_[s].backward(nn::relu_backward(g, sc.down_out), sc.down, true);
        }
        return g;
    }

private:
    std::array<Conv2d<T>, 5> down_;
    std::array<std::vector<ResidualBlock<T>>, 5> blocks_;
};

// ---------------------------------------------------------------------------
// RFB-Lite: a 1x1 branch plus two (1x1 -> kx1 -> 1xk) branches with
// dilation 1 and 3, concatenated, projected back with a 1x1 conv, residual.

template <typename T>
class RfbLite {
public:
    static constexpr std::array<int, 2> kDilations{1, 3};

    struct BranchCache {
        typename Conv2d<T>::Cache reduce, vertical, horizontal;
        FeatureMap<T> reduced, mid;
    };
    struct Cache {
        typename Conv2d<T>::Cache shortcut_branch;
        std::array<BranchCache, 2> branches;
        typename Conv2d<T>::Cache project;
        FeatureMap<T> concat;
        FeatureMap<T> output;
    };

    RfbLite() = default;
    RfbLite(const std::string& name, int channels) : channels_(channels), branch_width_(std::max(2, channels / 2))
    {
        const int m = branch_width_;
        point_ = Conv2d<T>(name + ".b0", ConvSpec::pointwise(channels, m));
        for (int b = 0; b < 2; ++b) {
            const std::string bn = name + ".b" + std::to_string(b + 1);
            reduce_[b] = Conv2d<T>(bn + ".reduce", ConvSpec::pointwise(channels, m));
            vertical_[b] = Conv2d<T>(bn + ".kx1", ConvSpec::strip(m, m, 3, true, kDilations[b]));
            horizontal_[b] = Conv2d<T>(bn + ".1xk", ConvSpec::strip(m, m, 3, false, kDilations[b]));
        }
        project_ = Conv2d<T>(name + ".project", ConvSpec::pointwise(3 * m, channels));
    }

    int channels() const { return channels_; }

    template <typename Rng>
    void init(Rng& rng)
    {
        point_.init(rng);
        for (int b = 0; b < 2; ++b) {
            reduce_[b].init(rng);
            vertical_[b].init(rng);
            horizontal_[b].init(rng);
        }
        project_.init(rng);
    }

    void collect(ParamRefs<T>& out)
    {
        point_.collect(out);
        for (int b = 0; b < 2; ++b) {
            reduce_[b].collect(out);
            vertical_[b].collect(out);
            horizontal_[b].collect(out);
        }
        project_.collect(out);
    }

    FeatureMap<T> forward(const FeatureMap<T>& x, Cache* cache) const
    {
        const int m = branch_width_;
        FeatureMap<T> cat(3 * m, x.height, x.width);
        cat.data.topRows(m) = point_.forward(x, cache ? &cache->shortcut_branch : nullptr).data;
        for (int b = 0; b < 2; ++b) {
            BranchCache* bc = cache ? &cache->branches[b] : nullptr;
            auto r = nn::relu(reduce_[b].forward(x, bc ? &bc->reduce : nullptr));
            auto v = nn::relu(vertical_[b].forward(r, bc ? &bc->vertical : nullptr));
            auto h = horizontal_[b].forward(v, bc ? &bc->horizontal : nullptr);
            cat.data.middleRows((b + 1) * m, m) = h.data;
            if (bc) {
                bc->reduced = std::move(r);
                bc->mid = std::move(v);
            }
        }
        cat = nn::relu(std::move(cat));
        auto y = nn::relu(add(project_.forward(cat, cache ? &cache->project : nullptr), x));
        if (cache) {
            cache->concat = cat;
            cache->output = y;
        }
        return y;
    }

    FeatureMap<T> backward(const FeatureMap<T>& dy, Cache& cache)
    {
        const int m = branch_width_;
        auto ds = nn::relu_backward(dy, cache.output);
        auto dcat = nn::relu_backward(project_.backward(ds, cache.project), cache.concat);
        FeatureMap<T> dx = ds;
        FeatureMap<T> part(m, dy.height, dy.width);
        part.data = dcat.data.topRows(m);
        dx = add(dx, point_.backward(part, cache.shortcut_branch));
        for (int b = 0; b < 2; ++b) {
            auto& bc = cache.branches[b];
            part.data = dcat.data.middleRows((b + 1) * m, m);
            auto dv = nn::relu_backward(horizontal_[b].backward(part, bc.horizontal), bc.mid);
            auto dr = nn::relu_backward(vertical_[b].backward(dv, bc.vertical), bc.reduced);
            dx = add(dx, reduce_[b].backward(dr, bc.reduce));
        }
        return dx;
    }

private:
    int channels_ = 0;
    int branch_width_ = 0;
    Conv2d<T> point_;
    std::array<Conv2d<T>, 2> reduce_, vertical_, horizontal_;
    Conv2d<T> project_;
};

// ---------------------------------------------------------------------------
// Cascaded aggregation

template <typename T>
FeatureMap<T> avg_pool(const FeatureMap<T>& x, int factor)
{
    if (factor == 1) {
        return x;
    }
    const int oh = x.height / factor;
    const int ow = x.width / factor;
    FeatureMap<T> y(x.channels, oh, ow);
    const T scale = T(1) / static_cast<T>(factor * factor);
    for (int c = 0; c < x.channels; ++c) {
        for (int yy = 0; yy < oh; ++yy) {
            for (int xx = 0; xx < ow; ++xx) {
                T s = 0;
                for (int dy = 0; dy < factor; ++dy) {
                    for (int dx = 0; dx < factor; ++dx) {
                        s += x.at(c, yy * factor + dy, xx * factor + dx);
                    }
                }
                y.at(c, yy, xx) = s * scale;
            }
        }
    }
    return y;
}

template <typename T>
FeatureMap<T> avg_pool_backward(const FeatureMap<T>& dy, int factor)
{
    if (factor == 1) {
        return dy;
    }
    FeatureMap<T> dx(dy.channels, dy.height * factor, dy.width * factor);
    const T scale = T(1) / static_cast<T>(factor * factor);
    for (int c = 0; c < dx.channels; ++c) {
        for (int yy = 0; yy < dx.height; ++yy) {
            for (int xx = 0; xx < dx.width; ++xx) {
                dx.at(c, yy, xx) = dy.at(c, yy / factor, xx / factor) * scale;
            }
        }
    }
    return dx;
}

/// Top-down chain: each stage is average-pooled to stride 32 and projected to
/// d channels (G_n); F'_5 = conv(relu(G_5)) and F'_n = conv(relu(G_n + F'_{n+1}))
/// for n = 4..2. F'_n therefore depends on stages n..5 only.
template <typename T>
class CascadeAggregator {
public:
    struct Cache {
        std::array<typename Conv2d<T>::Cache, kStages> project, fuse;
        std::array<FeatureMap<T>, kStages> fused_input; // post-relu input of each fuse conv
        std::array<int, kStages> in_h{}, in_w{};
    };

    CascadeAggregator() = default;
    CascadeAggregator(const std::array<int, kStages>& channels, int embed_dim) : embed_dim_(embed_dim)
    {
        for (int i = 0; i < kStages; ++i) {
            const std::string name = "cascade.stage" + std::to_string(i + 2);
            project_[i] = Conv2d<T>(name + ".project", ConvSpec::pointwise(channels[i], embed_dim));
            fuse_[i] = Conv2d<T>(name + ".fuse", ConvSpec::square(embed_dim, embed_dim, 3));
        }
    }

    template <typename Rng>
    void init(Rng& rng)
    {
        for (int i = 0; i < kStages; ++i) {
            project_[i].init(rng);
            fuse_[i].init(rng);
        }
    }

    void collect(ParamRefs<T>& out)
    {
        for (int i = 0; i < kStages; ++i) {
            project_[i].collect(out);
            fuse_[i].collect(out);
        }
    }

    StageMaps<T> forward(const StageMaps<T>& enriched, Cache* cache) const
    {
        StageMaps<T> out;
        for (int i = kStages - 1; i >= 0; --i) {
            const int factor = 1 << (kStages - 1 - i);
            auto g = project_[i].forward(avg_pool(enriched[i], factor), cache ? &cache->project[i] : nullptr);
            if (i < kStages - 1) {
                g = add(std::move(g), out[i + 1]);
            }
            g = nn::relu(std::move(g));
            out[i] = fuse_[i].forward(g, cache ? &cache->fuse[i] : nullptr);
            if (cache) {
                cache->fused_input[i] = std::move(g);
                cache->in_h[i] = enriched[i].height;
                cache->in_w[i] = enriched[i].width;
            }
        }
        return out;
    }

    StageMaps<T> backward(const StageMaps<T>& d_out, Cache& cache)
    {
        StageMaps<T> d_in;
        FeatureMap<T> carry; // gradient reaching F'_{n} from F'_{n-1}
        for (int i = 0; i < kStages; ++i) {
            FeatureMap<T> g = d_out[i];
            if (i > 0) {
                g = add(std::move(g), carry);
            }
            auto dg = nn::relu_backward(fuse_[i].backward(g, cache.fuse[i]), cache.fused_input[i]);
            carry = dg; // G_n + F'_{n+1}: same gradient flows to F'_{n+1}
            const int factor = 1 << (kStages - 1 - i);
            d_in[i] = avg_pool_backward(project_[i].backward(dg, cache.project[i]), factor);
        }
        return d_in;
    }

private:
    int embed_dim_ = 0;
    std::array<Conv2d<T>, kStages> project_, fuse_;
};

// ---------------------------------------------------------------------------
// Bilinear resize onto the patch grid (corner pixel centers aligned).

/// Interpolation matrix R (target_pixels x source_pixels), so resized = data * R^T.
inline Eigen::MatrixXd bilinear_matrix(int src_h, int src_w, int dst_h, int dst_w)
{
    Eigen::MatrixXd r = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dst_h) * dst_w,
                                              static_cast<Eigen::Index>(src_h) * src_w);
    auto axis = [](int src, int dst, int i, int& lo, int& hi, double& t) {
        const double pos = (dst == 1) ? 0.5 * (src - 1) : static_cast<double>(i) * (src - 1) / (dst - 1);
        lo = static_cast<int>(std::floor(pos));
        hi = std::min(lo + 1, src - 1);
        t = pos - lo;
    };
    for (int y = 0; y < dst_h; ++y) {
        int y0, y1;
        double ty;
        axis(src_h, dst_h, y, y0, y1, ty);
        for (int x = 0; x < dst_w; ++x) {
            int x0, x1;
            double tx;
            axis(src_w, dst_w, x, x0, x1, tx);
            const auto row = static_cast<Eigen::Index>(y) * dst_w + x;
            r(row, y0 * src_w + x0) += (1 - ty) * (1 - tx);
            r(row, y0 * src_w + x1) += (1 - ty) * tx;
            r(row, y1 * src_w + x0) += ty * (1 - tx);
            r(row, y1 * src_w + x1) += ty * tx;
        }
    }
    return r;
}

/// Resizes a map to dst_h x dst_w; exact passthrough when shapes already match.
template <typename T>
FeatureMap<T> resize_bilinear(const FeatureMap<T>& x, int dst_h, int dst_w)
{
    if (x.height == dst_h && x.width == dst_w) {
        return x;
    }
    const Mat<T> r = bilinear_matrix(x.height, x.width, dst_h, dst_w).template cast<T>();
    FeatureMap<T> y(x.channels, dst_h, dst_w);
    y.data.noalias() = x.data * r.transpose();
    return y;
}

template <typename T>
FeatureMap<T> resize_bilinear_backward(const FeatureMap<T>& dy, int src_h, int src_w)
{
    if (dy.height == src_h && dy.width == src_w) {
        return dy;
    }
    const Mat<T> r = bilinear_matrix(src_h, src_w, dy.height, dy.width).template cast<T>();
    FeatureMap<T> dx(dy.channels, src_h, src_w);
    dx.data.noalias() = dy.data * r;
    return dx;
}

template <typename T>
StageMaps<T> resize_to_grid(const StageMaps<T>& maps, const geometry::PatchGrid2& grid)
{
    StageMaps<T> out;
    for (int i = 0; i < kStages; ++i) {
        out[i] = resize_bilinear(maps[i], grid.cells()[0], grid.cells()[1]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Multi-stage embedding attention.
//
//   W   = softmax(MLP1(cat(relu(MLP0(e_2)), ..., relu(MLP0(e_5)))))
//   z^P = MLP2(sum_n e_n + sum_n w_{n-2} e_n)
//
// MLP0: d -> d/2 (shared across stages), MLP1: 2d -> 4, MLP2: d -> d. Inputs
// are row-batched: each E_n is (positions x d).

template <typename T>
struct MeaOutput {
    Mat<T> embeddings; // positions x d
    Mat<T> weights;    // positions x 4 (attention mode only)
};

template <typename T>
class Mea {
public:
    struct Cache {
        std::array<Mat<T>, kStages> inputs;
        std::array<typename Linear<T>::Cache, kStages> mlp0;
        std::array<Mat<T>, kStages> hidden;
        typename Linear<T>::Cache mlp1, mlp2;
        Mat<T> weights;
    };

    Mea() = default;
    Mea(int d, MeaMode mode) : d_(d), mode_(mode)
    {
        switch (mode_) {
        case MeaMode::Attention:
            mlp0_ = Linear<T>("mea.mlp0", d, d / 2);
            mlp1_ = Linear<T>("mea.mlp1", kStages * (d / 2), kStages);
            mlp2_ = Linear<T>("mea.mlp2", d, d);
            break;
        case MeaMode::Add:
            mlp2_ = Linear<T>("mea.mlp2", d, d);
            break;
        case MeaMode::Concat:
            mlp2_ = Linear<T>("mea.concat_project", kStages * d, d);
            break;
        }
    }

    MeaMode mode() const { return mode_; }

    template <typename Rng>
    void init(Rng& rng)
    {
        if (mode_ == MeaMode::Attention) {
            mlp0_.init(rng);
            mlp1_.init(rng);
        }
        mlp2_.init(rng);
    }

    void collect(ParamRefs<T>& out)
    {
        if (mode_ == MeaMode::Attention) {
            mlp0_.collect(out);
            mlp1_.collect(out);
        }
        mlp2_.collect(out);
    }

    std::size_t parameter_count() const
    {
        std::size_t n = mlp2_.parameter_count();
        if (mode_ == MeaMode::Attention) {
            n += mlp0_.parameter_count() + mlp1_.parameter_count();
        }
        return n;
    }

    /// Attention weights only (positions x 4).
    Mat<T> attention_weights(const std::array<Mat<T>, kStages>& e) const
    {
        const Eigen::Index n = e[0].rows();
        const int h = d_ / 2;
        Mat<T> cat(n, kStages * h);
        for (int s = 0; s < kStages; ++s) {
            cat.middleCols(s * h, h) = nn::relu(mlp0_.forward(e[s], nullptr));
        }
        return nn::softmax_rows<T>(mlp1_.forward(cat, nullptr));
    }

    /// z^P given externally fixed weights (used to check the substitution identity).
    Mat<T> combine_with_weights(const std::array<Mat<T>, kStages>& e, const Mat<T>& w) const
    {
        Mat<T> s = Mat<T>::Zero(e[0].rows(), d_);
        for (int k = 0; k < kStages; ++k) {
            s += e[k];
            s += w.col(k).asDiagonal() * e[k];
        }
        return mlp2_.forward(s, nullptr);
    }

    MeaOutput<T> forward(const std::array<Mat<T>, kStages>& e, Cache* cache) const
    {
        for (const auto& m : e) {
            if (m.cols() != d_ || m.rows() != e[0].rows()) {
                throw ConfigError("MEA inputs must share shape positions x d");
            }
        }
        MeaOutput<T> out;
        const Eigen::Index n = e[0].rows();
        if (cache) {
            cache->inputs = e;
        }
        if (mode_ == MeaMode::Concat) {
            Mat<T> cat(n, kStages * d_);
            for (int k = 0; k < kStages; ++k) {
                cat.middleCols(k * d_, d_) = e[k];
            }
            out.embeddings = mlp2_.forward(cat, cache ? &cache->mlp2 : nullptr);
            return out;
        }
        Mat<T> s = Mat<T>::Zero(n, d_);
        for (int k = 0; k < kStages; ++k) {
            s += e[k];
        }
        if (mode_ == MeaMode::Attention) {
            const int h = d_ / 2;
            Mat<T> cat(n, kStages * h);
            for (int k = 0; k < kStages; ++k) {
                Mat<T> hk = nn::relu(mlp0_.forward(e[k], cache ? &cache->mlp0[k] : nullptr));
                cat.middleCols(k * h, h) = hk;
                if (cache) {
                    cache->hidden[k] = std::move(hk);
                }
            }
            out.weights = nn::softmax_rows<T>(mlp1_.forward(cat, cache ? &cache->mlp1 : nullptr));
            for (int k = 0; k < kStages; ++k) {
                s += out.weights.col(k).asDiagonal() * e[k];
            }
            if (cache) {
                cache->weights = out.weights;
            }
        }
        out.embeddings = mlp2_.forward(s, cache ? &cache->mlp2 : nullptr);
        return out;
    }

    std::array<Mat<T>, kStages> backward(const Mat<T>& dz, Cache& cache)
    {
        std::array<Mat<T>, kStages> de;
        Mat<T> ds = mlp2_.backward(dz, cache.mlp2);
        if (mode_ == MeaMode::Concat) {
            for (int k = 0; k < kStages; ++k) {
                de[k] = ds.middleCols(k * d_, d_);
            }
            return de;
        }
        for (int k = 0; k < kStages; ++k) {
            de[k] = ds;
        }
        if (mode_ != MeaMode::Attention) {
            return de;
        }
        const Eigen::Index n = dz.rows();
        const int h = d_ / 2;
        Mat<T> dw(n, kStages);
        for (int k = 0; k < kStages; ++k) {
            de[k] += cache.weights.col(k).asDiagonal() * ds;
            dw.col(k) = (ds.array() * cache.inputs[k].array()).rowwise().sum();
        }
        Mat<T> dlogits = nn::softmax_rows_backward<T>(dw, cache.weights);
        Mat<T> dcat = mlp1_.backward(dlogits, cache.mlp1);
        for (int k = 0; k < kStages; ++k) {
            Mat<T> dh = nn::relu_backward<T>(dcat.middleCols(k * h, h), cache.hidden[k]);
            de[k] += mlp0_.backward(dh, cache.mlp0[k]);
        }
        return de;
    }

private:
    int d_ = 0;
    MeaMode mode_ = MeaMode::Attention;
    Linear<T> mlp0_, mlp1_, mlp2_;
};

/// Spatial mean per channel.
template <typename T>
Vec<T> pool_image_embedding(const FeatureMap<T>& f)
{
    return f.data.rowwise().mean();
}

template <typename T>
FeatureMap<T> pool_image_embedding_backward(const Vec<T>& dz, int height, int width)
{
    FeatureMap<T> df(static_cast<int>(dz.size()), height, width);
    const T scale = T(1) / static_cast<T>(height * width);
    for (int c = 0; c < df.channels; ++c) {
        df.data.row(c).setConstant(dz(c) * scale);
    }
    return df;
}

/// Channel-major map (d x positions) to row-batched matrix (positions x d).
template <typename T>
Mat<T> positions_by_channel(const FeatureMap<T>& f)
{
    return f.data.transpose();
}

// ---------------------------------------------------------------------------

template <typename T>
struct Encoding {
    Mat<T> patch_embeddings; // grid cells (row-major) x d
    Vec<T> image_embedding;  // d
    Mat<T> mea_weights;      // grid cells x 4 when MEA attention is active
};

template <typename T>
class Encoder {
public:
    struct Cache {
        typename Backbone<T>::Cache backbone;
        std::array<typename RfbLite<T>::Cache, kStages> rfb;
        typename CascadeAggregator<T>::Cache cascade;
        typename Mea<T>::Cache mea;
        int f_h = 0;
        int f_w = 0;
        int grid_h = 0;
        int grid_w = 0;
    };

    Encoder() = default;
    explicit Encoder(const EncoderConfig& cfg)
        : cfg_(cfg), backbone_(cfg), cascade_(stage_channels(cfg), cfg.embed_dim), mea_(cfg.embed_dim, cfg.mea)
    {
        cfg_.validate();
        for (int i = 0; i < kStages; ++i) {
            rfb_[i] = RfbLite<T>("rfb.stage" + std::to_string(i + 2), cfg.widths[i + 1]);
        }
    }

    const EncoderConfig& config() const { return cfg_; }
    Backbone<T>& backbone() { return backbone_; }
    std::array<RfbLite<T>, kStages>& rfb() { return rfb_; }
    CascadeAggregator<T>& cascade() { return cascade_; }
    Mea<T>& mea() { return mea_; }

    template <typename Rng>
    void init(Rng& rng)
    {
        backbone_.init(rng);
        for (auto& r : rfb_) {
            r.init(rng);
        }
        cascade_.init(rng);
        mea_.init(rng);
    }

    /// Parameter groups in a fixed order: backbone, rfb, cascade, mea.
    void collect(ParamRefs<T>& out)
    {
        backbone_.collect(out);
        for (auto& r : rfb_) {
            r.collect(out);
        }
        cascade_.collect(out);
        mea_.collect(out);
    }

    Encoding<T> encode(const FeatureMap<T>& image, const geometry::PatchGrid2& grid, Cache* cache) const
    {
        auto features = backbone_.forward(image, cache ? &cache->backbone : nullptr);
        StageMaps<T> enriched;
        for (int i = 0; i < kStages; ++i) {
            enriched[i] = rfb_[i].forward(features[i], cache ? &cache->rfb[i] : nullptr);
        }
        auto inter = cascade_.forward(enriched, cache ? &cache->cascade : nullptr);
        auto resized = resize_to_grid(inter, grid);
        std::array<Mat<T>, kStages> e;
        for (int i = 0; i < kStages; ++i) {
            e[i] = positions_by_channel(resized[i]);
        }
        auto fused = mea_.forward(e, cache ? &cache->mea : nullptr);
        Encoding<T> out;
        out.patch_embeddings = std::move(fused.embeddings);
        out.mea_weights = std::move(fused.weights);
        out.image_embedding = pool_image_embedding(inter[kStages - 1]);
        if (cache) {
            cache->f_h = inter[0].height;
            cache->f_w = inter[0].width;
            cache->grid_h = grid.cells()[0];
            cache->grid_w = grid.cells()[1];
        }
        return out;
    }

    /// Accumulates parameter gradients from dL/dZ^P and dL/dz^I; returns dL/d(image).
    FeatureMap<T> backward(const Mat<T>& d_patch, const Vec<T>& d_image, Cache& cache)
    {
        auto de = mea_.backward(d_patch, cache.mea);
        StageMaps<T> d_inter;
        for (int i = 0; i < kStages; ++i) {
            FeatureMap<T> g(static_cast<int>(de[i].cols()), cache.grid_h, cache.grid_w);
            g.data = de[i].transpose();
            d_inter[i] = resize_bilinear_backward(g, cache.f_h, cache.f_w);
        }
        d_inter[kStages - 1] = add(std::move(d_inter[kStages - 1]),
                                   pool_image_embedding_backward(d_image, cache.f_h, cache.f_w));
        auto d_enriched = cascade_.backward(d_inter, cache.cascade);
        StageMaps<T> d_features;
        for (int i = 0; i < kStages; ++i) {
            d_features[i] = rfb_[i].backward(d_enriched[i], cache.rfb[i]);
        }
        return backbone_.backward(d_features, cache.backbone);
    }

private:
    static std::array<int, kStages> stage_channels(const EncoderConfig& cfg)
    {
        return {cfg.widths[1], cfg.widths[2], cfg.widths[3], cfg.widths[4]};
    }

    EncoderConfig cfg_;
    Backbone<T> backbone_;
    std::array<RfbLite<T>, kStages> rfb_;
    CascadeAggregator<T> cascade_;
    Mea<T> mea_;
};

} // namespace swipe::encoder

#endif
