#ifndef SWIPE_DECODER_HPP
#define SWIPE_DECODER_HPP

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "geometry.hpp"
#include "nn.hpp"
#include "sampling.hpp"

// Occupancy decoders.
//
// Patch decoder input row layout (concatenated at the first MLP layer):
//   [ enc(p_P) | z_P | enc(p_I) | z_I | enc(p_S) ]
// where enc() is the identity unless frequency bands are configured, the
// (p_I, z_I) block is present only with global conditioning, and p_S only with
// the source-coordinate flag. The image decoder input is [ enc(p_I) | z_I ].

namespace swipe::decoder {

using geometry::Coord2;
using geometry::PatchGrid2;

enum class HeadKind { Softmax, Sigmoid };

struct DecoderConfig {
    int num_classes = 2;
    HeadKind head = HeadKind::Softmax;
    std::vector<int> patch_hidden{256, 256, 256};
    std::vector<int> image_hidden{256, 128};
    bool global_cond = true;
    bool source_coord = false;
    int frequency_bands = 0;
    bool rescale_local = false;

    void validate() const
    {
        if (num_classes < 2) {
            throw ConfigError("num_classes must be >= 2 (background plus foreground)");
        }
        if (head == HeadKind::Sigmoid && num_classes != 2) {
            throw ConfigError("sigmoid head is only defined for binary tasks");
        }
        if (frequency_bands < 0) {
            throw ConfigError("frequency_bands must be >= 0");
        }
    }

    int coord_width() const { return 2 * (1 + 2 * frequency_bands); }
    int head_width() const { return head == HeadKind::Sigmoid ? 1 : num_classes; }

    int patch_input_width(int d) const
    {
        int w = coord_width() + d;
        if (global_cond) {
            w += coord_width() + d;
        }
        if (source_coord) {
            w += coord_width();
        }
        return w;
    }
    int image_input_width(int d) const { return coord_width() + d; }
};

inline void to_json(nlohmann::json& j, const DecoderConfig& c)
{
    j = nlohmann::json{{"num_classes", c.num_classes},
                       {"head", c.head == HeadKind::Softmax ? "softmax" : "sigmoid"},
                       {"patch_hidden", c.patch_hidden},
                       {"image_hidden", c.image_hidden},
                       {"global_cond", c.global_cond},
                       {"source_coord", c.source_coord},
                       {"frequency_bands", c.frequency_bands},
                       {"rescale_local", c.rescale_local}};
}

inline void from_json(const nlohmann::json& j, DecoderConfig& c)
{
    j.at("num_classes").get_to(c.num_classes);
    c.head = j.at("head").get<std::string>() == "sigmoid" ? HeadKind::Sigmoid : HeadKind::Softmax;
    j.at("patch_hidden").get_to(c.patch_hidden);
    j.at("image_hidden").get_to(c.image_hidden);
    j.at("global_cond").get_to(c.global_cond);
    j.at("source_coord").get_to(c.source_coord);
    j.at("frequency_bands").get_to(c.frequency_bands);
    c.rescale_local = j.value("rescale_local", false);
}

/// One patch-decoder query. The patch embedding is addressed by its flat cell
/// index into Z^P; z^I is shared by the whole image.
struct PatchDecoderInput {
    Coord2 p_local{};
    int patch = 0;
    Coord2 p_image{};
    Coord2 p_source{};
};

inline PatchDecoderInput make_patch_input(const sampling::OccupancySample& s, const PatchGrid2& grid,
                                          bool rescale_local = false)
{
    const auto cell = geometry::patch_of(s.p_image, grid);
    PatchDecoderInput in;
    in.patch = grid.flat(cell);
    in.p_local = geometry::to_patch_local(s.p_image, geometry::center_of(cell, grid));
    if (rescale_local) {
        in.p_local = geometry::rescale_patch_local(in.p_local, grid);
    }
    in.p_image = s.p_image;
    in.p_source = s.p_source;
    return in;
}

/// Coordinate encoding: identity, optionally followed by sin/cos(2^k pi p).
template <typename T>
void encode_coord(const Coord2& p, int bands, T* out)
{
    out[0] = static_cast<T>(p[0]);
    out[1] = static_cast<T>(p[1]);
    int o = 2;
    for (int k = 0; k < bands; ++k) {
        const double f = std::ldexp(std::numbers::pi, k);
        for (int a = 0; a < 2; ++a) {
            out[o++] = static_cast<T>(std::sin(f * p[a]));
            out[o++] = static_cast<T>(std::cos(f * p[a]));
        }
    }
}

template <typename T>
class OccupancyHead {
public:
    explicit OccupancyHead(HeadKind kind = HeadKind::Softmax) : kind_(kind) {}

    Mat<T> probabilities(const Mat<T>& logits) const
    {
        if (kind_ == HeadKind::Softmax) {
            return nn::softmax_rows<T>(logits);
        }
        Mat<T> p(logits.rows(), 2);
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
            const T fg = T(1) / (T(1) + std::exp(-logits(i, 0)));
            p(i, 0) = T(1) - fg;
            p(i, 1) = fg;
        }
        return p;
    }

    Mat<T> backward(const Mat<T>& dprob, const Mat<T>& prob) const
    {
        if (kind_ == HeadKind::Softmax) {
            return nn::softmax_rows_backward<T>(dprob, prob);
        }
        Mat<T> dz(prob.rows(), 1);
        for (Eigen::Index i = 0; i < prob.rows(); ++i) {
            const T fg = prob(i, 1);
            dz(i, 0) = (dprob(i, 1) - dprob(i, 0)) * fg * (T(1) - fg);
        }
        return dz;
    }

private:
    HeadKind kind_;
};

/// D^P: (p_P, z_P, p_I, z_I, p_S) -> class probabilities.
template <typename T>
class PatchDecoder {
public:
    struct Cache {
        typename nn::Mlp<T>::Cache mlp;
        Mat<T> probs;
        std::vector<int> patches;
    };

    PatchDecoder() = default;
    PatchDecoder(const DecoderConfig& cfg, int embed_dim)
        : cfg_(cfg), d_(embed_dim), head_(cfg.head),
          mlp_("patch_decoder", cfg.patch_input_width(embed_dim), cfg.patch_hidden, cfg.head_width())
    {
        cfg_.validate();
    }

    const DecoderConfig& config() const { return cfg_; }
    nn::Mlp<T>& mlp() { return mlp_; }
    int input_width() const { return mlp_.in_features(); }

    template <typename Rng>
    void init(Rng& rng)
    {
        mlp_.init(rng);
    }
    void collect(nn::ParamRefs<T>& out) { mlp_.collect(out); }
    std::size_t parameter_count() const { return mlp_.parameter_count(); }

    Mat<T> assemble(const std::vector<PatchDecoderInput>& inputs, const Mat<T>& patch_embeddings,
                    const Vec<T>& image_embedding) const
    {
        const int cw = cfg_.coord_width();
        Mat<T> x(static_cast<Eigen::Index>(inputs.size()), input_width());
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            const auto& q = inputs[i];
            T* row = x.row(static_cast<Eigen::Index>(i)).data();
            int o = 0;
            encode_coord(q.p_local, cfg_.frequency_bands, row + o);
            o += cw;
            Eigen::Map<RowVec<T>>(row + o, d_) = patch_embeddings.row(q.patch);
            o += d_;
            if (cfg_.global_cond) {
                encode_coord(q.p_image, cfg_.frequency_bands, row + o);
                o += cw;
                Eigen::Map<RowVec<T>>(row + o, d_) = image_embedding.transpose();
                o += d_;
            }
            if (cfg_.source_coord) {
                encode_coord(q.p_source, cfg_.frequency_bands, row + o);
            }
        }
        return x;
    }

    /// Probabilities, one row per input.
    Mat<T> forward(const std::vector<PatchDecoderInput>& inputs, const Mat<T>& patch_embeddings,
                   const Vec<T>& image_embedding, Cache* cache) const
    {
        const Mat<T> x = assemble(inputs, patch_embeddings, image_embedding);
        Mat<T> probs = head_.probabilities(mlp_.forward(x, cache ? &cache->mlp : nullptr));
        if (cache) {
            cache->probs = probs;
            cache->patches.resize(inputs.size());
            for (std::size_t i = 0; i < inputs.size(); ++i) {
                cache->patches[i] = inputs[i].patch;
            }
        }
        return probs;
    }

    /// Accumulates dL/dZ^P (scattered by patch) and dL/dz^I.
    void backward(const Mat<T>& dprobs, Cache& cache, Mat<T>& d_patch, Vec<T>& d_image)
    {
        const Mat<T> dx = mlp_.backward(head_.backward(dprobs, cache.probs), cache.mlp, true);
        const int cw = cfg_.coord_width();
        for (Eigen::Index i = 0; i < dx.rows(); ++i) {
            d_patch.row(cache.patches[static_cast<std::size_t>(i)]) += dx.row(i).segment(cw, d_);
            if (cfg_.global_cond) {
                d_image += dx.row(i).segment(2 * cw + d_, d_).transpose();
            }
        }
    }

private:
    DecoderConfig cfg_;
    int d_ = 0;
    OccupancyHead<T> head_;
    nn::Mlp<T> mlp_;
};

/// D^I: (p_I, z_I) -> class probabilities.
template <typename T>
class ImageDecoder {
public:
    struct Cache {
        typename nn::Mlp<T>::Cache mlp;
        Mat<T> probs;
    };

    ImageDecoder() = default;
    ImageDecoder(const DecoderConfig& cfg, int embed_dim)
        : cfg_(cfg), d_(embed_dim), head_(cfg.head),
          mlp_("image_decoder", cfg.image_input_width(embed_dim), cfg.image_hidden, cfg.head_width())
    {
        cfg_.validate();
    }

    nn::Mlp<T>& mlp() { return mlp_; }

    template <typename Rng>
    void init(Rng& rng)
    {
        mlp_.init(rng);
    }
    void collect(nn::ParamRefs<T>& out) { mlp_.collect(out); }
    std::size_t parameter_count() const { return mlp_.parameter_count(); }

    Mat<T> assemble(const std::vector<Coord2>& coords, const Vec<T>& image_embedding) const
    {
        const int cw = cfg_.coord_width();
        Mat<T> x(static_cast<Eigen::Index>(coords.size()), cw + d_);
        for (std::size_t i = 0; i < coords.size(); ++i) {
            T* row = x.row(static_cast<Eigen::Index>(i)).data();
            encode_coord(coords[i], cfg_.frequency_bands, row);
            Eigen::Map<RowVec<T>>(row + cw, d_) = image_embedding.transpose();
        }
        return x;
    }

    Mat<T> forward(const std::vector<Coord2>& coords, const Vec<T>& image_embedding, Cache* cache) const
    {
        Mat<T> probs = head_.probabilities(mlp_.forward(assemble(coords, image_embedding), cache ? &cache->mlp : nullptr));
        if (cache) {
            cache->probs = probs;
        }
        return probs;
    }

    void backward(const Mat<T>& dprobs, Cache& cache, Vec<T>& d_image)
    {
        const Mat<T> dx = mlp_.backward(head_.backward(dprobs, cache.probs), cache.mlp, true);
        d_image += dx.rightCols(d_).colwise().sum().transpose();
    }

private:
    DecoderConfig cfg_;
    int d_ = 0;
    OccupancyHead<T> head_;
    nn::Mlp<T> mlp_;
};

// ---------------------------------------------------------------------------
// Stochastic Patch Overreach

struct SpoConfig {
    geometry::Connectivity connectivity = geometry::Connectivity::Eight;
    int occurrence = 1; // N_SPO perturbed copies per batch point; 0 disables SPO

    bool enabled() const { return occurrence > 0; }
};

struct SpoSample {
    PatchDecoderInput input;
    int label = 0;
};

/// N_SPO copies of a sample re-expressed relative to uniformly chosen
/// neighboring cells. Target, p_I and p_S pass through unchanged. Returns an
/// empty list (and sets *inert) when the sample's cell has no neighbors.
template <typename Rng>
std::vector<SpoSample> spo_perturb(const sampling::OccupancySample& sample, const PatchGrid2& grid,
                                   const SpoConfig& cfg, Rng& rng, bool rescale_local = false, bool* inert = nullptr)
{
    std::vector<SpoSample> out;
    if (inert) {
        *inert = false;
    }
    if (cfg.occurrence <= 0) {
        return out;
    }
    const auto cell = geometry::patch_of(sample.p_image, grid);
    const auto candidates = geometry::neighbors(cell, grid, cfg.connectivity);
    if (candidates.empty()) {
        if (inert) {
            *inert = true;
        }
        return out;
    }
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    out.reserve(static_cast<std::size_t>(cfg.occurrence));
    for (int k = 0; k < cfg.occurrence; ++k) {
        const auto& nb = candidates[pick(rng)];
        SpoSample s;
        s.input.patch = grid.flat(nb);
        s.input.p_local = geometry::to_patch_local(sample.p_image, geometry::center_of(nb, grid));
        if (rescale_local) {
            s.input.p_local = geometry::rescale_patch_local(s.input.p_local, grid);
        }
        s.input.p_image = sample.p_image;
        s.input.p_source = sample.p_source;
        s.label = sample.label;
        out.push_back(s);
    }
    return out;
}

} // namespace swipe::decoder

#endif
