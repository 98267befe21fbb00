#ifndef SWIPE_MODEL_HPP
#define SWIPE_MODEL_HPP

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "decoder.hpp"
#include "encoder.hpp"
#include "geometry.hpp"
#include "loss.hpp"
#include "nn.hpp"
#include "raster.hpp"
#include "sampling.hpp"

namespace swipe {

struct ModelConfig {
    encoder::EncoderConfig encoder;
    decoder::DecoderConfig decoder;
    int image_height = 96;
    int image_width = 96;
    int patch_size = 32;
    std::uint64_t init_seed = 0;

    void validate() const
    {
        encoder.validate();
        decoder.validate();
        geometry::PatchGrid2({image_height, image_width}, patch_size);
        if (!encoder.resize_input && (image_height % 32 != 0 || image_width % 32 != 0)) {
            throw ConfigError("image size must be divisible by 32 unless resize_input is set");
        }
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c)
{
    j = nlohmann::json{{"encoder", c.encoder},
                       {"decoder", c.decoder},
                       {"image_height", c.image_height},
                       {"image_width", c.image_width},
                       {"patch_size", c.patch_size},
                       {"init_seed", c.init_seed},
                       {"init", "fan-in uniform, bound sqrt(3/fan_in); zero biases"}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c)
{
    j.at("encoder").get_to(c.encoder);
    j.at("decoder").get_to(c.decoder);
    j.at("image_height").get_to(c.image_height);
    j.at("image_width").get_to(c.image_width);
    j.at("patch_size").get_to(c.patch_size);
    j.at("init_seed").get_to(c.init_seed);
}

/// Everything a loss evaluation needs for one image, with SPO draws already made
/// so forward passes are repeatable.
struct PointBatch {
    std::vector<decoder::PatchDecoderInput> patch_inputs;
    std::vector<geometry::Coord2> image_coords;
    std::vector<int> labels;
    std::vector<decoder::PatchDecoderInput> spo_inputs;
    std::vector<int> spo_labels;
};

template <typename Rng>
PointBatch make_point_batch(const std::vector<sampling::OccupancySample>& samples, const geometry::PatchGrid2& grid,
                            const decoder::SpoConfig& spo, bool rescale_local, Rng& rng)
{
    PointBatch b;
    b.patch_inputs.reserve(samples.size());
    for (const auto& s : samples) {
        b.patch_inputs.push_back(decoder::make_patch_input(s, grid, rescale_local));
        b.image_coords.push_back(s.p_image);
        b.labels.push_back(s.label);
        for (const auto& draw : decoder::spo_perturb(s, grid, spo, rng, rescale_local)) {
            b.spo_inputs.push_back(draw.input);
            b.spo_labels.push_back(draw.label);
        }
    }
    return b;
}

template <typename T>
class Model {
public:
    using FeatureMap = nn::FeatureMap<T>;

    Model() = default;
    explicit Model(const ModelConfig& cfg)
        : cfg_(cfg), encoder_(cfg.encoder), patch_decoder_(cfg.decoder, cfg.encoder.embed_dim),
          image_decoder_(cfg.decoder, cfg.encoder.embed_dim),
          grid_({cfg.image_height, cfg.image_width}, cfg.patch_size)
    {
        cfg_.validate();
        std::mt19937_64 rng(derive_seed(cfg.init_seed, "init"));
        encoder_.init(rng);
        patch_decoder_.init(rng);
        image_decoder_.init(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    const geometry::PatchGrid2& grid() const { return grid_; }
    int num_classes() const { return cfg_.decoder.num_classes; }
    encoder::Encoder<T>& encoder() { return encoder_; }
    const encoder::Encoder<T>& encoder() const { return encoder_; }
    decoder::PatchDecoder<T>& patch_decoder() { return patch_decoder_; }
    const decoder::PatchDecoder<T>& patch_decoder() const { return patch_decoder_; }
    decoder::ImageDecoder<T>& image_decoder() { return image_decoder_; }
    const decoder::ImageDecoder<T>& image_decoder() const { return image_decoder_; }

    nn::ParamRefs<T> parameters()
    {
        nn::ParamRefs<T> out;
        encoder_.collect(out);
        patch_decoder_.collect(out);
        image_decoder_.collect(out);
        return out;
    }

    void zero_grad()
    {
        for (auto* p : parameters()) {
            p->zero_grad();
        }
    }

    /// Parameter group of a named parameter (prefix before the first '.').
    static std::string group_of(const std::string& name) { return name.substr(0, name.find('.')); }

    std::map<std::string, std::size_t> parameter_counts()
    {
        std::map<std::string, std::size_t> counts;
        for (auto* p : parameters()) {
            counts[group_of(p->name)] += static_cast<std::size_t>(p->size());
        }
        return counts;
    }

    std::size_t parameter_count()
    {
        std::size_t n = 0;
        for (auto* p : parameters()) {
            n += static_cast<std::size_t>(p->size());
        }
        return n;
    }

    /// Grayscale image in [0,1] to the network input tensor (zero-centered).
    FeatureMap prepare_image(const GrayImage& image) const
    {
        FeatureMap x(1, image.height, image.width);
        for (std::size_t i = 0; i < image.size(); ++i) {
            x.data(0, static_cast<Eigen::Index>(i)) = static_cast<T>((image.values[i] - 0.5f) * 2.0f);
        }
        if (image.height != cfg_.image_height || image.width != cfg_.image_width) {
            if (!cfg_.encoder.resize_input) {
                throw ConfigError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                                  " but the model expects " + std::to_string(cfg_.image_height) + "x" +
                                  std::to_string(cfg_.image_width));
            }
            x = encoder::resize_bilinear(x, cfg_.image_height, cfg_.image_width);
        }
        return x;
    }

    encoder::Encoding<T> encode(const FeatureMap& image, typename encoder::Encoder<T>::Cache* cache = nullptr) const
    {
        return encoder_.encode(image, grid_, cache);
    }

    /// D^P probabilities at arbitrary image coordinates.
    Mat<T> decode_patch_at(const encoder::Encoding<T>& enc, const std::vector<geometry::Coord2>& coords) const
    {
        std::vector<decoder::PatchDecoderInput> inputs;
        inputs.reserve(coords.size());
        for (const auto& p : coords) {
            sampling::OccupancySample s;
            s.p_image = p;
            s.p_source = p;
            inputs.push_back(decoder::make_patch_input(s, grid_, cfg_.decoder.rescale_local));
        }
        return patch_decoder_.forward(inputs, enc.patch_embeddings, enc.image_embedding, nullptr);
    }

    Mat<T> decode_image_at(const encoder::Encoding<T>& enc, const std::vector<geometry::Coord2>& coords) const
    {
        return image_decoder_.forward(coords, enc.image_embedding, nullptr);
    }

    /// Loss for one image; when backward is true, adds scale * dL/dtheta into
    /// the parameter gradients.
    loss::LossBreakdown loss_for_image(const FeatureMap& image, const PointBatch& batch, const loss::LossConfig& lc,
                                       bool backward, T scale = T(1))
    {
        typename encoder::Encoder<T>::Cache enc_cache;
        auto enc = encoder_.encode(image, grid_, backward ? &enc_cache : nullptr);

        typename decoder::PatchDecoder<T>::Cache pc, sc;
        typename decoder::ImageDecoder<T>::Cache ic;
        const Mat<T> patch_probs = patch_decoder_.forward(batch.patch_inputs, enc.patch_embeddings,
                                                          enc.image_embedding, backward ? &pc : nullptr);
        const Mat<T> image_probs = image_decoder_.forward(batch.image_coords, enc.image_embedding, backward ? &ic : nullptr);
        Mat<T> spo_probs(0, num_classes());
        if (!batch.spo_inputs.empty()) {
            spo_probs = patch_decoder_.forward(batch.spo_inputs, enc.patch_embeddings, enc.image_embedding,
                                               backward ? &sc : nullptr);
        }
        const Mat<T> targets = loss::one_hot<T>(batch.labels, num_classes());
        const Mat<T> spo_targets = loss::one_hot<T>(batch.spo_labels, num_classes());

        std::vector<int> touched;
        touched.reserve(batch.patch_inputs.size());
        for (const auto& q : batch.patch_inputs) {
            touched.push_back(q.patch);
        }

        Mat<T> d_patch_probs = Mat<T>::Zero(patch_probs.rows(), patch_probs.cols());
        Mat<T> d_image_probs = Mat<T>::Zero(image_probs.rows(), image_probs.cols());
        Mat<T> d_spo_probs = Mat<T>::Zero(spo_probs.rows(), spo_probs.cols());
        Mat<T> d_patch_emb = Mat<T>::Zero(enc.patch_embeddings.rows(), enc.patch_embeddings.cols());
        Vec<T> d_image_emb = Vec<T>::Zero(enc.image_embedding.size());
        loss::LossGradients<T> grads;
        if (backward) {
            grads = {&d_patch_probs, &d_image_probs, &d_spo_probs, &d_patch_emb, &d_image_emb};
        }
        const auto breakdown = loss::total_loss<T>(targets, patch_probs, image_probs, spo_targets, spo_probs,
                                                   enc.patch_embeddings, touched, enc.image_embedding, lc, grads, scale);
        if (backward) {
            patch_decoder_.backward(d_patch_probs, pc, d_patch_emb, d_image_emb);
            image_decoder_.backward(d_image_probs, ic, d_image_emb);
            if (!batch.spo_inputs.empty()) {
                patch_decoder_.backward(d_spo_probs, sc, d_patch_emb, d_image_emb);
            }
            encoder_.backward(d_patch_emb, d_image_emb, enc_cache);
        }
        return breakdown;
    }

private:
    ModelConfig cfg_;
    encoder::Encoder<T> encoder_;
    decoder::PatchDecoder<T> patch_decoder_;
    decoder::ImageDecoder<T> image_decoder_;
    geometry::PatchGrid2 grid_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "<stem>.bin" holds the tensors, "<stem>.json" the metadata.
//
// Binary layout (little-endian):
//   "SWIPECK1" | u32 tensor count | per tensor:
//     u32 name length | name bytes | u32 rows | u32 cols | u8 scalar bytes (4|8) | data (row-major)

namespace checkpoint {

inline constexpr char kMagic[8] = {'S', 'W', 'I', 'P', 'E', 'C', 'K', '1'};

inline std::filesystem::path bin_path(const std::filesystem::path& stem)
{
    auto p = stem;
    return p.replace_extension(".bin");
}

inline std::filesystem::path json_path(const std::filesystem::path& stem)
{
    auto p = stem;
    return p.replace_extension(".json");
}

template <typename T>
std::string serialize_tensors(Model<T>& model)
{
    std::ostringstream out(std::ios::binary);
    auto put32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
    out.write(kMagic, sizeof kMagic);
    auto params = model.parameters();
    put32(static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
        put32(static_cast<std::uint32_t>(p->name.size()));
        out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        put32(static_cast<std::uint32_t>(p->value.rows()));
        put32(static_cast<std::uint32_t>(p->value.cols()));
        const auto bytes = static_cast<std::uint8_t>(sizeof(T));
        out.put(static_cast<char>(bytes));
        out.write(reinterpret_cast<const char*>(p->value.data()), static_cast<std::streamsize>(p->value.size() * sizeof(T)));
    }
    return out.str();
}

inline std::string content_id(const std::string& bytes)
{
    std::ostringstream hex;
    hex << std::hex << detail::fnv1a(bytes);
    return hex.str();
}

/// Writes both files; returns the checkpoint id (hash of the tensor bytes).
template <typename T>
std::string save(Model<T>& model, const std::filesystem::path& stem, nlohmann::json metadata = nlohmann::json::object())
{
    if (stem.has_parent_path()) {
        std::filesystem::create_directories(stem.parent_path());
    }
    const std::string bytes = serialize_tensors(model);
    {
        std::ofstream out(bin_path(stem), std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw Error("failed writing " + bin_path(stem).string());
        }
    }
    const std::string id = content_id(bytes);
    metadata["model"] = model.config();
    metadata["checkpoint_id"] = id;
    metadata["parameter_count"] = model.parameter_count();
    std::ofstream meta(json_path(stem));
    meta << metadata.dump(2) << '\n';
    return id;
}

inline nlohmann::json load_metadata(const std::filesystem::path& stem)
{
    std::ifstream in(json_path(stem));
    if (!in) {
        throw ValidationError("checkpoint metadata not found: " + json_path(stem).string());
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(json_path(stem).string() + ": " + e.what());
    }
}

template <typename T>
Model<T> load(const std::filesystem::path& stem, nlohmann::json* metadata_out = nullptr)
{
    const auto meta = load_metadata(stem);
    ModelConfig cfg = meta.at("model").get<ModelConfig>();
    Model<T> model(cfg);
    std::ifstream in(bin_path(stem), std::ios::binary);
    if (!in) {
        throw ValidationError("checkpoint tensors not found: " + bin_path(stem).string());
    }
    auto get32 = [&] {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof v);
        return v;
    };
    char magic[8] = {};
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw ParseError(bin_path(stem).string() + ": not a checkpoint file");
    }
    std::map<std::string, nn::Param<T>*> by_name;
    for (auto* p : model.parameters()) {
        by_name[p->name] = p;
    }
    const std::uint32_t count = get32();
    if (count != by_name.size()) {
        throw ValidationError("checkpoint has " + std::to_string(count) + " tensors, model expects " +
                              std::to_string(by_name.size()));
    }
    for (std::uint32_t t = 0; t < count; ++t) {
        std::string name(get32(), '\0');
        in.read(name.data(), static_cast<std::streamsize>(name.size()));
        const auto rows = get32();
        const auto cols = get32();
        const int bytes = in.get();
        auto it = by_name.find(name);
        if (!in || it == by_name.end()) {
            throw ValidationError("unexpected tensor '" + name + "' in checkpoint");
        }
        auto& value = it->second->value;
        if (rows != value.rows() || cols != value.cols()) {
            throw ValidationError("shape mismatch for tensor '" + name + "'");
        }
        const auto n = static_cast<std::size_t>(rows) * cols;
        if (bytes == 4) {
            std::vector<float> buf(n);
            in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
            for (std::size_t i = 0; i < n; ++i) {
                value.data()[i] = static_cast<T>(buf[i]);
            }
        } else if (bytes == 8) {
            std::vector<double> buf(n);
            in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 8));
            for (std::size_t i = 0; i < n; ++i) {
                value.data()[i] = static_cast<T>(buf[i]);
            }
        } else {
            throw ParseError("unsupported scalar width in checkpoint");
        }
        if (!in) {
            throw ParseError(bin_path(stem).string() + ": truncated tensor data");
        }
    }
    if (metadata_out) {
        *metadata_out = meta;
    }
    return model;
}

} // namespace checkpoint

} // namespace swipe

#endif
