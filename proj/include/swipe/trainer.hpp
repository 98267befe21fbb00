#ifndef SWIPE_TRAINER_HPP
#define SWIPE_TRAINER_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "data.hpp"
#include "inference.hpp"
#include "loss.hpp"
#include "model.hpp"
#include "optim.hpp"

namespace swipe::trainer {

// ---------------------------------------------------------------------------
// Ablation switches. "All on" (attention MEA, SPO enabled, global conditioning,
// no source coordinate) is the full model; source_coord is an extra input.

struct AblationFlags {
    encoder::MeaMode mea = encoder::MeaMode::Attention;
    bool spo = true;
    int spo_occurrence = 1;
    geometry::Connectivity spo_connectivity = geometry::Connectivity::Eight;
    bool global_cond = true;
    bool source_coord = false;

    decoder::SpoConfig spo_config() const
    {
        decoder::SpoConfig c;
        c.connectivity = spo_connectivity;
        c.occurrence = spo ? spo_occurrence : 0;
        return c;
    }

    void apply(ModelConfig& m) const
    {
        m.encoder.mea = mea;
        m.decoder.global_cond = global_cond;
        m.decoder.source_coord = source_coord;
    }

    std::string spo_string() const
    {
        return spo ? std::to_string(spo_occurrence) + ":" + std::to_string(int(spo_connectivity)) : "off";
    }

    /// Canonical "key=value,..." form, stable for hashing.
    std::string to_string() const
    {
        return "mea=" + encoder::to_string(mea) + ",spo=" + spo_string() + ",global_cond=" + (global_cond ? "on" : "off") +
               ",source_coord=" + (source_coord ? "on" : "off");
    }
};

namespace detail {

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

inline bool parse_switch(const std::string& key, const std::string& v)
{
    if (v == "on" || v == "true" || v == "1") {
        return true;
    }
    if (v == "off" || v == "false" || v == "0") {
        return false;
    }
    throw ConfigError("ablation '" + key + "' expects on|off, got '" + v + "'");
}

} // namespace detail

/// Applies one "key=value" ablation setting.
inline void set_ablation(AblationFlags& flags, const std::string& key_in, const std::string& value_in)
{
    const auto key = detail::trim(key_in);
    const auto value = detail::trim(value_in);
    if (key == "mea") {
        flags.mea = encoder::mea_mode_from_string(value);
    } else if (key == "spo") {
        if (value == "off") {
            flags.spo = false;
        } else if (value == "on") {
            flags.spo = true;
        } else {
            const auto colon = value.find(':');
            try {
                if (colon == std::string::npos) {
                    throw ConfigError("");
                }
                const int n = std::stoi(value.substr(0, colon));
                const int con = std::stoi(value.substr(colon + 1));
                if (n < 1 || (con != 4 && con != 8)) {
                    throw ConfigError("");
                }
                flags.spo = true;
                flags.spo_occurrence = n;
                flags.spo_connectivity = geometry::connectivity_from_int(con);
            } catch (const std::exception&) {
                throw ConfigError("ablation 'spo' expects off|on|N:con with N >= 1 and con 4 or 8, got '" + value + "'");
            }
        }
    } else if (key == "global_cond") {
        flags.global_cond = detail::parse_switch(key, value);
    } else if (key == "source_coord") {
        flags.source_coord = detail::parse_switch(key, value);
    } else {
        throw ConfigError("unknown ablation '" + key + "' (expected mea, spo, global_cond, source_coord)");
    }
}

/// Parses "k=v,k=v" on top of existing flags.
inline AblationFlags parse_ablation(const std::string& text, AblationFlags flags = {})
{
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = detail::trim(item);
        if (item.empty()) {
            continue;
        }
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("ablation item '" + item + "' is not key=value");
        }
        set_ablation(flags, item.substr(0, eq), item.substr(eq + 1));
    }
    return flags;
}

inline void to_json(nlohmann::json& j, const AblationFlags& f)
{
    j = nlohmann::json{{"mea", encoder::to_string(f.mea)},
                       {"spo", f.spo_string()},
                       {"global_cond", f.global_cond ? "on" : "off"},
                       {"source_coord", f.source_coord ? "on" : "off"}};
}

// ---------------------------------------------------------------------------

struct TrainConfig {
    int iterations = 5000;
    int batch_images = 8;
    int points_per_image = 512;
    optim::AdamWConfig optimizer{};
    loss::LossConfig loss{};
    std::uint64_t seed = 0;
    double annotation_fraction = 1.0;
    AblationFlags ablation{};
    int val_every = 250;
    bool augment = true;
    bool deterministic = false;
    bool dry_run = false;
    int log_every = 0; // progress callback cadence; 0 = silent

    void validate() const
    {
        if (iterations < 1) {
            throw ConfigError("iterations must be >= 1");
        }
        if (batch_images < 1 || points_per_image < 1) {
            throw ConfigError("batch_images and points_per_image must be >= 1");
        }
        if (!(annotation_fraction > 0.0 && annotation_fraction <= 1.0)) {
            throw ConfigError("annotation_fraction must lie in (0, 1]");
        }
        if (val_every < 1) {
            throw ConfigError("val_every must be >= 1");
        }
        optimizer.validate();
        loss.validate();
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c)
{
    j = nlohmann::json{{"iterations", c.iterations},
                       {"batch_images", c.batch_images},
                       {"points_per_image", c.points_per_image},
                       {"optimizer", c.optimizer},
                       {"loss", c.loss},
                       {"seed", c.seed},
                       {"annotation_fraction", c.annotation_fraction},
                       {"ablation", c.ablation},
                       {"val_every", c.val_every},
                       {"augment", c.augment},
                       {"deterministic", c.deterministic},
                       {"dry_run", c.dry_run}};
}

/// Deterministic image-level subset: sorted ids, seeded permutation, prefix of
/// floor(fraction * n). Prefixes make smaller fractions nest inside larger ones.
inline std::vector<int> subsample_annotations(std::vector<int> ids, double fraction, std::uint64_t seed)
{
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw ConfigError("annotation fraction must lie in (0, 1]");
    }
    std::sort(ids.begin(), ids.end());
    const auto keep = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(ids.size()) + 1e-9));
    if (keep == 0) {
        throw ConfigError("annotation fraction " + std::to_string(fraction) + " of " + std::to_string(ids.size()) +
                          " training images selects none");
    }
    std::mt19937_64 rng(derive_seed(seed, "annotations"));
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(keep);
    std::sort(ids.begin(), ids.end());
    return ids;
}

// ---------------------------------------------------------------------------
// Augmentation: the 8 symmetries of the square (flips only for non-square
// images), applied consistently to pixels and point coordinates.

struct Symmetry {
    bool flip_rows = false;
    bool flip_cols = false;
    bool transpose = false;

    geometry::Coord2 apply(geometry::Coord2 p) const
    {
        if (transpose) {
            std::swap(p[0], p[1]);
        }
        if (flip_rows) {
            p[0] = -p[0];
        }
        if (flip_cols) {
            p[1] = -p[1];
        }
        return p;
    }

    template <typename T>
    nn::FeatureMap<T> apply(const nn::FeatureMap<T>& x) const
    {
        const int h = transpose ? x.width : x.height;
        const int w = transpose ? x.height : x.width;
        nn::FeatureMap<T> y(x.channels, h, w);
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                const int r1 = flip_rows ? h - 1 - r : r;
                const int c1 = flip_cols ? w - 1 - c : c;
                const int sr = transpose ? c1 : r1;
                const int sc = transpose ? r1 : c1;
                for (int k = 0; k < x.channels; ++k) {
                    y.at(k, r, c) = x.at(k, sr, sc);
                }
            }
        }
        return y;
    }
};

template <typename Rng>
Symmetry random_symmetry(Rng& rng, bool square)
{
    std::uniform_int_distribution<int> pick(0, square ? 7 : 3);
    const int v = pick(rng);
    return Symmetry{(v & 1) != 0, (v & 2) != 0, (v & 4) != 0};
}

// ---------------------------------------------------------------------------

struct TrainResult {
    std::filesystem::path checkpoint;
    std::string checkpoint_id;
    double best_val_dice = 0.0;
    int best_step = 0;
    int steps_run = 0;
    loss::LossBreakdown last;
    std::vector<int> train_ids;
    std::vector<int> skipped_ids;
    double seconds = 0.0;
};

inline const char* kMetricsHeader = "iteration,L_total,L_PI_patch,L_PI_image,L_SPO,reg,lr";

inline std::string format_metrics_row(int step, const loss::LossBreakdown& b, double lr)
{
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", step, b.total, b.patch_occ, b.image_occ,
                  b.spo, b.reg, lr);
    return buf;
}

/// Mean foreground Dice of D^P reconstructions (MISE at native size).
template <typename T>
double validation_dice(const Model<T>& model, const std::vector<data::Sample>& samples)
{
    if (samples.empty()) {
        return 0.0;
    }
    inference::ReconstructionSpec spec;
    spec.target_height = model.config().image_height;
    spec.target_width = model.config().image_width;
    double sum = 0.0;
    for (const auto& s : samples) {
        const auto enc = model.encode(model.prepare_image(s.image));
        inference::ProbabilityField field = [&](const std::vector<geometry::Coord2>& coords) -> Mat<double> {
            return model.decode_patch_at(enc, coords).template cast<double>();
        };
        spec.target_height = s.mask.height;
        spec.target_width = s.mask.width;
        const auto rec = inference::decode_mise(field, spec);
        sum += inference::dice_metric(rec.mask, s.mask, model.num_classes()).foreground_mean;
    }
    return sum / static_cast<double>(samples.size());
}

using Logger = std::function<void(const std::string&)>;

/// Trains a model on the dataset's train split and writes
/// out_dir/{checkpoint.bin,checkpoint.json,metrics.csv,validation.csv}.
/// The saved parameters are the best-validation snapshot.
inline TrainResult train(data::Dataset& dataset, ModelConfig model_cfg, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir, const Logger& log = {})
{
    cfg.validate();
    const auto started = std::chrono::steady_clock::now();
    std::filesystem::create_directories(out_dir);
    TrainResult result;

    cfg.ablation.apply(model_cfg);
    model_cfg.decoder.num_classes = dataset.manifest.num_classes;
    model_cfg.init_seed = derive_seed(cfg.seed, "model");

    // Training images with point files; images lacking one are skipped and reported.
    const auto chosen = subsample_annotations(dataset.manifest.split("train"), cfg.annotation_fraction, cfg.seed);
    std::vector<data::Sample> train_set;
    for (int id : chosen) {
        auto s = dataset.load(id);
        if (!s.has_points || s.points.empty()) {
            result.skipped_ids.push_back(id);
            continue;
        }
        result.train_ids.push_back(id);
        train_set.push_back(std::move(s));
    }
    if (train_set.empty()) {
        throw ValidationError("no training image has a point file");
    }
    if (!result.skipped_ids.empty() && log) {
        log("skipped " + std::to_string(result.skipped_ids.size()) + " training images without point files");
    }
    const auto val_set = dataset.load_split("val");

    Model<float> model(model_cfg);
    optim::AdamW<float> opt(model.parameters(), cfg.optimizer);
    const auto spo = cfg.ablation.spo_config();

    auto snapshot = [&] {
        std::vector<Mat<float>> v;
        for (auto* p : model.parameters()) {
            v.push_back(p->value);
        }
        return v;
    };
    std::vector<Mat<float>> best = snapshot();
    result.best_val_dice = -1.0;

    auto metadata = [&] {
        nlohmann::json meta{{"kind", "model"},
                            {"train", cfg},
                            {"ablation_string", cfg.ablation.to_string()},
                            {"best_val_dice", result.best_val_dice},
                            {"best_step", result.best_step},
                            {"steps_run", result.steps_run},
                            {"train_images", result.train_ids.size()},
                            {"skipped_images", result.skipped_ids},
                            {"corpus_seed", dataset.manifest.corpus_seed},
                            {"parameter_groups", model.parameter_counts()}};
        return meta;
    };

    if (cfg.dry_run) {
        result.checkpoint = out_dir / "checkpoint";
        result.checkpoint_id = checkpoint::save(model, result.checkpoint, metadata());
        result.best_val_dice = 0.0;
        return result;
    }

    std::ofstream metrics(out_dir / "metrics.csv");
    metrics << kMetricsHeader << '\n';
    std::ofstream val_log(out_dir / "validation.csv");
    val_log << "iteration,val_dice\n";

    std::mt19937_64 rng(derive_seed(cfg.seed, "batches"));
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    const bool square = model_cfg.image_height == model_cfg.image_width;

    auto validate = [&](int step) {
        const double dice = validation_dice(model, val_set);
        val_log << step << ',' << dice << '\n';
        val_log.flush();
        if (dice > result.best_val_dice) {
            result.best_val_dice = dice;
            result.best_step = step;
            best = snapshot();
        }
        if (log) {
            char buf[96];
            std::snprintf(buf, sizeof buf, "step %d: val dice %.4f (best %.4f @ %d)", step, dice, result.best_val_dice,
                          result.best_step);
            log(buf);
        }
    };

    std::vector<int> subset;
    for (int step = 0; step < cfg.iterations; ++step) {
        model.zero_grad();
        loss::LossBreakdown sum;
        const int batch = std::min<int>(cfg.batch_images, static_cast<int>(train_set.size()));
        for (int b = 0; b < batch; ++b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const auto& sample = train_set[order[cursor++]];

            // fixed-size random subset of the pre-sampled points
            const int n = static_cast<int>(sample.points.size());
            const int k = std::min(n, cfg.points_per_image);
            subset.resize(static_cast<std::size_t>(n));
            std::iota(subset.begin(), subset.end(), 0);
            for (int i = 0; i < k; ++i) {
                std::uniform_int_distribution<int> pick(i, n - 1);
                std::swap(subset[static_cast<std::size_t>(i)], subset[static_cast<std::size_t>(pick(rng))]);
            }
            const Symmetry sym = cfg.augment ? random_symmetry(rng, square) : Symmetry{};
            std::vector<sampling::OccupancySample> points;
            points.reserve(static_cast<std::size_t>(k));
            for (int i = 0; i < k; ++i) {
                auto p = sample.points[static_cast<std::size_t>(subset[static_cast<std::size_t>(i)])];
                p.p_image = sym.apply(p.p_image);
                p.p_source = sym.apply(p.p_source);
                points.push_back(p);
            }
            const auto pb = make_point_batch(points, model.grid(), spo, model_cfg.decoder.rescale_local, rng);
            const auto image = sym.apply(model.prepare_image(sample.image));
            sum += model.loss_for_image(image, pb, cfg.loss, true, 1.0f / static_cast<float>(batch));
        }
        sum /= static_cast<double>(batch);
        if (!std::isfinite(sum.total)) {
            std::ostringstream msg;
            msg << "non-finite loss at step " << step << ": total=" << sum.total << " patch=" << sum.patch_occ
                << " image=" << sum.image_occ << " spo=" << sum.spo << " reg=" << sum.reg;
            throw TrainingError(msg.str());
        }
        const double lr = optim::cosine_lr(cfg.optimizer, step, cfg.iterations);
        opt.step(lr);
        result.last = sum;
        result.steps_run = step + 1;
        metrics << format_metrics_row(step, sum, lr) << '\n';
        if (log && cfg.log_every > 0 && (step % cfg.log_every == 0)) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "step %d: loss %.4f (patch %.4f image %.4f spo %.4f)", step, sum.total,
                          sum.patch_occ, sum.image_occ, sum.spo);
            log(buf);
        }
        if ((step + 1) % cfg.val_every == 0 || step + 1 == cfg.iterations) {
            validate(step + 1);
        }
    }
    metrics.flush();

    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i]->value = best[i];
    }
    result.checkpoint = out_dir / "checkpoint";
    result.checkpoint_id = checkpoint::save(model, result.checkpoint, metadata());
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return result;
}

} // namespace swipe::trainer

#endif
