#ifndef SWIPE_INFERENCE_HPP
#define SWIPE_INFERENCE_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "data.hpp"
#include "geometry.hpp"
#include "model.hpp"
#include "raster.hpp"

namespace swipe::inference {

using geometry::Coord2;

/// Class probabilities (points x classes) at normalized image coordinates.
using ProbabilityField = std::function<Mat<double>(const std::vector<Coord2>&)>;

enum class Refinement { Mise, Dense };

inline std::string to_string(Refinement r)
{
    return r == Refinement::Mise ? "mise" : "dense";
}

inline Refinement refinement_from_string(const std::string& s)
{
    if (s == "mise") {
        return Refinement::Mise;
    }
    if (s == "dense") {
        return Refinement::Dense;
    }
    throw ConfigError("unknown refinement mode '" + s + "' (expected mise or dense)");
}

struct ReconstructionSpec {
    int target_height = 96;
    int target_width = 96;
    int initial_stride = 4;
    double threshold = 0.5;
    double margin = 0.15;
    Refinement refinement = Refinement::Mise;

    void validate() const
    {
        if (target_height < 1 || target_width < 1) {
            throw ConfigError("target size must be >= 1");
        }
        if (initial_stride < 1 || (initial_stride & (initial_stride - 1)) != 0) {
            throw ConfigError("initial_stride must be a power of two");
        }
    }
};

inline void to_json(nlohmann::json& j, const ReconstructionSpec& s)
{
    j = nlohmann::json{{"target_height", s.target_height},   {"target_width", s.target_width},
                       {"initial_stride", s.initial_stride}, {"threshold", s.threshold},
                       {"margin", s.margin},                 {"refinement", to_string(s.refinement)}};
}

struct Reconstruction {
    LabelMask mask;
    long evaluations = 0;   // unique pixel centers passed to the decoder
    long refined_cells = 0; // cells subdivided across all levels
};

/// Argmax with the lowest class index winning ties.
inline int argmax_row(const Mat<double>& probs, Eigen::Index row)
{
    int best = 0;
    for (Eigen::Index c = 1; c < probs.cols(); ++c) {
        if (probs(row, c) > probs(row, best)) {
            best = static_cast<int>(c);
        }
    }
    return best;
}

namespace detail {

inline constexpr std::size_t kChunk = 4096;

inline Mat<double> evaluate(const ProbabilityField& field, const std::vector<Coord2>& coords)
{
    if (coords.size() <= kChunk) {
        return field(coords);
    }
    Mat<double> out;
    for (std::size_t start = 0; start < coords.size(); start += kChunk) {
        const std::size_t stop = std::min(coords.size(), start + kChunk);
        const std::vector<Coord2> part(coords.begin() + static_cast<long>(start), coords.begin() + static_cast<long>(stop));
        const Mat<double> p = field(part);
        if (out.size() == 0) {
            out.resize(static_cast<Eigen::Index>(coords.size()), p.cols());
        }
        out.middleRows(static_cast<Eigen::Index>(start), p.rows()) = p;
    }
    return out;
}

inline Coord2 pixel_center(int r, int c, int h, int w)
{
    return {geometry::pixel_to_normalized(r, h), geometry::pixel_to_normalized(c, w)};
}

} // namespace detail

/// Evaluates the field at every target pixel center and takes the argmax.
inline Reconstruction decode_grid(const ProbabilityField& field, int height, int width)
{
    std::vector<Coord2> coords;
    coords.reserve(static_cast<std::size_t>(height) * width);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            coords.push_back(detail::pixel_center(r, c, height, width));
        }
    }
    const Mat<double> probs = detail::evaluate(field, coords);
    Reconstruction out;
    out.mask = LabelMask(height, width, 0);
    for (std::size_t i = 0; i < coords.size(); ++i) {
        out.mask.values[i] = static_cast<std::uint8_t>(argmax_row(probs, static_cast<Eigen::Index>(i)));
    }
    out.evaluations = static_cast<long>(coords.size());
    return out;
}

/// Coarse-to-fine reconstruction.
///
/// Lattice pixels every `initial_stride` (plus the last row/column) are
/// evaluated first. A cell between lattice pixels is refined when its corner
/// labels disagree or a corner's winning probability lies within `margin` of
/// `threshold`; refined cells are split at their midpoints and the new corners
/// evaluated, level by level, until cells have no interior pixels. Cells left
/// unrefined are filled with their common corner label. Evaluated pixels are
/// never overwritten by fills.
inline Reconstruction decode_mise(const ProbabilityField& field, const ReconstructionSpec& spec)
{
    spec.validate();
    const int h = spec.target_height;
    const int w = spec.target_width;
    Reconstruction out;
    out.mask = LabelMask(h, w, 0);
    std::vector<std::uint8_t> evaluated(static_cast<std::size_t>(h) * w, 0);
    std::vector<double> confidence(evaluated.size(), 0.0);

    auto run = [&](std::vector<int>& pending) {
        std::sort(pending.begin(), pending.end());
        pending.erase(std::unique(pending.begin(), pending.end()), pending.end());
        std::vector<Coord2> coords;
        std::vector<int> flat;
        for (int idx : pending) {
            if (!evaluated[static_cast<std::size_t>(idx)]) {
                coords.push_back(detail::pixel_center(idx / w, idx % w, h, w));
                flat.push_back(idx);
            }
        }
        pending.clear();
        if (coords.empty()) {
            return;
        }
        const Mat<double> probs = detail::evaluate(field, coords);
        for (std::size_t i = 0; i < flat.size(); ++i) {
            const auto row = static_cast<Eigen::Index>(i);
            const int label = argmax_row(probs, row);
            const auto k = static_cast<std::size_t>(flat[i]);
            out.mask.values[k] = static_cast<std::uint8_t>(label);
            confidence[k] = probs(row, label);
            evaluated[k] = 1;
        }
        out.evaluations += static_cast<long>(flat.size());
    };

    auto lattice = [](int n, int stride) {
        std::vector<int> pts;
        for (int v = 0; v < n - 1; v += stride) {
            pts.push_back(v);
        }
        pts.push_back(n - 1);
        return pts;
    };

    struct Cell {
        int r0, c0, r1, c1;
    };
    const auto rows = lattice(h, spec.initial_stride);
    const auto cols = lattice(w, spec.initial_stride);
    std::vector<int> pending;
    for (int r : rows) {
        for (int c : cols) {
            pending.push_back(r * w + c);
        }
    }
    run(pending);

    std::vector<Cell> cells;
    for (std::size_t i = 0; i + 1 < rows.size() || (i == 0 && rows.size() == 1); ++i) {
        for (std::size_t j = 0; j + 1 < cols.size() || (j == 0 && cols.size() == 1); ++j) {
            const int r1 = rows.size() == 1 ? rows[0] : rows[i + 1];
            const int c1 = cols.size() == 1 ? cols[0] : cols[j + 1];
            cells.push_back({rows[i], cols[j], r1, c1});
        }
    }

    auto at = [&](int r, int c) { return static_cast<std::size_t>(r) * w + c; };
    while (!cells.empty()) {
        std::vector<Cell> next;
        for (const auto& cell : cells) {
            if (cell.r1 - cell.r0 <= 1 && cell.c1 - cell.c0 <= 1) {
                continue; // every pixel is a corner
            }
            const std::array<std::size_t, 4> corners{at(cell.r0, cell.c0), at(cell.r0, cell.c1), at(cell.r1, cell.c0),
                                                     at(cell.r1, cell.c1)};
            bool refine = false;
            for (auto k : corners) {
                refine = refine || out.mask.values[k] != out.mask.values[corners[0]] ||
                         std::abs(confidence[k] - spec.threshold) < spec.margin;
            }
            if (!refine) {
                const auto label = out.mask.values[corners[0]];
                for (int r = cell.r0; r <= cell.r1; ++r) {
                    for (int c = cell.c0; c <= cell.c1; ++c) {
                        if (!evaluated[at(r, c)]) {
                            out.mask.values[at(r, c)] = label;
                        }
                    }
                }
                continue;
            }
            ++out.refined_cells;
            const int rm = (cell.r0 + cell.r1) / 2;
            const int cm = (cell.c0 + cell.c1) / 2;
            std::vector<int> rs{cell.r0};
            if (rm != cell.r0 && rm != cell.r1) {
                rs.push_back(rm);
            }
            rs.push_back(cell.r1);
            std::vector<int> cs{cell.c0};
            if (cm != cell.c0 && cm != cell.c1) {
                cs.push_back(cm);
            }
            cs.push_back(cell.c1);
            for (std::size_t a = 0; a + 1 < rs.size() || (a == 0 && rs.size() == 1); ++a) {
                for (std::size_t b = 0; b + 1 < cs.size(); ++b) {
                    const int r1 = rs.size() == 1 ? rs[0] : rs[a + 1];
                    next.push_back({rs[a], cs[b], r1, cs[b + 1]});
                }
            }
            for (int r : rs) {
                for (int c : cs) {
                    pending.push_back(r * w + c);
                }
            }
        }
        run(pending);
        cells = std::move(next);
    }
    // Lattices with a single row or column leave nothing unvisited; any pixel
    // still unevaluated was filled by its enclosing cell.
    return out;
}

inline Reconstruction reconstruct(const ProbabilityField& field, const ReconstructionSpec& spec)
{
    spec.validate();
    return spec.refinement == Refinement::Dense ? decode_grid(field, spec.target_height, spec.target_width)
                                                : decode_mise(field, spec);
}

inline double agreement(const LabelMask& a, const LabelMask& b)
{
    if (a.height != b.height || a.width != b.width) {
        throw ValidationError("agreement needs equal mask shapes");
    }
    if (a.empty()) {
        return 1.0;
    }
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        same += a.values[i] == b.values[i] ? 1 : 0;
    }
    return static_cast<double>(same) / static_cast<double>(a.size());
}

// ---------------------------------------------------------------------------
// Metrics

struct DiceResult {
    std::map<int, double> per_class; // foreground classes present in either mask
    double foreground_mean = 1.0;    // 1.0 when no foreground class is present anywhere
};

/// Set Dice per foreground class; classes absent from both masks are skipped,
/// classes absent from exactly one score 0.
inline DiceResult dice_metric(const LabelMask& pred, const LabelMask& truth, int num_classes)
{
    if (pred.height != truth.height || pred.width != truth.width) {
        throw ValidationError("dice_metric: prediction is " + std::to_string(pred.height) + "x" +
                              std::to_string(pred.width) + ", truth is " + std::to_string(truth.height) + "x" +
                              std::to_string(truth.width));
    }
    std::vector<long> inter(static_cast<std::size_t>(num_classes), 0);
    std::vector<long> a(inter.size(), 0);
    std::vector<long> b(inter.size(), 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const int p = pred.values[i];
        const int t = truth.values[i];
        if (p >= num_classes || t >= num_classes) {
            throw ValidationError("dice_metric: label outside [0, " + std::to_string(num_classes) + ")");
        }
        ++a[static_cast<std::size_t>(p)];
        ++b[static_cast<std::size_t>(t)];
        if (p == t) {
            ++inter[static_cast<std::size_t>(p)];
        }
    }
    DiceResult r;
    double sum = 0.0;
    for (int c = 1; c < num_classes; ++c) {
        const auto k = static_cast<std::size_t>(c);
        if (a[k] + b[k] == 0) {
            continue;
        }
        const double d = 2.0 * static_cast<double>(inter[k]) / static_cast<double>(a[k] + b[k]);
        r.per_class[c] = d;
        sum += d;
    }
    if (!r.per_class.empty()) {
        r.foreground_mean = sum / static_cast<double>(r.per_class.size());
    }
    return r;
}

// ---------------------------------------------------------------------------
// Raster resizing baselines (half-pixel aligned)

inline LabelMask resize_nearest(const LabelMask& src, int height, int width)
{
    LabelMask out(height, width, 0);
    for (int r = 0; r < height; ++r) {
        const int sr = std::min(src.height - 1, static_cast<int>(std::floor((r + 0.5) * src.height / height)));
        for (int c = 0; c < width; ++c) {
            const int sc = std::min(src.width - 1, static_cast<int>(std::floor((c + 0.5) * src.width / width)));
            out(r, c) = src(sr, sc);
        }
    }
    return out;
}

/// Bilinear interpolation of each class indicator, then argmax (lowest index on ties).
inline LabelMask resize_bilinear_labels(const LabelMask& src, int height, int width, int num_classes)
{
    LabelMask out(height, width, 0);
    auto axis = [](int dst_i, int dst_n, int src_n, int& i0, int& i1, double& t) {
        double s = (dst_i + 0.5) * src_n / dst_n - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(src_n - 1));
        i0 = static_cast<int>(std::floor(s));
        i1 = std::min(src_n - 1, i0 + 1);
        t = s - i0;
    };
    std::vector<double> score(static_cast<std::size_t>(num_classes));
    for (int r = 0; r < height; ++r) {
        int r0, r1;
        double tr;
        axis(r, height, src.height, r0, r1, tr);
        for (int c = 0; c < width; ++c) {
            int c0, c1;
            double tc;
            axis(c, width, src.width, c0, c1, tc);
            std::fill(score.begin(), score.end(), 0.0);
            score[src(r0, c0)] += (1 - tr) * (1 - tc);
            score[src(r0, c1)] += (1 - tr) * tc;
            score[src(r1, c0)] += tr * (1 - tc);
            score[src(r1, c1)] += tr * tc;
            int best = 0;
            for (int k = 1; k < num_classes; ++k) {
                if (score[static_cast<std::size_t>(k)] > score[static_cast<std::size_t>(best)]) {
                    best = k;
                }
            }
            out(r, c) = static_cast<std::uint8_t>(best);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Predictors

/// Binds an input image to a probability field.
class Predictor {
public:
    virtual ~Predictor() = default;
    virtual ProbabilityField bind(const data::Sample& sample) const = 0;
    virtual int num_classes() const = 0;
    virtual std::string id() const = 0;
};

/// D^P of a trained model; the image is encoded once per bind.
template <typename T>
class ModelPredictor : public Predictor {
public:
    explicit ModelPredictor(std::shared_ptr<const Model<T>> model, std::string id = "")
        : model_(std::move(model)), id_(std::move(id))
    {
    }

    ProbabilityField bind(const data::Sample& sample) const override
    {
        auto enc = std::make_shared<encoder::Encoding<T>>(model_->encode(model_->prepare_image(sample.image)));
        auto model = model_;
        return [model, enc](const std::vector<Coord2>& coords) -> Mat<double> {
            return model->decode_patch_at(*enc, coords).template cast<double>();
        };
    }

    int num_classes() const override { return model_->num_classes(); }
    std::string id() const override { return id_; }
    const Model<T>& model() const { return *model_; }

private:
    std::shared_ptr<const Model<T>> model_;
    std::string id_;
};

/// One-hot probabilities from the sample's generating shapes: a perfect
/// predictor, used as an evaluation stub.
class ShapeOracle : public Predictor {
public:
    explicit ShapeOracle(int num_classes) : num_classes_(num_classes) {}

    ProbabilityField bind(const data::Sample& sample) const override
    {
        if (sample.shapes.empty()) {
            throw ValidationError("oracle predictor needs generating shapes for image " + std::to_string(sample.id));
        }
        auto shapes = sample.shapes;
        const int classes = num_classes_;
        return [shapes, classes](const std::vector<Coord2>& coords) {
            Mat<double> p = Mat<double>::Zero(static_cast<Eigen::Index>(coords.size()), classes);
            for (std::size_t i = 0; i < coords.size(); ++i) {
                int label = 0;
                for (const auto& s : shapes) {
                    if (s.contains(coords[i][0], coords[i][1])) {
                        label = s.label;
                    }
                }
                p(static_cast<Eigen::Index>(i), label) = 1.0;
            }
            return p;
        };
    }

    int num_classes() const override { return num_classes_; }
    std::string id() const override { return "oracle"; }

private:
    int num_classes_;
};

/// Loads a checkpoint stem; metadata {"kind": "oracle"} yields the shape oracle.
inline std::unique_ptr<Predictor> load_predictor(const std::filesystem::path& stem, nlohmann::json* metadata = nullptr)
{
    auto meta = checkpoint::load_metadata(stem);
    if (metadata) {
        *metadata = meta;
    }
    if (meta.value("kind", std::string{"model"}) == "oracle") {
        return std::make_unique<ShapeOracle>(meta.value("num_classes", 2));
    }
    auto model = std::make_shared<const Model<float>>(checkpoint::load<float>(stem));
    return std::make_unique<ModelPredictor<float>>(model, meta.value("checkpoint_id", std::string{}));
}

/// Ground truth at an arbitrary resolution: re-rasterized shapes when known,
/// else the stored mask (which must already match).
inline LabelMask truth_at(const data::Sample& sample, int height, int width)
{
    if (sample.mask.height == height && sample.mask.width == width) {
        return sample.mask;
    }
    if (sample.shapes.empty()) {
        throw ValidationError("no generating shapes to rasterize image " + std::to_string(sample.id) + " at " +
                              std::to_string(height) + "x" + std::to_string(width));
    }
    return data::render_mask(sample.shapes, height, width);
}

struct ImageScore {
    int id = 0;
    DiceResult dice;
    long evaluations = 0;
};

/// Reconstructs every sample at spec's target size and scores it against the
/// ground truth at that size.
inline std::vector<ImageScore> evaluate(const Predictor& predictor, const std::vector<data::Sample>& samples,
                                        const ReconstructionSpec& spec)
{
    std::vector<ImageScore> out;
    for (const auto& s : samples) {
        const auto rec = reconstruct(predictor.bind(s), spec);
        const auto truth = truth_at(s, spec.target_height, spec.target_width);
        out.push_back({s.id, dice_metric(rec.mask, truth, predictor.num_classes()), rec.evaluations});
    }
    return out;
}

inline double mean_dice(const std::vector<ImageScore>& scores)
{
    if (scores.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    for (const auto& s : scores) {
        sum += s.dice.foreground_mean;
    }
    return sum / static_cast<double>(scores.size());
}

} // namespace swipe::inference

#endif
