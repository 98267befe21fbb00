#ifndef SWIPE_SAMPLING_HPP
#define SWIPE_SAMPLING_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "geometry.hpp"
#include "raster.hpp"

namespace swipe::sampling {

using geometry::Coord2;

/// One supervision point. The occupancy target is stored as its class id;
/// one_hot() expands it.
struct OccupancySample {
    Coord2 p_source{};
    Coord2 p_image{};
    int label = 0;

    std::vector<double> one_hot(int num_classes) const
    {
        std::vector<double> o(static_cast<std::size_t>(num_classes), 0.0);
        o.at(static_cast<std::size_t>(label)) = 1.0;
        return o;
    }

    friend bool operator==(const OccupancySample&, const OccupancySample&) = default;
};

struct SamplingConfig {
    int n_background = 1000;
    int n_foreground_per_class = 500;
    double boundary_fraction = 0.5;
    double boundary_band = 10.0;
    std::uint64_t seed = 0;
    bool jitter = false;

    void validate() const
    {
        if (n_background < 0 || n_foreground_per_class < 0) {
            throw ConfigError("sample counts must be >= 0");
        }
        if (!(boundary_fraction >= 0.0 && boundary_fraction <= 1.0)) {
            throw ConfigError("boundary_fraction must lie in [0, 1]");
        }
        if (boundary_band < 0.0) {
            throw ConfigError("boundary_band must be >= 0");
        }
    }
};

inline void to_json(nlohmann::json& j, const SamplingConfig& c)
{
    j = nlohmann::json{{"n_background", c.n_background},
                       {"n_foreground_per_class", c.n_foreground_per_class},
                       {"boundary_fraction", c.boundary_fraction},
                       {"boundary_band", c.boundary_band},
                       {"seed", c.seed},
                       {"jitter", c.jitter}};
}

inline void from_json(const nlohmann::json& j, SamplingConfig& c)
{
    j.at("n_background").get_to(c.n_background);
    j.at("n_foreground_per_class").get_to(c.n_foreground_per_class);
    j.at("boundary_fraction").get_to(c.boundary_fraction);
    j.at("boundary_band").get_to(c.boundary_band);
    j.at("seed").get_to(c.seed);
    c.jitter = j.value("jitter", false);
}

namespace detail {

// Felzenszwalb-Huttenlocher lower envelope of parabolas; exact 1D squared EDT.
inline void squared_edt_1d(const double* f, double* d, int n, std::vector<int>& v, std::vector<double>& z)
{
    constexpr double inf = std::numeric_limits<double>::infinity();
    v.assign(static_cast<std::size_t>(n), 0);
    z.assign(static_cast<std::size_t>(n) + 1, 0.0);
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == inf) {
            continue;
        }
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        double s = 0.0;
        while (true) {
            const int p = v[static_cast<std::size_t>(k)];
            s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
            if (s <= z[static_cast<std::size_t>(k)] && k > 0) {
                --k;
                continue;
            }
            break;
        }
        if (s <= z[static_cast<std::size_t>(k)]) {
            // only reachable with k == 0: the new parabola dominates everywhere
            v[0] = q;
            z[0] = -inf;
            z[1] = inf;
            continue;
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = s;
        z[static_cast<std::size_t>(k) + 1] = inf;
    }
    if (k < 0) {
        std::fill(d, d + n, inf);
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[static_cast<std::size_t>(j) + 1] < q) {
            ++j;
        }
        const int p = v[static_cast<std::size_t>(j)];
        d[q] = double(q - p) * (q - p) + f[p];
    }
}

} // namespace detail

/// Exact squared Euclidean distance from every pixel to the nearest set pixel
/// of `features`. Pixels are +inf when there are no features.
inline Raster<double> squared_distance_transform(const Raster<std::uint8_t>& features)
{
    constexpr double inf = std::numeric_limits<double>::infinity();
    const int h = features.height;
    const int w = features.width;
    Raster<double> out(h, w, inf);
    for (std::size_t i = 0; i < features.size(); ++i) {
        out.values[i] = features.values[i] ? 0.0 : inf;
    }
    std::vector<int> v;
    std::vector<double> z;
    std::vector<double> col_in(static_cast<std::size_t>(h));
    std::vector<double> col_out(static_cast<std::size_t>(h));
    for (int c = 0; c < w; ++c) {
        for (int r = 0; r < h; ++r) {
            col_in[static_cast<std::size_t>(r)] = out(r, c);
        }
        detail::squared_edt_1d(col_in.data(), col_out.data(), h, v, z);
        for (int r = 0; r < h; ++r) {
            out(r, c) = col_out[static_cast<std::size_t>(r)];
        }
    }
    std::vector<double> row_out(static_cast<std::size_t>(w));
    for (int r = 0; r < h; ++r) {
        detail::squared_edt_1d(&out(r, 0), row_out.data(), w, v, z);
        std::copy(row_out.begin(), row_out.end(), &out(r, 0));
    }
    return out;
}

/// Pixels of the class with a 4-neighbor outside the class or outside the image.
inline Raster<std::uint8_t> class_boundary(const LabelMask& mask, int class_id)
{
    Raster<std::uint8_t> out(mask.height, mask.width, 0);
    for (int r = 0; r < mask.height; ++r) {
        for (int c = 0; c < mask.width; ++c) {
            if (mask(r, c) != class_id) {
                continue;
            }
            const bool edge = r == 0 || c == 0 || r == mask.height - 1 || c == mask.width - 1 ||
                              mask(r - 1, c) != class_id || mask(r + 1, c) != class_id ||
                              mask(r, c - 1) != class_id || mask(r, c + 1) != class_id;
            out(r, c) = edge ? 1 : 0;
        }
    }
    return out;
}

struct BoundaryBand {
    Raster<std::uint8_t> band;
    bool class_absent = false;
};

/// Class pixels within `radius` of the class boundary. Distance is measured to
/// the region's edge, which lies half a pixel outside the centers of the
/// boundary pixels: boundary pixels are always in the band, any other class
/// pixel needs (EDT to the nearest boundary pixel) + 0.5 <= radius.
inline BoundaryBand boundary_band(const LabelMask& mask, int class_id, double radius)
{
    BoundaryBand result;
    result.band = Raster<std::uint8_t>(mask.height, mask.width, 0);
    const auto edge = class_boundary(mask, class_id);
    if (std::none_of(edge.values.begin(), edge.values.end(), [](std::uint8_t v) { return v != 0; })) {
        result.class_absent = true;
        return result;
    }
    const auto dist2 = squared_distance_transform(edge);
    const double reach = radius - 0.5;
    const double r2 = reach >= 0.0 ? reach * reach : -1.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const bool near = edge.values[i] != 0 || dist2.values[i] <= r2;
        result.band.values[i] = (mask.values[i] == class_id && near) ? 1 : 0;
    }
    return result;
}

/// n points in [0,1)^dims with exactly one point per stratum [k/n, (k+1)/n) on every axis.
/// Row i of the result is one point.
template <typename Rng>
Eigen::MatrixXd latin_hypercube(int n, int dims, Rng& rng)
{
    if (n < 1 || dims < 1) {
        throw ConfigError("latin_hypercube needs n >= 1 and dims >= 1");
    }
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Eigen::MatrixXd points(n, dims);
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int d = 0; d < dims; ++d) {
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        for (int i = 0; i < n; ++i) {
            double u = (perm[static_cast<std::size_t>(i)] + unit(rng)) / n;
            // guard against rounding up into the next stratum
            u = std::min(u, std::nextafter((perm[static_cast<std::size_t>(i)] + 1.0) / n, 0.0));
            points(i, d) = u;
        }
    }
    return points;
}

struct SamplingReport {
    std::vector<int> present_classes;
    std::vector<int> skipped_classes;
    std::vector<std::string> warnings;
};

inline void to_json(nlohmann::json& j, const SamplingReport& r)
{
    j = nlohmann::json{
        {"present_classes", r.present_classes}, {"skipped_classes", r.skipped_classes}, {"warnings", r.warnings}};
}

struct PointSet {
    std::vector<OccupancySample> samples;
    SamplingReport report;
};

namespace detail {

template <typename Rng>
void draw_from(const std::vector<int>& candidates, int count, int label, const LabelMask& mask, bool jitter,
               Rng& rng, std::vector<OccupancySample>& out)
{
    if (count <= 0 || candidates.empty()) {
        return;
    }
    const auto u = latin_hypercube(count, 1, rng);
    std::uniform_real_distribution<double> offset(-0.5, 0.5);
    const auto m = static_cast<double>(candidates.size());
    for (int i = 0; i < count; ++i) {
        const auto slot = std::min(static_cast<std::size_t>(u(i, 0) * m), candidates.size() - 1);
        const int flat = candidates[slot];
        const int row = flat / mask.width;
        const int col = flat % mask.width;
        double fr = row;
        double fc = col;
        if (jitter) {
            fr += offset(rng);
            fc += offset(rng);
        }
        OccupancySample s;
        s.p_source = {geometry::pixel_to_normalized(fr, mask.height), geometry::pixel_to_normalized(fc, mask.width)};
        s.p_image = s.p_source;
        s.label = label;
        out.push_back(s);
    }
}

} // namespace detail

/// Pre-samples supervision points for one mask.
///
/// Background points are drawn by LHS over all background pixels. Each present
/// foreground class gets n_foreground_per_class points: floor(fraction * n)
/// from its boundary band and the rest from the remaining class pixels. LHS
/// runs over the flattened index list of the eligible pixels, so every point
/// lands on an eligible pixel center.
inline PointSet sample_points(const LabelMask& mask, int num_classes, const SamplingConfig& config)
{
    config.validate();
    if (mask.empty()) {
        throw ValidationError("cannot sample points from an empty mask");
    }
    if (num_classes < 2) {
        throw ConfigError("num_classes must include background and at least one foreground class");
    }
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const int label = mask.values[i];
        if (label >= num_classes) {
            throw ValidationError("mask label " + std::to_string(label) + " >= class count " +
                                  std::to_string(num_classes));
        }
        by_class[static_cast<std::size_t>(label)].push_back(static_cast<int>(i));
    }

    PointSet result;
    for (int c = 1; c < num_classes; ++c) {
        if (by_class[static_cast<std::size_t>(c)].empty()) {
            result.report.skipped_classes.push_back(c);
        } else {
            result.report.present_classes.push_back(c);
        }
    }
    if (result.report.present_classes.empty()) {
        throw ValidationError("mask has no labeled foreground class");
    }

    std::mt19937_64 rng(config.seed);
    detail::draw_from(by_class[0], config.n_background, 0, mask, config.jitter, rng, result.samples);
    if (by_class[0].empty() && config.n_background > 0) {
        result.report.warnings.push_back("no background pixels; background samples skipped");
    }

    const int n = config.n_foreground_per_class;
    const int n_band = static_cast<int>(std::floor(config.boundary_fraction * n + 1e-9));
    for (int c : result.report.present_classes) {
        const auto band = boundary_band(mask, c, config.boundary_band);
        std::vector<int> in_band;
        std::vector<int> interior;
        for (int flat : by_class[static_cast<std::size_t>(c)]) {
            (band.band.values[static_cast<std::size_t>(flat)] ? in_band : interior).push_back(flat);
        }
        if (interior.empty()) {
            result.report.warnings.push_back("class " + std::to_string(c) +
                                             " lies entirely inside its boundary band; all samples drawn from it");
            detail::draw_from(in_band, n, c, mask, config.jitter, rng, result.samples);
            continue;
        }
        detail::draw_from(in_band, n_band, c, mask, config.jitter, rng, result.samples);
        detail::draw_from(interior, n - n_band, c, mask, config.jitter, rng, result.samples);
    }
    return result;
}

// Point file: one sample per line, "p_S components, p_I components, class id",
// whitespace separated, '#' starts a comment line.

inline void write_point_file(const std::filesystem::path& path, const std::vector<OccupancySample>& samples)
{
    std::ofstream out(path);
    if (!out) {
        throw Error("cannot open " + path.string() + " for writing");
    }
    out << "# ps_row ps_col pi_row pi_col class\n";
    out.precision(17);
    for (const auto& s : samples) {
        out << s.p_source[0] << ' ' << s.p_source[1] << ' ' << s.p_image[0] << ' ' << s.p_image[1] << ' ' << s.label
            << '\n';
    }
    if (!out) {
        throw Error("failed writing " + path.string());
    }
}

inline std::vector<OccupancySample> read_point_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open point file " + path.string());
    }
    std::vector<OccupancySample> samples;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        std::istringstream fields(line);
        OccupancySample s;
        if (!(fields >> s.p_source[0] >> s.p_source[1] >> s.p_image[0] >> s.p_image[1] >> s.label) || s.label < 0) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": malformed point record");
        }
        samples.push_back(s);
    }
    return samples;
}

inline void write_point_sidecar(const std::filesystem::path& path, const SamplingConfig& config,
                                const SamplingReport& report, std::size_t count)
{
    nlohmann::json j{{"config", config}, {"seed", config.seed}, {"report", report}, {"count", count},
                     {"columns", {"ps_row", "ps_col", "pi_row", "pi_col", "class"}}};
    std::ofstream out(path);
    out << j.dump(2) << '\n';
}

} // namespace swipe::sampling

#endif
