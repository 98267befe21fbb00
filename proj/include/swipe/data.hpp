#ifndef SWIPE_DATA_HPP
#define SWIPE_DATA_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "geometry.hpp"
#include "raster.hpp"
#include "sampling.hpp"

namespace swipe::data {

// Synthetic shapes live in normalized image coordinates so the same shape can
// be rasterized at any resolution.

struct Harmonic {
    int order = 2;
    double amplitude = 0.0;
    double phase = 0.0;

    friend bool operator==(const Harmonic&, const Harmonic&) = default;
};

/// Ellipse with a smooth radial perturbation r(phi) = 1 + sum a_k cos(k phi + phase_k).
struct Shape {
    int label = 1;
    double center_row = 0.0;
    double center_col = 0.0;
    double radius_row = 0.3;
    double radius_col = 0.3;
    double angle = 0.0;
    std::vector<Harmonic> harmonics;

    /// Radial level: < 1 inside, > 1 outside.
    double level(double row, double col) const
    {
        const double dr = row - center_row;
        const double dc = col - center_col;
        const double cs = std::cos(angle);
        const double sn = std::sin(angle);
        const double u = (cs * dr + sn * dc) / radius_row;
        const double v = (-sn * dr + cs * dc) / radius_col;
        const double rho = std::hypot(u, v);
        const double phi = std::atan2(v, u);
        double boundary = 1.0;
        for (const auto& h : harmonics) {
            boundary += h.amplitude * std::cos(h.order * phi + h.phase);
        }
        return rho / boundary;
    }

    bool contains(double row, double col) const { return level(row, col) <= 1.0; }

    friend bool operator==(const Shape&, const Shape&) = default;
};

inline void to_json(nlohmann::json& j, const Harmonic& h)
{
    j = nlohmann::json::array({h.order, h.amplitude, h.phase});
}

inline void from_json(const nlohmann::json& j, Harmonic& h)
{
    j.at(0).get_to(h.order);
    j.at(1).get_to(h.amplitude);
    j.at(2).get_to(h.phase);
}

inline void to_json(nlohmann::json& j, const Shape& s)
{
    j = nlohmann::json{{"label", s.label},           {"center_row", s.center_row}, {"center_col", s.center_col},
                       {"radius_row", s.radius_row}, {"radius_col", s.radius_col}, {"angle", s.angle},
                       {"harmonics", s.harmonics}};
}

inline void from_json(const nlohmann::json& j, Shape& s)
{
    j.at("label").get_to(s.label);
    j.at("center_row").get_to(s.center_row);
    j.at("center_col").get_to(s.center_col);
    j.at("radius_row").get_to(s.radius_row);
    j.at("radius_col").get_to(s.radius_col);
    j.at("angle").get_to(s.angle);
    j.at("harmonics").get_to(s.harmonics);
}

/// Label raster at pixel centers; later shapes paint over earlier ones.
inline LabelMask render_mask(const std::vector<Shape>& shapes, int height, int width)
{
    LabelMask mask(height, width, 0);
    for (int r = 0; r < height; ++r) {
        const double pr = geometry::pixel_to_normalized(r, height);
        for (int c = 0; c < width; ++c) {
            const double pc = geometry::pixel_to_normalized(c, width);
            for (const auto& s : shapes) {
                if (s.contains(pr, pc)) {
                    mask(r, c) = static_cast<std::uint8_t>(s.label);
                }
            }
        }
    }
    return mask;
}

struct CorpusSpec {
    int n_images = 200;
    int size = 96;
    int classes = 1; // foreground classes
    double noise = 0.05;
    std::uint64_t seed = 0;
    sampling::SamplingConfig sampling{};
    bool write_points = true;

    int num_classes() const { return classes + 1; }

    void validate() const
    {
        if (n_images < 3) {
            throw ConfigError("n_images must be >= 3 so every split is non-empty");
        }
        if (size < 16) {
            throw ConfigError("size must be >= 16");
        }
        if (classes < 1 || classes > 2) {
            throw ConfigError("classes must be 1 or 2");
        }
        if (noise < 0.0) {
            throw ConfigError("noise must be >= 0");
        }
        sampling.validate();
    }
};

inline void to_json(nlohmann::json& j, const CorpusSpec& s)
{
    j = nlohmann::json{{"n_images", s.n_images}, {"size", s.size},     {"classes", s.classes},
                       {"noise", s.noise},       {"seed", s.seed},     {"sampling", s.sampling},
                       {"write_points", s.write_points}};
}

inline constexpr int kMinComponentArea = 64;

struct SyntheticImage {
    GrayImage image;
    LabelMask mask;
    std::vector<Shape> shapes;
};

namespace detail {

template <typename Rng>
Shape random_shape(int label, Rng& rng)
{
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Shape s;
    s.label = label;
    const double base = 0.20 + 0.18 * u(rng);
    const double aspect = 0.65 + 0.35 * u(rng);
    s.radius_row = base;
    s.radius_col = base * aspect;
    s.angle = std::numbers::pi * u(rng);
    const double reach = 1.0 - 1.25 * base;
    s.center_row = (2.0 * u(rng) - 1.0) * reach;
    s.center_col = (2.0 * u(rng) - 1.0) * reach;
    const int count = 1 + static_cast<int>(u(rng) * 2.0);
    for (int k = 0; k < count; ++k) {
        Harmonic h;
        h.order = 2 + static_cast<int>(u(rng) * 3.0);
        h.amplitude = 0.05 + 0.12 * u(rng);
        h.phase = 2.0 * std::numbers::pi * u(rng);
        s.harmonics.push_back(h);
    }
    return s;
}

// Fraction of a pixel covered by each label, 4x4 supersampled.
inline std::vector<double> coverage(const std::vector<Shape>& shapes, int num_classes, int r, int c, int size)
{
    std::vector<double> cov(static_cast<std::size_t>(num_classes), 0.0);
    constexpr int kSub = 4;
    for (int i = 0; i < kSub; ++i) {
        for (int j = 0; j < kSub; ++j) {
            const double pr = -1.0 + 2.0 * (r + (i + 0.5) / kSub) / size;
            const double pc = -1.0 + 2.0 * (c + (j + 0.5) / kSub) / size;
            int label = 0;
            for (const auto& s : shapes) {
                if (s.contains(pr, pc)) {
                    label = s.label;
                }
            }
            cov[static_cast<std::size_t>(label)] += 1.0 / (kSub * kSub);
        }
    }
    return cov;
}

} // namespace detail

/// One synthetic image; regenerates until every shape keeps a visible area of
/// at least kMinComponentArea pixels.
inline SyntheticImage generate_image(const CorpusSpec& spec, int index)
{
    std::mt19937_64 rng(derive_seed(spec.seed, "image", static_cast<std::uint64_t>(index)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int n = spec.size;

    SyntheticImage out;
    for (int attempt = 0;; ++attempt) {
        if (attempt > 1000) {
            throw Error("could not place shapes with the minimum area");
        }
        out.shapes.clear();
        const int extra = u(rng) < 0.3 ? 1 : 0;
        out.shapes.push_back(detail::random_shape(1, rng));
        for (int k = 0; k < extra; ++k) {
            out.shapes.push_back(detail::random_shape(1, rng));
        }
        if (spec.classes == 2) {
            out.shapes.push_back(detail::random_shape(2, rng));
        }
        out.mask = render_mask(out.shapes, n, n);
        bool ok = true;
        for (std::size_t s = 0; s < out.shapes.size() && ok; ++s) {
            int area = 0;
            for (int r = 0; r < n; ++r) {
                for (int c = 0; c < n; ++c) {
                    const double pr = geometry::pixel_to_normalized(r, n);
                    const double pc = geometry::pixel_to_normalized(c, n);
                    if (!out.shapes[s].contains(pr, pc)) {
                        continue;
                    }
                    bool covered = false;
                    for (std::size_t later = s + 1; later < out.shapes.size(); ++later) {
                        covered = covered || (out.shapes[later].contains(pr, pc) &&
                                              out.shapes[later].label != out.shapes[s].label);
                    }
                    area += covered ? 0 : 1;
                }
            }
            ok = area >= kMinComponentArea;
        }
        if (ok) {
            break;
        }
    }

    // Intensity: textured background, brighter (class 1) or darker (class 2)
    // textured foreground, anti-aliased edges, additive Gaussian noise.
    const double bg = 0.30 + 0.15 * u(rng);
    const double contrast = 0.20 + 0.15 * u(rng);
    const std::vector<double> level{bg, bg + contrast, bg - 0.6 * contrast};
    const double f1 = 2.0 + 4.0 * u(rng);
    const double f2 = 2.0 + 4.0 * u(rng);
    const double ph1 = 2.0 * std::numbers::pi * u(rng);
    const double ph2 = 2.0 * std::numbers::pi * u(rng);
    const double ft = 8.0 + 6.0 * u(rng);
    out.image = GrayImage(n, n, 0.0f);
    for (int r = 0; r < n; ++r) {
        const double pr = geometry::pixel_to_normalized(r, n);
        for (int c = 0; c < n; ++c) {
            const double pc = geometry::pixel_to_normalized(c, n);
            const auto cov = detail::coverage(out.shapes, spec.num_classes(), r, c, n);
            const double bg_texture = 0.06 * std::sin(f1 * pr + ph1) * std::sin(f2 * pc + ph2);
            const double fg_texture = 0.04 * std::sin(ft * (pr + pc));
            double v = cov[0] * (level[0] + bg_texture);
            for (std::size_t k = 1; k < cov.size(); ++k) {
                v += cov[k] * (level[k] + fg_texture);
            }
            v += spec.noise * gauss(rng);
            out.image(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manifest

struct ImageEntry {
    int id = 0;
    std::string image;
    std::string mask;
    std::string points;
    std::vector<Shape> shapes;

    friend bool operator==(const ImageEntry&, const ImageEntry&) = default;
};

inline const std::vector<std::string>& split_names()
{
    static const std::vector<std::string> names{"train", "val", "test"};
    return names;
}

struct DatasetManifest {
    std::uint64_t corpus_seed = 0;
    int size = 96;
    int num_classes = 2; // including background
    std::vector<ImageEntry> images;
    std::map<std::string, std::vector<int>> splits;

    const ImageEntry& entry(int id) const
    {
        for (const auto& e : images) {
            if (e.id == id) {
                return e;
            }
        }
        throw ValidationError("image id " + std::to_string(id) + " not in manifest");
    }

    const std::vector<int>& split(const std::string& name) const
    {
        auto it = splits.find(name);
        if (it == splits.end()) {
            throw ValidationError("manifest has no '" + name + "' split");
        }
        return it->second;
    }

    friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

inline void to_json(nlohmann::json& j, const ImageEntry& e)
{
    j = nlohmann::json{{"id", e.id}, {"image", e.image}, {"mask", e.mask}, {"points", e.points}, {"shapes", e.shapes}};
}

inline void from_json(const nlohmann::json& j, ImageEntry& e)
{
    j.at("id").get_to(e.id);
    j.at("image").get_to(e.image);
    j.at("mask").get_to(e.mask);
    e.points = j.value("points", std::string{});
    if (j.contains("shapes")) {
        j.at("shapes").get_to(e.shapes);
    }
}

inline void to_json(nlohmann::json& j, const DatasetManifest& m)
{
    j = nlohmann::json{{"corpus_seed", m.corpus_seed}, {"size", m.size},     {"num_classes", m.num_classes},
                       {"images", m.images},           {"splits", m.splits}};
}

inline void from_json(const nlohmann::json& j, DatasetManifest& m)
{
    j.at("corpus_seed").get_to(m.corpus_seed);
    j.at("size").get_to(m.size);
    j.at("num_classes").get_to(m.num_classes);
    j.at("images").get_to(m.images);
    j.at("splits").get_to(m.splits);
}

/// 60:20:20 split sizes, val and test rounded to nearest.
inline std::array<int, 3> split_sizes(int n)
{
    const int val = static_cast<int>(std::lround(0.2 * n));
    const int test = val;
    return {n - val - test, val, test};
}

/// Seeded permutation of the ids, cut 60:20:20. Each split is stored sorted.
inline std::map<std::string, std::vector<int>> assign_splits(std::vector<int> ids, std::uint64_t seed)
{
    std::sort(ids.begin(), ids.end());
    std::mt19937_64 rng(derive_seed(seed, "splits"));
    std::shuffle(ids.begin(), ids.end(), rng);
    const auto sizes = split_sizes(static_cast<int>(ids.size()));
    std::map<std::string, std::vector<int>> splits;
    auto it = ids.begin();
    for (std::size_t s = 0; s < 3; ++s) {
        std::vector<int> part(it, it + sizes[s]);
        std::sort(part.begin(), part.end());
        splits[split_names()[s]] = part;
        it += sizes[s];
    }
    return splits;
}

/// Structural checks that need no file system access.
inline void validate_splits(const DatasetManifest& m)
{
    std::set<int> ids;
    for (const auto& e : m.images) {
        if (!ids.insert(e.id).second) {
            throw ValidationError("duplicate image id " + std::to_string(e.id));
        }
    }
    std::map<int, std::string> owner;
    for (const auto& name : split_names()) {
        auto it = m.splits.find(name);
        if (it == m.splits.end() || it->second.empty()) {
            throw ValidationError("split '" + name + "' is empty");
        }
        for (int id : it->second) {
            if (!ids.count(id)) {
                throw ValidationError("split '" + name + "' references unknown image id " + std::to_string(id));
            }
            auto [pos, inserted] = owner.emplace(id, name);
            if (!inserted) {
                throw ValidationError("image id " + std::to_string(id) + " appears in both '" + pos->second +
                                      "' and '" + name + "' splits");
            }
        }
    }
    for (const auto& [name, members] : m.splits) {
        if (std::find(split_names().begin(), split_names().end(), name) == split_names().end()) {
            throw ValidationError("unknown split '" + name + "'");
        }
    }
    if (owner.size() != ids.size()) {
        throw ValidationError(std::to_string(ids.size() - owner.size()) + " images are not assigned to any split");
    }
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m)
{
    std::ofstream out(path);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    out << nlohmann::json(m).dump(1) << '\n';
}

namespace detail {

inline std::string line_context(const std::string& text, std::size_t byte)
{
    byte = std::min(byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<long>(byte), '\n');
    auto start = text.rfind('\n', byte == 0 ? 0 : byte - 1);
    start = start == std::string::npos ? 0 : start + 1;
    auto stop = text.find('\n', start);
    const std::string snippet = text.substr(start, stop == std::string::npos ? std::string::npos : stop - start);
    return "line " + std::to_string(line) + ": " + snippet.substr(0, 80);
}

} // namespace detail

/// Parses and validates a manifest. Relative paths resolve against the
/// manifest's directory; every missing file is reported at once.
inline DatasetManifest load_manifest(const std::filesystem::path& path, bool check_files = true)
{
    std::ifstream in(path);
    if (!in) {
        throw ValidationError("manifest not found: " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    DatasetManifest m;
    try {
        m = nlohmann::json::parse(text).get<DatasetManifest>();
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": " + detail::line_context(text, e.byte == 0 ? 0 : e.byte - 1) + " (" +
                         e.what() + ")");
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": malformed manifest: " + e.what());
    }
    validate_splits(m);
    if (check_files) {
        const auto root = path.parent_path();
        std::vector<std::string> missing;
        for (const auto& e : m.images) {
            for (const auto* rel : {&e.image, &e.mask}) {
                if (!std::filesystem::exists(root / *rel)) {
                    missing.push_back(*rel);
                }
            }
        }
        if (!missing.empty()) {
            std::string msg = std::to_string(missing.size()) + " referenced files are missing:";
            for (const auto& p : missing) {
                msg += "\n  " + p;
            }
            throw ValidationError(msg);
        }
    }
    return m;
}

inline std::string numbered(int id, const char* ext)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d%s", id, ext);
    return buf;
}

/// Writes points/NNNN.txt for one image from its mask, with a derived seed.
inline sampling::PointSet sample_image_points(const LabelMask& mask, int num_classes, sampling::SamplingConfig cfg,
                                              std::uint64_t root_seed, int id)
{
    cfg.seed = derive_seed(root_seed, "points", static_cast<std::uint64_t>(id));
    return sampling::sample_points(mask, num_classes, cfg);
}

/// Generates images/, masks/, points/ and manifest.json under root.
inline DatasetManifest generate_corpus(const std::filesystem::path& root, const CorpusSpec& spec)
{
    spec.validate();
    namespace fs = std::filesystem;
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    if (spec.write_points) {
        fs::create_directories(root / "points");
    }
    DatasetManifest m;
    m.corpus_seed = spec.seed;
    m.size = spec.size;
    m.num_classes = spec.num_classes();
    std::vector<int> ids;
    for (int i = 0; i < spec.n_images; ++i) {
        const auto img = generate_image(spec, i);
        ImageEntry e;
        e.id = i;
        e.image = "images/" + numbered(i, ".png");
        e.mask = "masks/" + numbered(i, ".png");
        e.shapes = img.shapes;
        write_png_gray8(root / e.image, to_gray8(img.image));
        write_png_gray8(root / e.mask, img.mask);
        if (spec.write_points) {
            e.points = "points/" + numbered(i, ".txt");
            const auto points = sample_image_points(img.mask, spec.num_classes(), spec.sampling, spec.seed, i);
            sampling::write_point_file(root / e.points, points.samples);
        }
        m.images.push_back(e);
        ids.push_back(i);
    }
    m.splits = assign_splits(ids, spec.seed);
    save_manifest(root / "manifest.json", m);
    return m;
}

// ---------------------------------------------------------------------------
// In-memory dataset

struct Sample {
    int id = 0;
    GrayImage image;
    LabelMask mask;
    std::vector<sampling::OccupancySample> points;
    bool has_points = false;
    std::vector<Shape> shapes;
};

struct Dataset {
    std::filesystem::path root;
    DatasetManifest manifest;
    std::vector<std::string> warnings;

    static Dataset open(const std::filesystem::path& manifest_path)
    {
        Dataset d;
        d.manifest = load_manifest(manifest_path);
        d.root = manifest_path.parent_path();
        return d;
    }

    Sample load(int id)
    {
        const auto& e = manifest.entry(id);
        Sample s;
        s.id = id;
        s.image = to_unit_float(read_png_gray8(root / e.image));
        s.mask = read_png_gray8(root / e.mask);
        s.shapes = e.shapes;
        if (!e.points.empty() && std::filesystem::exists(root / e.points)) {
            s.points = sampling::read_point_file(root / e.points);
            s.has_points = true;
        }
        for (auto v : s.mask.values) {
            if (v >= manifest.num_classes) {
                throw ValidationError(e.mask + ": label " + std::to_string(v) + " >= class count");
            }
        }
        return s;
    }

    std::vector<Sample> load_split(const std::string& name)
    {
        std::vector<Sample> out;
        for (int id : manifest.split(name)) {
            out.push_back(load(id));
        }
        return out;
    }
};

} // namespace swipe::data

#endif
