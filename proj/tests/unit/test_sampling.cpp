#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include <swipe/sampling.hpp>

using namespace swipe;
using namespace swipe::sampling;

namespace {

LabelMask disk_mask(int size, double cr, double cc, double radius, int label = 1)
{
    LabelMask m(size, size, 0);
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) {
            if (std::hypot(r - cr, c - cc) <= radius) {
                m(r, c) = static_cast<std::uint8_t>(label);
            }
        }
    }
    return m;
}

// O(N^2) distance: every pixel against every boundary pixel.
Raster<double> brute_sq_distance(const Raster<std::uint8_t>& features)
{
    Raster<double> d(features.height, features.width, std::numeric_limits<double>::infinity());
    for (int r = 0; r < features.height; ++r) {
        for (int c = 0; c < features.width; ++c) {
            for (int fr = 0; fr < features.height; ++fr) {
                for (int fc = 0; fc < features.width; ++fc) {
                    if (features(fr, fc)) {
                        const double dr = r - fr;
                        const double dc = c - fc;
                        d(r, c) = std::min(d(r, c), dr * dr + dc * dc);
                    }
                }
            }
        }
    }
    return d;
}

std::size_t count(const Raster<std::uint8_t>& r)
{
    return static_cast<std::size_t>(std::count_if(r.values.begin(), r.values.end(), [](auto v) { return v != 0; }));
}

int label_at(const LabelMask& m, const geometry::Coord2& p)
{
    const auto px = geometry::normalized_to_pixel<2>(p, {m.height, m.width});
    return m(px[0], px[1]);
}

} // namespace

TEST(DistanceTransform, MatchesBruteForce)
{
    std::mt19937 rng(3);
    std::bernoulli_distribution on(0.04);
    for (int trial = 0; trial < 20; ++trial) {
        const int h = 5 + trial % 13;
        const int w = 7 + (trial * 5) % 11;
        Raster<std::uint8_t> f(h, w, 0);
        for (auto& v : f.values) {
            v = on(rng) ? 1 : 0;
        }
        f(trial % h, (trial * 3) % w) = 1;
        const auto fast = squared_distance_transform(f);
        const auto slow = brute_sq_distance(f);
        for (std::size_t i = 0; i < f.size(); ++i) {
            ASSERT_DOUBLE_EQ(fast.values[i], slow.values[i]);
        }
    }
}

TEST(BoundaryBand, RadiusZeroIsBoundary)
{
    const auto m = disk_mask(40, 19.5, 19.5, 12.0);
    const auto band = boundary_band(m, 1, 0.0);
    EXPECT_FALSE(band.class_absent);
    EXPECT_EQ(band.band, class_boundary(m, 1));
    EXPECT_GT(count(band.band), 0u);
}

TEST(BoundaryBand, FullImageGivesBorderFrame)
{
    const LabelMask m(40, 30, 1);
    const auto band = boundary_band(m, 1, 10.0);
    for (int r = 0; r < m.height; ++r) {
        for (int c = 0; c < m.width; ++c) {
            // the region edge is the image border: a frame exactly 10 pixels wide
            const int d = std::min({r, c, m.height - 1 - r, m.width - 1 - c});
            ASSERT_EQ(band.band(r, c) != 0, d < 10) << r << "," << c;
        }
    }
}

TEST(BoundaryBand, DiskAnnulusArea)
{
    const auto m = disk_mask(96, 47.5, 47.5, 30.0);
    const auto band = boundary_band(m, 1, 10.0);
    const double expected = std::numbers::pi * (30.0 * 30.0 - 20.0 * 20.0);
    const double area = static_cast<double>(count(band.band));
    EXPECT_NEAR(area / expected, 1.0, 0.03) << "area " << area;

    // brute force: class pixels within 10 of the region edge, half a pixel
    // beyond the boundary pixel centers
    const auto d2 = brute_sq_distance(class_boundary(m, 1));
    std::size_t brute = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        brute += (m.values[i] == 1 && std::sqrt(d2.values[i]) + 0.5 <= 10.0) ? 1 : 0;
    }
    EXPECT_EQ(count(band.band), brute);
}

TEST(BoundaryBand, AbsentClassFlagged)
{
    const LabelMask m(10, 10, 0);
    const auto band = boundary_band(m, 1, 3.0);
    EXPECT_TRUE(band.class_absent);
    EXPECT_EQ(count(band.band), 0u);
}

TEST(LatinHypercube, Strata)
{
    std::mt19937_64 rng(1);
    const auto a = latin_hypercube(4, 1, rng);
    std::set<int> bins;
    for (int i = 0; i < 4; ++i) {
        bins.insert(static_cast<int>(std::floor(a(i, 0) * 4)));
    }
    EXPECT_EQ(bins, (std::set<int>{0, 1, 2, 3}));

    for (int trial = 0; trial < 20; ++trial) {
        const auto p = latin_hypercube(100, 2, rng);
        for (int d = 0; d < 2; ++d) {
            std::vector<int> hist(100, 0);
            for (int i = 0; i < 100; ++i) {
                ASSERT_GE(p(i, d), 0.0);
                ASSERT_LT(p(i, d), 1.0);
                ++hist[static_cast<std::size_t>(std::floor(p(i, d) * 100))];
            }
            ASSERT_TRUE(std::all_of(hist.begin(), hist.end(), [](int h) { return h == 1; }));
        }
    }

    const auto one = latin_hypercube(1, 3, rng);
    EXPECT_EQ(one.rows(), 1);
    for (int d = 0; d < 3; ++d) {
        EXPECT_GE(one(0, d), 0.0);
        EXPECT_LT(one(0, d), 1.0);
    }
    EXPECT_THROW(latin_hypercube(0, 1, rng), ConfigError);
}

TEST(SamplePoints, CountsLabelsAndBand)
{
    LabelMask m = disk_mask(96, 40, 40, 25, 1);
    const auto second = disk_mask(96, 75, 70, 12, 2);
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (second.values[i]) {
            m.values[i] = 2;
        }
    }
    SamplingConfig cfg;
    cfg.n_background = 400;
    cfg.n_foreground_per_class = 200;
    cfg.seed = 9;
    const auto set = sample_points(m, 3, cfg);
    EXPECT_EQ(set.samples.size(), 400u + 2u * 200u);
    EXPECT_EQ(set.report.present_classes, (std::vector<int>{1, 2}));

    std::vector<int> per_class(3, 0);
    std::vector<int> in_band(3, 0);
    const Raster<std::uint8_t> bands[3] = {{}, boundary_band(m, 1, 10.0).band, boundary_band(m, 2, 10.0).band};
    for (const auto& s : set.samples) {
        ASSERT_EQ(label_at(m, s.p_source), s.label);
        ASSERT_EQ(s.p_image, s.p_source);
        const auto oh = s.one_hot(3);
        ASSERT_EQ(std::count(oh.begin(), oh.end(), 1.0), 1);
        ++per_class[static_cast<std::size_t>(s.label)];
        if (s.label > 0) {
            const auto px = geometry::normalized_to_pixel<2>(s.p_source, {96, 96});
            in_band[static_cast<std::size_t>(s.label)] += bands[s.label](px[0], px[1]) ? 1 : 0;
        }
    }
    EXPECT_EQ(per_class[0], 400);
    EXPECT_EQ(per_class[1], 200);
    EXPECT_EQ(per_class[2], 200);
    // the band draw lands in the band; interior draws never do
    EXPECT_EQ(in_band[1], 100);
    EXPECT_EQ(in_band[2], 100);
}

TEST(SamplePoints, PaperScaleBandCount)
{
    const auto m = disk_mask(192, 95.5, 95.5, 60);
    SamplingConfig cfg;
    cfg.n_background = 4000;
    cfg.n_foreground_per_class = 2000;
    const auto set = sample_points(m, 2, cfg);
    const auto band = boundary_band(m, 1, 10.0).band;
    int hits = 0;
    for (const auto& s : set.samples) {
        if (s.label == 1) {
            const auto px = geometry::normalized_to_pixel<2>(s.p_source, {192, 192});
            hits += band(px[0], px[1]) ? 1 : 0;
        }
    }
    EXPECT_EQ(hits, 1000);
}

TEST(SamplePoints, Determinism)
{
    const auto m = disk_mask(64, 30, 30, 15);
    SamplingConfig cfg;
    cfg.n_background = 100;
    cfg.n_foreground_per_class = 80;
    cfg.seed = 4;
    const auto a = sample_points(m, 2, cfg).samples;
    const auto b = sample_points(m, 2, cfg).samples;
    EXPECT_EQ(a, b);
    cfg.seed = 5;
    const auto c = sample_points(m, 2, cfg).samples;
    std::multiset<std::pair<double, double>> ma, mc;
    for (const auto& s : a) {
        ma.insert({s.p_source[0], s.p_source[1]});
    }
    for (const auto& s : c) {
        mc.insert({s.p_source[0], s.p_source[1]});
    }
    EXPECT_NE(ma, mc);
}

TEST(SamplePoints, JitterStaysInPixel)
{
    const auto m = disk_mask(48, 20, 20, 10);
    SamplingConfig cfg;
    cfg.n_background = 200;
    cfg.n_foreground_per_class = 200;
    cfg.jitter = true;
    for (const auto& s : sample_points(m, 2, cfg).samples) {
        ASSERT_EQ(label_at(m, s.p_source), s.label);
    }
}

TEST(SamplePoints, AbsentClassSkippedEmptyMaskFails)
{
    const auto m = disk_mask(32, 15, 15, 6);
    SamplingConfig cfg;
    cfg.n_background = 10;
    cfg.n_foreground_per_class = 10;
    const auto set = sample_points(m, 3, cfg);
    EXPECT_EQ(set.report.skipped_classes, (std::vector<int>{2}));
    EXPECT_EQ(set.samples.size(), 20u);

    EXPECT_THROW(sample_points(LabelMask{}, 2, cfg), ValidationError);
    EXPECT_THROW(sample_points(LabelMask(8, 8, 0), 2, cfg), ValidationError);
    cfg.boundary_fraction = 1.5;
    EXPECT_THROW(sample_points(m, 2, cfg), ConfigError);
}

TEST(PointFile, RoundTripAndParseError)
{
    const auto dir = std::filesystem::temp_directory_path() / "swipe_point_file_test";
    std::filesystem::create_directories(dir);
    const auto m = disk_mask(32, 15, 15, 6);
    SamplingConfig cfg;
    cfg.n_background = 30;
    cfg.n_foreground_per_class = 30;
    cfg.jitter = true;
    const auto set = sample_points(m, 2, cfg);
    write_point_file(dir / "a.txt", set.samples);
    EXPECT_EQ(read_point_file(dir / "a.txt"), set.samples);

    {
        std::ofstream bad(dir / "b.txt");
        bad << "# header\n0.1 0.2 0.1 0.2 1\n0.3 oops 0.3 0.1 0\n";
    }
    try {
        read_point_file(dir / "b.txt");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
    }
    std::filesystem::remove_all(dir);
}
