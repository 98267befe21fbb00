#include <map>
#include <random>
#include <set>

#include <Eigen/SVD>
#include <gtest/gtest.h>

#include <swipe/decoder.hpp>

using namespace swipe;
using namespace swipe::decoder;
using geometry::Connectivity;
using geometry::Coord2;
using geometry::PatchGrid2;
using geometry::PatchIndex2;

namespace {

sampling::OccupancySample sample_at(const Coord2& p, int label = 1)
{
    sampling::OccupancySample s;
    s.p_image = p;
    s.p_source = {p[0] * 0.5, p[1] * 0.5}; // a distinct source frame
    s.label = label;
    return s;
}

Mat<double> random_rows(int n, int d, unsigned seed)
{
    std::mt19937 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Mat<double> m(n, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = g(rng);
    }
    return m;
}

std::vector<PatchDecoderInput> random_inputs(const PatchGrid2& grid, int n, unsigned seed)
{
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<PatchDecoderInput> out;
    for (int i = 0; i < n; ++i) {
        out.push_back(make_patch_input(sample_at({u(rng), u(rng)}), grid));
    }
    return out;
}

double spectral_norm(const Mat<double>& m)
{
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    return svd.singularValues()(0);
}

} // namespace

TEST(DecoderConfig, PaperWidthsAndInputLayout)
{
    DecoderConfig cfg;
    EXPECT_EQ(cfg.patch_hidden, (std::vector<int>{256, 256, 256}));
    EXPECT_EQ(cfg.image_hidden, (std::vector<int>{256, 128}));
    // p_P, z_P, p_I, z_I
    EXPECT_EQ(cfg.patch_input_width(128), 2 + 128 + 2 + 128);
    cfg.source_coord = true;
    EXPECT_EQ(cfg.patch_input_width(128), 2 + 128 + 2 + 128 + 2);
    cfg.global_cond = false;
    cfg.source_coord = false;
    EXPECT_EQ(cfg.patch_input_width(16), 2 + 16);

    DecoderConfig bad;
    bad.num_classes = 1;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad.num_classes = 3;
    bad.head = HeadKind::Sigmoid;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(PatchDecoder, AssemblesInPinnedOrder)
{
    DecoderConfig cfg;
    cfg.patch_hidden = {4};
    cfg.source_coord = true;
    PatchDecoder<double> dec(cfg, 3);
    const PatchGrid2 grid({64, 64}, 32);
    const auto in = make_patch_input(sample_at({0.3, -0.6}), grid);
    Mat<double> zp = random_rows(4, 3, 1);
    Vec<double> zi = Vec<double>::LinSpaced(3, 10, 12);
    const Mat<double> x = dec.assemble({in}, zp, zi);
    ASSERT_EQ(x.cols(), 2 + 3 + 2 + 3 + 2);
    EXPECT_DOUBLE_EQ(x(0, 0), in.p_local[0]);
    EXPECT_DOUBLE_EQ(x(0, 1), in.p_local[1]);
    for (int k = 0; k < 3; ++k) {
        EXPECT_DOUBLE_EQ(x(0, 2 + k), zp(in.patch, k));
        EXPECT_DOUBLE_EQ(x(0, 7 + k), zi(k));
    }
    EXPECT_DOUBLE_EQ(x(0, 5), 0.3);
    EXPECT_DOUBLE_EQ(x(0, 6), -0.6);
    EXPECT_DOUBLE_EQ(x(0, 10), 0.15);
    EXPECT_DOUBLE_EQ(x(0, 11), -0.3);
    // (0.3, -0.6) on a 64 grid: row cell 1 (center 0.5), col cell 0 (center -0.5)
    EXPECT_EQ(in.patch, 2);
    EXPECT_NEAR(in.p_local[0], -0.2, 1e-15);
    EXPECT_NEAR(in.p_local[1], -0.1, 1e-15);
}

TEST(PatchDecoder, SoftmaxSumsToOne)
{
    DecoderConfig cfg;
    cfg.num_classes = 4;
    cfg.patch_hidden = {16, 16};
    PatchDecoder<double> dec(cfg, 8);
    std::mt19937_64 rng(1);
    dec.init(rng);
    const PatchGrid2 grid({96, 96}, 32);
    const auto p = dec.forward(random_inputs(grid, 500, 2), random_rows(9, 8, 3) * 3.0, Vec<double>::Random(8), nullptr);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        ASSERT_NEAR(p.row(i).sum(), 1.0, 1e-6);
        ASSERT_GE(p.row(i).minCoeff(), 0.0);
        ASSERT_LE(p.row(i).maxCoeff(), 1.0);
    }
}

TEST(Decoders, ZeroFinalLayerIsUniform)
{
    for (int classes : {2, 3, 5}) {
        DecoderConfig cfg;
        cfg.num_classes = classes;
        cfg.patch_hidden = {8, 8};
        cfg.image_hidden = {8};
        PatchDecoder<double> pd(cfg, 4);
        ImageDecoder<double> id(cfg, 4);
        std::mt19937_64 rng(2);
        pd.init(rng);
        id.init(rng);
        for (auto* mlp : {&pd.mlp(), &id.mlp()}) {
            mlp->layers().back().weight().value.setZero();
            mlp->layers().back().bias().value.setZero();
        }
        const PatchGrid2 grid({64, 64}, 16);
        const auto a = pd.forward(random_inputs(grid, 20, 1), random_rows(16, 4, 2), Vec<double>::Random(4), nullptr);
        const auto b = id.forward({{0.1, 0.2}, {-0.9, 0.4}}, Vec<double>::Random(4), nullptr);
        EXPECT_LT((a.array() - 1.0 / classes).abs().maxCoeff(), 1e-15);
        EXPECT_LT((b.array() - 1.0 / classes).abs().maxCoeff(), 1e-15);
    }
    DecoderConfig sig;
    sig.head = HeadKind::Sigmoid;
    sig.image_hidden = {4};
    ImageDecoder<double> id(sig, 3);
    id.mlp().layers().back().weight().value.setZero();
    const auto p = id.forward({{0.0, 0.0}}, Vec<double>::Ones(3), nullptr);
    EXPECT_DOUBLE_EQ(p(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(p(0, 1), 0.5);
}

TEST(PatchDecoder, GlobalCondOffIgnoresImageTerms)
{
    DecoderConfig cfg;
    cfg.global_cond = false;
    cfg.patch_hidden = {16, 16};
    PatchDecoder<double> dec(cfg, 6);
    std::mt19937_64 rng(3);
    dec.init(rng);
    const PatchGrid2 grid({64, 64}, 16);
    auto inputs = random_inputs(grid, 50, 4);
    const Mat<double> zp = random_rows(16, 6, 5);
    const auto base = dec.forward(inputs, zp, Vec<double>::Random(6), nullptr);
    for (auto& q : inputs) {
        q.p_image = {q.p_image[1] * 0.3, -q.p_image[0]};
    }
    const auto mutated = dec.forward(inputs, zp, Vec<double>::Random(6) * 5.0, nullptr);
    EXPECT_EQ(base, mutated);

    cfg.global_cond = true;
    PatchDecoder<double> on(cfg, 6);
    on.init(rng);
    EXPECT_NE(on.forward(inputs, zp, Vec<double>::Zero(6), nullptr),
              on.forward(inputs, zp, Vec<double>::Ones(6), nullptr));
}

TEST(ImageDecoder, SmoothInImageCoordinate)
{
    DecoderConfig cfg;
    cfg.num_classes = 3;
    cfg.image_hidden = {32, 16};
    ImageDecoder<double> dec(cfg, 8);
    std::mt19937_64 rng(4);
    dec.init(rng);
    const Vec<double> zi = Vec<double>::Random(8);

    // Lipschitz bound: coordinate columns of the first layer times the rest;
    // ReLU and softmax are 1-Lipschitz.
    const auto& layers = dec.mlp().layers();
    double bound = spectral_norm(layers.front().weight().value.leftCols(2));
    for (std::size_t i = 1; i < layers.size(); ++i) {
        bound *= spectral_norm(layers[i].weight().value);
    }
    std::mt19937 prng(5);
    std::uniform_real_distribution<double> u(-0.9, 0.9);
    std::normal_distribution<double> g(0, 1);
    const double h = 1e-6;
    double worst = 0;
    for (int k = 0; k < 500; ++k) {
        const Coord2 p{u(prng), u(prng)};
        double dr = g(prng), dc = g(prng);
        const double n = std::hypot(dr, dc);
        dr /= n;
        dc /= n;
        const auto a = dec.forward({{p[0] + h * dr, p[1] + h * dc}}, zi, nullptr);
        const auto b = dec.forward({{p[0] - h * dr, p[1] - h * dc}}, zi, nullptr);
        const double deriv = (a - b).norm() / (2 * h);
        worst = std::max(worst, deriv);
        ASSERT_LE(deriv, bound * (1 + 1e-6)) << "at (" << p[0] << ", " << p[1] << ")";
    }
    EXPECT_GT(worst, 0.0);
}

TEST(Spo, InteriorCon8DrawsFromAllEight)
{
    const PatchGrid2 grid({96, 96}, 32);
    const auto c = geometry::center_of(PatchIndex2{{1, 1}}, grid);
    SpoConfig cfg;
    cfg.occurrence = 1;
    std::mt19937_64 rng(1);
    std::set<int> seen;
    for (int k = 0; k < 2000; ++k) {
        for (const auto& s : spo_perturb(sample_at(c), grid, cfg, rng)) {
            seen.insert(s.input.patch);
        }
    }
    std::set<int> expected;
    for (const auto& n : geometry::neighbors(PatchIndex2{{1, 1}}, grid, Connectivity::Eight)) {
        expected.insert(grid.flat(n));
    }
    EXPECT_EQ(expected.size(), 8u);
    EXPECT_EQ(seen, expected);
}

TEST(Spo, LocalCoordinateIsCenterDifference)
{
    const PatchGrid2 grid({96, 96}, 32);
    const auto c = geometry::center_of(PatchIndex2{{1, 1}}, grid);
    SpoConfig cfg;
    cfg.occurrence = 16;
    std::mt19937_64 rng(2);
    const auto draws = spo_perturb(sample_at(c, 1), grid, cfg, rng);
    ASSERT_EQ(draws.size(), 16u);
    for (const auto& s : draws) {
        const auto cn = geometry::center_of(grid.unflat(s.input.patch), grid);
        EXPECT_DOUBLE_EQ(s.input.p_local[0], c[0] - cn[0]);
        EXPECT_DOUBLE_EQ(s.input.p_local[1], c[1] - cn[1]);
        EXPECT_EQ(s.label, 1);
        EXPECT_EQ(s.input.p_image, c);
    }
}

TEST(Spo, Con4FrequenciesAreUniform)
{
    const PatchGrid2 grid({96, 96}, 32);
    SpoConfig cfg;
    cfg.connectivity = Connectivity::Four;
    cfg.occurrence = 1;
    std::mt19937_64 rng(3);
    std::map<int, int> counts;
    const int n = 10000;
    for (int k = 0; k < n; ++k) {
        const auto s = spo_perturb(sample_at({0.05, -0.1}), grid, cfg, rng);
        ++counts[s.at(0).input.patch];
    }
    ASSERT_EQ(counts.size(), 4u);
    for (const auto& [patch, c] : counts) {
        EXPECT_NEAR(static_cast<double>(c) / n, 0.25, 0.02) << "patch " << patch;
    }
}

TEST(Spo, TargetsAndMagnitudeAcrossRandomBatches)
{
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int s = 8; s <= 32; s *= 2) {
        const PatchGrid2 grid({96, 64}, s);
        const auto half = grid.half_extent();
        for (auto con : {Connectivity::Four, Connectivity::Eight}) {
            SpoConfig cfg{con, 3};
            for (int k = 0; k < 2000; ++k) {
                const auto smp = sample_at({u(rng), u(rng)}, k % 3);
                const auto own = geometry::patch_of(smp.p_image, grid);
                const auto nb = geometry::neighbors(own, grid, con);
                std::set<int> allowed;
                for (const auto& n : nb) {
                    allowed.insert(grid.flat(n));
                }
                for (const auto& d : spo_perturb(smp, grid, cfg, rng)) {
                    ASSERT_EQ(d.label, smp.label);
                    ASSERT_EQ(d.input.p_image, smp.p_image);
                    ASSERT_EQ(d.input.p_source, smp.p_source);
                    ASSERT_TRUE(allowed.count(d.input.patch));
                    // at most one cell away: |p^P'| <= 2 cell extents
                    ASSERT_LE(std::abs(d.input.p_local[0]), 2 * (2 * half[0]));
                    ASSERT_LE(std::abs(d.input.p_local[1]), 2 * (2 * half[1]));
                }
            }
        }
    }
}

TEST(Spo, SinglePatchGridIsInert)
{
    const PatchGrid2 grid({32, 32}, 32);
    SpoConfig cfg;
    std::mt19937_64 rng(5);
    bool inert = false;
    EXPECT_TRUE(spo_perturb(sample_at({0.2, 0.2}), grid, cfg, rng, false, &inert).empty());
    EXPECT_TRUE(inert);
    cfg.occurrence = 0;
    const PatchGrid2 big({64, 64}, 16);
    EXPECT_TRUE(spo_perturb(sample_at({0.2, 0.2}), big, cfg, rng, false, &inert).empty());
    EXPECT_FALSE(inert);
}

TEST(Spo, DeterministicUnderSeed)
{
    const PatchGrid2 grid({96, 96}, 16);
    SpoConfig cfg{Connectivity::Eight, 4};
    std::mt19937_64 a(9), b(9);
    for (int k = 0; k < 100; ++k) {
        const auto s = sample_at({-0.3 + k * 0.006, 0.4});
        const auto x = spo_perturb(s, grid, cfg, a);
        const auto y = spo_perturb(s, grid, cfg, b);
        ASSERT_EQ(x.size(), y.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            ASSERT_EQ(x[i].input.patch, y[i].input.patch);
        }
    }
}

TEST(CoordEncoding, FrequencyBands)
{
    double out[10];
    encode_coord<double>({0.25, -0.5}, 2, out);
    EXPECT_DOUBLE_EQ(out[0], 0.25);
    EXPECT_DOUBLE_EQ(out[1], -0.5);
    EXPECT_NEAR(out[2], std::sin(std::numbers::pi * 0.25), 1e-15);
    EXPECT_NEAR(out[5], std::cos(-std::numbers::pi * 0.5), 1e-15);
    EXPECT_NEAR(out[6], std::sin(2 * std::numbers::pi * 0.25), 1e-15);
}
