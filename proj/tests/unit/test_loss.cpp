#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include <swipe/loss.hpp>

using namespace swipe;
using namespace swipe::loss;

namespace {

// Plain loops over std::vector, written independently of the Eigen versions.
double scalar_ce(const std::vector<int>& labels, const std::vector<std::vector<double>>& p)
{
    double s = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        s += -std::log(std::max(p[i][static_cast<std::size_t>(labels[i])], 1e-12));
    }
    return s / static_cast<double>(labels.size());
}

double scalar_dice(const std::vector<int>& labels, const std::vector<std::vector<double>>& p, int classes)
{
    double acc = 0;
    for (int c = 0; c < classes; ++c) {
        double inter = 0, oo = 0, pp = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const double o = labels[i] == c ? 1.0 : 0.0;
            const double q = p[i][static_cast<std::size_t>(c)];
            inter += o * q;
            oo += o * o;
            pp += q * q;
        }
        acc += (2 * inter + 1) / (oo + pp + 1);
    }
    return 1 - acc / classes;
}

struct Batch {
    std::vector<int> labels;
    std::vector<std::vector<double>> probs;
    Mat<double> targets, p;
};

Batch random_batch(std::mt19937_64& rng, int classes)
{
    std::uniform_int_distribution<int> n_dist(1, 64);
    std::uniform_int_distribution<int> lab(0, classes - 1);
    std::exponential_distribution<double> ex(1.0);
    Batch b;
    const int n = n_dist(rng);
    b.p.resize(n, classes);
    for (int i = 0; i < n; ++i) {
        b.labels.push_back(lab(rng));
        std::vector<double> row(static_cast<std::size_t>(classes));
        double s = 0;
        for (auto& v : row) {
            v = ex(rng);
            s += v;
        }
        for (int c = 0; c < classes; ++c) {
            row[static_cast<std::size_t>(c)] /= s;
            b.p(i, c) = row[static_cast<std::size_t>(c)];
        }
        b.probs.push_back(row);
    }
    b.targets = one_hot<double>(b.labels, classes);
    return b;
}

Mat<double> rows(std::initializer_list<std::initializer_list<double>> values)
{
    Mat<double> m(static_cast<Eigen::Index>(values.size()), static_cast<Eigen::Index>(values.begin()->size()));
    Eigen::Index r = 0;
    for (const auto& row : values) {
        Eigen::Index c = 0;
        for (double v : row) {
            m(r, c++) = v;
        }
        ++r;
    }
    return m;
}

} // namespace

TEST(CrossEntropy, HandValues)
{
    EXPECT_EQ(ce_loss<double>(rows({{0, 1}}), rows({{0, 1}})), 0.0);
    EXPECT_DOUBLE_EQ(ce_loss<double>(rows({{1, 0}}), rows({{std::exp(-1.0), 1 - std::exp(-1.0)}})), 1.0);
    EXPECT_DOUBLE_EQ(ce_loss<double>(rows({{1, 0}, {0, 1}}), rows({{0.5, 0.5}, {0.5, 0.5}})), std::log(2.0));
}

TEST(CrossEntropy, ClampedAndMonotone)
{
    const double at_zero = ce_loss<double>(rows({{1, 0}}), rows({{0, 1}}));
    EXPECT_TRUE(std::isfinite(at_zero));
    EXPECT_DOUBLE_EQ(at_zero, -std::log(1e-12));
    double prev = at_zero;
    for (double q = 1e-9; q <= 1.0; q *= 3) {
        const double v = ce_loss<double>(rows({{1, 0}}), rows({{q, 1 - q}}));
        EXPECT_LT(v, prev);
        prev = v;
    }
}

TEST(DiceLoss, HandValues)
{
    EXPECT_EQ(dice_loss<double>(rows({{1}}), rows({{1}})), 0.0);
    EXPECT_EQ(dice_loss<double>(rows({{1}}), rows({{0}})), 0.5);
    const Mat<double> t = rows({{1, 0, 0}, {0, 0, 1}, {0, 1, 0}, {1, 0, 0}});
    EXPECT_EQ(dice_loss<double>(t, t), 0.0);
}

TEST(OccLoss, HandValues)
{
    const Mat<double> t = rows({{0, 1}, {1, 0}});
    EXPECT_EQ(occ_loss<double>(t, t), 0.0);
    // single point, one channel, prediction 0: CE clamps to -log 1e-12, Dice is 0.5
    const double miss = occ_loss<double>(rows({{1}}), rows({{0}}));
    EXPECT_DOUBLE_EQ(miss, 0.5 * -std::log(1e-12) + 0.5 * 0.5);
    EXPECT_NEAR(miss, 14.0655, 1e-4);
}

TEST(OccLoss, BlendsIndependentTerms)
{
    std::mt19937_64 rng(1);
    for (int k = 0; k < 200; ++k) {
        const auto b = random_batch(rng, 3);
        const double expect = 0.5 * scalar_ce(b.labels, b.probs) + 0.5 * scalar_dice(b.labels, b.probs, 3);
        ASSERT_NEAR(occ_loss(b.targets, b.p), expect, 1e-12);
    }
}

TEST(Formulas, MatchScalarOracleOnThousandBatches)
{
    std::mt19937_64 rng(2);
    for (int k = 0; k < 1000; ++k) {
        const int classes = 2 + k % 4;
        const auto b = random_batch(rng, classes);
        const double ce = ce_loss(b.targets, b.p);
        const double dc = dice_loss(b.targets, b.p);
        ASSERT_NEAR(ce, scalar_ce(b.labels, b.probs), 1e-12) << "batch " << k;
        ASSERT_NEAR(dc, scalar_dice(b.labels, b.probs, classes), 1e-12) << "batch " << k;
        ASSERT_GE(ce, 0.0);
        ASSERT_GE(dc, 0.0);
    }
}

TEST(Formulas, GradientsMatchFiniteDifferences)
{
    std::mt19937_64 rng(3);
    for (int k = 0; k < 20; ++k) {
        auto b = random_batch(rng, 3);
        Mat<double> g = Mat<double>::Zero(b.p.rows(), b.p.cols());
        occ_loss(b.targets, b.p, &g, 0.7);
        const double eps = 1e-6;
        for (Eigen::Index i = 0; i < b.p.size(); ++i) {
            const double orig = b.p.data()[i];
            b.p.data()[i] = orig + eps;
            const double up = occ_loss(b.targets, b.p);
            b.p.data()[i] = orig - eps;
            const double down = occ_loss(b.targets, b.p);
            b.p.data()[i] = orig;
            ASSERT_NEAR(0.7 * (up - down) / (2 * eps), g.data()[i], 1e-6);
        }
    }
}

TEST(PatchImageLoss, Mixing)
{
    EXPECT_EQ(patch_image_loss(0.2, 0.4, 1.0), 0.2);
    EXPECT_EQ(patch_image_loss(0.2, 0.4, 0.0), 0.4);
    EXPECT_DOUBLE_EQ(patch_image_loss(0.2, 0.4, 0.5), 0.3);
}

TEST(TotalLoss, CombineAndDefaults)
{
    const LossConfig cfg;
    EXPECT_EQ(cfg.alpha, 0.5);
    EXPECT_EQ(cfg.beta, 0.1);
    EXPECT_EQ(cfg.lambda, 1e-4);
    EXPECT_NEAR(combine(0.3, 0.2, 10.0, cfg), 0.321, 1e-15);

    LossConfig bad;
    bad.alpha = 1.5;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = {};
    bad.lambda = -1;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(TotalLoss, ReducesAndRegularizes)
{
    std::mt19937_64 rng(4);
    const auto b = random_batch(rng, 2);
    const Mat<double> image_p = b.p.colwise().reverse(); // rows permuted: still valid probabilities
    const auto spo = random_batch(rng, 2);
    Mat<double> zp = Mat<double>::Zero(4, 3);
    Vec<double> zi = Vec<double>::Zero(3);
    std::vector<int> touched(static_cast<std::size_t>(b.p.rows()), 1);

    LossConfig none{0.5, 0.0, 0.0};
    auto r = total_loss<double>(b.targets, b.p, image_p, spo.targets, spo.p, zp, touched, zi, none);
    EXPECT_EQ(r.total, patch_image_loss(occ_loss(b.targets, b.p), occ_loss(b.targets, image_p), 0.5));
    EXPECT_EQ(r.reg, 0.0);

    // touched cells {1, 3}: mean of their squared norms, plus ||z_I||^2
    zp.row(1) << 1, 2, 2;  // 9
    zp.row(3) << 0, 0, 1;  // 1
    zp.row(0) << 5, 5, 5;  // untouched
    zi << 1, 1, 0;         // 2
    touched = {1, 3, 1, 1};
    const LossConfig def;
    r = total_loss<double>(b.targets, b.p, image_p, spo.targets, spo.p, zp, touched, zi, def);
    EXPECT_DOUBLE_EQ(r.reg, (9.0 + 1.0) / 2 + 2.0);
    EXPECT_DOUBLE_EQ(r.spo, occ_loss(spo.targets, spo.p));
    EXPECT_DOUBLE_EQ(r.total, r.patch_image + 0.1 * r.spo + 1e-4 * r.reg);
}
