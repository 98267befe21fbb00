#include <random>

#include <gtest/gtest.h>

#include <swipe/model.hpp>

#include "gradcheck.hpp"

using namespace swipe;

namespace {

ModelConfig tiny_config(int size, int patch, encoder::MeaMode mea = encoder::MeaMode::Attention)
{
    ModelConfig cfg;
    cfg.encoder.widths = {2, 3, 4, 4, 5};
    cfg.encoder.blocks_per_stage = 1;
    cfg.encoder.embed_dim = 8;
    cfg.encoder.mea = mea;
    cfg.decoder.patch_hidden = {6, 5};
    cfg.decoder.image_hidden = {6};
    cfg.image_height = size;
    cfg.image_width = size;
    cfg.patch_size = patch;
    cfg.init_seed = 3;
    return cfg;
}

nn::FeatureMap<double> random_image(int size, unsigned seed)
{
    std::mt19937 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    nn::FeatureMap<double> img(1, size, size);
    for (Eigen::Index i = 0; i < img.data.size(); ++i) {
        img.data.data()[i] = n(rng);
    }
    return img;
}

PointBatch random_batch(const geometry::PatchGrid2& grid, int points, int classes, unsigned seed, int spo)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.99, 0.99);
    std::uniform_int_distribution<int> lab(0, classes - 1);
    std::vector<sampling::OccupancySample> samples;
    for (int i = 0; i < points; ++i) {
        sampling::OccupancySample s;
        s.p_image = {u(rng), u(rng)};
        s.p_source = s.p_image;
        s.label = lab(rng);
        samples.push_back(s);
    }
    decoder::SpoConfig sc;
    sc.occurrence = spo;
    return make_point_batch(samples, grid, sc, false, rng);
}

void check_model(Model<double>& model, const PointBatch& batch, unsigned image_seed)
{
    const auto image = random_image(model.config().image_height, image_seed);
    // Zero biases leave dead channels exactly at a ReLU kink, where central
    // differences see half the slope; jitter every bias off zero.
    std::mt19937 rng(image_seed + 100);
    std::uniform_real_distribution<double> jitter(-0.2, 0.2);
    for (auto* p : model.parameters()) {
        if (p->name.ends_with(".bias")) {
            for (Eigen::Index i = 0; i < p->value.size(); ++i) {
                p->value.data()[i] = jitter(rng);
            }
        }
    }
    loss::LossConfig lc;
    lc.lambda = 0.01; // make the regularizer visible in the gradient
    model.zero_grad();
    model.loss_for_image(image, batch, lc, true);
    auto loss = [&] { return model.loss_for_image(image, batch, lc, false).total; };

    std::map<std::string, nn::ParamRefs<double>> groups;
    for (auto* p : model.parameters()) {
        groups[Model<double>::group_of(p->name)].push_back(p);
    }
    for (const char* g : {"backbone", "rfb", "cascade", "mea", "patch_decoder", "image_decoder"}) {
        ASSERT_TRUE(groups.count(g)) << g;
        const auto r = swipe::testing::check_params(loss, groups[g], 8);
        EXPECT_LT(r.max_rel_error, 1e-4) << g << " worst " << r.worst;
    }
}

} // namespace

TEST(Gradients, TotalLossAllGroupsIdentityResize)
{
    Model<double> model(tiny_config(64, 32));
    check_model(model, random_batch(model.grid(), 24, 2, 11, 1), 5);
}

TEST(Gradients, TotalLossAllGroupsUpsampledGrid)
{
    Model<double> model(tiny_config(64, 16));
    check_model(model, random_batch(model.grid(), 24, 3, 12, 2), 6);
}

TEST(Gradients, MeaAddAndConcatVariants)
{
    for (auto mode : {encoder::MeaMode::Add, encoder::MeaMode::Concat}) {
        Model<double> model(tiny_config(64, 32, mode));
        check_model(model, random_batch(model.grid(), 16, 2, 13, 1), 7);
    }
}

TEST(Gradients, SigmoidHeadAndSourceCoordinate)
{
    auto cfg = tiny_config(32, 16);
    cfg.decoder.head = decoder::HeadKind::Sigmoid;
    cfg.decoder.source_coord = true;
    cfg.decoder.frequency_bands = 2;
    Model<double> model(cfg);
    check_model(model, random_batch(model.grid(), 16, 2, 14, 1), 8);
}
