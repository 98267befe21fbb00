#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include <swipe/data.hpp>

using namespace swipe;
using namespace swipe::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    const auto p = fs::temp_directory_path() / ("swipe_data_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

DatasetManifest tiny_manifest()
{
    DatasetManifest m;
    for (int i = 0; i < 5; ++i) {
        ImageEntry e;
        e.id = i;
        e.image = "images/" + numbered(i, ".png");
        e.mask = "masks/" + numbered(i, ".png");
        m.images.push_back(e);
    }
    m.splits = {{"train", {0, 1, 2}}, {"val", {3}}, {"test", {4}}};
    return m;
}

} // namespace

TEST(Splits, SizesFollowRatio)
{
    EXPECT_EQ(split_sizes(200), (std::array<int, 3>{120, 40, 40}));
    EXPECT_EQ(split_sizes(10), (std::array<int, 3>{6, 2, 2}));
    for (int n = 3; n <= 500; ++n) {
        const auto s = split_sizes(n);
        EXPECT_EQ(s[0] + s[1] + s[2], n);
        EXPECT_LE(std::abs(s[1] - 0.2 * n), 0.5);
        EXPECT_GE(s[0], 1);
    }
}

TEST(Splits, DeterministicDisjointExhaustive)
{
    std::vector<int> ids(200);
    std::iota(ids.begin(), ids.end(), 0);
    const auto a = assign_splits(ids, 7);
    auto shuffled = ids;
    std::reverse(shuffled.begin(), shuffled.end());
    EXPECT_EQ(assign_splits(shuffled, 7), a); // depends on ids and seed only
    EXPECT_NE(assign_splits(ids, 8), a);
    std::set<int> seen;
    for (const auto& [name, members] : a) {
        for (int id : members) {
            EXPECT_TRUE(seen.insert(id).second) << id;
        }
    }
    EXPECT_EQ(seen.size(), 200u);
    EXPECT_EQ(a.at("train").size(), 120u);
    EXPECT_EQ(a.at("val").size(), 40u);
    EXPECT_EQ(a.at("test").size(), 40u);
}

TEST(Splits, ValidationErrors)
{
    auto m = tiny_manifest();
    EXPECT_NO_THROW(validate_splits(m));

    auto overlap = m;
    overlap.splits["val"] = {3, 1};
    EXPECT_THROW(validate_splits(overlap), ValidationError);

    auto empty = m;
    empty.splits["test"] = {};
    empty.splits["train"] = {0, 1, 2, 4};
    try {
        validate_splits(empty);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("'test'"), std::string::npos) << e.what();
    }

    auto unassigned = m;
    unassigned.splits["train"] = {0, 1};
    EXPECT_THROW(validate_splits(unassigned), ValidationError);

    auto unknown = m;
    unknown.splits["val"] = {3, 99};
    EXPECT_THROW(validate_splits(unknown), ValidationError);
}

TEST(Synthetic, DeterministicWithAreaFloor)
{
    CorpusSpec spec;
    spec.seed = 3;
    for (int classes : {1, 2}) {
        spec.classes = classes;
        for (int i = 0; i < 40; ++i) {
            const auto a = generate_image(spec, i);
            const auto b = generate_image(spec, i);
            ASSERT_EQ(a.image, b.image);
            ASSERT_EQ(a.mask, b.mask);
            ASSERT_EQ(a.mask, render_mask(a.shapes, spec.size, spec.size)); // exact rasterization
            std::vector<int> area(static_cast<std::size_t>(spec.num_classes()), 0);
            for (auto v : a.mask.values) {
                ASSERT_LT(v, spec.num_classes());
                ++area[v];
            }
            for (int c = 1; c <= classes; ++c) {
                ASSERT_GE(area[static_cast<std::size_t>(c)], kMinComponentArea) << "image " << i << " class " << c;
            }
            for (float x : a.image.values) {
                ASSERT_GE(x, 0.0f);
                ASSERT_LE(x, 1.0f);
            }
        }
    }
    CorpusSpec other = spec;
    other.seed = 4;
    EXPECT_NE(generate_image(spec, 0).mask, generate_image(other, 0).mask);
}

TEST(Synthetic, ForegroundIsBrighterOnAverage)
{
    CorpusSpec spec;
    double fg = 0, bg = 0;
    int nf = 0, nb = 0;
    for (int i = 0; i < 10; ++i) {
        const auto img = generate_image(spec, i);
        for (std::size_t k = 0; k < img.mask.size(); ++k) {
            (img.mask.values[k] ? fg : bg) += img.image.values[k];
            (img.mask.values[k] ? nf : nb) += 1;
        }
    }
    EXPECT_GT(std::abs(fg / nf - bg / nb), 0.1);
}

TEST(Corpus, BitwiseIdenticalAcrossRuns)
{
    CorpusSpec spec;
    spec.n_images = 10;
    spec.size = 64;
    spec.seed = 11;
    spec.sampling.n_background = 50;
    spec.sampling.n_foreground_per_class = 30;
    const auto a = scratch("corpus_a");
    const auto b = scratch("corpus_b");
    const auto ma = generate_corpus(a, spec);
    const auto mb = generate_corpus(b, spec);
    EXPECT_EQ(ma, mb);
    EXPECT_EQ(ma.split("train").size(), 6u);
    EXPECT_EQ(ma.split("val").size(), 2u);
    EXPECT_EQ(ma.split("test").size(), 2u);
    for (const auto& e : ma.images) {
        for (const auto& rel : {e.image, e.mask, e.points}) {
            ASSERT_EQ(slurp(a / rel), slurp(b / rel)) << rel;
        }
    }
    EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));

    auto ds = Dataset::open(a / "manifest.json");
    const auto s = ds.load(ma.images[3].id);
    EXPECT_EQ(s.image.height, 64);
    EXPECT_TRUE(s.has_points);
    EXPECT_EQ(s.points.size(), 50u + 30u);
    EXPECT_EQ(s.mask, generate_image(spec, 3).mask);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Manifest, RoundTripAndErrors)
{
    const auto dir = scratch("manifest");
    CorpusSpec spec;
    spec.n_images = 5;
    spec.size = 32;
    spec.write_points = false;
    const auto m = generate_corpus(dir, spec);
    EXPECT_EQ(load_manifest(dir / "manifest.json"), m);
    save_manifest(dir / "copy.json", m);
    EXPECT_EQ(load_manifest(dir / "copy.json"), m);

    // missing files are all listed
    fs::remove(dir / m.images[1].image);
    fs::remove(dir / m.images[4].mask);
    try {
        load_manifest(dir / "manifest.json");
        FAIL();
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find(m.images[1].image), std::string::npos) << msg;
        EXPECT_NE(msg.find(m.images[4].mask), std::string::npos) << msg;
    }
    EXPECT_NO_THROW(load_manifest(dir / "manifest.json", false));

    {
        std::ofstream bad(dir / "bad.json");
        bad << "{\n  \"corpus_seed\": 0,\n  \"size\": 32,\n  \"images\": [ oops ]\n}\n";
    }
    try {
        load_manifest(dir / "bad.json");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos) << e.what();
    }

    auto overlap = m;
    overlap.splits["val"].push_back(overlap.splits["train"].front());
    save_manifest(dir / "overlap.json", overlap);
    EXPECT_THROW(load_manifest(dir / "overlap.json", false), ValidationError);
    fs::remove_all(dir);
}

TEST(Corpus, SpecValidation)
{
    CorpusSpec spec;
    spec.classes = 3;
    EXPECT_THROW(spec.validate(), ConfigError);
    spec = {};
    spec.n_images = 2;
    EXPECT_THROW(spec.validate(), ConfigError);
}
