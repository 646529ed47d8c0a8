#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "tig/dataset.hpp"

using namespace tig;

TEST_CASE("spec universe") {
    auto all = valid_specs();
    CHECK(all.size() == 1240);  // 4*8*2*5*4 minus blue-on-blue
    for (const auto& s : all) CHECK(s.valid());
    CHECK(!SceneSpec{ShapeKind::circle, 2, SizeKind::small, PosKind::center, 3}.valid());
}

TEST_CASE("render: worked example, determinism, circle area") {
    SceneSpec spec{ShapeKind::circle, 0, SizeKind::large, PosKind::center, 3};  // red on blue
    auto img = render_scene(spec);
    const long plane = 64L * 64;
    // center pixel red, corner blue
    CHECK(img[0L * plane + 32 * 64 + 32] == u8_to_unit(255));
    CHECK(img[1L * plane + 32 * 64 + 32] == u8_to_unit(0));
    CHECK(img[2L * plane + 32 * 64 + 32] == u8_to_unit(0));
    CHECK(img[0L * plane] == u8_to_unit(0));
    CHECK(img[2L * plane] == u8_to_unit(255));

    auto img2 = render_scene(spec);
    CHECK(img.v == img2.v);

    long area = 0;
    for (long i = 0; i < plane; ++i)
        if (img[0L * plane + i] > 0.5f) ++area;
    const double ideal = 3.14159265 * 18 * 18;
    CHECK(double(area) > 0.95 * ideal);
    CHECK(double(area) < 1.05 * ideal);
}

TEST_CASE("captions: template, constant length, injective") {
    SceneSpec spec{ShapeKind::circle, 0, SizeKind::large, PosKind::top_left, 3};
    CHECK(caption_of(spec) == "a large red circle at the top left on a blue background");

    std::set<std::string> seen;
    Vocab v = corpus_vocab();
    for (const auto& s : valid_specs()) {
        const std::string cap = caption_of(s);
        CHECK(split_words(cap).size() == 12);
        seen.insert(cap);
        for (int id : tokenize(cap, v)) CHECK(id != Vocab::unk);
    }
    CHECK(seen.size() == 1240);
}

TEST_CASE("oracle round-trips every valid spec exactly") {
    for (const auto& s : valid_specs()) {
        auto got = oracle_attributes(render_scene(s));
        REQUIRE(got.has_value());
        CHECK(*got == s);
    }
}

TEST_CASE("oracle: empty mask is a failure marker") {
    Array<float> img({3, 64, 64});
    const NamedColor& g = background_color(2);
    for (long i = 0; i < 64L * 64; ++i) {
        img[0L * 64 * 64 + i] = u8_to_unit(g.r);
        img[1L * 64 * 64 + i] = u8_to_unit(g.g);
        img[2L * 64 * 64 + i] = u8_to_unit(g.b);
    }
    CHECK(!oracle_attributes(img).has_value());
}

TEST_CASE("corpus: sizes, determinism, disjoint split, marginals") {
    auto c = gen_corpus(1280, 123);
    CHECK(c.train.size() == 1152);
    CHECK(c.test.size() == 128);

    auto c2 = gen_corpus(1280, 123);
    CHECK(c.train == c2.train);
    CHECK(c.test == c2.test);
    CHECK(gen_corpus(1280, 124).train != c.train);

    auto key = [](const SceneSpec& s) {
        return ((int(s.shape) * 8 + s.color) * 2 + int(s.size)) * 5 * 4 + int(s.position) * 4 +
               s.background;
    };
    std::set<int> train_keys, test_keys;
    for (const auto& s : c.train) train_keys.insert(key(s));
    for (const auto& s : c.test) test_keys.insert(key(s));
    for (int k : test_keys) CHECK(!train_keys.count(k));

    // shape/size/position marginals are uniform over valid specs; 3-sigma
    // binomial bounds on the pooled 1280 samples
    auto within = [&](long count, double p) {
        const double mu = 1280 * p, sd = std::sqrt(1280 * p * (1 - p));
        CHECK(double(count) > mu - 3 * sd);
        CHECK(double(count) < mu + 3 * sd);
    };
    long by_shape[4] = {}, by_size[2] = {}, by_pos[5] = {};
    for (const auto* part : {&c.train, &c.test})
        for (const auto& s : *part) {
            ++by_shape[int(s.shape)];
            ++by_size[int(s.size)];
            ++by_pos[int(s.position)];
        }
    for (long n : by_shape) within(n, 0.25);
    for (long n : by_size) within(n, 0.5);
    for (long n : by_pos) within(n, 0.2);
}

TEST_CASE("ppm round trip") {
    SceneSpec spec{ShapeKind::cross, 5, SizeKind::small, PosKind::bottom_right, 1};
    auto img = render_scene(spec);
    write_ppm("/tmp/tig_test.ppm", img);
    auto back = read_ppm("/tmp/tig_test.ppm");
    CHECK(back.shape == img.shape);
    CHECK(back.v == img.v);

    std::ofstream bad("/tmp/tig_bad.ppm");
    bad << "P5\n2 2\n255\n";
    bad.close();
    CHECK_THROWS(read_ppm("/tmp/tig_bad.ppm"));
    CHECK_THROWS(read_ppm("/tmp/tig_nonexistent.ppm"));
}

TEST_CASE("on-disk corpus layout") {
    Corpus c;
    c.train = {valid_specs()[0], valid_specs()[7]};
    c.test = {valid_specs()[100]};
    save_corpus("/tmp/tig_corpus", c);
    auto train = load_captions("/tmp/tig_corpus/train");
    REQUIRE(train.files.size() == 2);
    CHECK(train.captions[0] == caption_of(c.train[0]));
    CHECK(train.captions[1] == caption_of(c.train[1]));
    auto img = read_ppm(train.files[1]);
    CHECK(img.v == render_scene(c.train[1]).v);
    auto test = load_captions("/tmp/tig_corpus/test");
    CHECK(test.captions == std::vector<std::string>{caption_of(c.test[0])});
}
