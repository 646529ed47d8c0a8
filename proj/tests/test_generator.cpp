#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tig/generator.hpp"

using namespace tig;

namespace {

Vocab toy_vocab() {
    Vocab v;
    for (const char* w : {"a", "small", "large", "red", "blue", "circle", "square"}) v.add(w);
    return v;
}

TextConfig toy_text_cfg(const Vocab& v) {
    TextConfig cfg;
    cfg.vocab = v.size();
    cfg.e = 8;
    cfg.heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.ffw = 16;
    return cfg;
}

GeneratorConfig toy_gen_cfg() {
    GeneratorConfig cfg;
    cfg.z_dim = 8;
    cfg.out_res = 32;
    cfg.text_dim = 8;
    cfg.tcit_heads = 2;
    cfg.tcit_layers = 1;
    cfg.resolutions = {4, 8, 16, 32};
    cfg.channels = {16, 8, 8, 8};
    cfg.inject = {16};
    cfg.rgb_heads = {16, 32};
    return cfg;
}

struct Rig {
    ParamStore<float> ps;
    Vocab vocab = toy_vocab();
    TextEncoder<float> enc;
    Generator<float> gen;

    explicit Rig(uint64_t seed, GeneratorConfig gcfg = toy_gen_cfg()) {
        Rng rng(seed);
        enc = TextEncoder<float>::create(ps, rng, toy_text_cfg(vocab));
        gen = Generator<float>::create(ps, rng, gcfg);
    }
};

Array<float> fixed_noise(uint64_t seed, int batch, int z_dim) {
    Rng rng(seed);
    return sample_noise<float>(rng, batch, z_dim);
}

}  // namespace

TEST_CASE("output shape, range and determinism") {
    Rig rig(1);
    auto z = fixed_noise(2, 2, 8);
    CaptionBatch b = CaptionBatch::from({tokenize("a red circle", rig.vocab),
                                         tokenize("a large blue square", rig.vocab)});
    auto run = [&] {
        Tape<float> t;
        t.grad_enabled = false;
        Ctx<float> ctx{t, false};
        auto f_t = rig.enc.fwd(ctx, b);
        return rig.gen.fwd(ctx, t.constant(z), f_t, b).val();
    };
    auto img = run();
    CHECK(img.shape == Shape{2, 3, 32, 32});
    for (long i = 0; i < img.size(); ++i) {
        CHECK(img[i] > -1.0f);
        CHECK(img[i] < 1.0f);
    }
    auto img2 = run();
    CHECK(img.v == img2.v);
}

TEST_CASE("zero output projections reduce tcit to stacked layer norms") {
    ParamStore<float> ps;
    Rng rng(3);
    auto blk = TcitBlock<float>::create(ps, rng, "t", 8, 8, 2, 1, true, false);
    auto& l = blk.layers[0];
    std::fill(l.att.o.W->w.v.begin(), l.att.o.W->w.v.end(), 0.0f);
    std::fill(l.att.o.b->w.v.begin(), l.att.o.b->w.v.end(), 0.0f);
    std::fill(l.f2.W->w.v.begin(), l.f2.W->w.v.end(), 0.0f);
    std::fill(l.f2.b->w.v.begin(), l.f2.b->w.v.end(), 0.0f);

    Vocab v = toy_vocab();
    CaptionBatch b = CaptionBatch::from({tokenize("a red circle", v)});
    Rng drng(4);
    Array<float> fi({1, 4, 8}), ft({1, b.len(), 8});
    for (long i = 0; i < fi.size(); ++i) fi[i] = float(drng.normal());
    for (long i = 0; i < ft.size(); ++i) ft[i] = float(drng.normal());

    Tape<float> t;
    t.grad_enabled = false;
    Ctx<float> ctx{t, false};
    auto got = blk.fwd(ctx, t.constant(fi), t.constant(ft), b);
    auto want = l.ln2.fwd(ctx, l.ln1.fwd(ctx, t.constant(fi)));
    CHECK(got.val().v == want.val().v);
}

TEST_CASE("shared k/v projection: fewer parameters, same path when tied") {
    ParamStore<float> ps_full, ps_shared;
    Rng r1(5), r2(5);
    auto full = TcitBlock<float>::create(ps_full, r1, "t", 8, 8, 2, 1, true, false);
    auto shared = TcitBlock<float>::create(ps_shared, r2, "t", 8, 8, 2, 1, true, true);
    const long v_size = full.layers[0].att.v.W->w.size() + full.layers[0].att.v.b->w.size();
    CHECK(full.param_count() - shared.param_count() == v_size);

    // tie the full block's V to its K; both blocks then compute the same map
    auto copy = [](Param<float>* dst, Param<float>* src) { dst->w.v = src->w.v; };
    auto &fa = full.layers[0].att, &sa = shared.layers[0].att;
    copy(fa.v.W, fa.k.W);
    copy(fa.v.b, fa.k.b);
    copy(sa.q.W, fa.q.W);
    copy(sa.q.b, fa.q.b);
    copy(sa.k.W, fa.k.W);
    copy(sa.k.b, fa.k.b);
    copy(sa.o.W, fa.o.W);
    copy(sa.o.b, fa.o.b);
    for (auto [d, s] : {std::pair{&shared.layers[0], &full.layers[0]}}) {
        copy(d->ln1.g, s->ln1.g);
        copy(d->ln1.b, s->ln1.b);
        copy(d->ln2.g, s->ln2.g);
        copy(d->ln2.b, s->ln2.b);
        copy(d->f1.W, s->f1.W);
        copy(d->f1.b, s->f1.b);
        copy(d->f2.W, s->f2.W);
        copy(d->f2.b, s->f2.b);
    }

    Vocab v = toy_vocab();
    CaptionBatch b = CaptionBatch::from({tokenize("a small red circle", v)});
    Rng drng(6);
    Array<float> fi({1, 4, 8}), ft({1, b.len(), 8});
    for (long i = 0; i < fi.size(); ++i) fi[i] = float(drng.normal());
    for (long i = 0; i < ft.size(); ++i) ft[i] = float(drng.normal());

    Tape<float> t;
    t.grad_enabled = false;
    Ctx<float> ctx{t, false};
    auto a = full.fwd(ctx, t.constant(fi), t.constant(ft), b).val();
    auto c = shared.fwd(ctx, t.constant(fi), t.constant(ft), b).val();
    CHECK(a.v == c.v);
}

TEST_CASE("padding the caption batch further changes nothing") {
    Rig rig(7);
    auto z = fixed_noise(8, 1, 8);
    std::vector<int> seq = tokenize("a blue square", rig.vocab);
    auto run = [&](int min_len) {
        Tape<float> t;
        t.grad_enabled = false;
        Ctx<float> ctx{t, false};
        CaptionBatch b = CaptionBatch::from({seq}, min_len);
        auto f_t = rig.enc.fwd(ctx, b);
        return rig.gen.fwd(ctx, t.constant(z), f_t, b).val();
    };
    CHECK(run(0).v == run(int(seq.size()) + 5).v);
}

TEST_CASE("aggregation: image is tanh of the summed heads; ablating heads recomposes") {
    Rig rig(9);
    auto z = fixed_noise(10, 1, 8);
    CaptionBatch b = CaptionBatch::from({tokenize("a red circle", rig.vocab)});

    Tape<float> t;
    t.grad_enabled = false;
    Ctx<float> ctx{t, false};
    auto f_t = rig.enc.fwd(ctx, b);
    auto out = rig.gen.fwd_detailed(ctx, t.constant(z), f_t, b);
    REQUIRE(out.head_terms.size() == 2);
    for (long i = 0; i < out.image.val().size(); ++i) {
        const float s = out.head_terms[0].val()[i] + out.head_terms[1].val()[i];
        CHECK(out.image.val()[i] == std::tanh(s));
    }

    // zero the 16x16 head: the image becomes tanh of the 32x32 term alone
    auto* head16 = &rig.gen.blocks[1];
    REQUIRE(head16->res == 16);
    std::fill(head16->rgb.W->w.v.begin(), head16->rgb.W->w.v.end(), 0.0f);
    std::fill(head16->rgb.b->w.v.begin(), head16->rgb.b->w.v.end(), 0.0f);
    Tape<float> t2;
    t2.grad_enabled = false;
    Ctx<float> ctx2{t2, false};
    auto f_t2 = rig.enc.fwd(ctx2, b);
    auto out2 = rig.gen.fwd_detailed(ctx2, t2.constant(z), f_t2, b);
    for (long i = 0; i < out2.image.val().size(); ++i)
        CHECK(out2.image.val()[i] == std::tanh(out.head_terms[1].val()[i]));
}

TEST_CASE("text reaches the image: encoder parameters get nonzero gradients") {
    Rig rig(11);
    auto z = fixed_noise(12, 1, 8);
    CaptionBatch b = CaptionBatch::from({tokenize("a large red square", rig.vocab)});
    Tape<float> t;
    Ctx<float> ctx{t};
    auto f_t = rig.enc.fwd(ctx, b);
    auto img = rig.gen.fwd(ctx, t.constant(z), f_t, b);
    t.backward(sum(mul(img, img)));
    auto nonzero = [&](Param<float>* p) {
        auto g = ctx.grad(*p);
        for (long i = 0; i < g.size(); ++i)
            if (g[i] != 0.0f) return true;
        return false;
    };
    CHECK(nonzero(rig.enc.tok.table));
    CHECK(nonzero(rig.enc.layers[0].att.q.W));
    CHECK(nonzero(rig.gen.z_proj.W));
    CHECK(nonzero(rig.gen.blocks[1].tcit.layers[0].att.k.W));
}

TEST_CASE("the 2-d positional encoding is live at injection sites") {
    GeneratorConfig with = toy_gen_cfg(), without = toy_gen_cfg();
    without.use_2d_encoding = false;
    Rig a(13, with), c(13, without);
    auto z = fixed_noise(14, 1, 8);
    CaptionBatch b = CaptionBatch::from({tokenize("a red circle", a.vocab)});
    auto run = [&](Rig& r) {
        Tape<float> t;
        t.grad_enabled = false;
        Ctx<float> ctx{t, false};
        auto f_t = r.enc.fwd(ctx, b);
        return r.gen.fwd(ctx, t.constant(z), f_t, b).val();
    };
    CHECK(run(a).v != run(c).v);
}

TEST_CASE("bad widths are rejected") {
    GeneratorConfig cfg = toy_gen_cfg();
    cfg.tcit_heads = 3;  // does not divide 8
    ParamStore<float> ps;
    Rng rng(15);
    CHECK_THROWS(Generator<float>::create(ps, rng, cfg));
    CHECK_THROWS(cfg.channels_at(128));
}
