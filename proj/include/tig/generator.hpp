#pragma once
// Aggregated single-output generator. Word-level text conditioning enters
// through cross-attention blocks (image features query word embeddings) at
// the high-resolution feature maps only; RGB heads at several resolutions
// are upsampled and summed into one image.

#include "tig/text.hpp"

namespace tig {

struct GeneratorConfig {
    int z_dim = 64;
    int out_res = 64;
    int text_dim = 64;  // width of Enc's word embeddings
    int tcit_heads = 4;
    int tcit_layers = 2;
    std::vector<int> resolutions = {4, 8, 16, 32, 64};
    std::vector<int> channels = {128, 64, 32, 16, 12};
    std::vector<int> inject = {8, 16};     // TCIT sites
    std::vector<int> rgb_heads = {16, 32, 64};
    bool equalized = true;
    bool use_2d_encoding = true;
    bool shared_kv = false;  // single-projection attention (AttnGAN-style)

    int channels_at(int res) const {
        for (size_t i = 0; i < resolutions.size(); ++i)
            if (resolutions[i] == res) return channels[i];
        fail("generator: no channel width for resolution " + std::to_string(res));
    }
    bool injects_at(int res) const {
        return std::find(inject.begin(), inject.end(), res) != inject.end();
    }
    bool rgb_at(int res) const {
        return std::find(rgb_heads.begin(), rgb_heads.end(), res) != rgb_heads.end();
    }
};

// cross-attention key mask over (B*H, d, L): padded text positions are
// blocked for every image-row query
inline Array<uint8_t> cross_text_mask(const CaptionBatch& batch, int heads, int d) {
    const int B = batch.batch(), L = batch.len();
    Array<uint8_t> m({B * heads, d, L});
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < L; ++j)
                    m[((long(b) * heads + h) * d + i) * L + j] = batch.pad_mask[long(b) * L + j];
    return m;
}

// Text-Conditioned Image Transformer: L post-norm layers of multi-head
// cross-attention (Q from image rows, K/V from word embeddings through
// separate projections) followed by a position-wise feed-forward.
template <class T>
struct TcitBlock {
    struct Layer {
        MultiHeadAttention<T> att;
        LayerNorm<T> ln1, ln2;
        Linear<T> f1, f2;
    };
    std::vector<Layer> layers;
    int heads = 4;

    static TcitBlock create(ParamStore<T>& ps, Rng& rng, const std::string& name, int c, int text_dim,
                            int heads, int num_layers, bool equalized, bool shared_kv) {
        TIG_CHECK(c % heads == 0, "tcit: channel width " + std::to_string(c) + " not divisible by " +
                                      std::to_string(heads) + " heads");
        TcitBlock blk;
        blk.heads = heads;
        for (int l = 0; l < num_layers; ++l) {
            const std::string ln = name + ".l" + std::to_string(l);
            Layer layer{
                MultiHeadAttention<T>::create(ps, rng, ln + ".att", c, text_dim, heads, equalized, shared_kv),
                LayerNorm<T>::create(ps, ln + ".ln1", c),
                LayerNorm<T>::create(ps, ln + ".ln2", c),
                Linear<T>::create(ps, rng, ln + ".f1", c, 2 * c, equalized),
                Linear<T>::create(ps, rng, ln + ".f2", 2 * c, c, equalized),
            };
            blk.layers.push_back(std::move(layer));
        }
        return blk;
    }

    long param_count() const {
        long n = 0;
        for (const auto& l : layers)
            n += l.att.param_count() + l.ln1.g->w.size() + l.ln1.b->w.size() + l.ln2.g->w.size() +
                 l.ln2.b->w.size() + l.f1.W->w.size() + l.f1.b->w.size() + l.f2.W->w.size() + l.f2.b->w.size();
        return n;
    }

    // f_i (B, d, c) image rows (2-D encoding already added), f_t (B, L, e)
    Tensor<T> fwd(Ctx<T>& ctx, Tensor<T> f_i, Tensor<T> f_t, const CaptionBatch& batch) const {
        const int d = f_i.shape()[1];
        const Array<uint8_t> mask = cross_text_mask(batch, heads, d);
        Tensor<T> x = f_i;
        for (const auto& l : layers) {
            x = l.ln1.fwd(ctx, add(x, l.att.fwd(ctx, x, f_t, &mask)));
            x = l.ln2.fwd(ctx, add(x, l.f2.fwd(ctx, leaky_relu(l.f1.fwd(ctx, x)))));
        }
        return x;
    }
};

template <class T>
struct Generator {
    GeneratorConfig cfg;
    Linear<T> z_proj;
    struct Block {
        int res = 0;
        Conv<T> conv;
        bool has_tcit = false;
        TcitBlock<T> tcit;
        Array<T> pos2d;
        bool has_rgb = false;
        Conv<T> rgb;
    };
    std::vector<Block> blocks;

    static Generator create(ParamStore<T>& ps, Rng& rng, const GeneratorConfig& cfg,
                            const std::string& prefix = "g") {
        Generator g;
        g.cfg = cfg;
        const int c0 = cfg.channels_at(cfg.resolutions[0]);
        g.z_proj = Linear<T>::create(ps, rng, prefix + ".zproj", cfg.z_dim,
                                     c0 * cfg.resolutions[0] * cfg.resolutions[0], cfg.equalized);
        for (size_t i = 1; i < cfg.resolutions.size(); ++i) {
            const int res = cfg.resolutions[i];
            const int cin = cfg.channels[i - 1];
            const int cout = cfg.channels[i];
            Block b;
            b.res = res;
            const std::string bn = prefix + ".b" + std::to_string(res);
            b.conv = Conv<T>::create(ps, rng, bn + ".conv", cin, cout, 3, 1, 1, cfg.equalized);
            if (cfg.injects_at(res)) {
                TIG_CHECK(cout % 4 == 0, "tcit site: channels must be divisible by 4 for 2-D encoding");
                b.has_tcit = true;
                b.tcit = TcitBlock<T>::create(ps, rng, bn + ".tcit", cout, cfg.text_dim, cfg.tcit_heads,
                                              cfg.tcit_layers, cfg.equalized, cfg.shared_kv);
                b.pos2d = pos_encode_2d<T>(res, res, cout);
            }
            if (cfg.rgb_at(res))
                b.has_rgb = true, b.rgb = Conv<T>::create(ps, rng, bn + ".rgb", cout, 3, 1, 1, 0,
                                                          cfg.equalized, T(1));
            g.blocks.push_back(std::move(b));
        }
        return g;
    }

    struct Outputs {
        Tensor<T> image;                    // (B, 3, R, R) in (-1, 1)
        Tensor<T> pre_tanh;                 // aggregated sum before tanh
        std::vector<Tensor<T>> head_terms;  // each upsampled to (B, 3, R, R)
    };

    Outputs fwd_detailed(Ctx<T>& ctx, Tensor<T> z, Tensor<T> f_t, const CaptionBatch& batch) const {
        const int B = z.shape()[0];
        const int r0 = cfg.resolutions[0];
        const int c0 = cfg.channels_at(r0);
        Tensor<T> x = leaky_relu(reshape(z_proj.fwd(ctx, z), {B, c0, r0, r0}));
        Outputs out;
        for (const auto& b : blocks) {
            x = leaky_relu(b.conv.fwd(ctx, upsample_nearest(x, 2)));
            const int c = x.shape()[1], res = b.res;
            if (b.has_tcit) {
                Tensor<T> rows = reshape(permute(x, {0, 2, 3, 1}), {B, res * res, c});
                if (cfg.use_2d_encoding) rows = add_encoding(rows, b.pos2d);
                rows = b.tcit.fwd(ctx, rows, f_t, batch);
                x = permute(reshape(rows, {B, res, res, c}), {0, 3, 1, 2});
            }
            if (b.has_rgb) {
                Tensor<T> rgb = b.rgb.fwd(ctx, x);
                const int f = cfg.out_res / res;
                if (f > 1) rgb = upsample_bilinear(rgb, f);
                out.head_terms.push_back(rgb);
            }
        }
        TIG_CHECK(!out.head_terms.empty(), "generator: no rgb heads configured");
        Tensor<T> agg = out.head_terms[0];
        for (size_t i = 1; i < out.head_terms.size(); ++i) agg = add(agg, out.head_terms[i]);
        out.pre_tanh = agg;
        out.image = tanh_t(agg);
        return out;
    }

    Tensor<T> fwd(Ctx<T>& ctx, Tensor<T> z, Tensor<T> f_t, const CaptionBatch& batch) const {
        return fwd_detailed(ctx, z, f_t, batch).image;
    }
};

// standard-normal z batch from a stateful stream
template <class T>
Array<T> sample_noise(Rng& rng, int batch, int z_dim) {
    Array<T> z({batch, z_dim});
    for (long i = 0; i < z.size(); ++i) z[i] = T(rng.normal());
    return z;
}

}  // namespace tig
