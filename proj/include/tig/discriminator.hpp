#pragma once
// Convolutional trunk with three heads sharing its feature map:
//   d_features  -> rows for the captioning decoder
//   d_uncond    -> real/fake probability (no text)
//   d_cond      -> text/image match score (word grid concatenated channel-wise)
// The whole unconditional path is piecewise linear, so the gradient of its
// logit w.r.t. the input image can be expressed exactly with recorded
// primitives; r1_grad_graph builds that expression for the R1 penalty.

#include "tig/text.hpp"

namespace tig {

struct DiscConfig {
    int in_res = 64;
    std::vector<int> trunk_channels = {32, 64, 128};  // strided 3x3 convs, x2 down each
    int uncond_channels = 64;
    int cond_channels = 64;
    int text_dim = 64;
    int grid = 4;        // word grid side; holds grid*grid caption words
    int word_start = 1;  // first caption position placed on the grid (skips <bos>)
    bool equalized = true;

    int c_d() const { return trunk_channels.back(); }
    int feat_res() const { return in_res >> int(trunk_channels.size()); }
};

template <class T>
struct Discriminator {
    DiscConfig cfg;
    std::vector<Conv<T>> trunk;
    Conv<T> u_conv;  // 1x1
    Linear<T> u_out;
    Linear<T> word_proj;  // text_dim -> c_d
    Conv<T> c_conv1;      // 3x3 on the concatenated grid
    Conv<T> c_conv2;      // full-grid kernel -> scalar

    static Discriminator create(ParamStore<T>& ps, Rng& rng, const DiscConfig& cfg,
                                const std::string& prefix = "d") {
        Discriminator d;
        d.cfg = cfg;
        int cin = 3;
        for (size_t i = 0; i < cfg.trunk_channels.size(); ++i) {
            d.trunk.push_back(Conv<T>::create(ps, rng, prefix + ".t" + std::to_string(i), cin,
                                              cfg.trunk_channels[i], 3, 2, 1, cfg.equalized));
            cin = cfg.trunk_channels[i];
        }
        d.u_conv = Conv<T>::create(ps, rng, prefix + ".u.conv", cfg.c_d(), cfg.uncond_channels, 1, 1, 0,
                                   cfg.equalized);
        d.u_out = Linear<T>::create(ps, rng, prefix + ".u.out", cfg.uncond_channels, 1, cfg.equalized);
        d.word_proj = Linear<T>::create(ps, rng, prefix + ".c.proj", cfg.text_dim, cfg.c_d(), cfg.equalized);
        d.c_conv1 = Conv<T>::create(ps, rng, prefix + ".c.conv1", 2 * cfg.c_d(), cfg.cond_channels, 3, 1, 1,
                                    cfg.equalized);
        d.c_conv2 = Conv<T>::create(ps, rng, prefix + ".c.conv2", cfg.cond_channels, 1, cfg.grid, 1, 0,
                                    cfg.equalized, T(1));
        return d;
    }

    // (B, 3, R, R) -> (B, c_d, r, r)
    Tensor<T> features(Ctx<T>& ctx, Tensor<T> img) const {
        Tensor<T> x = img;
        for (const auto& conv : trunk) x = leaky_relu(conv.fwd(ctx, x));
        return x;
    }

    // feature rows for the captioning decoder: (B, r*r, c_d)
    Tensor<T> feature_rows(Ctx<T>& ctx, Tensor<T> f_map) const {
        const int B = f_map.shape()[0], c = f_map.shape()[1], r = f_map.shape()[2];
        return reshape(permute(f_map, {0, 2, 3, 1}), {B, r * r, c});
    }

    // real/fake logit (B, 1); sigmoid is applied by the loss
    Tensor<T> uncond_logit(Ctx<T>& ctx, Tensor<T> f_map) const {
        Tensor<T> h = leaky_relu(u_conv.fwd(ctx, f_map));
        const int B = h.shape()[0], c = h.shape()[1];
        Tensor<T> pooled = reshape(mean_last(reshape(h, {B, c, h.shape()[2] * h.shape()[3]})), {B, c});
        return u_out.fwd(ctx, pooled);
    }

    // zeroes out grid slots holding <bos>/<eos>/<pad> (and anything beyond the
    // caption), keeping the first grid*grid content words
    Array<T> word_grid_mask(const CaptionBatch& batch) const {
        const int B = batch.batch(), L = batch.len(), n = cfg.grid * cfg.grid, e = cfg.text_dim;
        Array<T> m({B, n, e});
        for (int b = 0; b < B; ++b)
            for (int s = 0; s < n; ++s) {
                const int j = cfg.word_start + s;
                bool content = j < L && !batch.pad_mask[long(b) * L + j];
                if (content) {
                    const int id = batch.ids[long(b) * L + j];
                    content = id != Vocab::bos && id != Vocab::eos && id != Vocab::pad;
                }
                if (content)
                    for (int ch = 0; ch < e; ++ch) m[(long(b) * n + s) * e + ch] = T(1);
            }
        return m;
    }

    // match score (B, 1): word embeddings on a grid, channel-concatenated with
    // the pooled feature map, two convs down to a scalar
    Tensor<T> cond_score(Ctx<T>& ctx, Tensor<T> f_map, Tensor<T> f_t, const CaptionBatch& batch) const {
        const int B = f_map.shape()[0], g = cfg.grid, n = g * g, L = batch.len();
        Tensor<T> pooled = f_map;
        while (pooled.shape()[2] > g) pooled = avgpool2(pooled);
        TIG_CHECK(pooled.shape()[2] == g, "d_cond: feature map does not pool to the word grid");

        const int avail = std::min(n, L - cfg.word_start);
        TIG_CHECK(avail >= 1, "d_cond: caption too short for the word grid");
        Tensor<T> words = slice(f_t, 1, cfg.word_start, avail);
        if (avail < n) {
            Tape<T>& t = *words.tp;
            words = concat(std::vector<Tensor<T>>{words, t.constant(Array<T>({B, n - avail, cfg.text_dim}))}, 1);
        }
        words = mul(words, words.tp->constant(word_grid_mask(batch)));
        Tensor<T> grid = word_proj.fwd(ctx, words);                      // (B, n, c_d)
        grid = permute(reshape(grid, {B, g, g, cfg.c_d()}), {0, 3, 1, 2});  // row-major fill
        Tensor<T> x = concat(std::vector<Tensor<T>>{pooled, grid}, 1);
        x = leaky_relu(c_conv1.fwd(ctx, x));
        return reshape(c_conv2.fwd(ctx, x), {B, 1});
    }

    // Builds (logit, d logit / d img) with the input gradient expressed in
    // recorded primitives, so sum-of-squares of the gradient can itself be
    // differentiated. Activation masks are taken at the forward values;
    // leaky-relu curvature is zero almost everywhere, making this exact.
    struct R1Graph {
        Tensor<T> logit;     // (B, 1)
        Tensor<T> img_grad;  // (B, 3, R, R)
    };
    R1Graph r1_grad_graph(Ctx<T>& ctx, Tensor<T> img) const {
        const T slope = T(0.2);
        std::vector<Tensor<T>> pre, post, weights;
        Tensor<T> x = img;
        for (const auto& conv : trunk) {
            Tensor<T> a = conv.fwd(ctx, x);
            pre.push_back(a);
            weights.push_back(conv.weight(ctx));
            x = leaky_relu(a);
            post.push_back(x);
        }
        Tensor<T> a_u = u_conv.fwd(ctx, x);
        Tensor<T> h_u = leaky_relu(a_u);
        const int B = h_u.shape()[0], c = h_u.shape()[1], r = h_u.shape()[2];
        Tensor<T> pooled = reshape(mean_last(reshape(h_u, {B, c, r * r})), {B, c});
        Tensor<T> logit = u_out.fwd(ctx, pooled);

        Tape<T>& t = *img.tp;
        auto lrelu_mask = [&](const Tensor<T>& a) {
            Array<T> m(a.shape());
            const auto& v = a.val();
            for (long i = 0; i < m.size(); ++i) m[i] = v[i] > T(0) ? T(1) : slope;
            return t.constant(m);
        };

        // d logit / d pooled is the (scaled) output weight row, tiled over the batch
        Tensor<T> w_row = u_out.wscale != T(1) ? scale(ctx.use(*u_out.W), u_out.wscale) : ctx.use(*u_out.W);
        Array<T> ones_col({B, 1});
        for (long i = 0; i < B; ++i) ones_col[i] = T(1);
        Tensor<T> d_pooled = matmul(t.constant(ones_col), w_row);  // (B, c)
        Tensor<T> d_h = scale(upsample_nearest(reshape(d_pooled, {B, c, 1, 1}), r), T(1) / T(r * r));
        Tensor<T> d_a = mul(d_h, lrelu_mask(a_u));
        Tensor<T> d_x = conv2d_input_grad(d_a, u_conv.weight(ctx), post.back().shape(), 1, 0);
        for (int i = int(trunk.size()) - 1; i >= 0; --i) {
            d_a = mul(d_x, lrelu_mask(pre[size_t(i)]));
            const Shape& in_shape = i == 0 ? img.shape() : post[size_t(i) - 1].shape();
            d_x = conv2d_input_grad(d_a, weights[size_t(i)], in_shape, trunk[size_t(i)].stride,
                                    trunk[size_t(i)].pad);
        }
        return {logit, d_x};
    }
};

}  // namespace tig
