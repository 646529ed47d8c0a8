#pragma once
// Tokenizer, causal Transformer text encoder (Enc) and the image-conditioned
// Transformer text decoder (Dec) that performs captioning for D.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <unordered_map>

#include "tig/encoding.hpp"
#include "tig/nn.hpp"

namespace tig {

struct Vocab {
    static constexpr int pad = 0, bos = 1, eos = 2, unk = 3;

    std::vector<std::string> words{"<pad>", "<bos>", "<eos>", "<unk>"};
    std::unordered_map<std::string, int> index;

    int size() const { return int(words.size()); }

    int add(const std::string& w) {
        auto it = index.find(w);
        if (it != index.end()) return it->second;
        words.push_back(w);
        index[w] = int(words.size()) - 1;
        return int(words.size()) - 1;
    }

    int id(const std::string& w) const {
        auto it = index.find(w);
        return it == index.end() ? unk : it->second;
    }

    const std::string& word(int id) const {
        return (id >= 0 && id < size()) ? words[size_t(id)] : words[unk];
    }

    void save(const std::string& path) const {
        std::ofstream f(path);
        TIG_CHECK(f.good(), "vocab: cannot write " + path);
        for (const auto& w : words) f << w << "\n";
    }

    static Vocab load(const std::string& path) {
        std::ifstream f(path);
        TIG_CHECK(f.good(), "vocab: cannot read " + path);
        Vocab v;
        v.words.clear();
        std::string line;
        while (std::getline(f, line)) v.words.push_back(line);
        TIG_CHECK(v.words.size() >= 4, "vocab: file too short");
        for (size_t i = 4; i < v.words.size(); ++i) v.index[v.words[i]] = int(i);
        return v;
    }
};

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(char(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// lowercase, whitespace split, wrap in <bos>...<eos>, unknowns -> <unk>
inline std::vector<int> tokenize(const std::string& text, const Vocab& vocab) {
    std::vector<int> ids{Vocab::bos};
    for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
    ids.push_back(Vocab::eos);
    return ids;
}

struct CaptionBatch {
    IArray ids;                // (B, L)
    std::vector<int> lengths;  // real tokens incl. <bos>/<eos>
    Array<uint8_t> pad_mask;   // (B, L), 1 at padded positions

    int batch() const { return ids.shape[0]; }
    int len() const { return ids.shape[1]; }

    static CaptionBatch from(const std::vector<std::vector<int>>& seqs, int min_len = 0) {
        TIG_CHECK(!seqs.empty(), "CaptionBatch: empty batch");
        int L = min_len;
        for (auto& s : seqs) L = std::max(L, int(s.size()));
        const int B = int(seqs.size());
        CaptionBatch b;
        b.ids = IArray({B, L});
        b.pad_mask = Array<uint8_t>({B, L});
        for (int i = 0; i < B; ++i) {
            b.lengths.push_back(int(seqs[size_t(i)].size()));
            for (int j = 0; j < L; ++j) {
                const bool real = j < int(seqs[size_t(i)].size());
                b.ids[long(i) * L + j] = real ? seqs[size_t(i)][size_t(j)] : Vocab::pad;
                b.pad_mask[long(i) * L + j] = real ? 0 : 1;
            }
        }
        return b;
    }
};

// ---------------------------------------------------------------------------
// multi-head attention

template <class T>
struct MultiHeadAttention {
    Linear<T> q, k, v, o;
    int heads = 4;
    bool shared_kv = false;  // AttnGAN-style: one projection for both K and V
    bool keep_probs = false; // test probe
    mutable Array<T> last_probs;

    static MultiHeadAttention create(ParamStore<T>& ps, Rng& rng, const std::string& name, int c,
                                     int kv_dim, int heads, bool equalized, bool shared_kv = false) {
        TIG_CHECK(c % heads == 0, "attention: width " + std::to_string(c) + " not divisible by " +
                                      std::to_string(heads) + " heads");
        MultiHeadAttention a;
        a.heads = heads;
        a.shared_kv = shared_kv;
        a.q = Linear<T>::create(ps, rng, name + ".q", c, c, equalized);
        a.k = Linear<T>::create(ps, rng, name + ".k", kv_dim, c, equalized);
        if (!shared_kv) a.v = Linear<T>::create(ps, rng, name + ".v", kv_dim, c, equalized);
        a.o = Linear<T>::create(ps, rng, name + ".o", c, c, equalized);
        return a;
    }

    long param_count() const {
        long n = q.W->w.size() + q.b->w.size() + k.W->w.size() + k.b->w.size() + o.W->w.size() + o.b->w.size();
        if (!shared_kv) n += v.W->w.size() + v.b->w.size();
        return n;
    }

    // q_in (B, Lq, c), kv_in (B, Lk, kv_dim); mask (suffix-broadcastable to
    // (B*H, Lq, Lk)), 1 = blocked.
    Tensor<T> fwd(Ctx<T>& ctx, Tensor<T> q_in, Tensor<T> kv_in, const Array<uint8_t>* mask = nullptr) const {
        const int B = q_in.shape()[0], Lq = q_in.shape()[1], c = q_in.shape()[2];
        const int Lk = kv_in.shape()[1];
        const int H = heads, hd = c / H;
        auto split = [&](Tensor<T> x, int L) {
            return reshape(permute(reshape(x, {B, L, H, hd}), {0, 2, 1, 3}), {B * H, L, hd});
        };
        Tensor<T> Q = split(q.fwd(ctx, q_in), Lq);
        Tensor<T> K = split(k.fwd(ctx, kv_in), Lk);
        Tensor<T> V = split((shared_kv ? k : v).fwd(ctx, kv_in), Lk);
        Tensor<T> scores = scale(matmul(Q, K, false, true), T(1) / T(std::sqrt(double(hd))));
        if (mask) scores = masked_fill(scores, *mask, T(-1e30));
        Tensor<T> probs = softmax_last(scores);
        if (keep_probs) last_probs = probs.val();
        Tensor<T> out = matmul(probs, V);  // (B*H, Lq, hd)
        out = reshape(permute(reshape(out, {B, H, Lq, hd}), {0, 2, 1, 3}), {B, Lq, c});
        return o.fwd(ctx, out);
    }
};

// blocked-entry mask over (B*H, Lq, Lk); pad masks blocked keys, causal
// blocks keys past the query position
inline Array<uint8_t> attn_mask(const CaptionBatch& batch, int heads, bool causal) {
    const int B = batch.batch(), L = batch.len();
    Array<uint8_t> m({B * heads, L, L});
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < L; ++j) {
                    const bool blocked = batch.pad_mask[long(b) * L + j] || (causal && j > i);
                    m[((long(b) * heads + h) * L + i) * L + j] = blocked ? 1 : 0;
                }
    return m;
}

// ---------------------------------------------------------------------------
// Enc: token embedding + 1-D positions, N pre-norm causal self-attention
// layers, final layer norm. Returns contextual word embeddings f_t.

struct TextConfig {
    int vocab = 4;
    int e = 64;
    int heads = 4;
    int enc_layers = 4;
    int dec_layers = 4;
    int ffw = 256;
    int max_len = 24;
    int img_dim = 128;   // channel width of the flattened image feature rows
    bool equalized = true;
};

template <class T>
struct TextEncoder {
    TextConfig cfg;
    Embedding<T> tok;
    struct Layer {
        MultiHeadAttention<T> att;
        LayerNorm<T> ln1, ln2;
        Linear<T> f1, f2;
    };
    std::vector<Layer> layers;
    LayerNorm<T> lnf;
    Array<T> pos;

    static TextEncoder create(ParamStore<T>& ps, Rng& rng, const TextConfig& cfg, const std::string& prefix = "enc") {
        TextEncoder enc;
        enc.cfg = cfg;
        enc.tok = Embedding<T>::create(ps, rng, prefix + ".tok", cfg.vocab, cfg.e);
        for (int l = 0; l < cfg.enc_layers; ++l) {
            const std::string ln = prefix + ".l" + std::to_string(l);
            Layer layer{
                MultiHeadAttention<T>::create(ps, rng, ln + ".att", cfg.e, cfg.e, cfg.heads, cfg.equalized),
                LayerNorm<T>::create(ps, ln + ".ln1", cfg.e),
                LayerNorm<T>::create(ps, ln + ".ln2", cfg.e),
                Linear<T>::create(ps, rng, ln + ".f1", cfg.e, cfg.ffw, cfg.equalized),
                Linear<T>::create(ps, rng, ln + ".f2", cfg.ffw, cfg.e, cfg.equalized),
            };
            enc.layers.push_back(std::move(layer));
        }
        enc.lnf = LayerNorm<T>::create(ps, prefix + ".lnf", cfg.e);
        enc.pos = pos_encode_1d<T>(cfg.max_len, cfg.e);
        return enc;
    }

    // (B, L, e)
    Tensor<T> fwd(Ctx<T>& ctx, const CaptionBatch& batch) const {
        const int L = batch.len();
        TIG_CHECK(L <= cfg.max_len, "enc: sequence longer than max_len");
        Tensor<T> x = tok.fwd(ctx, batch.ids);
        Array<T> ptab({L, cfg.e});
        std::copy_n(pos.data(), long(L) * cfg.e, ptab.data());
        x = add_encoding(x, ptab);
        const Array<uint8_t> mask = attn_mask(batch, cfg.heads, /*causal=*/true);
        for (const auto& l : layers) {
            Tensor<T> h = l.ln1.fwd(ctx, x);
            x = add(x, l.att.fwd(ctx, h, h, &mask));
            x = add(x, l.f2.fwd(ctx, leaky_relu(l.f1.fwd(ctx, l.ln2.fwd(ctx, x)))));
        }
        return lnf.fwd(ctx, x);
    }
};

// ---------------------------------------------------------------------------
// Dec: per layer, causal self-attention over text then cross-attention with
// Q from text and K,V from the flattened image feature rows; final linear to
// vocabulary logits. Logits at position k predict token k+1.

template <class T>
struct TextDecoder {
    TextConfig cfg;
    struct Layer {
        MultiHeadAttention<T> self_att, cross_att;
        LayerNorm<T> ln1, ln2, ln3;
        Linear<T> f1, f2;
    };
    std::vector<Layer> layers;
    LayerNorm<T> lnf;
    Linear<T> out;

    static TextDecoder create(ParamStore<T>& ps, Rng& rng, const TextConfig& cfg, const std::string& prefix = "dec") {
        TextDecoder dec;
        dec.cfg = cfg;
        for (int l = 0; l < cfg.dec_layers; ++l) {
            const std::string ln = prefix + ".l" + std::to_string(l);
            Layer layer{
                MultiHeadAttention<T>::create(ps, rng, ln + ".satt", cfg.e, cfg.e, cfg.heads, cfg.equalized),
                MultiHeadAttention<T>::create(ps, rng, ln + ".xatt", cfg.e, cfg.img_dim, cfg.heads, cfg.equalized),
                LayerNorm<T>::create(ps, ln + ".ln1", cfg.e),
                LayerNorm<T>::create(ps, ln + ".ln2", cfg.e),
                LayerNorm<T>::create(ps, ln + ".ln3", cfg.e),
                Linear<T>::create(ps, rng, ln + ".f1", cfg.e, cfg.ffw, cfg.equalized),
                Linear<T>::create(ps, rng, ln + ".f2", cfg.ffw, cfg.e, cfg.equalized),
            };
            dec.layers.push_back(std::move(layer));
        }
        dec.lnf = LayerNorm<T>::create(ps, prefix + ".lnf", cfg.e);
        dec.out = Linear<T>::create(ps, rng, prefix + ".out", cfg.e, cfg.vocab, cfg.equalized, T(1));
        return dec;
    }

    // f_t (B, L, e), f_img (B, d, img_dim) -> logits (B, L, vocab)
    Tensor<T> fwd(Ctx<T>& ctx, Tensor<T> f_t, const CaptionBatch& batch, Tensor<T> f_img) const {
        const Array<uint8_t> mask = attn_mask(batch, cfg.heads, /*causal=*/true);
        Tensor<T> x = f_t;
        for (const auto& l : layers) {
            Tensor<T> h = l.ln1.fwd(ctx, x);
            x = add(x, l.self_att.fwd(ctx, h, h, &mask));
            x = add(x, l.cross_att.fwd(ctx, l.ln2.fwd(ctx, x), f_img));
            x = add(x, l.f2.fwd(ctx, leaky_relu(l.f1.fwd(ctx, l.ln3.fwd(ctx, x)))));
        }
        return out.fwd(ctx, lnf.fwd(ctx, x));
    }
};

// Greedy decoding: start from <bos>, append the argmax next token until
// <eos> or max_len tokens have been generated.
template <class T>
std::vector<int> greedy_caption(const TextEncoder<T>& enc, const TextDecoder<T>& dec,
                                const Array<T>& f_img_one,  // (d, img_dim)
                                int max_len) {
    std::vector<int> seq{Vocab::bos};
    for (int step = 0; step < max_len; ++step) {
        Tape<T> tape;
        tape.grad_enabled = false;
        Ctx<T> ctx{tape, /*train=*/false};
        CaptionBatch b = CaptionBatch::from({seq});
        Tensor<T> f_t = enc.fwd(ctx, b);
        Shape s3 = {1, f_img_one.shape[0], f_img_one.shape[1]};
        Tensor<T> fi = tape.constant(Array<T>(s3, f_img_one.v));
        Tensor<T> logits = dec.fwd(ctx, f_t, b, fi);
        const int V = logits.shape()[2];
        const long off = (long(b.len()) - 1) * V;
        int best = 0;
        for (int j = 1; j < V; ++j)
            if (logits.val()[off + j] > logits.val()[off + best]) best = j;
        seq.push_back(best);
        if (best == Vocab::eos) break;
    }
    return seq;
}

}  // namespace tig
