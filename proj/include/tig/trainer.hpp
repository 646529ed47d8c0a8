#pragma once
// Alternating training loop, checkpoint serialization and evaluation metrics.

#include <cstring>
#include <iomanip>
#include <map>
#include <sstream>

#include "tig/dataset.hpp"
#include "tig/discriminator.hpp"
#include "tig/generator.hpp"
#include "tig/losses.hpp"

namespace tig {

struct TrainConfig {
    int epochs = 120;
    int batch = 16;
    double lr = 2e-4;
    double beta1 = 0.0, beta2 = 0.9;
    std::string anneal = "dynamic";
    int tcit_heads = 4;
    int tcit_layers = 2;
    bool captioning = true;     // ablation: drop the captioning loss when off
    bool encode_2d = true;      // ablation: 2-d positional encoding in G
    bool hinge = true;          // plain BCE conditional loss when off
    bool equalized = true;
    bool shared_kv = false;
    uint64_t seed = 1;
    int eval_every = 5;         // epochs; 0 disables in-loop eval
    int eval_trials = 128;
    int r1_every = 8;
    double r1_gamma = 10.0;
    int max_steps = 0;          // 0 = full run; tests cap this
    // corpus
    int n_scenes = 1280;
    double split = 0.9;
    uint64_t data_seed = 7;
    // model widths
    int text_e = 64;
    int text_heads = 4;
    int enc_layers = 2;
    int dec_layers = 2;
    int text_ffw = 128;
    int z_dim = 64;
    std::vector<int> g_channels = {64, 48, 24, 16, 8};
    std::vector<int> d_channels = {24, 48, 80};
    int d_uncond_channels = 48;
    int d_cond_channels = 48;

    static std::string join(const std::vector<int>& v) {
        std::string s;
        for (size_t i = 0; i < v.size(); ++i) s += (i ? ":" : "") + std::to_string(v[size_t(i)]);
        return s;
    }

    std::string serialize() const {
        std::ostringstream s;
        s << "epochs=" << epochs << "\nbatch=" << batch << "\nlr=" << lr << "\nbeta1=" << beta1
          << "\nbeta2=" << beta2 << "\nanneal=" << anneal << "\ntcit_heads=" << tcit_heads
          << "\ntcit_layers=" << tcit_layers << "\ncaptioning=" << captioning
          << "\nencode_2d=" << encode_2d << "\nhinge=" << hinge << "\nequalized=" << equalized
          << "\nshared_kv=" << shared_kv << "\nseed=" << seed << "\neval_every=" << eval_every
          << "\neval_trials=" << eval_trials << "\nr1_every=" << r1_every << "\nr1_gamma=" << r1_gamma
          << "\nmax_steps=" << max_steps << "\nn_scenes=" << n_scenes << "\nsplit=" << split
          << "\ndata_seed=" << data_seed << "\ntext_e=" << text_e << "\ntext_heads=" << text_heads
          << "\nenc_layers=" << enc_layers << "\ndec_layers=" << dec_layers << "\ntext_ffw=" << text_ffw
          << "\nz_dim=" << z_dim << "\ng_channels=" << join(g_channels)
          << "\nd_channels=" << join(d_channels) << "\nd_uncond_channels=" << d_uncond_channels
          << "\nd_cond_channels=" << d_cond_channels << "\n";
        return s.str();
    }
    uint64_t hash() const {
        uint64_t h = 0x243f6a8885a308d3ULL;
        for (char c : serialize()) h = splitmix64(h ^ uint64_t(uint8_t(c)));
        return h;
    }
};

inline std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ':')) out.push_back(std::stoi(tok));
    TIG_CHECK(!out.empty(), "config: empty int list");
    return out;
}

// flat key=value settings; keys mirror TrainConfig::serialize exactly
inline void set_config_key(TrainConfig& c, const std::string& k, const std::string& v) {
    if (k == "epochs") c.epochs = std::stoi(v);
    else if (k == "batch") c.batch = std::stoi(v);
    else if (k == "lr") c.lr = std::stod(v);
    else if (k == "beta1") c.beta1 = std::stod(v);
    else if (k == "beta2") c.beta2 = std::stod(v);
    else if (k == "anneal") c.anneal = v;
    else if (k == "tcit_heads") c.tcit_heads = std::stoi(v);
    else if (k == "tcit_layers") c.tcit_layers = std::stoi(v);
    else if (k == "captioning") c.captioning = std::stoi(v) != 0;
    else if (k == "encode_2d") c.encode_2d = std::stoi(v) != 0;
    else if (k == "hinge") c.hinge = std::stoi(v) != 0;
    else if (k == "equalized") c.equalized = std::stoi(v) != 0;
    else if (k == "shared_kv") c.shared_kv = std::stoi(v) != 0;
    else if (k == "seed") c.seed = std::stoull(v);
    else if (k == "eval_every") c.eval_every = std::stoi(v);
    else if (k == "eval_trials") c.eval_trials = std::stoi(v);
    else if (k == "r1_every") c.r1_every = std::stoi(v);
    else if (k == "r1_gamma") c.r1_gamma = std::stod(v);
    else if (k == "max_steps") c.max_steps = std::stoi(v);
    else if (k == "n_scenes") c.n_scenes = std::stoi(v);
    else if (k == "split") c.split = std::stod(v);
    else if (k == "data_seed") c.data_seed = std::stoull(v);
    else if (k == "text_e") c.text_e = std::stoi(v);
    else if (k == "text_heads") c.text_heads = std::stoi(v);
    else if (k == "enc_layers") c.enc_layers = std::stoi(v);
    else if (k == "dec_layers") c.dec_layers = std::stoi(v);
    else if (k == "text_ffw") c.text_ffw = std::stoi(v);
    else if (k == "z_dim") c.z_dim = std::stoi(v);
    else if (k == "g_channels") c.g_channels = split_ints(v);
    else if (k == "d_channels") c.d_channels = split_ints(v);
    else if (k == "d_uncond_channels") c.d_uncond_channels = std::stoi(v);
    else if (k == "d_cond_channels") c.d_cond_channels = std::stoi(v);
    else fail("config: unknown key " + k);
}

inline void parse_config(TrainConfig& cfg, std::istream& in) {
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        TIG_CHECK(eq != std::string::npos, "config: expected key=value, got: " + line);
        set_config_key(cfg, line.substr(0, eq), line.substr(eq + 1));
    }
}

struct Model {
    ParamStore<float> ps;
    Vocab vocab;
    TextConfig tcfg;
    GeneratorConfig gcfg;
    DiscConfig dcfg;
    TextEncoder<float> enc;
    TextDecoder<float> dec;
    Generator<float> gen;
    Discriminator<float> disc;

    static Model create(const TrainConfig& cfg) {
        Model m;
        m.vocab = corpus_vocab();
        m.tcfg.vocab = m.vocab.size();
        m.tcfg.e = cfg.text_e;
        m.tcfg.heads = cfg.text_heads;
        m.tcfg.enc_layers = cfg.enc_layers;
        m.tcfg.dec_layers = cfg.dec_layers;
        m.tcfg.ffw = cfg.text_ffw;
        m.tcfg.equalized = cfg.equalized;
        m.gcfg.z_dim = cfg.z_dim;
        m.gcfg.text_dim = cfg.text_e;
        m.gcfg.tcit_heads = cfg.tcit_heads;
        m.gcfg.tcit_layers = cfg.tcit_layers;
        m.gcfg.use_2d_encoding = cfg.encode_2d;
        m.gcfg.shared_kv = cfg.shared_kv;
        m.gcfg.equalized = cfg.equalized;
        m.gcfg.channels = cfg.g_channels;
        m.dcfg.text_dim = cfg.text_e;
        m.dcfg.equalized = cfg.equalized;
        m.dcfg.trunk_channels = cfg.d_channels;
        m.dcfg.uncond_channels = cfg.d_uncond_channels;
        m.dcfg.cond_channels = cfg.d_cond_channels;
        m.tcfg.img_dim = m.dcfg.c_d();
        Rng rng(splitmix64(cfg.seed ^ 0x6d6f64656cULL));
        m.enc = TextEncoder<float>::create(m.ps, rng, m.tcfg);
        m.dec = TextDecoder<float>::create(m.ps, rng, m.tcfg);
        m.gen = Generator<float>::create(m.ps, rng, m.gcfg);
        m.disc = Discriminator<float>::create(m.ps, rng, m.dcfg);
        return m;
    }

    std::vector<Param<float>*> by_prefix(std::initializer_list<const char*> prefixes) const {
        std::vector<Param<float>*> out;
        for (auto* p : ps.all())
            for (const char* pre : prefixes)
                if (p->name.rfind(pre, 0) == 0) {
                    out.push_back(p);
                    break;
                }
        return out;
    }
    std::vector<Param<float>*> d_phase_params() const { return by_prefix({"d.", "dec.", "enc."}); }
    std::vector<Param<float>*> g_phase_params() const { return by_prefix({"g.", "enc."}); }
};

// ---------------------------------------------------------------------------
// checkpoints: magic "TIME", version u32, then length-prefixed records of
// (name, shape, little-endian f32 payload)

namespace detail {

inline void put_u32(std::ostream& f, uint32_t v) {
    char b[4] = {char(v & 255), char((v >> 8) & 255), char((v >> 16) & 255), char((v >> 24) & 255)};
    f.write(b, 4);
}
inline uint32_t get_u32(std::istream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    TIG_CHECK(f.good(), "checkpoint: truncated file");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}
inline void put_record(std::ostream& f, const std::string& name, const Shape& shape,
                       const float* data, long n) {
    put_u32(f, uint32_t(name.size()));
    f.write(name.data(), long(name.size()));
    put_u32(f, uint32_t(shape.size()));
    for (int d : shape) put_u32(f, uint32_t(d));
    for (long i = 0; i < n; ++i) {
        uint32_t bits;
        std::memcpy(&bits, &data[i], 4);
        put_u32(f, bits);
    }
}

struct Record {
    Shape shape;
    std::vector<float> data;
};

inline std::map<std::string, Record> read_records(std::istream& f) {
    std::map<std::string, Record> out;
    while (true) {
        if (f.peek() == std::istream::traits_type::eof()) break;
        const uint32_t nl = get_u32(f);
        TIG_CHECK(nl < 4096, "checkpoint: implausible record name length");
        std::string name(nl, '\0');
        f.read(name.data(), nl);
        const uint32_t nd = get_u32(f);
        TIG_CHECK(nd < 16, "checkpoint: implausible rank");
        Record r;
        long n = 1;
        for (uint32_t i = 0; i < nd; ++i) {
            r.shape.push_back(int(get_u32(f)));
            n *= r.shape.back();
        }
        r.data.resize(size_t(n));
        for (long i = 0; i < n; ++i) {
            const uint32_t bits = get_u32(f);
            std::memcpy(&r.data[size_t(i)], &bits, 4);
        }
        out.emplace(std::move(name), std::move(r));
    }
    return out;
}

inline std::pair<float, float> split_u64(uint64_t v) {
    float a, b;
    const uint32_t lo = uint32_t(v), hi = uint32_t(v >> 32);
    std::memcpy(&a, &lo, 4);
    std::memcpy(&b, &hi, 4);
    return {a, b};
}
inline uint64_t join_u64(float a, float b) {
    uint32_t lo, hi;
    std::memcpy(&lo, &a, 4);
    std::memcpy(&hi, &b, 4);
    return uint64_t(lo) | uint64_t(hi) << 32;
}

}  // namespace detail

struct TrainerState {
    int epoch = 0;
    long adam_t_d = 0, adam_t_g = 0;
    uint64_t rng_state = 1;
};

inline void save_checkpoint(const std::string& path, const Model& m, const TrainerState& st,
                            uint64_t config_hash, const std::string& config_text = "") {
    std::ofstream f(path, std::ios::binary);
    TIG_CHECK(f.good(), "checkpoint: cannot write " + path);
    f.write("TIME", 4);
    detail::put_u32(f, 1);
    for (auto* p : m.ps.all()) {
        detail::put_record(f, "p:" + p->name, p->w.shape, p->w.data(), p->w.size());
        detail::put_record(f, "m:" + p->name, p->m.shape, p->m.data(), p->m.size());
        detail::put_record(f, "v:" + p->name, p->v.shape, p->v.data(), p->v.size());
    }
    const float meta[4] = {float(st.epoch), float(st.adam_t_d), float(st.adam_t_g), 0.0f};
    detail::put_record(f, "meta:state", {4}, meta, 4);
    auto [rl, rh] = detail::split_u64(st.rng_state);
    const float rng[2] = {rl, rh};
    detail::put_record(f, "meta:rng", {2}, rng, 2);
    auto [cl, ch] = detail::split_u64(config_hash);
    const float cfgh[2] = {cl, ch};
    detail::put_record(f, "meta:config", {2}, cfgh, 2);
    if (!config_text.empty()) {  // lets the CLI rebuild a model from the file alone
        std::vector<float> chars(config_text.begin(), config_text.end());
        detail::put_record(f, "meta:config_text", {int(chars.size())}, chars.data(),
                           long(chars.size()));
    }
}

// the embedded config of a checkpoint, or "" when the record is absent
inline std::string checkpoint_config_text(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    TIG_CHECK(f.good(), "checkpoint: cannot read " + path);
    char magic[4] = {};
    f.read(magic, 4);
    TIG_CHECK(f.good() && std::string(magic, 4) == "TIME", "checkpoint: bad magic in " + path);
    TIG_CHECK(detail::get_u32(f) == 1, "checkpoint: unsupported version in " + path);
    auto records = detail::read_records(f);
    auto it = records.find("meta:config_text");
    if (it == records.end()) return "";
    std::string out;
    for (float c : it->second.data) out.push_back(char(int(c)));
    return out;
}

inline TrainerState load_checkpoint(const std::string& path, Model& m, uint64_t expect_config_hash = 0) {
    std::ifstream f(path, std::ios::binary);
    TIG_CHECK(f.good(), "checkpoint: cannot read " + path);
    char magic[4] = {};
    f.read(magic, 4);
    TIG_CHECK(f.good() && std::string(magic, 4) == "TIME", "checkpoint: bad magic in " + path);
    TIG_CHECK(detail::get_u32(f) == 1, "checkpoint: unsupported version in " + path);
    auto records = detail::read_records(f);
    for (auto* p : m.ps.all()) {
        for (auto [kind, arr] : {std::pair{"p:", &p->w}, {"m:", &p->m}, {"v:", &p->v}}) {
            auto it = records.find(kind + p->name);
            TIG_CHECK(it != records.end(), "checkpoint: missing record for " + p->name);
            TIG_CHECK(it->second.shape == arr->shape, "checkpoint: shape mismatch for " + p->name);
            arr->v = it->second.data;
        }
    }
    TrainerState st;
    const auto& meta = records.at("meta:state").data;
    st.epoch = int(meta[0]);
    st.adam_t_d = long(meta[1]);
    st.adam_t_g = long(meta[2]);
    const auto& rng = records.at("meta:rng").data;
    st.rng_state = detail::join_u64(rng[0], rng[1]);
    const auto& cfgh = records.at("meta:config").data;
    if (expect_config_hash)
        TIG_CHECK(detail::join_u64(cfgh[0], cfgh[1]) == expect_config_hash,
                  "checkpoint: config hash mismatch");
    return st;
}

// ---------------------------------------------------------------------------
// batching

struct TrainData {
    std::vector<SceneSpec> specs;
    std::vector<Array<float>> images;  // pre-rendered (3, 64, 64)
    std::vector<std::vector<int>> tokens;

    static TrainData from(const std::vector<SceneSpec>& specs, const Vocab& vocab) {
        TrainData d;
        d.specs = specs;
        for (const auto& s : specs) {
            d.images.push_back(render_scene(s));
            d.tokens.push_back(tokenize(caption_of(s), vocab));
        }
        return d;
    }
};

inline Array<float> stack_images(const TrainData& data, const std::vector<long>& idx) {
    const int B = int(idx.size());
    Array<float> out({B, 3, 64, 64});
    const long n = 3L * 64 * 64;
    for (int i = 0; i < B; ++i)
        std::copy_n(data.images[size_t(idx[size_t(i)])].data(), n, out.data() + long(i) * n);
    return out;
}

// within-batch caption shift that avoids pairing an image with its own spec
inline std::vector<long> mismatch_of(const TrainData& data, const std::vector<long>& idx) {
    const long B = long(idx.size());
    for (long s = 1; s < B; ++s) {
        bool clash = false;
        for (long i = 0; i < B && !clash; ++i)
            if (data.specs[size_t(idx[size_t(i)])] == data.specs[size_t(idx[size_t((i + s) % B)])])
                clash = true;
        if (!clash) {
            std::vector<long> out(size_t(B), 0L);
            for (long i = 0; i < B; ++i) out[size_t(i)] = idx[size_t((i + s) % B)];
            return out;
        }
    }
    std::vector<long> out(size_t(B), 0L);
    for (long i = 0; i < B; ++i) out[size_t(i)] = idx[size_t((i + 1) % B)];
    return out;
}

// ---------------------------------------------------------------------------
// evaluation

inline Array<float> caption_rows_for(Model& m, const Array<float>& img_one) {
    Tape<float> t;
    t.grad_enabled = false;
    Ctx<float> ctx{t, false};
    auto batch_img = t.constant(Array<float>({1, 3, 64, 64}, img_one.v));
    auto rows = m.disc.feature_rows(ctx, m.disc.features(ctx, batch_img));
    return Array<float>({rows.shape()[1], rows.shape()[2]}, rows.val().v);
}

inline float cond_score_of(Model& m, const Array<float>& img_one, const std::vector<int>& tokens) {
    Tape<float> t;
    t.grad_enabled = false;
    Ctx<float> ctx{t, false};
    CaptionBatch b = CaptionBatch::from({tokens});
    auto img = t.constant(Array<float>({1, 3, 64, 64}, img_one.v));
    auto f_map = m.disc.features(ctx, img);
    auto f_t = m.enc.fwd(ctx, b);
    return m.disc.cond_score(ctx, f_map, f_t, b).val()[0];
}

inline Array<float> generate_image(Model& m, const std::vector<int>& tokens, Rng& zrng) {
    Tape<float> t;
    t.grad_enabled = false;
    Ctx<float> ctx{t, false};
    CaptionBatch b = CaptionBatch::from({tokens});
    auto f_t = m.enc.fwd(ctx, b);
    auto z = t.constant(sample_noise<float>(zrng, 1, m.gcfg.z_dim));
    auto img = m.gen.fwd(ctx, z, f_t, b);
    return Array<float>({3, 64, 64}, img.val().v);
}

// fraction of trials where the true caption outranks R-1 distractors for the
// image generated from it
inline double eval_rprecision(Model& m, const TrainData& test, int R, int trials, uint64_t seed) {
    TIG_CHECK(R >= 1 && trials >= 1, "eval_rprecision: bad arguments");
    const long N = long(test.specs.size());
    Rng zrng(splitmix64(seed ^ 0x7270726563ULL));
    long hits = 0;
    for (int tr = 0; tr < trials; ++tr) {
        const long ti = long(hash_below(seed, uint64_t(N), 0x74727565ULL, uint64_t(tr)));
        auto img = generate_image(m, test.tokens[size_t(ti)], zrng);
        const float true_score = cond_score_of(m, img, test.tokens[size_t(ti)]);
        bool best = true;
        for (int r = 1; r < R && best; ++r) {
            long di = ti;
            for (uint64_t c = 0; di == ti || test.specs[size_t(di)] == test.specs[size_t(ti)]; ++c)
                di = long(hash_below(seed, uint64_t(N), 0x64697374ULL, uint64_t(tr), uint64_t(r) * 97 + c));
            if (cond_score_of(m, img, test.tokens[size_t(di)]) >= true_score) best = false;
        }
        if (best) ++hits;
    }
    return double(hits) / trials;
}

// modified n-gram precision BLEU-4 with brevity penalty; zero when any
// n-gram order has no match
inline double bleu4(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
    if (cand.empty()) return 0.0;
    double logsum = 0;
    for (int n = 1; n <= 4; ++n) {
        if (long(cand.size()) < n) return 0.0;
        std::map<std::vector<std::string>, long> ref_counts;
        for (long i = 0; i + n <= long(ref.size()); ++i)
            ++ref_counts[std::vector<std::string>(ref.begin() + i, ref.begin() + i + n)];
        std::map<std::vector<std::string>, long> cand_counts;
        long total = 0;
        for (long i = 0; i + n <= long(cand.size()); ++i) {
            ++cand_counts[std::vector<std::string>(cand.begin() + i, cand.begin() + i + n)];
            ++total;
        }
        long matched = 0;
        for (const auto& [ng, c] : cand_counts) {
            auto it = ref_counts.find(ng);
            if (it != ref_counts.end()) matched += std::min(c, it->second);
        }
        if (matched == 0) return 0.0;
        logsum += 0.25 * std::log(double(matched) / double(total));
    }
    const double bp =
        cand.size() >= ref.size() ? 1.0 : std::exp(1.0 - double(ref.size()) / double(cand.size()));
    return bp * std::exp(logsum);
}

struct CaptionEval {
    double token_accuracy = 0;
    double attribute_recall = 0;  // 5 attributes; position needs both words
    double bleu = 0;
};

inline std::vector<std::string> attribute_words(const SceneSpec& s) {
    return {size_name(s.size), shape_color(s.color).name, shape_name(s.shape),
            position_name(s.position), background_color(s.background).name};
}

inline CaptionEval eval_caption(Model& m, const TrainData& test, int limit = 0) {
    const long N = limit > 0 ? std::min(long(limit), long(test.specs.size())) : long(test.specs.size());
    CaptionEval out;
    for (long i = 0; i < N; ++i) {
        auto rows = caption_rows_for(m, test.images[size_t(i)]);
        auto ids = greedy_caption(m.enc, m.dec, rows, m.tcfg.max_len - 1);
        std::vector<std::string> cand;
        for (int id : ids)
            if (id != Vocab::bos && id != Vocab::eos && id != Vocab::pad) cand.push_back(m.vocab.word(id));
        const auto ref = split_words(caption_of(test.specs[size_t(i)]));

        long ok = 0;
        for (size_t k = 0; k < ref.size(); ++k)
            if (k < cand.size() && cand[k] == ref[k]) ++ok;
        out.token_accuracy += double(ok) / double(ref.size());

        long found = 0;
        const auto attrs = attribute_words(test.specs[size_t(i)]);
        for (const auto& a : attrs) {
            bool all = true;
            for (const auto& w : split_words(a)) {
                if (std::find(cand.begin(), cand.end(), w) == cand.end()) all = false;
            }
            if (all) ++found;
        }
        out.attribute_recall += double(found) / double(attrs.size());
        out.bleu += bleu4(cand, ref);
    }
    out.token_accuracy /= double(N);
    out.attribute_recall /= double(N);
    out.bleu /= double(N);
    return out;
}

struct ConsistencyEval {
    double shape = 0, color = 0, size = 0, position = 0, background = 0;
    double joint_color_shape = 0;
    double all = 0;
};

inline ConsistencyEval eval_consistency(Model& m, const TrainData& test, int limit, uint64_t seed) {
    const long N = limit > 0 ? std::min(long(limit), long(test.specs.size())) : long(test.specs.size());
    Rng zrng(splitmix64(seed ^ 0x636f6e73ULL));
    ConsistencyEval out;
    for (long i = 0; i < N; ++i) {
        const SceneSpec& want = test.specs[size_t(i)];
        auto got = oracle_attributes(generate_image(m, test.tokens[size_t(i)], zrng));
        if (!got) continue;  // background-only counts as a miss everywhere
        out.shape += got->shape == want.shape;
        out.color += got->color == want.color;
        out.size += got->size == want.size;
        out.position += got->position == want.position;
        out.background += got->background == want.background;
        out.joint_color_shape += got->shape == want.shape && got->color == want.color;
        out.all += *got == want;
    }
    for (double* f : {&out.shape, &out.color, &out.size, &out.position, &out.background,
                      &out.joint_color_shape, &out.all})
        *f /= double(N);
    return out;
}

inline void dump_embeddings(const Model& m, std::ostream& os) {
    const Array<float>& tab = m.enc.tok.table->w;
    const int V = tab.shape[0], e = tab.shape[1];
    for (int i = 0; i < V; ++i) {
        os << m.vocab.word(i);
        for (int j = 0; j < e; ++j) os << "," << tab[long(i) * e + j];
        os << "\n";
    }
}

// ---------------------------------------------------------------------------
// training loop

struct TrainResult {
    long steps = 0;
    bool aborted = false;
    std::string abort_reason;
    double last_rprec = 0, last_cap_recall = 0, last_consistency = 0;
    TrainerState state;
};

struct StepLosses {
    double caption = 0, uncond_d = 0, cond_d = 0, g_total = 0, r1 = 0;
};

inline const char* metrics_header() {
    return "epoch,step,L_caption,L_uncond_d,L_cond_d,L_g_total,p,r1,rprec,cap_acc,bleu4,consistency_joint";
}

template <class PerStep>
TrainResult train(const TrainConfig& cfg, Model& m, const TrainData& data, const TrainData& test,
                  std::ostream& metrics, TrainerState st, PerStep&& per_step) {
    Adam<float> adam_d, adam_g;
    adam_d.lr = adam_g.lr = float(cfg.lr);
    adam_d.beta1 = adam_g.beta1 = float(cfg.beta1);
    adam_d.beta2 = adam_g.beta2 = float(cfg.beta2);
    adam_d.t = st.adam_t_d;
    adam_g.t = st.adam_t_g;
    Rng rng(st.rng_state ? st.rng_state : splitmix64(cfg.seed));

    const auto d_params = m.d_phase_params();
    const auto g_params = m.g_phase_params();
    const long n_batches = long(data.specs.size()) / cfg.batch;
    TIG_CHECK(n_batches >= 1, "train: corpus smaller than one batch");
    const AnnealSchedule schedule = anneal_schedule_from(cfg.anneal);

    if (st.epoch == 0) metrics << metrics_header() << "\n";
    TrainResult res;
    long step = long(st.epoch) * n_batches;
    std::vector<long> order(data.specs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = long(i);

    for (int epoch = st.epoch; epoch < cfg.epochs; ++epoch) {
        const AnnealState anneal{epoch, cfg.epochs, schedule};
        for (long i = long(order.size()) - 1; i > 0; --i)
            std::swap(order[size_t(i)], order[size_t(rng.below(i + 1))]);

        for (long bi = 0; bi < n_batches; ++bi, ++step) {
            if (cfg.max_steps && step >= cfg.max_steps) {
                res.steps = step;
                res.state = {epoch, adam_d.t, adam_g.t, rng.state()};
                return res;
            }
            const std::vector<long> idx(order.begin() + bi * cfg.batch,
                                        order.begin() + (bi + 1) * cfg.batch);
            const std::vector<long> mis_idx = mismatch_of(data, idx);
            std::vector<std::vector<int>> caps, mis_caps;
            for (long j : idx) caps.push_back(data.tokens[size_t(j)]);
            for (long j : mis_idx) mis_caps.push_back(data.tokens[size_t(j)]);
            CaptionBatch batch = CaptionBatch::from(caps);
            CaptionBatch mis_batch = CaptionBatch::from(mis_caps);
            Array<float> reals = stack_images(data, idx);
            Array<float> z = sample_noise<float>(rng, cfg.batch, cfg.z_dim);
            StepLosses L;

            // fakes for the D-step: G runs without gradients, its output enters
            // the D tape as a constant
            Array<float> fakes;
            {
                Tape<float> t;
                t.grad_enabled = false;
                Ctx<float> ctx{t, false};
                auto f_t = m.enc.fwd(ctx, batch);
                fakes = m.gen.fwd(ctx, t.constant(z), f_t, batch).val();
            }

            {  // D-step: captioning + unconditional + conditional (+ lazy R1)
                Tape<float> t;
                Ctx<float> ctx{t};
                auto f_t = m.enc.fwd(ctx, batch);
                auto f_t_mis = m.enc.fwd(ctx, mis_batch);
                Tensor<float> f_map_real, u_real_logit;
                Tensor<float> loss = t.scalar(0.0f);
                const bool lazy_r1 = cfg.r1_every > 0 && step % cfg.r1_every == 0;
                if (lazy_r1) {
                    auto g = m.disc.r1_grad_graph(ctx, t.constant(reals));
                    u_real_logit = g.logit;
                    auto pen = r1_penalty(g.img_grad, float(cfg.r1_gamma));
                    L.r1 = pen.val()[0];
                    loss = add(loss, pen);
                    f_map_real = m.disc.features(ctx, t.constant(reals));
                } else {
                    f_map_real = m.disc.features(ctx, t.constant(reals));
                    u_real_logit = m.disc.uncond_logit(ctx, f_map_real);
                }
                auto f_map_fake = m.disc.features(ctx, t.constant(fakes));

                if (cfg.captioning) {
                    auto logits = m.dec.fwd(ctx, f_t, batch, m.disc.feature_rows(ctx, f_map_real));
                    auto cap = loss_caption(logits, batch);
                    L.caption = cap.val()[0];
                    loss = add(loss, cap);
                }
                auto lu = loss_uncond_d(sigmoid(u_real_logit),
                                        sigmoid(m.disc.uncond_logit(ctx, f_map_fake)));
                L.uncond_d = lu.val()[0];
                loss = add(loss, lu);

                auto c_match = m.disc.cond_score(ctx, f_map_real, f_t, batch);
                auto c_mis = m.disc.cond_score(ctx, f_map_real, f_t_mis, mis_batch);
                auto c_fake = m.disc.cond_score(ctx, f_map_fake, f_t, batch);
                auto lc = cfg.hinge ? loss_cond_hinge_d(c_match, c_mis, c_fake, anneal)
                                    : loss_cond_plain_d(c_match, c_mis, c_fake);
                L.cond_d = lc.val()[0];
                loss = add(loss, lc);

                t.backward(loss);
                adam_d.step(ctx, d_params);
            }

            {  // G-step: fresh noise, updates G and Enc only
                Array<float> z2 = sample_noise<float>(rng, cfg.batch, cfg.z_dim);
                Tape<float> t;
                Ctx<float> ctx{t};
                auto f_t = m.enc.fwd(ctx, batch);
                auto img = m.gen.fwd(ctx, t.constant(z2), f_t, batch);
                auto f_map = m.disc.features(ctx, img);
                auto u_fake = sigmoid(m.disc.uncond_logit(ctx, f_map));
                auto c_fake = m.disc.cond_score(ctx, f_map, f_t, batch);
                Tensor<float> loss = add(loss_uncond_g(u_fake), loss_cond_g(c_fake));
                if (cfg.captioning) {
                    auto logits = m.dec.fwd(ctx, f_t, batch, m.disc.feature_rows(ctx, f_map));
                    loss = add(loss, loss_caption(logits, batch));
                }
                L.g_total = loss.val()[0];
                t.backward(loss);
                adam_g.step(ctx, g_params);
            }

            for (double v : {L.caption, L.uncond_d, L.cond_d, L.g_total, L.r1})
                if (!std::isfinite(v)) {
                    res.aborted = true;
                    res.steps = step;
                    std::ostringstream why;
                    why << "non-finite loss at epoch " << epoch << " step " << step << " rng state "
                        << rng.state();
                    res.abort_reason = why.str();
                    res.state = {epoch, adam_d.t, adam_g.t, rng.state()};
                    metrics.flush();
                    return res;
                }

            const bool eval_now = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 &&
                                  bi == n_batches - 1;
            metrics << epoch << "," << step << "," << L.caption << "," << L.uncond_d << ","
                    << L.cond_d << "," << L.g_total << "," << anneal.p() << "," << L.r1;
            if (eval_now) {
                const double rp = eval_rprecision(m, test, 10, cfg.eval_trials, cfg.seed + uint64_t(epoch));
                const CaptionEval ce = eval_caption(m, test, cfg.eval_trials);
                const ConsistencyEval co = eval_consistency(m, test, cfg.eval_trials, cfg.seed + uint64_t(epoch));
                res.last_rprec = rp;
                res.last_cap_recall = ce.attribute_recall;
                res.last_consistency = co.joint_color_shape;
                metrics << "," << rp << "," << ce.token_accuracy << "," << ce.bleu << ","
                        << co.joint_color_shape << "\n";
            } else {
                metrics << ",,,,\n";
            }
            per_step(epoch, step, L, m, rng);
        }
        st.rng_state = rng.state();
        st.epoch = epoch + 1;
        st.adam_t_d = adam_d.t;
        st.adam_t_g = adam_g.t;
    }
    res.steps = step;
    res.state = st;
    metrics.flush();
    return res;
}

inline TrainResult train(const TrainConfig& cfg, Model& m, const TrainData& data,
                         const TrainData& test, std::ostream& metrics, TrainerState st = {}) {
    return train(cfg, m, data, test, metrics, st,
                 [](int, long, const StepLosses&, Model&, Rng&) {});
}

}  // namespace tig
