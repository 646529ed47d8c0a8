// Command line front end: data generation, training, sampling, captioning,
// evaluation, gradient checks and plot emission. Exit code 1 means bad
// arguments, 2 means a broken invariant (corrupt checkpoint, failed check).

#include <CLI11.hpp>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>

#include "tig/checks.hpp"
#include "tig/trainer.hpp"

namespace fs = std::filesystem;
using namespace tig;

namespace {

constexpr const char* kVersion = "tig-0.1.0";

TrainConfig config_from_checkpoint(const std::string& ckpt, const std::string& config_path) {
    TrainConfig cfg;
    if (!config_path.empty()) {
        std::ifstream f(config_path);
        TIG_CHECK(f.good(), "cannot read config " + config_path);
        parse_config(cfg, f);
        return cfg;
    }
    const std::string text = checkpoint_config_text(ckpt);
    TIG_CHECK(!text.empty(), "checkpoint has no embedded config; pass --config");
    std::istringstream in(text);
    parse_config(cfg, in);
    return cfg;
}

Model load_model(const std::string& ckpt, const TrainConfig& cfg) {
    Model m = Model::create(cfg);
    load_checkpoint(ckpt, m, cfg.hash());
    return m;
}

std::vector<SceneSpec> specs_of_captions(const std::vector<std::string>& captions) {
    std::map<std::string, SceneSpec> by_caption;
    for (const auto& s : valid_specs()) by_caption[caption_of(s)] = s;
    std::vector<SceneSpec> out;
    for (const auto& c : captions) {
        auto it = by_caption.find(c);
        TIG_CHECK(it != by_caption.end(), "caption not in the scene universe: " + c);
        out.push_back(it->second);
    }
    return out;
}

TrainData test_split(const TrainConfig& cfg, const std::string& data_dir, const Vocab& vocab) {
    if (!data_dir.empty())
        return TrainData::from(specs_of_captions(load_captions(data_dir + "/test").captions), vocab);
    Corpus c = gen_corpus(cfg.n_scenes, cfg.data_seed, cfg.split);
    return TrainData::from(c.test, vocab);
}

std::string timestamp() {
    const std::time_t t = std::time(nullptr);
    char buf[64];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", std::gmtime(&t));
    return buf;
}

// ---------------------------------------------------------------------------
// plot rasters; images are (3, h, w) floats in [-1, 1] for write_ppm

void draw_series(Array<float>& img, const std::vector<double>& ys, double lo, double hi,
                 float r, float g, float b) {
    const int H = img.shape[1], W = img.shape[2];
    if (ys.size() < 2 || !(hi > lo)) return;
    const long plane = long(H) * W;
    auto put = [&](int x, int y) {
        if (x < 0 || x >= W || y < 0 || y >= H) return;
        img[0 * plane + long(y) * W + x] = r;
        img[1 * plane + long(y) * W + x] = g;
        img[2 * plane + long(y) * W + x] = b;
    };
    for (int x = 0; x < W; ++x) {
        const double f = double(x) / (W - 1) * double(ys.size() - 1);
        const long i = long(f);
        const double v = ys[size_t(std::min<long>(i, long(ys.size()) - 1))];
        const int y = int((1.0 - (v - lo) / (hi - lo)) * (H - 1));
        put(x, y);
        put(x, y + 1);
    }
}

int cmd_plot(const std::string& metrics_path, const std::string& what, const std::string& out) {
    if (what == "posenc") {
        const int res = 32, c = 16, tile = 4;
        auto table = pos_encode_2d<float>(res, res, c);
        Array<float> img({3, res * tile, res * tile * 2});
        const long plane = long(res * tile) * res * tile * 2;
        for (int mode = 0; mode < 2; ++mode) {
            auto t = mode == 0 ? table : pos_encode_2d<float>(res, res, c, PosMode::paper_literal);
            for (int ch = 0; ch < c; ++ch) {
                const int ty = ch / tile, tx = ch % tile;
                for (int y = 0; y < res; ++y)
                    for (int x = 0; x < res; ++x) {
                        const float v = t[(long(y) * res + x) * c + ch];
                        const long px = long(ty * res + y) * (res * tile * 2) +
                                        mode * res * tile + tx * res + x;
                        for (int k = 0; k < 3; ++k) img[k * plane + px] = v;
                    }
            }
        }
        write_ppm(out, img);
        std::cout << "wrote " << out << " (left: symmetric, right: paper-literal)\n";
        return 0;
    }
    TIG_CHECK(what == "curves", "plot: --what must be curves or posenc");
    std::ifstream f(metrics_path);
    TIG_CHECK(f.good(), "plot: cannot read " + metrics_path);
    std::string line;
    std::getline(f, line);
    TIG_CHECK(line.rfind("epoch,step,", 0) == 0, "plot: not a metrics csv: " + metrics_path);
    std::vector<std::vector<double>> cols(12);
    std::vector<std::vector<double>> evals(4);
    while (std::getline(f, line)) {
        std::istringstream ls(line);
        std::string field;
        for (int i = 0; i < 12 && std::getline(ls, field, ','); ++i) {
            if (field.empty()) continue;
            cols[size_t(i)].push_back(std::stod(field));
            if (i >= 8) evals[size_t(i - 8)].push_back(std::stod(field));
        }
    }
    TIG_CHECK(!cols[2].empty(), "plot: metrics csv has no data rows");
    const int H = 360, W = 720;
    Array<float> img({3, H, W}, 1.0f);
    struct Series { int col; float r, g, b; const char* name; };
    const Series losses[] = {{2, -1, -1, 1, "L_caption"},
                             {3, 1, -1, -1, "L_uncond_d"},
                             {4, -1, 0.2f, -1, "L_cond_d"},
                             {5, 1, 0.2f, -1, "L_g_total"}};
    for (const auto& s : losses) {
        const auto& ys = cols[size_t(s.col)];
        const double lo = *std::min_element(ys.begin(), ys.end());
        const double hi = *std::max_element(ys.begin(), ys.end());
        draw_series(img, ys, lo, hi, s.r, s.g, s.b);
        std::cout << s.name << " range [" << lo << ", " << hi << "]\n";
    }
    const Series marks[] = {{0, -1, -1, -1, "rprec"},
                            {1, -0.5f, -0.5f, -0.5f, "cap_acc"},
                            {2, 0, -1, 1, "bleu4"},
                            {3, 1, -1, 1, "consistency_joint"}};
    for (const auto& s : marks)
        draw_series(img, evals[size_t(s.col)], 0.0, 1.0, s.r, s.g, s.b);
    write_ppm(out, img);
    std::cout << "wrote " << out << " (losses min-max scaled, eval metrics on [0,1])\n";
    return 0;
}

int run(int argc, char** argv) {
    CLI::App app{"text-and-image mutual translation GAN on a synthetic shapes corpus"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "render a scene corpus to disk");
    int gd_n = 1280;
    uint64_t gd_seed = 7;
    std::string gd_out = "corpus";
    gen->add_option("--n", gd_n, "number of scenes");
    gen->add_option("--seed", gd_seed, "sampling seed");
    gen->add_option("--out", gd_out, "output directory");

    auto* tr = app.add_subcommand("train", "train the full model");
    std::string tr_config, tr_data, tr_out = "run";
    int tr_epochs = 0, tr_max_steps = -1, tr_eval_every = -1;
    double tr_lr = 0;
    uint64_t tr_seed = 0;
    std::string tr_anneal;
    bool tr_no_cap = false, tr_no_2d = false, tr_plain = false;
    tr->add_option("--config", tr_config, "key=value config file");
    tr->add_option("--data", tr_data, "corpus directory from gen-data (default: in-memory)");
    tr->add_option("--out", tr_out, "output directory");
    tr->add_option("--epochs", tr_epochs, "override epochs");
    tr->add_option("--lr", tr_lr, "override learning rate");
    tr->add_option("--seed", tr_seed, "override seed");
    tr->add_option("--anneal", tr_anneal, "override anneal schedule")
        ->check(CLI::IsMember({"dynamic", "constant", "early-stop", "late-begin"}));
    tr->add_option("--max-steps", tr_max_steps, "override step cap");
    tr->add_option("--eval-every", tr_eval_every, "override eval cadence");
    tr->add_flag("--no-captioning", tr_no_cap, "ablation: drop the captioning loss");
    tr->add_flag("--no-2d-encode", tr_no_2d, "ablation: drop the 2-d positional encoding");
    tr->add_flag("--plain-loss", tr_plain, "ablation: plain conditional loss instead of hinge");

    auto* sa = app.add_subcommand("sample", "generate one image from a caption");
    std::string sa_ckpt, sa_caption, sa_out = "sample.ppm", sa_config;
    uint64_t sa_zseed = 1;
    sa->add_option("--ckpt", sa_ckpt, "checkpoint file")->required();
    sa->add_option("--caption", sa_caption, "input caption")->required();
    sa->add_option("--z-seed", sa_zseed, "noise seed");
    sa->add_option("--out", sa_out, "output ppm");
    sa->add_option("--config", sa_config, "config file (default: embedded in checkpoint)");

    auto* ca = app.add_subcommand("caption", "caption a ppm image");
    std::string ca_ckpt, ca_image, ca_config;
    ca->add_option("--ckpt", ca_ckpt, "checkpoint file")->required();
    ca->add_option("--image", ca_image, "input ppm")->required();
    ca->add_option("--config", ca_config, "config file (default: embedded in checkpoint)");

    auto* ev = app.add_subcommand("eval", "evaluate a trained model");
    std::string ev_ckpt, ev_data, ev_metric, ev_config;
    int ev_trials = 500;
    uint64_t ev_seed = 99;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--data", ev_data, "corpus directory (default: regenerate from config)");
    ev->add_option("--metric", ev_metric, "which metric")
        ->required()
        ->check(CLI::IsMember({"rprec", "caption", "consistency"}));
    ev->add_option("--trials", ev_trials, "trial count");
    ev->add_option("--seed", ev_seed, "evaluation seed");
    ev->add_option("--config", ev_config, "config file (default: embedded in checkpoint)");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suites");
    std::string gc_module = "all";
    gc->add_option("--module", gc_module, "all, substrate or losses")
        ->check(CLI::IsMember({"all", "substrate", "losses"}));

    auto* pl = app.add_subcommand("plot", "render metric curves or encodings to ppm");
    std::string pl_metrics, pl_what = "curves", pl_out = "plot.ppm";
    pl->add_option("--metrics", pl_metrics, "metrics csv from train");
    pl->add_option("--what", pl_what, "curves or posenc")
        ->check(CLI::IsMember({"curves", "posenc"}));
    pl->add_option("--out", pl_out, "output ppm");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (gen->parsed()) {
        Corpus c = gen_corpus(gd_n, gd_seed);
        save_corpus(gd_out, c);
        std::cout << "wrote " << c.train.size() << " train and " << c.test.size()
                  << " test scenes under " << gd_out << "\n";
        return 0;
    }

    if (tr->parsed()) {
        TrainConfig cfg;
        if (!tr_config.empty()) {
            std::ifstream f(tr_config);
            TIG_CHECK(f.good(), "cannot read config " + tr_config);
            parse_config(cfg, f);
        }
        if (tr->count("--epochs")) cfg.epochs = tr_epochs;
        if (tr->count("--lr")) cfg.lr = tr_lr;
        if (tr->count("--seed")) cfg.seed = tr_seed;
        if (tr->count("--anneal")) cfg.anneal = tr_anneal;
        if (tr->count("--max-steps")) cfg.max_steps = tr_max_steps;
        if (tr->count("--eval-every")) cfg.eval_every = tr_eval_every;
        if (tr_no_cap) cfg.captioning = false;
        if (tr_no_2d) cfg.encode_2d = false;
        if (tr_plain) cfg.hinge = false;

        fs::create_directories(tr_out);
        {
            std::ofstream mani(fs::path(tr_out) / "manifest.txt");
            mani << "version=" << kVersion << "\nstarted=" << timestamp()
                 << "\nconfig_hash=" << std::hex << cfg.hash() << std::dec
                 << "\ndata=" << (tr_data.empty() ? "<in-memory>" : tr_data)
                 << "\nlayout=metrics.csv,ckpt.bin,embeddings.csv\n# resolved config\n"
                 << cfg.serialize();
            TIG_CHECK(mani.good(), "cannot write manifest under " + tr_out);
        }

        Model m = Model::create(cfg);
        TrainData data, test;
        if (!tr_data.empty()) {
            data = TrainData::from(specs_of_captions(load_captions(tr_data + "/train").captions),
                                   m.vocab);
            test = TrainData::from(specs_of_captions(load_captions(tr_data + "/test").captions),
                                   m.vocab);
        } else {
            Corpus c = gen_corpus(cfg.n_scenes, cfg.data_seed, cfg.split);
            data = TrainData::from(c.train, m.vocab);
            test = TrainData::from(c.test, m.vocab);
        }
        std::ofstream metrics(fs::path(tr_out) / "metrics.csv");
        auto res = train(cfg, m, data, test, metrics);
        save_checkpoint((fs::path(tr_out) / "ckpt.bin").string(), m, res.state, cfg.hash(),
                        cfg.serialize());
        {
            std::ofstream emb(fs::path(tr_out) / "embeddings.csv");
            dump_embeddings(m, emb);
        }
        if (res.aborted) {
            std::cerr << "aborted: " << res.abort_reason << "\n";
            return 2;
        }
        std::cout << "finished " << res.steps << " steps; last eval: rprec=" << res.last_rprec
                  << " attr_recall=" << res.last_cap_recall
                  << " consistency_joint=" << res.last_consistency << "\n";
        return 0;
    }

    if (sa->parsed()) {
        TrainConfig cfg = config_from_checkpoint(sa_ckpt, sa_config);
        Model m = load_model(sa_ckpt, cfg);
        Rng zrng(sa_zseed ? sa_zseed : 1);
        write_ppm(sa_out, generate_image(m, tokenize(sa_caption, m.vocab), zrng));
        std::cout << "wrote " << sa_out << "\n";
        return 0;
    }

    if (ca->parsed()) {
        TrainConfig cfg = config_from_checkpoint(ca_ckpt, ca_config);
        Model m = load_model(ca_ckpt, cfg);
        Array<float> img = read_ppm(ca_image);
        TIG_CHECK(img.shape == Shape({3, 64, 64}), "caption: expected a 3x64x64 ppm");
        auto ids = greedy_caption(m.enc, m.dec, caption_rows_for(m, img), m.tcfg.max_len - 1);
        std::string text;
        for (int id : ids)
            if (id != Vocab::bos && id != Vocab::eos && id != Vocab::pad)
                text += (text.empty() ? "" : " ") + m.vocab.word(id);
        std::cout << text << "\n";
        auto got = oracle_attributes(img);
        std::cout << "oracle: " << (got ? caption_of(*got) : std::string("unrecognized")) << "\n";
        return 0;
    }

    if (ev->parsed()) {
        TrainConfig cfg = config_from_checkpoint(ev_ckpt, ev_config);
        Model m = load_model(ev_ckpt, cfg);
        TrainData test = test_split(cfg, ev_data, m.vocab);
        if (ev_metric == "rprec") {
            std::cout << "rprec=" << eval_rprecision(m, test, 10, ev_trials, ev_seed) << "\n";
        } else if (ev_metric == "caption") {
            auto ce = eval_caption(m, test, ev_trials);
            std::cout << "token_accuracy=" << ce.token_accuracy
                      << " attribute_recall=" << ce.attribute_recall << " bleu4=" << ce.bleu << "\n";
        } else {
            auto co = eval_consistency(m, test, ev_trials, ev_seed);
            std::cout << "shape=" << co.shape << " color=" << co.color << " size=" << co.size
                      << " position=" << co.position << " background=" << co.background
                      << " joint_color_shape=" << co.joint_color_shape << " all=" << co.all << "\n";
        }
        return 0;
    }

    if (gc->parsed()) {
        std::vector<CheckResult> results;
        if (gc_module == "all" || gc_module == "substrate")
            for (auto& r : substrate_grad_suite()) results.push_back(r);
        if (gc_module == "all" || gc_module == "losses")
            for (auto& r : losses_grad_suite()) results.push_back(r);
        bool ok = true;
        for (const auto& r : results) {
            std::cout << r.name << " " << r.max_rel_err << "\n";
            if (!(r.max_rel_err < 1e-4)) ok = false;
        }
        if (!ok) {
            std::cerr << "gradient check failed\n";
            return 2;
        }
        return 0;
    }

    return cmd_plot(pl_metrics, pl_what, pl_out);
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
