// End-to-end acceptance run. Each criterion prints exactly one PASS/FAIL
// line; the exit code is the number of failed gated criteria. Criterion 8
// (ablation directions) is reported but not gated. Progress for the long
// training runs goes to stderr.
//
// Thresholds in criterion 7 were calibrated from the first successful full
// run and frozen with a 10-point margin.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "tig/checks.hpp"
#include "tig/trainer.hpp"

using namespace tig;

namespace {

int failures = 0;

void report(int n, const std::string& label, bool pass, const std::string& detail) {
    std::cout << "criterion " << n << " (" << label << "): " << (pass ? "PASS" : "FAIL");
    if (!detail.empty()) std::cout << " -- " << detail;
    std::cout << "\n" << std::flush;
    if (!pass) ++failures;
}

double now_s() {
    using clk = std::chrono::steady_clock;
    return std::chrono::duration<double>(clk::now().time_since_epoch()).count();
}

std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

// ---------------------------------------------------------------------------

void criterion_1_gradients() {
    const double t0 = now_s();
    double worst = 0;
    std::string worst_name = "-";
    for (const auto& suite : {substrate_grad_suite(), losses_grad_suite()})
        for (const auto& r : suite)
            if (r.max_rel_err > worst) worst = r.max_rel_err, worst_name = r.name;
    const double dt = now_s() - t0;
    report(1, "gradient suite", worst < 1e-4 && dt < 120.0,
           "max rel err " + fmt(worst) + " at " + worst_name + ", " + fmt(dt) + " s");
}

void criterion_2_causality() {
    Vocab v = corpus_vocab();
    TextConfig cfg;
    cfg.vocab = v.size();
    cfg.e = 32;
    cfg.heads = 2;
    cfg.enc_layers = 2;
    cfg.dec_layers = 2;
    cfg.ffw = 32;
    cfg.img_dim = 24;
    ParamStore<float> ps;
    Rng rng(21);
    auto enc = TextEncoder<float>::create(ps, rng, cfg);
    auto dec = TextDecoder<float>::create(ps, rng, cfg);
    Array<float> img({16, cfg.img_dim});
    for (long i = 0; i < img.size(); ++i) img[i] = float(rng.normal());

    const auto universe = valid_specs();
    int bad = 0;
    for (int trial = 0; trial < 100; ++trial) {
        auto seq = tokenize(caption_of(universe[size_t(rng.below(long(universe.size())))]), v);
        const size_t k = 1 + size_t(rng.below(long(seq.size()) - 2));  // keep positions <= k
        auto pert = seq;
        for (size_t j = k + 1; j < pert.size(); ++j) pert[j] = 4 + int(rng.below(v.size() - 4));

        auto run = [&](const std::vector<int>& s, Array<float>& feats, Array<float>& logits) {
            Tape<float> t;
            t.grad_enabled = false;
            Ctx<float> ctx{t, false};
            CaptionBatch b = CaptionBatch::from({s});
            auto f_t = enc.fwd(ctx, b);
            feats = f_t.val();
            auto fi = t.constant(Array<float>({1, 16, cfg.img_dim}, img.v));
            logits = dec.fwd(ctx, f_t, b, fi).val();
        };
        Array<float> fa, la, fb, lb;
        run(seq, fa, la);
        run(pert, fb, lb);
        bool ok = true;
        for (size_t p = 0; p <= k && ok; ++p) {
            for (int c = 0; c < cfg.e; ++c)
                if (fa[long(p) * cfg.e + c] != fb[long(p) * cfg.e + c]) ok = false;
            for (int c = 0; c < v.size(); ++c)
                if (la[long(p) * v.size() + c] != lb[long(p) * v.size() + c]) ok = false;
        }
        if (!ok) ++bad;
    }
    report(2, "enc/dec causality", bad == 0, fmt(100 - bad) + "/100 cases bit-identical");
}

void criterion_3_encoding() {
    bool ok = true;
    std::string why;

    // paper-literal formulas at 20 sampled (y, x, channel-pair) points
    {
        const int h = 8, w = 8, c = 32;
        auto t = pos_encode_2d<double>(h, w, c, PosMode::paper_literal);
        Rng rng(11);
        for (int trial = 0; trial < 20 && ok; ++trial) {
            const int y = int(rng.below(h)), x = int(rng.below(w));
            const int i = 1 + int(rng.below(c / 2));
            double want_even, want_odd;
            if (i <= c / 4) {
                const double omega = std::pow(10000.0, -4.0 * i / c);
                want_even = std::cos(y * omega);
                want_odd = std::sin(y * omega);
            } else {
                const double omega = std::pow(10000.0, -2.0 * i / c);
                want_even = std::sin(x * omega);
                want_odd = std::cos(x * omega);
            }
            const double* row = t.data() + (long(y) * w + x) * c;
            if (std::abs(row[2 * i - 2] - want_even) >= 1e-12 ||
                std::abs(row[2 * i - 1] - want_odd) >= 1e-12) {
                ok = false;
                why = "literal formula mismatch at y=" + fmt(y) + " x=" + fmt(x);
            }
        }
    }

    // symmetric mode: inner products depend only on the offset pair
    if (ok) {
        const int n = 8, c = 16;
        auto t = pos_encode_2d<double>(n, n, c);
        std::map<std::pair<int, int>, double> by_offset;
        for (int y1 = 0; y1 < n && ok; ++y1)
            for (int x1 = 0; x1 < n && ok; ++x1)
                for (int y2 = 0; y2 < n && ok; ++y2)
                    for (int x2 = 0; x2 < n && ok; ++x2) {
                        double d = 0;
                        const double* a = t.data() + (long(y1) * n + x1) * c;
                        const double* b = t.data() + (long(y2) * n + x2) * c;
                        for (int k = 0; k < c; ++k) d += a[k] * b[k];
                        auto [it, fresh] = by_offset.emplace(std::make_pair(y1 - y2, x1 - x2), d);
                        if (!fresh && std::abs(it->second - d) >= 1e-9) {
                            ok = false;
                            why = "offset invariance broken at dy=" + fmt(y1 - y2);
                        }
                    }
    }
    report(3, "2-d positional encoding", ok, ok ? "literal and symmetric checks exact" : why);
}

void criterion_4_hinge() {
    Tape<double> t;
    auto vec = [&](double v) {
        Array<double> a({3});
        for (int i = 0; i < 3; ++i) a[i] = v;
        return t.constant(a);
    };
    // match = 2 and mis = -2 keep their hinge terms flat; the loss is the
    // fake term alone, so with s_pivot = 2 and c_fake = 1.5 it must read
    // 1.5, 0.5, 0 at p = 0, 0.5, 1
    const double l0 =
        loss_cond_hinge_d(vec(2.0), vec(-2.0), vec(1.5), {0, 10, AnnealSchedule::dynamic}).val()[0];
    const double l5 =
        loss_cond_hinge_d(vec(2.0), vec(-2.0), vec(1.5), {5, 10, AnnealSchedule::dynamic}).val()[0];
    const double l1 =
        loss_cond_hinge_d(vec(2.0), vec(-2.0), vec(1.5), {10, 10, AnnealSchedule::dynamic}).val()[0];

    Array<double> ma({3});
    ma[0] = ma[1] = ma[2] = 2.0;
    auto c_match = t.leaf(ma);
    auto loss = loss_cond_hinge_d(c_match, vec(-2.0), vec(1.5), {5, 10, AnnealSchedule::dynamic});
    t.backward(loss);
    bool pivot_dead = true;
    for (int i = 0; i < 3; ++i)
        if (t.node(c_match.id).grad[size_t(i)] != 0.0) pivot_dead = false;

    report(4, "hinge annealing", l0 == 1.5 && l5 == 0.5 && l1 == 0.0 && pivot_dead,
           "fake term " + fmt(l0) + "/" + fmt(l5) + "/" + fmt(l1) +
               (pivot_dead ? ", pivot grad exactly zero" : ", pivot leaks gradient"));
}

void criterion_5_oracle() {
    const auto universe = valid_specs();
    int bad = 0;
    for (const auto& s : universe) {
        auto got = oracle_attributes(render_scene(s));
        if (!got || !(*got == s)) ++bad;
    }
    report(5, "oracle round-trip", bad == 0,
           fmt(long(universe.size()) - bad) + "/" + fmt(long(universe.size())) + " specs exact");
}

void criterion_6_chance() {
    TrainConfig cfg;
    Model m = Model::create(cfg);
    Corpus c = gen_corpus(cfg.n_scenes, cfg.data_seed, cfg.split);
    TrainData test = TrainData::from(c.test, m.vocab);
    const double rp = eval_rprecision(m, test, 10, 512, 333);
    report(6, "untrained chance calibration", rp >= 0.05 && rp <= 0.15,
           "rprec " + fmt(rp) + " over 512 trials, want [0.05, 0.15]");
}

// calibrated from the first full run (rprec 0.598, attribute recall 0.723,
// joint color+shape 0.219 in 55.5 min) and frozen 10 points under
constexpr double kRprecMin = 0.49;
constexpr double kRecallMin = 0.62;
constexpr double kJointMin = 0.11;

void progress_cb(int epoch, long step, const StepLosses& L, Model&, Rng&) {
    if (step % 360 == 0)
        std::cerr << "  epoch " << epoch << " step " << step << " cap " << L.caption << " g "
                  << L.g_total << "\n";
}

void criterion_7_toy_run() {
    TrainConfig cfg;  // the shipped defaults are the contract here
    Model m = Model::create(cfg);
    Corpus c = gen_corpus(cfg.n_scenes, cfg.data_seed, cfg.split);
    TrainData data = TrainData::from(c.train, m.vocab);
    TrainData test = TrainData::from(c.test, m.vocab);

    std::cerr << "criterion 7: training " << cfg.epochs << " epochs on " << data.specs.size()
              << " scenes\n";
    const double t0 = now_s();
    std::ostringstream metrics;
    auto res = train(cfg, m, data, test, metrics, {}, progress_cb);
    const double dt = now_s() - t0;
    if (res.aborted) {
        report(7, "toy end-to-end", false, "aborted: " + res.abort_reason);
        return;
    }

    const double rp = eval_rprecision(m, test, 10, 512, 1234);
    const CaptionEval ce = eval_caption(m, test);
    const ConsistencyEval co = eval_consistency(m, test, 0, 1234);
    report(7, "toy end-to-end",
           rp >= kRprecMin && ce.attribute_recall >= kRecallMin && co.joint_color_shape >= kJointMin,
           "rprec " + fmt(rp) + " (>= " + fmt(kRprecMin) + "), attr recall " +
               fmt(ce.attribute_recall) + " (>= " + fmt(kRecallMin) + "), joint color+shape " +
               fmt(co.joint_color_shape) + " (>= " + fmt(kJointMin) + "), " + fmt(dt / 60.0) +
               " min");
}

struct AblationCell {
    double rprec = 0, joint = 0;
};

AblationCell ablation_run(const std::string& variant, uint64_t seed) {
    TrainConfig cfg;
    cfg.n_scenes = 320;
    cfg.epochs = 60;
    cfg.eval_every = 0;
    cfg.seed = seed;
    if (variant == "-captioning") cfg.captioning = false;
    if (variant == "-2d-encode") cfg.encode_2d = false;
    if (variant == "plain loss") cfg.hinge = false;
    if (variant == "constant anneal") cfg.anneal = "constant";

    Model m = Model::create(cfg);
    Corpus c = gen_corpus(cfg.n_scenes, cfg.data_seed, cfg.split);
    TrainData data = TrainData::from(c.train, m.vocab);
    TrainData test = TrainData::from(c.test, m.vocab);
    std::ostringstream metrics;
    auto res = train(cfg, m, data, test, metrics);
    if (res.aborted) {
        std::cerr << "  ablation " << variant << " seed " << seed << " aborted\n";
        return {};
    }
    AblationCell cell;
    cell.rprec = eval_rprecision(m, test, 10, 256, 777);
    cell.joint = eval_consistency(m, test, 0, 777).joint_color_shape;
    return cell;
}

void criterion_8_ablations() {
    const char* variants[] = {"baseline", "-captioning", "-2d-encode", "plain loss",
                              "constant anneal"};
    std::ostringstream table;
    table << "| variant | seed 1 | seed 2 | seed 3 | mean rprec | mean joint |\n"
          << "|---|---|---|---|---|---|\n";
    double base_mean = 0;
    bool base_best = true;
    for (const char* v : variants) {
        double sum_rp = 0, sum_joint = 0;
        table << "| " << v << " |";
        for (uint64_t seed : {1, 2, 3}) {
            std::cerr << "criterion 8: " << v << " seed " << seed << "\n";
            AblationCell cell = ablation_run(v, seed);
            sum_rp += cell.rprec;
            sum_joint += cell.joint;
            table << " " << cell.rprec << " |";
        }
        const double mean = sum_rp / 3;
        table << " " << mean << " | " << sum_joint / 3 << " |\n";
        if (std::string(v) == "baseline") base_mean = mean;
        else if (mean > base_mean) base_best = false;
    }
    std::cout << "\nablation directions (reduced scale: 288 train scenes, 60 epochs)\n"
              << table.str() << "\n";
    // reported only; the README records how the directions line up
    report(8, "ablation directions", true,
           base_best ? "baseline mean rprec is the best of the matrix"
                     : "an ablation outperformed the baseline at this scale");
}

void criterion_9_determinism() {
    TrainConfig cfg;
    cfg.n_scenes = 160;
    cfg.epochs = 6;
    cfg.max_steps = 50;
    cfg.eval_every = 0;

    auto run_metrics = [&]() {
        Model m = Model::create(cfg);
        Corpus c = gen_corpus(cfg.n_scenes, cfg.data_seed, cfg.split);
        TrainData data = TrainData::from(c.train, m.vocab);
        TrainData test = TrainData::from(c.test, m.vocab);
        std::ostringstream metrics;
        auto res = train(cfg, m, data, test, metrics);
        return std::make_tuple(metrics.str(), std::move(m), res.state);
    };
    auto [m1, model1, st1] = run_metrics();
    auto [m2, model2, st2] = run_metrics();
    const bool same_metrics = m1 == m2;

    // checkpoint round trip must reproduce evaluation bit-exactly
    Corpus c = gen_corpus(cfg.n_scenes, cfg.data_seed, cfg.split);
    TrainData test = TrainData::from(c.test, model1.vocab);
    save_checkpoint("/tmp/tig_acc_ck.bin", model1, st1, cfg.hash());
    Model back = Model::create(cfg);
    load_checkpoint("/tmp/tig_acc_ck.bin", back, cfg.hash());
    const double rp_a = eval_rprecision(model1, test, 10, 64, 5);
    const double rp_b = eval_rprecision(back, test, 10, 64, 5);
    Rng za(9), zb(9);
    auto img_a = generate_image(model1, test.tokens[0], za);
    auto img_b = generate_image(back, test.tokens[0], zb);
    bool same_img = img_a.shape == img_b.shape;
    for (long i = 0; same_img && i < img_a.size(); ++i)
        if (img_a[i] != img_b[i]) same_img = false;

    report(9, "determinism and persistence",
           same_metrics && rp_a == rp_b && same_img,
           std::string(same_metrics ? "50-step metrics bit-identical" : "metrics diverged") +
               ", round-trip rprec " + fmt(rp_a) + (rp_a == rp_b ? " == " : " != ") + fmt(rp_b) +
               (same_img ? ", sampled image bit-identical" : ", sampled image differs"));
}

}  // namespace

int main() {
    criterion_1_gradients();
    criterion_2_causality();
    criterion_3_encoding();
    criterion_4_hinge();
    criterion_5_oracle();
    criterion_6_chance();
    criterion_7_toy_run();
    criterion_8_ablations();
    criterion_9_determinism();
    if (failures) std::cout << failures << " criteria failed\n";
    return failures;
}
