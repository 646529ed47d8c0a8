#pragma once
// Training objectives: next-word captioning loss, unconditional adversarial
// loss, the annealing conditional hinge with a detached pivot, the generator
// total, and the R1 gradient penalty.

#include "tig/checks.hpp"
#include "tig/text.hpp"

namespace tig {

enum class AnnealSchedule { dynamic, constant, early_stop, late_begin };

inline AnnealSchedule anneal_schedule_from(const std::string& s) {
    if (s == "dynamic") return AnnealSchedule::dynamic;
    if (s == "constant") return AnnealSchedule::constant;
    if (s == "early-stop") return AnnealSchedule::early_stop;
    if (s == "late-begin") return AnnealSchedule::late_begin;
    fail("unknown anneal schedule: " + s);
}

struct AnnealState {
    int i_epoch = 0;
    int n_epochs = 1;
    AnnealSchedule schedule = AnnealSchedule::dynamic;

    double p() const {
        if (schedule == AnnealSchedule::constant) return 1.0;
        return double(i_epoch) / double(n_epochs);
    }
    // the hinge fake term is active only inside the schedule's window
    bool fake_enabled() const {
        if (schedule == AnnealSchedule::early_stop) return i_epoch < (2 * n_epochs + 2) / 3;
        if (schedule == AnnealSchedule::late_begin) return i_epoch >= (n_epochs + 5) / 6;
        return true;
    }
};

// mean over non-pad positions of -log P(next token); logits (B, L, V),
// logits at position k score token k+1
template <class T>
Tensor<T> loss_caption(Tensor<T> logits, const CaptionBatch& batch) {
    const int B = logits.shape()[0], L = logits.shape()[1], V = logits.shape()[2];
    TIG_CHECK(B == batch.batch() && L == batch.len(), "loss_caption: logits do not match the batch");
    Array<T> onehot({B, L, V});
    long count = 0;
    for (int b = 0; b < B; ++b)
        for (int k = 0; k + 1 < L; ++k) {
            if (batch.pad_mask[long(b) * L + k + 1]) continue;
            onehot[(long(b) * L + k) * V + batch.ids[long(b) * L + k + 1]] = T(1);
            ++count;
        }
    TIG_CHECK(count > 0, "loss_caption: no supervised positions");
    Tensor<T> lp = log_t(clamp(softmax_last(logits), T(1e-12), T(1)));
    return scale(sum(mul(lp, logits.tp->constant(onehot))), T(-1) / T(count));
}

namespace detail {
template <class T>
Tensor<T> clamp_prob(Tensor<T> u) {
    return clamp(u, T(1e-7), T(1) - T(1e-7));
}
}  // namespace detail

// -E[log u_real] - E[log(1 - u_fake)], on probabilities
template <class T>
Tensor<T> loss_uncond_d(Tensor<T> u_real, Tensor<T> u_fake) {
    Tensor<T> a = scale(mean(log_t(detail::clamp_prob(u_real))), T(-1));
    Tensor<T> b = scale(mean(log_t(affine(detail::clamp_prob(u_fake), T(-1), T(1)))), T(-1));
    return add(a, b);
}

// non-saturating: -E[log u_fake]
template <class T>
Tensor<T> loss_uncond_g(Tensor<T> u_fake) {
    return scale(mean(log_t(detail::clamp_prob(u_fake))), T(-1));
}

// E[max(0, 1 - c_match)] + E[max(0, 1 + c_mis)] + E[max(0, c_fake - p*s_pivot)]
// with s_pivot = stop-gradient(batch mean of c_match)
template <class T>
Tensor<T> loss_cond_hinge_d(Tensor<T> c_match, Tensor<T> c_mis, Tensor<T> c_fake,
                            const AnnealState& anneal) {
    Tensor<T> loss = add(mean(relu(affine(c_match, T(-1), T(1)))),   // 1 - c_match
                         mean(relu(affine(c_mis, T(1), T(1)))));     // 1 + c_mis
    if (anneal.fake_enabled()) {
        // the pivot is detached, so its batch mean enters as a plain constant
        T pivot = 0;
        for (long i = 0; i < c_match.val().size(); ++i) pivot += c_match.val()[i];
        pivot /= T(c_match.val().size());
        loss = add(loss, mean(relu(affine(c_fake, T(1), -T(anneal.p()) * pivot))));
    }
    return loss;
}

// plain BCE alternative for the conditional head (ablation)
template <class T>
Tensor<T> loss_cond_plain_d(Tensor<T> c_match, Tensor<T> c_mis, Tensor<T> c_fake) {
    auto p_match = detail::clamp_prob(sigmoid(c_match));
    auto p_mis = detail::clamp_prob(sigmoid(c_mis));
    auto p_fake = detail::clamp_prob(sigmoid(c_fake));
    Tensor<T> loss = scale(mean(log_t(p_match)), T(-1));
    loss = add(loss, scale(mean(log_t(affine(p_mis, T(-1), T(1)))), T(-1)));
    return add(loss, scale(mean(log_t(affine(p_fake, T(-1), T(1)))), T(-1)));
}

// generator side of the conditional head: -E[c_fake]
template <class T>
Tensor<T> loss_cond_g(Tensor<T> c_fake) {
    return scale(mean(c_fake), T(-1));
}

struct LossWeights {
    double caption = 1.0, uncond = 1.0, cond = 1.0;
};

template <class T>
Tensor<T> loss_g_total(Tensor<T> c_fake, Tensor<T> u_fake, Tensor<T> caption_logits_fake,
                       const CaptionBatch& batch, const LossWeights& w = {}) {
    Tensor<T> loss = scale(loss_caption(caption_logits_fake, batch), T(w.caption));
    loss = add(loss, scale(loss_uncond_g(u_fake), T(w.uncond)));
    return add(loss, scale(loss_cond_g(c_fake), T(w.cond)));
}

// gamma/2 * E_batch[ sum_pixels grad^2 ]; img_grad from r1_grad_graph
template <class T>
Tensor<T> r1_penalty(Tensor<T> img_grad, T gamma = T(10)) {
    const int B = img_grad.shape()[0];
    return scale(sum(mul(img_grad, img_grad)), gamma / (T(2) * T(B)));
}

// finite-difference suite over the loss surface, mirroring substrate_grad_suite
inline std::vector<CheckResult> losses_grad_suite(uint64_t seed = 17) {
    using T = double;
    std::vector<CheckResult> out;
    Rng rng(seed);
    auto randa = [&](Shape s) {
        Array<T> a(std::move(s));
        for (long i = 0; i < a.size(); ++i) a[i] = rng.normal();
        return a;
    };
    auto push = [&](const std::string& name, auto f, const Array<T>& x) {
        out.push_back({name, grad_check<T>(f, x, 1e-4)});
    };

    CaptionBatch b = CaptionBatch::from({{1, 4, 5, 6, 2}, {1, 5, 4, 2, 0}});
    push("loss_caption", [&](Tape<T>&, Tensor<T> x) { return loss_caption(reshape(x, {2, 5, 8}), b); },
         randa({80}));
    const Array<T> probs({6}, {0.1, 0.4, 0.7, 0.2, 0.9, 0.5});
    push("loss_uncond_d",
         [&](Tape<T>& t, Tensor<T> x) { return loss_uncond_d(sigmoid(x), t.constant(probs)); },
         randa({6}));
    push("loss_uncond_g", [&](Tape<T>&, Tensor<T> x) { return loss_uncond_g(sigmoid(x)); }, randa({6}));
    // differentiate the hinge through c_fake; the c_match path to the pivot is
    // detached by contract, so finite differences do not apply to it
    const Array<T> match({4}, {1.6, 0.4, 2.2, 0.7});
    const Array<T> mis = randa({4});
    AnnealState an{30, 60, AnnealSchedule::dynamic};
    push("loss_cond_hinge_d",
         [&](Tape<T>& t, Tensor<T> x) {
             return loss_cond_hinge_d(t.constant(match), t.constant(mis), x, an);
         },
         Array<T>({4}, {0.9, 1.7, -0.2, 2.0}));
    push("loss_cond_plain_d",
         [&](Tape<T>& t, Tensor<T> x) {
             return loss_cond_plain_d(x, t.constant(mis), t.constant(match));
         },
         randa({4}));
    push("loss_cond_g", [&](Tape<T>&, Tensor<T> x) { return loss_cond_g(x); }, randa({4}));
    push("r1_penalty", [&](Tape<T>&, Tensor<T> x) { return r1_penalty(reshape(x, {2, 1, 3, 3})); },
         randa({18}));
    return out;
}

}  // namespace tig
