#pragma once
// 64-bit central-difference gradient suites for every tape primitive and for
// the training losses. Shared by the gradcheck CLI subcommand, the unit
// tests and the acceptance run.

#include <utility>

#include "tig/encoding.hpp"
#include "tig/nn.hpp"
#include "tig/tensor.hpp"

namespace tig {

struct CheckResult {
    std::string name;
    double max_rel_err;
};

namespace detail {

inline Array<double> rand_arr(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
    Array<double> a(std::move(s));
    for (long i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
    return a;
}

}  // namespace detail

// One gradcheck per substrate primitive, random shapes with extents <= 6.
inline std::vector<CheckResult> substrate_grad_suite(uint64_t seed = 7) {
    using D = double;
    Rng rng(seed);
    std::vector<CheckResult> out;
    auto run = [&](const std::string& name, auto f, const Array<D>& x) {
        out.push_back({name, grad_check<D>(f, x, 1e-4)});
    };
    auto scalarize = [](Tape<D>& t, Tensor<D> y) {
        // mix elements with fixed weights so the check exercises all outputs
        Array<D> w(y.shape());
        for (long i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * double(i) + 0.3);
        return sum(mul(y, t.constant(w)));
    };

    const Array<D> m34 = detail::rand_arr(rng, {3, 4});
    const Array<D> m45 = detail::rand_arr(rng, {4, 5});
    const Array<D> b234 = detail::rand_arr(rng, {2, 3, 4});
    const Array<D> b245 = detail::rand_arr(rng, {2, 4, 5});
    const Array<D> img = detail::rand_arr(rng, {2, 3, 6, 6});
    const Array<D> ker = detail::rand_arr(rng, {4, 3, 3, 3});
    const Array<D> bias4 = detail::rand_arr(rng, {4});

    run("add", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, add(x, t.constant(m34))); }, m34);
    run("add_broadcast", [&](Tape<D>& t, Tensor<D> x) {
        return scalarize(t, add(t.constant(b234), reshape(x, {4})));
    }, detail::rand_arr(rng, {4}));
    run("mul", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, mul(x, t.constant(m34))); }, m34);
    run("scale", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, scale(x, D(1.7))); }, m34);
    run("matmul", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, matmul(x, t.constant(m45))); }, m34);
    run("matmul_tt", [&](Tape<D>& t, Tensor<D> x) {
        return scalarize(t, matmul(x, t.constant(m34), true, true));
    }, m45);
    run("matmul_batched", [&](Tape<D>& t, Tensor<D> x) {
        return scalarize(t, matmul(x, t.constant(b245)));
    }, b234);
    run("matmul_shared_rhs", [&](Tape<D>& t, Tensor<D> x) {
        return scalarize(t, matmul(t.constant(b234), x, false, true));
    }, detail::rand_arr(rng, {5, 4}));
    run("conv2d_s1", [&](Tape<D>& t, Tensor<D> x) {
        return scalarize(t, conv2d(x, t.constant(ker), t.constant(bias4), 1, 1));
    }, img);
    run("conv2d_s1_w", [&](Tape<D>& t, Tensor<D> x) {
        return scalarize(t, conv2d(t.constant(img), x, Tensor<D>{}, 1, 1));
    }, ker);
    run("conv2d_s2", [&](Tape<D>& t, Tensor<D> x) {
        return scalarize(t, conv2d(x, t.constant(ker), Tensor<D>{}, 2, 1));
    }, img);
    const Array<D> dy_fix = detail::rand_arr(rng, {2, 4, 3, 3});
    run("conv2d_input_grad", [&](Tape<D>& t, Tensor<D> x) {
        return scalarize(t, conv2d_input_grad(x, t.constant(ker), {2, 3, 6, 6}, 2, 1));
    }, dy_fix);
    run("conv2d_input_grad_w", [&](Tape<D>& t, Tensor<D> x) {
        return scalarize(t, conv2d_input_grad(t.constant(dy_fix), x, {2, 3, 6, 6}, 2, 1));
    }, ker);
    run("upsample_nearest", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, upsample_nearest(x, 2)); },
        detail::rand_arr(rng, {2, 2, 3, 3}));
    run("upsample_bilinear", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, upsample_bilinear(x, 2)); },
        detail::rand_arr(rng, {2, 2, 3, 3}));
    run("avgpool2", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, avgpool2(x)); },
        detail::rand_arr(rng, {2, 2, 4, 4}));
    run("concat", [&](Tape<D>& t, Tensor<D> x) {
        return scalarize(t, concat<D>({x, t.constant(m34), x}, 1));
    }, m34);
    run("slice", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, slice(x, 1, 1, 2)); }, m34);
    run("reshape", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, reshape(x, {4, 3})); }, m34);
    run("permute", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, permute(x, {2, 0, 1})); }, b234);
    run("softmax", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, softmax_last(x)); }, m34);
    run("layernorm", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, layernorm_last(x)); }, m34);
    run("leaky_relu", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, leaky_relu(x, D(0.2))); }, m34);
    run("relu", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, relu(x)); }, m34);
    run("tanh", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, tanh_t(x)); }, m34);
    run("sigmoid", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, sigmoid(x)); }, m34);
    run("log", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, log_t(x)); },
        detail::rand_arr(rng, {3, 4}, 0.5, 2.0));
    run("exp", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, exp_t(x)); }, m34);
    run("sum", [&](Tape<D>& t, Tensor<D> x) { (void)t; return sum(x); }, m34);
    run("mean", [&](Tape<D>& t, Tensor<D> x) { (void)t; return mean(x); }, m34);
    run("mean_last", [&](Tape<D>& t, Tensor<D> x) { return scalarize(t, mean_last(x)); }, b234);
    {
        IArray ids({2, 3});
        for (long i = 0; i < ids.size(); ++i) ids[i] = int(rng.below(5));
        run("embedding", [&, ids](Tape<D>& t, Tensor<D> x) { return scalarize(t, embedding(x, ids)); },
            detail::rand_arr(rng, {5, 4}));
    }
    {
        Array<uint8_t> mask({3, 4});
        for (long i = 0; i < mask.size(); ++i) mask[i] = uint8_t(rng.below(2));
        run("masked_fill", [&, mask](Tape<D>& t, Tensor<D> x) {
            return scalarize(t, masked_fill(x, mask, D(-3)));
        }, m34);
    }
    run("add_encoding", [&](Tape<D>& t, Tensor<D> x) {
        return scalarize(t, add_encoding(x, pos_encode_2d<D>(2, 2, 4)));
    }, detail::rand_arr(rng, {4, 4}));
    return out;
}

}  // namespace tig
