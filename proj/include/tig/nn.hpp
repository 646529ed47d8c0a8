#pragma once
// Parameter storage, layer building blocks and the Adam optimizer.
//
// Parameters live outside any tape. Each forward pass binds them onto the
// active tape as leaves (cached per tape generation so a parameter used
// twice accumulates gradients into one node).

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tig/rng.hpp"
#include "tig/tensor.hpp"

namespace tig {

template <class T>
struct Param {
    std::string name;
    Array<T> w;
    Array<T> m, v;  // Adam moments
    uint64_t bound_gen = 0;
    int bound_id = -1;

    Param(std::string n, Shape s) : name(std::move(n)), w(s), m(s), v(s) {}
};

template <class T>
class ParamStore {
public:
    Param<T>* create(const std::string& name, Shape shape) {
        TIG_CHECK(find(name) == nullptr, "duplicate parameter name: " + name);
        params_.push_back(std::make_unique<Param<T>>(name, std::move(shape)));
        return params_.back().get();
    }
    Param<T>* find(const std::string& name) const {
        for (auto& p : params_)
            if (p->name == name) return p.get();
        return nullptr;
    }
    std::vector<Param<T>*> all() const {
        std::vector<Param<T>*> out;
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }
    long total_size() const {
        long n = 0;
        for (auto& p : params_) n += p->w.size();
        return n;
    }

private:
    std::vector<std::unique_ptr<Param<T>>> params_;
};

// Binds parameters onto a tape.
template <class T>
struct Ctx {
    Tape<T>& tape;
    bool train = true;

    Tensor<T> use(Param<T>& p) {
        if (tape.grad_enabled && p.bound_gen == tape.gen) return Tensor<T>{&tape, p.bound_id};
        Tensor<T> t = tape.leaf(p.w, train);
        if (tape.grad_enabled) {
            p.bound_gen = tape.gen;
            p.bound_id = t.id;
        }
        return t;
    }

    // gradient of the last backward() w.r.t. p, zeros if p was unreachable
    Array<T> grad(Param<T>& p) const {
        if (p.bound_gen == tape.gen && tape.touched(p.bound_id)) return tape.node(p.bound_id).grad;
        return Array<T>(p.w.shape);
    }
};

// ---------------------------------------------------------------------------
// initialization

template <class T>
void fill_normal(Array<T>& a, Rng& rng, T std_dev) {
    for (long i = 0; i < a.size(); ++i) a[i] = T(rng.normal()) * std_dev;
}

// ---------------------------------------------------------------------------
// layers
//
// With equalized learning rate the stored weights are N(0,1) and the layer
// multiplies by gain/sqrt(fan_in) at runtime; otherwise the same factor is
// baked into the init and the runtime scale is 1.

template <class T>
struct Linear {
    Param<T>* W = nullptr;  // (out, in)
    Param<T>* b = nullptr;
    T wscale = T(1);

    static Linear create(ParamStore<T>& ps, Rng& rng, const std::string& name, int in, int out,
                         bool equalized, T gain = T(1), bool bias = true) {
        Linear l;
        l.W = ps.create(name + ".w", {out, in});
        const T he = gain / T(std::sqrt(double(in)));
        if (equalized) {
            fill_normal(l.W->w, rng, T(1));
            l.wscale = he;
        } else {
            fill_normal(l.W->w, rng, he);
            l.wscale = T(1);
        }
        if (bias) l.b = ps.create(name + ".b", {out});
        return l;
    }

    Tensor<T> fwd(Ctx<T>& ctx, Tensor<T> x) const {
        Tensor<T> w = ctx.use(*W);
        if (wscale != T(1)) w = scale(w, wscale);
        Tensor<T> y = matmul(x, w, false, true);
        if (b) y = add(y, ctx.use(*b));
        return y;
    }
};

template <class T>
struct Conv {
    Param<T>* W = nullptr;  // (out, in, k, k)
    Param<T>* b = nullptr;
    int stride = 1, pad = 1;
    T wscale = T(1);

    static Conv create(ParamStore<T>& ps, Rng& rng, const std::string& name, int in, int out, int k,
                       int stride, int pad, bool equalized, T gain = T(std::sqrt(2.0)), bool bias = true) {
        Conv c;
        c.W = ps.create(name + ".w", {out, in, k, k});
        c.stride = stride;
        c.pad = pad;
        const T he = gain / T(std::sqrt(double(in) * k * k));
        if (equalized) {
            fill_normal(c.W->w, rng, T(1));
            c.wscale = he;
        } else {
            fill_normal(c.W->w, rng, he);
            c.wscale = T(1);
        }
        if (bias) c.b = ps.create(name + ".b", {out});
        return c;
    }

    Tensor<T> fwd(Ctx<T>& ctx, Tensor<T> x) const {
        Tensor<T> w = ctx.use(*W);
        if (wscale != T(1)) w = scale(w, wscale);
        return conv2d(x, w, b ? ctx.use(*b) : Tensor<T>{}, stride, pad);
    }

    // weight tensor as used in the forward pass (for hand-built grad graphs)
    Tensor<T> weight(Ctx<T>& ctx) const {
        Tensor<T> w = ctx.use(*W);
        return wscale != T(1) ? scale(w, wscale) : w;
    }
};

template <class T>
struct LayerNorm {
    Param<T>* g = nullptr;
    Param<T>* b = nullptr;

    static LayerNorm create(ParamStore<T>& ps, const std::string& name, int c) {
        LayerNorm n;
        n.g = ps.create(name + ".g", {c});
        for (long i = 0; i < n.g->w.size(); ++i) n.g->w[i] = T(1);
        n.b = ps.create(name + ".b", {c});
        return n;
    }

    Tensor<T> fwd(Ctx<T>& ctx, Tensor<T> x) const {
        return add(mul(layernorm_last(x), ctx.use(*g)), ctx.use(*b));
    }
};

template <class T>
struct Embedding {
    Param<T>* table = nullptr;  // (V, e)

    static Embedding create(ParamStore<T>& ps, Rng& rng, const std::string& name, int vocab, int e) {
        Embedding emb;
        emb.table = ps.create(name + ".w", {vocab, e});
        fill_normal(emb.table->w, rng, T(0.02));
        return emb;
    }

    Tensor<T> fwd(Ctx<T>& ctx, const IArray& ids) const { return embedding(ctx.use(*table), ids); }
};

// ---------------------------------------------------------------------------
// Adam

template <class T>
struct Adam {
    T lr = T(2e-4);
    T beta1 = T(0.0);
    T beta2 = T(0.9);
    T eps = T(1e-8);
    long t = 0;

    // Updates the given parameter group from gradients bound on ctx's tape.
    // Parameters never bound on this tape are left untouched.
    void step(Ctx<T>& ctx, const std::vector<Param<T>*>& group) {
        ++t;
        const T bc1 = T(1) - T(std::pow(double(beta1), double(t)));
        const T bc2 = T(1) - T(std::pow(double(beta2), double(t)));
        for (Param<T>* p : group) {
            if (p->bound_gen != ctx.tape.gen) continue;
            const bool has = ctx.tape.touched(p->bound_id);
            const Array<T>* g = has ? &ctx.tape.node(p->bound_id).grad : nullptr;
            for (long i = 0; i < p->w.size(); ++i) {
                const T gi = has ? (*g)[i] : T(0);
                p->m[i] = beta1 * p->m[i] + (T(1) - beta1) * gi;
                p->v[i] = beta2 * p->v[i] + (T(1) - beta2) * gi * gi;
                const T mh = p->m[i] / bc1;
                const T vh = p->v[i] / bc2;
                p->w[i] -= lr * mh / (std::sqrt(vh) + eps);
            }
        }
    }
};

}  // namespace tig
