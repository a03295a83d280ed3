#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "hiacg/errors.hpp"
#include "hiacg/rng.hpp"
#include "hiacg/tensor.hpp"

namespace hiacg {

// Ordered, named collection of trainable tensors. Order defines optimizer
// slot binding and checkpoint layout, so construction must be deterministic.
template <typename S>
struct ParamStoreT {
    std::vector<std::pair<std::string, TensorT<S>>> entries;

    TensorT<S> add(const std::string& name, TensorT<S> init) {
        TensorT<S> p = TensorT<S>::param(std::move(init));
        entries.emplace_back(name, p);
        return p;
    }

    const TensorT<S>* find(const std::string& name) const {
        for (auto& [n, t] : entries)
            if (n == name) return &t;
        return nullptr;
    }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (auto& [name, t] : entries) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : entries) t.zero_grad();
    }
};

using ParamStore = ParamStoreT<float>;

// Bias-corrected Adam. step() consumes and zeroes the gradients.
template <typename S>
struct AdamT {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    struct Slot {
        std::vector<S> m, v;
    };
    std::vector<Slot> slots;
    int64_t steps = 0;

    void step(ParamStoreT<S>& params) {
        if (slots.empty()) slots.resize(params.entries.size());
        if (slots.size() != params.entries.size())
            throw StateError("optimizer bound to a different parameter set");
        ++steps;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
        for (size_t i = 0; i < params.entries.size(); ++i) {
            auto& [name, p] = params.entries[i];
            if (!p.has_grad())
                throw StateError("parameter " + name + " has no gradient; run backward first");
            auto& slot = slots[i];
            if (slot.m.empty()) {
                slot.m.assign(p.numel(), S(0));
                slot.v.assign(p.numel(), S(0));
            }
            const std::vector<S>& g = p.grad();
            S* w = p.data();
            for (int64_t j = 0; j < p.numel(); ++j) {
                double gj = static_cast<double>(g[j]);
                double mj = beta1 * slot.m[j] + (1.0 - beta1) * gj;
                double vj = beta2 * slot.v[j] + (1.0 - beta2) * gj * gj;
                slot.m[j] = static_cast<S>(mj);
                slot.v[j] = static_cast<S>(vj);
                double mhat = mj / bc1;
                double vhat = vj / bc2;
                w[j] = static_cast<S>(w[j] - lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
        params.zero_grads();
    }
};

using Adam = AdamT<float>;

template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
    return ops::add(ops::matmul(x, w), b);
}

// Pre-norm transformer decoder layer with causal self-attention and a
// 4x GELU feed-forward.
template <typename S>
struct DecoderLayerT {
    TensorT<S> wq, wk, wv, wo, bq, bk, bv, bo;
    TensorT<S> ln1_g, ln1_b, ln2_g, ln2_b;
    TensorT<S> w_ff1, b_ff1, w_ff2, b_ff2;
    int n_heads = 1;

    void init(ParamStoreT<S>& store, const std::string& prefix, int dim, int heads, Rng& rng) {
        n_heads = heads;
        if (heads < 1 || dim % heads != 0)
            throw ConfigError("head count must divide hidden dim");
        auto w = [&](const std::string& n, int64_t r, int64_t c) {
            return store.add(prefix + n, TensorT<S>::randn({r, c}, rng, 0.02));
        };
        auto zero = [&](const std::string& n, int64_t len) {
            return store.add(prefix + n, TensorT<S>::zeros({len}));
        };
        auto one = [&](const std::string& n, int64_t len) {
            auto t = TensorT<S>::zeros({len});
            std::fill(t.values().begin(), t.values().end(), S(1));
            return store.add(prefix + n, std::move(t));
        };
        wq = w("wq", dim, dim);
        wk = w("wk", dim, dim);
        wv = w("wv", dim, dim);
        wo = w("wo", dim, dim);
        bq = zero("bq", dim);
        bk = zero("bk", dim);
        bv = zero("bv", dim);
        bo = zero("bo", dim);
        ln1_g = one("ln1_g", dim);
        ln1_b = zero("ln1_b", dim);
        ln2_g = one("ln2_g", dim);
        ln2_b = zero("ln2_b", dim);
        w_ff1 = w("ff1_w", dim, 4 * dim);
        b_ff1 = zero("ff1_b", 4 * dim);
        w_ff2 = w("ff2_w", 4 * dim, dim);
        b_ff2 = zero("ff2_b", dim);
    }

    TensorT<S> forward(const TensorT<S>& x, int64_t block_size = 0) const {
        auto h = ops::layer_norm(x, ln1_g, ln1_b);
        auto attn = ops::multihead_attention(linear(h, wq, bq), linear(h, wk, bk),
                                             linear(h, wv, bv), n_heads, /*causal=*/true,
                                             block_size);
        auto x1 = ops::add(x, linear(attn, wo, bo));
        auto h2 = ops::layer_norm(x1, ln2_g, ln2_b);
        auto ff = linear(ops::gelu(linear(h2, w_ff1, b_ff1)), w_ff2, b_ff2);
        return ops::add(x1, ff);
    }
};

// Per-layer appended key/value rows for incremental decoding.
template <typename S>
struct KvCacheT {
    struct Layer {
        std::vector<S> k, v;  // len * dim, row per cached position
    };
    std::vector<Layer> layers;
    int64_t len = 0;

    void reset(size_t n_layers) {
        layers.assign(n_layers, {});
        len = 0;
    }
};

using KvCache = KvCacheT<float>;

template <typename S>
struct DecoderStackT {
    std::vector<DecoderLayerT<S>> layers;
    TensorT<S> ln_f_g, ln_f_b;
    int dim = 0;

    void init(ParamStoreT<S>& store, const std::string& prefix, int n_layers, int d, int heads,
              Rng& rng) {
        dim = d;
        layers.resize(n_layers);
        for (int i = 0; i < n_layers; ++i)
            layers[i].init(store, prefix + "l" + std::to_string(i) + ".", d, heads, rng);
        auto ones = TensorT<S>::zeros({d});
        std::fill(ones.values().begin(), ones.values().end(), S(1));
        ln_f_g = store.add(prefix + "ln_f_g", std::move(ones));
        ln_f_b = store.add(prefix + "ln_f_b", TensorT<S>::zeros({d}));
    }

    // Full-sequence graph forward; row i of the result is the final hidden
    // state for position i. block_size > 0 restricts attention to
    // independent blocks of that many positions.
    TensorT<S> forward(const TensorT<S>& x, int64_t block_size = 0) const {
        TensorT<S> h = x;
        for (const auto& layer : layers) h = layer.forward(h, block_size);
        return ops::layer_norm(h, ln_f_g, ln_f_b);
    }

    // Incremental forward of one position. Appends this position's K/V to
    // the cache and attends over everything cached so far. `score_mults`,
    // when given, accumulates attention-score multiplies (the q*k dot
    // products), the quantity the complexity benchmark reports.
    std::vector<S> infer_step(KvCacheT<S>& cache, const std::vector<S>& x_in,
                              uint64_t* score_mults = nullptr) const {
        if (cache.layers.size() != layers.size()) cache.reset(layers.size());
        if (static_cast<int>(x_in.size()) != dim) throw ShapeError("infer_step input dim mismatch");
        std::vector<S> x = x_in, h(dim), q(dim), kk(dim), vv(dim), ctx(dim), tmp;
        cache.len += 1;
        for (size_t li = 0; li < layers.size(); ++li) {
            const auto& L = layers[li];
            auto& kv = cache.layers[li];
            norm_into(x, L.ln1_g, L.ln1_b, h);
            vec_linear(h, L.wq, L.bq, q);
            vec_linear(h, L.wk, L.bk, kk);
            vec_linear(h, L.wv, L.bv, vv);
            kv.k.insert(kv.k.end(), kk.begin(), kk.end());
            kv.v.insert(kv.v.end(), vv.begin(), vv.end());
            int64_t len = cache.len;
            int hd = dim / L.n_heads;
            S inv_scale = S(1) / static_cast<S>(std::sqrt(static_cast<double>(hd)));
            std::vector<S> scores(len);
            for (int head = 0; head < L.n_heads; ++head) {
                int off = head * hd;
                S mx = -std::numeric_limits<S>::infinity();
                for (int64_t j = 0; j < len; ++j) {
                    const S* krow = kv.k.data() + j * dim + off;
                    S dot = 0;
                    for (int c = 0; c < hd; ++c) dot += q[off + c] * krow[c];
                    scores[j] = dot * inv_scale;
                    mx = std::max(mx, scores[j]);
                }
                if (score_mults) *score_mults += static_cast<uint64_t>(len) * hd;
                S denom = 0;
                for (int64_t j = 0; j < len; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    denom += scores[j];
                }
                for (int c = 0; c < hd; ++c) ctx[off + c] = 0;
                for (int64_t j = 0; j < len; ++j) {
                    S wgt = scores[j] / denom;
                    const S* vrow = kv.v.data() + j * dim + off;
                    for (int c = 0; c < hd; ++c) ctx[off + c] += wgt * vrow[c];
                }
            }
            vec_linear(ctx, L.wo, L.bo, tmp);
            for (int c = 0; c < dim; ++c) x[c] += tmp[c];
            norm_into(x, L.ln2_g, L.ln2_b, h);
            // GELU feed-forward
            std::vector<S> mid(4 * dim);
            vec_linear(h, L.w_ff1, L.b_ff1, mid);
            constexpr double inv_sqrt2 = 0.7071067811865475244;
            for (auto& m : mid) {
                double v = static_cast<double>(m);
                m = static_cast<S>(v * 0.5 * (1.0 + std::erf(v * inv_sqrt2)));
            }
            vec_linear(mid, L.w_ff2, L.b_ff2, tmp);
            for (int c = 0; c < dim; ++c) x[c] += tmp[c];
        }
        norm_into(x, ln_f_g, ln_f_b, h);
        return h;
    }

private:
    static void norm_into(const std::vector<S>& x, const TensorT<S>& g, const TensorT<S>& b,
                          std::vector<S>& out) {
        int64_t n = static_cast<int64_t>(x.size());
        out.resize(n);
        S mean = 0;
        for (S v : x) mean += v;
        mean /= S(n);
        S var = 0;
        for (S v : x) var += (v - mean) * (v - mean);
        var /= S(n);
        S inv = S(1) / std::sqrt(var + S(1e-5));
        for (int64_t i = 0; i < n; ++i) out[i] = (x[i] - mean) * inv * g.data()[i] + b.data()[i];
    }

    // out = x^T W + b for row-major W (in, out)
    static void vec_linear(const std::vector<S>& x, const TensorT<S>& w, const TensorT<S>& b,
                           std::vector<S>& out) {
        int64_t in = w.shape()[0], n = w.shape()[1];
        out.assign(n, S(0));
        const S* wd = w.data();
        for (int64_t i = 0; i < in; ++i) {
            S xv = x[i];
            if (xv == S(0)) continue;
            const S* wrow = wd + i * n;
            for (int64_t j = 0; j < n; ++j) out[j] += xv * wrow[j];
        }
        for (int64_t j = 0; j < n; ++j) out[j] += b.data()[j];
    }
};

using DecoderStack = DecoderStackT<float>;

// Fully connected stack used by the re-embedding component: GELU between
// layers, linear output.
template <typename S>
struct MlpT {
    std::vector<TensorT<S>> ws, bs;

    void init(ParamStoreT<S>& store, const std::string& prefix, const std::vector<int64_t>& dims,
              Rng& rng) {
        if (dims.size() < 2) throw ConfigError("MLP needs at least one layer");
        ws.clear();
        bs.clear();
        for (size_t i = 0; i + 1 < dims.size(); ++i) {
            double std = 0.02;
            ws.push_back(store.add(prefix + "fc" + std::to_string(i) + "_w",
                                   TensorT<S>::randn({dims[i], dims[i + 1]}, rng, std)));
            bs.push_back(store.add(prefix + "fc" + std::to_string(i) + "_b",
                                   TensorT<S>::zeros({dims[i + 1]})));
        }
    }

    TensorT<S> forward(const TensorT<S>& x) const {
        TensorT<S> h = x;
        for (size_t i = 0; i < ws.size(); ++i) {
            h = linear(h, ws[i], bs[i]);
            if (i + 1 < ws.size()) h = ops::gelu(h);
        }
        return h;
    }

    // Inference on a single row vector.
    std::vector<S> forward_vec(const std::vector<S>& x) const {
        std::vector<S> h = x, out;
        for (size_t i = 0; i < ws.size(); ++i) {
            int64_t in = ws[i].shape()[0], n = ws[i].shape()[1];
            if (static_cast<int64_t>(h.size()) != in) throw ShapeError("MLP input dim mismatch");
            out.assign(n, S(0));
            for (int64_t r = 0; r < in; ++r) {
                S xv = h[r];
                if (xv == S(0)) continue;
                const S* wrow = ws[i].data() + r * n;
                for (int64_t j = 0; j < n; ++j) out[j] += xv * wrow[j];
            }
            for (int64_t j = 0; j < n; ++j) out[j] += bs[i].data()[j];
            if (i + 1 < ws.size()) {
                constexpr double inv_sqrt2 = 0.7071067811865475244;
                for (auto& v : out) {
                    double d = static_cast<double>(v);
                    v = static_cast<S>(d * 0.5 * (1.0 + std::erf(d * inv_sqrt2)));
                }
            }
            h = out;
        }
        return h;
    }
};

using Mlp = MlpT<float>;

}  // namespace hiacg
