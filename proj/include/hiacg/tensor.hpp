#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "hiacg/errors.hpp"
#include "hiacg/rng.hpp"

namespace hiacg {

// ---------------------------------------------------------------------------
// Dense row-major matmul kernels. ikj order so the inner loop streams rows
// and auto-vectorizes.
// ---------------------------------------------------------------------------
namespace kernels {

// C(M,N) = A(M,K) * B(K,N), optionally accumulating into C.
template <typename S, bool Acc = false>
void mm_nn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        S* crow = c + i * n;
        if (!Acc) std::fill(crow, crow + n, S(0));
        const S* arow = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            S av = arow[p];
            if (av == S(0)) continue;
            const S* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(M,N) = A(K,M)^T * B(K,N).
template <typename S, bool Acc = false>
void mm_tn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    if (!Acc) std::fill(c, c + m * n, S(0));
    for (int64_t p = 0; p < k; ++p) {
        const S* arow = a + p * m;
        const S* brow = b + p * n;
        for (int64_t i = 0; i < m; ++i) {
            S av = arow[i];
            if (av == S(0)) continue;
            S* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(M,N) = A(M,K) * B(N,K)^T. B is transposed into scratch first so the
// inner loop streams like mm_nn (dot-product loops vectorize poorly).
template <typename S, bool Acc = false>
void mm_nt(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
    thread_local std::vector<S> bt;
    bt.resize(k * n);
    for (int64_t j = 0; j < n; ++j)
        for (int64_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    mm_nn<S, Acc>(a, bt.data(), c, m, k, n);
}

}  // namespace kernels

// When false, ops compute values only: no parents, no backward closures.
// Scoped via NoGradGuard.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

// ---------------------------------------------------------------------------
// Reverse-mode autodiff over dense 1-D/2-D tensors. The scalar type is a
// template parameter: the library runs float; gradient-check oracles
// instantiate double.
// ---------------------------------------------------------------------------
template <typename S>
class TensorT {
public:
    struct Node {
        std::vector<int64_t> shape;
        std::vector<S> value;
        std::vector<S> grad;  // materialized on demand, same size as value
        bool requires_grad = false;
        bool is_leaf = true;
        std::vector<std::shared_ptr<Node>> parents;
        // Reads this node's grad, accumulates into parents' grads.
        std::function<void(Node&)> backprop;

        void ensure_grad() {
            if (grad.size() != value.size()) grad.assign(value.size(), S(0));
        }
    };

    TensorT() = default;

    static TensorT zeros(std::vector<int64_t> shape) {
        TensorT t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->value.assign(t.numel_of(t.n_->shape), S(0));
        return t;
    }

    static TensorT from_values(std::vector<int64_t> shape, std::vector<S> values) {
        TensorT t = zeros(shape);
        if (values.size() != t.n_->value.size())
            throw ShapeError("value count " + std::to_string(values.size()) +
                             " does not match shape (" + shape_str(t.n_->shape) + ")");
        t.n_->value = std::move(values);
        return t;
    }

    static TensorT randn(std::vector<int64_t> shape, Rng& rng, double stddev) {
        TensorT t = zeros(std::move(shape));
        for (auto& v : t.n_->value) v = static_cast<S>(rng.normal(0.0, stddev));
        return t;
    }

    // Trainable leaf.
    static TensorT param(TensorT init) {
        init.n_->requires_grad = true;
        init.n_->is_leaf = true;
        return init;
    }

    bool defined() const { return n_ != nullptr; }
    const std::vector<int64_t>& shape() const { return n_->shape; }
    int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }
    int64_t rows() const { return n_->shape.size() == 2 ? n_->shape[0] : 1; }
    int64_t cols() const { return n_->shape.empty() ? 1 : n_->shape.back(); }

    std::vector<S>& values() { return n_->value; }
    const std::vector<S>& values() const { return n_->value; }
    S* data() { return n_->value.data(); }
    const S* data() const { return n_->value.data(); }
    S item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar tensor");
        return n_->value[0];
    }

    bool requires_grad() const { return n_->requires_grad; }
    bool has_grad() const { return n_ && n_->grad.size() == n_->value.size(); }
    const std::vector<S>& grad() const {
        if (!has_grad()) throw StateError("gradient not populated; run backward first");
        return n_->grad;
    }
    void zero_grad() {
        if (n_) n_->grad.assign(n_->value.size(), S(0));
    }

    std::shared_ptr<Node> node() const { return n_; }

    bool all_finite() const {
        for (S v : n_->value)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    // -- graph construction helpers ------------------------------------------

    static TensorT make_op(std::vector<int64_t> shape, std::vector<std::shared_ptr<Node>> parents,
                           std::function<void(Node&)> backprop) {
        TensorT t = zeros(std::move(shape));
        if (grad_mode()) {
            bool needs = false;
            for (auto& p : parents)
                if (p->requires_grad) needs = true;
            if (needs) {
                t.n_->requires_grad = true;
                t.n_->is_leaf = false;
                t.n_->parents = std::move(parents);
                t.n_->backprop = std::move(backprop);
            }
        }
        return t;
    }

    static int64_t numel_of(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d < 0) throw ShapeError("negative dimension");
            n *= d;
        }
        return n;
    }

    static std::string shape_str(const std::vector<int64_t>& s) {
        std::string out;
        for (size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
        return out.empty() ? "scalar" : out;
    }

private:
    std::shared_ptr<Node> n_;
};

using Tensor = TensorT<float>;

namespace ops {

template <typename S>
void check_2d(const TensorT<S>& t, const char* what) {
    if (t.shape().size() != 2) throw ShapeError(std::string(what) + " must be 2-D");
}

// C = A(M,K) * B(K,N)
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    check_2d(a, "matmul lhs");
    check_2d(b, "matmul rhs");
    int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
        throw ShapeError("matmul shapes (" + TensorT<S>::shape_str(a.shape()) + ") x (" +
                         TensorT<S>::shape_str(b.shape()) + ") do not agree");
    auto an = a.node(), bn = b.node();
    TensorT<S> out = TensorT<S>::make_op({m, n}, {an, bn}, [an, bn, m, k, n](auto& self) {
        if (an->requires_grad) {
            an->ensure_grad();  // dA = dC * B^T
            kernels::mm_nt<S, true>(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();  // dB = A^T * dC
            kernels::mm_tn<S, true>(an->value.data(), self.grad.data(), bn->grad.data(), k, m, n);
        }
    });
    kernels::mm_nn<S>(a.data(), b.data(), out.data(), m, k, n);
    return out;
}

// Elementwise sum; also broadcasts a length-N vector over the rows of an
// (M,N) matrix (bias add).
template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    auto an = a.node(), bn = b.node();
    bool broadcast = a.shape().size() == 2 && b.shape().size() == 1 && a.shape()[1] == b.shape()[0];
    if (!broadcast && a.shape() != b.shape())
        throw ShapeError("add shapes (" + TensorT<S>::shape_str(a.shape()) + ") vs (" +
                         TensorT<S>::shape_str(b.shape()) + ") do not agree");
    TensorT<S> out = TensorT<S>::make_op(a.shape(), {an, bn}, [an, bn, broadcast](auto& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            if (broadcast) {
                int64_t n = an->shape[1];
                for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i % n] += self.grad[i];
            } else {
                for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
            }
        }
    });
    int64_t n = broadcast ? a.shape()[1] : 0;
    for (int64_t i = 0; i < out.numel(); ++i)
        out.data()[i] = a.data()[i] + (broadcast ? b.data()[i % n] : b.data()[i]);
    return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S factor) {
    auto an = a.node();
    TensorT<S> out = TensorT<S>::make_op(a.shape(), {an}, [an, factor](auto& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += factor * self.grad[i];
    });
    for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = factor * a.data()[i];
    return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape()) throw ShapeError("mul needs identical shapes");
    auto an = a.node(), bn = b.node();
    TensorT<S> out = TensorT<S>::make_op(a.shape(), {an, bn}, [an, bn](auto& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] += self.grad[i] * an->value[i];
        }
    });
    for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

template <typename S>
TensorT<S> sum(const TensorT<S>& a) {
    auto an = a.node();
    TensorT<S> out = TensorT<S>::make_op({1}, {an}, [an](auto& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (auto& g : an->grad) g += self.grad[0];
    });
    S acc = 0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
    out.data()[0] = acc;
    return out;
}

// Row-wise softmax. With causal=true the matrix must be square and entries
// above the diagonal are masked out before normalization.
template <typename S>
TensorT<S> softmax_rows(const TensorT<S>& a, bool causal = false) {
    check_2d(a, "softmax input");
    int64_t m = a.shape()[0], n = a.shape()[1];
    if (causal && m != n) throw ShapeError("causal softmax needs a square score matrix");
    auto an = a.node();
    TensorT<S> out = TensorT<S>::make_op(a.shape(), {an}, [an, m, n](auto& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        // dx = y * (dy - sum(dy * y)) per row; masked entries have y == 0
        for (int64_t i = 0; i < m; ++i) {
            const S* y = self.value.data() + i * n;
            const S* dy = self.grad.data() + i * n;
            S dot = 0;
            for (int64_t j = 0; j < n; ++j) dot += dy[j] * y[j];
            S* dx = an->grad.data() + i * n;
            for (int64_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
    });
    for (int64_t i = 0; i < m; ++i) {
        const S* x = a.data() + i * n;
        S* y = out.data() + i * n;
        int64_t valid = causal ? i + 1 : n;
        S mx = x[0];
        for (int64_t j = 1; j < valid; ++j) mx = std::max(mx, x[j]);
        S denom = 0;
        for (int64_t j = 0; j < valid; ++j) {
            y[j] = std::exp(x[j] - mx);
            denom += y[j];
        }
        for (int64_t j = 0; j < valid; ++j) y[j] /= denom;
        for (int64_t j = valid; j < n; ++j) y[j] = 0;
    }
    return out;
}

// Per-row layer normalization with learned gain/bias (both length N).
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      S eps = S(1e-5)) {
    check_2d(x, "layer_norm input");
    int64_t m = x.shape()[0], n = x.shape()[1];
    if (gamma.numel() != n || beta.numel() != n)
        throw ShapeError("layer_norm gain/bias must have length " + std::to_string(n));
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    // stash normalized values and inverse stddev for backward
    auto xhat = std::make_shared<std::vector<S>>(m * n);
    auto inv_std = std::make_shared<std::vector<S>>(m);
    TensorT<S> out =
        TensorT<S>::make_op(x.shape(), {xn, gn, bn}, [xn, gn, bn, xhat, inv_std, m, n](auto& self) {
            for (int64_t i = 0; i < m; ++i) {
                const S* dy = self.grad.data() + i * n;
                const S* xh = xhat->data() + i * n;
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (int64_t j = 0; j < n; ++j) gn->grad[j] += dy[j] * xh[j];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (int64_t j = 0; j < n; ++j) bn->grad[j] += dy[j];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    S mean_dxhat = 0, mean_dxhat_xhat = 0;
                    for (int64_t j = 0; j < n; ++j) {
                        S dxh = dy[j] * gn->value[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= S(n);
                    mean_dxhat_xhat /= S(n);
                    S* dx = xn->grad.data() + i * n;
                    for (int64_t j = 0; j < n; ++j) {
                        S dxh = dy[j] * gn->value[j];
                        dx[j] += (*inv_std)[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            }
        });
    for (int64_t i = 0; i < m; ++i) {
        const S* xi = x.data() + i * n;
        S mean = 0;
        for (int64_t j = 0; j < n; ++j) mean += xi[j];
        mean /= S(n);
        S var = 0;
        for (int64_t j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= S(n);
        S is = S(1) / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        S* y = out.data() + i * n;
        S* xh = xhat->data() + i * n;
        for (int64_t j = 0; j < n; ++j) {
            xh[j] = (xi[j] - mean) * is;
            y[j] = xh[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    return out;
}

// Exact GELU: x * Phi(x).
template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
    auto xn = x.node();
    TensorT<S> out = TensorT<S>::make_op(x.shape(), {xn}, [xn](auto& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (size_t i = 0; i < self.grad.size(); ++i) {
            double v = static_cast<double>(xn->value[i]);
            double phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            xn->grad[i] += self.grad[i] * static_cast<S>(phi + v * pdf);
        }
    });
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (int64_t i = 0; i < out.numel(); ++i) {
        double v = static_cast<double>(x.data()[i]);
        out.data()[i] = static_cast<S>(v * 0.5 * (1.0 + std::erf(v * inv_sqrt2)));
    }
    return out;
}

// Rows of `table` gathered by id.
template <typename S>
TensorT<S> embedding_lookup(const TensorT<S>& table, const std::vector<int>& ids) {
    check_2d(table, "embedding table");
    int64_t v = table.shape()[0], d = table.shape()[1];
    for (int id : ids)
        if (id < 0 || id >= v)
            throw ValueError("embedding id " + std::to_string(id) + " outside vocabulary " +
                             std::to_string(v));
    auto tn = table.node();
    auto idv = std::make_shared<std::vector<int>>(ids);
    TensorT<S> out = TensorT<S>::make_op({static_cast<int64_t>(ids.size()), d}, {tn},
                                         [tn, idv, d](auto& self) {
                                             if (!tn->requires_grad) return;
                                             tn->ensure_grad();
                                             for (size_t i = 0; i < idv->size(); ++i) {
                                                 const S* g = self.grad.data() + i * d;
                                                 S* dst = tn->grad.data() + (*idv)[i] * d;
                                                 for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
                                             }
                                         });
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.data() + ids[i] * d, d, out.data() + i * d);
    return out;
}

// Stacks 2-D pieces with identical column counts.
template <typename S>
TensorT<S> concat_rows(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    int64_t n = parts[0].shape().back();
    int64_t m = 0;
    std::vector<std::shared_ptr<typename TensorT<S>::Node>> nodes;
    for (const auto& p : parts) {
        check_2d(p, "concat part");
        if (p.shape()[1] != n) throw ShapeError("concat parts disagree on column count");
        m += p.shape()[0];
        nodes.push_back(p.node());
    }
    auto nodes_copy = nodes;
    TensorT<S> out = TensorT<S>::make_op({m, n}, std::move(nodes), [nodes_copy, n](auto& self) {
        int64_t row = 0;
        for (auto& p : nodes_copy) {
            int64_t rows = p->shape[0];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int64_t i = 0; i < rows * n; ++i) p->grad[i] += self.grad[row * n + i];
            }
            row += rows;
        }
    });
    int64_t row = 0;
    for (const auto& p : parts) {
        std::copy_n(p.data(), p.numel(), out.data() + row * n);
        row += p.shape()[0];
    }
    return out;
}

template <typename S>
TensorT<S> slice_rows(const TensorT<S>& a, int64_t start, int64_t len) {
    check_2d(a, "slice input");
    int64_t m = a.shape()[0], n = a.shape()[1];
    if (start < 0 || len < 1 || start + len > m)
        throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of " + std::to_string(m) + " rows");
    auto an = a.node();
    TensorT<S> out = TensorT<S>::make_op({len, n}, {an}, [an, start, n](auto& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[start * n + i] += self.grad[i];
    });
    std::copy_n(a.data() + start * n, len * n, out.data());
    return out;
}

// Same backing values, new shape. Implemented as a copy with pass-through
// gradient.
template <typename S>
TensorT<S> reshape(const TensorT<S>& a, std::vector<int64_t> shape) {
    if (TensorT<S>::numel_of(shape) != a.numel())
        throw ShapeError("reshape to (" + TensorT<S>::shape_str(shape) + ") changes element count");
    auto an = a.node();
    TensorT<S> out = TensorT<S>::make_op(std::move(shape), {an}, [an](auto& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
    std::copy_n(a.data(), a.numel(), out.data());
    return out;
}

// Mean token-level cross entropy of row logits against target ids.
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<int>& targets) {
    check_2d(logits, "cross_entropy logits");
    int64_t m = logits.shape()[0], v = logits.shape()[1];
    if (static_cast<int64_t>(targets.size()) != m)
        throw ShapeError("cross_entropy needs one target per logit row");
    for (int t : targets)
        if (t < 0 || t >= v)
            throw ValueError("cross_entropy target " + std::to_string(t) +
                             " outside vocabulary " + std::to_string(v));
    auto ln = logits.node();
    auto probs = std::make_shared<std::vector<S>>(m * v);
    auto tgt = std::make_shared<std::vector<int>>(targets);
    TensorT<S> out = TensorT<S>::make_op({1}, {ln}, [ln, probs, tgt, m, v](auto& self) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        S g = self.grad[0] / S(m);
        for (int64_t i = 0; i < m; ++i) {
            const S* p = probs->data() + i * v;
            S* dl = ln->grad.data() + i * v;
            for (int64_t j = 0; j < v; ++j) dl[j] += g * p[j];
            dl[(*tgt)[i]] -= g;
        }
    });
    S loss = 0;
    for (int64_t i = 0; i < m; ++i) {
        const S* x = logits.data() + i * v;
        S mx = x[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
        S denom = 0;
        for (int64_t j = 0; j < v; ++j) denom += std::exp(x[j] - mx);
        S logz = std::log(denom) + mx;
        loss += logz - x[targets[i]];
        S* p = probs->data() + i * v;
        for (int64_t j = 0; j < v; ++j) p[j] = std::exp(x[j] - logz);
    }
    out.data()[0] = loss / S(m);
    return out;
}

// Multi-head scaled-dot-product attention over full projections q,k,v of
// shape (seq, dim); heads are contiguous column groups. Keeps the per-head
// probability matrices for backward. With block_size > 0 the causal mask is
// additionally block-local: query i attends only within its own block of
// `block_size` positions (used to batch independent inner sequences), and
// both passes skip the masked-out work.
template <typename S>
TensorT<S> multihead_attention(const TensorT<S>& q, const TensorT<S>& k, const TensorT<S>& v,
                               int n_heads, bool causal = true, int64_t block_size = 0) {
    check_2d(q, "attention q");
    if (q.shape() != k.shape() || q.shape() != v.shape())
        throw ShapeError("attention q/k/v must share shape");
    int64_t seq = q.shape()[0], dim = q.shape()[1];
    if (n_heads < 1 || dim % n_heads != 0)
        throw ConfigError("head count " + std::to_string(n_heads) + " must divide model dim " +
                          std::to_string(dim));
    int64_t hd = dim / n_heads;
    S inv_scale = S(1) / static_cast<S>(std::sqrt(static_cast<double>(hd)));

    // independent attention segments: the whole sequence, or one per block
    std::vector<std::pair<int64_t, int64_t>> segs;  // (start, len)
    if (block_size > 0) {
        if (seq % block_size != 0)
            throw ShapeError("sequence length not a multiple of the attention block size");
        for (int64_t at = 0; at < seq; at += block_size) segs.push_back({at, block_size});
    } else {
        segs.push_back({0, seq});
    }
    int64_t per_head = 0;
    for (auto& [at, len] : segs) per_head += len * len;

    auto qn = q.node(), kn = k.node(), vn = v.node();
    auto probs = std::make_shared<std::vector<S>>(static_cast<size_t>(n_heads) * per_head);

    auto gather = [dim, hd](const std::vector<S>& src, int64_t at, int64_t len, int64_t off,
                            std::vector<S>& dst) {
        dst.resize(len * hd);
        for (int64_t i = 0; i < len; ++i)
            std::copy_n(src.data() + (at + i) * dim + off, hd, dst.data() + i * hd);
    };
    auto scatter_add = [dim, hd](const std::vector<S>& src, int64_t at, int64_t len, int64_t off,
                                 std::vector<S>& dst) {
        for (int64_t i = 0; i < len; ++i)
            for (int64_t j = 0; j < hd; ++j) dst[(at + i) * dim + off + j] += src[i * hd + j];
    };

    TensorT<S> out = TensorT<S>::make_op(
        q.shape(), {qn, kn, vn},
        [qn, kn, vn, probs, segs, n_heads, per_head, hd, dim, inv_scale, gather,
         scatter_add](auto& self) {
            bool need_qk = qn->requires_grad || kn->requires_grad;
            std::vector<S> qh, kh, vh, dctx, dvh, dprob, dscore, dqh, dkh;
            if (qn->requires_grad) qn->ensure_grad();
            if (kn->requires_grad) kn->ensure_grad();
            if (vn->requires_grad) vn->ensure_grad();
            for (int h = 0; h < n_heads; ++h) {
                int64_t off = h * hd;
                int64_t seg_off = static_cast<int64_t>(h) * per_head;
                for (auto& [at, len] : segs) {
                    const S* p = probs->data() + seg_off;
                    gather(self.grad, at, len, off, dctx);
                    if (vn->requires_grad) {
                        gather(vn->value, at, len, off, vh);  // keep vh for dprob below
                        dvh.assign(len * hd, S(0));
                        kernels::mm_tn<S>(p, dctx.data(), dvh.data(), len, len, hd);
                        scatter_add(dvh, at, len, off, vn->grad);
                    }
                    if (need_qk) {
                        if (!vn->requires_grad) gather(vn->value, at, len, off, vh);
                        gather(qn->value, at, len, off, qh);
                        gather(kn->value, at, len, off, kh);
                        dprob.resize(len * len);
                        kernels::mm_nt<S>(dctx.data(), vh.data(), dprob.data(), len, hd, len);
                        dscore.resize(len * len);
                        for (int64_t i = 0; i < len; ++i) {
                            const S* pi = p + i * len;
                            const S* dpi = dprob.data() + i * len;
                            S dot = 0;
                            for (int64_t j = 0; j < len; ++j) dot += dpi[j] * pi[j];
                            S* ds = dscore.data() + i * len;
                            for (int64_t j = 0; j < len; ++j) ds[j] = pi[j] * (dpi[j] - dot);
                        }
                        if (qn->requires_grad) {
                            dqh.assign(len * hd, S(0));
                            kernels::mm_nn<S>(dscore.data(), kh.data(), dqh.data(), len, len, hd);
                            for (auto& g : dqh) g *= inv_scale;
                            scatter_add(dqh, at, len, off, qn->grad);
                        }
                        if (kn->requires_grad) {
                            dkh.assign(len * hd, S(0));
                            kernels::mm_tn<S>(dscore.data(), qh.data(), dkh.data(), len, len, hd);
                            for (auto& g : dkh) g *= inv_scale;
                            scatter_add(dkh, at, len, off, kn->grad);
                        }
                    }
                    seg_off += len * len;
                }
            }
        });

    std::vector<S> qh, kh, vh, ctx;
    for (int h = 0; h < n_heads; ++h) {
        int64_t off = h * hd;
        int64_t seg_off = static_cast<int64_t>(h) * per_head;
        for (auto& [at, len] : segs) {
            gather(q.values(), at, len, off, qh);
            gather(k.values(), at, len, off, kh);
            gather(v.values(), at, len, off, vh);
            S* p = probs->data() + seg_off;
            kernels::mm_nt<S>(qh.data(), kh.data(), p, len, hd, len);
            for (int64_t i = 0; i < len; ++i) {
                S* prow = p + i * len;
                int64_t valid = causal ? i + 1 : len;
                S mx = prow[0] * inv_scale;
                for (int64_t j = 0; j < valid; ++j) mx = std::max(mx, prow[j] * inv_scale);
                S denom = 0;
                for (int64_t j = 0; j < valid; ++j) {
                    prow[j] = std::exp(prow[j] * inv_scale - mx);
                    denom += prow[j];
                }
                for (int64_t j = 0; j < valid; ++j) prow[j] /= denom;
                for (int64_t j = valid; j < len; ++j) prow[j] = 0;
            }
            ctx.assign(len * hd, S(0));
            kernels::mm_nn<S>(p, vh.data(), ctx.data(), len, len, hd);
            for (int64_t i = 0; i < len; ++i)
                std::copy_n(ctx.data() + i * hd, hd, out.data() + (at + i) * dim + off);
            seg_off += len * len;
        }
    }
    return out;
}

}  // namespace ops

// Populates gradients of everything reachable from a scalar loss.
template <typename S>
void backward(const TensorT<S>& loss) {
    if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss");
    using Node = typename TensorT<S>::Node;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // iterative post-order DFS over parents
    std::vector<std::pair<Node*, size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) n->ensure_grad();
    loss.node()->grad[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

}  // namespace hiacg
