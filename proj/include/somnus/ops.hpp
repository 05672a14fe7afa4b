#pragma once
// Core tensor ops. Elementwise binaries broadcast a trailing-suffix (or
// scalar) operand; *_leading variants broadcast a leading-prefix operand.
// Every backward accumulates in fixed index order.

#include <cmath>
#include <cstring>
#include <initializer_list>

#include "somnus/tensor.hpp"

namespace somnus {

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    for (std::size_t i = 0; i < small.size(); ++i)
        if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    return true;
}

struct SuffixPlan {
    bool a_is_big = true;  // which operand carries the output shape
    Index repeat = 1;
    Index inner = 1;
};

inline SuffixPlan suffix_plan(const char* op, const Tensor& a, const Tensor& b) {
    SuffixPlan p;
    if (a.shape() == b.shape()) {
        p.repeat = 1;
        p.inner = a.numel();
        return p;
    }
    if (b.numel() == 1 || is_suffix(b.shape(), a.shape())) {
        p.a_is_big = true;
        p.inner = b.numel();
        p.repeat = a.numel() / std::max<Index>(p.inner, 1);
        return p;
    }
    if (a.numel() == 1 || is_suffix(a.shape(), b.shape())) {
        p.a_is_big = false;
        p.inner = a.numel();
        p.repeat = b.numel() / std::max<Index>(p.inner, 1);
        return p;
    }
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are not suffix-broadcastable");
}

using BinFn = double (*)(double, double);

inline Tensor binary_op(const char* name, const Tensor& a, const Tensor& b,
                        BinFn f, BinFn dfa, BinFn dfb) {
    SuffixPlan plan = suffix_plan(name, a, b);
    const Tensor& big = plan.a_is_big ? a : b;
    const Tensor& small = plan.a_is_big ? b : a;
    const auto& vb = big.values();
    const auto& vs = small.values();
    std::vector<double> out(big.numel());
    for (Index r = 0; r < plan.repeat; ++r) {
        const Index base = r * plan.inner;
        for (Index i = 0; i < plan.inner; ++i) {
            double x = plan.a_is_big ? vb[base + i] : vs[i];
            double y = plan.a_is_big ? vs[i] : vb[base + i];
            out[base + i] = f(x, y);
        }
    }
    Tensor t = make_node(name, big.shape(), std::move(out), {a, b});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        Node* nb = b.node().get();
        t.node()->backward = [self, na, nb, plan, dfa, dfb]() {
            Node* nbig = plan.a_is_big ? na : nb;
            Node* nsmall = plan.a_is_big ? nb : na;
            const auto& g = self->grad;
            const auto& vbig = nbig->value;
            const auto& vsml = nsmall->value;
            auto* gbig = nbig->requires_grad ? nbig->grad_buf().data() : nullptr;
            auto* gsml = nsmall->requires_grad ? nsmall->grad_buf().data() : nullptr;
            BinFn dbig = plan.a_is_big ? dfa : dfb;
            BinFn dsml = plan.a_is_big ? dfb : dfa;
            for (Index r = 0; r < plan.repeat; ++r) {
                const Index base = r * plan.inner;
                for (Index i = 0; i < plan.inner; ++i) {
                    double x = plan.a_is_big ? vbig[base + i] : vsml[i];
                    double y = plan.a_is_big ? vsml[i] : vbig[base + i];
                    double gi = g[base + i];
                    if (gbig) gbig[base + i] += gi * dbig(x, y);
                    if (gsml) gsml[i] += gi * dsml(x, y);
                }
            }
        };
    }
    return t;
}

using UnFn = double (*)(double);
using UnDFn = double (*)(double, double);  // (x, y) -> dy/dx

inline Tensor unary_op(const char* name, const Tensor& a, UnFn f, UnDFn df) {
    const auto& va = a.values();
    std::vector<double> out(va.size());
    for (Index i = 0; i < va.size(); ++i) out[i] = f(va[i]);
    Tensor t = make_node(name, a.shape(), std::move(out), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        t.node()->backward = [self, na, df]() {
            auto& ga = na->grad_buf();
            for (Index i = 0; i < ga.size(); ++i)
                ga[i] += self->grad[i] * df(na->value[i], self->value[i]);
        };
    }
    return t;
}

inline double stable_softplus(double x) {
    if (x > 35.0) return x;
    if (x < -35.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline double sigmoid_v(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

// ---- elementwise binaries -----------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "add", a, b, +[](double x, double y) { return x + y; },
        +[](double, double) { return 1.0; }, +[](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "sub", a, b, +[](double x, double y) { return x - y; },
        +[](double, double) { return 1.0; }, +[](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "mul", a, b, +[](double x, double y) { return x * y; },
        +[](double, double y) { return y; }, +[](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "div", a, b, +[](double x, double y) { return x / y; },
        +[](double, double y) { return 1.0 / y; },
        +[](double x, double y) { return -x / (y * y); });
}

// out[p, q] = x[p, q] * s[p]; s.shape must be a prefix of x.shape.
inline Tensor mul_leading(const Tensor& x, const Tensor& s) {
    Index lead = s.numel();
    if (x.numel() % std::max<Index>(lead, 1) != 0 ||
        !std::equal(s.shape().begin(), s.shape().end(), x.shape().begin()))
        throw ShapeError("mul_leading: " + shape_str(s.shape()) + " is not a prefix of " +
                         shape_str(x.shape()));
    Index inner = x.numel() / lead;
    const auto& vx = x.values();
    const auto& vs = s.values();
    std::vector<double> out(x.numel());
    for (Index p = 0; p < lead; ++p)
        for (Index i = 0; i < inner; ++i) out[p * inner + i] = vx[p * inner + i] * vs[p];
    Tensor t = detail::make_node("mul_leading", x.shape(), std::move(out), {x, s});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* nx = x.node().get();
        Node* ns = s.node().get();
        t.node()->backward = [self, nx, ns, lead, inner]() {
            const auto& g = self->grad;
            if (nx->requires_grad) {
                auto& gx = nx->grad_buf();
                for (Index p = 0; p < lead; ++p)
                    for (Index i = 0; i < inner; ++i)
                        gx[p * inner + i] += g[p * inner + i] * ns->value[p];
            }
            if (ns->requires_grad) {
                auto& gs = ns->grad_buf();
                for (Index p = 0; p < lead; ++p) {
                    double acc = 0.0;
                    for (Index i = 0; i < inner; ++i)
                        acc += g[p * inner + i] * nx->value[p * inner + i];
                    gs[p] += acc;
                }
            }
        };
    }
    return t;
}

// out[p, q] = x[p, q] + s[p].
inline Tensor add_leading(const Tensor& x, const Tensor& s) {
    Index lead = s.numel();
    if (x.numel() % std::max<Index>(lead, 1) != 0 ||
        !std::equal(s.shape().begin(), s.shape().end(), x.shape().begin()))
        throw ShapeError("add_leading: " + shape_str(s.shape()) + " is not a prefix of " +
                         shape_str(x.shape()));
    Index inner = x.numel() / lead;
    const auto& vx = x.values();
    const auto& vs = s.values();
    std::vector<double> out(x.numel());
    for (Index p = 0; p < lead; ++p)
        for (Index i = 0; i < inner; ++i) out[p * inner + i] = vx[p * inner + i] + vs[p];
    Tensor t = detail::make_node("add_leading", x.shape(), std::move(out), {x, s});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* nx = x.node().get();
        Node* ns = s.node().get();
        t.node()->backward = [self, nx, ns, lead, inner]() {
            const auto& g = self->grad;
            if (nx->requires_grad) detail::add_into(nx->grad_buf(), g);
            if (ns->requires_grad) {
                auto& gs = ns->grad_buf();
                for (Index p = 0; p < lead; ++p) {
                    double acc = 0.0;
                    for (Index i = 0; i < inner; ++i) acc += g[p * inner + i];
                    gs[p] += acc;
                }
            }
        };
    }
    return t;
}

// ---- scalar-constant helpers ---------------------------------------------

inline Tensor scalar_mul(const Tensor& a, double c) {
    const auto& va = a.values();
    std::vector<double> out(va.size());
    for (Index i = 0; i < va.size(); ++i) out[i] = va[i] * c;
    Tensor t = detail::make_node("scalar_mul", a.shape(), std::move(out), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        t.node()->backward = [self, na, c]() {
            auto& ga = na->grad_buf();
            for (Index i = 0; i < ga.size(); ++i) ga[i] += self->grad[i] * c;
        };
    }
    return t;
}

inline Tensor scalar_add(const Tensor& a, double c) {
    const auto& va = a.values();
    std::vector<double> out(va.size());
    for (Index i = 0; i < va.size(); ++i) out[i] = va[i] + c;
    Tensor t = detail::make_node("scalar_add", a.shape(), std::move(out), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        t.node()->backward = [self, na]() { detail::add_into(na->grad_buf(), self->grad); };
    }
    return t;
}

// ---- unaries ---------------------------------------------------------------

inline Tensor neg(const Tensor& a) {
    return detail::unary_op(
        "neg", a, +[](double x) { return -x; }, +[](double, double) { return -1.0; });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        "exp", a, +[](double x) { return std::exp(x); }, +[](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    return detail::unary_op(
        "log", a, +[](double x) { return std::log(x); },
        +[](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt(const Tensor& a) {
    return detail::unary_op(
        "sqrt", a, +[](double x) { return std::sqrt(x); },
        +[](double, double y) { return 0.5 / y; });
}

inline Tensor abs(const Tensor& a) {
    return detail::unary_op(
        "abs", a, +[](double x) { return std::fabs(x); },
        +[](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Tensor tanh(const Tensor& a) {
    return detail::unary_op(
        "tanh", a, +[](double x) { return std::tanh(x); },
        +[](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        "sigmoid", a, +[](double x) { return detail::sigmoid_v(x); },
        +[](double, double y) { return y * (1.0 - y); });
}

inline Tensor silu(const Tensor& a) {
    return detail::unary_op(
        "silu", a, +[](double x) { return x * detail::sigmoid_v(x); },
        +[](double x, double) {
            double s = detail::sigmoid_v(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

inline Tensor gelu(const Tensor& a) {
    return detail::unary_op(
        "gelu", a,
        +[](double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244)); },
        +[](double x, double) {
            double phi = std::exp(-0.5 * x * x) * 0.3989422804014326779;
            double Phi = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
            return Phi + x * phi;
        });
}

inline Tensor softplus(const Tensor& a) {
    return detail::unary_op(
        "softplus", a, +[](double x) { return detail::stable_softplus(x); },
        +[](double x, double) { return detail::sigmoid_v(x); });
}

// max(x, c) with pass-through subgradient where x > c.
inline Tensor clamp_min(const Tensor& a, double c) {
    const auto& va = a.values();
    std::vector<double> out(va.size());
    for (Index i = 0; i < va.size(); ++i) out[i] = std::max(va[i], c);
    Tensor t = detail::make_node("clamp_min", a.shape(), std::move(out), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        t.node()->backward = [self, na, c]() {
            auto& ga = na->grad_buf();
            for (Index i = 0; i < ga.size(); ++i)
                if (na->value[i] > c) ga[i] += self->grad[i];
        };
    }
    return t;
}

// ---- reductions -------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    Tensor t = detail::make_node("sum", Shape{}, {acc}, {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        t.node()->backward = [self, na]() {
            auto& ga = na->grad_buf();
            double g = self->grad[0];
            for (Index i = 0; i < ga.size(); ++i) ga[i] += g;
        };
    }
    return t;
}

inline Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean of empty tensor");
    return scalar_mul(sum(a), 1.0 / static_cast<double>(a.numel()));
}

namespace detail {
inline Tensor reduce_last(const char* name, const Tensor& a, bool take_mean) {
    if (a.rank() < 1) throw ShapeError(std::string(name) + ": needs rank >= 1");
    Index n = a.shape().back();
    Index rows = a.numel() / n;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    const auto& va = a.values();
    std::vector<double> out(rows, 0.0);
    for (Index r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (Index i = 0; i < n; ++i) acc += va[r * n + i];
        out[r] = take_mean ? acc / static_cast<double>(n) : acc;
    }
    Tensor t = make_node(name, std::move(out_shape), std::move(out), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        double scale = take_mean ? 1.0 / static_cast<double>(n) : 1.0;
        t.node()->backward = [self, na, n, rows, scale]() {
            auto& ga = na->grad_buf();
            for (Index r = 0; r < rows; ++r) {
                double g = self->grad[r] * scale;
                for (Index i = 0; i < n; ++i) ga[r * n + i] += g;
            }
        };
    }
    return t;
}

inline Tensor reduce_first(const char* name, const Tensor& a, bool take_mean) {
    if (a.rank() < 1) throw ShapeError(std::string(name) + ": needs rank >= 1");
    Index t0 = a.shape().front();
    Index inner = a.numel() / t0;
    Shape out_shape(a.shape().begin() + 1, a.shape().end());
    const auto& va = a.values();
    std::vector<double> out(inner, 0.0);
    for (Index r = 0; r < t0; ++r)
        for (Index i = 0; i < inner; ++i) out[i] += va[r * inner + i];
    if (take_mean)
        for (auto& v : out) v /= static_cast<double>(t0);
    Tensor t = make_node(name, std::move(out_shape), std::move(out), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        double scale = take_mean ? 1.0 / static_cast<double>(t0) : 1.0;
        t.node()->backward = [self, na, t0, inner, scale]() {
            auto& ga = na->grad_buf();
            for (Index r = 0; r < t0; ++r)
                for (Index i = 0; i < inner; ++i)
                    ga[r * inner + i] += self->grad[i] * scale;
        };
    }
    return t;
}
}  // namespace detail

inline Tensor sum_last(const Tensor& a) { return detail::reduce_last("sum_last", a, false); }
inline Tensor mean_last(const Tensor& a) { return detail::reduce_last("mean_last", a, true); }
inline Tensor sum0(const Tensor& a) { return detail::reduce_first("sum0", a, false); }
inline Tensor mean0(const Tensor& a) { return detail::reduce_first("mean0", a, true); }

// ---- matmul -------------------------------------------------------------------

namespace detail {

inline void gemm_ab(const double* A, const double* B, double* C, Index m, Index k, Index n) {
    for (Index i = 0; i < m; ++i) {
        double* c = C + i * n;
        const double* arow = A + i * k;
        for (Index p = 0; p < k; ++p) {
            double a = arow[p];
            const double* b = B + p * n;
            for (Index j = 0; j < n; ++j) c[j] += a * b[j];
        }
    }
}

// C += A * B^T, A is m*k, B is n*k.
inline void gemm_abt(const double* A, const double* B, double* C, Index m, Index k, Index n) {
    for (Index i = 0; i < m; ++i) {
        const double* arow = A + i * k;
        double* c = C + i * n;
        for (Index j = 0; j < n; ++j) {
            const double* brow = B + j * k;
            double acc = 0.0;
            for (Index p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[j] += acc;
        }
    }
}

// C += A^T * G, A is m*k, G is m*n, C is k*n.
inline void gemm_atb(const double* A, const double* G, double* C, Index m, Index k, Index n) {
    for (Index i = 0; i < m; ++i) {
        const double* arow = A + i * k;
        const double* grow = G + i * n;
        for (Index p = 0; p < k; ++p) {
            double a = arow[p];
            double* c = C + p * n;
            for (Index j = 0; j < n; ++j) c[j] += a * grow[j];
        }
    }
}

}  // namespace detail

// [m,k]x[k,n], [B,m,k]x[k,n] (shared right operand) or [B,m,k]x[B,k,n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2 || a.rank() > 3 || b.rank() > 3 || b.rank() > a.rank())
        throw ShapeError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    Index batch = a.rank() == 3 ? a.dim(0) : 1;
    Index m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    bool shared_b = b.rank() == 2;
    if (!shared_b && b.dim(0) != batch)
        throw ShapeError("matmul: batch mismatch " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    Index kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    if (k != kb)
        throw ShapeError("matmul: inner dim mismatch " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    Shape out_shape = a.rank() == 3 ? Shape{batch, m, n} : Shape{m, n};
    std::vector<double> out(batch * m * n, 0.0);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    for (Index bi = 0; bi < batch; ++bi)
        detail::gemm_ab(pa + bi * m * k, shared_b ? pb : pb + bi * k * n,
                        out.data() + bi * m * n, m, k, n);
    Tensor t = detail::make_node("matmul", std::move(out_shape), std::move(out), {a, b});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        Node* nb = b.node().get();
        t.node()->backward = [self, na, nb, batch, m, k, n, shared_b]() {
            const double* g = self->grad.data();
            if (na->requires_grad) {
                double* ga = na->grad_buf().data();
                const double* vb = nb->value.data();
                for (Index bi = 0; bi < batch; ++bi)
                    detail::gemm_abt(g + bi * m * n, shared_b ? vb : vb + bi * k * n,
                                     ga + bi * m * k, m, n, k);
            }
            if (nb->requires_grad) {
                double* gb = nb->grad_buf().data();
                const double* va = na->value.data();
                for (Index bi = 0; bi < batch; ++bi)
                    detail::gemm_atb(va + bi * m * k, g + bi * m * n,
                                     shared_b ? gb : gb + bi * k * n, m, k, n);
            }
        };
    }
    return t;
}

// ---- shape ops ---------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    Tensor t = detail::make_node("reshape", std::move(shape), a.values(), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        t.node()->backward = [self, na]() { detail::add_into(na->grad_buf(), self->grad); };
    }
    return t;
}

inline Tensor permute(const Tensor& a, const std::vector<Index>& perm) {
    Index r = a.rank();
    if (perm.size() != r) throw ShapeError("permute: axis list rank mismatch");
    std::vector<bool> seen(r, false);
    Shape out_shape(r);
    for (Index i = 0; i < r; ++i) {
        if (perm[i] >= r || seen[perm[i]]) throw ShapeError("permute: invalid axis list");
        seen[perm[i]] = true;
        out_shape[i] = a.dim(perm[i]);
    }
    std::vector<Index> in_strides(r, 1), out_strides(r, 1);
    for (Index i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * a.dim(i);
    for (Index i = r; i-- > 1;) out_strides[i - 1] = out_strides[i] * out_shape[i];
    // For each output axis, the stride to advance in the input.
    std::vector<Index> step(r);
    for (Index i = 0; i < r; ++i) step[i] = in_strides[perm[i]];
    const auto& va = a.values();
    std::vector<double> out(a.numel());
    std::vector<Index> src_of(a.numel());
    std::vector<Index> idx(r, 0);
    Index src = 0;
    for (Index o = 0; o < out.size(); ++o) {
        out[o] = va[src];
        src_of[o] = src;
        for (Index ax = r; ax-- > 0;) {
            idx[ax]++;
            src += step[ax];
            if (idx[ax] < out_shape[ax]) break;
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor t = detail::make_node("permute", std::move(out_shape), std::move(out), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        auto map = std::make_shared<std::vector<Index>>(std::move(src_of));
        t.node()->backward = [self, na, map]() {
            auto& ga = na->grad_buf();
            for (Index o = 0; o < self->grad.size(); ++o) ga[(*map)[o]] += self->grad[o];
        };
    }
    return t;
}

inline Tensor transpose2(const Tensor& a) {
    Index r = a.rank();
    if (r < 2) throw ShapeError("transpose2: needs rank >= 2");
    std::vector<Index> perm(r);
    for (Index i = 0; i < r; ++i) perm[i] = i;
    std::swap(perm[r - 1], perm[r - 2]);
    return permute(a, perm);
}

inline Tensor concat(const std::vector<Tensor>& parts, Index axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    Index r = parts[0].rank();
    if (axis >= r) throw ShapeError("concat: axis out of range");
    Index through = 0;
    for (const auto& p : parts) {
        if (p.rank() != r) throw ShapeError("concat: rank mismatch");
        for (Index i = 0; i < r; ++i)
            if (i != axis && p.dim(i) != parts[0].dim(i))
                throw ShapeError("concat: shape mismatch off the concat axis");
        through += p.dim(axis);
    }
    Shape out_shape = parts[0].shape();
    out_shape[axis] = through;
    Index outer = 1, inner = 1;
    for (Index i = 0; i < axis; ++i) outer *= out_shape[i];
    for (Index i = axis + 1; i < r; ++i) inner *= out_shape[i];
    std::vector<double> out(shape_numel(out_shape));
    Index offset = 0;
    for (const auto& p : parts) {
        Index pa = p.dim(axis);
        const auto& vp = p.values();
        for (Index o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * through + offset) * inner,
                        vp.data() + o * pa * inner, pa * inner * sizeof(double));
        offset += pa;
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(out_shape);
    node->value = std::move(out);
    node->op = "concat";
    detail::check_finite("concat", node->value);
    bool rg = false;
    if (detail::grad_mode())
        for (const auto& p : parts) rg = rg || p.requires_grad();
    if (rg) {
        node->requires_grad = true;
        for (const auto& p : parts) node->parents.push_back(p.node());
        Node* self = node.get();
        std::vector<Index> axdims;
        for (const auto& p : parts) axdims.push_back(p.dim(axis));
        node->backward = [self, axdims, outer, inner, through]() {
            Index offset = 0;
            for (std::size_t pi = 0; pi < self->parents.size(); ++pi) {
                Node* p = self->parents[pi].get();
                Index pa = axdims[pi];
                if (p->requires_grad) {
                    auto& gp = p->grad_buf();
                    for (Index o = 0; o < outer; ++o) {
                        const double* src = self->grad.data() + (o * through + offset) * inner;
                        double* dst = gp.data() + o * pa * inner;
                        for (Index i = 0; i < pa * inner; ++i) dst[i] += src[i];
                    }
                }
                offset += pa;
            }
        };
    }
    return Tensor(std::move(node));
}

inline Tensor slice(const Tensor& a, Index axis, Index start, Index len) {
    Index r = a.rank();
    if (axis >= r) throw ShapeError("slice: axis out of range");
    if (start + len > a.dim(axis)) throw ShapeError("slice: range out of bounds");
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    Index outer = 1, inner = 1;
    for (Index i = 0; i < axis; ++i) outer *= a.dim(i);
    for (Index i = axis + 1; i < r; ++i) inner *= a.dim(i);
    Index through = a.dim(axis);
    const auto& va = a.values();
    std::vector<double> out(outer * len * inner);
    for (Index o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner, va.data() + (o * through + start) * inner,
                    len * inner * sizeof(double));
    Tensor t = detail::make_node("slice", std::move(out_shape), std::move(out), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        t.node()->backward = [self, na, outer, inner, through, start, len]() {
            auto& ga = na->grad_buf();
            for (Index o = 0; o < outer; ++o) {
                const double* src = self->grad.data() + o * len * inner;
                double* dst = ga.data() + (o * through + start) * inner;
                for (Index i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        };
    }
    return t;
}

// Gathers rows along dim 0; duplicates allowed (backward scatter-adds).
inline Tensor index_rows(const Tensor& a, std::vector<Index> idx) {
    if (a.rank() < 1) throw ShapeError("index_rows: needs rank >= 1");
    Index rows = a.dim(0);
    Index inner = a.numel() / std::max<Index>(rows, 1);
    for (Index i : idx)
        if (i >= rows) throw ShapeError("index_rows: index out of range");
    Shape out_shape = a.shape();
    out_shape[0] = idx.size();
    const auto& va = a.values();
    std::vector<double> out(idx.size() * inner);
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::memcpy(out.data() + r * inner, va.data() + idx[r] * inner, inner * sizeof(double));
    Tensor t = detail::make_node("index_rows", std::move(out_shape), std::move(out), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        auto map = std::make_shared<std::vector<Index>>(std::move(idx));
        t.node()->backward = [self, na, map, inner]() {
            auto& ga = na->grad_buf();
            for (std::size_t r = 0; r < map->size(); ++r) {
                const double* src = self->grad.data() + r * inner;
                double* dst = ga.data() + (*map)[r] * inner;
                for (Index i = 0; i < inner; ++i) dst[i] += src[i];
            }
        };
    }
    return t;
}

// Scatter-add of value rows into a fresh [rows, ...] tensor (dim 0 = rows).
inline Tensor scatter_rows(const Tensor& v, const std::vector<Index>& idx, Index rows) {
    if (v.rank() < 1 || v.dim(0) != idx.size())
        throw ShapeError("scatter_rows: index count must match dim 0");
    Index inner = v.numel() / std::max<Index>(v.dim(0), 1);
    for (Index i : idx)
        if (i >= rows) throw ShapeError("scatter_rows: index out of range");
    Shape out_shape = v.shape();
    out_shape[0] = rows;
    const auto& vv = v.values();
    std::vector<double> out(rows * inner, 0.0);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const double* src = vv.data() + r * inner;
        double* dst = out.data() + idx[r] * inner;
        for (Index i = 0; i < inner; ++i) dst[i] += src[i];
    }
    Tensor t = detail::make_node("scatter_rows", std::move(out_shape), std::move(out), {v});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* nv = v.node().get();
        auto map = std::make_shared<std::vector<Index>>(idx);
        t.node()->backward = [self, nv, map, inner]() {
            auto& gv = nv->grad_buf();
            for (std::size_t r = 0; r < map->size(); ++r) {
                const double* src = self->grad.data() + (*map)[r] * inner;
                double* dst = gv.data() + r * inner;
                for (Index i = 0; i < inner; ++i) dst[i] += src[i];
            }
        };
    }
    return t;
}

}  // namespace somnus
