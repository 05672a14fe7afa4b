#pragma once
// Fused network ops: stable softmax/logsumexp, norms, rotary embedding,
// 1-d convolutions and the diagonal-state linear scan used by the sequence
// encoder. Backward passes are hand-derived and covered by gradient checks.

#include "somnus/ops.hpp"

namespace somnus {

inline Tensor softmax_last(const Tensor& a) {
    if (a.rank() < 1) throw ShapeError("softmax_last: needs rank >= 1");
    Index n = a.shape().back();
    Index rows = a.numel() / n;
    const auto& va = a.values();
    std::vector<double> out(va.size());
    for (Index r = 0; r < rows; ++r) {
        const double* x = va.data() + r * n;
        double* y = out.data() + r * n;
        double m = x[0];
        for (Index i = 1; i < n; ++i) m = std::max(m, x[i]);
        double z = 0.0;
        for (Index i = 0; i < n; ++i) {
            y[i] = std::exp(x[i] - m);
            z += y[i];
        }
        for (Index i = 0; i < n; ++i) y[i] /= z;
    }
    Tensor t = detail::make_node("softmax_last", a.shape(), std::move(out), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        t.node()->backward = [self, na, rows, n]() {
            auto& ga = na->grad_buf();
            for (Index r = 0; r < rows; ++r) {
                const double* s = self->value.data() + r * n;
                const double* g = self->grad.data() + r * n;
                double dot = 0.0;
                for (Index i = 0; i < n; ++i) dot += g[i] * s[i];
                double* gx = ga.data() + r * n;
                for (Index i = 0; i < n; ++i) gx[i] += s[i] * (g[i] - dot);
            }
        };
    }
    return t;
}

inline Tensor logsumexp_last(const Tensor& a) {
    if (a.rank() < 1) throw ShapeError("logsumexp_last: needs rank >= 1");
    Index n = a.shape().back();
    Index rows = a.numel() / n;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    const auto& va = a.values();
    std::vector<double> out(rows);
    for (Index r = 0; r < rows; ++r) {
        const double* x = va.data() + r * n;
        double m = x[0];
        for (Index i = 1; i < n; ++i) m = std::max(m, x[i]);
        double z = 0.0;
        for (Index i = 0; i < n; ++i) z += std::exp(x[i] - m);
        out[r] = m + std::log(z);
    }
    Tensor t = detail::make_node("logsumexp_last", std::move(out_shape), std::move(out), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        t.node()->backward = [self, na, rows, n]() {
            auto& ga = na->grad_buf();
            for (Index r = 0; r < rows; ++r) {
                double lse = self->value[r];
                double g = self->grad[r];
                const double* x = na->value.data() + r * n;
                double* gx = ga.data() + r * n;
                for (Index i = 0; i < n; ++i) gx[i] += g * std::exp(x[i] - lse);
            }
        };
    }
    return t;
}

// x / sqrt(mean(x^2) + eps) over the last axis (scale applied by the caller).
inline Tensor rmsnorm_last(const Tensor& a, double eps = 1e-8) {
    if (a.rank() < 1) throw ShapeError("rmsnorm_last: needs rank >= 1");
    Index n = a.shape().back();
    Index rows = a.numel() / n;
    const auto& va = a.values();
    std::vector<double> out(va.size());
    std::vector<double> rinv(rows);
    for (Index r = 0; r < rows; ++r) {
        const double* x = va.data() + r * n;
        double ms = 0.0;
        for (Index i = 0; i < n; ++i) ms += x[i] * x[i];
        ms /= static_cast<double>(n);
        double ri = 1.0 / std::sqrt(ms + eps);
        rinv[r] = ri;
        for (Index i = 0; i < n; ++i) out[r * n + i] = x[i] * ri;
    }
    Tensor t = detail::make_node("rmsnorm_last", a.shape(), std::move(out), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        auto ri = std::make_shared<std::vector<double>>(std::move(rinv));
        t.node()->backward = [self, na, ri, rows, n]() {
            auto& ga = na->grad_buf();
            for (Index r = 0; r < rows; ++r) {
                const double* x = na->value.data() + r * n;
                const double* g = self->grad.data() + r * n;
                double r1 = (*ri)[r];
                double dot = 0.0;
                for (Index i = 0; i < n; ++i) dot += g[i] * x[i];
                double c = r1 * r1 * r1 * dot / static_cast<double>(n);
                double* gx = ga.data() + r * n;
                for (Index i = 0; i < n; ++i) gx[i] += g[i] * r1 - x[i] * c;
            }
        };
    }
    return t;
}

// Row-wise x / ||x||_2 over the last axis. Rows must be nonzero.
inline Tensor l2normalize_last(const Tensor& a) {
    if (a.rank() < 1) throw ShapeError("l2normalize_last: needs rank >= 1");
    Index n = a.shape().back();
    Index rows = a.numel() / n;
    const auto& va = a.values();
    std::vector<double> out(va.size());
    std::vector<double> linv(rows);
    for (Index r = 0; r < rows; ++r) {
        const double* x = va.data() + r * n;
        double ss = 0.0;
        for (Index i = 0; i < n; ++i) ss += x[i] * x[i];
        if (ss == 0.0) throw NumericError("l2normalize_last: zero row at index " +
                                          std::to_string(r));
        double li = 1.0 / std::sqrt(ss);
        linv[r] = li;
        for (Index i = 0; i < n; ++i) out[r * n + i] = x[i] * li;
    }
    Tensor t = detail::make_node("l2normalize_last", a.shape(), std::move(out), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        auto li = std::make_shared<std::vector<double>>(std::move(linv));
        t.node()->backward = [self, na, li, rows, n]() {
            auto& ga = na->grad_buf();
            for (Index r = 0; r < rows; ++r) {
                const double* x = na->value.data() + r * n;
                const double* g = self->grad.data() + r * n;
                double l1 = (*li)[r];
                double dot = 0.0;
                for (Index i = 0; i < n; ++i) dot += g[i] * x[i];
                double c = l1 * l1 * l1 * dot;
                double* gx = ga.data() + r * n;
                for (Index i = 0; i < n; ++i) gx[i] += g[i] * l1 - x[i] * c;
            }
        };
    }
    return t;
}

// Rotary position encoding over the last axis (must be even). Accepts
// [T, D] or [T, H, D]; positions[t] rotates every head at step t.
inline Tensor rope(const Tensor& a, const std::vector<Index>& positions, double base = 10000.0) {
    if (a.rank() != 2 && a.rank() != 3) throw ShapeError("rope: expects rank 2 or 3");
    Index d = a.shape().back();
    if (d % 2 != 0) throw ShapeError("rope: head dim must be even");
    Index tsteps = a.dim(0);
    if (positions.size() != tsteps) throw ShapeError("rope: positions size mismatch");
    Index heads = a.numel() / (tsteps * d);
    Index half = d / 2;
    std::vector<double> freqs(half);
    for (Index j = 0; j < half; ++j)
        freqs[j] = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d));
    const auto& va = a.values();
    std::vector<double> out(va.size());
    auto cs = std::make_shared<std::vector<double>>(tsteps * half * 2);
    for (Index t = 0; t < tsteps; ++t) {
        for (Index j = 0; j < half; ++j) {
            double ang = static_cast<double>(positions[t]) * freqs[j];
            (*cs)[(t * half + j) * 2] = std::cos(ang);
            (*cs)[(t * half + j) * 2 + 1] = std::sin(ang);
        }
        for (Index h = 0; h < heads; ++h) {
            const double* x = va.data() + (t * heads + h) * d;
            double* y = out.data() + (t * heads + h) * d;
            for (Index j = 0; j < half; ++j) {
                double c = (*cs)[(t * half + j) * 2];
                double s = (*cs)[(t * half + j) * 2 + 1];
                y[2 * j] = x[2 * j] * c - x[2 * j + 1] * s;
                y[2 * j + 1] = x[2 * j] * s + x[2 * j + 1] * c;
            }
        }
    }
    Tensor t = detail::make_node("rope", a.shape(), std::move(out), {a});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        t.node()->backward = [self, na, cs, tsteps, heads, half]() {
            auto& ga = na->grad_buf();
            Index d = half * 2;
            for (Index ti = 0; ti < tsteps; ++ti)
                for (Index h = 0; h < heads; ++h) {
                    const double* g = self->grad.data() + (ti * heads + h) * d;
                    double* gx = ga.data() + (ti * heads + h) * d;
                    for (Index j = 0; j < half; ++j) {
                        double c = (*cs)[(ti * half + j) * 2];
                        double s = (*cs)[(ti * half + j) * 2 + 1];
                        gx[2 * j] += g[2 * j] * c + g[2 * j + 1] * s;
                        gx[2 * j + 1] += -g[2 * j] * s + g[2 * j + 1] * c;
                    }
                }
        };
    }
    return t;
}

// Valid (unpadded) grouped 1-d convolution. x: [Cin, T], w: [Cout, Cin/g, K],
// bias: [Cout]. Output [Cout, (T-K)/stride + 1].
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias,
                     Index stride, Index groups = 1) {
    if (x.rank() != 2 || w.rank() != 3) throw ShapeError("conv1d: x must be [C,T], w [Co,Ci/g,K]");
    Index cin = x.dim(0), tlen = x.dim(1);
    Index cout = w.dim(0), cig = w.dim(1), k = w.dim(2);
    if (groups == 0 || cin % groups != 0 || cout % groups != 0 || cig != cin / groups)
        throw ShapeError("conv1d: group arithmetic mismatch");
    if (bias.numel() != cout) throw ShapeError("conv1d: bias size mismatch");
    if (tlen < k) throw ShapeError("conv1d: input shorter than kernel");
    Index to = (tlen - k) / stride + 1;
    Index cog = cout / groups;
    const auto& vx = x.values();
    const auto& vw = w.values();
    const auto& vb = bias.values();
    std::vector<double> out(cout * to);
    for (Index co = 0; co < cout; ++co) {
        Index g = co / cog;
        for (Index t = 0; t < to; ++t) {
            double acc = vb[co];
            for (Index ci = 0; ci < cig; ++ci) {
                const double* xr = vx.data() + (g * cig + ci) * tlen + t * stride;
                const double* wr = vw.data() + (co * cig + ci) * k;
                for (Index kk = 0; kk < k; ++kk) acc += xr[kk] * wr[kk];
            }
            out[co * to + t] = acc;
        }
    }
    Tensor t = detail::make_node("conv1d", Shape{cout, to}, std::move(out), {x, w, bias});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* nx = x.node().get();
        Node* nw = w.node().get();
        Node* nb = bias.node().get();
        t.node()->backward = [self, nx, nw, nb, cin, tlen, cout, cig, cog, k, stride, to]() {
            const auto& g = self->grad;
            if (nb->requires_grad) {
                auto& gb = nb->grad_buf();
                for (Index co = 0; co < cout; ++co) {
                    double acc = 0.0;
                    for (Index t = 0; t < to; ++t) acc += g[co * to + t];
                    gb[co] += acc;
                }
            }
            if (nx->requires_grad) {
                auto& gx = nx->grad_buf();
                for (Index co = 0; co < cout; ++co) {
                    Index grp = co / cog;
                    for (Index t = 0; t < to; ++t) {
                        double gi = g[co * to + t];
                        for (Index ci = 0; ci < cig; ++ci) {
                            double* xr = gx.data() + (grp * cig + ci) * tlen + t * stride;
                            const double* wr = nw->value.data() + (co * cig + ci) * k;
                            for (Index kk = 0; kk < k; ++kk) xr[kk] += gi * wr[kk];
                        }
                    }
                }
            }
            if (nw->requires_grad) {
                auto& gw = nw->grad_buf();
                for (Index co = 0; co < cout; ++co) {
                    Index grp = co / cog;
                    for (Index t = 0; t < to; ++t) {
                        double gi = g[co * to + t];
                        for (Index ci = 0; ci < cig; ++ci) {
                            const double* xr =
                                nx->value.data() + (grp * cig + ci) * tlen + t * stride;
                            double* wr = gw.data() + (co * cig + ci) * k;
                            for (Index kk = 0; kk < k; ++kk) wr[kk] += gi * xr[kk];
                        }
                    }
                }
            }
            (void)cin;
        };
    }
    return t;
}

// Transposed 1-d convolution. x: [Cin, T], w: [Cin, Cout, K], bias: [Cout].
// Output [Cout, (T-1)*stride + K].
inline Tensor conv1d_transpose(const Tensor& x, const Tensor& w, const Tensor& bias,
                               Index stride) {
    if (x.rank() != 2 || w.rank() != 3)
        throw ShapeError("conv1d_transpose: x must be [C,T], w [Ci,Co,K]");
    Index cin = x.dim(0), tlen = x.dim(1);
    if (w.dim(0) != cin) throw ShapeError("conv1d_transpose: channel mismatch");
    Index cout = w.dim(1), k = w.dim(2);
    if (bias.numel() != cout) throw ShapeError("conv1d_transpose: bias size mismatch");
    if (tlen == 0) throw ShapeError("conv1d_transpose: empty input");
    Index to = (tlen - 1) * stride + k;
    const auto& vx = x.values();
    const auto& vw = w.values();
    const auto& vb = bias.values();
    std::vector<double> out(cout * to, 0.0);
    for (Index co = 0; co < cout; ++co)
        for (Index t = 0; t < to; ++t) out[co * to + t] = vb[co];
    for (Index ci = 0; ci < cin; ++ci)
        for (Index t = 0; t < tlen; ++t) {
            double xv = vx[ci * tlen + t];
            for (Index co = 0; co < cout; ++co) {
                const double* wr = vw.data() + (ci * cout + co) * k;
                double* orow = out.data() + co * to + t * stride;
                for (Index kk = 0; kk < k; ++kk) orow[kk] += xv * wr[kk];
            }
        }
    Tensor t = detail::make_node("conv1d_transpose", Shape{cout, to}, std::move(out),
                                 {x, w, bias});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* nx = x.node().get();
        Node* nw = w.node().get();
        Node* nb = bias.node().get();
        t.node()->backward = [self, nx, nw, nb, cin, tlen, cout, k, stride, to]() {
            const auto& g = self->grad;
            if (nb->requires_grad) {
                auto& gb = nb->grad_buf();
                for (Index co = 0; co < cout; ++co) {
                    double acc = 0.0;
                    for (Index t = 0; t < to; ++t) acc += g[co * to + t];
                    gb[co] += acc;
                }
            }
            if (nx->requires_grad) {
                auto& gx = nx->grad_buf();
                for (Index ci = 0; ci < cin; ++ci)
                    for (Index t = 0; t < tlen; ++t) {
                        double acc = 0.0;
                        for (Index co = 0; co < cout; ++co) {
                            const double* wr = nw->value.data() + (ci * cout + co) * k;
                            const double* gr = g.data() + co * to + t * stride;
                            for (Index kk = 0; kk < k; ++kk) acc += gr[kk] * wr[kk];
                        }
                        gx[ci * tlen + t] += acc;
                    }
            }
            if (nw->requires_grad) {
                auto& gw = nw->grad_buf();
                for (Index ci = 0; ci < cin; ++ci)
                    for (Index t = 0; t < tlen; ++t) {
                        double xv = nx->value[ci * tlen + t];
                        for (Index co = 0; co < cout; ++co) {
                            double* wr = gw.data() + (ci * cout + co) * k;
                            const double* gr = g.data() + co * to + t * stride;
                            for (Index kk = 0; kk < k; ++kk) wr[kk] += xv * gr[kk];
                        }
                    }
            }
        };
    }
    return t;
}

// First-order linear recurrence along dim 0 with elementwise coefficients:
// h[0] = u[0]; h[t] = a[t] * h[t-1] + u[t].
inline Tensor linear_scan(const Tensor& a, const Tensor& u) {
    if (a.shape() != u.shape()) throw ShapeError("linear_scan: shape mismatch");
    if (a.rank() < 1) throw ShapeError("linear_scan: needs rank >= 1");
    Index steps = a.dim(0);
    Index inner = a.numel() / std::max<Index>(steps, 1);
    const auto& va = a.values();
    const auto& vu = u.values();
    std::vector<double> out(a.numel());
    for (Index i = 0; i < inner; ++i) out[i] = vu[i];
    for (Index t = 1; t < steps; ++t) {
        const double* at = va.data() + t * inner;
        const double* ut = vu.data() + t * inner;
        const double* hp = out.data() + (t - 1) * inner;
        double* ht = out.data() + t * inner;
        for (Index i = 0; i < inner; ++i) ht[i] = at[i] * hp[i] + ut[i];
    }
    Tensor t = detail::make_node("linear_scan", a.shape(), std::move(out), {a, u});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* na = a.node().get();
        Node* nu = u.node().get();
        t.node()->backward = [self, na, nu, steps, inner]() {
            // lambda[t] = g[t] + a[t+1] * lambda[t+1]; du = lambda; da[t] = lambda[t]*h[t-1].
            std::vector<double> lam(self->grad.end() - inner, self->grad.end());
            auto* ga = na->requires_grad ? na->grad_buf().data() : nullptr;
            auto* gu = nu->requires_grad ? nu->grad_buf().data() : nullptr;
            for (Index t = steps; t-- > 0;) {
                if (gu) {
                    double* gur = gu + t * inner;
                    for (Index i = 0; i < inner; ++i) gur[i] += lam[i];
                }
                if (ga && t > 0) {
                    const double* hp = self->value.data() + (t - 1) * inner;
                    double* gar = ga + t * inner;
                    for (Index i = 0; i < inner; ++i) gar[i] += lam[i] * hp[i];
                }
                if (t > 0) {
                    const double* at = na->value.data() + t * inner;
                    const double* gp = self->grad.data() + (t - 1) * inner;
                    for (Index i = 0; i < inner; ++i) lam[i] = gp[i] + at[i] * lam[i];
                }
            }
        };
    }
    return t;
}

// out[p,q,r] = x[p,q] * y[q,r].
inline Tensor outer_mul(const Tensor& x, const Tensor& y) {
    if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0))
        throw ShapeError("outer_mul: expects [P,Q] x [Q,R]");
    Index P = x.dim(0), Q = x.dim(1), R = y.dim(1);
    const auto& vx = x.values();
    const auto& vy = y.values();
    std::vector<double> out(P * Q * R);
    for (Index p = 0; p < P; ++p)
        for (Index q = 0; q < Q; ++q) {
            double xv = vx[p * Q + q];
            const double* yr = vy.data() + q * R;
            double* o = out.data() + (p * Q + q) * R;
            for (Index r = 0; r < R; ++r) o[r] = xv * yr[r];
        }
    Tensor t = detail::make_node("outer_mul", Shape{P, Q, R}, std::move(out), {x, y});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* nx = x.node().get();
        Node* ny = y.node().get();
        t.node()->backward = [self, nx, ny, P, Q, R]() {
            const auto& g = self->grad;
            if (nx->requires_grad) {
                auto& gx = nx->grad_buf();
                for (Index p = 0; p < P; ++p)
                    for (Index q = 0; q < Q; ++q) {
                        const double* gr = g.data() + (p * Q + q) * R;
                        const double* yr = ny->value.data() + q * R;
                        double acc = 0.0;
                        for (Index r = 0; r < R; ++r) acc += gr[r] * yr[r];
                        gx[p * Q + q] += acc;
                    }
            }
            if (ny->requires_grad) {
                auto& gy = ny->grad_buf();
                for (Index p = 0; p < P; ++p)
                    for (Index q = 0; q < Q; ++q) {
                        const double* gr = g.data() + (p * Q + q) * R;
                        double xv = nx->value[p * Q + q];
                        double* yr = gy.data() + q * R;
                        for (Index r = 0; r < R; ++r) yr[r] += xv * gr[r];
                    }
            }
        };
    }
    return t;
}

// out[p,q,r] = x[p,q] * y[p,r].
inline Tensor cross_mul(const Tensor& x, const Tensor& y) {
    if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0))
        throw ShapeError("cross_mul: expects [P,Q] x [P,R]");
    Index P = x.dim(0), Q = x.dim(1), R = y.dim(1);
    const auto& vx = x.values();
    const auto& vy = y.values();
    std::vector<double> out(P * Q * R);
    for (Index p = 0; p < P; ++p)
        for (Index q = 0; q < Q; ++q) {
            double xv = vx[p * Q + q];
            const double* yr = vy.data() + p * R;
            double* o = out.data() + (p * Q + q) * R;
            for (Index r = 0; r < R; ++r) o[r] = xv * yr[r];
        }
    Tensor t = detail::make_node("cross_mul", Shape{P, Q, R}, std::move(out), {x, y});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* nx = x.node().get();
        Node* ny = y.node().get();
        t.node()->backward = [self, nx, ny, P, Q, R]() {
            const auto& g = self->grad;
            if (nx->requires_grad) {
                auto& gx = nx->grad_buf();
                for (Index p = 0; p < P; ++p)
                    for (Index q = 0; q < Q; ++q) {
                        const double* gr = g.data() + (p * Q + q) * R;
                        const double* yr = ny->value.data() + p * R;
                        double acc = 0.0;
                        for (Index r = 0; r < R; ++r) acc += gr[r] * yr[r];
                        gx[p * Q + q] += acc;
                    }
            }
            if (ny->requires_grad) {
                auto& gy = ny->grad_buf();
                for (Index p = 0; p < P; ++p) {
                    double* yr = gy.data() + p * R;
                    for (Index q = 0; q < Q; ++q) {
                        const double* gr = g.data() + (p * Q + q) * R;
                        double xv = nx->value[p * Q + q];
                        for (Index r = 0; r < R; ++r) yr[r] += xv * gr[r];
                    }
                }
            }
        };
    }
    return t;
}

// out[p,q] = sum_r h[p,q,r] * y[p,r].
inline Tensor cross_contract(const Tensor& h, const Tensor& y) {
    if (h.rank() != 3 || y.rank() != 2 || h.dim(0) != y.dim(0) || h.dim(2) != y.dim(1))
        throw ShapeError("cross_contract: expects [P,Q,R] x [P,R]");
    Index P = h.dim(0), Q = h.dim(1), R = h.dim(2);
    const auto& vh = h.values();
    const auto& vy = y.values();
    std::vector<double> out(P * Q);
    for (Index p = 0; p < P; ++p) {
        const double* yr = vy.data() + p * R;
        for (Index q = 0; q < Q; ++q) {
            const double* hr = vh.data() + (p * Q + q) * R;
            double acc = 0.0;
            for (Index r = 0; r < R; ++r) acc += hr[r] * yr[r];
            out[p * Q + q] = acc;
        }
    }
    Tensor t = detail::make_node("cross_contract", Shape{P, Q}, std::move(out), {h, y});
    if (t.requires_grad()) {
        Node* self = t.node().get();
        Node* nh = h.node().get();
        Node* ny = y.node().get();
        t.node()->backward = [self, nh, ny, P, Q, R]() {
            const auto& g = self->grad;
            if (nh->requires_grad) {
                auto& gh = nh->grad_buf();
                for (Index p = 0; p < P; ++p) {
                    const double* yr = ny->value.data() + p * R;
                    for (Index q = 0; q < Q; ++q) {
                        double gv = g[p * Q + q];
                        double* hr = gh.data() + (p * Q + q) * R;
                        for (Index r = 0; r < R; ++r) hr[r] += gv * yr[r];
                    }
                }
            }
            if (ny->requires_grad) {
                auto& gy = ny->grad_buf();
                for (Index p = 0; p < P; ++p) {
                    double* yr = gy.data() + p * R;
                    for (Index q = 0; q < Q; ++q) {
                        double gv = g[p * Q + q];
                        const double* hr = nh->value.data() + (p * Q + q) * R;
                        for (Index r = 0; r < R; ++r) yr[r] += gv * hr[r];
                    }
                }
            }
        };
    }
    return t;
}

}  // namespace somnus
