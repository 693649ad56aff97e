#include "introspect/lm/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace introspect::lm::ops {
namespace {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
Eigen::Map<const RowMat<Real>> view(const Matrix<Real>& m) {
    return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

template <typename Real>
Eigen::Map<RowMat<Real>> view(Matrix<Real>& m) {
    return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

void require(bool ok, const char* op, const std::string& what) {
    if (!ok) throw std::invalid_argument(std::string(op) + ": " + what);
}

}  // namespace

template <typename Real>
Var matmul_nt(Graph<Real>& g, Var x, Var w) {
    const Matrix<Real>& xv = g.value(x);
    const Matrix<Real>& wv = g.value(w);
    require(xv.cols() == wv.cols(), "matmul_nt", "inner dimensions differ");
    Matrix<Real> out(xv.rows(), wv.rows());
    view(out).noalias() = view(xv) * view(wv).transpose();
    return g.emplace(std::move(out), {x, w}, [x, w](Graph<Real>& g, Var self) {
        const Matrix<Real>& dout = g.grad(self);
        if (g.requires_grad(x)) view(g.grad(x)).noalias() += view(dout) * view(g.value(w));
        if (g.requires_grad(w)) view(g.grad(w)).noalias() += view(dout).transpose() * view(g.value(x));
    });
}

template <typename Real>
Var add_bias(Graph<Real>& g, Var x, Var bias) {
    const Matrix<Real>& xv = g.value(x);
    const Matrix<Real>& bv = g.value(bias);
    require(bv.rows() == 1 && bv.cols() == xv.cols(), "add_bias", "bias must be 1 x cols");
    Matrix<Real> out = xv;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        Real* o = out.row(r).data();
        for (std::size_t c = 0; c < out.cols(); ++c) o[c] += bv.data()[c];
    }
    return g.emplace(std::move(out), {x, bias}, [x, bias](Graph<Real>& g, Var self) {
        const Matrix<Real>& dout = g.grad(self);
        if (g.requires_grad(x)) view(g.grad(x)) += view(dout);
        if (g.requires_grad(bias)) view(g.grad(bias)) += view(dout).colwise().sum();
    });
}

template <typename Real>
Var add(Graph<Real>& g, Var a, Var b) {
    const Matrix<Real>& av = g.value(a);
    const Matrix<Real>& bv = g.value(b);
    require(av.same_shape(bv), "add", "shape mismatch");
    Matrix<Real> out(av.rows(), av.cols());
    view(out) = view(av) + view(bv);
    return g.emplace(std::move(out), {a, b}, [a, b](Graph<Real>& g, Var self) {
        const Matrix<Real>& dout = g.grad(self);
        if (g.requires_grad(a)) view(g.grad(a)) += view(dout);
        if (g.requires_grad(b)) view(g.grad(b)) += view(dout);
    });
}

template <typename Real>
Var scale(Graph<Real>& g, Var a, Real s) {
    const Matrix<Real>& av = g.value(a);
    Matrix<Real> out(av.rows(), av.cols());
    view(out) = view(av) * s;
    return g.emplace(std::move(out), {a}, [a, s](Graph<Real>& g, Var self) {
        if (g.requires_grad(a)) view(g.grad(a)) += view(g.grad(self)) * s;
    });
}

template <typename Real>
Var gather_rows(Graph<Real>& g, Var table, std::span<const int> indices) {
    const Matrix<Real>& tv = g.value(table);
    Matrix<Real> out(indices.size(), tv.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const int idx = indices[i];
        require(idx >= 0 && static_cast<std::size_t>(idx) < tv.rows(), "gather_rows",
                "index " + std::to_string(idx) + " out of range");
        std::copy_n(tv.row(idx).data(), tv.cols(), out.row(i).data());
    }
    std::vector<int> idx(indices.begin(), indices.end());
    return g.emplace(std::move(out), {table}, [table, idx = std::move(idx)](Graph<Real>& g, Var self) {
        if (!g.requires_grad(table)) return;
        const Matrix<Real>& dout = g.grad(self);
        Matrix<Real>& dt = g.grad(table);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const Real* s = dout.row(i).data();
            Real* d = dt.row(idx[i]).data();
            for (std::size_t c = 0; c < dt.cols(); ++c) d[c] += s[c];
        }
    });
}

template <typename Real>
Var replace_rows(Graph<Real>& g, Var base, std::span<const std::size_t> rows, Var src) {
    const Matrix<Real>& bv = g.value(base);
    const Matrix<Real>& sv = g.value(src);
    require(sv.rows() == rows.size() && sv.cols() == bv.cols(), "replace_rows", "source shape mismatch");
    Matrix<Real> out = bv;
    for (std::size_t j = 0; j < rows.size(); ++j) {
        require(rows[j] < bv.rows(), "replace_rows", "row out of range");
        std::copy_n(sv.row(j).data(), sv.cols(), out.row(rows[j]).data());
    }
    std::vector<std::size_t> rv(rows.begin(), rows.end());
    return g.emplace(std::move(out), {base, src}, [base, src, rv = std::move(rv)](Graph<Real>& g, Var self) {
        const Matrix<Real>& dout = g.grad(self);
        if (g.requires_grad(base)) {
            Matrix<Real>& db = g.grad(base);
            view(db) += view(dout);
            for (std::size_t r : rv) {
                Real* d = db.row(r).data();
                const Real* s = dout.row(r).data();
                for (std::size_t c = 0; c < db.cols(); ++c) d[c] -= s[c];
            }
        }
        if (g.requires_grad(src)) {
            Matrix<Real>& ds = g.grad(src);
            for (std::size_t j = 0; j < rv.size(); ++j) {
                const Real* s = dout.row(rv[j]).data();
                Real* d = ds.row(j).data();
                for (std::size_t c = 0; c < ds.cols(); ++c) d[c] += s[c];
            }
        }
    });
}

template <typename Real>
Var layer_norm(Graph<Real>& g, Var x, Var gain, Var bias, Real eps) {
    const Matrix<Real>& xv = g.value(x);
    const Matrix<Real>& gv = g.value(gain);
    const Matrix<Real>& bv = g.value(bias);
    const std::size_t n = xv.rows(), d = xv.cols();
    require(gv.cols() == d && bv.cols() == d, "layer_norm", "gain/bias width mismatch");
    Matrix<Real> out(n, d);
    auto xhat = std::make_shared<Matrix<Real>>(n, d);
    auto rstd = std::make_shared<std::vector<Real>>(n);
    for (std::size_t r = 0; r < n; ++r) {
        const Real* xr = xv.row(r).data();
        Real mean = 0;
        for (std::size_t c = 0; c < d; ++c) mean += xr[c];
        mean /= Real(d);
        Real var = 0;
        for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= Real(d);
        const Real rs = Real(1) / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        Real* xh = xhat->row(r).data();
        Real* o = out.row(r).data();
        for (std::size_t c = 0; c < d; ++c) {
            xh[c] = (xr[c] - mean) * rs;
            o[c] = xh[c] * gv.data()[c] + bv.data()[c];
        }
    }
    return g.emplace(std::move(out), {x, gain, bias}, [x, gain, bias, xhat, rstd](Graph<Real>& g, Var self) {
        const Matrix<Real>& dout = g.grad(self);
        const Matrix<Real>& gv = g.value(gain);
        const std::size_t n = dout.rows(), d = dout.cols();
        if (g.requires_grad(gain) || g.requires_grad(bias)) {
            for (std::size_t r = 0; r < n; ++r) {
                const Real* dy = dout.row(r).data();
                const Real* xh = xhat->row(r).data();
                if (g.requires_grad(gain)) {
                    Real* dg = g.grad(gain).data();
                    for (std::size_t c = 0; c < d; ++c) dg[c] += dy[c] * xh[c];
                }
                if (g.requires_grad(bias)) {
                    Real* db = g.grad(bias).data();
                    for (std::size_t c = 0; c < d; ++c) db[c] += dy[c];
                }
            }
        }
        if (g.requires_grad(x)) {
            Matrix<Real>& dx = g.grad(x);
            std::vector<Real> dxh(d);
            for (std::size_t r = 0; r < n; ++r) {
                const Real* dy = dout.row(r).data();
                const Real* xh = xhat->row(r).data();
                Real mean_dxh = 0, mean_dxh_xh = 0;
                for (std::size_t c = 0; c < d; ++c) {
                    dxh[c] = dy[c] * gv.data()[c];
                    mean_dxh += dxh[c];
                    mean_dxh_xh += dxh[c] * xh[c];
                }
                mean_dxh /= Real(d);
                mean_dxh_xh /= Real(d);
                Real* o = dx.row(r).data();
                const Real rs = (*rstd)[r];
                for (std::size_t c = 0; c < d; ++c) o[c] += rs * (dxh[c] - mean_dxh - xh[c] * mean_dxh_xh);
            }
        }
    });
}

template <typename Real>
Var gelu(Graph<Real>& g, Var x) {
    constexpr Real kC = Real(0.7978845608028654);  // sqrt(2/pi)
    constexpr Real kA = Real(0.044715);
    const Matrix<Real>& xv = g.value(x);
    Matrix<Real> out(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const Real v = xv.data()[i];
        out.data()[i] = Real(0.5) * v * (Real(1) + std::tanh(kC * (v + kA * v * v * v)));
    }
    return g.emplace(std::move(out), {x}, [x](Graph<Real>& g, Var self) {
        if (!g.requires_grad(x)) return;
        const Matrix<Real>& xv = g.value(x);
        const Matrix<Real>& dout = g.grad(self);
        Real* dx = g.grad(x).data();
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const Real v = xv.data()[i];
            const Real t = std::tanh(kC * (v + kA * v * v * v));
            const Real dt = (Real(1) - t * t) * kC * (Real(1) + Real(3) * kA * v * v);
            dx[i] += dout.data()[i] * (Real(0.5) * (Real(1) + t) + Real(0.5) * v * dt);
        }
    });
}

template <typename Real>
Var relu(Graph<Real>& g, Var x) {
    const Matrix<Real>& xv = g.value(x);
    Matrix<Real> out(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.size(); ++i) out.data()[i] = std::max(xv.data()[i], Real(0));
    return g.emplace(std::move(out), {x}, [x](Graph<Real>& g, Var self) {
        if (!g.requires_grad(x)) return;
        const Matrix<Real>& xv = g.value(x);
        const Matrix<Real>& dout = g.grad(self);
        Real* dx = g.grad(x).data();
        for (std::size_t i = 0; i < xv.size(); ++i) {
            if (xv.data()[i] > Real(0)) dx[i] += dout.data()[i];
        }
    });
}

template <typename Real>
Var causal_attention(Graph<Real>& g, Var qkv, std::size_t batch, std::size_t seq_len, std::size_t heads) {
    const Matrix<Real>& in = g.value(qkv);
    require(in.rows() == batch * seq_len, "causal_attention", "row count must equal batch * seq_len");
    require(in.cols() % 3 == 0, "causal_attention", "qkv width must be a multiple of 3");
    const std::size_t d = in.cols() / 3;
    require(d % heads == 0, "causal_attention", "hidden size not divisible by heads");
    const std::size_t dh = d / heads;
    const Real sc = Real(1) / std::sqrt(Real(dh));
    const std::size_t T = seq_len;

    Matrix<Real> out(in.rows(), d);
    auto probs = std::make_shared<std::vector<Real>>(batch * heads * T * T, Real(0));
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            Real* P = probs->data() + (b * heads + h) * T * T;
            for (std::size_t i = 0; i < T; ++i) {
                const Real* q = in.row(b * T + i).data() + h * dh;
                Real mx = -std::numeric_limits<Real>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    const Real* k = in.row(b * T + j).data() + d + h * dh;
                    Real s = 0;
                    for (std::size_t c = 0; c < dh; ++c) s += q[c] * k[c];
                    s *= sc;
                    P[i * T + j] = s;
                    mx = std::max(mx, s);
                }
                Real z = 0;
                for (std::size_t j = 0; j <= i; ++j) {
                    P[i * T + j] = std::exp(P[i * T + j] - mx);
                    z += P[i * T + j];
                }
                Real* o = out.row(b * T + i).data() + h * dh;
                for (std::size_t j = 0; j <= i; ++j) {
                    P[i * T + j] /= z;
                    const Real p = P[i * T + j];
                    const Real* v = in.row(b * T + j).data() + 2 * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) o[c] += p * v[c];
                }
            }
        }
    }
    return g.emplace(std::move(out), {qkv}, [qkv, batch, T, heads, d, dh, sc, probs](Graph<Real>& g, Var self) {
        if (!g.requires_grad(qkv)) return;
        const Matrix<Real>& in = g.value(qkv);
        const Matrix<Real>& dout = g.grad(self);
        Matrix<Real>& din = g.grad(qkv);
        std::vector<Real> dp(T);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
                const Real* P = probs->data() + (b * heads + h) * T * T;
                for (std::size_t i = 0; i < T; ++i) {
                    const Real* dO = dout.row(b * T + i).data() + h * dh;
                    Real dot = 0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const Real* v = in.row(b * T + j).data() + 2 * d + h * dh;
                        Real* dv = din.row(b * T + j).data() + 2 * d + h * dh;
                        const Real p = P[i * T + j];
                        Real s = 0;
                        for (std::size_t c = 0; c < dh; ++c) {
                            s += dO[c] * v[c];
                            dv[c] += p * dO[c];
                        }
                        dp[j] = s;
                        dot += p * s;
                    }
                    const Real* q = in.row(b * T + i).data() + h * dh;
                    Real* dq = din.row(b * T + i).data() + h * dh;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const Real ds = P[i * T + j] * (dp[j] - dot) * sc;
                        const Real* k = in.row(b * T + j).data() + d + h * dh;
                        Real* dk = din.row(b * T + j).data() + d + h * dh;
                        for (std::size_t c = 0; c < dh; ++c) {
                            dq[c] += ds * k[c];
                            dk[c] += ds * q[c];
                        }
                    }
                }
            }
        }
    });
}

template <typename Real>
Var cross_entropy(Graph<Real>& g, Var logits, std::span<const int> targets, std::span<const Real> weights) {
    const Matrix<Real>& lv = g.value(logits);
    require(targets.size() == lv.rows() && weights.size() == lv.rows(), "cross_entropy",
            "targets/weights must have one entry per row");
    const std::size_t n = lv.rows(), V = lv.cols();
    Real total_w = 0;
    for (Real w : weights) total_w += w;
    Real loss = 0;
    auto probs = std::make_shared<Matrix<Real>>(n, V);
    for (std::size_t r = 0; r < n; ++r) {
        if (weights[r] == Real(0)) continue;
        const int t = targets[r];
        require(t >= 0 && static_cast<std::size_t>(t) < V, "cross_entropy", "target out of range");
        const Real* l = lv.row(r).data();
        Real mx = l[0];
        for (std::size_t c = 1; c < V; ++c) mx = std::max(mx, l[c]);
        Real z = 0;
        Real* p = probs->row(r).data();
        for (std::size_t c = 0; c < V; ++c) {
            p[c] = std::exp(l[c] - mx);
            z += p[c];
        }
        for (std::size_t c = 0; c < V; ++c) p[c] /= z;
        loss += weights[r] * (std::log(z) + mx - l[t]);
    }
    Matrix<Real> out(1, 1);
    out(0, 0) = total_w > Real(0) ? loss / total_w : Real(0);
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<Real> wt(weights.begin(), weights.end());
    return g.emplace(std::move(out), {logits},
                     [logits, probs, tg = std::move(tg), wt = std::move(wt), total_w](Graph<Real>& g, Var self) {
                         if (!g.requires_grad(logits) || total_w == Real(0)) return;
                         const Real upstream = g.grad(self)(0, 0);
                         Matrix<Real>& dl = g.grad(logits);
                         for (std::size_t r = 0; r < dl.rows(); ++r) {
                             if (wt[r] == Real(0)) continue;
                             const Real f = upstream * wt[r] / total_w;
                             const Real* p = probs->row(r).data();
                             Real* d = dl.row(r).data();
                             for (std::size_t c = 0; c < dl.cols(); ++c) d[c] += f * p[c];
                             d[tg[r]] -= f;
                         }
                     });
}

template <typename Real>
Var mean_squared_error(Graph<Real>& g, Var a, Var b) {
    const Matrix<Real>& av = g.value(a);
    const Matrix<Real>& bv = g.value(b);
    require(av.same_shape(bv), "mean_squared_error", "shape mismatch");
    Matrix<Real> out(1, 1);
    const Real n = Real(av.size());
    out(0, 0) = n > 0 ? (view(av) - view(bv)).squaredNorm() / n : Real(0);
    return g.emplace(std::move(out), {a}, [a, b, n](Graph<Real>& g, Var self) {
        if (!g.requires_grad(a) || n == Real(0)) return;
        const Real f = Real(2) * g.grad(self)(0, 0) / n;
        view(g.grad(a)) += f * (view(g.value(a)) - view(g.value(b)));
    });
}

template <typename Real>
Var l1_per_row(Graph<Real>& g, Var x) {
    const Matrix<Real>& xv = g.value(x);
    Matrix<Real> out(1, 1);
    const Real rows = Real(xv.rows());
    out(0, 0) = rows > 0 ? view(xv).cwiseAbs().sum() / rows : Real(0);
    return g.emplace(std::move(out), {x}, [x, rows](Graph<Real>& g, Var self) {
        if (!g.requires_grad(x) || rows == Real(0)) return;
        const Real f = g.grad(self)(0, 0) / rows;
        const Matrix<Real>& xv = g.value(x);
        Real* dx = g.grad(x).data();
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const Real v = xv.data()[i];
            dx[i] += v > 0 ? f : (v < 0 ? -f : Real(0));
        }
    });
}

#define INTROSPECT_INSTANTIATE_OPS(R)                                                                          \
    template Var matmul_nt<R>(Graph<R>&, Var, Var);                                                            \
    template Var add_bias<R>(Graph<R>&, Var, Var);                                                             \
    template Var add<R>(Graph<R>&, Var, Var);                                                                  \
    template Var scale<R>(Graph<R>&, Var, R);                                                                  \
    template Var gather_rows<R>(Graph<R>&, Var, std::span<const int>);                                         \
    template Var replace_rows<R>(Graph<R>&, Var, std::span<const std::size_t>, Var);                           \
    template Var layer_norm<R>(Graph<R>&, Var, Var, Var, R);                                                   \
    template Var gelu<R>(Graph<R>&, Var);                                                                      \
    template Var relu<R>(Graph<R>&, Var);                                                                      \
    template Var causal_attention<R>(Graph<R>&, Var, std::size_t, std::size_t, std::size_t);                   \
    template Var cross_entropy<R>(Graph<R>&, Var, std::span<const int>, std::span<const R>);                   \
    template Var mean_squared_error<R>(Graph<R>&, Var, Var);                                                   \
    template Var l1_per_row<R>(Graph<R>&, Var);

INTROSPECT_INSTANTIATE_OPS(float)
INTROSPECT_INSTANTIATE_OPS(double)

}  // namespace introspect::lm::ops
