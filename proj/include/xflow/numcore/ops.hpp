#pragma once

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xflow/numcore/array.hpp"
#include "xflow/numcore/tape.hpp"

// Differentiable operations over Tape<T>. Each op validates shapes, computes its
// forward value, and records a closure that accumulates input gradients.

namespace xflow::ops {

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Map = Eigen::Map<MatRM<T>>;
template <class T>
using CMap = Eigen::Map<const MatRM<T>>;

template <class T>
CMap<T> cmat(const BasicDenseArray<T>& a, std::size_t rows, std::size_t cols) {
    return CMap<T>(a.raw(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
Map<T> mat(BasicDenseArray<T>& a, std::size_t rows, std::size_t cols) {
    return Map<T>(a.raw(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
CMap<T> cmat_at(const BasicDenseArray<T>& a, std::size_t offset, std::size_t rows, std::size_t cols) {
    return CMap<T>(a.raw() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
Map<T> mat_at(BasicDenseArray<T>& a, std::size_t offset, std::size_t rows, std::size_t cols) {
    return Map<T>(a.raw() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline std::string where(std::string_view op, std::string_view name) {
    return name.empty() ? std::string(op) : std::string(op) + " '" + std::string(name) + "'";
}

template <class T>
void add_into(BasicDenseArray<T>& dst, const BasicDenseArray<T>& src) {
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += s[i];
    }
}

/// Maps every flat index of `out` to the flat index of a broadcast operand.
inline std::vector<std::size_t> broadcast_map(const Shape& out, const Shape& operand) {
    const std::size_t rank = out.size();
    std::vector<std::size_t> stride(rank, 0);
    std::size_t s = 1;
    for (std::size_t i = rank; i-- > 0;) {
        stride[i] = operand[i] == 1 ? 0 : s;
        s *= operand[i];
    }
    std::vector<std::size_t> map(shape_size(out));
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t flat = 0; flat < map.size(); ++flat) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < rank; ++i) {
            off += idx[i] * stride[i];
        }
        map[flat] = off;
        for (std::size_t i = rank; i-- > 0;) {
            if (++idx[i] < out[i]) {
                break;
            }
            idx[i] = 0;
        }
    }
    return map;
}

template <class T, class F, class D>
Var unary(Tape<T>& tape, Var x, std::string_view op, F f, D df) {
    const auto& xv = tape.value(x);
    BasicDenseArray<T> y(xv.shape());
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = f(xv[i]);
    }
    return tape.record(op, std::move(y), {x}, [x, df](Tape<T>& t, const BasicDenseArray<T>& g) {
        if (!t.requires_grad(x)) {
            return;
        }
        const auto& xv = t.value(x);
        auto& gx = t.grad(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += g[i] * df(xv[i]);
        }
    });
}

}  // namespace detail

/// Affine map over the last axis: x [..., in] · w [in, out] (+ b [out]).
template <class T>
Var linear(Tape<T>& tape, Var x, Var w, std::optional<Var> b, std::string_view name = {}) {
    const auto& xv = tape.value(x);
    const auto& wv = tape.value(w);
    const std::string here = detail::where("linear", name);
    if (wv.rank() != 2 || xv.rank() == 0 || xv.shape().back() != wv.dim(0)) {
        throw ShapeError(here + ": input " + shape_string(xv.shape()) + " incompatible with weight " +
                         shape_string(wv.shape()));
    }
    const std::size_t in = wv.dim(0);
    const std::size_t out = wv.dim(1);
    const std::size_t rows = xv.size() / in;
    if (b && tape.shape(*b) != Shape{out}) {
        throw ShapeError(here + ": bias shape " + shape_string(tape.shape(*b)) + " != [" + std::to_string(out) + "]");
    }
    Shape yshape = xv.shape();
    yshape.back() = out;
    BasicDenseArray<T> y(yshape);
    auto Y = detail::mat(y, rows, out);
    Y.noalias() = detail::cmat(xv, rows, in) * detail::cmat(wv, in, out);
    if (b) {
        const auto& bv = tape.value(*b);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < out; ++c) {
                y[r * out + c] += bv[c];
            }
        }
    }
    std::vector<Var> inputs{x, w};
    if (b) {
        inputs.push_back(*b);
    }
    return tape.record(here, std::move(y), inputs, [x, w, b, rows, in, out](Tape<T>& t, const BasicDenseArray<T>& g) {
        const auto G = detail::cmat(g, rows, out);
        if (t.requires_grad(x)) {
            detail::mat(t.grad(x), rows, in).noalias() += G * detail::cmat(t.value(w), in, out).transpose();
        }
        if (t.requires_grad(w)) {
            detail::mat(t.grad(w), in, out).noalias() += detail::cmat(t.value(x), rows, in).transpose() * G;
        }
        if (b && t.requires_grad(*b)) {
            auto& gb = t.grad(*b);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < out; ++c) {
                    gb[c] += g[r * out + c];
                }
            }
        }
    });
}

/// Linear resampling of the token axis: x [B, Tin, F], w [Tout, Tin], b [Tout] -> [B, Tout, F].
/// This is a 1x1 Conv1D over channels.
template <class T>
Var token_mix(Tape<T>& tape, Var x, Var w, std::optional<Var> b, std::string_view name = {}) {
    const auto& xv = tape.value(x);
    const auto& wv = tape.value(w);
    const std::string here = detail::where("token_mix", name);
    if (xv.rank() != 3 || wv.rank() != 2 || wv.dim(1) != xv.dim(1)) {
        throw ShapeError(here + ": input " + shape_string(xv.shape()) + " incompatible with weight " +
                         shape_string(wv.shape()));
    }
    const std::size_t batch = xv.dim(0);
    const std::size_t tin = xv.dim(1);
    const std::size_t feat = xv.dim(2);
    const std::size_t tout = wv.dim(0);
    if (b && tape.shape(*b) != Shape{tout}) {
        throw ShapeError(here + ": bias shape " + shape_string(tape.shape(*b)) + " != [" + std::to_string(tout) + "]");
    }
    BasicDenseArray<T> y({batch, tout, feat});
    const auto W = detail::cmat(wv, tout, tin);
    for (std::size_t n = 0; n < batch; ++n) {
        auto Y = detail::mat_at(y, n * tout * feat, tout, feat);
        Y.noalias() = W * detail::cmat_at(xv, n * tin * feat, tin, feat);
        if (b) {
            const auto& bv = tape.value(*b);
            for (std::size_t r = 0; r < tout; ++r) {
                Y.row(static_cast<Eigen::Index>(r)).array() += bv[r];
            }
        }
    }
    std::vector<Var> inputs{x, w};
    if (b) {
        inputs.push_back(*b);
    }
    return tape.record(here, std::move(y), inputs,
                       [x, w, b, batch, tin, feat, tout](Tape<T>& t, const BasicDenseArray<T>& g) {
                           const auto W = detail::cmat(t.value(w), tout, tin);
                           const bool gx_needed = t.requires_grad(x);
                           const bool gw_needed = t.requires_grad(w);
                           for (std::size_t n = 0; n < batch; ++n) {
                               const auto G = detail::cmat_at(g, n * tout * feat, tout, feat);
                               if (gx_needed) {
                                   detail::mat_at(t.grad(x), n * tin * feat, tin, feat).noalias() += W.transpose() * G;
                               }
                               if (gw_needed) {
                                   detail::mat(t.grad(w), tout, tin).noalias() +=
                                       G * detail::cmat_at(t.value(x), n * tin * feat, tin, feat).transpose();
                               }
                           }
                           if (b && t.requires_grad(*b)) {
                               auto& gb = t.grad(*b);
                               for (std::size_t n = 0; n < batch; ++n) {
                                   for (std::size_t r = 0; r < tout; ++r) {
                                       for (std::size_t c = 0; c < feat; ++c) {
                                           gb[r] += g[(n * tout + r) * feat + c];
                                       }
                                   }
                               }
                           }
                       });
}

/// Elementwise a + b. `b` may broadcast along any axis where its extent is 1
/// (ranks must match).
template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    if (av.shape() == bv.shape()) {
        BasicDenseArray<T> y(av.shape());
        for (std::size_t i = 0; i < y.size(); ++i) {
            y[i] = av[i] + bv[i];
        }
        return tape.record("add", std::move(y), {a, b}, [a, b](Tape<T>& t, const BasicDenseArray<T>& g) {
            if (t.requires_grad(a)) {
                detail::add_into(t.grad(a), g);
            }
            if (t.requires_grad(b)) {
                detail::add_into(t.grad(b), g);
            }
        });
    }
    if (av.rank() != bv.rank()) {
        throw ShapeError("add: cannot broadcast " + shape_string(bv.shape()) + " onto " + shape_string(av.shape()));
    }
    for (std::size_t i = 0; i < av.rank(); ++i) {
        if (bv.dim(i) != 1 && bv.dim(i) != av.dim(i)) {
            throw ShapeError("add: cannot broadcast " + shape_string(bv.shape()) + " onto " +
                             shape_string(av.shape()));
        }
    }
    auto map = detail::broadcast_map(av.shape(), bv.shape());
    BasicDenseArray<T> y(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = av[i] + bv[map[i]];
    }
    return tape.record("add_broadcast", std::move(y), {a, b},
                       [a, b, map = std::move(map)](Tape<T>& t, const BasicDenseArray<T>& g) {
                           if (t.requires_grad(a)) {
                               detail::add_into(t.grad(a), g);
                           }
                           if (t.requires_grad(b)) {
                               auto& gb = t.grad(b);
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   gb[map[i]] += g[i];
                               }
                           }
                       });
}

template <class T>
Var sub(Tape<T>& tape, Var a, Var b) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    require_shape("sub", bv.shape(), av.shape());
    BasicDenseArray<T> y(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = av[i] - bv[i];
    }
    return tape.record("sub", std::move(y), {a, b}, [a, b](Tape<T>& t, const BasicDenseArray<T>& g) {
        if (t.requires_grad(a)) {
            detail::add_into(t.grad(a), g);
        }
        if (t.requires_grad(b)) {
            auto& gb = t.grad(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i] -= g[i];
            }
        }
    });
}

template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    require_shape("mul", bv.shape(), av.shape());
    BasicDenseArray<T> y(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] = av[i] * bv[i];
    }
    return tape.record("mul", std::move(y), {a, b}, [a, b](Tape<T>& t, const BasicDenseArray<T>& g) {
        if (t.requires_grad(a)) {
            const auto& bv = t.value(b);
            auto& ga = t.grad(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * bv[i];
            }
        }
        if (t.requires_grad(b)) {
            const auto& av = t.value(a);
            auto& gb = t.grad(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gb[i] += g[i] * av[i];
            }
        }
    });
}

template <class T>
Var scale(Tape<T>& tape, Var x, T factor) {
    return detail::unary(
        tape, x, "scale", [factor](T v) { return v * factor; }, [factor](T) { return factor; });
}

template <class T>
Var exp(Tape<T>& tape, Var x) {
    return detail::unary(
        tape, x, "exp", [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <class T>
Var tanh(Tape<T>& tape, Var x) {
    return detail::unary(
        tape, x, "tanh", [](T v) { return std::tanh(v); },
        [](T v) {
            const T y = std::tanh(v);
            return T{1} - y * y;
        });
}

/// GELU, tanh approximation.
template <class T>
Var gelu(Tape<T>& tape, Var x) {
    constexpr T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    constexpr T c = static_cast<T>(0.044715);
    return detail::unary(
        tape, x, "gelu",
        [](T v) { return T{0.5} * v * (T{1} + std::tanh(k * (v + c * v * v * v))); },
        [](T v) {
            const T u = k * (v + c * v * v * v);
            const T th = std::tanh(u);
            const T du = k * (T{1} + T{3} * c * v * v);
            return T{0.5} * (T{1} + th) + T{0.5} * v * (T{1} - th * th) * du;
        });
}

template <class T>
Var silu(Tape<T>& tape, Var x) {
    return detail::unary(
        tape, x, "silu", [](T v) { return v / (T{1} + std::exp(-v)); },
        [](T v) {
            const T s = T{1} / (T{1} + std::exp(-v));
            return s * (T{1} + v * (T{1} - s));
        });
}

/// Clamp into [lo, hi]; the gradient is passed only where the input lies inside.
template <class T>
Var clamp(Tape<T>& tape, Var x, T lo, T hi) {
    return detail::unary(
        tape, x, "clamp", [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](T v) { return (v >= lo && v <= hi) ? T{1} : T{0}; });
}

/// Layer normalization over the last axis with learned gain and shift.
template <class T>
Var layer_norm(Tape<T>& tape, Var x, Var gamma, Var beta, T eps = static_cast<T>(1e-5)) {
    const auto& xv = tape.value(x);
    const std::size_t f = xv.shape().back();
    require_shape("layer_norm gamma", tape.shape(gamma), {f});
    require_shape("layer_norm beta", tape.shape(beta), {f});
    const std::size_t rows = xv.size() / f;
    const auto& gv = tape.value(gamma);
    const auto& bv = tape.value(beta);
    BasicDenseArray<T> y(xv.shape());
    BasicDenseArray<T> xhat(xv.shape());
    std::vector<T> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.raw() + r * f;
        T mean = 0;
        for (std::size_t i = 0; i < f; ++i) {
            mean += xr[i];
        }
        mean /= static_cast<T>(f);
        T var = 0;
        for (std::size_t i = 0; i < f; ++i) {
            var += (xr[i] - mean) * (xr[i] - mean);
        }
        var /= static_cast<T>(f);
        rstd[r] = T{1} / std::sqrt(var + eps);
        for (std::size_t i = 0; i < f; ++i) {
            const T h = (xr[i] - mean) * rstd[r];
            xhat[r * f + i] = h;
            y[r * f + i] = h * gv[i] + bv[i];
        }
    }
    return tape.record("layer_norm", std::move(y), {x, gamma, beta},
                       [x, gamma, beta, f, rows, xhat = std::move(xhat), rstd = std::move(rstd)](
                           Tape<T>& t, const BasicDenseArray<T>& g) {
                           const auto& gv = t.value(gamma);
                           if (t.requires_grad(gamma) || t.requires_grad(beta)) {
                               auto& gg = t.grad(gamma);
                               auto& gb = t.grad(beta);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t i = 0; i < f; ++i) {
                                       gg[i] += g[r * f + i] * xhat[r * f + i];
                                       gb[i] += g[r * f + i];
                                   }
                               }
                           }
                           if (!t.requires_grad(x)) {
                               return;
                           }
                           auto& gx = t.grad(x);
                           std::vector<T> dh(f);
                           for (std::size_t r = 0; r < rows; ++r) {
                               T mean_dh = 0;
                               T mean_dh_h = 0;
                               for (std::size_t i = 0; i < f; ++i) {
                                   dh[i] = g[r * f + i] * gv[i];
                                   mean_dh += dh[i];
                                   mean_dh_h += dh[i] * xhat[r * f + i];
                               }
                               mean_dh /= static_cast<T>(f);
                               mean_dh_h /= static_cast<T>(f);
                               for (std::size_t i = 0; i < f; ++i) {
                                   gx[r * f + i] += rstd[r] * (dh[i] - mean_dh - xhat[r * f + i] * mean_dh_h);
                               }
                           }
                       });
}

/// Multi-head scaled dot-product attention over the token axis.
/// q, k, v: [B, T, W] with W divisible by `heads`.
template <class T>
Var attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t heads) {
    const auto& qv = tape.value(q);
    require_shape("attention k", tape.shape(k), qv.shape());
    require_shape("attention v", tape.shape(v), qv.shape());
    if (qv.rank() != 3 || heads == 0 || qv.dim(2) % heads != 0) {
        throw ShapeError("attention: input " + shape_string(qv.shape()) + " incompatible with " +
                         std::to_string(heads) + " heads");
    }
    const std::size_t batch = qv.dim(0);
    const std::size_t tokens = qv.dim(1);
    const std::size_t width = qv.dim(2);
    const std::size_t hd = width / heads;
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(hd));
    const auto& kv = tape.value(k);
    const auto& vv = tape.value(v);

    BasicDenseArray<T> out(qv.shape());
    BasicDenseArray<T> probs({batch, heads, tokens, tokens});
    std::vector<T> row(tokens);
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < tokens; ++i) {
                const T* qi = qv.raw() + (n * tokens + i) * width + h * hd;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < tokens; ++j) {
                    const T* kj = kv.raw() + (n * tokens + j) * width + h * hd;
                    T s = 0;
                    for (std::size_t c = 0; c < hd; ++c) {
                        s += qi[c] * kj[c];
                    }
                    row[j] = s * inv_sqrt;
                    mx = std::max(mx, row[j]);
                }
                T z = 0;
                for (std::size_t j = 0; j < tokens; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    z += row[j];
                }
                T* oi = out.raw() + (n * tokens + i) * width + h * hd;
                T* pi = probs.raw() + ((n * heads + h) * tokens + i) * tokens;
                for (std::size_t j = 0; j < tokens; ++j) {
                    pi[j] = row[j] / z;
                    const T* vj = vv.raw() + (n * tokens + j) * width + h * hd;
                    for (std::size_t c = 0; c < hd; ++c) {
                        oi[c] += pi[j] * vj[c];
                    }
                }
            }
        }
    }
    return tape.record(
        "attention", std::move(out), {q, k, v},
        [q, k, v, batch, heads, tokens, width, hd, inv_sqrt, probs = std::move(probs)](Tape<T>& t,
                                                                                     const BasicDenseArray<T>& g) {
            const auto& qv = t.value(q);
            const auto& kv = t.value(k);
            const auto& vv = t.value(v);
            const bool need_q = t.requires_grad(q);
            const bool need_k = t.requires_grad(k);
            const bool need_v = t.requires_grad(v);
            BasicDenseArray<T>* gq = need_q ? &t.grad(q) : nullptr;
            BasicDenseArray<T>* gk = need_k ? &t.grad(k) : nullptr;
            BasicDenseArray<T>* gv = need_v ? &t.grad(v) : nullptr;
            std::vector<T> dp(tokens);
            for (std::size_t n = 0; n < batch; ++n) {
                for (std::size_t h = 0; h < heads; ++h) {
                    for (std::size_t i = 0; i < tokens; ++i) {
                        const T* go = g.raw() + (n * tokens + i) * width + h * hd;
                        const T* pi = probs.raw() + ((n * heads + h) * tokens + i) * tokens;
                        T dot = 0;
                        for (std::size_t j = 0; j < tokens; ++j) {
                            const T* vj = vv.raw() + (n * tokens + j) * width + h * hd;
                            T s = 0;
                            for (std::size_t c = 0; c < hd; ++c) {
                                s += go[c] * vj[c];
                            }
                            dp[j] = s;
                            dot += s * pi[j];
                            if (gv != nullptr) {
                                T* gvj = gv->raw() + (n * tokens + j) * width + h * hd;
                                for (std::size_t c = 0; c < hd; ++c) {
                                    gvj[c] += pi[j] * go[c];
                                }
                            }
                        }
                        const T* qi = qv.raw() + (n * tokens + i) * width + h * hd;
                        for (std::size_t j = 0; j < tokens; ++j) {
                            const T ds = pi[j] * (dp[j] - dot) * inv_sqrt;
                            const T* kj = kv.raw() + (n * tokens + j) * width + h * hd;
                            if (gq != nullptr) {
                                T* gqi = gq->raw() + (n * tokens + i) * width + h * hd;
                                for (std::size_t c = 0; c < hd; ++c) {
                                    gqi[c] += ds * kj[c];
                                }
                            }
                            if (gk != nullptr) {
                                T* gkj = gk->raw() + (n * tokens + j) * width + h * hd;
                                for (std::size_t c = 0; c < hd; ++c) {
                                    gkj[c] += ds * qi[c];
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Mean over the token axis: [B, T, F] -> [B, 1, F].
template <class T>
Var mean_tokens(Tape<T>& tape, Var x) {
    const auto& xv = tape.value(x);
    if (xv.rank() != 3) {
        throw ShapeError("mean_tokens: expected rank-3 input, got " + shape_string(xv.shape()));
    }
    const std::size_t batch = xv.dim(0);
    const std::size_t tokens = xv.dim(1);
    const std::size_t feat = xv.dim(2);
    BasicDenseArray<T> y({batch, 1, feat});
    const T inv = T{1} / static_cast<T>(tokens);
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t j = 0; j < tokens; ++j) {
            for (std::size_t c = 0; c < feat; ++c) {
                y[n * feat + c] += xv[(n * tokens + j) * feat + c];
            }
        }
    }
    for (auto& e : y.data()) {
        e *= inv;
    }
    return tape.record("mean_tokens", std::move(y), {x},
                       [x, batch, tokens, feat, inv](Tape<T>& t, const BasicDenseArray<T>& g) {
                           if (!t.requires_grad(x)) {
                               return;
                           }
                           auto& gx = t.grad(x);
                           for (std::size_t n = 0; n < batch; ++n) {
                               for (std::size_t j = 0; j < tokens; ++j) {
                                   for (std::size_t c = 0; c < feat; ++c) {
                                       gx[(n * tokens + j) * feat + c] += g[n * feat + c] * inv;
                                   }
                               }
                           }
                       });
}

/// Tokens [start, start + count) of a [B, T, F] array.
template <class T>
Var slice_tokens(Tape<T>& tape, Var x, std::size_t start, std::size_t count) {
    const auto& xv = tape.value(x);
    if (xv.rank() != 3 || start + count > xv.dim(1)) {
        throw ShapeError("slice_tokens: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + shape_string(xv.shape()));
    }
    const std::size_t batch = xv.dim(0);
    const std::size_t tokens = xv.dim(1);
    const std::size_t feat = xv.dim(2);
    BasicDenseArray<T> y({batch, count, feat});
    for (std::size_t n = 0; n < batch; ++n) {
        std::copy_n(xv.raw() + (n * tokens + start) * feat, count * feat, y.raw() + n * count * feat);
    }
    return tape.record("slice_tokens", std::move(y), {x},
                       [x, batch, tokens, feat, start, count](Tape<T>& t, const BasicDenseArray<T>& g) {
                           if (!t.requires_grad(x)) {
                               return;
                           }
                           auto& gx = t.grad(x);
                           for (std::size_t n = 0; n < batch; ++n) {
                               for (std::size_t i = 0; i < count * feat; ++i) {
                                   gx[(n * tokens + start) * feat + i] += g[n * count * feat + i];
                               }
                           }
                       });
}

template <class T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
    auto y = tape.value(x).reshaped(std::move(shape));
    return tape.record("reshape", std::move(y), {x}, [x](Tape<T>& t, const BasicDenseArray<T>& g) {
        if (t.requires_grad(x)) {
            detail::add_into(t.grad(x), g.reshaped(t.shape(x)));
        }
    });
}

/// Weighted sum of single-element values: sum_i w_i * x_i.
template <class T>
Var weighted_sum(Tape<T>& tape, const std::vector<Var>& xs, const std::vector<T>& weights) {
    if (xs.size() != weights.size() || xs.empty()) {
        throw ShapeError("weighted_sum: need one weight per term");
    }
    T total = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (tape.value(xs[i]).size() != 1) {
            throw ShapeError("weighted_sum: terms must be scalars");
        }
        total += weights[i] * tape.value(xs[i])[0];
    }
    return tape.record("weighted_sum", BasicDenseArray<T>({1}, {total}), std::span<const Var>(xs),
                       [xs, weights](Tape<T>& t, const BasicDenseArray<T>& g) {
                           for (std::size_t i = 0; i < xs.size(); ++i) {
                               if (t.requires_grad(xs[i])) {
                                   t.grad(xs[i])[0] += weights[i] * g[0];
                               }
                           }
                       });
}

template <class T>
Var sum_all(Tape<T>& tape, Var x) {
    const auto& xv = tape.value(x);
    T s = 0;
    for (T e : xv.data()) {
        s += e;
    }
    return tape.record("sum_all", BasicDenseArray<T>({1}, {s}), {x}, [x](Tape<T>& t, const BasicDenseArray<T>& g) {
        if (t.requires_grad(x)) {
            for (auto& e : t.grad(x).data()) {
                e += g[0];
            }
        }
    });
}

}  // namespace xflow::ops
