#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "xflow/numcore/array.hpp"
#include "xflow/numcore/ops.hpp"
#include "xflow/numcore/tape.hpp"

namespace xflow {

/// Weights of the composite VAE objective: mse + alpha*kl + beta*clip + lambda*cyc.
/// Ablations zero individual weights, so zero is accepted; negatives are not.
struct VaeLossWeights {
    double alpha_kl = 0.001;
    double beta_clip = 1000.0;
    double lambda_cyc = 1000.0;

    void validate() const {
        if (!(alpha_kl >= 0.0 && beta_clip >= 0.0 && lambda_cyc >= 0.0)) {
            throw std::invalid_argument("VaeLossWeights: weights must be non-negative");
        }
    }
};

struct SoftClipConfig {
    double temperature = 0.07;
    double soft_target_mix = 0.5;
    bool hard_mode = false;

    void validate() const {
        if (!(temperature > 0.0)) {
            throw std::invalid_argument("SoftClipConfig: temperature must be positive");
        }
        if (!(soft_target_mix >= 0.0 && soft_target_mix <= 1.0)) {
            throw std::invalid_argument("SoftClipConfig: soft_target_mix must lie in [0, 1]");
        }
    }
};

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

/// Scalar components of one VAE step.
struct VaeLossParts {
    double mse = 0.0;
    double kl = 0.0;
    double clip = 0.0;
    double cyc = 0.0;
};

/// mse + alpha*kl + beta*clip + lambda*cyc.
inline double vae_composite_loss(const VaeLossParts& parts, const VaeLossWeights& weights) {
    weights.validate();
    for (double v : {parts.mse, parts.kl, parts.clip, parts.cyc}) {
        if (!std::isfinite(v)) {
            throw NumericError("vae_composite_loss: non-finite loss component");
        }
    }
    return parts.mse + weights.alpha_kl * parts.kl + weights.beta_clip * parts.clip + weights.lambda_cyc * parts.cyc;
}

namespace ops {

/// Mean of squared elementwise differences, as a [1] array.
template <class T>
Var mse_loss(Tape<T>& tape, Var prediction, Var target) {
    const auto& p = tape.value(prediction);
    const auto& q = tape.value(target);
    require_shape("mse_loss", q.shape(), p.shape());
    if (p.empty()) {
        throw ShapeError("mse_loss: empty input");
    }
    T total = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const T d = p[i] - q[i];
        total += d * d;
    }
    const T inv_n = T{1} / static_cast<T>(p.size());
    return tape.record("mse_loss", BasicDenseArray<T>({1}, {total * inv_n}), {prediction, target},
                       [prediction, target, inv_n](Tape<T>& t, const BasicDenseArray<T>& g) {
                           const auto& p = t.value(prediction);
                           const auto& q = t.value(target);
                           const T s = T{2} * inv_n * g[0];
                           if (t.requires_grad(prediction)) {
                               auto& gp = t.grad(prediction);
                               for (std::size_t i = 0; i < p.size(); ++i) {
                                   gp[i] += s * (p[i] - q[i]);
                               }
                           }
                           if (t.requires_grad(target)) {
                               auto& gq = t.grad(target);
                               for (std::size_t i = 0; i < p.size(); ++i) {
                                   gq[i] -= s * (p[i] - q[i]);
                               }
                           }
                       });
}

/// Flow-matching regression loss; same formula as mse_loss.
template <class T>
Var fm_loss(Tape<T>& tape, Var predicted_field, Var target_field) {
    return mse_loss(tape, predicted_field, target_field);
}

/// KL(N(mu, exp(logvar)) || N(0, I)) summed over non-batch dims, averaged over
/// the leading batch axis. logvar is clamped to [-10, 10] first.
template <class T>
Var kl_divergence(Tape<T>& tape, Var mu, Var logvar) {
    const auto& m = tape.value(mu);
    const auto& lv = tape.value(logvar);
    require_shape("kl_divergence", lv.shape(), m.shape());
    if (m.rank() == 0 || m.dim(0) == 0) {
        throw ShapeError("kl_divergence: empty batch");
    }
    const T inv_batch = T{1} / static_cast<T>(m.dim(0));
    const T lo = static_cast<T>(kLogvarMin);
    const T hi = static_cast<T>(kLogvarMax);
    T total = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        const T l = std::min(std::max(lv[i], lo), hi);
        total += m[i] * m[i] + std::exp(l) - l - T{1};
    }
    return tape.record("kl_divergence", BasicDenseArray<T>({1}, {T{0.5} * total * inv_batch}), {mu, logvar},
                       [mu, logvar, inv_batch, lo, hi](Tape<T>& t, const BasicDenseArray<T>& g) {
                           const auto& m = t.value(mu);
                           const auto& lv = t.value(logvar);
                           const T s = g[0] * inv_batch;
                           if (t.requires_grad(mu)) {
                               auto& gm = t.grad(mu);
                               for (std::size_t i = 0; i < m.size(); ++i) {
                                   gm[i] += s * m[i];
                               }
                           }
                           if (t.requires_grad(logvar)) {
                               auto& gl = t.grad(logvar);
                               for (std::size_t i = 0; i < lv.size(); ++i) {
                                   if (lv[i] >= lo && lv[i] <= hi) {
                                       gl[i] += s * T{0.5} * (std::exp(lv[i]) - T{1});
                                   }
                               }
                           }
                       });
}

namespace detail {

/// Mean over tokens (rank 3) then L2 normalization of each row. Returns the unit
/// rows and the pre-normalization norms.
template <class T>
void pool_normalize(const BasicDenseArray<T>& x, std::size_t batch, std::size_t tokens, std::size_t feat,
                    std::vector<T>& unit, std::vector<T>& norms) {
    unit.assign(batch * feat, T{0});
    norms.assign(batch, T{0});
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t j = 0; j < tokens; ++j) {
            for (std::size_t c = 0; c < feat; ++c) {
                unit[n * feat + c] += x[(n * tokens + j) * feat + c];
            }
        }
        T ss = 0;
        for (std::size_t c = 0; c < feat; ++c) {
            unit[n * feat + c] /= static_cast<T>(tokens);
            ss += unit[n * feat + c] * unit[n * feat + c];
        }
        norms[n] = std::sqrt(ss + static_cast<T>(1e-12));
        for (std::size_t c = 0; c < feat; ++c) {
            unit[n * feat + c] /= norms[n];
        }
    }
}

/// Row softmax of a [n, n] matrix given as a flat vector.
template <class T>
std::vector<T> softmax_rows(const std::vector<T>& logits, std::size_t n) {
    std::vector<T> p(logits.size());
    for (std::size_t i = 0; i < n; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            mx = std::max(mx, logits[i * n + j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < n; ++j) {
            p[i * n + j] = std::exp(logits[i * n + j] - mx);
            z += p[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            p[i * n + j] /= z;
        }
    }
    return p;
}

template <class T>
std::vector<T> gram(const std::vector<T>& a, const std::vector<T>& b, std::size_t n, std::size_t feat, T scale) {
    std::vector<T> s(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T dot = 0;
            for (std::size_t c = 0; c < feat; ++c) {
                dot += a[i * feat + c] * b[j * feat + c];
            }
            s[i * n + j] = dot * scale;
        }
    }
    return s;
}

/// Contrastive targets: identity in hard mode, else (1 - mix) * I + mix * softmax(self-similarity / tau).
template <class T>
std::vector<T> soft_targets(const std::vector<T>& unit, std::size_t n, std::size_t feat, const SoftClipConfig& cfg) {
    std::vector<T> target(n * n, T{0});
    if (cfg.hard_mode || cfg.soft_target_mix == 0.0) {
        for (std::size_t i = 0; i < n; ++i) {
            target[i * n + i] = T{1};
        }
        return target;
    }
    const T inv_tau = static_cast<T>(1.0 / cfg.temperature);
    const T mix = static_cast<T>(cfg.soft_target_mix);
    auto self = softmax_rows(gram(unit, unit, n, feat, inv_tau), n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            target[i * n + j] = mix * self[i * n + j] + (i == j ? T{1} - mix : T{0});
        }
    }
    return target;
}

}  // namespace detail

/// Symmetric soft-label contrastive loss between two batches of embeddings
/// ([B, T, F] pooled over tokens, or [B, F]). Gradients flow through the soft targets too.
template <class T>
Var softclip_loss(Tape<T>& tape, Var a, Var b, const SoftClipConfig& cfg) {
    cfg.validate();
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    require_shape("softclip_loss", bv.shape(), av.shape());
    if (av.rank() != 2 && av.rank() != 3) {
        throw ShapeError("softclip_loss: expected [B, F] or [B, T, F], got " + shape_string(av.shape()));
    }
    const std::size_t n = av.dim(0);
    if (n < 2) {
        throw std::invalid_argument("softclip_loss: contrastive loss needs a batch of at least 2");
    }
    const std::size_t tokens = av.rank() == 3 ? av.dim(1) : 1;
    const std::size_t feat = av.shape().back();
    const T inv_tau = static_cast<T>(1.0 / cfg.temperature);

    std::vector<T> ua, ub, na, nb;
    detail::pool_normalize(av, n, tokens, feat, ua, na);
    detail::pool_normalize(bv, n, tokens, feat, ub, nb);
    const auto target_b = detail::soft_targets(ub, n, feat, cfg);
    const auto target_a = detail::soft_targets(ua, n, feat, cfg);

    const auto s_ab = detail::gram(ua, ub, n, feat, inv_tau);
    const auto s_ba = detail::gram(ub, ua, n, feat, inv_tau);
    const auto p_ab = detail::softmax_rows(s_ab, n);
    const auto p_ba = detail::softmax_rows(s_ba, n);

    auto cross_entropy = [n](const std::vector<T>& logits, const std::vector<T>& target) {
        T total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                mx = std::max(mx, logits[i * n + j]);
            }
            T z = 0;
            for (std::size_t j = 0; j < n; ++j) {
                z += std::exp(logits[i * n + j] - mx);
            }
            const T lse = mx + std::log(z);
            for (std::size_t j = 0; j < n; ++j) {
                if (target[i * n + j] != T{0}) {
                    total -= target[i * n + j] * (logits[i * n + j] - lse);
                }
            }
        }
        return total / static_cast<T>(n);
    };
    const T loss = T{0.5} * (cross_entropy(s_ab, target_b) + cross_entropy(s_ba, target_a));

    // dL/dS_ab[i][j] = 0.5/n * ((P_ab - T_b)[i][j] + (P_ba - T_a)[j][i])
    const T half_inv_n = T{0.5} / static_cast<T>(n);
    std::vector<T> ds(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            ds[i * n + j] = half_inv_n * ((p_ab[i * n + j] - target_b[i * n + j]) + (p_ba[j * n + i] - target_a[j * n + i]));
        }
    }
    // Gradient w.r.t. the unit rows, first through the cross-modal logits.
    std::vector<T> dua(n * feat, T{0}), dub(n * feat, T{0});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const T w = ds[i * n + j] * inv_tau;
            for (std::size_t c = 0; c < feat; ++c) {
                dua[i * feat + c] += w * ub[j * feat + c];
                dub[j * feat + c] += w * ua[i * feat + c];
            }
        }
    }
    // Then through the soft targets: T = mix * softmax(U U^T / tau) + const.
    if (!cfg.hard_mode && cfg.soft_target_mix != 0.0) {
        const T mix = static_cast<T>(cfg.soft_target_mix);
        auto through_target = [&](const std::vector<T>& u, const std::vector<T>& logits, std::vector<T>& du) {
            const auto q = detail::softmax_rows(detail::gram(u, u, n, feat, inv_tau), n);
            const auto logp = detail::softmax_rows(logits, n);
            std::vector<T> dg(n * n);
            for (std::size_t i = 0; i < n; ++i) {
                T inner = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    const T dq = -half_inv_n * mix * std::log(logp[i * n + j]);
                    dg[i * n + j] = dq;
                    inner += dq * q[i * n + j];
                }
                for (std::size_t j = 0; j < n; ++j) {
                    dg[i * n + j] = q[i * n + j] * (dg[i * n + j] - inner);
                }
            }
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const T w = (dg[i * n + j] + dg[j * n + i]) * inv_tau;
                    for (std::size_t c = 0; c < feat; ++c) {
                        du[i * feat + c] += w * u[j * feat + c];
                    }
                }
            }
        };
        through_target(ub, s_ab, dub);
        through_target(ua, s_ba, dua);
    }

    return tape.record(
        "softclip_loss", BasicDenseArray<T>({1}, {loss}), {a, b},
        [a, b, n, tokens, feat, dua = std::move(dua), dub = std::move(dub), ua = std::move(ua), ub = std::move(ub),
         na = std::move(na), nb = std::move(nb)](Tape<T>& t, const BasicDenseArray<T>& g) {
            // Back through the normalization, then the pooling.
            auto push = [&](Var x, const std::vector<T>& self, const std::vector<T>& du, const std::vector<T>& norms) {
                if (!t.requires_grad(x)) {
                    return;
                }
                auto& gx = t.grad(x);
                for (std::size_t i = 0; i < n; ++i) {
                    T proj = 0;
                    for (std::size_t c = 0; c < feat; ++c) {
                        proj += self[i * feat + c] * du[i * feat + c];
                    }
                    const T inv = g[0] / (norms[i] * static_cast<T>(tokens));
                    for (std::size_t c = 0; c < feat; ++c) {
                        const T dv = (du[i * feat + c] - self[i * feat + c] * proj) * inv;
                        for (std::size_t j = 0; j < tokens; ++j) {
                            gx[(i * tokens + j) * feat + c] += dv;
                        }
                    }
                }
            };
            push(a, ua, dua, na);
            push(b, ub, dub, nb);
        });
}

/// Cycle-consistency loss: the contrastive loss applied to re-encoded latents.
template <class T>
Var cycle_loss(Tape<T>& tape, Var reencoded, Var visual, const SoftClipConfig& cfg) {
    return softclip_loss(tape, reencoded, visual, cfg);
}

}  // namespace ops

// Value-only conveniences over plain arrays.

template <class T>
T mse_loss(const BasicDenseArray<T>& prediction, const BasicDenseArray<T>& target) {
    Tape<T> tape;
    return tape.value(ops::mse_loss(tape, tape.constant(prediction), tape.constant(target)))[0];
}

template <class T>
T fm_loss(const BasicDenseArray<T>& predicted_field, const BasicDenseArray<T>& target_field) {
    return mse_loss(predicted_field, target_field);
}

template <class T>
T kl_divergence(const BasicDenseArray<T>& mu, const BasicDenseArray<T>& logvar) {
    Tape<T> tape;
    return tape.value(ops::kl_divergence(tape, tape.constant(mu), tape.constant(logvar)))[0];
}

template <class T>
T softclip_loss(const BasicDenseArray<T>& a, const BasicDenseArray<T>& b, const SoftClipConfig& cfg) {
    Tape<T> tape;
    return tape.value(ops::softclip_loss(tape, tape.constant(a), tape.constant(b), cfg))[0];
}

template <class T>
T cycle_loss(const BasicDenseArray<T>& reencoded, const BasicDenseArray<T>& visual, const SoftClipConfig& cfg) {
    return softclip_loss(reencoded, visual, cfg);
}

}  // namespace xflow
