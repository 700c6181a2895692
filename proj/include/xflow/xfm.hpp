#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "xflow/numcore/array.hpp"
#include "xflow/numcore/blocks.hpp"
#include "xflow/numcore/ops.hpp"
#include "xflow/numcore/params.hpp"
#include "xflow/numcore/rng.hpp"
#include "xflow/numcore/tape.hpp"
#include "xflow/objectives.hpp"

namespace xflow {

// ---- schedules -----------------------------------------------------------------

enum class Schedule { linear, cosine };

inline std::string schedule_name(Schedule s) { return s == Schedule::linear ? "linear" : "cosine"; }

inline Schedule parse_schedule(const std::string& s) {
    if (s == "linear") return Schedule::linear;
    if (s == "cosine") return Schedule::cosine;
    throw std::invalid_argument("unknown schedule '" + s + "' (expected linear or cosine)");
}

struct ScheduleValues {
    double alpha = 0.0;
    double sigma = 0.0;
    double dalpha_dt = 0.0;
    double dsigma_dt = 0.0;
};

/// Path z_t = alpha_t z0 + sigma_t z1 with alpha_0 = sigma_1 = 1.
/// cosine: alpha = cos^2(pi t / 2), sigma = sin^2(pi t / 2); linear: alpha = 1 - t, sigma = t.
inline ScheduleValues schedule_eval(Schedule s, double t) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw std::domain_error("schedule_eval: t = " + std::to_string(t) + " outside [0, 1]");
    }
    if (s == Schedule::linear) {
        return {1.0 - t, t, -1.0, 1.0};
    }
    const double c = std::cos(0.5 * std::numbers::pi * t);
    // sigma is written as 1 - alpha so that alpha + sigma = 1 holds exactly.
    const double alpha = c * c;
    const double rate = 0.5 * std::numbers::pi * std::sin(std::numbers::pi * t);
    return {alpha, 1.0 - alpha, -rate, rate};
}

namespace detail {

template <class F>
DenseArray combine(const DenseArray& z0, const DenseArray& z1, F coeffs) {
    require_shape("latent pair", z1.shape(), z0.shape());
    DenseArray out(z0.shape());
    const auto [a, b] = coeffs;
    for (std::size_t i = 0; i < z0.size(); ++i) {
        out[i] = static_cast<float>(a * z0[i] + b * z1[i]);
    }
    return out;
}

}  // namespace detail

/// alpha_t z0 + sigma_t z1 (z0 = visual, z1 = neural).
inline DenseArray interpolate_state(const DenseArray& z0, const DenseArray& z1, double t, Schedule s) {
    const auto v = schedule_eval(s, t);
    return detail::combine(z0, z1, std::pair{v.alpha, v.sigma});
}

/// Velocity of the path: alpha'_t z0 + sigma'_t z1.
inline DenseArray target_field(const DenseArray& z0, const DenseArray& z1, double t, Schedule s) {
    const auto v = schedule_eval(s, t);
    return detail::combine(z0, z1, std::pair{v.dalpha_dt, v.dsigma_dt});
}

// ---- field network -------------------------------------------------------------

/// Transformer-style v(z, t) over [tokens, dim] latents: input projection plus
/// learned positional embedding, `depth` pre-norm blocks (attention then MLP),
/// each with the projected time embedding added to its tokens, final norm and
/// projection back to `dim`.
struct FieldConfig {
    std::size_t tokens = 8;
    std::size_t dim = 32;
    std::size_t width = 32;
    std::size_t depth = 4;
    std::size_t heads = 2;
    std::size_t time_embed = 64;
    std::size_t mlp_ratio = 4;

    void validate() const {
        if (tokens == 0 || dim == 0 || width == 0 || depth == 0 || heads == 0 || mlp_ratio == 0) {
            throw std::invalid_argument("FieldConfig: all sizes must be positive");
        }
        if (width % heads != 0) {
            throw std::invalid_argument("FieldConfig: width must be divisible by heads");
        }
        if (time_embed < 2 || time_embed % 2 != 0) {
            throw std::invalid_argument("FieldConfig: time_embed must be even and >= 2");
        }
    }
};

struct XfmConfig {
    Schedule schedule = Schedule::cosine;
    std::size_t train_steps = 3000;
    std::size_t batch_size = 64;
    bool sample_posterior = true;  // false: train on posterior means
    bool trial_averaged = false;   // pair z_v with latents of trial-averaged signals
    bool lr_decay = true;          // cosine decay of the learning rate to 0 over train_steps

    void validate() const {
        if (train_steps == 0 || batch_size == 0) {
            throw std::invalid_argument("XfmConfig: train_steps and batch_size must be positive");
        }
    }
};

/// Stage-2 optimizer defaults: AdamW defaults with learning rate 1e-3.
inline OptimizerConfig xfm_optimizer_defaults() {
    OptimizerConfig o;
    o.learning_rate = 1e-3;
    return o;
}

struct FieldNetwork {
    FieldConfig config;
    ParamStore params;
};

namespace field {

struct Blocks {
    BlockSpec in, t1, t2, out_norm, out;
    std::vector<BlockSpec> time, norm1, attn, norm2, mlp;

    explicit Blocks(const FieldConfig& c)
        : in(BlockSpec::affine("field.in", c.dim, c.width)),
          t1(BlockSpec::affine("field.time1", c.time_embed, c.width)),
          t2(BlockSpec::affine("field.time2", c.width, c.width)),
          out_norm(BlockSpec::layer_norm("field.out_norm", c.width)),
          out(BlockSpec::affine("field.out", c.width, c.dim)) {
        for (std::size_t i = 0; i < c.depth; ++i) {
            const std::string p = "field.block" + std::to_string(i);
            time.push_back(BlockSpec::affine(p + ".time", c.width, c.width));
            norm1.push_back(BlockSpec::layer_norm(p + ".norm1", c.width));
            attn.push_back(BlockSpec::attention(p + ".attn", c.width, c.heads));
            norm2.push_back(BlockSpec::layer_norm(p + ".norm2", c.width));
            mlp.push_back(BlockSpec::mlp(p + ".mlp", c.width, c.mlp_ratio * c.width, c.width));
        }
    }
};

/// Sinusoidal features of t in [0, 1], scaled to a 0..1000 timestep range:
/// [cos(1000 t f_i), sin(1000 t f_i)] with f_i = 10000^(-i / half).
template <class T>
BasicDenseArray<T> time_features(std::span<const double> t, std::size_t dim) {
    const std::size_t half = dim / 2;
    BasicDenseArray<T> e({t.size(), dim});
    for (std::size_t b = 0; b < t.size(); ++b) {
        for (std::size_t i = 0; i < half; ++i) {
            const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double a = 1000.0 * t[b] * f;
            e[b * dim + i] = static_cast<T>(std::cos(a));
            e[b * dim + half + i] = static_cast<T>(std::sin(a));
        }
    }
    return e;
}

template <class T>
void init(BasicParamStore<T>& params, const FieldConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x786667ULL));
    const Blocks b(cfg);
    init_block(params, b.in, rng);
    BasicDenseArray<T> pos({1, cfg.tokens, cfg.width});
    for (auto& v : pos.data()) {
        v = static_cast<T>(0.02 * rng.normal());
    }
    params.add("field.pos", std::move(pos));
    init_block(params, b.t1, rng);
    init_block(params, b.t2, rng);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        init_block(params, b.time[i], rng);
        init_block(params, b.norm1[i], rng);
        init_block(params, b.attn[i], rng);
        init_block(params, b.norm2[i], rng);
        init_block(params, b.mlp[i], rng);
    }
    init_block(params, b.out_norm, rng);
    init_block(params, b.out, rng);
}

/// v(z, t) on the tape; `t` holds one time per batch element.
template <class T>
Var forward(Tape<T>& tape, Var z, std::span<const double> t, const FieldConfig& cfg) {
    const Shape& s = tape.shape(z);
    if (s.size() != 3 || s[1] != cfg.tokens || s[2] != cfg.dim) {
        throw ShapeError("field_forward: latent " + shape_string(s) + " does not match [batch, " +
                         std::to_string(cfg.tokens) + ", " + std::to_string(cfg.dim) + "]");
    }
    if (t.size() != s[0]) {
        throw ShapeError("field_forward: " + std::to_string(t.size()) + " times for batch " + std::to_string(s[0]));
    }
    for (double v : t) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw std::domain_error("field_forward: t = " + std::to_string(v) + " outside [0, 1]");
        }
    }
    const std::size_t batch = s[0];
    const Blocks b(cfg);
    Var temb = tape.constant(time_features<T>(t, cfg.time_embed));
    temb = forward_block(tape, temb, b.t1);
    temb = ops::silu(tape, temb);
    temb = forward_block(tape, temb, b.t2);
    Var tact = ops::silu(tape, temb);

    Var h = forward_block(tape, z, b.in);
    h = ops::add(tape, h, tape.param("field.pos"));
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        Var ti = ops::reshape(tape, forward_block(tape, tact, b.time[i]), {batch, 1, cfg.width});
        h = ops::add(tape, h, ti);
        h = ops::add(tape, h, forward_block(tape, forward_block(tape, h, b.norm1[i]), b.attn[i]));
        h = ops::add(tape, h, forward_block(tape, forward_block(tape, h, b.norm2[i]), b.mlp[i]));
    }
    return forward_block(tape, forward_block(tape, h, b.out_norm), b.out);
}

}  // namespace field

inline FieldNetwork init_field(const FieldConfig& cfg, std::uint64_t seed) {
    FieldNetwork net{cfg, {}};
    field::init(net.params, cfg, seed);
    return net;
}

/// Predicted velocity for per-element times.
inline DenseArray field_forward(const DenseArray& z, std::span<const double> t, const FieldNetwork& net) {
    Tape<float> tape(net.params, frozen);
    return tape.value(field::forward(tape, tape.constant(z), t, net.config));
}

/// Predicted velocity with one shared time.
inline DenseArray field_forward(const DenseArray& z, double t, const FieldNetwork& net) {
    const std::vector<double> ts(z.rank() > 0 ? z.dim(0) : 0, t);
    return field_forward(z, ts, net);
}

// ---- training ---------------------------------------------------------------

/// One flow-matching step on a paired batch (z_v -> z_n): draws t ~ U(0, 1) per
/// element from `seed`, regresses v(z_t, t) onto the path velocity.
inline double xfm_train_step(const DenseArray& z_v, const DenseArray& z_n, FieldNetwork& net, const XfmConfig& cfg,
                             const OptimizerConfig& opt, std::uint64_t seed) {
    cfg.validate();
    require_shape("xfm_train_step", z_n.shape(), z_v.shape());
    if (z_v.rank() != 3) {
        throw ShapeError("xfm_train_step: expected [batch, tokens, dim], got " + shape_string(z_v.shape()));
    }
    const std::size_t batch = z_v.dim(0);
    const std::size_t row = z_v.size() / std::max<std::size_t>(batch, 1);
    Rng rng(seed);
    std::vector<double> t(batch);
    DenseArray z_t(z_v.shape()), target(z_v.shape());
    for (std::size_t b = 0; b < batch; ++b) {
        t[b] = rng.uniform();
        const auto v = schedule_eval(cfg.schedule, t[b]);
        for (std::size_t i = b * row; i < (b + 1) * row; ++i) {
            z_t[i] = static_cast<float>(v.alpha * z_v[i] + v.sigma * z_n[i]);
            target[i] = static_cast<float>(v.dalpha_dt * z_v[i] + v.dsigma_dt * z_n[i]);
        }
    }
    Tape<float> tape(net.params);
    Var pred = field::forward(tape, tape.constant(z_t), t, net.config);
    Var loss = ops::fm_loss(tape, pred, tape.constant(target));
    const double value = tape.value(loss)[0];
    tape.backward(loss);
    adamw_step(net.params, opt);
    return value;
}

/// Trains on paired rows: visual [N, m, d] against the posterior (mu, logvar)
/// [N, m, d] of the neural encoder, resampling z_n every step unless
/// cfg.sample_posterior is false. Returns the per-step losses.
inline std::vector<double> train_xfm(const DenseArray& visual, const DenseArray& mu, const DenseArray& logvar,
                                     FieldNetwork& net, const XfmConfig& cfg, const OptimizerConfig& opt,
                                     std::uint64_t seed,
                                     const std::function<void(std::size_t, double)>& on_step = {}) {
    cfg.validate();
    require_shape("train_xfm mu", mu.shape(), visual.shape());
    require_shape("train_xfm logvar", logvar.shape(), visual.shape());
    const std::size_t n = visual.dim(0);
    const std::size_t batch = std::min(cfg.batch_size, n);
    if (batch == 0) {
        throw std::invalid_argument("train_xfm: empty training set");
    }
    Rng order(derive_seed(seed, 0x6f7264ULL));
    Rng noise(derive_seed(seed, 0x6e6f6973ULL));
    std::vector<std::size_t> perm = order.permutation(n);
    std::size_t cursor = 0;
    std::vector<double> losses;
    losses.reserve(cfg.train_steps);
    std::vector<std::size_t> idx(batch);
    for (std::size_t step = 0; step < cfg.train_steps; ++step) {
        for (auto& i : idx) {
            if (cursor == n) {
                perm = order.permutation(n);
                cursor = 0;
            }
            i = perm[cursor++];
        }
        DenseArray zv = gather_rows(visual, idx);
        DenseArray zn = gather_rows(mu, idx);
        if (cfg.sample_posterior) {
            const DenseArray lv = gather_rows(logvar, idx);
            for (std::size_t i = 0; i < zn.size(); ++i) {
                zn[i] += std::exp(0.5f * lv[i]) * static_cast<float>(noise.normal());
            }
        }
        OptimizerConfig step_opt = opt;
        if (cfg.lr_decay) {
            const double phase = static_cast<double>(step) / static_cast<double>(cfg.train_steps);
            step_opt.learning_rate = opt.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * phase));
        }
        const double l = xfm_train_step(zv, zn, net, cfg, step_opt, derive_seed(seed, 0x200000ULL + step));
        losses.push_back(l);
        if (on_step) {
            on_step(step, l);
        }
    }
    return losses;
}

}  // namespace xflow
