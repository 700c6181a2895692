#pragma once

#include <cstdint>
#include <functional>
#include <optional>
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

/// Desk-scale variational backbone.
///
/// Encoder: lift 1 -> c channels, MLP n -> h -> 4d, two resampling down blocks
/// (4d -> 2d -> d, c -> m -> m tokens), then a token mix m -> 2m split into mu and
/// logvar. Decoder mirrors it from the compact latent z_c [B, 1, d].
struct VaeConfig {
    std::size_t signal_dim = 128;   // n
    std::size_t tokens = 8;         // m
    std::size_t latent_dim = 32;    // d
    std::size_t lift_channels = 4;  // c
    std::size_t mlp_hidden = 128;   // h
    std::size_t epochs = 50;
    std::size_t batch_size = 64;
    bool use_compact = true;   // false: decoder reads mean-pooled z_n (no z_c)
    double latent_pull = 0.0;  // weight of MSE(mu, z_v), the direct-pull baseline

    [[nodiscard]] std::size_t wide() const { return 4 * latent_dim; }

    void validate() const {
        if (signal_dim == 0 || tokens == 0 || latent_dim == 0 || lift_channels == 0 || mlp_hidden == 0) {
            throw std::invalid_argument("VaeConfig: all dimensions must be positive");
        }
        if (epochs == 0 || batch_size < 2) {
            throw std::invalid_argument("VaeConfig: epochs > 0 and batch_size >= 2 required");
        }
        if (!(latent_pull >= 0.0)) {
            throw std::invalid_argument("VaeConfig: latent_pull must be non-negative");
        }
    }
};

/// q(z_n | x): mean and clamped log-variance, both [batch, m, d].
struct PosteriorParams {
    DenseArray mu;
    DenseArray logvar;
};

/// Token-aggregated latent [batch, 1, d].
struct CompactLatent {
    DenseArray z_c;
};

struct VaeBlocks {
    BlockSpec lift, mlp, down1, down2, head;
    BlockSpec pre;
    BlockSpec post, up1, up2, dec_mlp, out;

    explicit VaeBlocks(const VaeConfig& c)
        : lift(BlockSpec::token_mix("enc.lift", 1, c.lift_channels)),
          mlp(BlockSpec::mlp("enc.mlp", c.signal_dim, c.mlp_hidden, c.wide())),
          down1(BlockSpec::resample("enc.down1", c.wide(), 2 * c.latent_dim, c.lift_channels, c.tokens)),
          down2(BlockSpec::resample("enc.down2", 2 * c.latent_dim, c.latent_dim, c.tokens, c.tokens)),
          head(BlockSpec::token_mix("enc.head", c.tokens, 2 * c.tokens)),
          pre(BlockSpec::token_mix("compact", c.tokens, 1)),
          post(BlockSpec::token_mix("dec.post", 1, c.tokens)),
          up1(BlockSpec::resample("dec.up1", c.latent_dim, 2 * c.latent_dim, c.tokens, c.tokens)),
          up2(BlockSpec::resample("dec.up2", 2 * c.latent_dim, c.wide(), c.tokens, c.lift_channels)),
          dec_mlp(BlockSpec::mlp("dec.mlp", c.wide(), c.mlp_hidden, c.signal_dim)),
          out(BlockSpec::token_mix("dec.out", c.lift_channels, 1)) {}
};

/// Creates every backbone parameter. The compact projection exists only when
/// `use_compact` is set.
template <class T>
void init_vae(BasicParamStore<T>& params, const VaeConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, 0x7661ULL));
    const VaeBlocks b(cfg);
    for (const BlockSpec* s : {&b.lift, &b.mlp, &b.down1, &b.down2, &b.head}) {
        init_block(params, *s, rng);
    }
    if (cfg.use_compact) {
        init_block(params, b.pre, rng);
    }
    for (const BlockSpec* s : {&b.post, &b.up1, &b.up2, &b.dec_mlp, &b.out}) {
        init_block(params, *s, rng);
    }
}

namespace vae {

template <class T>
struct PosteriorVars {
    Var mu;
    Var logvar;
};

/// signal [B, n] -> (mu, logvar) [B, m, d] on the tape.
template <class T>
PosteriorVars<T> encode(Tape<T>& tape, Var signal, const VaeConfig& cfg) {
    const Shape& s = tape.shape(signal);
    if (s.size() != 2 || s[1] != cfg.signal_dim) {
        throw ShapeError("encode_posterior: signal " + shape_string(s) + " does not match width " +
                         std::to_string(cfg.signal_dim));
    }
    const VaeBlocks b(cfg);
    Var x = ops::reshape(tape, signal, {s[0], 1, cfg.signal_dim});
    x = forward_block(tape, x, b.lift);
    x = forward_block(tape, x, b.mlp);
    x = forward_block(tape, x, b.down1);
    x = forward_block(tape, x, b.down2);
    x = forward_block(tape, x, b.head);
    Var mu = ops::slice_tokens(tape, x, 0, cfg.tokens);
    Var lv = ops::slice_tokens(tape, x, cfg.tokens, cfg.tokens);
    lv = ops::clamp(tape, lv, static_cast<T>(kLogvarMin), static_cast<T>(kLogvarMax));
    return {mu, lv};
}

/// z = mu + exp(logvar / 2) * eps.
template <class T>
Var sample(Tape<T>& tape, Var mu, Var logvar, const BasicDenseArray<T>& eps) {
    Var sd = ops::exp(tape, ops::scale(tape, logvar, T{0.5}));
    return ops::add(tape, mu, ops::mul(tape, sd, tape.constant(eps)));
}

/// z_n [B, m, d] -> decoder input [B, 1, d]: learned token aggregation, or the
/// token mean when the compact projection is disabled.
template <class T>
Var compact(Tape<T>& tape, Var z_n, const VaeConfig& cfg) {
    const Shape& s = tape.shape(z_n);
    if (s.size() != 3 || s[1] != cfg.tokens || s[2] != cfg.latent_dim) {
        throw ShapeError("compact_project: latent " + shape_string(s) + " does not match [batch, " +
                         std::to_string(cfg.tokens) + ", " + std::to_string(cfg.latent_dim) + "]");
    }
    if (!cfg.use_compact) {
        return ops::mean_tokens(tape, z_n);
    }
    return forward_block(tape, z_n, VaeBlocks(cfg).pre);
}

/// z_c [B, 1, d] -> reconstruction [B, n].
template <class T>
Var decode(Tape<T>& tape, Var z_c, const VaeConfig& cfg) {
    const Shape& s = tape.shape(z_c);
    if (s.size() != 3 || s[1] != 1 || s[2] != cfg.latent_dim) {
        throw ShapeError("decode_signal: compact latent " + shape_string(s) + " does not match [batch, 1, " +
                         std::to_string(cfg.latent_dim) + "]");
    }
    const VaeBlocks b(cfg);
    Var x = forward_block(tape, z_c, b.post);
    x = forward_block(tape, x, b.up1);
    x = forward_block(tape, x, b.up2);
    x = forward_block(tape, x, b.dec_mlp);
    x = forward_block(tape, x, b.out);
    return ops::reshape(tape, x, {s[0], cfg.signal_dim});
}

template <class T>
BasicDenseArray<T> standard_normal(const Shape& shape, Rng& rng) {
    BasicDenseArray<T> e(shape);
    for (auto& v : e.data()) {
        v = static_cast<T>(rng.normal());
    }
    return e;
}

}  // namespace vae

// ---- inference on a frozen parameter snapshot ------------------------------

inline PosteriorParams encode_posterior(const DenseArray& signal, const ParamStore& params, const VaeConfig& cfg) {
    Tape<float> tape(params, frozen);
    auto p = vae::encode(tape, tape.constant(signal), cfg);
    return {tape.value(p.mu), tape.value(p.logvar)};
}

/// Reparameterized draw with noise from `seed`.
inline DenseArray sample_latent(const PosteriorParams& posterior, std::uint64_t seed) {
    require_shape("sample_latent", posterior.logvar.shape(), posterior.mu.shape());
    Rng rng(seed);
    Tape<float> tape;
    const auto eps = vae::standard_normal<float>(posterior.mu.shape(), rng);
    return tape.value(vae::sample(tape, tape.constant(posterior.mu), tape.constant(posterior.logvar), eps));
}

inline CompactLatent compact_project(const DenseArray& z_n, const ParamStore& params, const VaeConfig& cfg) {
    Tape<float> tape(params, frozen);
    return {tape.value(vae::compact(tape, tape.constant(z_n), cfg))};
}

inline DenseArray decode_signal(const CompactLatent& z_c, const ParamStore& params, const VaeConfig& cfg) {
    Tape<float> tape(params, frozen);
    return tape.value(vae::decode(tape, tape.constant(z_c.z_c), cfg));
}

/// Synthetic signal for token latents: decode(compact(z_n)).
inline DenseArray synthesize_signal(const DenseArray& z_n, const ParamStore& params, const VaeConfig& cfg) {
    return decode_signal(compact_project(z_n, params, cfg), params, cfg);
}

// ---- training ----------------------------------------------------------------

struct VaeStepReport {
    double mse = 0.0;
    double kl = 0.0;
    double clip = 0.0;
    double cyc = 0.0;
    double pull = 0.0;  // only weighted when VaeConfig::latent_pull > 0
    double total = 0.0;
};

struct VaeTrainSettings {
    VaeLossWeights weights;
    SoftClipConfig clip;
    OptimizerConfig optimizer;
};

/// One optimizer step on a paired batch: signal [B, n], visual latents [B, m, d].
///
/// encode -> sample -> compact -> decode, re-encode the reconstruction with the
/// same encoder and sample again, then mse + a*kl + b*clip(z_n, z_v) + l*cyc(z_n', z_v).
inline VaeStepReport vae_train_step(const DenseArray& signal, const DenseArray& visual, ParamStore& params,
                                    const VaeConfig& cfg, const VaeTrainSettings& settings, std::uint64_t noise_seed) {
    cfg.validate();
    settings.weights.validate();
    if (signal.rank() != 2 || signal.dim(0) < 2) {
        throw std::invalid_argument("vae_train_step: batch of at least 2 signals required, got " +
                                    shape_string(signal.shape()));
    }
    require_shape("vae_train_step visual", visual.shape(), {signal.dim(0), cfg.tokens, cfg.latent_dim});
    const Shape latent_shape = visual.shape();
    Rng rng(noise_seed);
    const auto eps = vae::standard_normal<float>(latent_shape, rng);
    const auto eps_cycle = vae::standard_normal<float>(latent_shape, rng);

    Tape<float> tape(params);
    Var x = tape.constant(signal);
    Var zv = tape.constant(visual);
    auto post = vae::encode(tape, x, cfg);
    Var z = vae::sample(tape, post.mu, post.logvar, eps);
    Var recon = vae::decode(tape, vae::compact(tape, z, cfg), cfg);
    auto cycle = vae::encode(tape, recon, cfg);
    Var z_cycle = vae::sample(tape, cycle.mu, cycle.logvar, eps_cycle);

    Var l_mse = ops::mse_loss(tape, recon, x);
    Var l_kl = ops::kl_divergence(tape, post.mu, post.logvar);
    Var l_clip = ops::softclip_loss(tape, z, zv, settings.clip);
    Var l_cyc = ops::cycle_loss(tape, z_cycle, zv, settings.clip);
    std::vector<Var> terms{l_mse, l_kl, l_clip, l_cyc};
    std::vector<float> w{1.0f, static_cast<float>(settings.weights.alpha_kl),
                         static_cast<float>(settings.weights.beta_clip), static_cast<float>(settings.weights.lambda_cyc)};
    Var l_pull = ops::mse_loss(tape, post.mu, zv);
    if (cfg.latent_pull > 0.0) {
        terms.push_back(l_pull);
        w.push_back(static_cast<float>(cfg.latent_pull));
    }
    Var total = ops::weighted_sum(tape, terms, w);

    VaeStepReport report;
    report.mse = tape.value(l_mse)[0];
    report.kl = tape.value(l_kl)[0];
    report.clip = tape.value(l_clip)[0];
    report.cyc = tape.value(l_cyc)[0];
    report.pull = tape.value(l_pull)[0];
    report.total = vae_composite_loss({report.mse, report.kl, report.clip, report.cyc}, settings.weights) +
                   cfg.latent_pull * report.pull;
    tape.backward(total);
    adamw_step(params, settings.optimizer);
    return report;
}

/// Per-epoch mean of the step reports.
struct VaeEpochLog {
    std::size_t epoch = 0;
    VaeStepReport mean;
};

/// Trains on N paired rows (signal [N, n], visual [N, m, d]) for cfg.epochs
/// epochs of shuffled mini-batches; a trailing batch smaller than 2 is dropped.
inline std::vector<VaeEpochLog> train_vae(const DenseArray& signals, const DenseArray& visuals, ParamStore& params,
                                          const VaeConfig& cfg, const VaeTrainSettings& settings, std::uint64_t seed,
                                          const std::function<void(const VaeEpochLog&)>& on_epoch = {}) {
    cfg.validate();
    if (signals.rank() != 2 || visuals.rank() != 3 || signals.dim(0) != visuals.dim(0)) {
        throw ShapeError("train_vae: signals " + shape_string(signals.shape()) + " and visuals " +
                         shape_string(visuals.shape()) + " must pair row for row");
    }
    const std::size_t n = signals.dim(0);
    Rng order(derive_seed(seed, 0x6f7264ULL));
    std::vector<VaeEpochLog> logs;
    std::uint64_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto perm = order.permutation(n);
        VaeEpochLog log{epoch, {}};
        std::size_t batches = 0;
        for (std::size_t start = 0; start + 2 <= n; start += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, n - start);
            if (count < 2) {
                break;
            }
            const std::span<const std::size_t> idx(perm.data() + start, count);
            const auto r = vae_train_step(gather_rows(signals, idx), gather_rows(visuals, idx), params, cfg, settings,
                                          derive_seed(seed, 0x100000ULL + step++));
            log.mean.mse += r.mse;
            log.mean.kl += r.kl;
            log.mean.clip += r.clip;
            log.mean.cyc += r.cyc;
            log.mean.pull += r.pull;
            log.mean.total += r.total;
            ++batches;
        }
        const double inv = batches > 0 ? 1.0 / static_cast<double>(batches) : 0.0;
        for (double* v : {&log.mean.mse, &log.mean.kl, &log.mean.clip, &log.mean.cyc, &log.mean.pull, &log.mean.total}) {
            *v *= inv;
        }
        logs.push_back(log);
        if (on_epoch) {
            on_epoch(log);
        }
    }
    return logs;
}

}  // namespace xflow
