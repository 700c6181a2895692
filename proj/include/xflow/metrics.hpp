#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "xflow/flowsolver.hpp"
#include "xflow/neurovae.hpp"
#include "xflow/numcore/array.hpp"
#include "xflow/numcore/rng.hpp"
#include "xflow/synthdata.hpp"
#include "xflow/xfm.hpp"

namespace xflow {

struct RetrievalOptions {
    std::size_t repeats = 30;
    std::size_t candidate_pool = 64;
    std::uint64_t seed = 0;
};

/// Top-1 accuracy per repeat plus its mean and standard deviation.
struct RetrievalReport {
    double top1_accuracy = 0.0;  // mean over repeats
    double std_dev = 0.0;
    std::size_t candidate_count = 0;  // pool size
    std::size_t repeats = 0;
    std::vector<double> per_repeat;

    [[nodiscard]] double chance() const { return candidate_count > 0 ? 1.0 / double(candidate_count) : 0.0; }

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"top1_accuracy", top1_accuracy}, {"std", std_dev},   {"candidate_count", candidate_count},
                {"repeats", repeats},             {"chance", chance()}, {"per_repeat", per_repeat}};
    }
};

namespace detail {

/// Token-mean pooled, L2-normalized rows of [N, T, F] (or [N, F]) as doubles.
inline std::vector<double> unit_embeddings(const DenseArray& x, std::size_t& feat) {
    if (x.rank() != 2 && x.rank() != 3) {
        throw ShapeError("retrieval: expected [N, F] or [N, T, F], got " + shape_string(x.shape()));
    }
    const std::size_t n = x.dim(0);
    const std::size_t tokens = x.rank() == 3 ? x.dim(1) : 1;
    feat = x.shape().back();
    std::vector<double> u(n * feat, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < tokens; ++t) {
            for (std::size_t c = 0; c < feat; ++c) {
                u[i * feat + c] += x[(i * tokens + t) * feat + c];
            }
        }
        double ss = 0;
        for (std::size_t c = 0; c < feat; ++c) {
            ss += u[i * feat + c] * u[i * feat + c];
        }
        const double norm = std::sqrt(ss);
        for (std::size_t c = 0; c < feat; ++c) {
            u[i * feat + c] = norm > 0 ? u[i * feat + c] / norm : 0.0;
        }
    }
    return u;
}

/// Cosine matrix [Q, C] between pooled rows.
inline std::vector<double> cosine_matrix(const DenseArray& queries, const DenseArray& candidates, std::size_t& q,
                                         std::size_t& c) {
    std::size_t fq = 0, fc = 0;
    const auto uq = unit_embeddings(queries, fq);
    const auto uc = unit_embeddings(candidates, fc);
    if (fq != fc) {
        throw ShapeError("retrieval: query width " + std::to_string(fq) + " != candidate width " + std::to_string(fc));
    }
    q = queries.dim(0);
    c = candidates.dim(0);
    std::vector<double> s(q * c);
    for (std::size_t i = 0; i < q; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            double dot = 0;
            for (std::size_t f = 0; f < fq; ++f) {
                dot += uq[i * fq + f] * uc[j * fq + f];
            }
            s[i * c + j] = dot;
        }
    }
    return s;
}

inline void check_pairing(std::span<const std::size_t> pairing, std::size_t q, std::size_t c) {
    if (pairing.size() != q) {
        throw std::invalid_argument("retrieval: pairing has " + std::to_string(pairing.size()) + " entries for " +
                                    std::to_string(q) + " queries");
    }
    for (auto p : pairing) {
        if (p >= c) {
            throw std::invalid_argument("retrieval: pairing index " + std::to_string(p) + " outside candidate set");
        }
    }
}

inline std::vector<std::size_t> identity_pairing(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    return p;
}

}  // namespace detail

/// For every query and repeat, draws a pool of `candidate_pool` candidates
/// holding the true match plus distinct uniformly chosen distractors, and counts
/// the query correct when its cosine-nearest pool member is the true match.
/// Ties go to the lowest candidate index.
inline RetrievalReport top1_retrieval(const DenseArray& queries, const DenseArray& candidates,
                                      std::span<const std::size_t> pairing, const RetrievalOptions& opt) {
    std::size_t q = 0, c = 0;
    const auto sim = detail::cosine_matrix(queries, candidates, q, c);
    detail::check_pairing(pairing, q, c);
    if (opt.candidate_pool < 1 || opt.candidate_pool > c) {
        throw std::invalid_argument("top1_retrieval: pool " + std::to_string(opt.candidate_pool) +
                                    " larger than candidate set " + std::to_string(c));
    }
    if (opt.repeats < 1 || q == 0) {
        throw std::invalid_argument("top1_retrieval: need at least one repeat and one query");
    }
    Rng rng(derive_seed(opt.seed, 0x726574ULL));
    RetrievalReport report;
    report.candidate_count = opt.candidate_pool;
    report.repeats = opt.repeats;
    std::vector<std::size_t> others(c > 0 ? c - 1 : 0);
    for (std::size_t r = 0; r < opt.repeats; ++r) {
        std::size_t correct = 0;
        for (std::size_t i = 0; i < q; ++i) {
            const std::size_t truth = pairing[i];
            std::size_t best = truth;
            double best_sim = sim[i * c + truth];
            auto consider = [&](std::size_t j) {
                const double s = sim[i * c + j];
                if (s > best_sim || (s == best_sim && j < best)) {
                    best = j;
                    best_sim = s;
                }
            };
            if (opt.candidate_pool == c) {
                for (std::size_t j = 0; j < c; ++j) consider(j);
            } else {
                // Partial Fisher-Yates over the non-matching candidates.
                std::size_t k = 0;
                for (std::size_t j = 0; j < c; ++j) {
                    if (j != truth) others[k++] = j;
                }
                for (std::size_t d = 0; d + 1 < opt.candidate_pool; ++d) {
                    const std::size_t pick = d + rng.below(others.size() - d);
                    std::swap(others[d], others[pick]);
                    consider(others[d]);
                }
            }
            correct += best == truth ? 1 : 0;
        }
        report.per_repeat.push_back(static_cast<double>(correct) / static_cast<double>(q));
    }
    double mean = 0;
    for (double a : report.per_repeat) mean += a;
    mean /= static_cast<double>(report.per_repeat.size());
    double var = 0;
    for (double a : report.per_repeat) var += (a - mean) * (a - mean);
    report.top1_accuracy = mean;
    report.std_dev = report.per_repeat.size() > 1 ? std::sqrt(var / static_cast<double>(report.per_repeat.size() - 1))
                                                   : 0.0;
    return report;
}

inline RetrievalReport top1_retrieval(const DenseArray& queries, const DenseArray& candidates,
                                      const RetrievalOptions& opt) {
    const auto p = detail::identity_pairing(queries.rank() > 0 ? queries.dim(0) : 0);
    return top1_retrieval(queries, candidates, p, opt);
}

/// Fraction of queries closer (cosine) to their true candidate than to a
/// uniformly drawn distractor. `exhaustive` averages over every distractor
/// instead of drawing one.
inline double two_way_identification(const DenseArray& queries, const DenseArray& candidates,
                                     std::span<const std::size_t> pairing, std::uint64_t seed,
                                     bool exhaustive = false) {
    std::size_t q = 0, c = 0;
    const auto sim = detail::cosine_matrix(queries, candidates, q, c);
    detail::check_pairing(pairing, q, c);
    if (c < 2) {
        throw std::invalid_argument("two_way_identification: need at least 2 candidates");
    }
    if (q == 0) {
        throw std::invalid_argument("two_way_identification: no queries");
    }
    Rng rng(derive_seed(seed, 0x327761ULL));
    double hits = 0;
    for (std::size_t i = 0; i < q; ++i) {
        const std::size_t truth = pairing[i];
        const double st = sim[i * c + truth];
        if (exhaustive) {
            std::size_t wins = 0;
            for (std::size_t j = 0; j < c; ++j) {
                if (j != truth && st > sim[i * c + j]) ++wins;
            }
            hits += static_cast<double>(wins) / static_cast<double>(c - 1);
        } else {
            std::size_t j = rng.below(c - 1);
            if (j >= truth) ++j;
            hits += st > sim[i * c + j] ? 1.0 : 0.0;
        }
    }
    return hits / static_cast<double>(q);
}

inline double two_way_identification(const DenseArray& queries, const DenseArray& candidates, std::uint64_t seed,
                                     bool exhaustive = false) {
    const auto p = detail::identity_pairing(queries.rank() > 0 ? queries.dim(0) : 0);
    return two_way_identification(queries, candidates, p, seed, exhaustive);
}

// ---- round trip -----------------------------------------------------------

struct RoundtripReport {
    RetrievalReport enc_retrieval;
    RetrievalReport dec_retrieval;
    double rev_error = 0.0;
    std::size_t steps = 0;

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"enc_retrieval", enc_retrieval.to_json()},
                {"dec_retrieval", dec_retrieval.to_json()},
                {"rev_error", rev_error},
                {"steps", steps}};
    }
};

/// Neural latents of the evaluation split: posterior means of the (by default
/// trial-averaged) test signals, [N, m, d].
inline DenseArray neural_latents(const PairedDataset& data, const ParamStore& vae, const VaeConfig& cfg,
                                 bool average = true) {
    const PairedDataset src = average ? average_trials(data) : data;
    const std::size_t n = src.signals.dim(2);
    DenseArray sig = average ? src.signals.reshaped({src.size(), n}) : src.flat_trials().first;
    return encode_posterior(sig, vae, cfg).mu;
}

/// Mean over rows of ||back_r - z_r|| / ||z_r||.
inline double mean_row_relative_error(const DenseArray& z, const DenseArray& back) {
    require_shape("round trip", back.shape(), z.shape());
    const std::size_t rows = z.dim(0);
    const std::size_t row = z.size() / rows;
    double total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        double zz = 0, dd = 0;
        for (std::size_t i = r * row; i < (r + 1) * row; ++i) {
            zz += static_cast<double>(z[i]) * z[i];
            dd += (static_cast<double>(back[i]) - z[i]) * (static_cast<double>(back[i]) - z[i]);
        }
        if (zz == 0.0) {
            throw std::invalid_argument("reversibility_error: zero-norm latent in row " + std::to_string(r));
        }
        total += std::sqrt(dd / zz);
    }
    return total / static_cast<double>(rows);
}

/// Mean per-row relative round-trip error of the batch `z` through `field`.
inline double mean_row_reversibility(const DenseArray& z, const VelocityField& field, std::size_t steps) {
    const auto there = integrate(z, field, SolveSpec{Direction::encode, steps, false}).end;
    const auto back = integrate(there, field, SolveSpec{Direction::decode, steps, false}).end;
    return mean_row_relative_error(z, back);
}

/// Encoding retrieval (flow(z_v) against true z_n), decoding retrieval (reverse
/// flow(z_n) against true z_v) and mean reversibility error over test z_v.
inline RoundtripReport roundtrip_consistency(const PairedDataset& test_set, const ParamStore& vae,
                                             const VaeConfig& vae_cfg, const FieldNetwork& field, std::size_t steps,
                                             const RetrievalOptions& opt = {}) {
    for (const auto& e : field.params.entries()) {
        if (!e.value.all_finite()) {
            throw NumericError("roundtrip_consistency: field parameter '" + e.name + "' is not finite");
        }
    }
    const DenseArray z_n = neural_latents(test_set, vae, vae_cfg);
    const DenseArray& z_v = test_set.visual;
    RoundtripReport r;
    r.steps = steps;
    r.enc_retrieval = top1_retrieval(encode_latents(z_v, field, steps), z_n, opt);
    r.dec_retrieval = top1_retrieval(decode_latents(z_n, field, steps), z_v, opt);
    r.rev_error = mean_row_reversibility(z_v, network_field(field), steps);
    return r;
}

// ---- desk pipeline -------------------------------------------------------------

/// Everything needed to train and evaluate one desk model.
struct PipelineSettings {
    VaeConfig vae;
    VaeTrainSettings vae_train;  // optimizer: AdamW defaults (lr 1e-4)
    FieldConfig field;
    XfmConfig xfm;
    OptimizerConfig xfm_optimizer = xfm_optimizer_defaults();
    std::size_t flow_steps = 20;
    RetrievalOptions retrieval;
    std::uint64_t seed = 0;
};

/// Stage 1 on every (trial, stimulus) row of `train`.
inline ParamStore fit_vae(const PairedDataset& train, const VaeConfig& cfg, const VaeTrainSettings& settings,
                          std::uint64_t seed, const std::function<void(const VaeEpochLog&)>& on_epoch = {}) {
    ParamStore vae;
    init_vae(vae, cfg, derive_seed(seed, 1));
    const auto [sig, vis] = train.flat_trials();
    train_vae(sig, vis, vae, cfg, settings, derive_seed(seed, 2), on_epoch);
    for (const auto& e : vae.entries()) {
        if (!e.value.all_finite()) {
            throw NumericError("fit_vae: parameter '" + e.name + "' diverged");
        }
    }
    return vae;
}

/// Stage 2: pairs each z_v with the posterior of its signal (one per trial, or
/// of the trial average when cfg.trial_averaged) under the frozen VAE.
inline FieldNetwork fit_xfm(const PairedDataset& train, const ParamStore& vae, const VaeConfig& vae_cfg,
                            const FieldConfig& field_cfg, const XfmConfig& cfg, const OptimizerConfig& opt,
                            std::uint64_t seed, const std::function<void(std::size_t, double)>& on_step = {}) {
    const PairedDataset src = cfg.trial_averaged ? average_trials(train) : train;
    auto [sig, vis] = src.flat_trials();
    const auto post = encode_posterior(sig, vae, vae_cfg);
    FieldNetwork net = init_field(field_cfg, derive_seed(seed, 3));
    train_xfm(vis, post.mu, post.logvar, net, cfg, opt, derive_seed(seed, 4), on_step);
    return net;
}

/// Semantic fidelity of synthesized signals: z_n_hat -> decoder -> encoder
/// posterior mean, retrieved against the stimulus latents z_v.
inline RetrievalReport synthetic_retrieval(const DenseArray& z_n_hat, const DenseArray& z_v, const ParamStore& vae,
                                           const VaeConfig& cfg, const RetrievalOptions& opt) {
    const DenseArray x = synthesize_signal(z_n_hat, vae, cfg);
    return top1_retrieval(encode_posterior(x, vae, cfg).mu, z_v, opt);
}

// ---- linear baseline -------------------------------------------------------------

/// Affine least-squares map between flattened latents, y = [x, 1] W, fitted by
/// ridge-regularized normal equations.
struct RidgeMap {
    Shape out_shape;  // per-row shape of y
    Eigen::MatrixXd weights;

    [[nodiscard]] DenseArray apply(const DenseArray& x) const {
        const std::size_t rows = x.dim(0);
        const std::size_t in = x.size() / rows;
        if (static_cast<Eigen::Index>(in + 1) != weights.rows()) {
            throw ShapeError("RidgeMap: input width " + std::to_string(in) + " != fitted " +
                             std::to_string(weights.rows() - 1));
        }
        Eigen::MatrixXd X(rows, in + 1);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < in; ++c) X(r, c) = x[r * in + c];
            X(r, in) = 1.0;
        }
        const Eigen::MatrixXd Y = X * weights;
        Shape shape{rows};
        shape.insert(shape.end(), out_shape.begin(), out_shape.end());
        DenseArray y(shape);
        for (std::size_t r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < Y.cols(); ++c) y[r * Y.cols() + c] = static_cast<float>(Y(r, c));
        }
        return y;
    }
};

inline RidgeMap fit_ridge(const DenseArray& x, const DenseArray& y, double ridge = 1e-4) {
    if (x.rank() < 2 || y.rank() < 2 || x.dim(0) != y.dim(0) || x.dim(0) == 0) {
        throw ShapeError("fit_ridge: x " + shape_string(x.shape()) + " and y " + shape_string(y.shape()) +
                         " must pair row for row");
    }
    const std::size_t rows = x.dim(0), in = x.size() / rows, out = y.size() / rows;
    Eigen::MatrixXd X(rows, in + 1), Y(rows, out);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < in; ++c) X(r, c) = x[r * in + c];
        X(r, in) = 1.0;
        for (std::size_t c = 0; c < out; ++c) Y(r, c) = y[r * out + c];
    }
    Eigen::MatrixXd gram = X.transpose() * X;
    gram.diagonal().array() += ridge;
    RidgeMap map;
    map.out_shape.assign(y.shape().begin() + 1, y.shape().end());
    map.weights = gram.ldlt().solve(X.transpose() * Y);
    if (!map.weights.allFinite()) {
        throw NumericError("fit_ridge: singular normal equations");
    }
    return map;
}

// ---- ablation grid -------------------------------------------------------------

enum class Variant { full, no_zc, no_kl, no_cyc, no_clip_cyc, no_xfm, vae_mse, vae_lrs };

inline const std::vector<Variant>& all_variants() {
    static const std::vector<Variant> v{Variant::full,        Variant::no_zc,  Variant::no_kl,   Variant::no_cyc,
                                        Variant::no_clip_cyc, Variant::no_xfm, Variant::vae_mse, Variant::vae_lrs};
    return v;
}

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::full: return "full";
        case Variant::no_zc: return "no_zc";
        case Variant::no_kl: return "no_kl";
        case Variant::no_cyc: return "no_cyc";
        case Variant::no_clip_cyc: return "no_clip_cyc";
        case Variant::no_xfm: return "no_xfm";
        case Variant::vae_mse: return "vae_mse";
        case Variant::vae_lrs: return "vae_lrs";
    }
    return "unknown";
}

inline Variant parse_variant(const std::string& name) {
    for (Variant v : all_variants()) {
        if (variant_name(v) == name) return v;
    }
    throw std::invalid_argument("unknown variant '" + name + "'");
}

/// How a variant maps between the two latent spaces after stage 1.
enum class Bridge { flow, identity, ridge };

inline Bridge variant_bridge(Variant v) {
    switch (v) {
        case Variant::no_xfm:
        case Variant::vae_mse: return Bridge::identity;
        case Variant::vae_lrs: return Bridge::ridge;
        default: return Bridge::flow;
    }
}

/// Stage-1 settings of a variant: its single modification applied to `base`.
inline std::pair<VaeConfig, VaeTrainSettings> variant_stage1(Variant v, const PipelineSettings& base) {
    VaeConfig cfg = base.vae;
    VaeTrainSettings st = base.vae_train;
    switch (v) {
        case Variant::no_zc: cfg.use_compact = false; break;
        case Variant::no_kl: st.weights.alpha_kl = 0.0; break;
        case Variant::no_cyc: st.weights.lambda_cyc = 0.0; break;
        case Variant::no_clip_cyc:
            st.weights.beta_clip = 0.0;
            st.weights.lambda_cyc = 0.0;
            break;
        case Variant::vae_mse: cfg.latent_pull = 1.0; break;
        default: break;
    }
    return {cfg, st};
}

struct VariantResult {
    Variant variant = Variant::full;
    bool ok = false;
    std::string error;
    RetrievalReport raw;        // posterior means of test signals vs z_v
    RetrievalReport synthetic;  // synthesized signals from mapped z_v, re-encoded, vs z_v
    RoundtripReport roundtrip;  // enc / dec retrieval and reversibility of the bridge
    double seconds = 0.0;

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json j{{"variant", variant_name(variant)}, {"status", ok ? "ok" : "failed"}, {"seconds", seconds}};
        if (ok) {
            j["raw_retrieval"] = raw.to_json();
            j["synthetic_retrieval"] = synthetic.to_json();
            j["roundtrip"] = roundtrip.to_json();
        } else {
            j["error"] = error;
        }
        return j;
    }
};

struct AblationBudget {
    std::size_t vae_epochs = 50;
    std::size_t xfm_steps = 3000;
    std::size_t flow_steps = 20;
};

struct AblationGrid {
    AblationBudget budget;
    std::uint64_t seed = 0;
    std::vector<VariantResult> results;

    [[nodiscard]] const VariantResult& at(Variant v) const {
        for (const auto& r : results) {
            if (r.variant == v) return r;
        }
        throw std::out_of_range("AblationGrid: variant '" + variant_name(v) + "' not in grid");
    }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json vs = nlohmann::json::array();
        for (const auto& r : results) vs.push_back(r.to_json());
        return {{"seed", seed},
                {"budget",
                 {{"vae_epochs", budget.vae_epochs}, {"xfm_steps", budget.xfm_steps}, {"flow_steps", budget.flow_steps}}},
                {"variants", vs}};
    }

    /// One row per variant; empty cells for failed variants.
    [[nodiscard]] std::string to_csv() const {
        std::ostringstream os;
        os << "variant,status,raw_top1,raw_std,syn_top1,syn_std,enc_top1,dec_top1,rev_error,seconds\n";
        for (const auto& r : results) {
            os << variant_name(r.variant) << ',' << (r.ok ? "ok" : "failed") << ',';
            if (r.ok) {
                os << r.raw.top1_accuracy << ',' << r.raw.std_dev << ',' << r.synthetic.top1_accuracy << ','
                   << r.synthetic.std_dev << ',' << r.roundtrip.enc_retrieval.top1_accuracy << ','
                   << r.roundtrip.dec_retrieval.top1_accuracy << ',' << r.roundtrip.rev_error;
            } else {
                os << ",,,,,,";
            }
            os << ',' << r.seconds << '\n';
        }
        return os.str();
    }
};

/// Worker count: XFLOW_THREADS if set and positive, else the hardware concurrency.
inline std::size_t worker_threads() {
    if (const char* env = std::getenv("XFLOW_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

namespace detail {

/// Runs job(i) for i < count on up to `threads` workers.
inline void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& job) {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < count; i = next++) job(i);
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < std::min(threads, count); ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
}

}  // namespace detail

/// Evaluates a trained stage 1 plus its bridge on the test split.
inline VariantResult evaluate_variant(Variant v, const PairedDataset& train, const PairedDataset& test,
                                      const ParamStore& vae, const VaeConfig& vae_cfg, const PipelineSettings& base,
                                      std::size_t flow_steps) {
    VariantResult r;
    r.variant = v;
    const auto& opt = base.retrieval;
    const DenseArray z_n = neural_latents(test, vae, vae_cfg);
    const DenseArray& z_v = test.visual;
    r.raw = top1_retrieval(z_n, z_v, opt);
    DenseArray z_n_hat;
    switch (variant_bridge(v)) {
        case Bridge::flow: {
            const FieldNetwork net =
                fit_xfm(train, vae, vae_cfg, base.field, base.xfm, base.xfm_optimizer, base.seed);
            r.roundtrip = roundtrip_consistency(test, vae, vae_cfg, net, flow_steps, opt);
            z_n_hat = encode_latents(z_v, net, flow_steps);
            break;
        }
        case Bridge::identity: {
            r.roundtrip.steps = 0;
            r.roundtrip.enc_retrieval = top1_retrieval(z_v, z_n, opt);
            r.roundtrip.dec_retrieval = top1_retrieval(z_n, z_v, opt);
            r.roundtrip.rev_error = 0.0;
            z_n_hat = z_v;
            break;
        }
        case Bridge::ridge: {
            const DenseArray train_zn = neural_latents(train, vae, vae_cfg);
            const RidgeMap to_n = fit_ridge(train.visual, train_zn);
            const RidgeMap to_v = fit_ridge(train_zn, train.visual);
            z_n_hat = to_n.apply(z_v);
            r.roundtrip.steps = 0;
            r.roundtrip.enc_retrieval = top1_retrieval(z_n_hat, z_n, opt);
            r.roundtrip.dec_retrieval = top1_retrieval(to_v.apply(z_n), z_v, opt);
            r.roundtrip.rev_error = mean_row_relative_error(z_v, to_v.apply(z_n_hat));
            break;
        }
    }
    require_finite("mapped latents", z_n_hat);
    r.synthetic = synthetic_retrieval(z_n_hat, z_v, vae, vae_cfg, opt);
    r.ok = true;
    return r;
}

/// Trains every requested variant under one budget and seed. Variants sharing
/// stage-1 settings share one trained VAE (training is deterministic, so this
/// equals retraining). A variant that throws is recorded as failed.
inline AblationGrid run_ablation(const PairedDataset& train, const PairedDataset& test, const PipelineSettings& base,
                                 const AblationBudget& budget, const std::vector<Variant>& variants = all_variants(),
                                 std::size_t threads = worker_threads()) {
    if (variants.empty()) {
        throw std::invalid_argument("run_ablation: no variants requested");
    }
    PipelineSettings s = base;
    s.vae.epochs = budget.vae_epochs;
    s.xfm.train_steps = budget.xfm_steps;

    // Distinct stage-1 settings, keyed by their JSON form.
    auto key_of = [&](Variant v) {
        const auto [cfg, st] = variant_stage1(v, s);
        return nlohmann::json{{"compact", cfg.use_compact}, {"pull", cfg.latent_pull},
                              {"kl", st.weights.alpha_kl},  {"clip", st.weights.beta_clip},
                              {"cyc", st.weights.lambda_cyc}}
            .dump();
    };
    std::map<std::string, Variant> stage1;  // key -> representative variant
    for (Variant v : variants) stage1.emplace(key_of(v), v);
    std::vector<std::string> keys;
    for (const auto& [k, v] : stage1) keys.push_back(k);

    struct Stage1 {
        std::optional<ParamStore> vae;
        std::string error;
        double seconds = 0.0;
    };
    std::vector<Stage1> trained(keys.size());
    detail::parallel_for(keys.size(), threads, [&](std::size_t i) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto [cfg, st] = variant_stage1(stage1.at(keys[i]), s);
        try {
            trained[i].vae = fit_vae(train, cfg, st, s.seed);
        } catch (const std::exception& e) {
            trained[i].error = e.what();
        }
        trained[i].seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    });

    AblationGrid grid;
    grid.budget = budget;
    grid.seed = s.seed;
    grid.results.resize(variants.size());
    detail::parallel_for(variants.size(), threads, [&](std::size_t i) {
        const Variant v = variants[i];
        const std::size_t k = static_cast<std::size_t>(std::find(keys.begin(), keys.end(), key_of(v)) - keys.begin());
        const auto t0 = std::chrono::steady_clock::now();
        VariantResult r;
        r.variant = v;
        if (!trained[k].vae) {
            r.error = "stage 1: " + trained[k].error;
        } else {
            try {
                r = evaluate_variant(v, train, test, *trained[k].vae, variant_stage1(v, s).first, s, budget.flow_steps);
            } catch (const std::exception& e) {
                r.ok = false;
                r.error = e.what();
            }
        }
        r.seconds = trained[k].seconds + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        grid.results[i] = std::move(r);
    });
    return grid;
}

}  // namespace xflow
