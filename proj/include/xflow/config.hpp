#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "xflow/flowsolver.hpp"
#include "xflow/metrics.hpp"
#include "xflow/neurovae.hpp"
#include "xflow/synthdata.hpp"
#include "xflow/xfm.hpp"

namespace xflow {

inline constexpr const char* kVersion = "0.1.0";

/// Bad config text or value; `line` is 0 for overrides given outside a file.
class ConfigError : public std::runtime_error {
public:
    ConfigError(const std::string& msg, std::size_t line = 0)
        : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg), line_(line) {}
    [[nodiscard]] std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// All settings of a run. Field tokens/dim follow the VAE latent shape.
struct RunConfig {
    std::string dataset = "data/corpus";  // stem of <stem>.train.xfld / <stem>.test.xfld
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    GeneratorSpec data;
    VaeConfig vae;
    VaeTrainSettings vae_train;
    FieldConfig field;
    XfmConfig xfm;
    OptimizerConfig xfm_optimizer = xfm_optimizer_defaults();
    SolveSpec solve;
    RetrievalOptions retrieval;

    [[nodiscard]] std::string train_path() const { return dataset + ".train.xfld"; }
    [[nodiscard]] std::string test_path() const { return dataset + ".test.xfld"; }

    /// Copies the shared latent shape into the dependent sections and validates.
    void finalize() {
        vae.signal_dim = data.signal_dim;
        vae.tokens = data.tokens;
        vae.latent_dim = data.latent_dim;
        field.tokens = data.tokens;
        field.dim = data.latent_dim;
        data.validate();
        vae.validate();
        vae_train.weights.validate();
        vae_train.clip.validate();
        vae_train.optimizer.validate();
        field.validate();
        xfm.validate();
        xfm_optimizer.validate();
        solve.validate();
    }

    [[nodiscard]] PipelineSettings pipeline() const {
        PipelineSettings p;
        p.vae = vae;
        p.vae_train = vae_train;
        p.field = field;
        p.xfm = xfm;
        p.xfm_optimizer = xfm_optimizer;
        p.flow_steps = solve.steps;
        p.retrieval = retrieval;
        p.seed = seed;
        return p;
    }

    [[nodiscard]] AblationBudget budget() const { return {vae.epochs, xfm.train_steps, solve.steps}; }
};

namespace detail {

template <class V>
V parse_number(const std::string& key, const std::string& text) {
    V v{};
    const char* end = text.data() + text.size();
    const auto [p, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || p != end) {
        throw ConfigError("'" + key + "': cannot parse '" + text + "'");
    }
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("'" + key + "': expected true or false, got '" + text + "'");
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

/// One settable key: its documentation, a formatter and a parser.
struct ConfigKey {
    std::string key;
    std::string doc;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

namespace detail {

template <class V, class Ref>
ConfigKey bind(std::string key, std::string doc, Ref ref) {
    ConfigKey k;
    k.key = key;
    k.doc = std::move(doc);
    k.get = [ref](const RunConfig& c) {
        const V& v = ref(const_cast<RunConfig&>(c));
        if constexpr (std::is_same_v<V, bool>) {
            return std::string(v ? "true" : "false");
        } else if constexpr (std::is_same_v<V, double>) {
            return format_double(v);
        } else if constexpr (std::is_same_v<V, std::string>) {
            return v;
        } else if constexpr (std::is_same_v<V, Schedule>) {
            return schedule_name(v);
        } else {
            return std::to_string(v);
        }
    };
    k.set = [ref, key](RunConfig& c, const std::string& text) {
        V& v = ref(c);
        if constexpr (std::is_same_v<V, bool>) {
            v = parse_bool(key, text);
        } else if constexpr (std::is_same_v<V, std::string>) {
            v = text;
        } else if constexpr (std::is_same_v<V, Schedule>) {
            try {
                v = parse_schedule(text);
            } catch (const std::exception& e) {
                throw ConfigError("'" + key + "': " + e.what());
            }
        } else {
            v = parse_number<V>(key, text);
        }
    };
    return k;
}

}  // namespace detail

/// Every key accepted in config files and overrides, in canonical order.
inline const std::vector<ConfigKey>& config_keys() {
    using detail::bind;
    using C = RunConfig;
    using sz = std::size_t;
    using u64 = std::uint64_t;
    static const std::vector<ConfigKey> keys{
        bind<std::string>("run.dataset", "dataset file stem", [](C& c) -> auto& { return c.dataset; }),
        bind<std::string>("run.out", "output directory", [](C& c) -> auto& { return c.out_dir; }),
        bind<u64>("run.seed", "seed for initialization, batching and noise", [](C& c) -> auto& { return c.seed; }),

        bind<sz>("data.num_train", "train stimuli", [](C& c) -> auto& { return c.data.num_train; }),
        bind<sz>("data.num_test", "test stimuli", [](C& c) -> auto& { return c.data.num_test; }),
        bind<sz>("data.trials", "signal trials per stimulus", [](C& c) -> auto& { return c.data.trials; }),
        bind<sz>("data.tokens", "latent tokens m", [](C& c) -> auto& { return c.data.tokens; }),
        bind<sz>("data.latent_dim", "latent width d", [](C& c) -> auto& { return c.data.latent_dim; }),
        bind<sz>("data.signal_dim", "signal width n", [](C& c) -> auto& { return c.data.signal_dim; }),
        bind<sz>("data.clusters", "mixture components", [](C& c) -> auto& { return c.data.clusters; }),
        bind<double>("data.cluster_spread", "within-cluster std", [](C& c) -> auto& { return c.data.cluster_spread; }),
        bind<sz>("data.latent_rank", "rank of within-cluster covariance (0 = full)",
                 [](C& c) -> auto& { return c.data.latent_rank; }),
        bind<double>("data.noise_scale", "trial noise scale", [](C& c) -> auto& { return c.data.noise_scale; }),
        bind<double>("data.nonlinearity", "strength of the tanh term", [](C& c) -> auto& { return c.data.nonlinearity; }),
        bind<u64>("data.seed", "generator seed", [](C& c) -> auto& { return c.data.seed; }),

        bind<sz>("vae.lift_channels", "encoder lift channels c", [](C& c) -> auto& { return c.vae.lift_channels; }),
        bind<sz>("vae.mlp_hidden", "MLP hidden width h", [](C& c) -> auto& { return c.vae.mlp_hidden; }),
        bind<sz>("vae.epochs", "stage-1 epochs", [](C& c) -> auto& { return c.vae.epochs; }),
        bind<sz>("vae.batch_size", "stage-1 batch size", [](C& c) -> auto& { return c.vae.batch_size; }),
        bind<bool>("vae.use_compact", "decode from the compact latent z_c", [](C& c) -> auto& { return c.vae.use_compact; }),
        bind<double>("vae.latent_pull", "weight of MSE(mu, z_v)", [](C& c) -> auto& { return c.vae.latent_pull; }),
        bind<double>("vae.alpha_kl", "KL weight", [](C& c) -> auto& { return c.vae_train.weights.alpha_kl; }),
        bind<double>("vae.beta_clip", "SoftCLIP weight", [](C& c) -> auto& { return c.vae_train.weights.beta_clip; }),
        bind<double>("vae.lambda_cyc", "cycle weight", [](C& c) -> auto& { return c.vae_train.weights.lambda_cyc; }),
        bind<double>("vae.clip_temperature", "SoftCLIP temperature",
                     [](C& c) -> auto& { return c.vae_train.clip.temperature; }),
        bind<double>("vae.clip_soft_mix", "SoftCLIP soft target mix",
                     [](C& c) -> auto& { return c.vae_train.clip.soft_target_mix; }),
        bind<bool>("vae.clip_hard", "plain InfoNCE targets", [](C& c) -> auto& { return c.vae_train.clip.hard_mode; }),
        bind<double>("vae.lr", "stage-1 learning rate", [](C& c) -> auto& { return c.vae_train.optimizer.learning_rate; }),
        bind<double>("vae.beta1", "stage-1 AdamW beta1", [](C& c) -> auto& { return c.vae_train.optimizer.beta1; }),
        bind<double>("vae.beta2", "stage-1 AdamW beta2", [](C& c) -> auto& { return c.vae_train.optimizer.beta2; }),
        bind<double>("vae.weight_decay", "stage-1 decoupled weight decay",
                     [](C& c) -> auto& { return c.vae_train.optimizer.weight_decay; }),
        bind<double>("vae.epsilon", "stage-1 AdamW epsilon", [](C& c) -> auto& { return c.vae_train.optimizer.epsilon; }),

        bind<sz>("field.width", "field network width", [](C& c) -> auto& { return c.field.width; }),
        bind<sz>("field.depth", "transformer blocks", [](C& c) -> auto& { return c.field.depth; }),
        bind<sz>("field.heads", "attention heads", [](C& c) -> auto& { return c.field.heads; }),
        bind<sz>("field.time_embed", "sinusoidal time features", [](C& c) -> auto& { return c.field.time_embed; }),
        bind<sz>("field.mlp_ratio", "MLP expansion", [](C& c) -> auto& { return c.field.mlp_ratio; }),

        bind<Schedule>("xfm.schedule", "interpolant: linear or cosine", [](C& c) -> auto& { return c.xfm.schedule; }),
        bind<sz>("xfm.train_steps", "stage-2 steps", [](C& c) -> auto& { return c.xfm.train_steps; }),
        bind<sz>("xfm.batch_size", "stage-2 batch size", [](C& c) -> auto& { return c.xfm.batch_size; }),
        bind<bool>("xfm.sample_posterior", "draw z_n from the posterior (else its mean)",
                   [](C& c) -> auto& { return c.xfm.sample_posterior; }),
        bind<bool>("xfm.trial_averaged", "pair z_v with trial-averaged signals",
                   [](C& c) -> auto& { return c.xfm.trial_averaged; }),
        bind<bool>("xfm.lr_decay", "cosine learning-rate decay", [](C& c) -> auto& { return c.xfm.lr_decay; }),
        bind<double>("xfm.lr", "stage-2 learning rate", [](C& c) -> auto& { return c.xfm_optimizer.learning_rate; }),
        bind<double>("xfm.beta1", "stage-2 AdamW beta1", [](C& c) -> auto& { return c.xfm_optimizer.beta1; }),
        bind<double>("xfm.beta2", "stage-2 AdamW beta2", [](C& c) -> auto& { return c.xfm_optimizer.beta2; }),
        bind<double>("xfm.weight_decay", "stage-2 decoupled weight decay",
                     [](C& c) -> auto& { return c.xfm_optimizer.weight_decay; }),
        bind<double>("xfm.epsilon", "stage-2 AdamW epsilon", [](C& c) -> auto& { return c.xfm_optimizer.epsilon; }),

        bind<sz>("solve.steps", "Euler steps", [](C& c) -> auto& { return c.solve.steps; }),

        bind<sz>("eval.repeats", "retrieval repeats", [](C& c) -> auto& { return c.retrieval.repeats; }),
        bind<sz>("eval.candidate_pool", "retrieval pool size", [](C& c) -> auto& { return c.retrieval.candidate_pool; }),
        bind<u64>("eval.seed", "retrieval pool seed", [](C& c) -> auto& { return c.retrieval.seed; }),
    };
    return keys;
}

inline const ConfigKey& config_key(const std::string& key, std::size_t line = 0) {
    for (const auto& k : config_keys()) {
        if (k.key == key) return k;
    }
    throw ConfigError("unknown key '" + key + "'", line);
}

/// Applies one `key = value` (or `key=value`) assignment.
inline void apply_assignment(RunConfig& cfg, const std::string& text, std::size_t line = 0) {
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("expected 'key = value', got '" + text + "'", line);
    }
    const std::string key = detail::trim(text.substr(0, eq));
    const std::string value = detail::trim(text.substr(eq + 1));
    if (value.empty()) {
        throw ConfigError("'" + key + "': empty value", line);
    }
    try {
        config_key(key, line).set(cfg, value);
    } catch (const ConfigError& e) {
        if (e.line() > 0 || line == 0) throw;
        throw ConfigError(e.what(), line);
    }
}

/// Flat text: one assignment per line, '#' starts a comment. Unknown keys and
/// malformed values are errors. Starts from `base`.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
    std::istringstream in(text);
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        const auto hash = raw.find('#');
        const std::string body = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (!body.empty()) {
            apply_assignment(base, body, line);
        }
    }
    return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config '" + path + "'");
    }
    std::ostringstream os;
    os << in.rdbuf();
    return parse_config(os.str(), std::move(base));
}

/// Canonical text: every key in table order, so parse_config(dump_config(c)) == c.
inline std::string dump_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& k : config_keys()) {
        out += k.key + " = " + k.get(cfg) + "\n";
    }
    return out;
}

inline nlohmann::json config_json(const RunConfig& cfg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& k : config_keys()) {
        j[k.key] = k.get(cfg);
    }
    return j;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// FNV-1a of the canonical dump, as 16 hex digits.
inline std::string config_hash(const RunConfig& cfg) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << fnv1a(dump_config(cfg));
    return os.str();
}

}  // namespace xflow
