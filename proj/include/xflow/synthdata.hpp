#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "xflow/io.hpp"
#include "xflow/numcore/array.hpp"
#include "xflow/numcore/rng.hpp"

namespace xflow {

/// Synthetic paired corpus: a visual latent per stimulus drawn from a Gaussian
/// mixture whose within-cluster covariance has rank `latent_rank`
///   z_v = center_c + cluster_spread * L u,  u ~ N(0, I_r),  L ~ N(0, 1/r),
/// and k noisy signal trials rendered through a fixed random map
///   lin = A vec(z_v) + b,  clean = lin + nonlinearity * tanh(M lin),
///   trial = clean + noise_scale * s_i * eps   (s_i ~ U(0.5, 1.5) per feature).
struct GeneratorSpec {
    std::size_t num_train = 512;
    std::size_t num_test = 64;
    std::size_t trials = 3;  // k
    std::size_t tokens = 8;
    std::size_t latent_dim = 32;
    std::size_t signal_dim = 128;
    std::size_t clusters = 8;
    double cluster_spread = 1.0;  // within-cluster std of z_v around its center
    std::size_t latent_rank = 32;  // 0: full-rank within-cluster noise
    double noise_scale = 0.3;     // tau
    double nonlinearity = 0.5;
    std::uint64_t seed = 0;

    void validate() const {
        if (trials < 1 || tokens == 0 || latent_dim == 0 || signal_dim == 0 || clusters == 0) {
            throw std::invalid_argument("GeneratorSpec: trials, dims and clusters must be positive");
        }
        if (!(cluster_spread > 0.0) || !(noise_scale >= 0.0) || !(nonlinearity >= 0.0)) {
            throw std::invalid_argument("GeneratorSpec: spread > 0, noise and nonlinearity >= 0 required");
        }
    }

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"num_train", num_train},       {"num_test", num_test},         {"trials", trials},
                {"tokens", tokens},             {"latent_dim", latent_dim},     {"signal_dim", signal_dim},
                {"clusters", clusters},         {"cluster_spread", cluster_spread}, {"latent_rank", latent_rank},
                {"noise_scale", noise_scale},   {"nonlinearity", nonlinearity}, {"seed", seed}};
    }

    static GeneratorSpec from_json(const nlohmann::json& j) {
        GeneratorSpec s;
        s.num_train = io::field<std::size_t>(j, "num_train");
        s.num_test = io::field<std::size_t>(j, "num_test");
        s.trials = io::field<std::size_t>(j, "trials");
        s.tokens = io::field<std::size_t>(j, "tokens");
        s.latent_dim = io::field<std::size_t>(j, "latent_dim");
        s.signal_dim = io::field<std::size_t>(j, "signal_dim");
        s.clusters = io::field<std::size_t>(j, "clusters");
        s.cluster_spread = io::field<double>(j, "cluster_spread");
        s.latent_rank = io::field<std::size_t>(j, "latent_rank");
        s.noise_scale = io::field<double>(j, "noise_scale");
        s.nonlinearity = io::field<double>(j, "nonlinearity");
        s.seed = io::field<std::uint64_t>(j, "seed");
        return s;
    }
};

enum class Split { train, test };

inline std::string split_name(Split s) { return s == Split::train ? "train" : "test"; }

/// One split of the corpus. Row i of `visual` [N, m, d] and `signals` [N, k, n]
/// belong to stimulus `ids[i]`. `feature_mean`/`feature_std` [n] are the train
/// statistics used to z-score both splits.
struct PairedDataset {
    Split split = Split::train;
    GeneratorSpec spec;
    std::vector<std::uint64_t> ids;
    DenseArray visual;
    DenseArray signals;
    DenseArray feature_mean;
    DenseArray feature_std;

    [[nodiscard]] std::size_t size() const { return ids.size(); }
    [[nodiscard]] std::size_t trials() const { return signals.rank() == 3 ? signals.dim(1) : 0; }

    /// Signal of one trial, [n].
    [[nodiscard]] DenseArray trial(std::size_t stimulus, std::size_t k) const {
        const std::size_t n = signals.dim(2);
        const auto* p = signals.raw() + (stimulus * signals.dim(1) + k) * n;
        return DenseArray({n}, std::vector<float>(p, p + n));
    }

    /// All trials flattened to [N * k, n] with visual latents repeated to [N * k, m, d].
    [[nodiscard]] std::pair<DenseArray, DenseArray> flat_trials() const {
        const std::size_t N = size(), k = trials(), n = signals.dim(2);
        const std::size_t row = visual.size() / std::max<std::size_t>(N, 1);
        DenseArray sig = signals.reshaped({N * k, n});
        DenseArray vis({N * k, visual.dim(1), visual.dim(2)});
        for (std::size_t i = 0; i < N; ++i) {
            for (std::size_t t = 0; t < k; ++t) {
                std::copy_n(visual.raw() + i * row, row, vis.raw() + (i * k + t) * row);
            }
        }
        return {std::move(sig), std::move(vis)};
    }

    bool operator==(const PairedDataset& o) const {
        return split == o.split && ids == o.ids && bit_identical(visual, o.visual) &&
               bit_identical(signals, o.signals) && bit_identical(feature_mean, o.feature_mean) &&
               bit_identical(feature_std, o.feature_std) && spec.to_json() == o.spec.to_json();
    }
};

struct GeneratedCorpus {
    PairedDataset train;
    PairedDataset test;
};

namespace detail {

inline DenseArray gaussian(const Shape& shape, Rng& rng, double scale) {
    DenseArray a(shape);
    for (auto& v : a.data()) {
        v = static_cast<float>(scale * rng.normal());
    }
    return a;
}

}  // namespace detail

/// Draws the corpus. Deterministic in spec.seed; independent RNG streams for
/// the map, the latents and the trial noise.
inline GeneratedCorpus generate(const GeneratorSpec& spec) {
    spec.validate();
    const std::size_t m = spec.tokens, d = spec.latent_dim, n = spec.signal_dim, k = spec.trials;
    const std::size_t md = m * d;

    Rng map_rng(derive_seed(spec.seed, 1));
    const DenseArray A = detail::gaussian({n, md}, map_rng, 1.0 / std::sqrt(static_cast<double>(md)));
    const DenseArray bias = detail::gaussian({n}, map_rng, 0.1);
    const DenseArray M = detail::gaussian({n, n}, map_rng, 1.0 / std::sqrt(static_cast<double>(n)));
    std::vector<double> feature_noise(n);
    for (auto& s : feature_noise) {
        s = map_rng.uniform(0.5, 1.5);
    }

    Rng latent_rng(derive_seed(spec.seed, 2));
    const DenseArray centers = detail::gaussian({spec.clusters, md}, latent_rng, 1.0);
    const std::size_t rank = spec.latent_rank;
    const DenseArray loading =
        rank > 0 ? detail::gaussian({md, rank}, latent_rng, 1.0 / std::sqrt(static_cast<double>(rank))) : DenseArray();
    std::vector<double> u(rank);
    Rng noise_rng(derive_seed(spec.seed, 3));

    auto make_split = [&](Split split, std::size_t count, std::uint64_t first_id) {
        PairedDataset ds;
        ds.split = split;
        ds.spec = spec;
        ds.visual = DenseArray({count, m, d});
        ds.signals = DenseArray({count, k, n});
        std::vector<double> lin(n), clean(n);
        for (std::size_t i = 0; i < count; ++i) {
            ds.ids.push_back(first_id + i);
            const std::size_t c = latent_rng.below(spec.clusters);
            float* z = ds.visual.raw() + i * md;
            for (auto& e : u) {
                e = latent_rng.normal();
            }
            for (std::size_t j = 0; j < md; ++j) {
                double within = 0;
                if (rank > 0) {
                    for (std::size_t q = 0; q < rank; ++q) within += loading[j * rank + q] * u[q];
                } else {
                    within = latent_rng.normal();
                }
                z[j] = static_cast<float>(centers[c * md + j] + spec.cluster_spread * within);
            }
            for (std::size_t r = 0; r < n; ++r) {
                double acc = bias[r];
                for (std::size_t j = 0; j < md; ++j) {
                    acc += static_cast<double>(A[r * md + j]) * z[j];
                }
                lin[r] = acc;
            }
            for (std::size_t r = 0; r < n; ++r) {
                double acc = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    acc += static_cast<double>(M[r * n + j]) * lin[j];
                }
                clean[r] = lin[r] + spec.nonlinearity * std::tanh(acc);
            }
            for (std::size_t t = 0; t < k; ++t) {
                float* x = ds.signals.raw() + (i * k + t) * n;
                for (std::size_t r = 0; r < n; ++r) {
                    x[r] = static_cast<float>(clean[r] + spec.noise_scale * feature_noise[r] * noise_rng.normal());
                }
            }
        }
        return ds;
    };

    GeneratedCorpus out{make_split(Split::train, spec.num_train, 0),
                        make_split(Split::test, spec.num_test, spec.num_train)};

    // z-score with train statistics over every train trial.
    DenseArray mean({n}), sd({n}, 1.0f);
    const std::size_t rows = spec.num_train * k;
    if (rows > 0) {
        for (std::size_t r = 0; r < n; ++r) {
            double s = 0, s2 = 0;
            for (std::size_t i = 0; i < rows; ++i) {
                const double v = out.train.signals[i * n + r];
                s += v;
                s2 += v * v;
            }
            const double mu = s / static_cast<double>(rows);
            const double var = std::max(s2 / static_cast<double>(rows) - mu * mu, 0.0);
            mean[r] = static_cast<float>(mu);
            sd[r] = static_cast<float>(var > 0 ? std::sqrt(var) : 1.0);
        }
    }
    for (PairedDataset* ds : {&out.train, &out.test}) {
        for (std::size_t i = 0; i < ds->signals.size(); ++i) {
            const std::size_t r = i % n;
            ds->signals[i] = (ds->signals[i] - mean[r]) / sd[r];
        }
        ds->feature_mean = mean;
        ds->feature_std = sd;
    }
    return out;
}

/// Per-stimulus elementwise mean over trials; result has k = 1.
inline PairedDataset average_trials(const PairedDataset& data) {
    PairedDataset out = data;
    const std::size_t N = data.size(), k = data.trials(), n = data.signals.dim(2);
    if (k < 1) {
        throw std::invalid_argument("average_trials: dataset has no trials");
    }
    out.signals = DenseArray({N, 1, n});
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t r = 0; r < n; ++r) {
            float acc = 0;
            for (std::size_t t = 0; t < k; ++t) {
                acc += data.signals[(i * k + t) * n + r];
            }
            out.signals[i * n + r] = acc / static_cast<float>(k);
        }
    }
    return out;
}

/// Throws if any stimulus id occurs in both splits.
inline void require_disjoint(const PairedDataset& train, const PairedDataset& test) {
    std::unordered_set<std::uint64_t> seen(train.ids.begin(), train.ids.end());
    for (auto id : test.ids) {
        if (seen.count(id) != 0) {
            throw std::runtime_error("dataset splits overlap at stimulus id " + std::to_string(id));
        }
    }
}

// ---- XFLD file format ------------------------------------------------------------
//
//   "XFLD" | u16 version (1) | u32 header bytes | JSON header | payload
//
// Header: split, counts and shapes, generator spec, stimulus ids, endianness.
// Payload, little-endian float32: for each stimulus its z_v (m*d values) then
// its k signals (n values each); then feature_mean (n) and feature_std (n).

inline constexpr std::uint16_t kDatasetVersion = 1;

inline std::vector<unsigned char> encode_dataset(const PairedDataset& data) {
    const std::size_t N = data.size();
    const std::size_t m = data.spec.tokens, d = data.spec.latent_dim, n = data.spec.signal_dim;
    const std::size_t k = N > 0 ? data.trials() : data.spec.trials;
    nlohmann::json h = {{"format", "xflow-dataset"}, {"endianness", "little"},  {"split", split_name(data.split)},
                        {"num_stimuli", N},          {"trials", k},             {"tokens", m},
                        {"latent_dim", d},           {"signal_dim", n},         {"spec", data.spec.to_json()},
                        {"stimulus_ids", data.ids},  {"has_norm", !data.feature_mean.empty()}};
    io::Writer w;
    w.frame("XFLD", kDatasetVersion, h);
    for (std::size_t i = 0; i < N; ++i) {
        w.floats(std::span<const float>(data.visual.raw() + i * m * d, m * d));
        w.floats(std::span<const float>(data.signals.raw() + i * k * n, k * n));
    }
    if (!data.feature_mean.empty()) {
        w.floats(data.feature_mean.data());
        w.floats(data.feature_std.data());
    }
    return w.buffer();
}

inline PairedDataset decode_dataset(std::vector<unsigned char> bytes) {
    io::Reader r(std::move(bytes));
    const auto h = r.frame("XFLD", kDatasetVersion);
    PairedDataset ds;
    const auto split = io::field<std::string>(h, "split");
    if (split != "train" && split != "test") {
        throw io::FormatError(io::ErrorKind::malformed, "unknown split '" + split + "'");
    }
    ds.split = split == "train" ? Split::train : Split::test;
    ds.spec = GeneratorSpec::from_json(h.at("spec"));
    ds.ids = io::field<std::vector<std::uint64_t>>(h, "stimulus_ids");
    const auto N = io::field<std::size_t>(h, "num_stimuli");
    const auto k = io::field<std::size_t>(h, "trials");
    const auto m = io::field<std::size_t>(h, "tokens");
    const auto d = io::field<std::size_t>(h, "latent_dim");
    const auto n = io::field<std::size_t>(h, "signal_dim");
    if (ds.ids.size() != N) {
        throw io::FormatError(io::ErrorKind::malformed, "stimulus_ids length differs from num_stimuli");
    }
    ds.visual = DenseArray({N, m, d});
    ds.signals = DenseArray({N, k, n});
    for (std::size_t i = 0; i < N; ++i) {
        r.floats(std::span<float>(ds.visual.raw() + i * m * d, m * d));
        r.floats(std::span<float>(ds.signals.raw() + i * k * n, k * n));
    }
    if (io::field<bool>(h, "has_norm")) {
        ds.feature_mean = DenseArray({n});
        ds.feature_std = DenseArray({n});
        r.floats(ds.feature_mean.data());
        r.floats(ds.feature_std.data());
    }
    if (r.remaining() != 0) {
        throw io::FormatError(io::ErrorKind::malformed, std::to_string(r.remaining()) + " trailing bytes");
    }
    std::unordered_set<std::uint64_t> unique(ds.ids.begin(), ds.ids.end());
    if (unique.size() != ds.ids.size()) {
        throw io::FormatError(io::ErrorKind::malformed, "duplicate stimulus ids");
    }
    return ds;
}

inline void write_dataset(const PairedDataset& data, const std::string& path) {
    io::Writer w;
    const auto bytes = encode_dataset(data);
    w.bytes(bytes.data(), bytes.size());
    w.save(path);
}

inline PairedDataset read_dataset(const std::string& path) {
    auto r = io::Reader::load(path);
    std::vector<unsigned char> bytes(r.remaining());
    r.bytes(bytes.data(), bytes.size());
    return decode_dataset(std::move(bytes));
}

/// Reads both splits and checks that their stimulus sets are disjoint.
inline GeneratedCorpus read_corpus(const std::string& train_path, const std::string& test_path) {
    GeneratedCorpus c{read_dataset(train_path), read_dataset(test_path)};
    if (c.train.split != Split::train || c.test.split != Split::test) {
        throw io::FormatError(io::ErrorKind::malformed, "expected a train file and a test file");
    }
    require_disjoint(c.train, c.test);
    return c;
}

}  // namespace xflow
