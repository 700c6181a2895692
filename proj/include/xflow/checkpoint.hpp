#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "xflow/io.hpp"
#include "xflow/neurovae.hpp"
#include "xflow/numcore/params.hpp"
#include "xflow/xfm.hpp"

namespace xflow {

// Checkpoint layout (little-endian):
//   "XFCK" | u16 version (1) | u32 header length | header JSON (UTF-8)
//   | float32 blobs, one per header.params entry, in that order.
// header = {"component": "neurovae" | "xfm", "config": {...}, "step": u64,
//           "seed": u64, "params": [{"name": str, "shape": [dims]}, ...]}
// Only parameter values are stored, not gradients or optimizer moments.

inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "XFCK";

struct Checkpoint {
    std::string component;
    nlohmann::json config;
    std::uint64_t seed = 0;
    ParamStore params;  // step() carries the step count
};

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ck) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& e : ck.params.entries()) {
        list.push_back({{"name", e.name}, {"shape", e.value.shape()}});
    }
    const nlohmann::json header{{"component", ck.component},
                                {"config", ck.config},
                                {"step", ck.params.step()},
                                {"seed", ck.seed},
                                {"params", list}};
    io::Writer w;
    w.frame(kCheckpointMagic, kCheckpointVersion, header);
    for (const auto& e : ck.params.entries()) {
        w.floats(e.value.data());
    }
    return w.buffer();
}

/// Throws io::FormatError on bad magic/version, short payload or trailing bytes,
/// and when `expect_component` is given and differs from the stored tag.
inline Checkpoint decode_checkpoint(std::vector<unsigned char> bytes, const std::string& expect_component = "") {
    io::Reader r(std::move(bytes));
    const auto h = r.frame(kCheckpointMagic, kCheckpointVersion);
    Checkpoint ck;
    ck.component = io::field<std::string>(h, "component");
    if (!expect_component.empty() && ck.component != expect_component) {
        throw io::FormatError(io::ErrorKind::malformed,
                              "checkpoint holds '" + ck.component + "', expected '" + expect_component + "'");
    }
    if (!h.contains("config")) {
        throw io::FormatError(io::ErrorKind::malformed, "header field 'config' missing");
    }
    ck.config = h.at("config");
    ck.seed = io::field<std::uint64_t>(h, "seed");
    ck.params.set_step(io::field<std::uint64_t>(h, "step"));
    const auto list = io::field<nlohmann::json>(h, "params");
    if (!list.is_array()) {
        throw io::FormatError(io::ErrorKind::malformed, "header field 'params' is not a list");
    }
    for (const auto& p : list) {
        const auto name = io::field<std::string>(p, "name");
        const auto shape = io::field<Shape>(p, "shape");
        DenseArray value(shape);
        r.floats(value.data());
        try {
            ck.params.add(name, std::move(value));
        } catch (const std::invalid_argument& e) {
            throw io::FormatError(io::ErrorKind::malformed, e.what());
        }
    }
    if (r.remaining() != 0) {
        throw io::FormatError(io::ErrorKind::malformed,
                              std::to_string(r.remaining()) + " trailing bytes after the last parameter");
    }
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    io::Writer w;
    const auto bytes = encode_checkpoint(ck);
    w.bytes(bytes.data(), bytes.size());
    w.save(path);
}

inline Checkpoint load_checkpoint(const std::string& path, const std::string& expect_component = "") {
    io::Reader file = io::Reader::load(path);
    std::vector<unsigned char> bytes(file.remaining());
    file.bytes(bytes.data(), bytes.size());
    return decode_checkpoint(std::move(bytes), expect_component);
}

// ---- component configs -----------------------------------------------------------

inline nlohmann::json vae_config_json(const VaeConfig& c) {
    return {{"signal_dim", c.signal_dim}, {"tokens", c.tokens},         {"latent_dim", c.latent_dim},
            {"lift_channels", c.lift_channels}, {"mlp_hidden", c.mlp_hidden}, {"epochs", c.epochs},
            {"batch_size", c.batch_size}, {"use_compact", c.use_compact}, {"latent_pull", c.latent_pull}};
}

inline VaeConfig vae_config_from_json(const nlohmann::json& j) {
    VaeConfig c;
    c.signal_dim = io::field<std::size_t>(j, "signal_dim");
    c.tokens = io::field<std::size_t>(j, "tokens");
    c.latent_dim = io::field<std::size_t>(j, "latent_dim");
    c.lift_channels = io::field<std::size_t>(j, "lift_channels");
    c.mlp_hidden = io::field<std::size_t>(j, "mlp_hidden");
    c.epochs = io::field<std::size_t>(j, "epochs");
    c.batch_size = io::field<std::size_t>(j, "batch_size");
    c.use_compact = io::field<bool>(j, "use_compact");
    c.latent_pull = io::field<double>(j, "latent_pull");
    return c;
}

inline nlohmann::json field_config_json(const FieldConfig& c, Schedule schedule) {
    return {{"tokens", c.tokens},         {"dim", c.dim},         {"width", c.width},
            {"depth", c.depth},           {"heads", c.heads},     {"time_embed", c.time_embed},
            {"mlp_ratio", c.mlp_ratio},   {"schedule", schedule_name(schedule)}};
}

inline FieldConfig field_config_from_json(const nlohmann::json& j) {
    FieldConfig c;
    c.tokens = io::field<std::size_t>(j, "tokens");
    c.dim = io::field<std::size_t>(j, "dim");
    c.width = io::field<std::size_t>(j, "width");
    c.depth = io::field<std::size_t>(j, "depth");
    c.heads = io::field<std::size_t>(j, "heads");
    c.time_embed = io::field<std::size_t>(j, "time_embed");
    c.mlp_ratio = io::field<std::size_t>(j, "mlp_ratio");
    return c;
}

// ---- typed save / load ------------------------------------------------------------

inline void save_vae(const std::string& path, const ParamStore& params, const VaeConfig& cfg, std::uint64_t seed) {
    save_checkpoint(Checkpoint{"neurovae", vae_config_json(cfg), seed, params.cast<float>()}, path);
}

struct LoadedVae {
    VaeConfig config;
    ParamStore params;
    std::uint64_t seed = 0;
};

inline LoadedVae load_vae(const std::string& path) {
    auto ck = load_checkpoint(path, "neurovae");
    LoadedVae out{vae_config_from_json(ck.config), std::move(ck.params), ck.seed};
    out.config.validate();
    return out;
}

inline void save_field(const std::string& path, const FieldNetwork& net, Schedule schedule, std::uint64_t seed) {
    save_checkpoint(Checkpoint{"xfm", field_config_json(net.config, schedule), seed, net.params.cast<float>()}, path);
}

struct LoadedField {
    FieldNetwork network;
    Schedule schedule = Schedule::cosine;
    std::uint64_t seed = 0;
};

inline LoadedField load_field(const std::string& path) {
    auto ck = load_checkpoint(path, "xfm");
    LoadedField out;
    out.network.config = field_config_from_json(ck.config);
    out.network.config.validate();
    try {
        out.schedule = parse_schedule(io::field<std::string>(ck.config, "schedule"));
    } catch (const std::invalid_argument& e) {
        throw io::FormatError(io::ErrorKind::malformed, e.what());
    }
    out.network.params = std::move(ck.params);
    out.seed = ck.seed;
    return out;
}

}  // namespace xflow
