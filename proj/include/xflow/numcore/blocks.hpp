#pragma once

#include <cmath>
#include <string>
#include <string_view>

#include "xflow/numcore/array.hpp"
#include "xflow/numcore/ops.hpp"
#include "xflow/numcore/params.hpp"
#include "xflow/numcore/rng.hpp"
#include "xflow/numcore/tape.hpp"

namespace xflow {

enum class BlockKind {
    affine,      // last-axis affine map in -> out
    mlp,         // affine in -> hidden, GELU, affine hidden -> out
    token_mix,   // 1x1 Conv1D over the token axis tokens_in -> tokens_out
    resample,    // affine in -> out, GELU, token_mix tokens_in -> tokens_out
    attention,   // multi-head self-attention with q/k/v/o projections, width `in`
    layer_norm,  // normalization over the last axis, width `in`
};

/// Layer descriptor. Parameters live in a ParamStore under "<name>.<suffix>".
struct BlockSpec {
    BlockKind kind = BlockKind::affine;
    std::string name;
    std::size_t in = 0;
    std::size_t hidden = 0;
    std::size_t out = 0;
    std::size_t tokens_in = 0;
    std::size_t tokens_out = 0;
    std::size_t heads = 1;
    bool bias = true;

    static BlockSpec affine(std::string name, std::size_t in, std::size_t out, bool bias = true) {
        return {BlockKind::affine, std::move(name), in, 0, out, 0, 0, 1, bias};
    }
    static BlockSpec mlp(std::string name, std::size_t in, std::size_t hidden, std::size_t out) {
        return {BlockKind::mlp, std::move(name), in, hidden, out, 0, 0, 1, true};
    }
    static BlockSpec token_mix(std::string name, std::size_t tokens_in, std::size_t tokens_out, bool bias = true) {
        return {BlockKind::token_mix, std::move(name), 0, 0, 0, tokens_in, tokens_out, 1, bias};
    }
    static BlockSpec resample(std::string name, std::size_t in, std::size_t out, std::size_t tokens_in,
                              std::size_t tokens_out) {
        return {BlockKind::resample, std::move(name), in, 0, out, tokens_in, tokens_out, 1, true};
    }
    static BlockSpec attention(std::string name, std::size_t width, std::size_t heads) {
        return {BlockKind::attention, std::move(name), width, 0, width, 0, 0, heads, true};
    }
    static BlockSpec layer_norm(std::string name, std::size_t width) {
        return {BlockKind::layer_norm, std::move(name), width, 0, width, 0, 0, 1, true};
    }

    [[nodiscard]] std::string param(std::string_view suffix) const { return name + "." + std::string(suffix); }
};

/// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)).
template <class T>
BasicDenseArray<T> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    BasicDenseArray<T> w(std::move(shape));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& e : w.data()) {
        e = static_cast<T>(rng.uniform(-limit, limit));
    }
    return w;
}

/// Creates the parameters of `spec` in `params`: Glorot weights, zero biases, unit gains.
template <class T>
void init_block(BasicParamStore<T>& params, const BlockSpec& spec, Rng& rng) {
    auto add_affine = [&](const std::string& prefix, std::size_t in, std::size_t out, bool bias) {
        params.add(prefix + ".w", glorot_uniform<T>({in, out}, in, out, rng));
        if (bias) {
            params.add(prefix + ".b", BasicDenseArray<T>({out}));
        }
    };
    auto add_mix = [&](const std::string& prefix, std::size_t tin, std::size_t tout, bool bias) {
        params.add(prefix + ".w", glorot_uniform<T>({tout, tin}, tin, tout, rng));
        if (bias) {
            params.add(prefix + ".b", BasicDenseArray<T>({tout}));
        }
    };
    switch (spec.kind) {
        case BlockKind::affine:
            add_affine(spec.name, spec.in, spec.out, spec.bias);
            break;
        case BlockKind::mlp:
            add_affine(spec.param("fc1"), spec.in, spec.hidden, true);
            add_affine(spec.param("fc2"), spec.hidden, spec.out, true);
            break;
        case BlockKind::token_mix:
            add_mix(spec.name, spec.tokens_in, spec.tokens_out, spec.bias);
            break;
        case BlockKind::resample:
            add_affine(spec.param("proj"), spec.in, spec.out, true);
            add_mix(spec.param("mix"), spec.tokens_in, spec.tokens_out, true);
            break;
        case BlockKind::attention:
            for (const char* p : {"q", "k", "v", "o"}) {
                add_affine(spec.param(p), spec.in, spec.in, true);
            }
            break;
        case BlockKind::layer_norm:
            params.add(spec.param("g"), BasicDenseArray<T>({spec.in}, T{1}));
            params.add(spec.param("b"), BasicDenseArray<T>({spec.in}));
            break;
    }
}

namespace detail {

[[noreturn]] inline void block_shape_error(const BlockSpec& spec, const Shape& got, std::string_view expected) {
    throw ShapeError("block '" + spec.name + "': input " + shape_string(got) + " does not match declared " +
                     std::string(expected));
}

}  // namespace detail

/// Runs one block on the tape. The input's trailing dimensions must match the
/// block's declared input; violations name the block and both shapes.
template <class T>
Var forward_block(Tape<T>& tape, Var input, const BlockSpec& spec) {
    const Shape& shape = tape.shape(input);
    auto bias = [&](const std::string& prefix, bool has) -> std::optional<Var> {
        return has ? std::optional<Var>(tape.param(prefix + ".b")) : std::nullopt;
    };
    auto last_dim_is = [&](std::size_t want) {
        if (shape.empty() || shape.back() != want) {
            detail::block_shape_error(spec, shape, "[..., " + std::to_string(want) + "]");
        }
    };
    auto tokens_are = [&](std::size_t want) {
        if (shape.size() != 3 || shape[1] != want) {
            detail::block_shape_error(spec, shape, "[batch, " + std::to_string(want) + ", features]");
        }
    };
    switch (spec.kind) {
        case BlockKind::affine:
            last_dim_is(spec.in);
            return ops::linear(tape, input, tape.param(spec.param("w")), bias(spec.name, spec.bias), spec.name);
        case BlockKind::mlp: {
            last_dim_is(spec.in);
            const auto fc1 = spec.param("fc1");
            const auto fc2 = spec.param("fc2");
            Var h = ops::linear(tape, input, tape.param(fc1 + ".w"), bias(fc1, true), fc1);
            h = ops::gelu(tape, h);
            return ops::linear(tape, h, tape.param(fc2 + ".w"), bias(fc2, true), fc2);
        }
        case BlockKind::token_mix:
            tokens_are(spec.tokens_in);
            return ops::token_mix(tape, input, tape.param(spec.param("w")), bias(spec.name, spec.bias), spec.name);
        case BlockKind::resample: {
            tokens_are(spec.tokens_in);
            last_dim_is(spec.in);
            const auto proj = spec.param("proj");
            const auto mix = spec.param("mix");
            Var h = ops::linear(tape, input, tape.param(proj + ".w"), bias(proj, true), proj);
            h = ops::gelu(tape, h);
            return ops::token_mix(tape, h, tape.param(mix + ".w"), bias(mix, true), mix);
        }
        case BlockKind::attention: {
            if (shape.size() != 3) {
                detail::block_shape_error(spec, shape, "[batch, tokens, " + std::to_string(spec.in) + "]");
            }
            last_dim_is(spec.in);
            auto project = [&](const char* p) {
                const auto prefix = spec.param(p);
                return ops::linear(tape, input, tape.param(prefix + ".w"), bias(prefix, true), prefix);
            };
            Var q = project("q");
            Var k = project("k");
            Var v = project("v");
            Var a = ops::attention(tape, q, k, v, spec.heads);
            const auto o = spec.param("o");
            return ops::linear(tape, a, tape.param(o + ".w"), bias(o, true), o);
        }
        case BlockKind::layer_norm:
            last_dim_is(spec.in);
            return ops::layer_norm(tape, input, tape.param(spec.param("g")), tape.param(spec.param("b")));
    }
    throw std::logic_error("forward_block: unknown block kind");
}

/// Output shape of `spec` for a given input shape (no tape needed).
inline Shape block_output_shape(const BlockSpec& spec, Shape input) {
    switch (spec.kind) {
        case BlockKind::affine:
        case BlockKind::mlp:
            input.back() = spec.out;
            return input;
        case BlockKind::token_mix:
            input[1] = spec.tokens_out;
            return input;
        case BlockKind::resample:
            input[1] = spec.tokens_out;
            input.back() = spec.out;
            return input;
        case BlockKind::attention:
        case BlockKind::layer_norm:
            return input;
    }
    return input;
}

}  // namespace xflow
