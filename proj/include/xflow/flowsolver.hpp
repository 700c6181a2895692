#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "xflow/numcore/array.hpp"
#include "xflow/xfm.hpp"

namespace xflow {

enum class Direction { encode, decode };

inline std::string direction_name(Direction d) { return d == Direction::encode ? "encode" : "decode"; }

/// encode runs t: 0 -> 1, decode runs t: 1 -> 0 with dt = -1 / steps.
struct SolveSpec {
    Direction direction = Direction::encode;
    std::size_t steps = 20;
    bool record_trajectory = false;

    void validate() const {
        if (steps < 1) {
            throw std::invalid_argument("SolveSpec: steps must be >= 1");
        }
    }

    [[nodiscard]] double dt() const {
        const double h = 1.0 / static_cast<double>(steps);
        return direction == Direction::encode ? h : -h;
    }

    [[nodiscard]] double start_time() const { return direction == Direction::encode ? 0.0 : 1.0; }
};

template <class T>
struct BasicTrajectoryPoint {
    double t = 0.0;
    BasicDenseArray<T> state;
};

template <class T>
using BasicTrajectory = std::vector<BasicTrajectoryPoint<T>>;
using Trajectory = BasicTrajectory<float>;

template <class T>
struct BasicSolveResult {
    BasicDenseArray<T> end;
    std::optional<BasicTrajectory<T>> trajectory;
};
using SolveResult = BasicSolveResult<float>;

template <class T>
using BasicVelocityField = std::function<BasicDenseArray<T>(const BasicDenseArray<T>& z, double t)>;
using VelocityField = BasicVelocityField<float>;

/// Explicit Euler: z <- z + dt * v(z, t_k), t_k = t_0 + k dt. Both directions
/// share this loop; only the sign of dt and the start time differ. The state
/// is accumulated in double so float runs stay exact for constant fields.
template <class T>
BasicSolveResult<T> integrate(const BasicDenseArray<T>& start, const BasicVelocityField<T>& field,
                              const SolveSpec& spec) {
    spec.validate();
    require_finite("integrate start", start);
    const double dt = spec.dt();
    const double t0 = spec.start_time();
    BasicSolveResult<T> result{start, std::nullopt};
    std::vector<double> acc(start.data().begin(), start.data().end());
    if (spec.record_trajectory) {
        result.trajectory.emplace();
        result.trajectory->push_back({t0, start});
    }
    auto& z = result.end;
    for (std::size_t k = 0; k < spec.steps; ++k) {
        const double t = t0 + static_cast<double>(k) * dt;
        const auto v = field(z, t);
        require_shape("integrate field output", v.shape(), z.shape());
        for (std::size_t i = 0; i < z.size(); ++i) {
            acc[i] += dt * static_cast<double>(v[i]);
            z[i] = static_cast<T>(acc[i]);
        }
        if (!z.all_finite()) {
            throw NumericError("integrate: non-finite state at step " + std::to_string(k + 1) + " of " +
                               std::to_string(spec.steps) + " (t = " + std::to_string(t + dt) + ")");
        }
        if (spec.record_trajectory) {
            // The final time is written as the exact endpoint.
            const double tn = k + 1 == spec.steps ? 1.0 - t0 : t0 + static_cast<double>(k + 1) * dt;
            result.trajectory->push_back({tn, z});
        }
    }
    return result;
}

inline VelocityField network_field(const FieldNetwork& net) {
    return [&net](const DenseArray& z, double t) { return field_forward(z, t, net); };
}

/// z_v -> z_n.
inline DenseArray encode_latents(const DenseArray& z_v, const FieldNetwork& net, std::size_t steps) {
    return integrate(z_v, network_field(net), SolveSpec{Direction::encode, steps, false}).end;
}

/// z_n -> z_v.
inline DenseArray decode_latents(const DenseArray& z_n, const FieldNetwork& net, std::size_t steps) {
    return integrate(z_n, network_field(net), SolveSpec{Direction::decode, steps, false}).end;
}

/// ||decode(encode(z)) - z|| / ||z|| over the whole array.
template <class T>
double reversibility_error(const BasicDenseArray<T>& z, const BasicVelocityField<T>& field, std::size_t steps) {
    double zz = 0;
    for (T v : z.data()) {
        zz += static_cast<double>(v) * v;
    }
    if (zz == 0.0) {
        throw std::invalid_argument("reversibility_error: zero-norm input");
    }
    const auto there = integrate(z, field, SolveSpec{Direction::encode, steps, false}).end;
    const auto back = integrate(there, field, SolveSpec{Direction::decode, steps, false}).end;
    double dd = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double e = static_cast<double>(back[i]) - z[i];
        dd += e * e;
    }
    return std::sqrt(dd / zz);
}

inline double reversibility_error(const DenseArray& z, const FieldNetwork& net, std::size_t steps) {
    return reversibility_error(z, network_field(net), steps);
}

// ---- trajectory export -------------------------------------------------------
//
// CSV columns: step, t, norm_0 .. norm_{B-1} (L2 norm of each batch element),
// x0 .. x7 (first coordinates of batch element 0). Sidecar JSON: the SolveSpec
// plus the latent shape.

inline std::string trajectory_csv(const Trajectory& traj, std::size_t coords = 8) {
    std::ostringstream os;
    os << std::setprecision(9);
    if (traj.empty()) {
        return "step,t\n";
    }
    const auto& first = traj.front().state;
    const std::size_t batch = first.rank() > 0 ? first.dim(0) : 1;
    const std::size_t row = first.size() / std::max<std::size_t>(batch, 1);
    const std::size_t nc = std::min(coords, row);
    os << "step,t";
    for (std::size_t b = 0; b < batch; ++b) os << ",norm_" << b;
    for (std::size_t c = 0; c < nc; ++c) os << ",x" << c;
    os << '\n';
    for (std::size_t k = 0; k < traj.size(); ++k) {
        const auto& s = traj[k].state;
        os << k << ',' << traj[k].t;
        for (std::size_t b = 0; b < batch; ++b) {
            double nn = 0;
            for (std::size_t i = b * row; i < (b + 1) * row; ++i) nn += static_cast<double>(s[i]) * s[i];
            os << ',' << std::sqrt(nn);
        }
        for (std::size_t c = 0; c < nc; ++c) os << ',' << s[c];
        os << '\n';
    }
    return os.str();
}

inline nlohmann::json solve_spec_json(const SolveSpec& spec, const Shape& latent_shape) {
    return {{"direction", direction_name(spec.direction)},
            {"steps", spec.steps},
            {"record_trajectory", spec.record_trajectory},
            {"dt", spec.dt()},
            {"start_time", spec.start_time()},
            {"latent_shape", latent_shape}};
}

/// Writes `<stem>.csv` and `<stem>.json`.
inline void write_trajectory(const Trajectory& traj, const SolveSpec& spec, const std::string& stem) {
    std::ofstream csv(stem + ".csv");
    std::ofstream side(stem + ".json");
    if (!csv || !side) {
        throw std::runtime_error("write_trajectory: cannot open '" + stem + ".csv/.json'");
    }
    csv << trajectory_csv(traj);
    side << solve_spec_json(spec, traj.empty() ? Shape{} : traj.front().state.shape()).dump(2) << '\n';
}

}  // namespace xflow
