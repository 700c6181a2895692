#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "test_support.hpp"
#include "xflow/flowsolver.hpp"

using namespace xflow;
using xflow::testing::random_array;
using xflow::testing::random_array_t;

namespace {

constexpr double kPi = std::numbers::pi;

template <class T>
double rel_error(const BasicDenseArray<T>& got, const BasicDenseArray<T>& want) {
    double d = 0, w = 0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        d += (double(got[i]) - want[i]) * (double(got[i]) - want[i]);
        w += double(want[i]) * want[i];
    }
    return std::sqrt(d / w);
}

template <class T>
double max_abs_diff(const BasicDenseArray<T>& a, const BasicDenseArray<T>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

template <class T>
BasicVelocityField<T> constant_field(const BasicDenseArray<T>& v) {
    return [v](const BasicDenseArray<T>&, double) { return v; };
}

// (pi/2) sin(pi t) (z1 - z0); ignores z.
template <class T>
BasicVelocityField<T> cosine_oracle(const BasicDenseArray<T>& z0, const BasicDenseArray<T>& z1) {
    return [z0, z1](const BasicDenseArray<T>&, double t) {
        BasicDenseArray<T> v(z0.shape());
        const double s = kPi / 2 * std::sin(kPi * t);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(s * (double(z1[i]) - z0[i]));
        return v;
    };
}

// v = A z with A a small random matrix over the last axis.
template <class T>
BasicVelocityField<T> linear_field(const BasicDenseArray<T>& a) {
    return [a](const BasicDenseArray<T>& z, double) {
        const std::size_t d = a.dim(0);
        BasicDenseArray<T> v(z.shape());
        for (std::size_t r = 0; r < z.size() / d; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
                double s = 0;
                for (std::size_t k = 0; k < d; ++k) s += double(a[j * d + k]) * z[r * d + k];
                v[r * d + j] = static_cast<T>(s);
            }
        }
        return v;
    };
}

FieldConfig small_field() {
    FieldConfig c;
    c.tokens = 3;
    c.dim = 6;
    c.width = 16;
    c.depth = 2;
    c.heads = 2;
    c.time_embed = 16;
    c.mlp_ratio = 2;
    return c;
}

}  // namespace

TEST(SolveSpec, StepSizeAndStart) {
    EXPECT_DOUBLE_EQ((SolveSpec{Direction::encode, 20, false}.dt()), 0.05);
    EXPECT_DOUBLE_EQ((SolveSpec{Direction::decode, 20, false}.dt()), -0.05);
    EXPECT_EQ((SolveSpec{Direction::encode, 4, false}.start_time()), 0.0);
    EXPECT_EQ((SolveSpec{Direction::decode, 4, false}.start_time()), 1.0);
    EXPECT_THROW((SolveSpec{Direction::encode, 0, false}.validate()), std::invalid_argument);
}

TEST(Integrate, ConstantFieldIsExact) {
    Rng rng(1);
    const auto z0 = random_array({4, 3, 6}, rng), z1 = random_array({4, 3, 6}, rng);
    DenseArray v(z0.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = z1[i] - z0[i];
    for (std::size_t steps : {1u, 3u, 20u, 100u}) {
        const auto end = integrate(z0, constant_field(v), SolveSpec{Direction::encode, steps, false}).end;
        EXPECT_LT(max_abs_diff(end, z1), 1e-5) << steps;
        const auto back = integrate(z1, constant_field(v), SolveSpec{Direction::decode, steps, false}).end;
        EXPECT_LT(max_abs_diff(back, z0), 1e-5) << steps;
    }
}

TEST(Integrate, ZeroFieldKeepsStart) {
    Rng rng(2);
    const auto z = random_array({3, 3, 6}, rng);
    const DenseArray zero(z.shape());
    for (auto d : {Direction::encode, Direction::decode}) {
        EXPECT_TRUE(bit_identical(integrate(z, constant_field(zero), SolveSpec{d, 20, false}).end, z));
    }
    EXPECT_EQ(reversibility_error(z, constant_field(zero), 20), 0.0);
}

TEST(Integrate, CosineOracleEndpointAndConvergence) {
    Rng rng(3);
    const auto z0 = random_array_t<double>({4, 3, 6}, rng), z1 = random_array_t<double>({4, 3, 6}, rng);
    const auto field = cosine_oracle(z0, z1);
    const auto ref = integrate(z0, field, SolveSpec{Direction::encode, 10000, false}).end;
    EXPECT_LT(rel_error(ref, z1), 1e-6);
    const auto at20 = integrate(z0, field, SolveSpec{Direction::encode, 20, false}).end;
    EXPECT_LT(rel_error(at20, z1), 1e-2);
    double prev = rel_error(integrate(z0, field, SolveSpec{Direction::encode, 10, false}).end, ref);
    for (std::size_t steps : {20u, 40u, 80u}) {
        const double e = rel_error(integrate(z0, field, SolveSpec{Direction::encode, steps, false}).end, ref);
        EXPECT_GE(prev / e, 1.5) << steps;
        prev = e;
    }
}

TEST(Integrate, TimeOnlyFieldRoundTrip) {
    Rng rng(4);
    const auto z0 = random_array({4, 3, 6}, rng), z1 = random_array({4, 3, 6}, rng);
    const auto field = cosine_oracle(z0, z1);
    for (std::size_t steps : {5u, 20u, 33u}) {
        const auto there = integrate(z0, field, SolveSpec{Direction::encode, steps, false}).end;
        const auto back = integrate(there, field, SolveSpec{Direction::decode, steps, false}).end;
        EXPECT_LT(max_abs_diff(back, z0), 1e-6) << steps;
    }
}

TEST(Integrate, TimeGridConvention) {
    // Records every (t, z) the field sees: left endpoints k/steps, reversed for decode.
    std::vector<double> seen;
    const VelocityField probe = [&](const DenseArray& z, double t) {
        seen.push_back(t);
        return DenseArray(z.shape());
    };
    const DenseArray z({1, 2}, 1.0f);
    integrate(z, probe, SolveSpec{Direction::encode, 4, false});
    EXPECT_EQ(seen, (std::vector<double>{0.0, 0.25, 0.5, 0.75}));
    seen.clear();
    integrate(z, probe, SolveSpec{Direction::decode, 4, false});
    EXPECT_EQ(seen, (std::vector<double>{1.0, 0.75, 0.5, 0.25}));
}

TEST(Integrate, LinearFieldRoundTripShrinks) {
    Rng rng(5);
    const auto a = random_array_t<double>({6, 6}, rng, 0.3);
    const auto z = random_array_t<double>({4, 3, 6}, rng);
    const auto field = linear_field(a);
    std::vector<double> errs;
    for (std::size_t steps : {10u, 20u, 40u, 80u}) errs.push_back(reversibility_error(z, field, steps));
    for (std::size_t i = 1; i < errs.size(); ++i) {
        EXPECT_LT(errs[i], errs[i - 1] * 1.1);
        EXPECT_GT(errs[i - 1] / errs[i], 1.5);
    }
    EXPECT_LT(errs[1] * 20, errs[0] * 10 * 1.2);  // error * steps roughly constant
}

TEST(Integrate, LinearFieldMatchesMatrixExponentialScalarCase) {
    // 1-d: v = a z, exact solution z e^a; Euler gives z (1 + a/n)^n.
    const DenseArray z({1, 1}, 2.0f);
    const DenseArray a({1, 1}, 0.5f);
    const auto end = integrate(z, linear_field(a), SolveSpec{Direction::encode, 20, false}).end;
    EXPECT_NEAR(end[0], 2.0 * std::pow(1.025, 20), 1e-5);
}

TEST(Integrate, NonFiniteReportsStep) {
    const VelocityField blowup = [](const DenseArray& z, double t) {
        DenseArray v(z.shape());
        v.fill(t >= 0.5 ? std::numeric_limits<float>::infinity() : 1.0f);
        return v;
    };
    const DenseArray z({1, 2}, 0.0f);
    try {
        integrate(z, blowup, SolveSpec{Direction::encode, 10, false});
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step 6 of 10"), std::string::npos) << e.what();
    }
    DenseArray bad({1, 2}, 0.0f);
    bad[1] = std::nanf("");
    EXPECT_THROW(integrate(bad, blowup, SolveSpec{}), NumericError);
}

TEST(Integrate, FieldShapeMismatchThrows) {
    const VelocityField wrong = [](const DenseArray&, double) { return DenseArray({3}); };
    EXPECT_THROW(integrate(DenseArray({1, 2}), wrong, SolveSpec{}), ShapeError);
}

TEST(Trajectory, LengthTimesAndEndpoint) {
    Rng rng(6);
    const auto z0 = random_array({2, 3, 6}, rng), z1 = random_array({2, 3, 6}, rng);
    const auto field = cosine_oracle(z0, z1);
    for (auto d : {Direction::encode, Direction::decode}) {
        const auto r = integrate(z0, field, SolveSpec{d, 7, true});
        ASSERT_TRUE(r.trajectory.has_value());
        const auto& tr = *r.trajectory;
        ASSERT_EQ(tr.size(), 8u);
        EXPECT_EQ(tr.front().t, d == Direction::encode ? 0.0 : 1.0);
        EXPECT_EQ(tr.back().t, d == Direction::encode ? 1.0 : 0.0);
        for (std::size_t k = 1; k < tr.size(); ++k) {
            if (d == Direction::encode) {
                EXPECT_GT(tr[k].t, tr[k - 1].t);
            } else {
                EXPECT_LT(tr[k].t, tr[k - 1].t);
            }
        }
        EXPECT_TRUE(bit_identical(tr.front().state, z0));
        EXPECT_TRUE(bit_identical(tr.back().state, r.end));
    }
    EXPECT_FALSE(integrate(z0, field, SolveSpec{Direction::encode, 7, false}).trajectory.has_value());
}

TEST(Trajectory, CsvAndSidecar) {
    Rng rng(7);
    const auto z = random_array({2, 3, 6}, rng);
    DenseArray v(z.shape(), 0.5f);
    const SolveSpec spec{Direction::decode, 4, true};
    const auto r = integrate(z, constant_field(v), spec);
    const auto csv = trajectory_csv(*r.trajectory);
    std::istringstream in(csv);
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "step,t,norm_0,norm_1,x0,x1,x2,x3,x4,x5,x6,x7");
    std::size_t lines = 0;
    for (std::string line; std::getline(in, line);) ++lines;
    EXPECT_EQ(lines, 5u);

    const auto dir = std::filesystem::temp_directory_path() / "xflow_traj_test";
    std::filesystem::create_directories(dir);
    const std::string stem = (dir / "decode").string();
    write_trajectory(*r.trajectory, spec, stem);
    std::ifstream side(stem + ".json");
    const auto j = nlohmann::json::parse(side);
    EXPECT_EQ(j.at("direction"), "decode");
    EXPECT_EQ(j.at("steps"), 4);
    EXPECT_DOUBLE_EQ(j.at("dt").get<double>(), -0.25);
    EXPECT_EQ(j.at("latent_shape"), (std::vector<std::size_t>{2, 3, 6}));
    std::ifstream c(stem + ".csv");
    std::stringstream ss;
    ss << c.rdbuf();
    EXPECT_EQ(ss.str(), csv);
    std::filesystem::remove_all(dir);
}

TEST(NetworkSolve, WrappersMatchIntegrate) {
    const auto net = init_field(small_field(), 3);
    Rng rng(8);
    const auto z = random_array({3, 3, 6}, rng);
    EXPECT_TRUE(bit_identical(encode_latents(z, net, 20),
                              integrate(z, network_field(net), SolveSpec{Direction::encode, 20, false}).end));
    EXPECT_TRUE(bit_identical(decode_latents(z, net, 20),
                              integrate(z, network_field(net), SolveSpec{Direction::decode, 20, false}).end));
}

TEST(NetworkSolve, SingleStepIsOneEulerJump) {
    const auto net = init_field(small_field(), 4);
    Rng rng(9);
    const auto z = random_array({2, 3, 6}, rng);
    const auto v = field_forward(z, 0.0, net);
    const auto end = encode_latents(z, net, 1);
    for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(end[i], z[i] + v[i]);
}

TEST(NetworkSolve, ZeroOutputNetworkIsIdentity) {
    auto net = init_field(small_field(), 5);
    net.params.value("field.out.w").fill(0.0f);
    net.params.value("field.out.b").fill(0.0f);
    Rng rng(10);
    const auto z = random_array({2, 3, 6}, rng);
    EXPECT_TRUE(bit_identical(decode_latents(z, net, 20), z));
    EXPECT_TRUE(bit_identical(encode_latents(z, net, 20), z));
    EXPECT_EQ(reversibility_error(z, net, 20), 0.0);
}

TEST(NetworkSolve, ReversibilityShrinksWithSteps) {
    const auto net = init_field(small_field(), 6);
    Rng rng(11);
    const auto z = random_array({4, 3, 6}, rng);
    std::vector<double> errs;
    for (std::size_t steps : {10u, 20u, 40u, 80u}) errs.push_back(reversibility_error(z, net, steps));
    for (std::size_t i = 1; i < errs.size(); ++i) EXPECT_LT(errs[i], errs[i - 1] * 1.1) << i;
    EXPECT_THROW(reversibility_error(DenseArray({2, 3, 6}), net, 20), std::invalid_argument);
}

TEST(NetworkSolve, BatchElementsIndependent) {
    const auto net = init_field(small_field(), 7);
    Rng rng(12);
    const auto z = random_array({3, 3, 6}, rng);
    const auto all = encode_latents(z, net, 20);
    for (std::size_t b = 0; b < 3; ++b) {
        const std::vector<std::size_t> idx{b};
        const auto one = encode_latents(gather_rows(z, idx), net, 20);
        for (std::size_t i = 0; i < one.size(); ++i) EXPECT_NEAR(all[b * 18 + i], one[i], 1e-5);
    }
}
