#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <numeric>

#include "test_support.hpp"
#include "xflow/flowsolver.hpp"
#include "xflow/xfm.hpp"

using namespace xflow;
using xflow::testing::random_array;

namespace {

constexpr double kPi = std::numbers::pi;

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

DenseArray row(const DenseArray& a, std::size_t r) {
    const std::vector<std::size_t> idx{r};
    return gather_rows(a, idx);
}

double max_abs_diff(const DenseArray& a, const DenseArray& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

double rel_error(const DenseArray& got, const DenseArray& want) {
    double d = 0, w = 0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        d += (double(got[i]) - want[i]) * (double(got[i]) - want[i]);
        w += double(want[i]) * want[i];
    }
    return std::sqrt(d / w);
}

}  // namespace

// ---- schedules ----

TEST(Schedule, BoundaryValues) {
    for (auto s : {Schedule::linear, Schedule::cosine}) {
        const auto a = schedule_eval(s, 0.0), b = schedule_eval(s, 1.0);
        EXPECT_NEAR(a.alpha, 1.0, 1e-12);
        EXPECT_NEAR(a.sigma, 0.0, 1e-12);
        EXPECT_NEAR(b.alpha, 0.0, 1e-12);
        EXPECT_NEAR(b.sigma, 1.0, 1e-12);
    }
}

TEST(Schedule, PartitionOfUnityAndDerivative) {
    Rng rng(5);
    for (auto s : {Schedule::linear, Schedule::cosine}) {
        for (int i = 0; i < 1000; ++i) {
            const auto v = schedule_eval(s, rng.uniform());
            EXPECT_NEAR(v.alpha + v.sigma, 1.0, 1e-12);
            EXPECT_NEAR(v.dalpha_dt + v.dsigma_dt, 0.0, 1e-12);
        }
    }
}

TEST(Schedule, CosineClosedForm) {
    const auto z = schedule_eval(Schedule::cosine, 0.0);
    EXPECT_NEAR(z.dalpha_dt, 0.0, 1e-12);
    EXPECT_NEAR(z.dsigma_dt, 0.0, 1e-12);
    const auto h = schedule_eval(Schedule::cosine, 0.5);
    EXPECT_NEAR(h.alpha, 0.5, 1e-12);
    EXPECT_NEAR(h.sigma, 0.5, 1e-12);
    EXPECT_NEAR(h.dalpha_dt, -kPi / 2, 1e-12);
    EXPECT_NEAR(h.dsigma_dt, kPi / 2, 1e-12);
    for (double t : {0.1, 0.37, 0.8}) {
        const auto v = schedule_eval(Schedule::cosine, t);
        const double c = std::cos(kPi * t / 2), s = std::sin(kPi * t / 2);
        EXPECT_NEAR(v.alpha, c * c, 1e-12);
        EXPECT_NEAR(v.sigma, s * s, 1e-12);
        EXPECT_NEAR(v.dsigma_dt, kPi / 2 * std::sin(kPi * t), 1e-12);
    }
}

TEST(Schedule, CosineDerivativeMatchesFiniteDifference) {
    const double h = 1e-6;
    for (double t : {0.05, 0.3, 0.5, 0.9}) {
        const double num = (schedule_eval(Schedule::cosine, t + h).alpha - schedule_eval(Schedule::cosine, t - h).alpha) /
                           (2 * h);
        EXPECT_NEAR(schedule_eval(Schedule::cosine, t).dalpha_dt, num, 1e-7);
    }
}

TEST(Schedule, LinearDerivativesConstant) {
    for (double t : {0.0, 0.25, 0.6, 1.0}) {
        const auto v = schedule_eval(Schedule::linear, t);
        EXPECT_EQ(v.dalpha_dt, -1.0);
        EXPECT_EQ(v.dsigma_dt, 1.0);
        EXPECT_NEAR(v.alpha, 1.0 - t, 1e-15);
    }
}

TEST(Schedule, RejectsOutOfRange) {
    EXPECT_THROW(schedule_eval(Schedule::cosine, -0.01), std::domain_error);
    EXPECT_THROW(schedule_eval(Schedule::linear, 1.01), std::domain_error);
    EXPECT_THROW(schedule_eval(Schedule::linear, std::nan("")), std::domain_error);
    EXPECT_THROW(parse_schedule("sigmoid"), std::invalid_argument);
    EXPECT_EQ(parse_schedule(schedule_name(Schedule::linear)), Schedule::linear);
}

// ---- interpolation and target ----

TEST(InterpolateState, Endpoints) {
    Rng rng(1);
    const auto z0 = random_array({4, 3, 6}, rng), z1 = random_array({4, 3, 6}, rng);
    for (auto s : {Schedule::linear, Schedule::cosine}) {
        EXPECT_EQ(max_abs_diff(interpolate_state(z0, z1, 0.0, s), z0), 0.0);
        EXPECT_EQ(max_abs_diff(interpolate_state(z0, z1, 1.0, s), z1), 0.0);
    }
}

TEST(InterpolateState, EqualInputsStayPut) {
    Rng rng(2);
    const auto z = random_array({2, 3, 6}, rng);
    for (double t : {0.1, 0.5, 0.77}) {
        EXPECT_LT(max_abs_diff(interpolate_state(z, z, t, Schedule::cosine), z), 1e-6);
    }
}

TEST(InterpolateState, CosineMidpoint) {
    Rng rng(3);
    const auto z0 = random_array({2, 3, 6}, rng), z1 = random_array({2, 3, 6}, rng);
    const auto mid = interpolate_state(z0, z1, 0.5, Schedule::cosine);
    for (std::size_t i = 0; i < mid.size(); ++i) EXPECT_NEAR(mid[i], 0.5 * (z0[i] + z1[i]), 1e-6);
}

TEST(InterpolateState, ShapeMismatchThrows) {
    Rng rng(4);
    EXPECT_THROW(interpolate_state(random_array({2, 3, 6}, rng), random_array({2, 3, 5}, rng), 0.5, Schedule::cosine),
                 ShapeError);
    EXPECT_THROW(target_field(random_array({2, 3, 6}, rng), random_array({1, 3, 6}, rng), 0.5, Schedule::linear),
                 ShapeError);
}

TEST(TargetField, Examples) {
    Rng rng(6);
    const auto z0 = random_array({2, 3, 6}, rng), z1 = random_array({2, 3, 6}, rng);
    for (double t : {0.0, 1.0}) {
        const auto f = target_field(z0, z1, t, Schedule::cosine);
        for (float v : f.data()) EXPECT_NEAR(v, 0.0, 1e-6);
    }
    for (double t : {0.0, 0.4, 1.0}) {
        const auto f = target_field(z0, z1, t, Schedule::linear);
        for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(f[i], z1[i] - z0[i], 1e-6);
    }
    const auto f = target_field(z0, z1, 0.5, Schedule::cosine);
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(f[i], kPi / 2 * (z1[i] - z0[i]), 1e-5);
}

TEST(TargetField, AntisymmetricUnderSwap) {
    Rng rng(7);
    const auto z0 = random_array({3, 3, 6}, rng), z1 = random_array({3, 3, 6}, rng);
    for (auto s : {Schedule::linear, Schedule::cosine}) {
        for (double t : {0.13, 0.5, 0.91}) {
            const auto a = target_field(z0, z1, t, s), b = target_field(z1, z0, t, s);
            for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], -b[i], 1e-6);
        }
    }
}

// ---- field network ----

TEST(FieldForward, ShapeAndDeterminism) {
    const auto net = init_field(small_field(), 11);
    Rng rng(8);
    const auto z = random_array({5, 3, 6}, rng);
    const auto a = field_forward(z, 0.3, net), b = field_forward(z, 0.3, net);
    EXPECT_EQ(a.shape(), z.shape());
    EXPECT_TRUE(bit_identical(a, b));
    EXPECT_TRUE(a.all_finite());
}

TEST(FieldForward, DefaultConfigShape) {
    const auto net = init_field(FieldConfig{}, 1);
    Rng rng(9);
    const auto z = random_array({2, 8, 32}, rng);
    for (double t : {0.0, 0.5, 1.0}) EXPECT_EQ(field_forward(z, t, net).shape(), z.shape());
}

TEST(FieldForward, TimeEmbeddingIsLive) {
    const auto net = init_field(small_field(), 12);
    Rng rng(10);
    const auto z = random_array({2, 3, 6}, rng);
    EXPECT_GT(max_abs_diff(field_forward(z, 0.3, net), field_forward(z, 0.7, net)), 1e-4);
}

TEST(FieldForward, PerElementTimes) {
    const auto net = init_field(small_field(), 13);
    Rng rng(11);
    const auto z = random_array({2, 3, 6}, rng);
    const std::vector<double> ts{0.2, 0.9};
    const auto both = field_forward(z, ts, net);
    const auto row1 = field_forward(row(z, 1), 0.9, net);
    for (std::size_t i = 0; i < row1.size(); ++i) EXPECT_NEAR(both[18 + i], row1[i], 1e-5);
}

TEST(FieldForward, BatchRowsIndependent) {
    const auto net = init_field(small_field(), 14);
    Rng rng(12);
    auto z = random_array({3, 3, 6}, rng);
    const auto before = field_forward(z, 0.5, net);
    for (std::size_t i = 0; i < 18; ++i) z[36 + i] += 1.0f;
    const auto after = field_forward(z, 0.5, net);
    for (std::size_t i = 0; i < 36; ++i) EXPECT_EQ(before[i], after[i]);
}

TEST(FieldForward, Errors) {
    const auto net = init_field(small_field(), 15);
    Rng rng(13);
    EXPECT_THROW(field_forward(random_array({2, 3, 5}, rng), 0.5, net), ShapeError);
    EXPECT_THROW(field_forward(random_array({2, 4, 6}, rng), 0.5, net), ShapeError);
    EXPECT_THROW(field_forward(random_array({2, 3, 6}, rng), 1.5, net), std::domain_error);
    const std::vector<double> one{0.5};
    EXPECT_THROW(field_forward(random_array({2, 3, 6}, rng), one, net), ShapeError);
    FieldConfig bad = small_field();
    bad.heads = 3;
    EXPECT_THROW(init_field(bad, 1), std::invalid_argument);
}

TEST(FieldForward, NoConditioningParameters) {
    const auto net = init_field(FieldConfig{}, 2);
    for (const auto& e : net.params.entries()) {
        EXPECT_EQ(e.name.find("class"), std::string::npos) << e.name;
        EXPECT_EQ(e.name.find("cond"), std::string::npos) << e.name;
        EXPECT_EQ(e.name.rfind("field.", 0), 0u) << e.name;
    }
}

TEST(FieldForward, InitDeterministicUnderSeed) {
    const auto a = init_field(small_field(), 21), b = init_field(small_field(), 21), c = init_field(small_field(), 22);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        EXPECT_TRUE(bit_identical(a.params.entries()[i].value, b.params.entries()[i].value));
        any_diff |= !bit_identical(a.params.entries()[i].value, c.params.entries()[i].value);
    }
    EXPECT_TRUE(any_diff);
}

// ---- training ----

TEST(XfmTrainStep, ExactFieldGivesZeroLoss) {
    // With z_v == z_n the target velocity vanishes; a network whose output layer
    // is zeroed predicts it exactly.
    auto net = init_field(small_field(), 16);
    net.params.value("field.out.w").fill(0.0f);
    net.params.value("field.out.b").fill(0.0f);
    Rng rng(14);
    const auto z = random_array({8, 3, 6}, rng);
    for (auto s : {Schedule::linear, Schedule::cosine}) {
        XfmConfig cfg;
        cfg.schedule = s;
        // loss is evaluated before the update; float rounding of the derivatives leaves ~1e-33
        EXPECT_NEAR(xfm_train_step(z, z, net, cfg, xfm_optimizer_defaults(), 3), 0.0, 1e-20);
    }
}

TEST(XfmTrainStep, LossMatchesManualForward) {
    auto net = init_field(small_field(), 17);
    Rng rng(15);
    const auto zv = random_array({4, 3, 6}, rng), zn = random_array({4, 3, 6}, rng);
    XfmConfig cfg;
    const std::uint64_t seed = 99;
    Rng trng(seed);
    std::vector<double> t(4);
    for (auto& v : t) v = trng.uniform();
    DenseArray zt(zv.shape()), tgt(zv.shape());
    for (std::size_t b = 0; b < 4; ++b) {
        const auto slice_t = interpolate_state(row(zv, b), row(zn, b), t[b], cfg.schedule);
        const auto slice_v = target_field(row(zv, b), row(zn, b), t[b], cfg.schedule);
        for (std::size_t i = 0; i < 18; ++i) {
            zt[b * 18 + i] = slice_t[i];
            tgt[b * 18 + i] = slice_v[i];
        }
    }
    const auto pred = field_forward(zt, t, net);
    double sse = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) sse += (double(pred[i]) - tgt[i]) * (double(pred[i]) - tgt[i]);
    const double want = sse / static_cast<double>(pred.size());
    const double got = xfm_train_step(zv, zn, net, cfg, xfm_optimizer_defaults(), seed);
    EXPECT_NEAR(got, want, 1e-4 * std::max(1.0, want));
}

TEST(XfmTrainStep, DeterministicLossSequence) {
    Rng rng(16);
    const auto zv = random_array({32, 3, 6}, rng), zn = random_array({32, 3, 6}, rng);
    const DenseArray lv({32, 3, 6}, -2.0f);
    XfmConfig cfg;
    cfg.train_steps = 40;
    cfg.batch_size = 8;
    auto a = init_field(small_field(), 18), b = init_field(small_field(), 18);
    const auto la = train_xfm(zv, zn, lv, a, cfg, xfm_optimizer_defaults(), 5);
    const auto lb = train_xfm(zv, zn, lv, b, cfg, xfm_optimizer_defaults(), 5);
    ASSERT_EQ(la.size(), 40u);
    for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la[i], lb[i]);
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        EXPECT_TRUE(bit_identical(a.params.entries()[i].value, b.params.entries()[i].value));
    }
}

TEST(XfmTrainStep, ShapeMismatchAndEmpty) {
    auto net = init_field(small_field(), 19);
    Rng rng(17);
    EXPECT_THROW(xfm_train_step(random_array({4, 3, 6}, rng), random_array({3, 3, 6}, rng), net, XfmConfig{},
                                xfm_optimizer_defaults(), 1),
                 ShapeError);
    XfmConfig zero;
    zero.train_steps = 0;
    EXPECT_THROW(zero.validate(), std::invalid_argument);
    const DenseArray empty({0, 3, 6});
    EXPECT_THROW(train_xfm(empty, empty, empty, net, XfmConfig{}, xfm_optimizer_defaults(), 1),
                 std::invalid_argument);
}

TEST(XfmTrainStep, LossDecreasesOverDeskRun) {
    // Paired synthetic latents: z_n is a fixed linear map of z_v plus noise.
    Rng rng(18);
    const std::size_t n = 256;
    const auto zv = random_array({n, 3, 6}, rng);
    const auto map = random_array({6, 6}, rng, 1.0 / std::sqrt(6.0));
    DenseArray zn({n, 3, 6});
    for (std::size_t r = 0; r < n * 3; ++r) {
        for (std::size_t j = 0; j < 6; ++j) {
            double s = 0;
            for (std::size_t k = 0; k < 6; ++k) s += zv[r * 6 + k] * map[k * 6 + j];
            zn[r * 6 + j] = static_cast<float>(s);
        }
    }
    const DenseArray lv({n, 3, 6}, -4.0f);
    XfmConfig cfg;
    auto net = init_field(small_field(), 20);
    const auto losses = train_xfm(zv, zn, lv, net, cfg, xfm_optimizer_defaults(), 6);
    ASSERT_EQ(losses.size(), 3000u);
    const double first = std::accumulate(losses.begin(), losses.begin() + 100, 0.0) / 100;
    const double last = std::accumulate(losses.end() - 100, losses.end(), 0.0) / 100;
    EXPECT_LT(last, first);
    EXPECT_LT(last, 0.5 * first);
}

// Desk-default network; the tiny test network drifts off the single path under Euler.
TEST(XfmTrainStep, SinglePairTransportConverges) {
    Rng rng(19);
    const auto one_v = random_array({1, 8, 32}, rng), one_n = random_array({1, 8, 32}, rng);
    const std::size_t n = 64;
    DenseArray zv({n, 8, 32}), zn({n, 8, 32});
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t i = 0; i < 256; ++i) {
            zv[r * 256 + i] = one_v[i];
            zn[r * 256 + i] = one_n[i];
        }
    }
    const DenseArray lv({n, 8, 32}, -30.0f);
    XfmConfig cfg;
    cfg.sample_posterior = false;
    auto net = init_field(FieldConfig{}, 21);
    train_xfm(zv, zn, lv, net, cfg, xfm_optimizer_defaults(), 7);
    const auto end = encode_latents(one_v, net, 20);
    EXPECT_LT(rel_error(end, one_n), 1e-2);
    const auto back = decode_latents(one_n, net, 20);
    EXPECT_LT(rel_error(back, one_v), 1e-2);
}
