// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.
// Criteria 5-9 train at full desk scale (default corpus, 50 epochs, 3000 steps, seed 0);
// 6-8 reuse the criterion 5 models where the result is identical by determinism.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "gradcheck_cases.hpp"
#include "test_support.hpp"
#include "xflow/checkpoint.hpp"
#include "xflow/config.hpp"
#include "xflow/flowsolver.hpp"
#include "xflow/metrics.hpp"
#include "xflow/objectives.hpp"
#include "xflow/synthdata.hpp"

namespace fs = std::filesystem;
using namespace xflow;
using xflow::testing::random_array;
using xflow::testing::random_array_t;

namespace {

int failures = 0;

void verdict(int id, bool ok, const std::string& detail) {
    std::printf("criterion %d: %s  %s\n", id, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <class T>
double max_abs_diff(const BasicDenseArray<T>& a, const BasicDenseArray<T>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

template <class T>
double rel_error(const BasicDenseArray<T>& got, const BasicDenseArray<T>& want) {
    double d = 0, w = 0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        d += (double(got[i]) - want[i]) * (double(got[i]) - want[i]);
        w += double(want[i]) * want[i];
    }
    return std::sqrt(d / w);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

// ---- 1: gradients ----

void gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    auto cases = xflow::testing::numcore_grad_cases();
    for (auto& c : xflow::testing::objective_grad_cases()) cases.push_back(std::move(c));
    double worst = 0;
    std::size_t bad = 0, runs = 0;
    std::string where;
    for (const auto& c : cases) {
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            const auto r = c.run(seed);
            ++runs;
            if (!r.ok()) {
                ++bad;
                where = c.name + " seed " + std::to_string(seed);
            }
            worst = std::max(worst, r.max_rel_error);
        }
    }
    const double secs = seconds_since(t0);
    verdict(1, bad == 0 && secs < 60.0,
            std::to_string(runs) + " checks, max rel " + fmt("%.2e", worst) + ", " + fmt("%.1f", secs) + "s" +
                (bad ? ", first failure " + where : ""));
}

// ---- 2: objectives ----

void objectives() {
    double closed_worst = 0;
    for (std::uint64_t c = 0; c < 100; ++c) {
        Rng r(500 + c);
        const std::size_t b = 1 + r.below(4), d = 1 + r.below(8);
        const auto mu = random_array_t<double>({b, d}, r, 1.5);
        const auto lv = random_array_t<double>({b, d}, r, 1.0);
        double s = 0;
        for (std::size_t i = 0; i < mu.size(); ++i) s += mu[i] * mu[i] + std::exp(lv[i]) - 1.0 - lv[i];
        const double oracle = 0.5 * s / double(b);
        closed_worst = std::max(closed_worst, std::abs(kl_divergence(mu, lv) - oracle));
    }

    const std::size_t samples = 1000000;
    int outside = 0;
    for (std::uint64_t c = 0; c < 100; ++c) {
        Rng r(1000 + c);
        const auto mu = random_array_t<double>({1, 3}, r, 0.8);
        const auto lv = random_array_t<double>({1, 3}, r, 0.5);
        double sum = 0, sum2 = 0;
        for (std::size_t s = 0; s < samples; ++s) {
            double log_ratio = 0;
            for (std::size_t k = 0; k < 3; ++k) {
                const double eps = r.normal();
                const double z = mu[k] + std::exp(0.5 * lv[k]) * eps;
                log_ratio += -0.5 * lv[k] - 0.5 * eps * eps + 0.5 * z * z;
            }
            sum += log_ratio;
            sum2 += log_ratio * log_ratio;
        }
        const double mean = sum / samples;
        const double se = std::sqrt((sum2 / samples - mean * mean) / samples);
        if (std::abs(mean - kl_divergence(mu, lv)) > 3.0 * se) ++outside;
    }

    double sum_worst = 0;
    for (std::uint64_t c = 0; c < 100; ++c) {
        Rng r(2000 + c);
        const Shape shape{1 + r.below(5), 1 + r.below(4), 1 + r.below(9)};
        const auto a = random_array_t<double>(shape, r), b = random_array_t<double>(shape, r);
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        const double oracle = s / double(a.size());
        sum_worst = std::max({sum_worst, std::abs(mse_loss(a, b) - oracle), std::abs(fm_loss(a, b) - oracle)});
    }
    verdict(2, closed_worst < 1e-6 && outside == 0 && sum_worst < 1e-6,
            "kl closed form max err " + fmt("%.1e", closed_worst) + ", mc outside 3se " + std::to_string(outside) +
                "/100, mse/fm max err " + fmt("%.1e", sum_worst));
}

// ---- 3: schedules ----

void schedules() {
    double worst = 0;
    Rng rng(7);
    for (auto s : {Schedule::linear, Schedule::cosine}) {
        for (int i = 0; i < 1000; ++i) {
            const double t = i == 0 ? 0.0 : i == 999 ? 1.0 : rng.uniform();
            const auto v = schedule_eval(s, t);
            worst = std::max({worst, std::abs(v.alpha + v.sigma - 1.0), std::abs(v.dalpha_dt + v.dsigma_dt)});
            if (s == Schedule::cosine) {
                const double c = std::cos(std::numbers::pi * t / 2);
                worst = std::max({worst, std::abs(v.alpha - c * c),
                                  std::abs(v.dsigma_dt - std::numbers::pi / 2 * std::sin(std::numbers::pi * t))});
            } else {
                worst = std::max({worst, std::abs(v.alpha - (1.0 - t)), std::abs(v.dsigma_dt - 1.0)});
            }
        }
        const auto a = schedule_eval(s, 0.0), b = schedule_eval(s, 1.0);
        worst = std::max({worst, std::abs(a.alpha - 1.0), std::abs(a.sigma), std::abs(b.alpha), std::abs(b.sigma - 1.0)});
    }
    verdict(3, worst < 1e-12, "2000 evaluations, max identity err " + fmt("%.1e", worst));
}

// ---- 4: solver ----

void solver() {
    Rng rng(11);
    const auto z0 = random_array({8, 8, 32}, rng), z1 = random_array({8, 8, 32}, rng);
    DenseArray v(z0.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = z1[i] - z0[i];
    const VelocityField constant = [v](const DenseArray&, double) { return v; };
    double const_err = 0;
    for (std::size_t steps : {1u, 20u, 100u}) {
        const_err = std::max(const_err, max_abs_diff(integrate(z0, constant, {Direction::encode, steps, false}).end, z1));
        const_err = std::max(const_err, max_abs_diff(integrate(z1, constant, {Direction::decode, steps, false}).end, z0));
    }

    const auto d0 = random_array_t<double>({8, 8, 32}, rng), d1 = random_array_t<double>({8, 8, 32}, rng);
    const BasicVelocityField<double> cosine = [&](const BasicDenseArray<double>&, double t) {
        BasicDenseArray<double> out(d0.shape());
        const double s = std::numbers::pi / 2 * std::sin(std::numbers::pi * t);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * (d1[i] - d0[i]);
        return out;
    };
    auto solve = [&](std::size_t steps) { return integrate(d0, cosine, {Direction::encode, steps, false}).end; };
    const auto ref = solve(10000);
    const double at20 = rel_error(solve(20), d1);
    double min_ratio = 1e300;
    double prev = rel_error(solve(10), ref);
    for (std::size_t steps : {20u, 40u, 80u}) {
        const double e = rel_error(solve(steps), ref);
        min_ratio = std::min(min_ratio, prev / e);
        prev = e;
    }

    const VelocityField cosine_f = [&](const DenseArray&, double t) {
        DenseArray out(z0.shape());
        const double s = std::numbers::pi / 2 * std::sin(std::numbers::pi * t);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(s * (double(z1[i]) - z0[i]));
        return out;
    };
    const auto there = integrate(z0, cosine_f, {Direction::encode, 20, false}).end;
    const double round_trip = max_abs_diff(integrate(there, cosine_f, {Direction::decode, 20, false}).end, z0);

    verdict(4, const_err < 1e-5 && at20 < 1e-2 && min_ratio >= 1.5 && round_trip < 1e-6,
            "constant " + fmt("%.1e", const_err) + ", cosine@20 rel " + fmt("%.2e", at20) + ", min halving ratio " +
                fmt("%.2f", min_ratio) + ", time-only round trip " + fmt("%.1e", round_trip));
}

// ---- 5-9: pipeline ----

struct Trained {
    GeneratedCorpus corpus;
    ParamStore vae;
    FieldNetwork field;
    RoundtripReport report;
    double seconds = 0;
};

Trained train_and_eval(const RunConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto p = cfg.pipeline();
    Trained t;
    t.corpus = generate(cfg.data);
    t.vae = fit_vae(t.corpus.train, p.vae, p.vae_train, p.seed);
    t.field = fit_xfm(t.corpus.train, t.vae, p.vae, p.field, p.xfm, p.xfm_optimizer, p.seed);
    t.report = roundtrip_consistency(t.corpus.test, t.vae, p.vae, t.field, p.flow_steps, p.retrieval);
    t.seconds = seconds_since(t0);
    return t;
}

bool meets_c5(const RoundtripReport& r) {
    return r.enc_retrieval.top1_accuracy >= 0.90 && r.dec_retrieval.top1_accuracy >= 0.90 && r.rev_error < 0.05;
}

std::string describe(const RoundtripReport& r) {
    return "enc " + fmt("%.3f", r.enc_retrieval.top1_accuracy) + " dec " + fmt("%.3f", r.dec_retrieval.top1_accuracy) +
           " rev " + fmt("%.4f", r.rev_error);
}

void pipeline() {
    RunConfig cfg;
    cfg.finalize();
    const auto p = cfg.pipeline();

    std::printf("training criterion 5 pipeline (default corpus, %zu epochs, %zu steps, seed %llu)\n", p.vae.epochs,
                p.xfm.train_steps, static_cast<unsigned long long>(p.seed));
    std::fflush(stdout);
    const Trained first = train_and_eval(cfg);
    const GeneratedCorpus* corpus = &first.corpus;
    verdict(5, meets_c5(first.report) && first.seconds < 900.0,
            describe(first.report) + " pool " + std::to_string(first.report.enc_retrieval.candidate_count) + ", wall " +
                fmt("%.1f", first.seconds) + "s");

    // 6: full, no_xfm and vae_lrs share the criterion 5 stage 1 and flow; the
    // other variants train their own stage 1.
    {
        const auto& train = corpus->train;
        const auto& test = corpus->test;
        const DenseArray z_n = neural_latents(test, first.vae, p.vae);
        const RetrievalReport full_raw = top1_retrieval(z_n, test.visual, p.retrieval);
        const RetrievalReport full_syn = synthetic_retrieval(encode_latents(test.visual, first.field, p.flow_steps),
                                                             test.visual, first.vae, p.vae, p.retrieval);
        const auto lrs = evaluate_variant(Variant::vae_lrs, train, test, first.vae, p.vae, p, p.flow_steps);
        const auto grid = run_ablation(train, test, p, cfg.budget(),
                                       {Variant::vae_mse, Variant::no_kl, Variant::no_clip_cyc});
        const auto& mse = grid.results[0];
        const auto& no_kl = grid.results[1];
        const auto& no_cc = grid.results[2];
        const bool ran = mse.ok && no_kl.ok && no_cc.ok;
        const double f = full_syn.top1_accuracy, l = lrs.synthetic.top1_accuracy;
        const double m = ran ? mse.synthetic.top1_accuracy : 0, k = ran ? no_kl.synthetic.top1_accuracy : 0;
        const double raw_cc = ran ? no_cc.raw.top1_accuracy : 1, chance = full_raw.chance();
        const bool order = f > l && l > m;
        const bool kl = k < 0.5 * f;
        const bool collapse = raw_cc <= 2.0 * chance;
        verdict(6, ran && order && kl && collapse,
                "syn full " + fmt("%.3f", f) + " > lrs " + fmt("%.3f", l) + " > mse " + fmt("%.3f", m) +
                    (order ? " ok" : " NO") + "; no_kl " + fmt("%.3f", k) + " < 0.5 full" + (kl ? " ok" : " NO") +
                    "; no_clip_cyc raw " + fmt("%.3f", raw_cc) + " vs chance " + fmt("%.3f", chance) + " (full raw " +
                    fmt("%.3f", full_raw.top1_accuracy) + ")" + (collapse ? " ok" : " NO"));
    }

    // 7: solver step sweep on the criterion 5 models.
    {
        double enc[3], dec[3];
        const std::size_t steps[3] = {10, 20, 30};
        for (int i = 0; i < 3; ++i) {
            const auto r = steps[i] == p.flow_steps
                               ? first.report
                               : roundtrip_consistency(corpus->test, first.vae, p.vae, first.field, steps[i], p.retrieval);
            enc[i] = r.enc_retrieval.top1_accuracy;
            dec[i] = r.dec_retrieval.top1_accuracy;
        }
        bool ok = true;
        for (const double* a : {enc, dec}) ok = ok && std::abs(a[1] - a[2]) <= 0.02 && std::abs(a[0] - a[1]) <= 0.05;
        verdict(7, ok,
                "enc 10/20/30 " + fmt("%.3f", enc[0]) + "/" + fmt("%.3f", enc[1]) + "/" + fmt("%.3f", enc[2]) +
                    ", dec " + fmt("%.3f", dec[0]) + "/" + fmt("%.3f", dec[1]) + "/" + fmt("%.3f", dec[2]));
    }

    // 8: linear schedule on the same stage 1.
    {
        auto lin = p;
        lin.xfm.schedule = Schedule::linear;
        const auto net = fit_xfm(corpus->train, first.vae, p.vae, lin.field, lin.xfm, lin.xfm_optimizer, lin.seed);
        const auto r = roundtrip_consistency(corpus->test, first.vae, p.vae, net, p.flow_steps, p.retrieval);
        const bool both = meets_c5(first.report) && meets_c5(r);
        const bool cos_ok = first.report.dec_retrieval.top1_accuracy >= r.dec_retrieval.top1_accuracy - 0.02;
        verdict(8, both && cos_ok, "cosine " + describe(first.report) + "; linear " + describe(r));
    }

    // 9: repeat criterion 5 from scratch and compare bytes.
    {
        const auto dir = fs::temp_directory_path() / "xflow_acceptance";
        fs::create_directories(dir);
        const Trained second = train_and_eval(cfg);
        save_vae((dir / "vae_a.xfck").string(), first.vae, p.vae, p.seed);
        save_vae((dir / "vae_b.xfck").string(), second.vae, p.vae, p.seed);
        save_field((dir / "xfm_a.xfck").string(), first.field, p.xfm.schedule, p.seed);
        save_field((dir / "xfm_b.xfck").string(), second.field, p.xfm.schedule, p.seed);
        const bool vae_same = slurp((dir / "vae_a.xfck").string()) == slurp((dir / "vae_b.xfck").string());
        const bool xfm_same = slurp((dir / "xfm_a.xfck").string()) == slurp((dir / "xfm_b.xfck").string());
        const bool report_same = first.report.to_json().dump() == second.report.to_json().dump();
        fs::remove_all(dir);
        verdict(9, vae_same && xfm_same && report_same,
                std::string("vae checkpoint ") + (vae_same ? "identical" : "differs") + ", xfm checkpoint " +
                    (xfm_same ? "identical" : "differs") + ", report " + (report_same ? "identical" : "differs"));
    }
}

}  // namespace

int main() {
    gradients();
    objectives();
    schedules();
    solver();
    pipeline();
    std::printf("%d of 9 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
