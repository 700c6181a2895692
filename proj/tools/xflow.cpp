// xflow command-line driver: data generation, both training stages,
// bidirectional inference, evaluation, ablations and trajectory export.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xflow/checkpoint.hpp"
#include "xflow/config.hpp"
#include "xflow/flowsolver.hpp"
#include "xflow/metrics.hpp"
#include "xflow/synthdata.hpp"

namespace fs = std::filesystem;
using namespace xflow;
using nlohmann::json;

namespace {

inline constexpr std::uint16_t kLatentVersion = 1;

struct Options {
    std::string config_path;
    std::string dataset;
    std::string out;
    std::string schedule;
    std::uint64_t seed = 0;
    std::size_t steps = 0;
    std::vector<std::string> variants;
    std::vector<std::string> overrides;
    std::string direction = "encode";
    std::size_t count = 4;
    bool seed_set = false;
    bool steps_set = false;
};

// Config file first, then flags, then key=value overrides.
RunConfig resolve(const Options& o) {
    RunConfig cfg;
    if (!o.config_path.empty()) cfg = load_config(o.config_path);
    if (!o.dataset.empty()) cfg.dataset = o.dataset;
    if (!o.out.empty()) cfg.out_dir = o.out;
    if (!o.schedule.empty()) apply_assignment(cfg, "xfm.schedule=" + o.schedule);
    if (o.seed_set) cfg.seed = o.seed;
    if (o.steps_set) cfg.solve.steps = o.steps;
    for (const auto& kv : o.overrides) apply_assignment(cfg, kv);
    cfg.finalize();
    return cfg;
}

std::string out_path(const RunConfig& cfg, const std::string& name) { return (fs::path(cfg.out_dir) / name).string(); }

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw io::FormatError(io::ErrorKind::io, "cannot open '" + path + "' for writing");
    f << text;
    if (!f) throw io::FormatError(io::ErrorKind::io, "write to '" + path + "' failed");
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// <out>/<command>.manifest.json; everything but wall_seconds is a function of config and seed.
void write_manifest(const RunConfig& cfg, const std::string& command, const std::vector<std::string>& artifacts,
                    double seconds) {
    json m{{"command", command},
           {"config_hash", config_hash(cfg)},
           {"seed", cfg.seed},
           {"versions",
            {{"xflow", kVersion},
             {"dataset_format", kDatasetVersion},
             {"checkpoint_format", kCheckpointVersion},
             {"latent_format", kLatentVersion}}},
           {"config", config_json(cfg)},
           {"artifacts", artifacts},
           {"wall_seconds", seconds}};
    write_json(out_path(cfg, command + ".manifest.json"), m);
}

GeneratedCorpus load_data(const RunConfig& cfg) { return read_corpus(cfg.train_path(), cfg.test_path()); }

// Latent dump: "XFLT" | u16 version | u32 header length | {"shape", "direction", "steps"} | float32.

void write_latents(const std::string& path, const DenseArray& z, const std::string& direction, std::size_t steps) {
    io::Writer w;
    w.frame("XFLT", kLatentVersion, json{{"shape", z.shape()}, {"direction", direction}, {"steps", steps}});
    w.floats(z.data());
    w.save(path);
}

int run(const std::string& command, const Options& o) {
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig cfg = resolve(o);
    fs::create_directories(cfg.out_dir);
    std::vector<std::string> artifacts;
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

    if (command == "gen-data") {
        if (fs::path(cfg.dataset).has_parent_path()) fs::create_directories(fs::path(cfg.dataset).parent_path());
        const auto corpus = generate(cfg.data);
        write_dataset(corpus.train, cfg.train_path());
        write_dataset(corpus.test, cfg.test_path());
        artifacts = {cfg.train_path(), cfg.test_path()};
    } else if (command == "train-vae") {
        const auto corpus = load_data(cfg);
        json log = json::array();
        const ParamStore vae = fit_vae(corpus.train, cfg.vae, cfg.vae_train, cfg.seed, [&](const VaeEpochLog& l) {
            log.push_back({{"epoch", l.epoch},
                           {"mse", l.mean.mse},
                           {"kl", l.mean.kl},
                           {"clip", l.mean.clip},
                           {"cyc", l.mean.cyc},
                           {"pull", l.mean.pull},
                           {"total", l.mean.total}});
        });
        save_vae(out_path(cfg, "vae.xfck"), vae, cfg.vae, cfg.seed);
        write_json(out_path(cfg, "vae_log.json"), log);
        artifacts = {out_path(cfg, "vae.xfck"), out_path(cfg, "vae_log.json")};
    } else if (command == "train-xfm") {
        const auto corpus = load_data(cfg);
        const auto vae = load_vae(out_path(cfg, "vae.xfck"));
        std::vector<double> losses;
        const FieldNetwork net = fit_xfm(corpus.train, vae.params, vae.config, cfg.field, cfg.xfm, cfg.xfm_optimizer,
                                         cfg.seed, [&](std::size_t, double l) { losses.push_back(l); });
        if (!losses.empty() && !std::isfinite(losses.back())) {
            throw NumericError("train-xfm: loss diverged");
        }
        save_field(out_path(cfg, "xfm.xfck"), net, cfg.xfm.schedule, cfg.seed);
        write_json(out_path(cfg, "xfm_log.json"), json{{"loss", losses}});
        artifacts = {out_path(cfg, "xfm.xfck"), out_path(cfg, "xfm_log.json")};
    } else if (command == "encode" || command == "decode") {
        const auto corpus = load_data(cfg);
        const auto vae = load_vae(out_path(cfg, "vae.xfck"));
        const auto field = load_field(out_path(cfg, "xfm.xfck"));
        const DenseArray z_n = neural_latents(corpus.test, vae.params, vae.config);
        const DenseArray& z_v = corpus.test.visual;
        const bool enc = command == "encode";
        const DenseArray z = enc ? encode_latents(z_v, field.network, cfg.solve.steps)
                                 : decode_latents(z_n, field.network, cfg.solve.steps);
        const auto report = enc ? top1_retrieval(z, z_n, cfg.retrieval) : top1_retrieval(z, z_v, cfg.retrieval);
        const std::string stem = enc ? "encoded" : "decoded";
        write_latents(out_path(cfg, stem + ".xflt"), z, command, cfg.solve.steps);
        write_json(out_path(cfg, stem + "_report.json"),
                   json{{enc ? "enc_retrieval" : "dec_retrieval", report.to_json()}, {"steps", cfg.solve.steps}});
        artifacts = {out_path(cfg, stem + ".xflt"), out_path(cfg, stem + "_report.json")};
    } else if (command == "eval") {
        const auto corpus = load_data(cfg);
        const auto vae = load_vae(out_path(cfg, "vae.xfck"));
        const auto field = load_field(out_path(cfg, "xfm.xfck"));
        const DenseArray z_n = neural_latents(corpus.test, vae.params, vae.config);
        const auto rt = roundtrip_consistency(corpus.test, vae.params, vae.config, field.network, cfg.solve.steps,
                                              cfg.retrieval);
        const auto syn = synthetic_retrieval(encode_latents(corpus.test.visual, field.network, cfg.solve.steps),
                                             corpus.test.visual, vae.params, vae.config, cfg.retrieval);
        json report = rt.to_json();
        report["raw_retrieval"] = top1_retrieval(z_n, corpus.test.visual, cfg.retrieval).to_json();
        report["synthetic_retrieval"] = syn.to_json();
        report["two_way_identification"] = two_way_identification(z_n, corpus.test.visual, cfg.retrieval.seed, true);
        report["schedule"] = schedule_name(field.schedule);
        write_json(out_path(cfg, "eval_report.json"), report);
        artifacts = {out_path(cfg, "eval_report.json")};
    } else if (command == "ablate") {
        const auto corpus = load_data(cfg);
        std::vector<Variant> variants;
        for (const auto& name : o.variants) {
            if (name == "all") {
                variants = all_variants();
                break;
            }
            variants.push_back(parse_variant(name));
        }
        if (variants.empty()) variants = all_variants();
        const auto grid = run_ablation(corpus.train, corpus.test, cfg.pipeline(), cfg.budget(), variants);
        write_json(out_path(cfg, "ablation.json"), grid.to_json());
        write_text(out_path(cfg, "ablation.csv"), grid.to_csv());
        artifacts = {out_path(cfg, "ablation.json"), out_path(cfg, "ablation.csv")};
        for (const auto& r : grid.results) {
            if (!r.ok) std::cerr << json{{"warning", "variant failed"}, {"variant", variant_name(r.variant)}, {"error", r.error}}.dump() << "\n";
        }
    } else if (command == "trajectory") {
        const auto corpus = load_data(cfg);
        const auto vae = load_vae(out_path(cfg, "vae.xfck"));
        const auto field = load_field(out_path(cfg, "xfm.xfck"));
        const Direction dir = o.direction == "decode" ? Direction::decode : Direction::encode;
        if (o.direction != "encode" && o.direction != "decode") {
            throw std::invalid_argument("--direction must be encode or decode, got '" + o.direction + "'");
        }
        const DenseArray source = dir == Direction::encode ? corpus.test.visual
                                                           : neural_latents(corpus.test, vae.params, vae.config);
        const std::size_t count = std::min<std::size_t>(std::max<std::size_t>(o.count, 1), source.dim(0));
        std::vector<std::size_t> rows(count);
        for (std::size_t i = 0; i < count; ++i) rows[i] = i;
        const SolveSpec spec{dir, cfg.solve.steps, true};
        const auto result = integrate(gather_rows(source, rows), network_field(field.network), spec);
        const std::string stem = out_path(cfg, "trajectory_" + direction_name(dir));
        write_trajectory(*result.trajectory, spec, stem);
        artifacts = {stem + ".csv", stem + ".json"};
    }
    write_manifest(cfg, command, artifacts, elapsed());
    std::cout << json{{"command", command}, {"artifacts", artifacts}}.dump() << "\n";
    return 0;
}

std::string error_kind(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    if (const auto* f = dynamic_cast<const io::FormatError*>(&e)) return std::string(io::kind_name(f->kind()));
    if (dynamic_cast<const NumericError*>(&e)) return "divergence";
    if (dynamic_cast<const ShapeError*>(&e)) return "shape";
    if (dynamic_cast<const fs::filesystem_error*>(&e)) return "io";
    return "invalid_argument";
}

std::string config_key_help() {
    RunConfig defaults;
    defaults.finalize();
    std::string s = "\nConfig keys (file lines or key=value overrides), with defaults:\n";
    for (const auto& k : config_keys()) {
        s += "  " + k.key + " = " + k.get(defaults) + "    " + k.doc + "\n";
    }
    s += "\nEnvironment: XFLOW_THREADS caps worker threads for ablate.\n";
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-modal flow matching between visual and neural latents"};
    app.require_subcommand(1);
    app.footer(config_key_help());
    Options o;
    std::string command;

    const std::vector<std::pair<std::string, std::string>> commands{
        {"gen-data", "generate the synthetic paired corpus"},
        {"train-vae", "stage 1: train the variational encoder/decoder"},
        {"train-xfm", "stage 2: train the flow field on frozen latents"},
        {"encode", "flow test z_v to neural latents (t: 0 -> 1)"},
        {"decode", "flow test z_n to visual latents (t: 1 -> 0)"},
        {"eval", "round-trip retrieval and reversibility report"},
        {"ablate", "train and evaluate the ablation grid"},
        {"trajectory", "export an ODE trajectory as CSV"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", o.config_path, "flat key = value config file");
        sub->add_option("--dataset", o.dataset, "dataset stem (default: run.dataset = data/corpus)");
        sub->add_option("--out", o.out, "output directory (default: run.out = out)");
        sub->add_option("--seed", o.seed, "run seed (default: run.seed = 0)")->each([&](const std::string&) {
            o.seed_set = true;
        });
        sub->add_option("--steps", o.steps, "Euler steps (default: solve.steps = 20)")->each([&](const std::string&) {
            o.steps_set = true;
        });
        sub->add_option("--schedule", o.schedule, "linear or cosine (default: xfm.schedule = cosine)")
            ->check(CLI::IsMember({"linear", "cosine"}));
        if (name == "ablate") {
            sub->add_option("--variant", o.variants,
                            "variant name, repeatable; full no_zc no_kl no_cyc no_clip_cyc no_xfm vae_mse vae_lrs or all "
                            "(default: all)");
        }
        if (name == "trajectory") {
            sub->add_option("--direction", o.direction, "encode or decode")->capture_default_str();
            sub->add_option("--count", o.count, "test items traced")->capture_default_str();
        }
        sub->add_option("overrides", o.overrides, "key=value config overrides");
        sub->callback([&command, name = name] { command = name; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << json{{"error", "usage"}, {"message", e.what()}}.dump() << "\n";
        return 1;
    }

    try {
        return run(command, o);
    } catch (const std::exception& e) {
        std::cerr << json{{"error", error_kind(e)}, {"command", command}, {"message", e.what()}}.dump() << "\n";
        return 1;
    }
}
