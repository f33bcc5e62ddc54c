// Command line front end for the label-noise gradient lab.
//
// Subcommands:
//   emit-defaults   print a fully populated default config to stdout
//   verify-theory   closed-form angle map vs Monte-Carlo + concentration gates
//   analyze-init    subset gradient geometry of the untrained network
//   train           one instrumented training run (trace.csv, early_stop.json)
//   sweep           cross product of sweep axes into sweep.csv
//
// Exit codes: 0 success, 1 gate or training failure, 2 usage/config error,
// 3 I/O error.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>

#include <CLI11.hpp>
#include <cleanprio/experiment.hpp>

namespace ex = cleanprio::experiment;
namespace io = cleanprio::io;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitGate = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

fs::path preset_dir() {
    const char* env = std::getenv("CLEANPRIO_PRESET_DIR");
    return env && *env ? fs::path(env) : fs::path("presets");
}

ex::ExperimentConfig resolve_config(const std::string& config_path, const std::string& preset,
                                    const std::string& out_override, std::uint64_t seed_override,
                                    bool have_seed) {
    if (config_path.empty() == preset.empty())
        throw ex::config_error("give exactly one of --config or --preset");
    fs::path path = config_path.empty() ? preset_dir() / (preset + ".json") : fs::path(config_path);
    if (!preset.empty() && !fs::exists(path))
        throw ex::config_error("unknown preset \"" + preset + "\" (no " + path.string() +
                               "; set CLEANPRIO_PRESET_DIR to the preset directory)");
    auto cfg = ex::load_config(path);
    if (!out_override.empty()) cfg.output_dir = out_override;
    if (have_seed) cfg.seed = seed_override;
    return cfg;
}

int cmd_train(const ex::ExperimentConfig& cfg) {
    const fs::path out = cfg.output_dir;
    auto res = ex::run_train(cfg, out);
    std::printf("wrote %s (%zu checkpoints)\n", res.trace_path.c_str(),
                res.trace.checkpoints.size());
    if (res.trace.aborted) {
        std::fprintf(stderr, "training aborted: %s\n", res.trace.abort_reason.c_str());
        return kExitGate;
    }
    if (res.stop) {
        std::printf("wrote %s\n", res.stop_path.c_str());
        std::printf("early stop: step %lld, min test err %s, final %s, below noise level: %s\n",
                    res.stop->stop_step, io::format_double(res.stop->min_test_error).c_str(),
                    io::format_double(res.stop->final_test_error).c_str(),
                    res.stop->below_noise ? "yes" : "no");
    }
    return kExitOk;
}

int cmd_analyze_init(const ex::ExperimentConfig& cfg) {
    const fs::path out = cfg.output_dir;
    auto res = ex::run_analyze_init(cfg, out);
    std::printf("wrote %s\n", res.hist_path.c_str());
    std::printf("wrote %s\n", res.summary_path.c_str());
    for (const auto& row : res.summary.at("classes")) {
        const auto& ratio = row.at("clean_to_noise_ratio");
        std::printf("class %d: clean/noise gradient norm ratio %s\n",
                    row.at("class").get<int>(),
                    ratio.is_null() ? row.at("note").get<std::string>().c_str()
                                    : io::format_double(ratio.get<double>()).c_str());
    }
    const auto& expected = res.summary.at("expected_clean_to_noise_ratio");
    if (!expected.is_null())
        std::printf("count-based prediction: %s\n",
                    io::format_double(expected.get<double>()).c_str());
    return kExitOk;
}

int cmd_sweep(const ex::ExperimentConfig& cfg, std::size_t jobs) {
    const fs::path out = cfg.output_dir;
    auto res = ex::run_sweep(cfg, jobs, out);
    std::size_t aborted = 0;
    for (const auto& row : res.outcome.table) aborted += row.aborted ? 1 : 0;
    std::printf("wrote %s (%zu points, %zu aborted)\n", res.table_path.c_str(),
                res.outcome.table.size(), aborted);
    return kExitOk;
}

int cmd_verify_theory(const ex::VerifyOptions& opt, const std::string& out_override) {
    const fs::path out = out_override.empty() ? fs::path(ex::default_output_dir()) : fs::path(out_override);
    auto res = ex::run_verify_theory(opt, out);
    for (const auto& g : res.summary.at("gates"))
        std::printf("[%s] %s measured=%s threshold=%s\n",
                    g.at("pass").get<bool>() ? "PASS" : "FAIL",
                    g.at("name").get<std::string>().c_str(),
                    io::format_double(g.at("measured").get<double>()).c_str(),
                    io::format_double(g.at("threshold").get<double>()).c_str());
    if (res.summary.contains("width_note"))
        std::printf("note: %s\n", res.summary.at("width_note").get<std::string>().c_str());
    std::printf("wrote %s\n", res.curve_path.c_str());
    std::printf("wrote %s\n", res.summary_path.c_str());
    std::printf("verify-theory: %s\n", res.pass ? "PASS" : "FAIL");
    return res.pass ? kExitOk : kExitGate;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gradient-level laboratory for training dynamics under label noise"};
    app.require_subcommand(1);

    auto* emit = app.add_subcommand("emit-defaults", "print a complete default config as JSON");

    std::string config_path, preset, out_override;
    std::uint64_t seed_override = 0;
    auto add_config_opts = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "path to an experiment config JSON");
        sub->add_option("--preset", preset, "named config from the preset directory");
        sub->add_option("--out", out_override, "output directory (overrides the config)");
        sub->add_option("--seed", seed_override, "master seed (overrides the config)");
    };

    auto* train = app.add_subcommand("train", "run one instrumented training experiment");
    add_config_opts(train);
    auto* init = app.add_subcommand("analyze-init", "gradient geometry at initialization");
    add_config_opts(init);
    auto* sweep = app.add_subcommand("sweep", "run the config's sweep axes");
    add_config_opts(sweep);
    std::size_t jobs = 1;
    sweep->add_option("--jobs", jobs, "worker threads (results are order-stable)");

    ex::VerifyOptions vopt;
    auto* verify = app.add_subcommand("verify-theory",
                                      "check closed-form angle map and concentration gates");
    verify->add_option("--grid", vopt.grid, "grid points across [0, pi]");
    verify->add_option("--width", vopt.width, "hidden width for the Monte-Carlo nets");
    verify->add_option("--trials", vopt.trials, "independent nets per grid point");
    verify->add_option("--depth", vopt.depth, "layer count (2 = one hidden layer)");
    verify->add_option("--seed", vopt.seed, "seed for the Monte-Carlo draws");
    std::string verify_out;
    verify->add_option("--out", verify_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (app.got_subcommand(emit)) {
            std::printf("%s\n", ex::config_json(ex::default_config()).dump(2).c_str());
            return kExitOk;
        }
        if (app.got_subcommand(verify)) return cmd_verify_theory(vopt, verify_out);

        const bool have_seed = train->count("--seed") || init->count("--seed") ||
                               sweep->count("--seed");
        auto cfg = resolve_config(config_path, preset, out_override, seed_override, have_seed);
        if (app.got_subcommand(train)) return cmd_train(cfg);
        if (app.got_subcommand(init)) return cmd_analyze_init(cfg);
        if (app.got_subcommand(sweep)) return cmd_sweep(cfg, jobs);
        throw ex::config_error("no subcommand selected");
    } catch (const ex::config_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const io::io_error& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return kExitIo;
    } catch (const cleanprio::data::idx_error& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return kExitIo;
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return kExitIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return kExitIo;
    }
}
