// memflow: config-driven experiments for path-distribution dependent SDEs
// with exponentially fading memory. See README.md for the config format.

#include "memflow/experiment.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>

int main(int argc, char** argv) {
    CLI::App app{"simulation and verification runs for segment-valued SDEs with fading memory"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int threads = 0;
    bool plots = false;

    for (const std::string& name : memflow::experiment_names()) {
        CLI::App* sub = app.add_subcommand(name, "run the '" + name + "' experiment");
        sub->add_option("--config", config_path, "path to the run-config JSON")->required();
        sub->add_option("--out", out_dir, "output directory (overrides config output_dir)");
        sub->add_option("--seed", seed, "master seed (overrides config seed)")
            ->each([&](const std::string&) { seed_set = true; });
        sub->add_option("--threads", threads, "worker threads (0 = hardware)");
        sub->add_flag("--plots", plots, "emit static SVG plots");
    }

    CLI11_PARSE(app, argc, argv);
    std::string experiment = app.get_subcommands().front()->get_name();

    try {
        memflow::json raw = memflow::read_json_file(config_path);
        memflow::require(raw.contains("experiment") &&
                             raw.at("experiment").get<std::string>() == experiment,
                         memflow::ErrorKind::Config,
                         "config experiment does not match the CLI subcommand '" + experiment +
                             "'");
        memflow::RunOptions opts;
        opts.out_override = out_dir;
        opts.threads = threads;
        opts.plots = plots;
        if (seed_set) opts.seed_override = seed;

        memflow::RunOutcome outcome = memflow::run_experiment(raw, opts);
        long passed = 0, failed = 0;
        for (const auto& c : outcome.summary.at("checks")) {
            bool ok = c.at("pass").get<bool>();
            (ok ? passed : failed) += 1;
            std::cout << (ok ? "[PASS] " : "[FAIL] ") << c.at("name").get<std::string>() << "\n";
        }
        std::cout << "summary: " << (outcome.out_dir / "summary.json").string() << " (" << passed
                  << " checks passed, " << failed << " failed, " << outcome.wall_clock_ms
                  << " ms)\n";
        return outcome.property_failed ? 2 : 0;
    } catch (const memflow::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
