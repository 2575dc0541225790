#include <cstdio>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dposim/experiment.hpp"

namespace {

int cmd_run(const std::string& target, const std::string& config_file, std::string out_dir,
            const std::string& seeds, const std::vector<std::string>& overrides) {
    if (target.empty() == config_file.empty()) {
        std::cerr << "run: give exactly one of a preset name or --config FILE\n";
        return 2;
    }
    if (out_dir.empty()) {
        if (const char* env = std::getenv("DPOSIM_OUT_DIR")) out_dir = env;
    }
    if (out_dir.empty()) {
        std::cerr << "run: --out DIR is required (or set DPOSIM_OUT_DIR)\n";
        return 2;
    }
    dposim::ExperimentConfig cfg = config_file.empty() ? dposim::preset(target) : dposim::parse_config_file(config_file);
    if (!seeds.empty()) cfg.seeds = dposim::parse_seed_list(seeds);
    for (const auto& o : overrides) dposim::apply_override(cfg, o);
    cfg.validate();

    const dposim::ExperimentResult res = dposim::run_experiment(cfg);
    dposim::write_outputs(res, out_dir);
    const auto manifest = dposim::manifest_json(res);
    std::cout << cfg.name << ": " << res.cells.size() << " cells -> " << out_dir << '\n';
    for (const auto& v : manifest["verdicts"]) std::cout << "  " << v.get<std::string>() << '\n';
    for (const auto& f : res.failures) std::cout << "  FAIL " << f << '\n';
    return dposim::exit_status(res);
}

int cmd_verify() {
    bool ok = true;
    for (const auto& row : dposim::verify_all()) {
        std::printf("%-22s %-4s %s\n", row.name.c_str(), row.passed ? "pass" : "FAIL", row.detail.c_str());
        ok = ok && row.passed;
    }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DPO on finite bandits: presets, theorem checks and metrics output"};
    app.set_version_flag("--version", std::string("dposim ") + dposim::kVersion);
    app.require_subcommand(1);

    std::string target, config_file, out_dir, seeds;
    std::vector<std::string> overrides;
    auto* run = app.add_subcommand("run", "run a preset or config file and write metrics.csv, rewards.csv, manifest.json");
    run->add_option("preset", target, "preset name (see list-presets)");
    run->add_option("--config", config_file, "key=value config file");
    run->add_option("--out", out_dir, "output directory (default: $DPOSIM_OUT_DIR)");
    run->add_option("--seeds", seeds, "comma-separated seeds, a..b ranges allowed");
    run->add_option("--override", overrides, "key=value applied after the preset or file")->take_all();

    auto* verify = app.add_subcommand("verify", "run every theorem check and property sweep");
    auto* list = app.add_subcommand("list-presets", "print preset names");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) return cmd_run(target, config_file, out_dir, seeds, overrides);
        if (*verify) return cmd_verify();
        if (*list) {
            for (const auto& n : dposim::preset_names()) std::cout << n << '\n';
            return 0;
        }
    } catch (const dposim::UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const dposim::IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
