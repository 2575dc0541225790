#pragma once

// Named experiment presets, flat key=value configs, a worker pool over
// (series, seed) cells, and CSV / JSON emission.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dposim/analysis.hpp"
#include "dposim/core.hpp"
#include "dposim/random.hpp"
#include "dposim/samplers.hpp"
#include "dposim/trainer.hpp"

namespace dposim {

inline constexpr const char* kVersion = "0.1.0";

/// Bad preset name, unknown config key or malformed value.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class RewardDist { Normal, Uniform, Fixed };

/// How the configured eta maps to the step size actually used.
/// condition1: eta / (beta^2 A). per-beta2: eta / beta^2.
enum class EtaUnits { Absolute, ConditionOne, PerBetaSquared };

namespace detail {

inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': not a number: " + v);
    }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
        throw UsageError("config key '" + key + "': not a nonnegative integer: " + v);
    }
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw UsageError("config key '" + key + "': integer out of range: " + v);
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw UsageError("config key '" + key + "': expected true or false, got " + v);
}

}  // namespace detail

/// Comma-separated integers; `a..b` expands to the inclusive range.
inline std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    for (const auto& item : detail::split(text, ',')) {
        if (const auto dots = item.find(".."); dots != std::string::npos) {
            const auto lo = detail::parse_uint("seeds", item.substr(0, dots));
            const auto hi = detail::parse_uint("seeds", item.substr(dots + 2));
            if (hi < lo) throw UsageError("empty seed range: " + item);
            for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
        } else {
            seeds.push_back(detail::parse_uint("seeds", item));
        }
    }
    if (seeds.empty()) throw UsageError("seed list is empty");
    return seeds;
}

inline std::string format_seed_list(const std::vector<std::uint64_t>& seeds) {
    std::string out;
    for (std::size_t i = 0; i < seeds.size();) {
        std::size_t j = i;
        while (j + 1 < seeds.size() && seeds[j + 1] == seeds[j] + 1) ++j;
        if (!out.empty()) out += ',';
        out += std::to_string(seeds[i]);
        if (j - i >= 2) {
            out += ".." + std::to_string(seeds[j]);
        } else if (j > i) {
            for (std::size_t k = i + 1; k <= j; ++k) out += ',' + std::to_string(seeds[k]);
        }
        i = j + 1;
    }
    return out;
}

struct CheckRequest {
    std::string series;
    Theorem theorem = Theorem::Thm1;
};

/// Fully resolved experiment. Every field has a config key; see `set`.
struct ExperimentConfig {
    std::string name = "custom";

    std::size_t actions = 20;
    RewardDist rewards = RewardDist::Normal;
    Vector reward_values;
    double beta = 3.0;
    std::size_t contexts = 1;
    /// When set, every cell shares the instance drawn from this seed.
    std::optional<std::uint64_t> instance_seed;

    GradientMode mode = GradientMode::Exact;
    double eta = 1.0;
    EtaUnits eta_units = EtaUnits::ConditionOne;
    std::size_t iterations = 100;
    double noise_sigma = 0.0;
    std::size_t batch_size = 1;
    std::size_t record_every = 1;

    std::vector<std::string> samplers{"unif"};
    /// Optional per-series eta (same units as eta); one entry per sampler.
    Vector series_etas;
    double r_max = 1.0;
    double total_alpha = 0.0;

    std::vector<std::uint64_t> seeds{41, 42, 43};
    std::vector<CheckRequest> checks;
    /// When positive, start at the optimum shifted so consecutive-action deltas
    /// alternate 0.6 eps, 0.4 eps.
    double init_perturbation = 0.0;
    bool lower_bound_audit = false;
    bool divergence_fatal = false;
    std::size_t workers = 0;

    void set(const std::string& key, const std::string& raw);
    std::string to_text() const;
    void validate() const;

    std::string series_label(std::size_t i) const {
        if (series_etas.empty()) return samplers[i];
        char buf[40];
        std::snprintf(buf, sizeof buf, "@%.6g", series_etas[i]);
        return samplers[i] + buf;
    }

    double series_eta(std::size_t i) const { return series_etas.empty() ? eta : series_etas[i]; }

    double effective_eta(double configured) const {
        switch (eta_units) {
            case EtaUnits::Absolute: return configured;
            case EtaUnits::ConditionOne: return configured / (beta * beta * static_cast<double>(actions));
            case EtaUnits::PerBetaSquared: return configured / (beta * beta);
        }
        return configured;
    }
};

inline const char* to_string(RewardDist d) {
    switch (d) {
        case RewardDist::Normal: return "normal";
        case RewardDist::Uniform: return "uniform";
        case RewardDist::Fixed: return "fixed";
    }
    return "?";
}

inline const char* to_string(EtaUnits u) {
    switch (u) {
        case EtaUnits::Absolute: return "absolute";
        case EtaUnits::ConditionOne: return "condition1";
        case EtaUnits::PerBetaSquared: return "per-beta2";
    }
    return "?";
}

inline void ExperimentConfig::set(const std::string& key, const std::string& raw) {
    const std::string v = detail::trim(raw);
    auto vec = [&] {
        Vector out;
        for (const auto& s : detail::split(v, ',')) out.push_back(detail::parse_double(key, s));
        return out;
    };
    try {
        if (key == "name") {
            if (v.empty()) throw UsageError("name must not be empty");
            name = v;
        } else if (key == "actions") {
            actions = detail::parse_uint(key, v);
        } else if (key == "rewards") {
            if (v == "normal") rewards = RewardDist::Normal;
            else if (v == "uniform") rewards = RewardDist::Uniform;
            else if (v == "fixed") rewards = RewardDist::Fixed;
            else throw UsageError("rewards must be normal, uniform or fixed: " + v);
        } else if (key == "reward_values") {
            reward_values = v == "none" ? Vector{} : vec();
        } else if (key == "beta") {
            beta = detail::parse_double(key, v);
        } else if (key == "contexts") {
            contexts = detail::parse_uint(key, v);
        } else if (key == "instance_seed") {
            if (v == "none") instance_seed.reset();
            else instance_seed = detail::parse_uint(key, v);
        } else if (key == "mode") {
            mode = parse_gradient_mode(v);
        } else if (key == "eta") {
            eta = detail::parse_double(key, v);
        } else if (key == "eta_units") {
            if (v == "absolute") eta_units = EtaUnits::Absolute;
            else if (v == "condition1") eta_units = EtaUnits::ConditionOne;
            else if (v == "per-beta2") eta_units = EtaUnits::PerBetaSquared;
            else throw UsageError("eta_units must be absolute, condition1 or per-beta2: " + v);
        } else if (key == "iterations") {
            iterations = detail::parse_uint(key, v);
        } else if (key == "noise_sigma") {
            noise_sigma = detail::parse_double(key, v);
        } else if (key == "batch_size") {
            batch_size = detail::parse_uint(key, v);
        } else if (key == "record_every") {
            record_every = detail::parse_uint(key, v);
        } else if (key == "samplers") {
            samplers = detail::split(v, ',');
            for (const auto& s : samplers) SamplerSpec::parse(s);
        } else if (key == "series_etas") {
            series_etas = v == "none" ? Vector{} : vec();
        } else if (key == "r_max") {
            r_max = detail::parse_double(key, v);
        } else if (key == "total_alpha") {
            total_alpha = detail::parse_double(key, v);
        } else if (key == "seeds") {
            seeds = parse_seed_list(v);
        } else if (key == "checks") {
            checks.clear();
            if (v != "none") {
                for (const auto& item : detail::split(v, ',')) {
                    const auto colon = item.rfind(':');
                    if (colon == std::string::npos) throw UsageError("checks entries look like series:Thm3, got " + item);
                    checks.push_back({item.substr(0, colon), parse_theorem(item.substr(colon + 1))});
                }
            }
        } else if (key == "init_perturbation") {
            init_perturbation = detail::parse_double(key, v);
        } else if (key == "lower_bound_audit") {
            lower_bound_audit = detail::parse_bool(key, v);
        } else if (key == "divergence_fatal") {
            divergence_fatal = detail::parse_bool(key, v);
        } else if (key == "workers") {
            workers = detail::parse_uint(key, v);
        } else {
            throw UsageError("unknown config key: " + key);
        }
    } catch (const UsageError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw UsageError("config key '" + key + "': " + e.what());
    }
}

inline std::string ExperimentConfig::to_text() const {
    std::ostringstream o;
    auto list = [](const Vector& v) {
        std::string s;
        for (double x : v) s += (s.empty() ? "" : ",") + detail::fmt17(x);
        return s.empty() ? std::string("none") : s;
    };
    std::string sampler_list, check_list;
    for (const auto& s : samplers) sampler_list += (sampler_list.empty() ? "" : ",") + s;
    for (const auto& c : checks) check_list += (check_list.empty() ? "" : ",") + c.series + ":" + to_string(c.theorem);
    o << "name=" << name << '\n'
      << "actions=" << actions << '\n'
      << "rewards=" << to_string(rewards) << '\n'
      << "reward_values=" << list(reward_values) << '\n'
      << "beta=" << detail::fmt17(beta) << '\n'
      << "contexts=" << contexts << '\n'
      << "instance_seed=" << (instance_seed ? std::to_string(*instance_seed) : "none") << '\n'
      << "mode=" << to_string(mode) << '\n'
      << "eta=" << detail::fmt17(eta) << '\n'
      << "eta_units=" << to_string(eta_units) << '\n'
      << "iterations=" << iterations << '\n'
      << "noise_sigma=" << detail::fmt17(noise_sigma) << '\n'
      << "batch_size=" << batch_size << '\n'
      << "record_every=" << record_every << '\n'
      << "samplers=" << sampler_list << '\n'
      << "series_etas=" << list(series_etas) << '\n'
      << "r_max=" << detail::fmt17(r_max) << '\n'
      << "total_alpha=" << detail::fmt17(total_alpha) << '\n'
      << "seeds=" << format_seed_list(seeds) << '\n'
      << "checks=" << (check_list.empty() ? "none" : check_list) << '\n'
      << "init_perturbation=" << detail::fmt17(init_perturbation) << '\n'
      << "lower_bound_audit=" << (lower_bound_audit ? "true" : "false") << '\n'
      << "divergence_fatal=" << (divergence_fatal ? "true" : "false") << '\n'
      << "workers=" << workers << '\n';
    return o.str();
}

inline void ExperimentConfig::validate() const {
    if (actions < 2) throw UsageError("actions must be at least 2");
    if (rewards == RewardDist::Fixed && reward_values.size() != actions) {
        throw UsageError("fixed rewards need exactly one reward_values entry per action");
    }
    if (!(beta > 0.0) || !std::isfinite(beta)) throw UsageError("beta must be positive");
    if (contexts == 0) throw UsageError("contexts must be at least 1");
    if (samplers.empty()) throw UsageError("at least one sampler is required");
    if (!series_etas.empty() && series_etas.size() != samplers.size()) {
        throw UsageError("series_etas needs one entry per sampler");
    }
    if (seeds.empty()) throw UsageError("at least one seed is required");
    if (record_every == 0) throw UsageError("record_every must be positive");
    if (mode == GradientMode::EmpiricalNoise && !(noise_sigma > 0.0)) {
        throw UsageError("empirical-noise mode needs noise_sigma > 0");
    }
    if (mode == GradientMode::EmpiricalPairs && batch_size == 0) throw UsageError("batch_size must be positive");
    if (init_perturbation < 0.0) throw UsageError("init_perturbation must be nonnegative");
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < samplers.size(); ++i) labels.push_back(series_label(i));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (std::count(labels.begin(), labels.end(), labels[i]) > 1) {
            throw UsageError("duplicate series label: " + labels[i]);
        }
    }
    for (const auto& c : checks) {
        if (std::find(labels.begin(), labels.end(), c.series) == labels.end()) {
            throw UsageError("check refers to an unknown series: " + c.series);
        }
        const bool noisy = c.theorem == Theorem::Thm5 || c.theorem == Theorem::Thm6;
        if (noisy && mode != GradientMode::EmpiricalNoise) {
            throw UsageError(std::string(to_string(c.theorem)) + " checks need mode=empirical-noise");
        }
        if (noisy && !instance_seed) {
            throw UsageError(std::string(to_string(c.theorem)) + " checks need a shared instance_seed");
        }
        if (!noisy && mode != GradientMode::Exact) {
            throw UsageError(std::string(to_string(c.theorem)) + " checks need mode=exact");
        }
        if (!noisy && record_every != 1) throw UsageError("bound checks need record_every=1");
    }
    if (lower_bound_audit && record_every != 1) throw UsageError("lower_bound_audit needs record_every=1");
}

/// Reads `key = value` lines; `#` starts a comment. A `preset` key seeds the
/// config from that preset before the remaining keys are applied.
inline ExperimentConfig preset(const std::string& name);

inline ExperimentConfig parse_config(std::istream& in) {
    std::vector<std::pair<std::string, std::string>> entries;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw UsageError("config line " + std::to_string(lineno) + ": expected key=value");
        }
        entries.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    ExperimentConfig cfg;
    for (const auto& [k, v] : entries) {
        if (k == "preset") cfg = preset(v);
    }
    for (const auto& [k, v] : entries) {
        if (k != "preset") cfg.set(k, v);
    }
    cfg.validate();
    return cfg;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file: " + path);
    return parse_config(in);
}

inline void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw UsageError("override must look like key=value: " + assignment);
    cfg.set(detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline std::vector<std::string> preset_names() {
    return {"fig1-exact",      "fig1-empirical", "thm-verify-unif", "thm-verify-mixr", "thm-verify-mixp",
            "thm-verify-empirical", "lowerbound-3arm", "ablate-mixr", "ablate-mixp", "practical-demo"};
}

inline ExperimentConfig preset(const std::string& name) {
    ExperimentConfig c;
    c.name = name;
    auto theorem_base = [&](const std::string& sampler, std::size_t t, Theorem thm) {
        c.actions = 20;
        c.rewards = RewardDist::Uniform;
        c.beta = 3.0;
        c.eta = 1.0;
        c.eta_units = EtaUnits::ConditionOne;
        c.iterations = t;
        c.samplers = {sampler};
        c.seeds = parse_seed_list("41..50");
        c.checks = {{sampler, thm}};
        c.divergence_fatal = true;
    };
    if (name == "fig1-exact") {
        c.samplers = {"unif", "mixr", "mixp", "mixpstar"};
        c.seeds = parse_seed_list("41..50");
    } else if (name == "fig1-empirical") {
        c.samplers = {"unif", "mixr", "mixp", "mixpstar"};
        c.mode = GradientMode::EmpiricalPairs;
        c.batch_size = 1000;
        c.iterations = 3000;
        c.eta = 0.05;
        c.record_every = 10;
    } else if (name == "thm-verify-unif") {
        theorem_base("unif", 25, Theorem::Thm1);
    } else if (name == "thm-verify-mixr") {
        theorem_base("mixr", 6, Theorem::Thm3);
    } else if (name == "thm-verify-mixp") {
        theorem_base("mixp", 6, Theorem::Thm4);
    } else if (name == "thm-verify-empirical") {
        theorem_base("mixr", 0, Theorem::Thm5);
        c.actions = 10;
        c.mode = GradientMode::EmpiricalNoise;
        c.noise_sigma = 1.0 / 600.0;
        c.iterations = noisy_bound_iterations(c.noise_sigma);
        c.samplers = {"mixr", "mixpstar"};
        c.checks = {{"mixr", Theorem::Thm5}, {"mixpstar", Theorem::Thm6}};
        c.seeds = parse_seed_list("41..240");
        c.instance_seed = 41;
    } else if (name == "lowerbound-3arm") {
        c.actions = 3;
        c.rewards = RewardDist::Fixed;
        c.reward_values = {0.0, 1.0 / 3.0, 1.0};
        c.beta = 1.0;
        c.eta_units = EtaUnits::PerBetaSquared;
        c.samplers = {"unif", "unif", "unif"};
        c.series_etas = {0.1, 1.0 / 3.0, 0.6};
        c.iterations = 50;
        c.seeds = {41};
        c.init_perturbation = 1e-4;
        c.lower_bound_audit = true;
        c.divergence_fatal = true;
    } else if (name == "ablate-mixr") {
        c.samplers = {"mixr", "mixr-uniform", "mixr-guided"};
    } else if (name == "ablate-mixp") {
        c.samplers = {"mixp", "mixp-uniform", "mixp-guided"};
    } else if (name == "practical-demo") {
        c.samplers = {"unif", "practical"};
        c.r_max = 4.0;
    } else {
        throw UsageError("unknown preset: " + name);
    }
    c.validate();
    return c;
}

/// Rewards of one context. Normal draws use Box-Muller over the project's own
/// uniform stream so that instances do not depend on the standard library.
inline Vector draw_rewards(const ExperimentConfig& cfg, std::uint64_t seed, std::size_t context) {
    if (cfg.rewards == RewardDist::Fixed) return cfg.reward_values;
    Rng rng(derive_seed(seed, 1000 + context));
    Vector r(cfg.actions);
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (cfg.rewards == RewardDist::Uniform) {
            r[i] = uniform01(rng);
        } else {
            const double u1 = 1.0 - uniform01(rng);
            const double u2 = uniform01(rng);
            r[i] = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
        }
    }
    return r;
}

/// Optimal logits shifted so that delta(y_{k+1}, y_k) alternates 0.6 eps and
/// 0.4 eps along the action order.
inline Vector perturbed_start(const BanditInstance& inst, double eps) {
    Vector theta = optimal_logits(inst);
    double shift = 0.0;
    for (std::size_t k = 1; k < theta.size(); ++k) {
        shift += (k % 2 == 1 ? 0.6 : 0.4) * eps;
        theta[k] -= shift / inst.beta;
    }
    return theta;
}

struct InstanceRecord {
    std::uint64_t seed = 0;
    std::size_t context = 0;
    BanditInstance instance;
};

struct ContextResult {
    std::size_t context = 0;
    Trajectory trajectory;
    RateReport rate;
    std::optional<BoundCheck> bound;
    std::optional<LinearityAudit> linearity;
};

struct CellResult {
    std::size_t series = 0;
    std::string label;
    std::string sampler;
    std::uint64_t seed = 0;
    double eta = 0.0;
    bool diverged = false;
    std::size_t diverged_at = 0;
    std::string error;
    std::vector<ContextResult> contexts;

    std::string run_id(const std::string& preset_name) const {
        return preset_name + "/" + label + "/" + std::to_string(seed);
    }
};

struct PopulationCheck {
    std::string series;
    NoisyBoundCheck result;
};

struct ExperimentResult {
    ExperimentConfig config;
    std::vector<InstanceRecord> instances;
    std::vector<CellResult> cells;
    std::vector<PopulationCheck> population_checks;
    std::vector<std::string> failures;

    bool passed() const { return failures.empty(); }
};

namespace detail {

inline std::uint64_t instance_seed_for(const ExperimentConfig& cfg, std::uint64_t seed) {
    return cfg.instance_seed ? *cfg.instance_seed : seed;
}

inline const BanditInstance& find_instance(const std::vector<InstanceRecord>& all, std::uint64_t seed,
                                           std::size_t context) {
    for (const auto& r : all) {
        if (r.seed == seed && r.context == context) return r.instance;
    }
    throw std::logic_error("instance not generated");
}

inline std::optional<Theorem> exact_check_for(const ExperimentConfig& cfg, const std::string& label) {
    for (const auto& c : cfg.checks) {
        if (c.series == label && c.theorem != Theorem::Thm5 && c.theorem != Theorem::Thm6) return c.theorem;
    }
    return std::nullopt;
}

inline CellResult run_cell(const ExperimentConfig& cfg, const std::vector<InstanceRecord>& instances,
                           std::size_t series, std::uint64_t seed) {
    CellResult cell;
    cell.series = series;
    cell.label = cfg.series_label(series);
    cell.sampler = cfg.samplers[series];
    cell.seed = seed;
    cell.eta = cfg.effective_eta(cfg.series_eta(series));

    TrainConfig tc;
    tc.mode = cfg.mode;
    tc.eta = cell.eta;
    tc.iterations = cfg.iterations;
    tc.noise_sigma = cfg.noise_sigma;
    tc.batch_size = cfg.batch_size;
    tc.sampler = SamplerSpec::parse(cell.sampler);
    tc.sampler.r_max = cfg.r_max;
    tc.sampler.total_alpha = cfg.total_alpha;
    tc.record_every = cfg.record_every;
    const std::uint64_t cell_seed = derive_seed(seed, 17 + series);
    const auto check = exact_check_for(cfg, cell.label);

    for (std::size_t x = 0; x < cfg.contexts; ++x) {
        const BanditInstance& inst = find_instance(instances, instance_seed_for(cfg, seed), x);
        TrainConfig c = tc;
        c.seed = cfg.contexts == 1 ? cell_seed : derive_seed(cell_seed, x);
        Vector start;
        if (cfg.init_perturbation > 0.0) start = perturbed_start(inst, cfg.init_perturbation);
        ContextResult cr;
        cr.context = x;
        try {
            cr.trajectory = run(inst, c, start);
        } catch (const DivergedError& e) {
            cr.trajectory = e.partial();
            if (!cell.diverged) {
                cell.diverged = true;
                cell.diverged_at = e.iteration();
            }
        }
        cr.rate = classify_rate(cr.trajectory);
        if (check) cr.bound = check_bound(cr.trajectory, *check, inst, cell.eta);
        if (cfg.lower_bound_audit) {
            std::vector<double> errors;
            for (const auto& r : cr.trajectory.records) errors.push_back(r.max_abs_delta);
            cr.linearity = audit_at_most_linear(errors, 5, 50);
        }
        cell.contexts.push_back(std::move(cr));
    }
    return cell;
}

}  // namespace detail

/// Runs every (series, seed) cell on a bounded pool. Results are stored in
/// series-major, seed-minor order whatever the completion order.
inline ExperimentResult run_experiment(const ExperimentConfig& config) {
    config.validate();
    ExperimentResult res;
    res.config = config;

    std::vector<std::uint64_t> inst_seeds;
    for (auto s : config.seeds) {
        const auto is = detail::instance_seed_for(config, s);
        if (std::find(inst_seeds.begin(), inst_seeds.end(), is) == inst_seeds.end()) inst_seeds.push_back(is);
    }
    for (auto s : inst_seeds) {
        for (std::size_t x = 0; x < config.contexts; ++x) {
            res.instances.push_back({s, x, BanditInstance(draw_rewards(config, s, x), config.beta)});
        }
    }

    const std::size_t n_cells = config.samplers.size() * config.seeds.size();
    res.cells.resize(n_cells);
    std::vector<std::exception_ptr> errors(n_cells);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < n_cells; i = next++) {
            try {
                res.cells[i] = detail::run_cell(config, res.instances, i / config.seeds.size(),
                                                config.seeds[i % config.seeds.size()]);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::size_t n_workers = config.workers ? config.workers : std::max(1u, std::thread::hardware_concurrency());
    n_workers = std::min(n_workers, n_cells);
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    for (const auto& cell : res.cells) {
        const std::string id = cell.run_id(config.name);
        if (cell.diverged && config.divergence_fatal) {
            res.failures.push_back(id + ": diverged at iteration " + std::to_string(cell.diverged_at));
        }
        for (const auto& cr : cell.contexts) {
            if (cr.bound && !cr.bound->passed) {
                res.failures.push_back(id + ": " + to_string(cr.bound->theorem) + " bound violated");
            }
            if (cr.linearity && !cr.linearity->passed) {
                res.failures.push_back(id + ": lower-bound linearity audit failed");
            }
        }
    }

    for (const auto& chk : config.checks) {
        if (chk.theorem != Theorem::Thm5 && chk.theorem != Theorem::Thm6) continue;
        for (std::size_t x = 0; x < config.contexts; ++x) {
            std::vector<Vector> finals;
            double eta = 0.0;
            bool diverged = false;
            for (const auto& cell : res.cells) {
                if (cell.label != chk.series) continue;
                eta = cell.eta;
                const auto& tr = cell.contexts[x].trajectory;
                if (tr.final_theta.empty()) diverged = true;
                else finals.push_back(tr.final_theta.front());
            }
            PopulationCheck pc;
            pc.series = chk.series;
            if (diverged) {
                pc.result.check.theorem = chk.theorem;
                pc.result.check.passed = false;
            } else {
                pc.result = check_noisy_bound(finals, chk.theorem,
                                              detail::find_instance(res.instances, *config.instance_seed, x), eta,
                                              config.noise_sigma);
            }
            if (!pc.result.check.passed) {
                res.failures.push_back(config.name + "/" + chk.series + ": " + to_string(chk.theorem) +
                                       " population bound violated");
            }
            res.population_checks.push_back(std::move(pc));
        }
    }
    return res;
}

inline constexpr const char* kCsvHeader =
    "run_id,preset,sampler,seed,context,iter,max_abs_delta,sum_abs_delta,value_gap,kl_to_ref,rejection_count";

inline void write_metrics_csv(const ExperimentResult& res, std::ostream& out) {
    out << kCsvHeader << '\n';
    for (const auto& cell : res.cells) {
        const std::string prefix = cell.run_id(res.config.name) + ',' + res.config.name + ',' + cell.label + ',' +
                                   std::to_string(cell.seed) + ',';
        for (const auto& cr : cell.contexts) {
            for (const auto& r : cr.trajectory.records) {
                out << prefix << cr.context << ',' << r.iteration << ',' << detail::fmt17(r.max_abs_delta) << ','
                    << detail::fmt17(r.sum_abs_delta) << ',' << detail::fmt17(r.value_gap) << ','
                    << detail::fmt17(r.kl_to_ref) << ',' << r.rejection_count << '\n';
            }
        }
    }
}

inline void write_rewards_csv(const ExperimentResult& res, std::ostream& out) {
    out << "instance_seed,context,action,reward\n";
    for (const auto& rec : res.instances) {
        for (std::size_t a = 0; a < rec.instance.rewards.size(); ++a) {
            out << rec.seed << ',' << rec.context << ',' << a << ',' << detail::fmt17(rec.instance.rewards[a]) << '\n';
        }
    }
}

namespace detail {

inline nlohmann::json to_json(const RateReport& r) {
    nlohmann::json j;
    j["classification"] = to_string(r.classification);
    j["contraction_estimate"] = std::isfinite(r.contraction_estimate) ? nlohmann::json(r.contraction_estimate)
                                                                      : nlohmann::json(nullptr);
    j["log_ratio_series"] = r.log_ratio_series;
    j["plateau_floor"] = r.plateau_floor;
    j["reached_plateau"] = r.reached_plateau;
    return j;
}

inline nlohmann::json to_json(const BoundCheck& b) {
    nlohmann::json j;
    j["theorem"] = to_string(b.theorem);
    j["verdict"] = b.passed ? "pass" : "fail";
    j["records_checked"] = b.records_checked;
    if (b.first_violation) {
        const auto& v = *b.first_violation;
        j["first_violation"] = {{"iteration", v.iteration}, {"first", v.first}, {"second", v.second},
                                {"observed", v.observed},   {"bound", v.bound}};
    }
    return j;
}

}  // namespace detail

inline nlohmann::json manifest_json(const ExperimentResult& res) {
    using nlohmann::json;
    const auto& cfg = res.config;
    json m;
    m["software"] = {{"name", "dposim"}, {"version", kVersion}};
    m["preset"] = cfg.name;
    m["resolved_config"] = cfg.to_text();
    json c;
    c["actions"] = cfg.actions;
    c["rewards"] = to_string(cfg.rewards);
    c["beta"] = cfg.beta;
    c["contexts"] = cfg.contexts;
    c["instance_seed"] = cfg.instance_seed ? json(*cfg.instance_seed) : json(nullptr);
    c["mode"] = to_string(cfg.mode);
    c["eta"] = cfg.eta;
    c["eta_units"] = to_string(cfg.eta_units);
    c["iterations"] = cfg.iterations;
    c["noise_sigma"] = cfg.noise_sigma;
    c["batch_size"] = cfg.batch_size;
    c["record_every"] = cfg.record_every;
    c["samplers"] = cfg.samplers;
    c["series_etas"] = cfg.series_etas;
    c["r_max"] = cfg.r_max;
    c["total_alpha"] = cfg.total_alpha;
    c["seeds"] = cfg.seeds;
    c["init_perturbation"] = cfg.init_perturbation;
    c["lower_bound_audit"] = cfg.lower_bound_audit;
    c["divergence_fatal"] = cfg.divergence_fatal;
    json checks = json::array();
    for (const auto& k : cfg.checks) checks.push_back({{"series", k.series}, {"theorem", to_string(k.theorem)}});
    c["checks"] = checks;
    m["config"] = c;

    json insts = json::array();
    for (const auto& r : res.instances) {
        insts.push_back({{"instance_seed", r.seed},
                         {"context", r.context},
                         {"beta", r.instance.beta},
                         {"rewards", r.instance.rewards},
                         {"theta_ref", r.instance.theta_ref}});
    }
    m["instances"] = insts;

    json cells = json::array();
    for (const auto& cell : res.cells) {
        json j;
        j["run_id"] = cell.run_id(cfg.name);
        j["series"] = cell.label;
        j["sampler"] = cell.sampler;
        j["seed"] = cell.seed;
        j["instance_seed"] = detail::instance_seed_for(cfg, cell.seed);
        j["eta_effective"] = cell.eta;
        j["status"] = cell.diverged ? "diverged" : "ok";
        if (cell.diverged) j["diverged_at"] = cell.diverged_at;
        json ctxs = json::array();
        for (const auto& cr : cell.contexts) {
            json k;
            k["context"] = cr.context;
            k["rate"] = detail::to_json(cr.rate);
            if (cr.bound) k["bound_check"] = detail::to_json(*cr.bound);
            if (cr.linearity) {
                const auto& a = *cr.linearity;
                k["linearity_audit"] = {{"verdict", a.passed ? "pass" : "fail"},
                                        {"max_rho", a.max_rho},
                                        {"mean_ratio", a.mean_ratio},
                                        {"max_ratio_deviation", a.max_ratio_deviation},
                                        {"ratios_checked", a.ratios_checked}};
            }
            if (!cr.trajectory.final_theta.empty()) k["final_theta"] = cr.trajectory.final_theta.front();
            ctxs.push_back(k);
        }
        j["contexts"] = ctxs;
        cells.push_back(j);
    }
    m["cells"] = cells;

    json pops = json::array();
    for (const auto& p : res.population_checks) {
        json j = detail::to_json(p.result.check);
        j["series"] = p.series;
        j["max_pair_rms"] = p.result.max_pair_rms;
        j["threshold"] = p.result.threshold;
        j["iterations"] = p.result.iterations;
        pops.push_back(j);
    }
    m["population_checks"] = pops;

    // One summary verdict per requested theorem, e.g. "Thm3: pass".
    std::map<std::string, bool> by_thm;
    for (const auto& cell : res.cells) {
        for (const auto& cr : cell.contexts) {
            if (cr.bound) {
                auto [it, _] = by_thm.emplace(to_string(cr.bound->theorem), true);
                it->second = it->second && cr.bound->passed;
            }
        }
    }
    for (const auto& p : res.population_checks) {
        auto [it, _] = by_thm.emplace(to_string(p.result.check.theorem), true);
        it->second = it->second && p.result.check.passed;
    }
    if (cfg.lower_bound_audit) {
        bool ok = true;
        for (const auto& cell : res.cells) {
            for (const auto& cr : cell.contexts) ok = ok && cr.linearity && cr.linearity->passed;
        }
        by_thm.emplace("Thm2-at-most-linear", ok);
    }
    json verdicts = json::array();
    for (const auto& [thm, ok] : by_thm) verdicts.push_back(thm + (ok ? ": pass" : ": fail"));
    m["verdicts"] = verdicts;
    m["passed"] = res.passed();
    m["failures"] = res.failures;
    return m;
}

/// Writes metrics.csv, rewards.csv and manifest.json under `dir`.
inline void write_outputs(const ExperimentResult& res, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    auto write = [&](const char* file, auto&& body) {
        const auto path = dir / file;
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write " + path.string());
        body(out);
        out.flush();
        if (!out) throw IoError("write failed: " + path.string());
    };
    write("metrics.csv", [&](std::ostream& o) { write_metrics_csv(res, o); });
    write("rewards.csv", [&](std::ostream& o) { write_rewards_csv(res, o); });
    write("manifest.json", [&](std::ostream& o) { o << manifest_json(res).dump(2) << '\n'; });
}

/// Exit status for `run`: nonzero iff a requested check failed or a run
/// diverged under a preset that declares divergence fatal.
inline int exit_status(const ExperimentResult& res) { return res.passed() ? 0 : 1; }

struct VerifyRow {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct SweepOptions {
    std::size_t draws = 1000;
    std::uint64_t seed = 7;
};

/// Performance-difference decomposition on random instances and logits.
inline VerifyRow perf_diff_sweep(const SweepOptions& opt = {}) {
    Rng rng(opt.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    double worst_eq = 0.0, worst_bound = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < opt.draws; ++i) {
        const std::size_t a = 2 + static_cast<std::size_t>(uniform01(rng) * 19.0);
        const double beta = 0.1 + 4.9 * uniform01(rng);
        Vector r(a), ref(a), theta(a);
        for (std::size_t y = 0; y < a; ++y) {
            r[y] = normal(rng);
            ref[y] = normal(rng);
            theta[y] = 2.0 * normal(rng);
        }
        const BanditInstance inst(r, beta, ref);
        const PerfDiffAudit au = perf_diff_audit(theta, inst);
        worst_eq = std::max(worst_eq, std::abs(au.lhs - au.middle));
        worst_bound = std::max(worst_bound, au.lhs - au.bound);
    }
    VerifyRow row{"perf-diff-sweep", worst_eq <= 1e-10 && worst_bound <= 1e-10, ""};
    char buf[128];
    std::snprintf(buf, sizeof buf, "max|lhs-middle|=%.3g max(lhs-bound)=%.3g", worst_eq, worst_bound);
    row.detail = buf;
    return row;
}

/// argmax of the mixed-logit distribution equals argmax of p1^w1 p2^w2.
inline VerifyRow logit_mixing_sweep(const SweepOptions& opt = {}) {
    Rng rng(opt.seed + 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::size_t mismatches = 0;
    for (std::size_t i = 0; i < opt.draws; ++i) {
        const std::size_t a = 2 + static_cast<std::size_t>(uniform01(rng) * 49.0);
        Vector l1(a), l2(a);
        for (std::size_t y = 0; y < a; ++y) {
            l1[y] = normal(rng);
            l2[y] = normal(rng);
        }
        const Vector p1 = softmax(l1), p2 = softmax(l2);
        const double w1 = 0.1 + 2.0 * uniform01(rng), w2 = 0.1 + 2.0 * uniform01(rng);
        const Vector q = geometric_mixture(p1, p2, w1, w2);
        std::size_t best = 0;
        for (std::size_t y = 1; y < a; ++y) {
            if (std::pow(p1[y], w1) * std::pow(p2[y], w2) > std::pow(p1[best], w1) * std::pow(p2[best], w2)) best = y;
        }
        const auto got = static_cast<std::size_t>(std::max_element(q.begin(), q.end()) - q.begin());
        if (got != best) ++mismatches;
    }
    return {"logit-mixing-sweep", mismatches == 0, std::to_string(mismatches) + " argmax mismatches"};
}

/// alpha_1 joint_1 + alpha_2 joint_2 = 1 / sigma'(gap) off the diagonal.
inline VerifyRow weighted_joint_sweep(const SweepOptions& opt = {}) {
    Rng rng(opt.seed + 2);
    std::normal_distribution<double> normal(0.0, 1.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < opt.draws / 10; ++i) {
        const std::size_t a = 2 + static_cast<std::size_t>(uniform01(rng) * 19.0);
        const double beta = 0.1 + 4.9 * uniform01(rng);
        Vector r(a), theta(a);
        for (std::size_t y = 0; y < a; ++y) {
            r[y] = normal(rng);
            theta[y] = normal(rng);
        }
        const BanditInstance inst(r, beta);
        const Matrix wr = build_mix_r(inst).weighted_joint();
        const Matrix wp = build_mix_p(theta, inst).weighted_joint();
        for (std::size_t y = 0; y < a; ++y) {
            for (std::size_t y2 = 0; y2 < a; ++y2) {
                if (y == y2) continue;
                const double gr = 1.0 / sigmoid_prime(r[y] - r[y2]);
                const double gp = 1.0 / sigmoid_prime(beta * (theta[y] - theta[y2]));
                worst = std::max({worst, std::abs(wr(y, y2) - gr) / gr, std::abs(wp(y, y2) - gp) / gp});
            }
        }
    }
    char buf[96];
    std::snprintf(buf, sizeof buf, "max relative error %.3g", worst);
    return {"weighted-joint-sweep", worst <= 1e-10, buf};
}

inline VerifyRow preset_row(const std::string& name) {
    const ExperimentResult res = run_experiment(preset(name));
    std::string detail;
    const nlohmann::json m = manifest_json(res);
    for (const auto& v : m["verdicts"]) detail += (detail.empty() ? "" : "; ") + v.get<std::string>();
    return {name, res.passed(), detail};
}

/// Every theorem preset, the lower-bound preset and the property sweeps.
inline std::vector<VerifyRow> verify_all() {
    std::vector<VerifyRow> rows;
    for (const char* p : {"thm-verify-unif", "thm-verify-mixr", "thm-verify-mixp", "thm-verify-empirical",
                          "lowerbound-3arm"}) {
        rows.push_back(preset_row(p));
    }
    rows.push_back(perf_diff_sweep());
    rows.push_back(logit_mixing_sweep());
    rows.push_back(weighted_joint_sweep());
    return rows;
}

}  // namespace dposim
