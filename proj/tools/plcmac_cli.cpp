#include "plcmac/errors.hpp"
#include "plcmac/experiment.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

using namespace plcmac;

namespace {

// Flag values are kept as text and routed through the config setters so the
// command line and config files share one parser.
struct Overrides {
    std::string config_path;
    std::map<std::string, std::string> values;
    std::string engine;
};

void add_scenario_flags(CLI::App* cmd, Overrides& o)
{
    cmd->add_option("--config", o.config_path, "Experiment config file")->check(CLI::ExistingFile);
    auto flag = [&](const std::string& name, const std::string& key, const std::string& help) {
        cmd->add_option(name, o.values[key], help);
    };
    flag("--out", "out", "Output directory (default $PLCMAC_OUT_DIR or ./results)");
    flag("--name", "name", "File stem for outputs");
    flag("--n", "n", "Node counts, e.g. 10,30,50 or 5:50:5");
    flag("--lambda", "lambda", "Arrival rates in packets/s, sweep a:b:step, or 'saturated'");
    flag("--category", "category", "ca32 or ca10 (list allowed)");
    flag("--variant", "variant", "standard, no-defer or always-defer (list allowed)");
    flag("--kernel", "kernel", "exact, table or exp");
    flag("--init-I", "init_i", "Initial idle-slot values, e.g. 0,1000");
    flag("--tolerance", "tolerance", "Fixed-point tolerance");
    flag("--table-cache", "table_cache", "Directory for precomputed kernel tables");
    flag("--seed", "seeds", "Seed or seed list");
    flag("--duration-s", "duration_s", "Simulated seconds");
    flag("--warmup-s", "warmup_s", "Seconds discarded before measuring");
    flag("--preload", "preload", "Packets per queue at start");
    flag("--queue-cap", "queue_cap", "Queue capacity in packets");
    flag("--jobs", "jobs", "Worker threads");
}

ExperimentConfig build_config(const Overrides& o, std::optional<Engine> forced)
{
    ExperimentConfig config;
    if (!o.config_path.empty()) {
        std::ifstream in(o.config_path);
        if (!in)
            throw ConfigError(fmt::format("cannot open config '{}'", o.config_path));
        config = parse_config(in, o.config_path, false);
    }
    for (const auto& [key, value] : o.values) {
        if (!value.empty())
            set_config_value(config, key, value);
    }
    if (!o.engine.empty())
        config.engine = parse_engine(o.engine);
    if (forced)
        config.engine = *forced;
    validate(config);
    return config;
}

void print_rows(const std::vector<ResultRow>& rows)
{
    fmt::print("{:>5} {:>10} {:>5} {:>13} {:>16} {:>10} {:>12} {:>8} {:>8} {:>9} {:>9} {:>4}  {}\n", "n",
               "lambda", "cat", "variant", "branch", "S_mbps", "X_us", "p", "rho", "mu_sat", "stability",
               "conv", "error");
    for (const auto& r : rows) {
        fmt::print("{:>5} {:>10} {:>5} {:>13} {:>16} {:>10.4f} {:>12.2f} {:>8.4f} {:>8} {:>9.4f} {:>9} {:>4}  {}\n",
                   r.n, lambda_label(r.lambda), to_string(r.category), to_string(r.variant), r.branch,
                   r.throughput, r.service_time, r.p, r.rho ? fmt::format("{:.4f}", *r.rho) : "-",
                   r.mu_sat, r.stability ? to_string(*r.stability) : "-",
                   r.converged ? (*r.converged ? "yes" : "no") : "-", r.error);
    }
}

int run_experiment_verb(const Overrides& o, std::optional<Engine> engine)
{
    const ExperimentConfig config = build_config(o, engine);
    const ExperimentResult result = run_experiment(config);
    print_rows(result.rows);
    if (!result.comparisons.empty()) {
        double worst = 0.0;
        for (const auto& c : result.comparisons) {
            if (c.analysis_branch == branch_label_analysis(0.0) || c.analysis_branch == "analysis-sat")
                worst = std::max(worst, c.s_rel_error());
        }
        fmt::print("max |S_sim - S_analysis|/S_analysis against analysis-I0/sat: {:.4f}\n", worst);
    }
    for (const auto& f : result.files)
        fmt::print("wrote {}\n", f.string());
    return 0;
}

int run_probe_verb(const Overrides& o)
{
    const ExperimentConfig config = build_config(o, Engine::Sim);
    const auto rows = run_probes(config);
    fmt::print("{:>5} {:>8} {:>5} {:>13} {:>6} {:>8} {:>12} {:>10} {:>10} {:>11}\n", "n", "lambda", "cat",
               "variant", "seed", "mu_sat", "transition_s", "S_before", "S_after", "first_full");
    for (const auto& r : rows) {
        fmt::print("{:>5} {:>8} {:>5} {:>13} {:>6} {:>8.4f} {:>12} {:>10.4f} {:>10.4f} {:>11}\n", r.n,
                   lambda_label(r.lambda), to_string(r.category), to_string(r.variant), r.seed, r.mu_sat,
                   r.transition_time_s ? fmt::format("{:g}", *r.transition_time_s) : "NONE", r.mean_before,
                   r.mean_after, r.first_full_s ? fmt::format("{:g}", *r.first_full_s) : "NONE");
    }
    fmt::print("wrote {}\n", (resolve_out_dir(config.out_dir) / (config.name + "_probes.csv")).string());
    return 0;
}

int run_bench_verb(const Overrides& o)
{
    const ExperimentConfig config = build_config(o, std::nullopt);
    const auto rows = benchmark_runtimes(config);
    fmt::print("{:>5} {:>10} {:>5} {:>13} {:>15} {:>8} {:>14}\n", "n", "lambda", "cat", "variant", "method",
               "repeats", "wall_time_s");
    for (const auto& r : rows) {
        fmt::print("{:>5} {:>10} {:>5} {:>13} {:>15} {:>8} {:>14.6g} {}\n", r.n, lambda_label(r.lambda),
                   to_string(r.category), to_string(r.variant), r.method, r.repeats, r.wall_time_s, r.error);
    }
    const auto dir = resolve_out_dir(config.out_dir);
    std::filesystem::create_directories(dir);
    const auto path = dir / (config.name + "_timing.csv");
    std::ofstream out(path);
    write_timing_csv(out, rows, metadata_lines(config, "timing"));
    fmt::print("wrote {}\n", path.string());
    return 0;
}

int run_plot_verb(const std::string& input, const std::string& kind_text, const std::string& out)
{
    const PlotKind kind = parse_plot_kind(kind_text);
    std::ifstream in(input);
    if (!in)
        throw ConfigError(fmt::format("cannot open '{}'", input));
    const auto dir = resolve_out_dir(out);
    std::vector<std::filesystem::path> files;
    if (kind == PlotKind::timeseries) {
        const auto series = timeseries(read_intervals(in), std::filesystem::path(input).stem().string());
        std::filesystem::create_directories(dir);
        const auto path = dir / (series.label + ".dat");
        std::ofstream os(path);
        write_plot_series(os, series);
        files.push_back(path);
    } else {
        files = emit_plot_data(read_results_csv(in), kind, dir);
    }
    for (const auto& f : files)
        fmt::print("wrote {}\n", f.string());
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Homeplug / IEEE 1901 MAC analysis and simulation"};
    app.require_subcommand(1);

    Overrides solve_o, sim_o, sweep_o, probe_o, bench_o;
    auto* solve = app.add_subcommand("solve", "Fixed-point analysis (both init_I branches)");
    add_scenario_flags(solve, solve_o);
    auto* simulate = app.add_subcommand("simulate", "Slot-level simulation");
    add_scenario_flags(simulate, sim_o);
    bool dump = false;
    simulate->add_flag("--dump-intervals", dump, "Write the per-second interval series");
    auto* sweep = app.add_subcommand("sweep", "Run a config's sweep with its engine");
    add_scenario_flags(sweep, sweep_o);
    sweep->add_option("--engine", sweep_o.engine, "analysis, sim or both");
    auto* probe = app.add_subcommand("probe-transitory", "Empty-start runs with change-point detection");
    add_scenario_flags(probe, probe_o);
    auto* bench = app.add_subcommand("bench", "Wall-clock comparison of exact, exp, table and sim");
    add_scenario_flags(bench, bench_o);
    bench->add_option("--engine", bench_o.engine, "analysis, sim or both");
    bench->add_option("--kernels", bench_o.values["bench_kernels"], "Kernel modes to time, e.g. exact,exp,table");

    std::string plot_input, plot_kind, plot_out;
    auto* plot = app.add_subcommand("plot-data", "Plot-ready columns from a results or interval file");
    plot->add_option("--input", plot_input, "results CSV (or interval CSV for timeseries)")->required();
    plot->add_option("--kind", plot_kind,
                     "S_vs_lambda, X_vs_lambda, S_vs_n, X_vs_p, mu_sat_vs_n or timeseries")
        ->required();
    plot->add_option("--out", plot_out, "Output directory");

    CLI11_PARSE(app, argc, argv);
    if (dump)
        sim_o.values["dump_intervals"] = "true";

    try {
        if (solve->parsed())
            return run_experiment_verb(solve_o, Engine::Analysis);
        if (simulate->parsed())
            return run_experiment_verb(sim_o, Engine::Sim);
        if (sweep->parsed())
            return run_experiment_verb(sweep_o, std::nullopt);
        if (probe->parsed())
            return run_probe_verb(probe_o);
        if (bench->parsed())
            return run_bench_verb(bench_o);
        if (plot->parsed())
            return run_plot_verb(plot_input, plot_kind, plot_out);
    } catch (const ConfigError& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 2;
    } catch (const PlotDataError& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    }
    return 0;
}
